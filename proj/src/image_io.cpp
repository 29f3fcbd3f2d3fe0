#include "leafgrad/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>

#include "leafgrad/io_util.hpp"

#ifdef LEAFGRAD_HAVE_PNG
#include <png.h>
#endif

namespace leafgrad {

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (f == nullptr) fail(ErrorKind::io, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes;
  std::uint8_t buf[65536];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, f)) > 0) bytes.insert(bytes.end(), buf, buf + n);
  const bool err = std::ferror(f) != 0;
  std::fclose(f);
  if (err) fail(ErrorKind::io, "read error on " + path.string());
  return bytes;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  std::FILE* f = std::fopen(tmp.c_str(), "wb");
  if (f == nullptr) fail(ErrorKind::io, "cannot write " + tmp.string());
  const bool ok = std::fwrite(bytes.data(), 1, bytes.size(), f) == bytes.size();
  const bool closed = std::fclose(f) == 0;
  if (!ok || !closed) {
    std::filesystem::remove(tmp);
    fail(ErrorKind::io, "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  write_file_atomic(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  put_u32(out, bits);
}

void ByteReader::need(std::size_t n) {
  if (remaining() < n) fail(ErrorKind::format, context_ + ": truncated data");
}

std::uint32_t ByteReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
  return v;
}

std::uint64_t ByteReader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
  return v;
}

float ByteReader::f32() {
  const std::uint32_t bits = u32();
  float v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

std::string ByteReader::str(std::size_t n) {
  need(n);
  std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
  pos_ += n;
  return s;
}

std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
  return s;
}

namespace {

// Reads one whitespace-delimited header token, skipping '#' comments.
std::size_t pnm_token(const std::vector<std::uint8_t>& b, std::size_t& pos, const std::string& context) {
  for (;;) {
    while (pos < b.size() && std::isspace(b[pos])) ++pos;
    if (pos < b.size() && b[pos] == '#') {
      while (pos < b.size() && b[pos] != '\n' && b[pos] != '\r') ++pos;
      continue;
    }
    break;
  }
  if (pos >= b.size() || !std::isdigit(b[pos])) fail(ErrorKind::format, context + ": malformed header");
  std::size_t v = 0;
  while (pos < b.size() && std::isdigit(b[pos])) {
    v = v * 10 + static_cast<std::size_t>(b[pos] - '0');
    if (v > (1u << 30)) fail(ErrorKind::format, context + ": header value too large");
    ++pos;
  }
  return v;
}

}  // namespace

ImageU8 decode_pnm(const std::vector<std::uint8_t>& bytes, const std::string& context) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    fail(ErrorKind::format, context + ": not a binary PGM/PPM file");
  }
  const std::size_t channels = bytes[1] == '6' ? 3 : 1;
  std::size_t pos = 2;
  const std::size_t w = pnm_token(bytes, pos, context);
  const std::size_t h = pnm_token(bytes, pos, context);
  const std::size_t maxval = pnm_token(bytes, pos, context);
  if (w == 0 || h == 0) fail(ErrorKind::format, context + ": zero image extent");
  if (maxval == 0 || maxval > 255) fail(ErrorKind::format, context + ": only 8-bit samples are supported");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) fail(ErrorKind::format, context + ": malformed header");
  ++pos;
  const std::size_t n = w * h * channels;
  if (bytes.size() - pos < n) fail(ErrorKind::format, context + ": truncated pixel data");
  ImageU8 img(h, w, channels);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t v = bytes[pos + i];
    if (v > maxval) fail(ErrorKind::format, context + ": sample exceeds maxval");
    if (maxval != 255) v = static_cast<std::size_t>(std::lround(static_cast<double>(v) * 255.0 / maxval));
    img.pixels[i] = static_cast<std::uint8_t>(v);
  }
  return img;
}

std::vector<std::uint8_t> encode_pnm(const ImageU8& img, const std::string& comment) {
  validate(img);
  std::string header = img.channels == 3 ? "P6\n" : "P5\n";
  if (!comment.empty()) header += "# " + comment + "\n";
  header += std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

ImageU8 read_pnm(const std::filesystem::path& path) { return decode_pnm(read_file_bytes(path), path.string()); }

void write_pnm(const std::filesystem::path& path, const ImageU8& img, const std::string& comment) {
  write_file_atomic(path, encode_pnm(img, comment));
}

std::vector<std::uint8_t> encode_lgf1(const ImageF& img) {
  std::vector<std::uint8_t> out{'L', 'G', 'F', '1'};
  put_u64(out, img.height);
  put_u64(out, img.width);
  put_u64(out, img.channels);
  out.reserve(out.size() + img.values.size() * 4);
  for (float v : img.values) put_f32(out, v);
  return out;
}

ImageF decode_lgf1(const std::vector<std::uint8_t>& bytes, const std::string& context) {
  ByteReader r(bytes, context);
  if (r.str(4) != "LGF1") fail(ErrorKind::format, context + ": bad LGF1 magic");
  const std::uint64_t h = r.u64(), w = r.u64(), c = r.u64();
  if (h == 0 || w == 0 || c == 0 || h > (1u << 20) || w > (1u << 20) || c > 4) {
    fail(ErrorKind::format, context + ": implausible LGF1 extents");
  }
  if (r.remaining() != h * w * c * 4) fail(ErrorKind::format, context + ": LGF1 payload size mismatch");
  ImageF img(h, w, c);
  for (auto& v : img.values) v = r.f32();
  return img;
}

void write_lgf1(const std::filesystem::path& path, const ImageF& img) { write_file_atomic(path, encode_lgf1(img)); }

ImageF read_lgf1(const std::filesystem::path& path) { return decode_lgf1(read_file_bytes(path), path.string()); }

#ifdef LEAFGRAD_HAVE_PNG

bool png_supported() { return true; }

ImageU8 read_png(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    fail(ErrorKind::format, path.string() + ": " + image.message);
  }
  const bool gray = (image.format & PNG_FORMAT_FLAG_COLOR) == 0;
  image.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  ImageU8 img(image.height, image.width, gray ? 1 : 3);
  if (!png_image_finish_read(&image, nullptr, img.pixels.data(), 0, nullptr)) {
    png_image_free(&image);
    fail(ErrorKind::format, path.string() + ": " + image.message);
  }
  return img;
}

#else

bool png_supported() { return false; }

ImageU8 read_png(const std::filesystem::path& path) {
  fail(ErrorKind::format, path.string() + ": PNG support was not compiled in");
}

#endif

ImageU8 read_image(const std::filesystem::path& path) {
  auto bytes = read_file_bytes(path);
  if (bytes.size() >= 8 && bytes[0] == 0x89 && bytes[1] == 'P' && bytes[2] == 'N' && bytes[3] == 'G') {
    return read_png(path);
  }
  return decode_pnm(bytes, path.string());
}

bool is_image_path(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".ppm" || ext == ".pgm" || ext == ".pnm" || ext == ".png";
}

}  // namespace leafgrad

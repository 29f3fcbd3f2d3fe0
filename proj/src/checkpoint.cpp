#include "leafgrad/checkpoint.hpp"

#include <sstream>

#include "leafgrad/io_util.hpp"

namespace leafgrad {

namespace {

std::string config_echo(const std::string& model_text, const CheckpointMeta& meta) {
  std::string text = model_text;
  for (const auto& [k, v] : meta) {
    if (k.empty() || k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      fail(ErrorKind::value, "checkpoint metadata key '" + k + "' or its value is not a single line");
    }
    text += "meta." + k + "=" + v + "\n";
  }
  return text;
}

}  // namespace

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(const ModelGraph<T>& model, const CheckpointMeta& meta) {
  std::vector<std::uint8_t> out{'L', 'G', 'C', '1'};
  put_u32(out, kCheckpointVersion);
  const std::string text = config_echo(model.config_text(), meta);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  const auto tensors = model.state_tensors();
  put_u64(out, tensors.size());
  for (const auto& t : tensors) {
    put_u64(out, t.name.size());
    out.insert(out.end(), t.name.begin(), t.name.end());
    put_u32(out, kDtypeF32);
    put_u32(out, static_cast<std::uint32_t>(t.tensor.rank()));
    for (auto d : t.tensor.shape()) put_u64(out, d);
    for (auto v : t.tensor.data()) put_f32(out, static_cast<float>(v));
  }
  return out;
}

template <typename T>
LoadedCheckpoint<T> decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& context) {
  ByteReader in(bytes, context);
  if (in.str(4) != "LGC1") fail(ErrorKind::format, context + ": not an LGC1 checkpoint (bad magic)");
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion) {
    fail(ErrorKind::format, context + ": unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint64_t text_len = in.u64();
  if (text_len > in.remaining()) fail(ErrorKind::format, context + ": truncated config text");
  const std::string text = in.str(static_cast<std::size_t>(text_len));

  LoadedCheckpoint<T> res;
  std::string model_text;
  {
    std::istringstream lines(text);
    std::string line;
    while (std::getline(lines, line)) {
      if (line.rfind("meta.", 0) == 0) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) fail(ErrorKind::format, context + ": malformed metadata line");
        res.meta[line.substr(5, eq - 5)] = line.substr(eq + 1);
      } else {
        model_text += line + "\n";
      }
    }
  }
  Rng unused(0);
  try {
    res.model = build_from_config_text<T>(model_text, unused);
  } catch (const Error& e) {
    fail(ErrorKind::format, context + ": " + e.what());
  }
  if (config_echo(res.model->config_text(), res.meta) != text) {
    fail(ErrorKind::format, context + ": config text is not in canonical form");
  }

  const std::uint64_t count = in.u64();
  if (count > in.remaining()) fail(ErrorKind::format, context + ": implausible tensor count");
  std::vector<NamedTensor<T>> tensors;
  for (std::uint64_t k = 0; k < count; ++k) {
    const std::uint64_t name_len = in.u64();
    if (name_len > in.remaining()) fail(ErrorKind::format, context + ": truncated tensor name");
    NamedTensor<T> t;
    t.name = in.str(static_cast<std::size_t>(name_len));
    const std::uint32_t dtype = in.u32();
    if (dtype != kDtypeF32) fail(ErrorKind::format, context + ": tensor '" + t.name + "' has unknown dtype " + std::to_string(dtype));
    const std::uint32_t rank = in.u32();
    if (rank == 0 || rank > 8) fail(ErrorKind::format, context + ": tensor '" + t.name + "' has bad rank");
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint64_t dim = in.u64();
      if (dim == 0 || dim > in.remaining()) fail(ErrorKind::format, context + ": tensor '" + t.name + "' has bad extents");
      numel *= dim;
      if (numel * 4 > in.remaining()) fail(ErrorKind::format, context + ": truncated data for tensor '" + t.name + "'");
      shape.push_back(static_cast<std::size_t>(dim));
    }
    std::vector<T> values(static_cast<std::size_t>(numel));
    for (auto& v : values) v = static_cast<T>(in.f32());
    t.tensor = Tensor<T>(std::move(shape), std::move(values));
    tensors.push_back(std::move(t));
  }
  if (!in.at_end()) fail(ErrorKind::format, context + ": trailing bytes after the last tensor");
  try {
    res.model->load_state(tensors);
  } catch (const Error& e) {
    fail(ErrorKind::format, context + ": " + e.what());
  }
  return res;
}

template <typename T>
void save_checkpoint(const ModelGraph<T>& model, const std::filesystem::path& path, const CheckpointMeta& meta) {
  write_file_atomic(path, encode_checkpoint(model, meta));
}

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint<T>(read_file_bytes(path), path.string());
}

#define LEAFGRAD_INSTANTIATE_CKPT(T)                                                                           \
  template std::vector<std::uint8_t> encode_checkpoint(const ModelGraph<T>&, const CheckpointMeta&);          \
  template LoadedCheckpoint<T> decode_checkpoint<T>(const std::vector<std::uint8_t>&, const std::string&);    \
  template void save_checkpoint(const ModelGraph<T>&, const std::filesystem::path&, const CheckpointMeta&);    \
  template LoadedCheckpoint<T> load_checkpoint<T>(const std::filesystem::path&);

LEAFGRAD_INSTANTIATE_CKPT(float)
LEAFGRAD_INSTANTIATE_CKPT(double)

}  // namespace leafgrad

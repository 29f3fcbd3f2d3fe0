#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "leafgrad/image.hpp"

namespace leafgrad {

// Binary PGM (P5) / PPM (P6). Only 8-bit samples are accepted; a maxval
// below 255 is rescaled to 0..255 on read. Writes always use maxval 255 and
// the minimal "P6\n<w> <h>\n255\n" header, plus an optional comment line.
ImageU8 decode_pnm(const std::vector<std::uint8_t>& bytes, const std::string& context = "pnm");
std::vector<std::uint8_t> encode_pnm(const ImageU8& img, const std::string& comment = {});
ImageU8 read_pnm(const std::filesystem::path& path);
void write_pnm(const std::filesystem::path& path, const ImageU8& img, const std::string& comment = {});

// LGF1 float image: "LGF1", height, width, channels as u64 LE, then f32 LE
// values in row-major interleaved order.
std::vector<std::uint8_t> encode_lgf1(const ImageF& img);
ImageF decode_lgf1(const std::vector<std::uint8_t>& bytes, const std::string& context = "lgf1");
void write_lgf1(const std::filesystem::path& path, const ImageF& img);
ImageF read_lgf1(const std::filesystem::path& path);

bool png_supported();
ImageU8 read_png(const std::filesystem::path& path);

// Dispatches on the file signature: P5/P6 or PNG.
ImageU8 read_image(const std::filesystem::path& path);
bool is_image_path(const std::filesystem::path& path);

}  // namespace leafgrad

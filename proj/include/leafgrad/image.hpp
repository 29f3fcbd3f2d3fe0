#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "leafgrad/tensor.hpp"

namespace leafgrad {

// 8-bit image, row-major with interleaved channels (1 = gray, 3 = RGB).
struct ImageU8 {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> pixels;

  ImageU8() = default;
  ImageU8(std::size_t h, std::size_t w, std::size_t c, std::uint8_t fill = 0);

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }

  bool operator==(const ImageU8&) const = default;
};

// Float image with the same interleaved layout.
struct ImageF {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<float> values;

  ImageF() = default;
  ImageF(std::size_t h, std::size_t w, std::size_t c, float fill = 0.0f);

  float& at(std::size_t y, std::size_t x, std::size_t c) { return values[(y * width + x) * channels + c]; }
  float at(std::size_t y, std::size_t x, std::size_t c) const { return values[(y * width + x) * channels + c]; }

  bool operator==(const ImageF&) const = default;
};

void validate(const ImageU8& img);

// Interleaved H x W x C to planar C x H x W.
template <typename T>
Tensor<T> to_chw(const ImageF& img);

// Stacks equally sized images into N x C x H x W.
template <typename T>
Tensor<T> stack_images(std::span<const ImageF> images);

// Binary mask (any nonzero pixel of channel 0 is foreground) as 1 x H x W.
template <typename T>
Tensor<T> mask_to_tensor(const ImageU8& mask);

// Gray or RGB 8-bit image rendered from a float image in [0, 1].
ImageU8 to_u8(const ImageF& img);

}  // namespace leafgrad

#include "leafgrad/image.hpp"

#include <algorithm>
#include <cmath>

namespace leafgrad {

ImageU8::ImageU8(std::size_t h, std::size_t w, std::size_t c, std::uint8_t fill)
    : height(h), width(w), channels(c), pixels(h * w * c, fill) {
  validate(*this);
}

ImageF::ImageF(std::size_t h, std::size_t w, std::size_t c, float fill)
    : height(h), width(w), channels(c), values(h * w * c, fill) {}

void validate(const ImageU8& img) {
  if (img.height == 0 || img.width == 0) fail(ErrorKind::shape, "image extents must be positive");
  if (img.channels != 1 && img.channels != 3) {
    fail(ErrorKind::shape, "images need 1 or 3 channels, got " + std::to_string(img.channels));
  }
  if (img.pixels.size() != img.height * img.width * img.channels) {
    fail(ErrorKind::shape, "image pixel buffer does not match its extents");
  }
}

template <typename T>
Tensor<T> to_chw(const ImageF& img) {
  Tensor<T> out(Shape{img.channels, img.height, img.width});
  const std::size_t hw = img.height * img.width;
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t c = 0; c < img.channels; ++c) out[c * hw + p] = static_cast<T>(img.values[p * img.channels + c]);
  return out;
}

template <typename T>
Tensor<T> stack_images(std::span<const ImageF> images) {
  if (images.empty()) fail(ErrorKind::shape, "stack_images: no images");
  const auto& first = images.front();
  const std::size_t per = first.channels * first.height * first.width;
  Tensor<T> out(Shape{images.size(), first.channels, first.height, first.width});
  for (std::size_t n = 0; n < images.size(); ++n) {
    const auto& img = images[n];
    if (img.channels != first.channels || img.height != first.height || img.width != first.width) {
      fail(ErrorKind::shape, "stack_images: image " + std::to_string(n) + " has different extents");
    }
    Tensor<T> chw = to_chw<T>(img);
    std::copy(chw.data().begin(), chw.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(n * per));
  }
  return out;
}

template <typename T>
Tensor<T> mask_to_tensor(const ImageU8& mask) {
  Tensor<T> out(Shape{1, mask.height, mask.width});
  for (std::size_t p = 0; p < mask.height * mask.width; ++p) {
    out[p] = mask.pixels[p * mask.channels] != 0 ? T{1} : T{0};
  }
  return out;
}

ImageU8 to_u8(const ImageF& img) {
  ImageU8 out(img.height, img.width, img.channels);
  for (std::size_t i = 0; i < img.values.size(); ++i) {
    const double v = std::clamp(static_cast<double>(img.values[i]), 0.0, 1.0);
    out.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return out;
}

template Tensor<float> to_chw<float>(const ImageF&);
template Tensor<double> to_chw<double>(const ImageF&);
template Tensor<float> stack_images<float>(std::span<const ImageF>);
template Tensor<double> stack_images<double>(std::span<const ImageF>);
template Tensor<float> mask_to_tensor<float>(const ImageU8&);
template Tensor<double> mask_to_tensor<double>(const ImageU8&);

}  // namespace leafgrad

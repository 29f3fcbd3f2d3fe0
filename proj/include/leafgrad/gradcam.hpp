#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "leafgrad/image.hpp"
#include "leafgrad/models.hpp"

namespace leafgrad {

// H x W map aligned with the model input, values in [0, 1].
struct Heatmap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
  std::size_t argmax() const;
};

template <typename T>
struct GradCamResult {
  Heatmap heatmap;
  std::vector<double> channel_weights;  // one per feature channel
  std::vector<double> raw;              // rectified map at the layer's resolution
  std::size_t layer_height = 0, layer_width = 0;
  double score = 0;                     // target-class logit
};

// GradCAM++ for one image (1 x C x H x W or C x H x W) and one class logit,
// taken at a named feature-map layer of a classifier. The model runs in eval
// mode and its parameter gradients are cleared afterwards.
template <typename T>
GradCamResult<T> gradcam_pp_detailed(ModelGraph<T>& model, const Tensor<T>& image, std::size_t target_class,
                                     const std::string& layer);

template <typename T>
Heatmap gradcam_pp(ModelGraph<T>& model, const Tensor<T>& image, std::size_t target_class, const std::string& layer);

// Bilinear (half-pixel centers) resize of a single plane.
std::vector<double> resize_plane(const std::vector<double>& src, std::size_t h, std::size_t w, std::size_t out_h,
                                 std::size_t out_w);

// Min-max scaling to [0, 1]. A constant map becomes all ones when its value
// is positive and all zeros otherwise.
void normalize_unit(std::vector<double>& values);

// Heatmap as an 8-bit gray image, and a 50% blend of a blue-to-red color
// ramp over `base` (gray or RGB, same size as the heatmap).
ImageU8 heatmap_gray(const Heatmap& map);
ImageU8 heatmap_overlay(const ImageU8& base, const Heatmap& map);

}  // namespace leafgrad

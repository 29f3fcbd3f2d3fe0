#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "leafgrad/rng.hpp"
#include "leafgrad/tensor.hpp"

namespace leafgrad {

struct AugmentConfig {
  bool enabled = false;
  double hflip_prob = 0.5;
  double vflip_prob = 0.5;
  // Quarter turns drawn uniformly from {0, 90, 180, 270} degrees. Non-square
  // inputs only receive 0 or 180.
  bool rotate = true;

  void validate() const;
};

struct Transform {
  bool hflip = false;
  bool vflip = false;
  unsigned quarter_turns = 0;  // counter-clockwise

  bool is_identity() const { return !hflip && !vflip && quarter_turns == 0; }
};

// Always consumes exactly three draws so that the stream position does not
// depend on the configuration.
Transform sample_transform(const AugmentConfig& cfg, Rng& rng);

// Applies hflip, then vflip, then the rotation to one C x H x W plane stack.
// Rotation by a quarter turn maps out(i, j) = in(j, W - 1 - i).
template <typename T>
std::vector<T> apply_transform(std::span<const T> chw, std::size_t channels, std::size_t height, std::size_t width,
                               const Transform& tf);

// Augments every sample of an N x C x H x W batch in place. When `masks` is
// given (N x 1 x H x W) each mask receives its image's transform.
template <typename T>
void augment_batch(Tensor<T>& images, Tensor<T>* masks, const AugmentConfig& cfg, Rng& rng);

}  // namespace leafgrad

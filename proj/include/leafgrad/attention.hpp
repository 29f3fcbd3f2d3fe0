#pragma once

#include <cstddef>

#include "leafgrad/ops.hpp"
#include "leafgrad/rng.hpp"
#include "leafgrad/tensor.hpp"

namespace leafgrad {

// Squeeze-and-excitation channel attention with bias-free excitation layers:
// z = GAP(x), s = sigmoid(W2 relu(W1 z)), x'(c) = s(c) x(c).
template <typename T>
struct SEBlock {
  std::size_t channels = 0;
  std::size_t reduction_ratio = 16;
  std::size_t bottleneck = 1;  // max(1, channels / reduction_ratio)
  Tensor<T> w1;                // bottleneck x channels
  Tensor<T> w2;                // channels x bottleneck
  // Test hook: when set, the attention weights are replaced by ones.
  bool force_unit_scale = false;

  // He-uniform weights drawn from `rng`.
  static SEBlock create(std::size_t channels, std::size_t reduction_ratio, Rng& rng);
  // All-zero weights; every attention weight is then exactly 0.5.
  static SEBlock zeros(std::size_t channels, std::size_t reduction_ratio);

  std::size_t parameter_count() const { return 2 * channels * bottleneck; }
};

std::size_t se_bottleneck(std::size_t channels, std::size_t reduction_ratio);

template <typename T>
Tensor<T> squeeze(const Tensor<T>& x);

template <typename T>
Tensor<T> excite(const Tensor<T>& z, const SEBlock<T>& block);

template <typename T>
Tensor<T> recalibrate(const Tensor<T>& x, const Tensor<T>& s);

template <typename T>
Tensor<T> se_forward(const Tensor<T>& x, const SEBlock<T>& block);

// Uniform(-sqrt(6 / fan_in), sqrt(6 / fan_in)) fill.
template <typename T>
void he_uniform_fill(Tensor<T>& t, std::size_t fan_in, Rng& rng);

}  // namespace leafgrad

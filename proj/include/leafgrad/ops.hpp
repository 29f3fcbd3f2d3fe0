#pragma once

#include <cstddef>
#include <span>

#include "leafgrad/rng.hpp"
#include "leafgrad/tensor.hpp"

namespace leafgrad {

enum class Padding { same, valid };
enum class Mode { train, eval };
enum class ActivationKind { relu, sigmoid, tanh };

struct Conv2dOptions {
  std::size_t stride = 1;
  Padding padding = Padding::same;
};

// input N x C x H x W, kernels K x C x kh x kw (odd kh, kw), bias K or undefined.
// Same padding follows the usual ceil(H / stride) rule with the extra row or
// column of padding on the bottom/right.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>& bias,
                 Conv2dOptions options = {});

// input N x C x H x W, kernels C x K x kh x kw, bias K or undefined.
// Output extent is (H - 1) * stride + kh, no padding or cropping.
template <typename T>
Tensor<T> conv2d_transpose(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>& bias,
                           std::size_t stride);

// Ties route the gradient to the first window position in row-major order.
// With pad_to_fit, trailing partial windows are kept (ceil mode).
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& input, std::size_t window = 2, std::size_t stride = 2,
                    bool pad_to_fit = false);

// N x C x H x W -> N x C channel means.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input);

// input N x F, weight G x F, bias G or undefined.
template <typename T>
Tensor<T> dense(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias = {});

// Running statistics for one batch-norm layer. `updates` counts how many
// training batches have been folded in; eval mode refuses to run on zero
// updates unless identity_fallback is set.
template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  std::uint64_t updates = 0;
  double momentum = 0.9;
  double eps = 1e-5;
  bool identity_fallback = false;

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels)
      : running_mean(Shape{channels}, T{0}), running_var(Shape{channels}, T{1}) {}
};

// Train mode normalizes with biased batch statistics and folds them into the
// running averages as running = momentum * running + (1 - momentum) * batch.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormState<T>& state, Mode mode);

template <typename T>
Tensor<T> relu(const Tensor<T>& input);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input);
template <typename T>
Tensor<T> tanh(const Tensor<T>& input);
template <typename T>
Tensor<T> activation(const Tensor<T>& input, ActivationKind kind);

// Row-wise softmax over N x K with max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& input);

// Inverted dropout: survivors are scaled by 1 / (1 - rate); eval is identity.
template <typename T>
Tensor<T> dropout(const Tensor<T>& input, double rate, Mode mode, Rng& rng);

// Shape plumbing and elementwise helpers used by the models and losses.
template <typename T>
Tensor<T> reshape(const Tensor<T>& input, Shape shape);
template <typename T>
Tensor<T> flatten(const Tensor<T>& input);  // N x ... -> N x F
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);
// x N x C x H x W scaled per (n, c) by s N x C.
template <typename T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& s);
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T offset);
template <typename T>
Tensor<T> sum(const Tensor<T>& a);
template <typename T>
Tensor<T> mean(const Tensor<T>& a);
template <typename T>
Tensor<T> sum_squares(const Tensor<T>& a);
// Picks column `index[n]` of row n from N x K -> N.
template <typename T>
Tensor<T> pick(const Tensor<T>& input, std::span<const std::size_t> index);

}  // namespace leafgrad

#pragma once

#include <cstddef>
#include <span>

#include "leafgrad/models.hpp"
#include "leafgrad/tensor.hpp"

namespace leafgrad {

inline constexpr double kProbClamp = 1e-7;
inline constexpr double kOverlapEps = 1e-6;

// Mean of -log p[label] over the batch; probabilities are clamped to
// [kProbClamp, 1 - kProbClamp] and clamped entries pass no gradient.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& probs, std::span<const std::size_t> labels);

// coeff * sum of squared entries of every parameter flagged for decay.
template <typename T>
Tensor<T> l2_penalty(const ModelGraph<T>& model, double coeff);

template <typename T>
Tensor<T> cross_entropy_loss(const Tensor<T>& probs, std::span<const std::size_t> labels,
                             const ModelGraph<T>& model, double l2);

// Soft overlap scores over N x 1 x H x W probabilities, averaged over the
// batch. Per sample: dice = (2 I + eps) / (P + G + eps),
// iou = (I + eps) / (P + G - I + eps) with I = sum p t, P = sum p, G = sum t.
template <typename T>
Tensor<T> dice_coeff(const Tensor<T>& pred, const Tensor<T>& target);
template <typename T>
Tensor<T> iou_coeff(const Tensor<T>& pred, const Tensor<T>& target);

// 0.5 (1 - dice) + 0.5 (1 - iou) on sigmoid(logits), plus the L2 term.
template <typename T>
Tensor<T> combined_seg_loss(const Tensor<T>& logits, const Tensor<T>& target, const ModelGraph<T>& model,
                            double l2);

// Same formulas for a single sample held in plain arrays.
double dice_value(std::span<const double> pred, std::span<const double> target);
double iou_value(std::span<const double> pred, std::span<const double> target);

}  // namespace leafgrad

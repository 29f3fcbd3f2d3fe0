#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "leafgrad/tensor.hpp"

namespace leafgrad {

// K x K counts; rows are true classes, columns predicted classes.
struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::uint64_t> counts;

  explicit ConfusionMatrix(std::size_t k = 0) : classes(k), counts(k * k, 0) {}
  std::uint64_t& at(std::size_t truth, std::size_t pred) { return counts[truth * classes + pred]; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts[truth * classes + pred]; }
  std::uint64_t total() const;
  std::uint64_t row_sum(std::size_t truth) const;
  std::uint64_t col_sum(std::size_t pred) const;
};

ConfusionMatrix confusion(std::span<const std::size_t> preds, std::span<const std::size_t> labels, std::size_t classes);

// Per-class precision, recall and F1 plus macro averages. A ratio whose
// denominator is zero is reported as 0 and flagged.
struct ClassMetrics {
  std::vector<double> precision, recall, f1;
  std::vector<std::uint64_t> support;
  std::vector<bool> precision_undefined, recall_undefined;
  double macro_precision = 0, macro_recall = 0, macro_f1 = 0;
  double accuracy = 0;

  bool any_undefined() const;
};

ClassMetrics class_metrics(const ConfusionMatrix& cm);

struct SegMetrics {
  double iou = 0;
  double dice = 0;
  std::vector<double> iou_per_sample, dice_per_sample;
};

// Thresholds N x ... probabilities at `threshold` (p >= threshold is
// foreground) and averages per-sample IoU and Dice over the batch.
template <typename T>
SegMetrics seg_metrics(const Tensor<T>& pred, const Tensor<T>& target, double threshold = 0.5);

// CSV renderings; class names default to their indices.
std::string confusion_csv(const ConfusionMatrix& cm, const std::vector<std::string>& names);
std::string class_metrics_csv(const ClassMetrics& m, const std::vector<std::string>& names);

}  // namespace leafgrad

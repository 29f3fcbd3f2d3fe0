#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "leafgrad/augment.hpp"
#include "leafgrad/models.hpp"
#include "leafgrad/tensor.hpp"

namespace leafgrad {

// One partition of an in-memory dataset. Classification splits carry
// labels, segmentation splits carry N x 1 x H x W binary masks.
template <typename T>
struct DataSplit {
  Tensor<T> images;
  std::vector<std::size_t> labels;
  Tensor<T> masks;

  std::size_t size() const { return images.defined() ? images.dim(0) : 0; }
};

template <typename T>
struct TrainData {
  DataSplit<T> train, val, test;
};

// Copies the listed samples of an N x ... tensor into a new batch.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& src, std::span<const std::size_t> rows);

template <typename T>
DataSplit<T> subset(const DataSplit<T>& split, std::span<const std::size_t> rows);

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double val_loss = 0;
  double train_metric = 0;  // accuracy or Dice, measured on the training-mode outputs
  double val_metric = 0;
  double val_iou = kNaN;           // segmentation only
  double train_eval_metric = kNaN;  // eval-mode pass over the train split, when requested
};

struct LrEvent {
  std::size_t epoch = 0;  // the reduction applies from epoch + 1 on
  double old_lr = 0;
  double new_lr = 0;
};

struct TrainReport {
  Task task = Task::classify;
  std::string metric_name;  // "accuracy" or "dice"
  std::vector<EpochRecord> epochs;
  std::vector<LrEvent> lr_events;
  std::string stop_reason = "epochs";  // epochs | early_stop | target
  std::size_t best_epoch = 0;          // lowest validation loss
  double best_val_loss = kNaN;
  bool restored_best = false;

  double test_loss = kNaN;
  double test_metric = kNaN;
  double test_iou = kNaN;
  std::vector<std::size_t> test_predictions;

  // CSV with a header row; `preamble` lines are written first, each
  // prefixed by "# ".
  std::string to_csv(const std::vector<std::string>& preamble = {}) const;
  void write_csv(const std::filesystem::path& path, const std::vector<std::string>& preamble = {}) const;
};

template <typename T>
struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  std::uint64_t seed = 42;

  bool plateau = true;
  double plateau_factor = 0.5;
  std::size_t plateau_patience = 15;
  double min_lr = 0.0;

  bool early_stop = true;
  std::size_t early_stop_patience = 15;

  AugmentConfig augment;
  double threshold = 0.5;

  // Extra eval-mode pass over the train split after every epoch; with a
  // target the run stops as soon as that metric reaches it.
  bool eval_train_metric = false;
  std::optional<double> target_train_metric;

  std::function<void(const EpochRecord&)> on_epoch;
  // Called whenever the validation loss reaches a new minimum.
  std::function<void(const ModelGraph<T>&, const EpochRecord&)> on_best;

  void validate() const;
};

template <typename T>
struct EvalResult {
  double loss = 0;
  double metric = 0;   // accuracy or mean Dice
  double iou = kNaN;   // mean IoU, segmentation only
  std::vector<std::size_t> predictions;  // argmax classes, classification only
  std::vector<double> dice_per_sample, iou_per_sample;
};

// Eval-mode pass without gradient recording.
template <typename T>
EvalResult<T> evaluate_split(ModelGraph<T>& model, const DataSplit<T>& split, std::size_t batch_size,
                             double threshold = 0.5);

template <typename T>
TrainReport train_classifier(ModelGraph<T>& model, const TrainData<T>& data, const TrainConfig<T>& cfg);

template <typename T>
TrainReport train_segmenter(ModelGraph<T>& model, const TrainData<T>& data, const TrainConfig<T>& cfg);

}  // namespace leafgrad

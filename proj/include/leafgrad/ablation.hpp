#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "leafgrad/metrics.hpp"
#include "leafgrad/models.hpp"
#include "leafgrad/preprocess.hpp"
#include "leafgrad/trainer.hpp"

namespace leafgrad {

struct AblationModel {
  std::string name;         // row label, e.g. "cnn" or "se_convnet"
  std::string config_text;  // as produced by ModelGraph::config_text()
};

struct AblationColumn {
  std::string name;  // column label, e.g. "resized" or "mpn"
  PipelineConfig pipeline;
};

struct AblationCell {
  std::string column;
  std::string model;
  std::uint64_t config_hash = 0;
  ParamReport params;
  TrainReport report;
  // Classification cells.
  ConfusionMatrix confusion;
  ClassMetrics metrics;
  // Segmentation cells.
  SegMetrics seg;
};

struct AblationResult {
  Task task = Task::classify;
  std::vector<std::string> columns;
  std::vector<std::string> models;
  std::vector<std::string> class_names;
  std::vector<AblationCell> cells;  // column-major: every model for column 0 first

  const AblationCell& cell(const std::string& column, const std::string& model) const;

  // One row per cell with its headline numbers.
  std::string cells_csv() const;
  // Rows are models, columns are pipelines; classification cells hold test
  // accuracy plus a trailing parameter-size column, segmentation cells hold
  // "iou/dice" percentages split into two columns per pipeline.
  std::string table_csv() const;
  // Per-class precision / recall / F1 for every cell (classification).
  std::string per_class_csv() const;
};

// Produces the train/val/test tensors for one preprocessing column.
using AblationDataFn = std::function<TrainData<float>(const AblationColumn&)>;

// Trains and evaluates every (column, model) pair. Each cell builds its model
// from Rng(init_seed) and trains with the same TrainConfig, so cells differ
// only in data and architecture. Test metrics come from the test split.
AblationResult ablation_grid(const std::vector<AblationColumn>& columns, const std::vector<AblationModel>& models,
                             const AblationDataFn& data, const TrainConfig<float>& cfg, std::uint64_t init_seed,
                             const std::function<void(const AblationCell&)>& on_cell = {});

}  // namespace leafgrad

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "leafgrad/models.hpp"
#include "leafgrad/preprocess.hpp"
#include "leafgrad/run_config.hpp"
#include "leafgrad/trainer.hpp"

namespace leafgrad {

enum class SplitName { train, val, test };

std::string_view to_string(SplitName split);
SplitName parse_split_name(std::string_view text);

struct ManifestEntry {
  std::filesystem::path image;
  std::size_t label = 0;       // class index; 0 for segmentation
  std::filesystem::path mask;  // segmentation only
  SplitName split = SplitName::train;
};

struct DatasetManifest {
  std::filesystem::path root;
  Task task = Task::classify;
  std::vector<std::string> classes;
  std::vector<ManifestEntry> entries;
  std::uint64_t seed = 0;
  SplitRatios ratios;

  std::vector<const ManifestEntry*> split(SplitName which) const;
  // counts[class][split]
  std::vector<std::array<std::size_t, 3>> class_split_counts() const;
  std::string to_csv() const;
};

inline constexpr const char* kManifestName = "leafgrad_manifest.csv";

// Largest-remainder split of `n` items by `ratios`; ties in the remainder go
// to the earlier split (train, then val, then test).
std::array<std::size_t, 3> largest_remainder(std::size_t n, const SplitRatios& ratios);

// Per-class split sizes. Class boundaries are placed on the cumulative
// largest-remainder split of the running total, so the per-split totals equal
// largest_remainder(total) and each class differs from its own share by less
// than two items per split.
std::vector<std::array<std::size_t, 3>> stratified_allocation(const std::vector<std::size_t>& class_counts,
                                                              const SplitRatios& ratios);

// Classification: `root/<class>/<image>` for every listed class.
// Segmentation: `root/images/<stem>.<ext>` paired with `root/masks/<stem>.*`.
// Files are sorted by name, shuffled per class with the seed and split.
// With `persist` the manifest is written to root/leafgrad_manifest.csv.
DatasetManifest load_dataset(const std::filesystem::path& root, Task task, std::uint64_t seed,
                             const SplitRatios& ratios, const std::vector<std::string>& classes, bool persist = true);

// Reads, converts to `channels`, and preprocesses every entry. Masks follow
// the pipeline's resize with nearest-neighbor sampling.
template <typename T>
TrainData<T> materialize(const DatasetManifest& manifest, const PipelineConfig& pipeline, std::size_t channels);

template <typename T>
DataSplit<T> materialize_split(const DatasetManifest& manifest, SplitName which, const PipelineConfig& pipeline,
                               std::size_t channels);

ImageU8 convert_channels(const ImageU8& img, std::size_t channels);
ImageU8 resize_nearest(const ImageU8& img, std::size_t h, std::size_t w);

}  // namespace leafgrad

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "leafgrad/models.hpp"
#include "leafgrad/preprocess.hpp"
#include "leafgrad/trainer.hpp"

namespace leafgrad {

enum class KeyType { integer, real, boolean, text, list };

struct ConfigKey {
  std::string_view name;
  KeyType type;
  std::string_view default_value;
  std::string_view help;
};

// Every key a run configuration accepts, in documentation order.
const std::vector<ConfigKey>& config_keys();

struct SplitRatios {
  double train = 0.7;
  double val = 0.15;
  double test = 0.15;

  void validate() const;
};

// Flat key = value document. Unknown keys and ill-typed values are rejected
// when set; every key always has a value (its default until overridden).
class RunConfig {
 public:
  RunConfig();

  void set(const std::string& key, const std::string& value);
  // "key=value" as given to --set.
  void set_assignment(const std::string& assignment);
  // Lines of "key = value"; '#' starts a comment line.
  void merge_text(const std::string& text, const std::string& origin);
  void merge_file(const std::filesystem::path& path);
  // Applies LEAFGRAD_SEED when present in the environment.
  void merge_env();

  const std::string& get(std::string_view key) const;
  std::int64_t get_int(std::string_view key) const;
  std::size_t get_size(std::string_view key) const;
  double get_double(std::string_view key) const;
  bool get_bool(std::string_view key) const;
  std::vector<std::string> get_list(std::string_view key) const;

  // Sorted "key = value" lines.
  std::string canonical_text() const;
  std::uint64_t hash() const;
  std::string hash_hex() const;
  // Line embedded at the top of CSV artifacts.
  std::string provenance() const;

  std::uint64_t seed() const;
  PipelineDefaults pipeline_defaults() const;
  PipelineConfig pipeline() const;
  SplitRatios split_ratios() const;
  std::vector<std::string> classes() const;
  // Input extents follow the pipeline's resize stage.
  SEConvNetConfig convnet_config() const;
  UNetConfig unet_config() const;
  TrainConfig<float> train_config(Task task) const;

 private:
  std::map<std::string, std::string, std::less<>> values_;
};

}  // namespace leafgrad

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "leafgrad/models.hpp"

namespace leafgrad {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kDtypeF32 = 1;

// Free-form provenance stored next to the model config ("meta.<key>=<value>"
// lines). Keys and values must not contain '=' or newlines respectively.
using CheckpointMeta = std::map<std::string, std::string>;

template <typename T>
struct LoadedCheckpoint {
  std::unique_ptr<ModelGraph<T>> model;
  CheckpointMeta meta;
};

// LGC1 layout, all integers little-endian:
//   "LGC1" | u32 version | u64 n + n bytes of config text | u64 tensor count |
//   per tensor: u64 n + name | u32 dtype (1 = f32) | u32 rank | u64 dims[rank] |
//   f32 values
template <typename T>
std::vector<std::uint8_t> encode_checkpoint(const ModelGraph<T>& model, const CheckpointMeta& meta = {});

template <typename T>
LoadedCheckpoint<T> decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& context = "checkpoint");

template <typename T>
void save_checkpoint(const ModelGraph<T>& model, const std::filesystem::path& path, const CheckpointMeta& meta = {});

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path);

}  // namespace leafgrad

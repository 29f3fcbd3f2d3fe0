#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "leafgrad/image.hpp"
#include "leafgrad/rng.hpp"
#include "leafgrad/trainer.hpp"

namespace leafgrad {

// Toy leaf images for four conditions on a noisy background:
//   0 bacterial: many small dark lesions
//   1 dried:     yellow-brown leaf
//   2 fungal:    a few large brown blotches
//   3 healthy:   clean green leaf
// Labels >= 4 wrap around with a hue shift so any class count works.
ImageU8 synthetic_leaf(std::size_t label, std::size_t size, Rng& rng);

// A textured background with one or two bright shapes (disc, box or
// diamond); the mask marks the shape pixels with 255.
std::pair<ImageU8, ImageU8> synthetic_shapes(std::size_t size, Rng& rng);

// In-memory classification set: `per_class` images per class, interleaved
// by class, scaled to [0, 1] (or mid-point normalized when `mpn` is set).
template <typename T>
DataSplit<T> synthetic_classification(std::size_t per_class, std::size_t classes, std::size_t size,
                                      std::uint64_t seed, bool mpn = false);

template <typename T>
DataSplit<T> synthetic_segmentation(std::size_t count, std::size_t size, std::uint64_t seed, bool mpn = false);

// Writes a directory-per-class tree of PPM files, class names as given.
void write_synthetic_classification(const std::filesystem::path& root, const std::vector<std::string>& classes,
                                    std::size_t per_class, std::size_t size, std::uint64_t seed);

// Writes root/images/NNNN.ppm and root/masks/NNNN.pgm.
void write_synthetic_segmentation(const std::filesystem::path& root, std::size_t count, std::size_t size,
                                  std::uint64_t seed);

}  // namespace leafgrad

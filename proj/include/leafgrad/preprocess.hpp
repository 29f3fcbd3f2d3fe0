#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "leafgrad/image.hpp"

namespace leafgrad {

enum class StageKind { resize, edge, clahe, mpn };
enum class LaplacianKernel { four_neighbor, eight_neighbor };

struct Stage {
  StageKind kind = StageKind::resize;
  std::size_t height = 224;  // resize
  std::size_t width = 224;
  LaplacianKernel kernel = LaplacianKernel::four_neighbor;  // edge
  double clip_limit = 2.0;                                  // clahe
  std::size_t tiles_y = 8;
  std::size_t tiles_x = 8;
};

// Ordered preprocessing chain. At most one resize; mpn, when present, is last.
struct PipelineConfig {
  std::vector<Stage> stages;

  void validate() const;
  bool has_mpn() const;
  // Stage names joined by '+', e.g. "resize+clahe+mpn".
  std::string name() const;
};

struct PipelineDefaults {
  std::size_t height = 224;
  std::size_t width = 224;
  LaplacianKernel kernel = LaplacianKernel::four_neighbor;
  double clip_limit = 2.0;
  std::size_t tiles_y = 8;
  std::size_t tiles_x = 8;
};

// Parses a chain such as "resize,clahe,mpn" (',' or '+' separated).
PipelineConfig parse_pipeline(std::string_view text, const PipelineDefaults& defaults = {});

// The four comparison columns: "resized", "edge", "clahe", "mpn" map to
// resize-only, resize+edge, resize+clahe, resize+mpn. Anything else is
// parsed as an explicit chain.
PipelineConfig table_pipeline(std::string_view column, const PipelineDefaults& defaults = {});

// Bilinear with half-pixel centers and plain stretching to h x w.
ImageU8 resize_bilinear(const ImageU8& img, std::size_t h, std::size_t w);

// Per-channel 3x3 Laplacian, replicate borders, |response| clamped to 255.
ImageU8 laplacian_edge(const ImageU8& img, LaplacianKernel kernel = LaplacianKernel::four_neighbor);

using Histogram256 = std::array<std::uint32_t, 256>;

// Clips bins at `limit` and spreads the excess evenly; the total count is
// unchanged.
void clip_histogram(Histogram256& hist, std::uint32_t limit);

// Bin ceiling for a tile of `tile_pixels` pixels.
std::uint32_t clahe_bin_limit(double clip_limit, std::size_t tile_pixels);

// Contrast-limited adaptive histogram equalization on one 8-bit plane.
std::vector<std::uint8_t> clahe_plane(const std::vector<std::uint8_t>& plane, std::size_t height, std::size_t width,
                                      double clip_limit, std::size_t tiles_y, std::size_t tiles_x);

// Gray images are equalized directly; RGB images are equalized on luma
// (0.299 R + 0.587 G + 0.114 B) and the channels rescaled by Y'/Y.
ImageU8 clahe(const ImageU8& img, double clip_limit = 2.0, std::size_t tiles_y = 8, std::size_t tiles_x = 8);

// tanh(p / 127.5 - 1), evaluated as tanh((p - 127.5) / 127.5) so that
// mpn_value(255 - p) == -mpn_value(p) exactly.
double mpn_value(double pixel);
ImageF mpn(const ImageU8& img);

// Applies the stages in order. Without an mpn stage the final 8-bit image is
// scaled to [0, 1].
ImageF run_pipeline(const ImageU8& img, const PipelineConfig& cfg);

}  // namespace leafgrad

#include "leafgrad/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

namespace leafgrad {

namespace {

std::uint8_t saturate_u8(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0))); }

std::string stage_name(StageKind kind) {
  switch (kind) {
    case StageKind::resize: return "resize";
    case StageKind::edge: return "edge";
    case StageKind::clahe: return "clahe";
    case StageKind::mpn: return "mpn";
  }
  return "?";
}

Stage make_stage(std::string_view token, const PipelineDefaults& d) {
  Stage s;
  s.height = d.height;
  s.width = d.width;
  s.kernel = d.kernel;
  s.clip_limit = d.clip_limit;
  s.tiles_y = d.tiles_y;
  s.tiles_x = d.tiles_x;
  if (token == "resize" || token == "resized") {
    s.kind = StageKind::resize;
  } else if (token == "edge" || token == "laplacian") {
    s.kind = StageKind::edge;
  } else if (token == "clahe") {
    s.kind = StageKind::clahe;
  } else if (token == "mpn") {
    s.kind = StageKind::mpn;
  } else {
    fail(ErrorKind::config, "unknown pipeline stage '" + std::string(token) + "'");
  }
  return s;
}

}  // namespace

void PipelineConfig::validate() const {
  std::size_t resizes = 0;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const Stage& s = stages[i];
    if (s.kind == StageKind::resize) {
      ++resizes;
      if (s.height == 0 || s.width == 0) fail(ErrorKind::config, "resize target must be at least 1x1");
    }
    if (s.kind == StageKind::mpn && i + 1 != stages.size()) {
      fail(ErrorKind::config, "mpn must be the final pipeline stage");
    }
    if (s.kind == StageKind::clahe && (!(s.clip_limit > 0.0) || s.tiles_x == 0 || s.tiles_y == 0)) {
      fail(ErrorKind::config, "clahe needs clip_limit > 0 and at least a 1x1 tile grid");
    }
  }
  if (resizes > 1) fail(ErrorKind::config, "pipeline may contain at most one resize stage");
}

bool PipelineConfig::has_mpn() const {
  return std::any_of(stages.begin(), stages.end(), [](const Stage& s) { return s.kind == StageKind::mpn; });
}

std::string PipelineConfig::name() const {
  std::string out;
  for (const auto& s : stages) out += (out.empty() ? "" : "+") + stage_name(s.kind);
  return out.empty() ? "identity" : out;
}

PipelineConfig parse_pipeline(std::string_view text, const PipelineDefaults& defaults) {
  PipelineConfig cfg;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find_first_of(",+", start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view token = text.substr(start, end - start);
    while (!token.empty() && token.front() == ' ') token.remove_prefix(1);
    while (!token.empty() && token.back() == ' ') token.remove_suffix(1);
    if (!token.empty()) cfg.stages.push_back(make_stage(token, defaults));
    start = end + 1;
  }
  if (cfg.stages.empty()) fail(ErrorKind::config, "empty pipeline");
  cfg.validate();
  return cfg;
}

PipelineConfig table_pipeline(std::string_view column, const PipelineDefaults& defaults) {
  if (column == "resized" || column == "resize") return parse_pipeline("resize", defaults);
  if (column == "edge") return parse_pipeline("resize,edge", defaults);
  if (column == "clahe") return parse_pipeline("resize,clahe", defaults);
  if (column == "mpn") return parse_pipeline("resize,mpn", defaults);
  return parse_pipeline(column, defaults);
}

ImageU8 resize_bilinear(const ImageU8& img, std::size_t h, std::size_t w) {
  validate(img);
  if (h == 0 || w == 0) fail(ErrorKind::value, "resize target must be at least 1x1");
  if (h == img.height && w == img.width) return img;
  ImageU8 out(h, w, img.channels);
  const double sy = static_cast<double>(img.height) / static_cast<double>(h);
  const double sx = static_cast<double>(img.width) / static_cast<double>(w);
  auto source = [](double pos, std::size_t extent, std::size_t& i0, std::size_t& i1, double& frac) {
    pos = std::clamp(pos, 0.0, static_cast<double>(extent - 1));
    i0 = static_cast<std::size_t>(std::floor(pos));
    i1 = std::min(i0 + 1, extent - 1);
    frac = pos - static_cast<double>(i0);
  };
  for (std::size_t y = 0; y < h; ++y) {
    std::size_t y0, y1;
    double fy;
    source((static_cast<double>(y) + 0.5) * sy - 0.5, img.height, y0, y1, fy);
    for (std::size_t x = 0; x < w; ++x) {
      std::size_t x0, x1;
      double fx;
      source((static_cast<double>(x) + 0.5) * sx - 0.5, img.width, x0, x1, fx);
      for (std::size_t c = 0; c < img.channels; ++c) {
        const double top = (1.0 - fx) * img.at(y0, x0, c) + fx * img.at(y0, x1, c);
        const double bottom = (1.0 - fx) * img.at(y1, x0, c) + fx * img.at(y1, x1, c);
        out.at(y, x, c) = saturate_u8((1.0 - fy) * top + fy * bottom);
      }
    }
  }
  return out;
}

ImageU8 laplacian_edge(const ImageU8& img, LaplacianKernel kernel) {
  validate(img);
  ImageU8 out(img.height, img.width, img.channels);
  const auto H = static_cast<std::ptrdiff_t>(img.height);
  const auto W = static_cast<std::ptrdiff_t>(img.width);
  auto px = [&](std::ptrdiff_t y, std::ptrdiff_t x, std::size_t c) -> int {
    y = std::clamp<std::ptrdiff_t>(y, 0, H - 1);
    x = std::clamp<std::ptrdiff_t>(x, 0, W - 1);
    return img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c);
  };
  for (std::ptrdiff_t y = 0; y < H; ++y)
    for (std::ptrdiff_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) {
        int r;
        if (kernel == LaplacianKernel::four_neighbor) {
          r = px(y - 1, x, c) + px(y + 1, x, c) + px(y, x - 1, c) + px(y, x + 1, c) - 4 * px(y, x, c);
        } else {
          r = -9 * px(y, x, c);
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) r += px(y + dy, x + dx, c);
        }
        out.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c) =
            static_cast<std::uint8_t>(std::min(std::abs(r), 255));
      }
  return out;
}

void clip_histogram(Histogram256& hist, std::uint32_t limit) {
  std::uint64_t excess = 0;
  for (auto& h : hist) {
    if (h > limit) {
      excess += h - limit;
      h = limit;
    }
  }
  const auto batch = static_cast<std::uint32_t>(excess / 256);
  std::uint64_t residual = excess % 256;
  for (auto& h : hist) h += batch;
  if (residual > 0) {
    const std::size_t step = std::max<std::size_t>(256 / residual, 1);
    for (std::size_t i = 0; i < 256 && residual > 0; i += step, --residual) ++hist[i];
  }
}

std::uint32_t clahe_bin_limit(double clip_limit, std::size_t tile_pixels) {
  const double limit = clip_limit * static_cast<double>(tile_pixels) / 256.0;
  return static_cast<std::uint32_t>(std::max(1.0, std::floor(limit)));
}

std::vector<std::uint8_t> clahe_plane(const std::vector<std::uint8_t>& plane, std::size_t height, std::size_t width,
                                      double clip_limit, std::size_t tiles_y, std::size_t tiles_x) {
  if (!(clip_limit > 0.0)) fail(ErrorKind::value, "clahe: clip_limit must be positive");
  if (tiles_y == 0 || tiles_x == 0) fail(ErrorKind::value, "clahe: tile grid must be at least 1x1");
  if (tiles_y > height || tiles_x > width) {
    fail(ErrorKind::value, "clahe: tile grid " + std::to_string(tiles_y) + "x" + std::to_string(tiles_x) +
                               " leaves tiles smaller than one pixel for a " + std::to_string(height) + "x" +
                               std::to_string(width) + " image");
  }
  // Per-tile lookup tables.
  std::vector<std::array<double, 256>> luts(tiles_y * tiles_x);
  for (std::size_t ty = 0; ty < tiles_y; ++ty) {
    const std::size_t y0 = ty * height / tiles_y, y1 = (ty + 1) * height / tiles_y;
    for (std::size_t tx = 0; tx < tiles_x; ++tx) {
      const std::size_t x0 = tx * width / tiles_x, x1 = (tx + 1) * width / tiles_x;
      Histogram256 hist{};
      for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x1; ++x) ++hist[plane[y * width + x]];
      const std::size_t pixels = (y1 - y0) * (x1 - x0);
      clip_histogram(hist, clahe_bin_limit(clip_limit, pixels));
      auto& lut = luts[ty * tiles_x + tx];
      std::uint64_t cdf = 0;
      for (std::size_t v = 0; v < 256; ++v) {
        cdf += hist[v];
        lut[v] = std::round(static_cast<double>(cdf) * 255.0 / static_cast<double>(pixels));
      }
    }
  }
  const double tile_h = static_cast<double>(height) / static_cast<double>(tiles_y);
  const double tile_w = static_cast<double>(width) / static_cast<double>(tiles_x);
  auto neighbours = [](double pos, std::size_t tiles, std::size_t& t0, std::size_t& t1, double& frac) {
    if (pos <= 0.0) {
      t0 = t1 = 0;
      frac = 0.0;
      return;
    }
    t0 = static_cast<std::size_t>(std::floor(pos));
    if (t0 >= tiles - 1) {
      t0 = t1 = tiles - 1;
      frac = 0.0;
      return;
    }
    t1 = t0 + 1;
    frac = pos - static_cast<double>(t0);
  };
  std::vector<std::uint8_t> out(plane.size());
  for (std::size_t y = 0; y < height; ++y) {
    std::size_t ty0, ty1;
    double fy;
    neighbours((static_cast<double>(y) + 0.5) / tile_h - 0.5, tiles_y, ty0, ty1, fy);
    for (std::size_t x = 0; x < width; ++x) {
      std::size_t tx0, tx1;
      double fx;
      neighbours((static_cast<double>(x) + 0.5) / tile_w - 0.5, tiles_x, tx0, tx1, fx);
      const std::uint8_t v = plane[y * width + x];
      const double top = (1.0 - fx) * luts[ty0 * tiles_x + tx0][v] + fx * luts[ty0 * tiles_x + tx1][v];
      const double bottom = (1.0 - fx) * luts[ty1 * tiles_x + tx0][v] + fx * luts[ty1 * tiles_x + tx1][v];
      out[y * width + x] = saturate_u8((1.0 - fy) * top + fy * bottom);
    }
  }
  return out;
}

ImageU8 clahe(const ImageU8& img, double clip_limit, std::size_t tiles_y, std::size_t tiles_x) {
  validate(img);
  if (img.channels == 1) {
    ImageU8 out = img;
    out.pixels = clahe_plane(img.pixels, img.height, img.width, clip_limit, tiles_y, tiles_x);
    return out;
  }
  const std::size_t hw = img.height * img.width;
  std::vector<std::uint8_t> luma(hw);
  for (std::size_t p = 0; p < hw; ++p) {
    const std::uint8_t* rgb = &img.pixels[p * 3];
    luma[p] = saturate_u8(0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]);
  }
  const auto eq = clahe_plane(luma, img.height, img.width, clip_limit, tiles_y, tiles_x);
  ImageU8 out(img.height, img.width, 3);
  for (std::size_t p = 0; p < hw; ++p) {
    for (std::size_t c = 0; c < 3; ++c) {
      out.pixels[p * 3 + c] = luma[p] == 0 ? eq[p]
                                           : saturate_u8(static_cast<double>(img.pixels[p * 3 + c]) * eq[p] /
                                                         static_cast<double>(luma[p]));
    }
  }
  return out;
}

double mpn_value(double pixel) { return std::tanh((pixel - 127.5) / 127.5); }

ImageF mpn(const ImageU8& img) {
  validate(img);
  ImageF out(img.height, img.width, img.channels);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) out.values[i] = static_cast<float>(mpn_value(img.pixels[i]));
  return out;
}

ImageF run_pipeline(const ImageU8& img, const PipelineConfig& cfg) {
  cfg.validate();
  ImageU8 cur = img;
  for (const Stage& s : cfg.stages) {
    switch (s.kind) {
      case StageKind::resize: cur = resize_bilinear(cur, s.height, s.width); break;
      case StageKind::edge: cur = laplacian_edge(cur, s.kernel); break;
      case StageKind::clahe: cur = clahe(cur, s.clip_limit, s.tiles_y, s.tiles_x); break;
      case StageKind::mpn: return mpn(cur);
    }
  }
  ImageF out(cur.height, cur.width, cur.channels);
  for (std::size_t i = 0; i < cur.pixels.size(); ++i) out.values[i] = static_cast<float>(cur.pixels[i] / 255.0);
  return out;
}

}  // namespace leafgrad

#include "leafgrad/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "leafgrad/image_io.hpp"
#include "leafgrad/preprocess.hpp"

namespace fs = std::filesystem;

namespace leafgrad {

namespace {

struct Rgb {
  double r, g, b;
};

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

void put(ImageU8& img, std::size_t y, std::size_t x, Rgb c, double noise, Rng& rng) {
  img.at(y, x, 0) = to_byte(c.r + noise * rng.normal());
  img.at(y, x, 1) = to_byte(c.g + noise * rng.normal());
  img.at(y, x, 2) = to_byte(c.b + noise * rng.normal());
}

Rgb jitter(Rgb c, double amount, Rng& rng) {
  return {c.r + rng.uniform(-amount, amount), c.g + rng.uniform(-amount, amount), c.b + rng.uniform(-amount, amount)};
}

struct Blob {
  double cy, cx, radius;
};

}  // namespace

ImageU8 synthetic_leaf(std::size_t label, std::size_t size, Rng& rng) {
  if (size < 8) fail(ErrorKind::value, "synthetic_leaf: size must be >= 8");
  const double s = static_cast<double>(size);
  const std::size_t kind = label % 4;
  const double hue_shift = 25.0 * static_cast<double>(label / 4);

  const Rgb soil = jitter({95, 82, 62}, 12, rng);
  Rgb leaf = kind == 1 ? Rgb{172, 142, 64} : Rgb{62, 142, 54};
  leaf = jitter({leaf.r + hue_shift, leaf.g, leaf.b + hue_shift}, 10, rng);
  const double cy = s / 2 + rng.uniform(-s / 10, s / 10), cx = s / 2 + rng.uniform(-s / 10, s / 10);
  const double a = s * rng.uniform(0.34, 0.44), b = s * rng.uniform(0.22, 0.30);
  const double theta = rng.uniform(0.0, std::numbers::pi);
  const double ct = std::cos(theta), st = std::sin(theta);

  std::vector<Blob> lesions;
  Rgb lesion{0, 0, 0};
  if (kind == 0) {
    const auto count = 6 + rng.below(5);
    for (std::uint64_t i = 0; i < count; ++i) lesions.push_back({0, 0, s * rng.uniform(0.03, 0.05)});
    lesion = jitter({52, 44, 30}, 8, rng);
  } else if (kind == 2) {
    const auto count = 2 + rng.below(2);
    for (std::uint64_t i = 0; i < count; ++i) lesions.push_back({0, 0, s * rng.uniform(0.11, 0.16)});
    lesion = jitter({128, 84, 40}, 8, rng);
  }
  for (auto& l : lesions) {
    // Place lesion centers inside the leaf ellipse.
    const double r = std::sqrt(rng.uniform()) * 0.7, phi = rng.uniform(0.0, 2 * std::numbers::pi);
    const double u = r * a * std::cos(phi), v = r * b * std::sin(phi);
    l.cy = cy + u * st + v * ct;
    l.cx = cx + u * ct - v * st;
  }

  ImageU8 img(size, size, 3);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
      const double u = dx * ct + dy * st, v = -dx * st + dy * ct;
      const bool inside = (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
      Rgb c = inside ? leaf : soil;
      if (inside) {
        for (const auto& l : lesions) {
          const double ly = static_cast<double>(y) + 0.5 - l.cy, lx = static_cast<double>(x) + 0.5 - l.cx;
          if (ly * ly + lx * lx <= l.radius * l.radius) c = lesion;
        }
      }
      put(img, y, x, c, inside ? 6.0 : 14.0, rng);
    }
  return img;
}

std::pair<ImageU8, ImageU8> synthetic_shapes(std::size_t size, Rng& rng) {
  if (size < 8) fail(ErrorKind::value, "synthetic_shapes: size must be >= 8");
  const double s = static_cast<double>(size);
  ImageU8 img(size, size, 3), mask(size, size, 1);
  const Rgb base = jitter({70, 96, 60}, 10, rng);
  const double gy = rng.uniform(-20, 20), gx = rng.uniform(-20, 20);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double t = (gy * static_cast<double>(y) + gx * static_cast<double>(x)) / s;
      put(img, y, x, {base.r + t, base.g + t, base.b + t}, 16.0, rng);
    }
  const auto shapes = 1 + rng.below(2);
  for (std::uint64_t k = 0; k < shapes; ++k) {
    const auto kind = rng.below(3);
    const double r = s * rng.uniform(0.14, 0.26);
    const double cy = rng.uniform(r, s - r), cx = rng.uniform(r, s - r);
    const Rgb fg = jitter({190, 150, 90}, 15, rng);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
        bool in = false;
        if (kind == 0) in = dy * dy + dx * dx <= r * r;
        if (kind == 1) in = std::abs(dy) <= r * 0.8 && std::abs(dx) <= r;
        if (kind == 2) in = std::abs(dy) + std::abs(dx) <= r * 1.2;
        if (!in) continue;
        put(img, y, x, fg, 12.0, rng);
        mask.at(y, x, 0) = 255;
      }
  }
  return {img, mask};
}

namespace {

ImageF finish(const ImageU8& img, bool use_mpn) {
  PipelineConfig p;
  if (use_mpn) p.stages.push_back(Stage{StageKind::mpn});
  return run_pipeline(img, p);
}

}  // namespace

template <typename T>
DataSplit<T> synthetic_classification(std::size_t per_class, std::size_t classes, std::size_t size,
                                      std::uint64_t seed, bool mpn) {
  if (per_class == 0 || classes < 2) fail(ErrorKind::value, "synthetic_classification: need samples and >= 2 classes");
  Rng rng(seed);
  std::vector<ImageF> images;
  DataSplit<T> out;
  for (std::size_t i = 0; i < per_class * classes; ++i) {
    const std::size_t label = i % classes;
    images.push_back(finish(synthetic_leaf(label, size, rng), mpn));
    out.labels.push_back(label);
  }
  out.images = stack_images<T>(images);
  return out;
}

template <typename T>
DataSplit<T> synthetic_segmentation(std::size_t count, std::size_t size, std::uint64_t seed, bool mpn) {
  if (count == 0) fail(ErrorKind::value, "synthetic_segmentation: need at least one sample");
  Rng rng(seed);
  std::vector<ImageF> images;
  DataSplit<T> out;
  out.masks = Tensor<T>(Shape{count, 1, size, size});
  for (std::size_t i = 0; i < count; ++i) {
    auto [img, mask] = synthetic_shapes(size, rng);
    images.push_back(finish(img, mpn));
    const Tensor<T> m = mask_to_tensor<T>(mask);
    std::copy(m.data().begin(), m.data().end(), out.masks.data().begin() + static_cast<std::ptrdiff_t>(i * size * size));
  }
  out.images = stack_images<T>(images);
  return out;
}

void write_synthetic_classification(const fs::path& root, const std::vector<std::string>& classes,
                                    std::size_t per_class, std::size_t size, std::uint64_t seed) {
  Rng rng(seed);
  for (const auto& c : classes) fs::create_directories(root / c);
  for (std::size_t i = 0; i < per_class * classes.size(); ++i) {
    const std::size_t label = i % classes.size();
    char name[32];
    std::snprintf(name, sizeof name, "leaf_%04zu.ppm", i / classes.size());
    write_pnm(root / classes[label] / name, synthetic_leaf(label, size, rng));
  }
}

void write_synthetic_segmentation(const fs::path& root, std::size_t count, std::size_t size, std::uint64_t seed) {
  Rng rng(seed);
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  for (std::size_t i = 0; i < count; ++i) {
    auto [img, mask] = synthetic_shapes(size, rng);
    char name[32];
    std::snprintf(name, sizeof name, "%04zu", i);
    write_pnm(root / "images" / (std::string(name) + ".ppm"), img);
    write_pnm(root / "masks" / (std::string(name) + ".pgm"), mask);
  }
}

template DataSplit<float> synthetic_classification(std::size_t, std::size_t, std::size_t, std::uint64_t, bool);
template DataSplit<double> synthetic_classification(std::size_t, std::size_t, std::size_t, std::uint64_t, bool);
template DataSplit<float> synthetic_segmentation(std::size_t, std::size_t, std::uint64_t, bool);
template DataSplit<double> synthetic_segmentation(std::size_t, std::size_t, std::uint64_t, bool);

}  // namespace leafgrad

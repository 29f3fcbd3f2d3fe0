#include "leafgrad/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "leafgrad/image_io.hpp"
#include "leafgrad/io_util.hpp"

namespace fs = std::filesystem;

namespace leafgrad {

std::string_view to_string(SplitName split) {
  switch (split) {
    case SplitName::train: return "train";
    case SplitName::val: return "val";
    case SplitName::test: return "test";
  }
  return "?";
}

SplitName parse_split_name(std::string_view text) {
  if (text == "train") return SplitName::train;
  if (text == "val") return SplitName::val;
  if (text == "test") return SplitName::test;
  fail(ErrorKind::config, "unknown split '" + std::string(text) + "' (expected train, val or test)");
}

std::vector<const ManifestEntry*> DatasetManifest::split(SplitName which) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : entries)
    if (e.split == which) out.push_back(&e);
  return out;
}

std::vector<std::array<std::size_t, 3>> DatasetManifest::class_split_counts() const {
  std::vector<std::array<std::size_t, 3>> counts(std::max<std::size_t>(1, classes.size()), {0, 0, 0});
  for (const auto& e : entries) ++counts.at(e.label)[static_cast<std::size_t>(e.split)];
  return counts;
}

std::string DatasetManifest::to_csv() const {
  std::ostringstream os;
  os << "# leafgrad manifest task=" << to_string(task) << " seed=" << seed << " ratios=" << format_double(ratios.train)
     << "/" << format_double(ratios.val) << "/" << format_double(ratios.test) << "\n";
  os << "split,label,class,image,mask\n";
  for (const auto& e : entries) {
    os << to_string(e.split) << "," << e.label << "," << (e.label < classes.size() ? classes[e.label] : "") << ","
       << fs::relative(e.image, root).generic_string() << ","
       << (e.mask.empty() ? std::string() : fs::relative(e.mask, root).generic_string()) << "\n";
  }
  return os.str();
}

std::array<std::size_t, 3> largest_remainder(std::size_t n, const SplitRatios& ratios) {
  ratios.validate();
  const double r[3] = {ratios.train, ratios.val, ratios.test};
  std::array<std::size_t, 3> out{};
  double frac[3];
  std::size_t assigned = 0;
  for (int j = 0; j < 3; ++j) {
    const double q = static_cast<double>(n) * r[j];
    const double fl = std::floor(q + 1e-9);
    out[j] = static_cast<std::size_t>(fl);
    frac[j] = q - fl;
    assigned += out[j];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return frac[a] > frac[b] + 1e-9; });
  for (std::size_t k = 0; assigned + k < n; ++k) ++out[static_cast<std::size_t>(order[k % 3])];
  return out;
}

std::vector<std::array<std::size_t, 3>> stratified_allocation(const std::vector<std::size_t>& class_counts,
                                                              const SplitRatios& ratios) {
  std::vector<std::array<std::size_t, 3>> out;
  std::size_t cumulative = 0;
  std::array<std::size_t, 3> previous{0, 0, 0};
  bool monotone = true;
  for (auto n : class_counts) {
    cumulative += n;
    const auto now = largest_remainder(cumulative, ratios);
    std::array<std::size_t, 3> share{};
    for (int j = 0; j < 3; ++j) {
      if (now[j] < previous[j]) monotone = false;
      share[j] = now[j] - previous[j];
    }
    out.push_back(share);
    previous = now;
  }
  if (!monotone) {
    out.clear();
    for (auto n : class_counts) out.push_back(largest_remainder(n, ratios));
  }
  return out;
}

namespace {

std::vector<fs::path> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) fail(ErrorKind::io, "missing directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && is_image_path(e.path())) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

}  // namespace

DatasetManifest load_dataset(const fs::path& root, Task task, std::uint64_t seed, const SplitRatios& ratios,
                             const std::vector<std::string>& classes, bool persist) {
  ratios.validate();
  if (!fs::is_directory(root)) fail(ErrorKind::io, "dataset root is not a directory: " + root.string());
  DatasetManifest m;
  m.root = root;
  m.task = task;
  m.seed = seed;
  m.ratios = ratios;

  std::vector<std::vector<ManifestEntry>> per_class;
  if (task == Task::classify) {
    if (classes.size() < 2) fail(ErrorKind::config, "classification needs at least two classes");
    m.classes = classes;
    for (std::size_t c = 0; c < classes.size(); ++c) {
      const fs::path dir = root / classes[c];
      if (!fs::is_directory(dir)) fail(ErrorKind::io, "missing class directory: " + dir.string());
      auto files = list_images(dir);
      if (files.empty()) fail(ErrorKind::io, "class directory holds no images: " + dir.string());
      std::vector<ManifestEntry> entries;
      for (auto& f : files) entries.push_back({f, c, {}, SplitName::train});
      per_class.push_back(std::move(entries));
    }
  } else {
    m.classes = {"foreground"};
    const auto images = list_images(root / "images");
    const fs::path mask_dir = root / "masks";
    if (!fs::is_directory(mask_dir)) fail(ErrorKind::io, "missing directory: " + mask_dir.string());
    std::map<std::string, fs::path> masks;
    for (const auto& f : list_images(mask_dir)) {
      if (!masks.emplace(f.stem().string(), f).second) fail(ErrorKind::io, "duplicate mask stem: " + f.string());
    }
    if (images.empty()) fail(ErrorKind::io, "no images under " + (root / "images").string());
    std::vector<ManifestEntry> entries;
    for (const auto& img : images) {
      auto it = masks.find(img.stem().string());
      if (it == masks.end()) fail(ErrorKind::io, "no mask for image: " + img.string());
      entries.push_back({img, 0, it->second, SplitName::train});
      masks.erase(it);
    }
    if (!masks.empty()) fail(ErrorKind::io, "no image for mask: " + masks.begin()->second.string());
    per_class.push_back(std::move(entries));
  }

  std::vector<std::size_t> counts;
  for (const auto& pc : per_class) counts.push_back(pc.size());
  const auto alloc = stratified_allocation(counts, ratios);
  const Rng base(seed);
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    auto& entries = per_class[c];
    Rng rng = base.fork(c + 1);
    rng.shuffle(entries.begin(), entries.end());
    std::size_t i = 0;
    for (int j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < alloc[c][static_cast<std::size_t>(j)]; ++k) entries[i++].split = static_cast<SplitName>(j);
  }
  // Stable presentation: split, then class, then file name.
  for (int j = 0; j < 3; ++j)
    for (auto& pc : per_class) {
      std::vector<ManifestEntry> chosen;
      for (const auto& e : pc)
        if (e.split == static_cast<SplitName>(j)) chosen.push_back(e);
      std::sort(chosen.begin(), chosen.end(), [](const auto& a, const auto& b) { return a.image < b.image; });
      m.entries.insert(m.entries.end(), chosen.begin(), chosen.end());
    }
  if (persist) write_file_atomic(root / kManifestName, m.to_csv());
  return m;
}

ImageU8 convert_channels(const ImageU8& img, std::size_t channels) {
  if (channels != 1 && channels != 3) fail(ErrorKind::config, "channels must be 1 or 3");
  if (img.channels == channels) return img;
  ImageU8 out(img.height, img.width, channels);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      if (channels == 3) {
        for (std::size_t c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y, x, 0);
      } else {
        const double luma = 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
        out.at(y, x, 0) = static_cast<std::uint8_t>(std::clamp<long>(std::lround(luma), 0, 255));
      }
    }
  return out;
}

ImageU8 resize_nearest(const ImageU8& img, std::size_t h, std::size_t w) {
  if (h == 0 || w == 0) fail(ErrorKind::value, "resize_nearest: target extents must be positive");
  ImageU8 out(h, w, img.channels);
  for (std::size_t y = 0; y < h; ++y) {
    const std::size_t sy = std::min(img.height - 1, (2 * y + 1) * img.height / (2 * h));
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t sx = std::min(img.width - 1, (2 * x + 1) * img.width / (2 * w));
      for (std::size_t c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(sy, sx, c);
    }
  }
  return out;
}

template <typename T>
DataSplit<T> materialize_split(const DatasetManifest& manifest, SplitName which, const PipelineConfig& pipeline,
                               std::size_t channels) {
  pipeline.validate();
  DataSplit<T> out;
  const auto entries = manifest.split(which);
  if (entries.empty()) return out;
  std::vector<ImageF> images;
  std::vector<ImageU8> masks;
  for (const ManifestEntry* e : entries) {
    const ImageU8 raw = convert_channels(read_image(e->image), channels);
    ImageF img = run_pipeline(raw, pipeline);
    if (!images.empty() && (img.height != images.front().height || img.width != images.front().width)) {
      fail(ErrorKind::shape, "preprocessed size of " + e->image.string() + " differs from earlier images; add a resize stage");
    }
    if (manifest.task == Task::classify) {
      out.labels.push_back(e->label);
    } else {
      ImageU8 mask = read_image(e->mask);
      if (mask.height != raw.height || mask.width != raw.width) {
        fail(ErrorKind::shape, "mask " + e->mask.string() + " does not match the size of " + e->image.string());
      }
      if (mask.height != img.height || mask.width != img.width) mask = resize_nearest(mask, img.height, img.width);
      masks.push_back(std::move(mask));
    }
    images.push_back(std::move(img));
  }
  out.images = stack_images<T>(images);
  if (!masks.empty()) {
    const std::size_t h = masks.front().height, w = masks.front().width;
    out.masks = Tensor<T>(Shape{masks.size(), 1, h, w});
    for (std::size_t n = 0; n < masks.size(); ++n) {
      const Tensor<T> m = mask_to_tensor<T>(masks[n]);
      std::copy(m.data().begin(), m.data().end(), out.masks.data().begin() + static_cast<std::ptrdiff_t>(n * h * w));
    }
  }
  return out;
}

template <typename T>
TrainData<T> materialize(const DatasetManifest& manifest, const PipelineConfig& pipeline, std::size_t channels) {
  TrainData<T> d;
  d.train = materialize_split<T>(manifest, SplitName::train, pipeline, channels);
  d.val = materialize_split<T>(manifest, SplitName::val, pipeline, channels);
  d.test = materialize_split<T>(manifest, SplitName::test, pipeline, channels);
  return d;
}

template TrainData<float> materialize(const DatasetManifest&, const PipelineConfig&, std::size_t);
template TrainData<double> materialize(const DatasetManifest&, const PipelineConfig&, std::size_t);
template DataSplit<float> materialize_split(const DatasetManifest&, SplitName, const PipelineConfig&, std::size_t);
template DataSplit<double> materialize_split(const DatasetManifest&, SplitName, const PipelineConfig&, std::size_t);

}  // namespace leafgrad

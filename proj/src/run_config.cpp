#include "leafgrad/run_config.hpp"

#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <sstream>

#include "leafgrad/io_util.hpp"

namespace leafgrad {

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      {"seed", KeyType::integer, "42", "master seed for splits, initialization, shuffling and dropout"},
      {"pipeline", KeyType::list, "resize,mpn", "preprocessing chain (resize, edge, clahe, mpn)"},
      {"image_height", KeyType::integer, "224", "resize target height and model input height"},
      {"image_width", KeyType::integer, "224", "resize target width and model input width"},
      {"channels", KeyType::integer, "3", "image channels fed to the model (1 or 3)"},
      {"edge_kernel", KeyType::integer, "4", "Laplacian neighborhood, 4 or 8"},
      {"clahe_clip", KeyType::real, "2.0", "CLAHE clip limit"},
      {"clahe_tiles_y", KeyType::integer, "8", "CLAHE tile rows"},
      {"clahe_tiles_x", KeyType::integer, "8", "CLAHE tile columns"},
      {"classes", KeyType::list, "bacterial,dried,fungal,healthy", "class directory names in label order"},
      {"split_train", KeyType::real, "0.7", "train fraction of every class"},
      {"split_val", KeyType::real, "0.15", "validation fraction"},
      {"split_test", KeyType::real, "0.15", "test fraction"},
      {"model.stages", KeyType::list, "32,64,128", "SE-ConvNet filters per conv stage"},
      {"model.kernel", KeyType::integer, "3", "SE-ConvNet kernel size"},
      {"model.se", KeyType::boolean, "1", "SE blocks in the classifier (0 gives the plain CNN)"},
      {"model.se_ratio", KeyType::integer, "16", "SE reduction ratio"},
      {"model.dense_width", KeyType::integer, "64", "hidden dense layer width"},
      {"model.dropout", KeyType::real, "0.5", "dropout rate before the output layer"},
      {"model.l2", KeyType::real, "1e-4", "L2 coefficient on kernels and dense weights"},
      {"unet.depth", KeyType::integer, "4", "U-Net encoder levels"},
      {"unet.base_filters", KeyType::integer, "32", "filters at the first U-Net level"},
      {"unet.se", KeyType::boolean, "1", "SE blocks in the U-Net"},
      {"unet.se_ratio", KeyType::integer, "16", "U-Net SE reduction ratio"},
      {"unet.dropout", KeyType::real, "0.5", "dropout rate at the bottleneck"},
      {"unet.l2", KeyType::real, "1e-4", "U-Net L2 coefficient"},
      {"train.epochs", KeyType::integer, "100", "maximum epochs"},
      {"train.batch_size", KeyType::integer, "16", "minibatch size"},
      {"train.lr_classify", KeyType::real, "1e-3", "Adam learning rate for classification"},
      {"train.lr_segment", KeyType::real, "1e-4", "Adam learning rate for segmentation"},
      {"train.plateau", KeyType::boolean, "1", "enable learning-rate reduction on plateau"},
      {"train.plateau_factor", KeyType::real, "0.5", "plateau reduction factor"},
      {"train.plateau_patience", KeyType::integer, "15", "epochs without improvement before a reduction"},
      {"train.min_lr", KeyType::real, "0", "learning-rate floor"},
      {"train.early_stop", KeyType::boolean, "1", "enable early stopping on validation loss"},
      {"train.early_stop_patience", KeyType::integer, "15", "epochs without improvement before stopping"},
      {"train.augment_classify", KeyType::boolean, "0", "augment classification batches"},
      {"train.augment_segment", KeyType::boolean, "1", "augment segmentation batches (paired with masks)"},
      {"train.hflip_prob", KeyType::real, "0.5", "horizontal flip probability"},
      {"train.vflip_prob", KeyType::real, "0.5", "vertical flip probability"},
      {"train.rotate", KeyType::boolean, "1", "random quarter-turn rotations"},
      {"eval.threshold", KeyType::real, "0.5", "foreground probability threshold"},
      {"ablate.pipelines", KeyType::list, "resized,edge,clahe,mpn", "ablation columns"},
      {"ablate.models", KeyType::list, "cnn,se_convnet", "ablation rows (cnn, se_convnet, unet, unet_se)"},
      {"explain.layer", KeyType::text, "", "GradCAM++ layer; empty selects the last conv stage"},
  };
  return keys;
}

namespace {

const ConfigKey* find_key(std::string_view name) {
  for (const auto& k : config_keys())
    if (k.name == name) return &k;
  return nullptr;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool parse_int(const std::string& s, std::int64_t& out) {
  if (s.empty()) return false;
  char* end = nullptr;
  errno = 0;
  const long long v = std::strtoll(s.c_str(), &end, 10);
  if (errno != 0 || *end != '\0') return false;
  out = v;
  return true;
}

bool parse_real(const std::string& s, double& out) {
  if (s.empty()) return false;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (*end != '\0' || !std::isfinite(v)) return false;
  out = v;
  return true;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string type_name(KeyType t) {
  switch (t) {
    case KeyType::integer: return "an integer";
    case KeyType::real: return "a number";
    case KeyType::boolean: return "0 or 1";
    case KeyType::text: return "text";
    case KeyType::list: return "a comma-separated list";
  }
  return "?";
}

}  // namespace

void SplitRatios::validate() const {
  if (train < 0 || val < 0 || test < 0) fail(ErrorKind::config, "split ratios must be >= 0");
  if (std::abs(train + val + test - 1.0) > 1e-9) fail(ErrorKind::config, "split ratios must sum to 1");
  if (train <= 0) fail(ErrorKind::config, "the train ratio must be positive");
}

RunConfig::RunConfig() {
  for (const auto& k : config_keys()) values_.emplace(std::string(k.name), std::string(k.default_value));
}

void RunConfig::set(const std::string& key, const std::string& raw) {
  const ConfigKey* k = find_key(key);
  if (k == nullptr) fail(ErrorKind::config, "unknown configuration key '" + key + "'");
  std::string value = trim(raw);
  std::int64_t i = 0;
  double d = 0;
  bool ok = true;
  switch (k->type) {
    case KeyType::integer: ok = parse_int(value, i); break;
    case KeyType::real: ok = parse_real(value, d); break;
    case KeyType::boolean:
      if (value == "true") value = "1";
      if (value == "false") value = "0";
      ok = value == "0" || value == "1";
      break;
    case KeyType::list: {
      const auto items = split_list(value);
      value.clear();
      for (std::size_t n = 0; n < items.size(); ++n) value += (n ? "," : "") + items[n];
      ok = !items.empty();
      break;
    }
    case KeyType::text: break;
  }
  if (!ok) fail(ErrorKind::config, "value '" + raw + "' for '" + key + "' is not " + type_name(k->type));
  values_[key] = value;
}

void RunConfig::set_assignment(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) fail(ErrorKind::config, "expected key=value, got '" + assignment + "'");
  set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

void RunConfig::merge_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      fail(ErrorKind::config, origin + ":" + std::to_string(number) + ": expected 'key = value'");
    }
    try {
      set(trim(t.substr(0, eq)), t.substr(eq + 1));
    } catch (const Error& e) {
      fail(ErrorKind::config, origin + ":" + std::to_string(number) + ": " + e.what());
    }
  }
}

void RunConfig::merge_file(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  merge_text(std::string(bytes.begin(), bytes.end()), path.string());
}

void RunConfig::merge_env() {
  if (const char* s = std::getenv("LEAFGRAD_SEED"); s != nullptr && *s != '\0') {
    try {
      set("seed", s);
    } catch (const Error& e) {
      fail(ErrorKind::config, std::string("LEAFGRAD_SEED: ") + e.what());
    }
  }
}

const std::string& RunConfig::get(std::string_view key) const {
  auto it = values_.find(key);
  if (it == values_.end()) fail(ErrorKind::config, "unknown configuration key '" + std::string(key) + "'");
  return it->second;
}

std::int64_t RunConfig::get_int(std::string_view key) const {
  std::int64_t v = 0;
  if (!parse_int(get(key), v)) fail(ErrorKind::config, "'" + std::string(key) + "' is not an integer");
  return v;
}

std::size_t RunConfig::get_size(std::string_view key) const {
  const auto v = get_int(key);
  if (v < 0) fail(ErrorKind::config, "'" + std::string(key) + "' must be >= 0");
  return static_cast<std::size_t>(v);
}

double RunConfig::get_double(std::string_view key) const {
  double v = 0;
  if (!parse_real(get(key), v)) fail(ErrorKind::config, "'" + std::string(key) + "' is not a number");
  return v;
}

bool RunConfig::get_bool(std::string_view key) const { return get(key) == "1"; }

std::vector<std::string> RunConfig::get_list(std::string_view key) const { return split_list(get(key)); }

std::string RunConfig::canonical_text() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

std::uint64_t RunConfig::hash() const { return fnv1a64(canonical_text()); }

std::string RunConfig::hash_hex() const { return hex64(hash()); }

std::string RunConfig::provenance() const { return "leafgrad config_hash=" + hash_hex(); }

std::uint64_t RunConfig::seed() const { return static_cast<std::uint64_t>(get_int("seed")); }

PipelineDefaults RunConfig::pipeline_defaults() const {
  PipelineDefaults d;
  d.height = get_size("image_height");
  d.width = get_size("image_width");
  const auto k = get_int("edge_kernel");
  if (k != 4 && k != 8) fail(ErrorKind::config, "edge_kernel must be 4 or 8");
  d.kernel = k == 4 ? LaplacianKernel::four_neighbor : LaplacianKernel::eight_neighbor;
  d.clip_limit = get_double("clahe_clip");
  d.tiles_y = get_size("clahe_tiles_y");
  d.tiles_x = get_size("clahe_tiles_x");
  return d;
}

PipelineConfig RunConfig::pipeline() const { return parse_pipeline(get("pipeline"), pipeline_defaults()); }

SplitRatios RunConfig::split_ratios() const {
  SplitRatios r{get_double("split_train"), get_double("split_val"), get_double("split_test")};
  r.validate();
  return r;
}

std::vector<std::string> RunConfig::classes() const { return get_list("classes"); }

SEConvNetConfig RunConfig::convnet_config() const {
  SEConvNetConfig c;
  c.channels = get_size("channels");
  c.height = get_size("image_height");
  c.width = get_size("image_width");
  c.stages.clear();
  for (const auto& s : get_list("model.stages")) {
    std::int64_t v = 0;
    if (!parse_int(s, v) || v <= 0) fail(ErrorKind::config, "model.stages entries must be positive integers");
    c.stages.push_back(static_cast<std::size_t>(v));
  }
  c.kernel = get_size("model.kernel");
  c.se_enabled = get_bool("model.se");
  c.se_ratio = get_size("model.se_ratio");
  c.dense_width = get_size("model.dense_width");
  c.dropout_rate = get_double("model.dropout");
  c.l2_coeff = get_double("model.l2");
  c.classes = classes().size();
  c.validate();
  return c;
}

UNetConfig RunConfig::unet_config() const {
  UNetConfig c;
  c.channels = get_size("channels");
  c.height = get_size("image_height");
  c.width = get_size("image_width");
  c.depth = get_size("unet.depth");
  c.base_filters = get_size("unet.base_filters");
  c.se_enabled = get_bool("unet.se");
  c.se_ratio = get_size("unet.se_ratio");
  c.dropout_rate = get_double("unet.dropout");
  c.l2_coeff = get_double("unet.l2");
  c.validate();
  return c;
}

TrainConfig<float> RunConfig::train_config(Task task) const {
  TrainConfig<float> t;
  t.epochs = get_size("train.epochs");
  t.batch_size = get_size("train.batch_size");
  t.lr = get_double(task == Task::classify ? "train.lr_classify" : "train.lr_segment");
  t.seed = seed();
  t.plateau = get_bool("train.plateau");
  t.plateau_factor = get_double("train.plateau_factor");
  t.plateau_patience = get_size("train.plateau_patience");
  t.min_lr = get_double("train.min_lr");
  t.early_stop = get_bool("train.early_stop");
  t.early_stop_patience = get_size("train.early_stop_patience");
  t.augment.enabled = get_bool(task == Task::classify ? "train.augment_classify" : "train.augment_segment");
  t.augment.hflip_prob = get_double("train.hflip_prob");
  t.augment.vflip_prob = get_double("train.vflip_prob");
  t.augment.rotate = get_bool("train.rotate");
  t.threshold = get_double("eval.threshold");
  t.validate();
  return t;
}

}  // namespace leafgrad

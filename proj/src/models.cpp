#include "leafgrad/models.hpp"

#include <cstdio>
#include <sstream>

#include "leafgrad/io_util.hpp"

namespace leafgrad {

std::string_view to_string(Task task) { return task == Task::classify ? "classify" : "segment"; }

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::conv_transpose: return "conv2d_transpose";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::se: return "se";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::concat: return "concat";
    case LayerKind::flatten: return "flatten";
    case LayerKind::dense: return "dense";
    case LayerKind::dropout: return "dropout";
    case LayerKind::softmax: return "softmax";
  }
  return "?";
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::map<std::string, std::string, std::less<>> parse_key_values(const std::string& text) {
  std::map<std::string, std::string, std::less<>> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(ErrorKind::format, "malformed config line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

namespace {

std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string join_names(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
  return s;
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, ',')) {
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

const std::string& require_key(const std::map<std::string, std::string, std::less<>>& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) fail(ErrorKind::format, "model config is missing '" + key + "'");
  return it->second;
}

std::size_t to_size(const std::string& s, const std::string& key) {
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    fail(ErrorKind::format, "model config value for '" + key + "' is not an integer: " + s);
  }
}

double to_double(const std::string& s, const std::string& key) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    fail(ErrorKind::format, "model config value for '" + key + "' is not a number: " + s);
  }
}

bool divisible_by_pow2(std::size_t v, std::size_t levels) { return v % (std::size_t{1} << levels) == 0; }

}  // namespace

void SEConvNetConfig::validate() const {
  if (stages.empty()) fail(ErrorKind::config, "SE-ConvNet needs at least one conv stage");
  if (classes < 2) fail(ErrorKind::config, "SE-ConvNet needs at least two classes");
  if (channels == 0 || height == 0 || width == 0) fail(ErrorKind::config, "SE-ConvNet input extents must be positive");
  if (kernel % 2 == 0) fail(ErrorKind::config, "SE-ConvNet kernel size must be odd");
  if (se_ratio == 0) fail(ErrorKind::config, "SE reduction ratio must be >= 1");
  if (dense_width == 0) fail(ErrorKind::config, "dense width must be >= 1");
  for (auto s : stages)
    if (s == 0) fail(ErrorKind::config, "conv stage widths must be >= 1");
  if (!divisible_by_pow2(height, stages.size()) || !divisible_by_pow2(width, stages.size())) {
    fail(ErrorKind::config, "SE-ConvNet input " + std::to_string(height) + "x" + std::to_string(width) +
                                " is not divisible by 2^" + std::to_string(stages.size()));
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail(ErrorKind::config, "dropout rate must lie in [0, 1)");
  if (!(l2_coeff >= 0.0)) fail(ErrorKind::config, "l2 coefficient must be >= 0");
}

void UNetConfig::validate() const {
  if (depth == 0) fail(ErrorKind::config, "U-Net depth must be >= 1");
  if (base_filters == 0) fail(ErrorKind::config, "U-Net base filters must be >= 1");
  if (channels == 0 || height == 0 || width == 0) fail(ErrorKind::config, "U-Net input extents must be positive");
  if (se_ratio == 0) fail(ErrorKind::config, "SE reduction ratio must be >= 1");
  if (!divisible_by_pow2(height, depth) || !divisible_by_pow2(width, depth)) {
    fail(ErrorKind::config, "U-Net input " + std::to_string(height) + "x" + std::to_string(width) +
                                " is not divisible by 2^" + std::to_string(depth));
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail(ErrorKind::config, "dropout rate must lie in [0, 1)");
  if (!(l2_coeff >= 0.0)) fail(ErrorKind::config, "l2 coefficient must be >= 0");
}

// ---- ModelGraph -----------------------------------------------------------

template <typename T>
const LayerInfo* ModelGraph<T>::find_layer(std::string_view name) const {
  for (const auto& l : layers_)
    if (l.name == name) return &l;
  return nullptr;
}

template <typename T>
Tensor<T>& ModelGraph<T>::parameter(std::string_view name) {
  for (auto& p : params_)
    if (p.name == name) return p.tensor;
  fail(ErrorKind::value, "model has no parameter named '" + std::string(name) + "'");
}

template <typename T>
std::vector<NamedTensor<T>> ModelGraph<T>::state_tensors() const {
  std::vector<NamedTensor<T>> out = params_;
  for (const auto& [name, st] : batchnorms_) {
    out.push_back({name + ".running_mean", st->running_mean, false});
    out.push_back({name + ".running_var", st->running_var, false});
    out.push_back({name + ".updates", Tensor<T>::scalar(static_cast<T>(st->updates)), false});
  }
  return out;
}

template <typename T>
void ModelGraph<T>::load_state(const std::vector<NamedTensor<T>>& tensors) {
  std::map<std::string, const Tensor<T>*, std::less<>> by_name;
  for (const auto& t : tensors) {
    if (!by_name.emplace(t.name, &t.tensor).second) fail(ErrorKind::format, "duplicate tensor '" + t.name + "'");
  }
  const auto expected = state_tensors();
  if (by_name.size() != expected.size()) {
    fail(ErrorKind::format, "state holds " + std::to_string(by_name.size()) + " tensors, model expects " +
                                std::to_string(expected.size()));
  }
  auto source = [&](const std::string& name, const Shape& shape) -> const Tensor<T>& {
    auto it = by_name.find(name);
    if (it == by_name.end()) fail(ErrorKind::format, "state is missing tensor '" + name + "'");
    if (it->second->shape() != shape) {
      fail(ErrorKind::format, "tensor '" + name + "' has shape " + shape_str(it->second->shape()) +
                                  ", model expects " + shape_str(shape));
    }
    return *it->second;
  };
  for (auto& p : params_) {
    const auto& src = source(p.name, p.tensor.shape());
    std::copy(src.data().begin(), src.data().end(), p.tensor.data().begin());
  }
  for (auto& [name, st] : batchnorms_) {
    const auto& mean = source(name + ".running_mean", st->running_mean.shape());
    const auto& var = source(name + ".running_var", st->running_var.shape());
    const auto& updates = source(name + ".updates", Shape{1});
    std::copy(mean.data().begin(), mean.data().end(), st->running_mean.data().begin());
    std::copy(var.data().begin(), var.data().end(), st->running_var.data().begin());
    st->updates = static_cast<std::uint64_t>(updates[0]);
  }
}

template <typename T>
ModelSnapshot<T> ModelGraph<T>::snapshot() const {
  ModelSnapshot<T> snap;
  for (const auto& p : params_) snap.values.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  for (const auto& [name, st] : batchnorms_) {
    snap.values.emplace_back(st->running_mean.data().begin(), st->running_mean.data().end());
    snap.values.emplace_back(st->running_var.data().begin(), st->running_var.data().end());
    snap.bn_updates.push_back(st->updates);
  }
  return snap;
}

template <typename T>
void ModelGraph<T>::restore(const ModelSnapshot<T>& snap) {
  if (snap.values.size() != params_.size() + 2 * batchnorms_.size() || snap.bn_updates.size() != batchnorms_.size()) {
    fail(ErrorKind::state, "snapshot does not belong to this model");
  }
  std::size_t i = 0;
  for (auto& p : params_) std::copy(snap.values[i].begin(), snap.values[i].end(), p.tensor.data().begin()), ++i;
  for (std::size_t b = 0; b < batchnorms_.size(); ++b) {
    auto* st = batchnorms_[b].second;
    std::copy(snap.values[i].begin(), snap.values[i].end(), st->running_mean.data().begin());
    ++i;
    std::copy(snap.values[i].begin(), snap.values[i].end(), st->running_var.data().begin());
    ++i;
    st->updates = snap.bn_updates[b];
  }
}

template <typename T>
void ModelGraph<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template <typename T>
void ModelGraph<T>::set_requires_grad(bool on) {
  for (auto& p : params_) p.tensor.set_requires_grad(on);
}

template <typename T>
std::uint64_t ModelGraph<T>::config_hash() const {
  return fnv1a64(config_text());
}

template <typename T>
Tensor<T> ModelGraph<T>::make_param(const std::string& name, Shape shape, bool decay) {
  Tensor<T> t(std::move(shape));
  register_param(name, t, decay);
  return t;
}

template <typename T>
void ModelGraph<T>::register_param(const std::string& name, const Tensor<T>& tensor, bool decay) {
  for (const auto& p : params_)
    if (p.name == name) fail(ErrorKind::state, "duplicate parameter name '" + name + "'");
  Tensor<T> handle = tensor;
  handle.set_requires_grad(true);
  params_.push_back({name, handle, decay});
}

template <typename T>
void ModelGraph<T>::register_batchnorm(const std::string& name, BatchNormState<T>* state) {
  batchnorms_.emplace_back(name, state);
}

template <typename T>
void ModelGraph<T>::add_layer(std::string name, LayerKind kind, Shape output, std::size_t params) {
  layers_.push_back({std::move(name), kind, std::move(output), params});
}

template <typename T>
void ModelGraph<T>::tap(FeatureTaps<T>* taps, const std::string& name, const Tensor<T>& t) const {
  if (taps != nullptr) (*taps)[name] = t;
}

// ---- shared builders ------------------------------------------------------

namespace {

template <typename T>
struct Builder {
  Rng& rng;

  ConvBlock<T> conv(std::function<Tensor<T>(const std::string&, Shape, bool)> make, const std::string& name,
                    std::size_t cin, std::size_t cout, std::size_t k) {
    ConvBlock<T> b;
    b.name = name;
    b.weight = make(name + ".weight", Shape{cout, cin, k, k}, true);
    he_uniform_fill(b.weight, cin * k * k, rng);
    b.bias = make(name + ".bias", Shape{cout}, false);
    return b;
  }
};

}  // namespace

// ---- SE-ConvNet -----------------------------------------------------------

template <typename T>
SEConvNet<T>::SEConvNet(const SEConvNetConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  auto make = [this](const std::string& n, Shape s, bool decay) { return this->make_param(n, std::move(s), decay); };
  Builder<T> build{rng};
  const std::size_t k = cfg_.kernel;
  const std::size_t n_stages = cfg_.stages.size();
  convs_.reserve(n_stages);
  bns_.reserve(n_stages);
  se_.reserve(n_stages);

  std::size_t c = cfg_.channels, h = cfg_.height, w = cfg_.width;
  for (std::size_t i = 0; i < n_stages; ++i) {
    const std::string p = "stage" + std::to_string(i + 1);
    const std::size_t f = cfg_.stages[i];
    convs_.push_back(build.conv(make, p + ".conv", c, f, k));
    this->add_layer(p + ".conv", LayerKind::conv2d, {f, h, w}, k * k * c * f + f);

    BatchNormBlock<T> bn;
    bn.name = p + ".bn";
    bn.gamma = make(p + ".bn.gamma", Shape{f}, false);
    std::fill(bn.gamma.data().begin(), bn.gamma.data().end(), T{1});
    bn.beta = make(p + ".bn.beta", Shape{f}, false);
    bn.state = BatchNormState<T>(f);
    bns_.push_back(std::move(bn));
    this->register_batchnorm(p + ".bn", &bns_.back().state);
    this->add_layer(p + ".bn", LayerKind::batchnorm, {f, h, w}, 2 * f);
    this->add_layer(p + ".relu", LayerKind::relu, {f, h, w});

    if (cfg_.se_enabled) {
      SEBlock<T> se = SEBlock<T>::create(f, cfg_.se_ratio, rng);
      this->register_param(p + ".se.w1", se.w1, true);
      this->register_param(p + ".se.w2", se.w2, true);
      this->add_layer(p + ".se", LayerKind::se, {f, h, w}, se.parameter_count());
      se_.push_back(std::move(se));
    }
    h /= 2;
    w /= 2;
    c = f;
    this->add_layer(p + ".pool", LayerKind::maxpool, {c, h, w});
  }
  const std::size_t flat = c * h * w;
  this->add_layer("flatten", LayerKind::flatten, {flat});

  fc1_.name = "fc1";
  fc1_.weight = make("fc1.weight", Shape{cfg_.dense_width, flat}, true);
  he_uniform_fill(fc1_.weight, flat, rng);
  fc1_.bias = make("fc1.bias", Shape{cfg_.dense_width}, false);
  this->add_layer("fc1", LayerKind::dense, {cfg_.dense_width}, flat * cfg_.dense_width + cfg_.dense_width);
  this->add_layer("fc1.relu", LayerKind::relu, {cfg_.dense_width});
  this->add_layer("dropout", LayerKind::dropout, {cfg_.dense_width});

  fc2_.name = "fc2";
  fc2_.weight = make("fc2.weight", Shape{cfg_.classes, cfg_.dense_width}, true);
  he_uniform_fill(fc2_.weight, cfg_.dense_width, rng);
  fc2_.bias = make("fc2.bias", Shape{cfg_.classes}, false);
  this->add_layer("fc2", LayerKind::dense, {cfg_.classes}, cfg_.dense_width * cfg_.classes + cfg_.classes);
  this->add_layer("softmax", LayerKind::softmax, {cfg_.classes});
}

template <typename T>
std::string SEConvNet<T>::last_feature_layer() const {
  const std::string p = "stage" + std::to_string(cfg_.stages.size());
  return cfg_.se_enabled ? p + ".se" : p + ".relu";
}

template <typename T>
std::string SEConvNet<T>::config_text() const {
  std::ostringstream os;
  os << "family=convnet\n"
     << "channels=" << cfg_.channels << "\n"
     << "height=" << cfg_.height << "\n"
     << "width=" << cfg_.width << "\n"
     << "stages=" << join_sizes(cfg_.stages) << "\n"
     << "kernel=" << cfg_.kernel << "\n"
     << "se=" << (cfg_.se_enabled ? 1 : 0) << "\n"
     << "se_ratio=" << cfg_.se_ratio << "\n"
     << "dense_width=" << cfg_.dense_width << "\n"
     << "dropout=" << format_double(cfg_.dropout_rate) << "\n"
     << "l2=" << format_double(cfg_.l2_coeff) << "\n"
     << "classes=" << cfg_.classes << "\n";
  if (!this->class_names.empty()) os << "class_names=" << join_names(this->class_names) << "\n";
  return os.str();
}

template <typename T>
Tensor<T> SEConvNet<T>::forward(const Tensor<T>& batch, Mode mode, Rng& rng, FeatureTaps<T>* taps) {
  const Shape expect = input_shape();
  if (batch.rank() != 4 || Shape(batch.shape().begin() + 1, batch.shape().end()) != expect) {
    fail(ErrorKind::shape, "SE-ConvNet expects N x " + shape_str(expect) + " input, got " + shape_str(batch.shape()));
  }
  Tensor<T> x = batch;
  for (std::size_t i = 0; i < cfg_.stages.size(); ++i) {
    const std::string p = "stage" + std::to_string(i + 1);
    x = conv2d(x, convs_[i].weight, convs_[i].bias, {1, Padding::same});
    this->tap(taps, p + ".conv", x);
    x = batchnorm2d(x, bns_[i].gamma, bns_[i].beta, bns_[i].state, mode);
    this->tap(taps, p + ".bn", x);
    x = relu(x);
    this->tap(taps, p + ".relu", x);
    if (cfg_.se_enabled) {
      x = se_forward(x, se_[i]);
      this->tap(taps, p + ".se", x);
    }
    x = maxpool2d(x, 2, 2);
    this->tap(taps, p + ".pool", x);
  }
  x = flatten(x);
  this->tap(taps, "flatten", x);
  x = dense(x, fc1_.weight, fc1_.bias);
  this->tap(taps, "fc1", x);
  x = relu(x);
  this->tap(taps, "fc1.relu", x);
  x = dropout(x, cfg_.dropout_rate, mode, rng);
  this->tap(taps, "dropout", x);
  x = dense(x, fc2_.weight, fc2_.bias);
  this->tap(taps, "fc2", x);
  return x;
}

// ---- U-Net ----------------------------------------------------------------

template <typename T>
UNet<T>::UNet(const UNetConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  auto make = [this](const std::string& n, Shape s, bool decay) { return this->make_param(n, std::move(s), decay); };
  Builder<T> build{rng};
  const std::size_t depth = cfg_.depth;
  enc_.reserve(depth);
  dec_.resize(depth);
  enc_se_.reserve(depth);
  dec_se_.resize(cfg_.se_enabled ? depth : 0);
  up_.resize(depth);

  auto double_conv = [&](DoubleConv& dc, const std::string& prefix, std::size_t cin, std::size_t f, std::size_t h,
                         std::size_t w) {
    for (int j = 1; j <= 2; ++j) {
      const std::string cname = prefix + ".conv" + std::to_string(j);
      const std::string bname = prefix + ".bn" + std::to_string(j);
      ConvBlock<T>& conv = j == 1 ? dc.conv1 : dc.conv2;
      BatchNormBlock<T>& bn = j == 1 ? dc.bn1 : dc.bn2;
      const std::size_t in = j == 1 ? cin : f;
      conv = build.conv(make, cname, in, f, 3);
      this->add_layer(cname, LayerKind::conv2d, {f, h, w}, 9 * in * f + f);
      bn.name = bname;
      bn.gamma = make(bname + ".gamma", Shape{f}, false);
      std::fill(bn.gamma.data().begin(), bn.gamma.data().end(), T{1});
      bn.beta = make(bname + ".beta", Shape{f}, false);
      bn.state = BatchNormState<T>(f);
      this->register_batchnorm(bname, &bn.state);
      this->add_layer(bname, LayerKind::batchnorm, {f, h, w}, 2 * f);
      this->add_layer(prefix + ".relu" + std::to_string(j), LayerKind::relu, {f, h, w});
    }
  };
  auto add_se = [&](std::vector<SEBlock<T>>& blocks, std::size_t slot, const std::string& name, std::size_t f,
                    std::size_t h, std::size_t w) {
    SEBlock<T> se = SEBlock<T>::create(f, cfg_.se_ratio, rng);
    this->register_param(name + ".w1", se.w1, true);
    this->register_param(name + ".w2", se.w2, true);
    this->add_layer(name, LayerKind::se, {f, h, w}, se.parameter_count());
    if (slot < blocks.size()) {
      blocks[slot] = std::move(se);
    } else {
      blocks.push_back(std::move(se));
    }
  };

  std::size_t c = cfg_.channels, h = cfg_.height, w = cfg_.width;
  std::vector<std::size_t> skip_channels;
  for (std::size_t l = 1; l <= depth; ++l) {
    const std::string p = "enc" + std::to_string(l);
    const std::size_t f = cfg_.base_filters << (l - 1);
    enc_.emplace_back();
    double_conv(enc_.back(), p, c, f, h, w);
    if (cfg_.se_enabled) add_se(enc_se_, enc_se_.size(), p + ".se", f, h, w);
    skip_channels.push_back(f);
    h /= 2;
    w /= 2;
    c = f;
    this->add_layer(p + ".pool", LayerKind::maxpool, {c, h, w});
  }
  const std::size_t fb = cfg_.base_filters << depth;
  double_conv(bottleneck_, "bottleneck", c, fb, h, w);
  this->add_layer("bottleneck.dropout", LayerKind::dropout, {fb, h, w});
  c = fb;
  for (std::size_t l = depth; l >= 1; --l) {
    const std::string p = "dec" + std::to_string(l);
    const std::size_t f = cfg_.base_filters << (l - 1);
    h *= 2;
    w *= 2;
    ConvBlock<T>& up = up_[l - 1];
    up.name = p + ".up";
    up.weight = make(p + ".up.weight", Shape{c, f, 2, 2}, true);
    he_uniform_fill(up.weight, c * 4, rng);
    up.bias = make(p + ".up.bias", Shape{f}, false);
    this->add_layer(p + ".up", LayerKind::conv_transpose, {f, h, w}, c * f * 4 + f);
    this->add_layer(p + ".concat", LayerKind::concat, {f + skip_channels[l - 1], h, w});
    double_conv(dec_[l - 1], p, f + skip_channels[l - 1], f, h, w);
    if (cfg_.se_enabled) add_se(dec_se_, l - 1, p + ".se", f, h, w);
    c = f;
  }
  head_ = build.conv(make, "head", c, 1, 1);
  this->add_layer("head", LayerKind::conv2d, {1, h, w}, c + 1);
}

template <typename T>
std::string UNet<T>::config_text() const {
  std::ostringstream os;
  os << "family=unet\n"
     << "channels=" << cfg_.channels << "\n"
     << "height=" << cfg_.height << "\n"
     << "width=" << cfg_.width << "\n"
     << "depth=" << cfg_.depth << "\n"
     << "base_filters=" << cfg_.base_filters << "\n"
     << "se=" << (cfg_.se_enabled ? 1 : 0) << "\n"
     << "se_ratio=" << cfg_.se_ratio << "\n"
     << "dropout=" << format_double(cfg_.dropout_rate) << "\n"
     << "l2=" << format_double(cfg_.l2_coeff) << "\n";
  return os.str();
}

template <typename T>
Tensor<T> UNet<T>::run_double_conv(DoubleConv& block, const std::string& prefix, const Tensor<T>& input, Mode mode,
                                   FeatureTaps<T>* taps) {
  Tensor<T> x = conv2d(input, block.conv1.weight, block.conv1.bias, {1, Padding::same});
  this->tap(taps, prefix + ".conv1", x);
  x = batchnorm2d(x, block.bn1.gamma, block.bn1.beta, block.bn1.state, mode);
  this->tap(taps, prefix + ".bn1", x);
  x = relu(x);
  this->tap(taps, prefix + ".relu1", x);
  x = conv2d(x, block.conv2.weight, block.conv2.bias, {1, Padding::same});
  this->tap(taps, prefix + ".conv2", x);
  x = batchnorm2d(x, block.bn2.gamma, block.bn2.beta, block.bn2.state, mode);
  this->tap(taps, prefix + ".bn2", x);
  x = relu(x);
  this->tap(taps, prefix + ".relu2", x);
  return x;
}

template <typename T>
Tensor<T> UNet<T>::forward(const Tensor<T>& batch, Mode mode, Rng& rng, FeatureTaps<T>* taps) {
  const Shape expect = input_shape();
  if (batch.rank() != 4 || Shape(batch.shape().begin() + 1, batch.shape().end()) != expect) {
    fail(ErrorKind::shape, "U-Net expects N x " + shape_str(expect) + " input, got " + shape_str(batch.shape()));
  }
  std::vector<Tensor<T>> skips;
  Tensor<T> x = batch;
  for (std::size_t l = 1; l <= cfg_.depth; ++l) {
    const std::string p = "enc" + std::to_string(l);
    x = run_double_conv(enc_[l - 1], p, x, mode, taps);
    if (cfg_.se_enabled) {
      x = se_forward(x, enc_se_[l - 1]);
      this->tap(taps, p + ".se", x);
    }
    skips.push_back(x);
    x = maxpool2d(x, 2, 2);
    this->tap(taps, p + ".pool", x);
  }
  x = run_double_conv(bottleneck_, "bottleneck", x, mode, taps);
  x = dropout(x, cfg_.dropout_rate, mode, rng);
  this->tap(taps, "bottleneck.dropout", x);
  for (std::size_t l = cfg_.depth; l >= 1; --l) {
    const std::string p = "dec" + std::to_string(l);
    x = conv2d_transpose(x, up_[l - 1].weight, up_[l - 1].bias, 2);
    this->tap(taps, p + ".up", x);
    x = concat_channels(x, skips[l - 1]);
    this->tap(taps, p + ".concat", x);
    x = run_double_conv(dec_[l - 1], p, x, mode, taps);
    if (cfg_.se_enabled) {
      x = se_forward(x, dec_se_[l - 1]);
      this->tap(taps, p + ".se", x);
    }
  }
  x = conv2d(x, head_.weight, head_.bias, {1, Padding::same});
  this->tap(taps, "head", x);
  return x;
}

// ---- factories and helpers ---------------------------------------------------

template <typename T>
std::unique_ptr<SEConvNet<T>> build_se_convnet(const SEConvNetConfig& cfg, Rng& rng) {
  return std::make_unique<SEConvNet<T>>(cfg, rng);
}

template <typename T>
std::unique_ptr<UNet<T>> build_unet(const UNetConfig& cfg, Rng& rng) {
  return std::make_unique<UNet<T>>(cfg, rng);
}

template <typename T>
std::unique_ptr<ModelGraph<T>> build_from_config_text(const std::string& text, Rng& rng) {
  const auto kv = parse_key_values(text);
  const std::string& family = require_key(kv, "family");
  if (family == "convnet") {
    SEConvNetConfig cfg;
    cfg.channels = to_size(require_key(kv, "channels"), "channels");
    cfg.height = to_size(require_key(kv, "height"), "height");
    cfg.width = to_size(require_key(kv, "width"), "width");
    cfg.stages.clear();
    for (const auto& s : split_commas(require_key(kv, "stages"))) cfg.stages.push_back(to_size(s, "stages"));
    cfg.kernel = to_size(require_key(kv, "kernel"), "kernel");
    cfg.se_enabled = require_key(kv, "se") == "1";
    cfg.se_ratio = to_size(require_key(kv, "se_ratio"), "se_ratio");
    cfg.dense_width = to_size(require_key(kv, "dense_width"), "dense_width");
    cfg.dropout_rate = to_double(require_key(kv, "dropout"), "dropout");
    cfg.l2_coeff = to_double(require_key(kv, "l2"), "l2");
    cfg.classes = to_size(require_key(kv, "classes"), "classes");
    auto model = build_se_convnet<T>(cfg, rng);
    if (auto it = kv.find("class_names"); it != kv.end()) model->class_names = split_commas(it->second);
    return model;
  }
  if (family == "unet") {
    UNetConfig cfg;
    cfg.channels = to_size(require_key(kv, "channels"), "channels");
    cfg.height = to_size(require_key(kv, "height"), "height");
    cfg.width = to_size(require_key(kv, "width"), "width");
    cfg.depth = to_size(require_key(kv, "depth"), "depth");
    cfg.base_filters = to_size(require_key(kv, "base_filters"), "base_filters");
    cfg.se_enabled = require_key(kv, "se") == "1";
    cfg.se_ratio = to_size(require_key(kv, "se_ratio"), "se_ratio");
    cfg.dropout_rate = to_double(require_key(kv, "dropout"), "dropout");
    cfg.l2_coeff = to_double(require_key(kv, "l2"), "l2");
    return build_unet<T>(cfg, rng);
  }
  fail(ErrorKind::format, "unknown model family '" + family + "'");
}

template <typename T>
Tensor<T> forward_classify(ModelGraph<T>& model, const Tensor<T>& batch, Mode mode, Rng* rng) {
  if (model.task() != Task::classify) fail(ErrorKind::state, "forward_classify needs a classification model");
  Rng local(0);
  return softmax(model.forward(batch, mode, rng ? *rng : local));
}

template <typename T>
Tensor<T> forward_segment(ModelGraph<T>& model, const Tensor<T>& batch, Mode mode, Rng* rng) {
  if (model.task() != Task::segment) fail(ErrorKind::state, "forward_segment needs a segmentation model");
  Rng local(0);
  return model.forward(batch, mode, rng ? *rng : local);
}

template <typename T>
ParamReport param_report(const ModelGraph<T>& model) {
  ParamReport r;
  for (const auto& p : model.parameters()) r.count += p.tensor.numel();
  r.bytes32 = r.count * 4;
  return r;
}

#define LEAFGRAD_INSTANTIATE_MODELS(T)                                                                          \
  template class ModelGraph<T>;                                                                                 \
  template class SEConvNet<T>;                                                                                  \
  template class UNet<T>;                                                                                       \
  template std::unique_ptr<SEConvNet<T>> build_se_convnet<T>(const SEConvNetConfig&, Rng&);                    \
  template std::unique_ptr<UNet<T>> build_unet<T>(const UNetConfig&, Rng&);                                     \
  template std::unique_ptr<ModelGraph<T>> build_from_config_text<T>(const std::string&, Rng&);                  \
  template Tensor<T> forward_classify(ModelGraph<T>&, const Tensor<T>&, Mode, Rng*);                            \
  template Tensor<T> forward_segment(ModelGraph<T>&, const Tensor<T>&, Mode, Rng*);                             \
  template ParamReport param_report(const ModelGraph<T>&);

LEAFGRAD_INSTANTIATE_MODELS(float)
LEAFGRAD_INSTANTIATE_MODELS(double)

}  // namespace leafgrad

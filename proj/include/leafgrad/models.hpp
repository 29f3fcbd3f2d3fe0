#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "leafgrad/attention.hpp"
#include "leafgrad/ops.hpp"
#include "leafgrad/rng.hpp"
#include "leafgrad/tensor.hpp"

namespace leafgrad {

enum class Task { classify, segment };
enum class LayerKind { conv2d, conv_transpose, batchnorm, relu, se, maxpool, concat, flatten, dense, dropout, softmax };

std::string_view to_string(Task task);
std::string_view to_string(LayerKind kind);

// One node of a model's layer list. `output` is the per-sample shape
// (C x H x W for feature maps, F for vectors).
struct LayerInfo {
  std::string name;
  LayerKind kind;
  Shape output;
  std::size_t params = 0;
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
  bool decay = false;  // receives the L2 penalty (kernels and dense weights)
};

template <typename T>
using FeatureTaps = std::map<std::string, Tensor<T>, std::less<>>;

struct SEConvNetConfig {
  std::size_t channels = 3;
  std::size_t height = 224;
  std::size_t width = 224;
  std::vector<std::size_t> stages{32, 64, 128};
  std::size_t kernel = 3;
  bool se_enabled = true;
  std::size_t se_ratio = 16;
  std::size_t dense_width = 64;
  double dropout_rate = 0.5;
  double l2_coeff = 1e-4;
  std::size_t classes = 4;

  void validate() const;
};

struct UNetConfig {
  std::size_t channels = 3;
  std::size_t height = 224;
  std::size_t width = 224;
  std::size_t depth = 4;
  std::size_t base_filters = 32;
  bool se_enabled = true;
  std::size_t se_ratio = 16;
  double dropout_rate = 0.5;
  double l2_coeff = 1e-4;

  void validate() const;
};

struct ParamReport {
  std::size_t count = 0;
  std::size_t bytes32 = 0;
  double megabytes() const { return static_cast<double>(bytes32) / 1e6; }
};

// Frozen copy of every parameter and batch-norm statistic.
template <typename T>
struct ModelSnapshot {
  std::vector<std::vector<T>> values;
  std::vector<std::uint64_t> bn_updates;
};

template <typename T>
class ModelGraph {
 public:
  ModelGraph() = default;
  ModelGraph(const ModelGraph&) = delete;
  ModelGraph& operator=(const ModelGraph&) = delete;
  virtual ~ModelGraph() = default;

  virtual Task task() const = 0;
  virtual std::string model_name() const = 0;
  // Canonical key=value text from which the graph can be rebuilt.
  virtual std::string config_text() const = 0;
  virtual double l2_coeff() const = 0;
  // Per-sample input shape, C x H x W.
  virtual Shape input_shape() const = 0;
  // Classes for a classifier, mask channels for a segmenter.
  virtual std::size_t num_outputs() const = 0;

  // Returns class logits (N x K) or mask logits (N x 1 x H x W). When `taps`
  // is given every layer output is stored under its layer name.
  virtual Tensor<T> forward(const Tensor<T>& batch, Mode mode, Rng& rng, FeatureTaps<T>* taps = nullptr) = 0;

  const std::vector<LayerInfo>& layers() const { return layers_; }
  const LayerInfo* find_layer(std::string_view name) const;

  std::vector<NamedTensor<T>>& parameters() { return params_; }
  const std::vector<NamedTensor<T>>& parameters() const { return params_; }
  Tensor<T>& parameter(std::string_view name);
  const std::vector<std::pair<std::string, BatchNormState<T>*>>& batchnorms() const { return batchnorms_; }

  // Parameters followed by batch-norm running mean/var and update counters
  // (the counter is stored as a one-element tensor). Handles alias the live
  // storage except for the counters.
  std::vector<NamedTensor<T>> state_tensors() const;
  // Copies values by name; every state tensor must be present with a
  // matching shape.
  void load_state(const std::vector<NamedTensor<T>>& tensors);

  ModelSnapshot<T> snapshot() const;
  void restore(const ModelSnapshot<T>& snap);

  void zero_grad();
  void set_requires_grad(bool on);
  std::uint64_t config_hash() const;

  std::vector<std::string> class_names;

 protected:
  Tensor<T> make_param(const std::string& name, Shape shape, bool decay);
  void register_param(const std::string& name, const Tensor<T>& tensor, bool decay);
  void register_batchnorm(const std::string& name, BatchNormState<T>* state);
  void add_layer(std::string name, LayerKind kind, Shape output, std::size_t params = 0);
  void tap(FeatureTaps<T>* taps, const std::string& name, const Tensor<T>& t) const;

 private:
  std::vector<NamedTensor<T>> params_;
  std::vector<std::pair<std::string, BatchNormState<T>*>> batchnorms_;
  std::vector<LayerInfo> layers_;
};

template <typename T>
struct ConvBlock {
  std::string name;
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
struct BatchNormBlock {
  std::string name;
  Tensor<T> gamma;
  Tensor<T> beta;
  BatchNormState<T> state;
};

// conv3x3 -> BN -> ReLU -> (SE) -> maxpool per stage, then
// flatten -> dense -> ReLU -> dropout -> dense -> softmax.
template <typename T>
class SEConvNet final : public ModelGraph<T> {
 public:
  SEConvNet(const SEConvNetConfig& cfg, Rng& rng);

  Task task() const override { return Task::classify; }
  std::string model_name() const override { return cfg_.se_enabled ? "se_convnet" : "cnn"; }
  std::string config_text() const override;
  double l2_coeff() const override { return cfg_.l2_coeff; }
  Shape input_shape() const override { return {cfg_.channels, cfg_.height, cfg_.width}; }
  std::size_t num_outputs() const override { return cfg_.classes; }
  Tensor<T> forward(const Tensor<T>& batch, Mode mode, Rng& rng, FeatureTaps<T>* taps = nullptr) override;

  const SEConvNetConfig& config() const { return cfg_; }
  SEBlock<T>& se_block(std::size_t stage) { return se_.at(stage); }
  // Name of the last pre-pooling feature map, the default explanation layer.
  std::string last_feature_layer() const;

 private:
  SEConvNetConfig cfg_;
  std::vector<ConvBlock<T>> convs_;
  std::vector<BatchNormBlock<T>> bns_;
  std::vector<SEBlock<T>> se_;
  ConvBlock<T> fc1_, fc2_;
};

// Encoder: depth x (conv-BN-ReLU x2 -> SE? -> maxpool); bottleneck
// (conv-BN-ReLU x2 -> dropout); decoder: depth x (2x2 transpose conv ->
// concat skip -> conv-BN-ReLU x2 -> SE?); 1x1 conv head with one logit map.
template <typename T>
class UNet final : public ModelGraph<T> {
 public:
  UNet(const UNetConfig& cfg, Rng& rng);

  Task task() const override { return Task::segment; }
  std::string model_name() const override { return cfg_.se_enabled ? "unet_se" : "unet"; }
  std::string config_text() const override;
  double l2_coeff() const override { return cfg_.l2_coeff; }
  Shape input_shape() const override { return {cfg_.channels, cfg_.height, cfg_.width}; }
  std::size_t num_outputs() const override { return 1; }
  Tensor<T> forward(const Tensor<T>& batch, Mode mode, Rng& rng, FeatureTaps<T>* taps = nullptr) override;

  const UNetConfig& config() const { return cfg_; }

 private:
  struct DoubleConv {
    ConvBlock<T> conv1, conv2;
    BatchNormBlock<T> bn1, bn2;
  };
  Tensor<T> run_double_conv(DoubleConv& block, const std::string& prefix, const Tensor<T>& x, Mode mode,
                            FeatureTaps<T>* taps);

  UNetConfig cfg_;
  std::vector<DoubleConv> enc_, dec_;  // dec_[l - 1] is decoder level l
  DoubleConv bottleneck_;
  std::vector<SEBlock<T>> enc_se_, dec_se_;
  std::vector<ConvBlock<T>> up_;
  ConvBlock<T> head_;
};

template <typename T>
std::unique_ptr<SEConvNet<T>> build_se_convnet(const SEConvNetConfig& cfg, Rng& rng);

template <typename T>
std::unique_ptr<UNet<T>> build_unet(const UNetConfig& cfg, Rng& rng);

// Rebuilds a graph from ModelGraph::config_text().
template <typename T>
std::unique_ptr<ModelGraph<T>> build_from_config_text(const std::string& text, Rng& rng);

// Probabilities N x K; rows sum to one.
template <typename T>
Tensor<T> forward_classify(ModelGraph<T>& model, const Tensor<T>& batch, Mode mode = Mode::eval,
                           Rng* rng = nullptr);

// Mask logits N x 1 x H x W.
template <typename T>
Tensor<T> forward_segment(ModelGraph<T>& model, const Tensor<T>& batch, Mode mode = Mode::eval,
                          Rng* rng = nullptr);

template <typename T>
ParamReport param_report(const ModelGraph<T>& model);

// Canonical text helpers shared with the checkpoint reader.
std::string format_double(double v);
std::map<std::string, std::string, std::less<>> parse_key_values(const std::string& text);

}  // namespace leafgrad

#include "leafgrad/attention.hpp"

#include <algorithm>
#include <cmath>

namespace leafgrad {

std::size_t se_bottleneck(std::size_t channels, std::size_t reduction_ratio) {
  if (channels == 0 || reduction_ratio == 0) fail(ErrorKind::config, "SE block needs channels and ratio >= 1");
  return std::max<std::size_t>(1, channels / reduction_ratio);
}

template <typename T>
void he_uniform_fill(Tensor<T>& t, std::size_t fan_in, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-limit, limit));
}

template <typename T>
SEBlock<T> SEBlock<T>::create(std::size_t channels, std::size_t reduction_ratio, Rng& rng) {
  SEBlock b = zeros(channels, reduction_ratio);
  he_uniform_fill(b.w1, channels, rng);
  he_uniform_fill(b.w2, b.bottleneck, rng);
  return b;
}

template <typename T>
SEBlock<T> SEBlock<T>::zeros(std::size_t channels, std::size_t reduction_ratio) {
  SEBlock b;
  b.channels = channels;
  b.reduction_ratio = reduction_ratio;
  b.bottleneck = se_bottleneck(channels, reduction_ratio);
  b.w1 = Tensor<T>(Shape{b.bottleneck, channels});
  b.w2 = Tensor<T>(Shape{channels, b.bottleneck});
  return b;
}

template <typename T>
Tensor<T> squeeze(const Tensor<T>& x) {
  return global_avg_pool(x);
}

template <typename T>
Tensor<T> excite(const Tensor<T>& z, const SEBlock<T>& block) {
  if (z.rank() != 2 || z.dim(1) != block.channels) {
    fail(ErrorKind::shape, "excite: descriptor " + shape_str(z.shape()) + " does not match an SE block over " +
                               std::to_string(block.channels) + " channels");
  }
  return sigmoid(dense(relu(dense(z, block.w1)), block.w2));
}

template <typename T>
Tensor<T> recalibrate(const Tensor<T>& x, const Tensor<T>& s) {
  return scale_channels(x, s);
}

template <typename T>
Tensor<T> se_forward(const Tensor<T>& x, const SEBlock<T>& block) {
  if (x.rank() != 4 || x.dim(1) != block.channels) {
    fail(ErrorKind::shape, "se_forward: features " + shape_str(x.shape()) + " do not have " +
                               std::to_string(block.channels) + " channels");
  }
  if (block.force_unit_scale) return recalibrate(x, Tensor<T>(Shape{x.dim(0), x.dim(1)}, T{1}));
  return recalibrate(x, excite(squeeze(x), block));
}

#define LEAFGRAD_INSTANTIATE_SE(T)                                         \
  template struct SEBlock<T>;                                              \
  template void he_uniform_fill(Tensor<T>&, std::size_t, Rng&);            \
  template Tensor<T> squeeze(const Tensor<T>&);                            \
  template Tensor<T> excite(const Tensor<T>&, const SEBlock<T>&);          \
  template Tensor<T> recalibrate(const Tensor<T>&, const Tensor<T>&);      \
  template Tensor<T> se_forward(const Tensor<T>&, const SEBlock<T>&);

LEAFGRAD_INSTANTIATE_SE(float)
LEAFGRAD_INSTANTIATE_SE(double)

}  // namespace leafgrad

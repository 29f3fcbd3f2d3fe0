#include "leafgrad/augment.hpp"

#include <algorithm>

namespace leafgrad {

void AugmentConfig::validate() const {
  if (!(hflip_prob >= 0.0 && hflip_prob <= 1.0) || !(vflip_prob >= 0.0 && vflip_prob <= 1.0)) {
    fail(ErrorKind::config, "flip probabilities must lie in [0, 1]");
  }
}

Transform sample_transform(const AugmentConfig& cfg, Rng& rng) {
  const double h = rng.uniform();
  const double v = rng.uniform();
  const auto turns = static_cast<unsigned>(rng.below(4));
  Transform tf;
  if (!cfg.enabled) return tf;
  tf.hflip = h < cfg.hflip_prob;
  tf.vflip = v < cfg.vflip_prob;
  tf.quarter_turns = cfg.rotate ? turns : 0;
  return tf;
}

template <typename T>
std::vector<T> apply_transform(std::span<const T> chw, std::size_t channels, std::size_t height, std::size_t width,
                               const Transform& tf) {
  if (chw.size() != channels * height * width) fail(ErrorKind::shape, "apply_transform: size mismatch");
  unsigned turns = tf.quarter_turns % 4;
  if (height != width) turns &= 2u;
  std::vector<T> out(chw.size());
  const std::size_t n = height;
  for (std::size_t c = 0; c < channels; ++c) {
    const T* src = chw.data() + c * height * width;
    T* dst = out.data() + c * height * width;
    for (std::size_t i = 0; i < height; ++i)
      for (std::size_t j = 0; j < width; ++j) {
        // Walk back from the output position to the source position.
        std::size_t y = i, x = j;
        switch (turns) {
          case 1: y = j; x = n - 1 - i; break;
          case 2: y = height - 1 - i; x = width - 1 - j; break;
          case 3: y = n - 1 - j; x = i; break;
          default: break;
        }
        if (tf.vflip) y = height - 1 - y;
        if (tf.hflip) x = width - 1 - x;
        dst[i * width + j] = src[y * width + x];
      }
  }
  return out;
}

template <typename T>
void augment_batch(Tensor<T>& images, Tensor<T>* masks, const AugmentConfig& cfg, Rng& rng) {
  if (images.rank() != 4) fail(ErrorKind::shape, "augment_batch: images must be N x C x H x W");
  const std::size_t N = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
  if (masks != nullptr && masks->shape() != Shape{N, 1, H, W}) {
    fail(ErrorKind::shape, "augment_batch: masks " + shape_str(masks->shape()) + " do not pair with images " +
                               shape_str(images.shape()));
  }
  for (std::size_t s = 0; s < N; ++s) {
    const Transform tf = sample_transform(cfg, rng);
    if (tf.is_identity()) continue;
    auto img = images.data().subspan(s * C * H * W, C * H * W);
    const auto moved = apply_transform<T>(img, C, H, W, tf);
    std::copy(moved.begin(), moved.end(), img.begin());
    if (masks != nullptr) {
      auto m = masks->data().subspan(s * H * W, H * W);
      const auto moved_mask = apply_transform<T>(m, 1, H, W, tf);
      std::copy(moved_mask.begin(), moved_mask.end(), m.begin());
    }
  }
}

template std::vector<float> apply_transform(std::span<const float>, std::size_t, std::size_t, std::size_t,
                                            const Transform&);
template std::vector<double> apply_transform(std::span<const double>, std::size_t, std::size_t, std::size_t,
                                             const Transform&);
template void augment_batch(Tensor<float>&, Tensor<float>*, const AugmentConfig&, Rng&);
template void augment_batch(Tensor<double>&, Tensor<double>*, const AugmentConfig&, Rng&);

}  // namespace leafgrad

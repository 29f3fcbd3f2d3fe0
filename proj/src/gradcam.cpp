#include "leafgrad/gradcam.hpp"

#include <algorithm>
#include <cmath>

#include "leafgrad/ops.hpp"

namespace leafgrad {

std::size_t Heatmap::argmax() const {
  return static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
}

std::vector<double> resize_plane(const std::vector<double>& src, std::size_t h, std::size_t w, std::size_t out_h,
                                 std::size_t out_w) {
  if (src.size() != h * w || h == 0 || w == 0) fail(ErrorKind::shape, "resize_plane: bad source extents");
  std::vector<double> out(out_h * out_w);
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double ay = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double ax = fx - static_cast<double>(x0);
      const double top = src[y0 * w + x0] * (1 - ax) + src[y0 * w + x1] * ax;
      const double bottom = src[y1 * w + x0] * (1 - ax) + src[y1 * w + x1] * ax;
      out[y * out_w + x] = top * (1 - ay) + bottom * ay;
    }
  }
  return out;
}

void normalize_unit(std::vector<double>& values) {
  if (values.empty()) return;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double mn = *lo, mx = *hi;
  if (mx == mn) {
    std::fill(values.begin(), values.end(), mx > 0.0 ? 1.0 : 0.0);
    return;
  }
  for (auto& v : values) v = std::clamp((v - mn) / (mx - mn), 0.0, 1.0);
}

template <typename T>
GradCamResult<T> gradcam_pp_detailed(ModelGraph<T>& model, const Tensor<T>& image, std::size_t target_class,
                                     const std::string& layer) {
  if (model.task() != Task::classify) fail(ErrorKind::state, "gradcam_pp needs a classification model");
  const LayerInfo* info = model.find_layer(layer);
  if (info == nullptr) fail(ErrorKind::value, "gradcam_pp: unknown layer '" + layer + "'");
  if (info->output.size() != 3) fail(ErrorKind::value, "gradcam_pp: layer '" + layer + "' is not a convolutional feature map");
  if (target_class >= model.num_outputs()) {
    fail(ErrorKind::value, "gradcam_pp: class " + std::to_string(target_class) + " outside the model's " +
                               std::to_string(model.num_outputs()) + " classes");
  }
  Tensor<T> batch = image;
  if (image.rank() == 3) batch = Tensor<T>(Shape{1, image.dim(0), image.dim(1), image.dim(2)},
                                           std::vector<T>(image.data().begin(), image.data().end()));
  if (batch.rank() != 4 || batch.dim(0) != 1) fail(ErrorKind::shape, "gradcam_pp: expects a single image");

  GradCamResult<T> res;
  const std::size_t C = info->output[0], h = info->output[1], w = info->output[2];
  std::vector<double> acts(C * h * w), grads(C * h * w);
  {
    Tape<T> tape;
    TapeScope<T> scope(tape);
    model.set_requires_grad(true);
    FeatureTaps<T> taps;
    Rng unused(0);
    const Tensor<T> logits = model.forward(batch, Mode::eval, unused, &taps);
    const std::size_t idx[] = {target_class};
    const Tensor<T> score = pick(logits, std::span<const std::size_t>(idx));
    res.score = static_cast<double>(score.item());
    const Tensor<T>& A = taps.at(layer);
    tape.backward(score);
    for (std::size_t i = 0; i < acts.size(); ++i) acts[i] = A[i];
    if (A.has_grad()) {
      auto g = A.grad();
      for (std::size_t i = 0; i < grads.size(); ++i) grads[i] = g[i];
    }
  }
  model.zero_grad();

  const std::size_t HW = h * w;
  res.channel_weights.assign(C, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    double act_sum = 0;
    for (std::size_t p = 0; p < HW; ++p) act_sum += acts[c * HW + p];
    double wk = 0;
    for (std::size_t p = 0; p < HW; ++p) {
      const double g = grads[c * HW + p];
      if (g == 0.0) continue;
      const double g2 = g * g, g3 = g2 * g;
      const double den = 2.0 * g2 + act_sum * g3;
      const double alpha = den != 0.0 ? g2 / den : 0.0;
      wk += alpha * std::max(g, 0.0);
    }
    res.channel_weights[c] = wk;
  }
  res.raw.assign(HW, 0.0);
  for (std::size_t p = 0; p < HW; ++p) {
    double s = 0;
    for (std::size_t c = 0; c < C; ++c) s += res.channel_weights[c] * acts[c * HW + p];
    res.raw[p] = std::max(s, 0.0);
  }
  res.layer_height = h;
  res.layer_width = w;
  res.heatmap.height = batch.dim(2);
  res.heatmap.width = batch.dim(3);
  res.heatmap.values = resize_plane(res.raw, h, w, batch.dim(2), batch.dim(3));
  normalize_unit(res.heatmap.values);
  return res;
}

template <typename T>
Heatmap gradcam_pp(ModelGraph<T>& model, const Tensor<T>& image, std::size_t target_class, const std::string& layer) {
  return gradcam_pp_detailed(model, image, target_class, layer).heatmap;
}

ImageU8 heatmap_gray(const Heatmap& map) {
  ImageU8 img(map.height, map.width, 1);
  for (std::size_t i = 0; i < map.values.size(); ++i)
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(map.values[i], 0.0, 1.0) * 255.0));
  return img;
}

ImageU8 heatmap_overlay(const ImageU8& base, const Heatmap& map) {
  if (base.height != map.height || base.width != map.width) {
    fail(ErrorKind::shape, "heatmap_overlay: base image and heatmap sizes differ");
  }
  ImageU8 out(map.height, map.width, 3);
  for (std::size_t y = 0; y < map.height; ++y)
    for (std::size_t x = 0; x < map.width; ++x) {
      const double v = std::clamp(map.at(y, x), 0.0, 1.0);
      // blue -> green -> red
      const double ramp[3] = {std::clamp(2.0 * v - 1.0, 0.0, 1.0), 1.0 - std::abs(2.0 * v - 1.0),
                              std::clamp(1.0 - 2.0 * v, 0.0, 1.0)};
      for (std::size_t c = 0; c < 3; ++c) {
        const double b = base.at(y, x, base.channels == 3 ? c : 0);
        out.at(y, x, c) = static_cast<std::uint8_t>(std::lround(0.5 * b + 0.5 * 255.0 * ramp[c]));
      }
    }
  return out;
}

template GradCamResult<float> gradcam_pp_detailed(ModelGraph<float>&, const Tensor<float>&, std::size_t,
                                                  const std::string&);
template GradCamResult<double> gradcam_pp_detailed(ModelGraph<double>&, const Tensor<double>&, std::size_t,
                                                   const std::string&);
template Heatmap gradcam_pp(ModelGraph<float>&, const Tensor<float>&, std::size_t, const std::string&);
template Heatmap gradcam_pp(ModelGraph<double>&, const Tensor<double>&, std::size_t, const std::string&);

}  // namespace leafgrad

#include "leafgrad/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "leafgrad/ops.hpp"

namespace leafgrad {

namespace {

template <typename T>
void check_mask_pair(const Tensor<T>& pred, const Tensor<T>& target, const char* op) {
  if (!pred.defined() || !target.defined() || pred.shape() != target.shape() || pred.rank() < 2) {
    fail(ErrorKind::shape, std::string(op) + ": prediction " + (pred.defined() ? shape_str(pred.shape()) : "[]") +
                               " and target " + (target.defined() ? shape_str(target.shape()) : "[]") +
                               " must share an N x ... shape");
  }
}

struct Overlap {
  double inter = 0, pred = 0, truth = 0;
};

template <typename T>
std::vector<Overlap> overlaps(const Tensor<T>& pred, const Tensor<T>& target) {
  const std::size_t N = pred.dim(0), M = pred.numel() / N;
  std::vector<Overlap> out(N);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < M; ++i) {
      const double p = pred[n * M + i], t = target[n * M + i];
      out[n].inter += p * t;
      out[n].pred += p;
      out[n].truth += t;
    }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& probs, std::span<const std::size_t> labels) {
  if (!probs.defined() || probs.rank() != 2) fail(ErrorKind::shape, "cross_entropy: probabilities must be N x K");
  const std::size_t N = probs.dim(0), K = probs.dim(1);
  if (labels.size() != N) {
    fail(ErrorKind::shape, "cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(N) +
                               " rows");
  }
  const T lo = static_cast<T>(kProbClamp), hi = static_cast<T>(1.0 - kProbClamp);
  T total{0};
  for (std::size_t n = 0; n < N; ++n) {
    if (labels[n] >= K) {
      fail(ErrorKind::value, "cross_entropy: label " + std::to_string(labels[n]) + " outside [0, " +
                                 std::to_string(K) + ")");
    }
    total -= std::log(std::clamp(probs[n * K + labels[n]], lo, hi));
  }
  Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(N));
  if (Tape<T>* tape = detail::recording_tape<T>({&probs})) {
    std::vector<std::size_t> idx(labels.begin(), labels.end());
    tape->record("cross_entropy", {&probs}, out, [probs, out, idx = std::move(idx), N, K, lo, hi]() {
      const T dy = out.grad()[0];
      auto dp = probs.grad_mut();
      for (std::size_t n = 0; n < N; ++n) {
        const T p = probs[n * K + idx[n]];
        if (p > lo && p < hi) dp[n * K + idx[n]] -= dy / (p * static_cast<T>(N));
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> l2_penalty(const ModelGraph<T>& model, double coeff) {
  Tensor<T> acc = Tensor<T>::scalar(T{0});
  if (coeff == 0.0) return acc;
  for (const auto& p : model.parameters()) {
    if (p.decay) acc = add(acc, sum_squares(p.tensor));
  }
  return scale(acc, static_cast<T>(coeff));
}

template <typename T>
Tensor<T> cross_entropy_loss(const Tensor<T>& probs, std::span<const std::size_t> labels,
                             const ModelGraph<T>& model, double l2) {
  if (l2 < 0.0) fail(ErrorKind::value, "cross_entropy_loss: l2 coefficient must be >= 0");
  Tensor<T> loss = cross_entropy(probs, labels);
  return l2 == 0.0 ? loss : add(loss, l2_penalty(model, l2));
}

template <typename T>
Tensor<T> dice_coeff(const Tensor<T>& pred, const Tensor<T>& target) {
  check_mask_pair(pred, target, "dice_coeff");
  const std::size_t N = pred.dim(0), M = pred.numel() / N;
  const auto ov = overlaps(pred, target);
  double total = 0;
  for (const auto& o : ov) total += (2 * o.inter + kOverlapEps) / (o.pred + o.truth + kOverlapEps);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(N)));
  if (Tape<T>* tape = detail::recording_tape<T>({&pred})) {
    tape->record("dice_coeff", {&pred}, out, [pred, target, out, ov, N, M]() {
      const double dy = out.grad()[0] / static_cast<double>(N);
      auto dp = pred.grad_mut();
      for (std::size_t n = 0; n < N; ++n) {
        const double num = 2 * ov[n].inter + kOverlapEps, den = ov[n].pred + ov[n].truth + kOverlapEps;
        for (std::size_t i = 0; i < M; ++i) {
          const double t = target[n * M + i];
          dp[n * M + i] += static_cast<T>(dy * (2 * t * den - num) / (den * den));
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> iou_coeff(const Tensor<T>& pred, const Tensor<T>& target) {
  check_mask_pair(pred, target, "iou_coeff");
  const std::size_t N = pred.dim(0), M = pred.numel() / N;
  const auto ov = overlaps(pred, target);
  double total = 0;
  for (const auto& o : ov) total += (o.inter + kOverlapEps) / (o.pred + o.truth - o.inter + kOverlapEps);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(N)));
  if (Tape<T>* tape = detail::recording_tape<T>({&pred})) {
    tape->record("iou_coeff", {&pred}, out, [pred, target, out, ov, N, M]() {
      const double dy = out.grad()[0] / static_cast<double>(N);
      auto dp = pred.grad_mut();
      for (std::size_t n = 0; n < N; ++n) {
        const double num = ov[n].inter + kOverlapEps;
        const double den = ov[n].pred + ov[n].truth - ov[n].inter + kOverlapEps;
        for (std::size_t i = 0; i < M; ++i) {
          const double t = target[n * M + i];
          dp[n * M + i] += static_cast<T>(dy * (t * den - num * (1 - t)) / (den * den));
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> combined_seg_loss(const Tensor<T>& logits, const Tensor<T>& target, const ModelGraph<T>& model,
                            double l2) {
  check_mask_pair(logits, target, "combined_seg_loss");
  if (l2 < 0.0) fail(ErrorKind::value, "combined_seg_loss: l2 coefficient must be >= 0");
  const Tensor<T> probs = sigmoid(logits);
  // 0.5 (1 - d) + 0.5 (1 - i) = 1 - 0.5 (d + i)
  Tensor<T> loss = add_scalar(scale(add(dice_coeff(probs, target), iou_coeff(probs, target)), T(-0.5)), T{1});
  return l2 == 0.0 ? loss : add(loss, l2_penalty(model, l2));
}

double dice_value(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size()) fail(ErrorKind::shape, "dice_value: size mismatch");
  double inter = 0, p = 0, t = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += pred[i] * target[i];
    p += pred[i];
    t += target[i];
  }
  return (2 * inter + kOverlapEps) / (p + t + kOverlapEps);
}

double iou_value(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size()) fail(ErrorKind::shape, "iou_value: size mismatch");
  double inter = 0, p = 0, t = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += pred[i] * target[i];
    p += pred[i];
    t += target[i];
  }
  return (inter + kOverlapEps) / (p + t - inter + kOverlapEps);
}

#define LEAFGRAD_INSTANTIATE_LOSSES(T)                                                                        \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const std::size_t>);                          \
  template Tensor<T> l2_penalty(const ModelGraph<T>&, double);                                                \
  template Tensor<T> cross_entropy_loss(const Tensor<T>&, std::span<const std::size_t>, const ModelGraph<T>&, \
                                        double);                                                              \
  template Tensor<T> dice_coeff(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> iou_coeff(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> combined_seg_loss(const Tensor<T>&, const Tensor<T>&, const ModelGraph<T>&, double);

LEAFGRAD_INSTANTIATE_LOSSES(float)
LEAFGRAD_INSTANTIATE_LOSSES(double)

}  // namespace leafgrad

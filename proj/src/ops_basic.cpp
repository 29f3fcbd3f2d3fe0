#include <algorithm>
#include <cmath>

#include "leafgrad/ops.hpp"

namespace leafgrad {

namespace {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    fail(ErrorKind::shape, std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                               " differ");
  }
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

}  // namespace

template <typename T>
Tensor<T> dense(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (!input.defined() || input.rank() != 2) fail(ErrorKind::shape, "dense: input must be N x F");
  if (!weight.defined() || weight.rank() != 2) fail(ErrorKind::shape, "dense: weight must be G x F");
  const std::size_t N = input.dim(0), F = input.dim(1), G = weight.dim(0);
  if (weight.dim(1) != F) {
    fail(ErrorKind::shape, "dense: weight " + shape_str(weight.shape()) + " does not accept " + std::to_string(F) +
                               " input features");
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != G)) {
    fail(ErrorKind::shape, "dense: bias must have " + std::to_string(G) + " entries");
  }
  Tensor<T> out(Shape{N, G});
  const T* x = input.data().data();
  const T* w = weight.data().data();
  for (std::size_t n = 0; n < N; ++n) {
    const T* xr = x + n * F;
    for (std::size_t g = 0; g < G; ++g) {
      const T* wr = w + g * F;
      T acc = bias.defined() ? bias[g] : T{0};
      for (std::size_t f = 0; f < F; ++f) acc += wr[f] * xr[f];
      out[n * G + g] = acc;
    }
  }
  detail::check_finite(out, "dense");
  if (Tape<T>* tape = detail::recording_tape<T>({&input, &weight, &bias})) {
    tape->record("dense", {&input, &weight, &bias}, out, [input, weight, bias, out, N, F, G]() {
      auto dy = out.grad();
      const T* x = input.data().data();
      const T* w = weight.data().data();
      if (input.requires_grad()) {
        auto dx = input.grad_mut();
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t g = 0; g < G; ++g) {
            const T d = dy[n * G + g];
            for (std::size_t f = 0; f < F; ++f) dx[n * F + f] += d * w[g * F + f];
          }
      }
      if (weight.requires_grad()) {
        auto dw = weight.grad_mut();
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t g = 0; g < G; ++g) {
            const T d = dy[n * G + g];
            for (std::size_t f = 0; f < F; ++f) dw[g * F + f] += d * x[n * F + f];
          }
      }
      if (bias.defined() && bias.requires_grad()) {
        auto db = bias.grad_mut();
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t g = 0; g < G; ++g) db[g] += dy[n * G + g];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormState<T>& state, Mode mode) {
  if (!input.defined() || input.rank() != 4) fail(ErrorKind::shape, "batchnorm2d: input must be N x C x H x W");
  const std::size_t N = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  for (const Tensor<T>* p : std::initializer_list<const Tensor<T>*>{&gamma, &beta, &state.running_mean, &state.running_var}) {
    if (!p->defined() || p->numel() != C) {
      fail(ErrorKind::shape, "batchnorm2d: per-channel parameters must have " + std::to_string(C) + " entries");
    }
  }
  const T eps = static_cast<T>(state.eps);
  std::vector<T> mean(C), inv_std(C);
  if (mode == Mode::train) {
    const T count = static_cast<T>(N * HW);
    const T mom = static_cast<T>(state.momentum);
    for (std::size_t c = 0; c < C; ++c) {
      T s{0};
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < HW; ++p) s += input[(n * C + c) * HW + p];
      const T mu = s / count;
      T v{0};
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < HW; ++p) {
          const T d = input[(n * C + c) * HW + p] - mu;
          v += d * d;
        }
      v /= count;
      mean[c] = mu;
      inv_std[c] = T{1} / std::sqrt(v + eps);
      state.running_mean[c] = mom * state.running_mean[c] + (T{1} - mom) * mu;
      state.running_var[c] = mom * state.running_var[c] + (T{1} - mom) * v;
    }
    ++state.updates;
  } else {
    if (state.updates == 0 && !state.identity_fallback) {
      fail(ErrorKind::state, "batchnorm2d: eval mode before any running statistics were recorded");
    }
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = state.running_mean[c];
      inv_std[c] = T{1} / std::sqrt(state.running_var[c] + eps);
    }
  }

  Tensor<T> out(input.shape());
  Tensor<T> xhat(input.shape());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < HW; ++p) {
        const std::size_t i = (n * C + c) * HW + p;
        xhat[i] = (input[i] - mean[c]) * inv_std[c];
        out[i] = gamma[c] * xhat[i] + beta[c];
      }
  detail::check_finite(out, "batchnorm2d");

  if (Tape<T>* tape = detail::recording_tape<T>({&input, &gamma, &beta})) {
    tape->record("batchnorm2d", {&input, &gamma, &beta}, out,
                 [input, gamma, beta, out, xhat, inv_std = std::move(inv_std), mode, N, C, HW]() {
                   auto dy = out.grad();
                   std::vector<T> sum_dy(C, T{0}), sum_dy_xhat(C, T{0});
                   for (std::size_t n = 0; n < N; ++n)
                     for (std::size_t c = 0; c < C; ++c)
                       for (std::size_t p = 0; p < HW; ++p) {
                         const std::size_t i = (n * C + c) * HW + p;
                         sum_dy[c] += dy[i];
                         sum_dy_xhat[c] += dy[i] * xhat[i];
                       }
                   if (gamma.requires_grad()) {
                     auto dg = gamma.grad_mut();
                     for (std::size_t c = 0; c < C; ++c) dg[c] += sum_dy_xhat[c];
                   }
                   if (beta.requires_grad()) {
                     auto db = beta.grad_mut();
                     for (std::size_t c = 0; c < C; ++c) db[c] += sum_dy[c];
                   }
                   if (!input.requires_grad()) return;
                   auto dx = input.grad_mut();
                   const T m = static_cast<T>(N * HW);
                   for (std::size_t n = 0; n < N; ++n)
                     for (std::size_t c = 0; c < C; ++c) {
                       const T scale = gamma[c] * inv_std[c];
                       for (std::size_t p = 0; p < HW; ++p) {
                         const std::size_t i = (n * C + c) * HW + p;
                         if (mode == Mode::train) {
                           dx[i] += scale * (dy[i] - sum_dy[c] / m - xhat[i] * sum_dy_xhat[c] / m);
                         } else {
                           dx[i] += scale * dy[i];
                         }
                       }
                     }
                 });
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = input[i] > T{0} ? input[i] : T{0};
  if (Tape<T>* tape = detail::recording_tape<T>({&input})) {
    tape->record("relu", {&input}, out, [input, out]() {
      auto dy = out.grad();
      auto dx = input.grad_mut();
      for (std::size_t i = 0; i < dy.size(); ++i)
        if (input[i] > T{0}) dx[i] += dy[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = stable_sigmoid(input[i]);
  if (Tape<T>* tape = detail::recording_tape<T>({&input})) {
    tape->record("sigmoid", {&input}, out, [input, out]() {
      auto dy = out.grad();
      auto dx = input.grad_mut();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * out[i] * (T{1} - out[i]);
    });
  }
  return out;
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(input[i]);
  if (Tape<T>* tape = detail::recording_tape<T>({&input})) {
    tape->record("tanh", {&input}, out, [input, out]() {
      auto dy = out.grad();
      auto dx = input.grad_mut();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * (T{1} - out[i] * out[i]);
    });
  }
  return out;
}

template <typename T>
Tensor<T> activation(const Tensor<T>& input, ActivationKind kind) {
  switch (kind) {
    case ActivationKind::relu: return relu(input);
    case ActivationKind::sigmoid: return sigmoid(input);
    case ActivationKind::tanh: return tanh(input);
  }
  fail(ErrorKind::value, "activation: unknown kind");
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& input) {
  if (!input.defined() || input.rank() != 2) fail(ErrorKind::shape, "softmax: input must be N x K");
  const std::size_t N = input.dim(0), K = input.dim(1);
  Tensor<T> out(input.shape());
  for (std::size_t n = 0; n < N; ++n) {
    T mx = input[n * K];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, input[n * K + k]);
    T total{0};
    for (std::size_t k = 0; k < K; ++k) {
      out[n * K + k] = std::exp(input[n * K + k] - mx);
      total += out[n * K + k];
    }
    for (std::size_t k = 0; k < K; ++k) out[n * K + k] /= total;
  }
  detail::check_finite(out, "softmax");
  if (Tape<T>* tape = detail::recording_tape<T>({&input})) {
    tape->record("softmax", {&input}, out, [input, out, N, K]() {
      auto dy = out.grad();
      auto dx = input.grad_mut();
      for (std::size_t n = 0; n < N; ++n) {
        T dot{0};
        for (std::size_t k = 0; k < K; ++k) dot += dy[n * K + k] * out[n * K + k];
        for (std::size_t k = 0; k < K; ++k) dx[n * K + k] += out[n * K + k] * (dy[n * K + k] - dot);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& input, double rate, Mode mode, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) fail(ErrorKind::value, "dropout: rate must lie in [0, 1)");
  if (mode == Mode::eval || rate == 0.0) return input;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(input.numel());
  for (auto& m : mask) m = rng.bernoulli(rate) ? T{0} : keep_scale;
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = input[i] * mask[i];
  if (Tape<T>* tape = detail::recording_tape<T>({&input})) {
    tape->record("dropout", {&input}, out, [input, out, mask = std::move(mask)]() {
      auto dy = out.grad();
      auto dx = input.grad_mut();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * mask[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& input, Shape shape) {
  if (shape_numel(shape) != input.numel()) {
    fail(ErrorKind::shape, "reshape: cannot view " + shape_str(input.shape()) + " as " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape), std::vector<T>(input.data().begin(), input.data().end()));
  if (Tape<T>* tape = detail::recording_tape<T>({&input})) {
    tape->record("reshape", {&input}, out, [input, out]() {
      auto dy = out.grad();
      auto dx = input.grad_mut();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> flatten(const Tensor<T>& input) {
  const std::size_t n = input.dim(0);
  return reshape(input, Shape{n, input.numel() / n});
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 4 || b.rank() != 4 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    fail(ErrorKind::shape, "concat_channels: cannot join " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t N = a.dim(0), CA = a.dim(1), CB = b.dim(1), HW = a.dim(2) * a.dim(3);
  Tensor<T> out(Shape{N, CA + CB, a.dim(2), a.dim(3)});
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(n * CA * HW), CA * HW,
                out.data().begin() + static_cast<std::ptrdiff_t>(n * (CA + CB) * HW));
    std::copy_n(b.data().begin() + static_cast<std::ptrdiff_t>(n * CB * HW), CB * HW,
                out.data().begin() + static_cast<std::ptrdiff_t>((n * (CA + CB) + CA) * HW));
  }
  if (Tape<T>* tape = detail::recording_tape<T>({&a, &b})) {
    tape->record("concat_channels", {&a, &b}, out, [a, b, out, N, CA, CB, HW]() {
      auto dy = out.grad();
      for (std::size_t n = 0; n < N; ++n) {
        if (a.requires_grad()) {
          auto da = a.grad_mut();
          for (std::size_t i = 0; i < CA * HW; ++i) da[n * CA * HW + i] += dy[n * (CA + CB) * HW + i];
        }
        if (b.requires_grad()) {
          auto db = b.grad_mut();
          for (std::size_t i = 0; i < CB * HW; ++i) db[n * CB * HW + i] += dy[(n * (CA + CB) + CA) * HW + i];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& s) {
  if (x.rank() != 4 || s.rank() != 2 || s.dim(0) != x.dim(0) || s.dim(1) != x.dim(1)) {
    fail(ErrorKind::shape, "scale_channels: weights " + shape_str(s.shape()) + " do not match features " +
                               shape_str(x.shape()));
  }
  const std::size_t NC = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> out(x.shape());
  for (std::size_t nc = 0; nc < NC; ++nc)
    for (std::size_t p = 0; p < HW; ++p) out[nc * HW + p] = s[nc] * x[nc * HW + p];
  if (Tape<T>* tape = detail::recording_tape<T>({&x, &s})) {
    tape->record("scale_channels", {&x, &s}, out, [x, s, out, NC, HW]() {
      auto dy = out.grad();
      if (x.requires_grad()) {
        auto dx = x.grad_mut();
        for (std::size_t nc = 0; nc < NC; ++nc)
          for (std::size_t p = 0; p < HW; ++p) dx[nc * HW + p] += s[nc] * dy[nc * HW + p];
      }
      if (s.requires_grad()) {
        auto ds = s.grad_mut();
        for (std::size_t nc = 0; nc < NC; ++nc) {
          T acc{0};
          for (std::size_t p = 0; p < HW; ++p) acc += x[nc * HW + p] * dy[nc * HW + p];
          ds[nc] += acc;
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] + b[i];
  if (Tape<T>* tape = detail::recording_tape<T>({&a, &b})) {
    tape->record("add", {&a, &b}, out, [a, b, out]() {
      auto dy = out.grad();
      if (a.requires_grad()) {
        auto da = a.grad_mut();
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
      }
      if (b.requires_grad()) {
        auto db = b.grad_mut();
        for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * b[i];
  if (Tape<T>* tape = detail::recording_tape<T>({&a, &b})) {
    tape->record("mul", {&a, &b}, out, [a, b, out]() {
      auto dy = out.grad();
      if (a.requires_grad()) {
        auto da = a.grad_mut();
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * b[i];
      }
      if (b.requires_grad()) {
        auto db = b.grad_mut();
        for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * a[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * factor;
  if (Tape<T>* tape = detail::recording_tape<T>({&a})) {
    tape->record("scale", {&a}, out, [a, out, factor]() {
      auto dy = out.grad();
      auto da = a.grad_mut();
      for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T offset) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] + offset;
  if (Tape<T>* tape = detail::recording_tape<T>({&a})) {
    tape->record("add_scalar", {&a}, out, [a, out]() {
      auto dy = out.grad();
      auto da = a.grad_mut();
      for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc{0};
  for (T v : a.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (Tape<T>* tape = detail::recording_tape<T>({&a})) {
    tape->record("sum", {&a}, out, [a, out]() {
      const T g = out.grad()[0];
      auto da = a.grad_mut();
      for (auto& d : da) d += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T{1} / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> sum_squares(const Tensor<T>& a) {
  T acc{0};
  for (T v : a.data()) acc += v * v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (Tape<T>* tape = detail::recording_tape<T>({&a})) {
    tape->record("sum_squares", {&a}, out, [a, out]() {
      const T g = out.grad()[0];
      auto da = a.grad_mut();
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += T{2} * a[i] * g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> pick(const Tensor<T>& input, std::span<const std::size_t> index) {
  if (input.rank() != 2 || index.size() != input.dim(0)) {
    fail(ErrorKind::shape, "pick: need one index per row of " + shape_str(input.shape()));
  }
  const std::size_t N = input.dim(0), K = input.dim(1);
  std::vector<std::size_t> idx(index.begin(), index.end());
  Tensor<T> out(Shape{N});
  for (std::size_t n = 0; n < N; ++n) {
    if (idx[n] >= K) fail(ErrorKind::value, "pick: index " + std::to_string(idx[n]) + " out of range");
    out[n] = input[n * K + idx[n]];
  }
  if (Tape<T>* tape = detail::recording_tape<T>({&input})) {
    tape->record("pick", {&input}, out, [input, out, idx = std::move(idx), K]() {
      auto dy = out.grad();
      auto dx = input.grad_mut();
      for (std::size_t n = 0; n < dy.size(); ++n) dx[n * K + idx[n]] += dy[n];
    });
  }
  return out;
}

#define LEAFGRAD_INSTANTIATE_BASIC(T)                                                                      \
  template Tensor<T> dense(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> batchnorm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, BatchNormState<T>&, \
                                 Mode);                                                                    \
  template Tensor<T> relu(const Tensor<T>&);                                                               \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                            \
  template Tensor<T> tanh(const Tensor<T>&);                                                               \
  template Tensor<T> activation(const Tensor<T>&, ActivationKind);                                         \
  template Tensor<T> softmax(const Tensor<T>&);                                                            \
  template Tensor<T> dropout(const Tensor<T>&, double, Mode, Rng&);                                        \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                     \
  template Tensor<T> flatten(const Tensor<T>&);                                                            \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> scale_channels(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> scale(const Tensor<T>&, T);                                                           \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                                      \
  template Tensor<T> sum(const Tensor<T>&);                                                                \
  template Tensor<T> mean(const Tensor<T>&);                                                               \
  template Tensor<T> sum_squares(const Tensor<T>&);                                                        \
  template Tensor<T> pick(const Tensor<T>&, std::span<const std::size_t>);

LEAFGRAD_INSTANTIATE_BASIC(float)
LEAFGRAD_INSTANTIATE_BASIC(double)

}  // namespace leafgrad

#include <algorithm>
#include <limits>

#include "leafgrad/ops.hpp"

namespace leafgrad {

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w;     // input
  std::size_t k, kh, kw;      // kernels
  std::size_t oh, ow;         // output
  std::size_t stride;
  std::ptrdiff_t pad_top, pad_left;
};

// Output columns whose source column ow * stride + offset lies in [0, width).
inline void column_range(std::ptrdiff_t offset, std::size_t stride, std::size_t width, std::size_t out_w,
                         std::size_t& lo, std::size_t& hi) {
  const auto s = static_cast<std::ptrdiff_t>(stride);
  std::ptrdiff_t first = offset >= 0 ? 0 : (-offset + s - 1) / s;
  std::ptrdiff_t last = (static_cast<std::ptrdiff_t>(width) - 1 - offset);
  last = last < 0 ? -1 : last / s;
  lo = static_cast<std::size_t>(std::max<std::ptrdiff_t>(first, 0));
  hi = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(last + 1, 0, static_cast<std::ptrdiff_t>(out_w)));
  if (lo > hi) lo = hi;
}

template <typename T>
ConvGeometry conv_geometry(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>& bias,
                           const Conv2dOptions& opt) {
  if (!input.defined() || input.rank() != 4) fail(ErrorKind::shape, "conv2d: input must be N x C x H x W");
  if (!kernels.defined() || kernels.rank() != 4) fail(ErrorKind::shape, "conv2d: kernels must be K x C x kh x kw");
  if (opt.stride == 0) fail(ErrorKind::value, "conv2d: stride must be >= 1");
  ConvGeometry g{};
  g.n = input.dim(0);
  g.c = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.k = kernels.dim(0);
  g.kh = kernels.dim(2);
  g.kw = kernels.dim(3);
  g.stride = opt.stride;
  if (kernels.dim(1) != g.c) {
    fail(ErrorKind::shape, "conv2d: kernel channels " + std::to_string(kernels.dim(1)) +
                               " do not match input channels " + std::to_string(g.c));
  }
  if (g.kh % 2 == 0 || g.kw % 2 == 0) fail(ErrorKind::shape, "conv2d: kernel extents must be odd");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.k)) {
    fail(ErrorKind::shape, "conv2d: bias must have " + std::to_string(g.k) + " entries");
  }
  if (opt.padding == Padding::same) {
    g.oh = (g.h + g.stride - 1) / g.stride;
    g.ow = (g.w + g.stride - 1) / g.stride;
    const std::ptrdiff_t pad_h = std::max<std::ptrdiff_t>(
        static_cast<std::ptrdiff_t>((g.oh - 1) * g.stride + g.kh) - static_cast<std::ptrdiff_t>(g.h), 0);
    const std::ptrdiff_t pad_w = std::max<std::ptrdiff_t>(
        static_cast<std::ptrdiff_t>((g.ow - 1) * g.stride + g.kw) - static_cast<std::ptrdiff_t>(g.w), 0);
    g.pad_top = pad_h / 2;
    g.pad_left = pad_w / 2;
  } else {
    if (g.h < g.kh || g.w < g.kw) {
      fail(ErrorKind::shape, "conv2d: valid padding needs input of at least the kernel size, got " +
                                 shape_str(input.shape()));
    }
    g.oh = (g.h - g.kh) / g.stride + 1;
    g.ow = (g.w - g.kw) / g.stride + 1;
    g.pad_top = 0;
    g.pad_left = 0;
  }
  return g;
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>& bias, Conv2dOptions options) {
  const ConvGeometry g = conv_geometry(input, kernels, bias, options);
  Tensor<T> out(Shape{g.n, g.k, g.oh, g.ow});
  const T* x = input.data().data();
  const T* wt = kernels.data().data();
  T* y = out.data().data();
  const std::size_t in_plane = g.h * g.w;
  const std::size_t out_plane = g.oh * g.ow;

  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t k = 0; k < g.k; ++k) {
      T* yp = y + (n * g.k + k) * out_plane;
      const T b = bias.defined() ? bias[k] : T{0};
      std::fill(yp, yp + out_plane, b);
      for (std::size_t c = 0; c < g.c; ++c) {
        const T* xp = x + (n * g.c + c) * in_plane;
        for (std::size_t i = 0; i < g.kh; ++i) {
          for (std::size_t j = 0; j < g.kw; ++j) {
            const T wv = wt[((k * g.c + c) * g.kh + i) * g.kw + j];
            const std::ptrdiff_t col_off = static_cast<std::ptrdiff_t>(j) - g.pad_left;
            std::size_t lo, hi;
            column_range(col_off, g.stride, g.w, g.ow, lo, hi);
            for (std::size_t oh = 0; oh < g.oh; ++oh) {
              const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + i) - g.pad_top;
              if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) continue;
              const T* row = xp + static_cast<std::size_t>(ih) * g.w;
              T* orow = yp + oh * g.ow;
              for (std::size_t ow = lo; ow < hi; ++ow) {
                orow[ow] += wv * row[static_cast<std::ptrdiff_t>(ow * g.stride) + col_off];
              }
            }
          }
        }
      }
    }
  }
  detail::check_finite(out, "conv2d");

  if (Tape<T>* tape = detail::recording_tape<T>({&input, &kernels, &bias})) {
    tape->record("conv2d", {&input, &kernels, &bias}, out, [input, kernels, bias, out, g]() mutable {
      const T* dy = out.grad().data();
      const T* xv = input.data().data();
      const T* wv_all = kernels.data().data();
      const std::size_t in_plane = g.h * g.w;
      const std::size_t out_plane = g.oh * g.ow;
      T* dx = input.requires_grad() ? input.grad_mut().data() : nullptr;
      T* dw = kernels.requires_grad() ? kernels.grad_mut().data() : nullptr;
      if (bias.defined() && bias.requires_grad()) {
        auto db = bias.grad_mut();
        for (std::size_t n = 0; n < g.n; ++n)
          for (std::size_t k = 0; k < g.k; ++k) {
            const T* dyp = dy + (n * g.k + k) * out_plane;
            T acc{0};
            for (std::size_t p = 0; p < out_plane; ++p) acc += dyp[p];
            db[k] += acc;
          }
      }
      if (dx == nullptr && dw == nullptr) return;
      for (std::size_t n = 0; n < g.n; ++n) {
        for (std::size_t k = 0; k < g.k; ++k) {
          const T* dyp = dy + (n * g.k + k) * out_plane;
          for (std::size_t c = 0; c < g.c; ++c) {
            const T* xp = xv + (n * g.c + c) * in_plane;
            T* dxp = dx ? dx + (n * g.c + c) * in_plane : nullptr;
            for (std::size_t i = 0; i < g.kh; ++i) {
              for (std::size_t j = 0; j < g.kw; ++j) {
                const std::size_t widx = ((k * g.c + c) * g.kh + i) * g.kw + j;
                const T wv = wv_all[widx];
                const std::ptrdiff_t col_off = static_cast<std::ptrdiff_t>(j) - g.pad_left;
                std::size_t lo, hi;
                column_range(col_off, g.stride, g.w, g.ow, lo, hi);
                T wacc{0};
                for (std::size_t oh = 0; oh < g.oh; ++oh) {
                  const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + i) - g.pad_top;
                  if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) continue;
                  const std::size_t row_off = static_cast<std::size_t>(ih) * g.w;
                  const T* dyrow = dyp + oh * g.ow;
                  if (dxp) {
                    T* dxrow = dxp + row_off;
                    for (std::size_t ow = lo; ow < hi; ++ow) {
                      dxrow[static_cast<std::ptrdiff_t>(ow * g.stride) + col_off] += wv * dyrow[ow];
                    }
                  }
                  if (dw) {
                    const T* xrow = xp + row_off;
                    for (std::size_t ow = lo; ow < hi; ++ow) {
                      wacc += xrow[static_cast<std::ptrdiff_t>(ow * g.stride) + col_off] * dyrow[ow];
                    }
                  }
                }
                if (dw) dw[widx] += wacc;
              }
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> conv2d_transpose(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>& bias,
                           std::size_t stride) {
  if (!input.defined() || input.rank() != 4) fail(ErrorKind::shape, "conv2d_transpose: input must be N x C x H x W");
  if (!kernels.defined() || kernels.rank() != 4) {
    fail(ErrorKind::shape, "conv2d_transpose: kernels must be C x K x kh x kw");
  }
  if (stride == 0) fail(ErrorKind::value, "conv2d_transpose: stride must be >= 1");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (kernels.dim(0) != C) {
    fail(ErrorKind::shape, "conv2d_transpose: kernel input channels " + std::to_string(kernels.dim(0)) +
                               " do not match input channels " + std::to_string(C));
  }
  const std::size_t K = kernels.dim(1), KH = kernels.dim(2), KW = kernels.dim(3);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != K)) {
    fail(ErrorKind::shape, "conv2d_transpose: bias must have " + std::to_string(K) + " entries");
  }
  const std::size_t OH = (H - 1) * stride + KH, OW = (W - 1) * stride + KW;
  Tensor<T> out(Shape{N, K, OH, OW});
  const T* x = input.data().data();
  const T* wt = kernels.data().data();
  T* y = out.data().data();

  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t k = 0; k < K; ++k) {
      T* yp = y + (n * K + k) * OH * OW;
      std::fill(yp, yp + OH * OW, bias.defined() ? bias[k] : T{0});
      for (std::size_t c = 0; c < C; ++c) {
        const T* xp = x + (n * C + c) * H * W;
        for (std::size_t i = 0; i < KH; ++i)
          for (std::size_t j = 0; j < KW; ++j) {
            const T wv = wt[((c * K + k) * KH + i) * KW + j];
            for (std::size_t ih = 0; ih < H; ++ih) {
              T* orow = yp + (ih * stride + i) * OW + j;
              const T* xrow = xp + ih * W;
              for (std::size_t iw = 0; iw < W; ++iw) orow[iw * stride] += wv * xrow[iw];
            }
          }
      }
    }
  }
  detail::check_finite(out, "conv2d_transpose");

  if (Tape<T>* tape = detail::recording_tape<T>({&input, &kernels, &bias})) {
    tape->record("conv2d_transpose", {&input, &kernels, &bias}, out,
                 [input, kernels, bias, out, N, C, H, W, K, KH, KW, OH, OW, stride]() mutable {
                   const T* dy = out.grad().data();
                   const T* xv = input.data().data();
                   const T* wv_all = kernels.data().data();
                   T* dx = input.requires_grad() ? input.grad_mut().data() : nullptr;
                   T* dw = kernels.requires_grad() ? kernels.grad_mut().data() : nullptr;
                   if (bias.defined() && bias.requires_grad()) {
                     auto db = bias.grad_mut();
                     for (std::size_t n = 0; n < N; ++n)
                       for (std::size_t k = 0; k < K; ++k) {
                         const T* dyp = dy + (n * K + k) * OH * OW;
                         T acc{0};
                         for (std::size_t p = 0; p < OH * OW; ++p) acc += dyp[p];
                         db[k] += acc;
                       }
                   }
                   for (std::size_t n = 0; n < N; ++n)
                     for (std::size_t k = 0; k < K; ++k) {
                       const T* dyp = dy + (n * K + k) * OH * OW;
                       for (std::size_t c = 0; c < C; ++c) {
                         const T* xp = xv + (n * C + c) * H * W;
                         T* dxp = dx ? dx + (n * C + c) * H * W : nullptr;
                         for (std::size_t i = 0; i < KH; ++i)
                           for (std::size_t j = 0; j < KW; ++j) {
                             const std::size_t widx = ((c * K + k) * KH + i) * KW + j;
                             const T wv = wv_all[widx];
                             T wacc{0};
                             for (std::size_t ih = 0; ih < H; ++ih) {
                               const T* dyrow = dyp + (ih * stride + i) * OW + j;
                               const T* xrow = xp + ih * W;
                               if (dxp) {
                                 T* dxrow = dxp + ih * W;
                                 for (std::size_t iw = 0; iw < W; ++iw) dxrow[iw] += wv * dyrow[iw * stride];
                               }
                               if (dw) {
                                 for (std::size_t iw = 0; iw < W; ++iw) wacc += xrow[iw] * dyrow[iw * stride];
                               }
                             }
                             if (dw) dw[widx] += wacc;
                           }
                       }
                     }
                 });
  }
  return out;
}

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& input, std::size_t window, std::size_t stride, bool pad_to_fit) {
  if (!input.defined() || input.rank() != 4) fail(ErrorKind::shape, "maxpool2d: input must be N x C x H x W");
  if (window == 0 || stride == 0) fail(ErrorKind::value, "maxpool2d: window and stride must be >= 1");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  auto extent = [&](std::size_t len, const char* axis) -> std::size_t {
    if (len >= window && (len - window) % stride == 0) return (len - window) / stride + 1;
    if (!pad_to_fit) {
      fail(ErrorKind::shape, std::string("maxpool2d: ") + axis + " extent " + std::to_string(len) +
                                 " does not tile into windows of " + std::to_string(window) + " with stride " +
                                 std::to_string(stride));
    }
    return len <= window ? 1 : (len - window + stride - 1) / stride + 1;
  };
  const std::size_t OH = extent(H, "height"), OW = extent(W, "width");
  Tensor<T> out(Shape{N, C, OH, OW});
  std::vector<std::size_t> argmax(out.numel());
  const T* x = input.data().data();
  T* y = out.data().data();
  std::size_t o = 0;
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const std::size_t base = nc * H * W;
    for (std::size_t oh = 0; oh < OH; ++oh)
      for (std::size_t ow = 0; ow < OW; ++ow, ++o) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_idx = base + oh * stride * W + ow * stride;
        for (std::size_t i = 0; i < window; ++i) {
          const std::size_t ih = oh * stride + i;
          if (ih >= H) break;
          for (std::size_t j = 0; j < window; ++j) {
            const std::size_t iw = ow * stride + j;
            if (iw >= W) break;
            const std::size_t idx = base + ih * W + iw;
            if (x[idx] > best) {
              best = x[idx];
              best_idx = idx;
            }
          }
        }
        y[o] = best;
        argmax[o] = best_idx;
      }
  }
  if (Tape<T>* tape = detail::recording_tape<T>({&input})) {
    tape->record("maxpool2d", {&input}, out, [input, out, argmax = std::move(argmax)]() mutable {
      auto dy = out.grad();
      auto dx = input.grad_mut();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[argmax[i]] += dy[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  if (!input.defined() || input.rank() != 4) fail(ErrorKind::shape, "global_avg_pool: input must be N x C x H x W");
  const std::size_t N = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  Tensor<T> out(Shape{N, C});
  const T* x = input.data().data();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    T acc{0};
    for (std::size_t p = 0; p < HW; ++p) acc += x[nc * HW + p];
    out[nc] = acc / static_cast<T>(HW);
  }
  if (Tape<T>* tape = detail::recording_tape<T>({&input})) {
    tape->record("global_avg_pool", {&input}, out, [input, out, N, C, HW]() mutable {
      auto dy = out.grad();
      auto dx = input.grad_mut();
      for (std::size_t nc = 0; nc < N * C; ++nc) {
        const T g = dy[nc] / static_cast<T>(HW);
        for (std::size_t p = 0; p < HW; ++p) dx[nc * HW + p] += g;
      }
    });
  }
  return out;
}

template Tensor<float> conv2d(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&, Conv2dOptions);
template Tensor<double> conv2d(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&, Conv2dOptions);
template Tensor<float> conv2d_transpose(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&,
                                        std::size_t);
template Tensor<double> conv2d_transpose(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&,
                                         std::size_t);
template Tensor<float> maxpool2d(const Tensor<float>&, std::size_t, std::size_t, bool);
template Tensor<double> maxpool2d(const Tensor<double>&, std::size_t, std::size_t, bool);
template Tensor<float> global_avg_pool(const Tensor<float>&);
template Tensor<double> global_avg_pool(const Tensor<double>&);

}  // namespace leafgrad

#include <cmath>
#include <numeric>

#include "doctest.h"
#include "leafgrad/ops.hpp"
#include "test_support.hpp"

using namespace leafgrad;
using leafgrad::testing::grad_check;
using leafgrad::testing::random_tensor;

namespace {

// Weighted sum against fixed random coefficients; gives every output element
// a distinct upstream gradient.
Tensor<double> probe(const Tensor<double>& y, const Tensor<double>& w) { return sum(mul(y, w)); }

Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& k, const Tensor<double>& b,
                          std::size_t stride, bool same) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t K = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  std::size_t Ho, Wo, pt = 0, pl = 0;
  if (same) {
    Ho = (H + stride - 1) / stride;
    Wo = (W + stride - 1) / stride;
    const std::size_t ph = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>((Ho - 1) * stride + kh) - static_cast<std::ptrdiff_t>(H));
    const std::size_t pw = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>((Wo - 1) * stride + kw) - static_cast<std::ptrdiff_t>(W));
    pt = ph / 2;
    pl = pw / 2;
  } else {
    Ho = (H - kh) / stride + 1;
    Wo = (W - kw) / stride + 1;
  }
  Tensor<double> out(Shape{N, K, Ho, Wo});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < K; ++o)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double acc = b.defined() ? b[o] : 0.0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t u = 0; u < kh; ++u)
              for (std::size_t v = 0; v < kw; ++v) {
                const auto y = static_cast<std::ptrdiff_t>(i * stride + u) - static_cast<std::ptrdiff_t>(pt);
                const auto xx = static_cast<std::ptrdiff_t>(j * stride + v) - static_cast<std::ptrdiff_t>(pl);
                if (y < 0 || xx < 0 || y >= static_cast<std::ptrdiff_t>(H) || xx >= static_cast<std::ptrdiff_t>(W)) continue;
                acc += x[((n * C + c) * H + static_cast<std::size_t>(y)) * W + static_cast<std::size_t>(xx)] *
                       k[((o * C + c) * kh + u) * kw + v];
              }
          out[((n * K + o) * Ho + i) * Wo + j] = acc;
        }
  return out;
}

Tensor<double> naive_conv_transpose(const Tensor<double>& x, const Tensor<double>& k, const Tensor<double>& b,
                                    std::size_t stride) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t K = k.dim(1), kh = k.dim(2), kw = k.dim(3);
  const std::size_t Ho = (H - 1) * stride + kh, Wo = (W - 1) * stride + kw;
  Tensor<double> out(Shape{N, K, Ho, Wo});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < K; ++o)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) out[((n * K + o) * Ho + i) * Wo + j] = b.defined() ? b[o] : 0.0;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j)
          for (std::size_t o = 0; o < K; ++o)
            for (std::size_t u = 0; u < kh; ++u)
              for (std::size_t v = 0; v < kw; ++v)
                out[((n * K + o) * Ho + i * stride + u) * Wo + j * stride + v] +=
                    x[((n * C + c) * H + i) * W + j] * k[((c * K + o) * kh + u) * kw + v];
  return out;
}

void require_close(const Tensor<double>& a, const Tensor<double>& b, double tol) {
  REQUIRE(a.shape() == b.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) REQUIRE(std::abs(a[i] - b[i]) <= tol);
}

constexpr int kGradInstances = 20;
constexpr double kGradTol = 1e-4;

}  // namespace

TEST_CASE("tensor shape and storage invariants") {
  Tensor<double> t(Shape{2, 3}, 1.5);
  CHECK(t.numel() == 6);
  CHECK(shape_numel(t.shape()) == t.data().size());
  CHECK(shape_str(t.shape()) == "[2x3]");
  Tensor<double> alias = t;
  alias[0] = 7;
  CHECK(t[0] == 7);
  Tensor<double> copy = t.clone();
  copy[0] = 1;
  CHECK(t[0] == 7);
  CHECK_THROWS_AS(Tensor<double>(Shape{2, 2}, std::vector<double>{1, 2, 3}), Error);
  t.grad_mut();
  CHECK(t.grad().size() == t.numel());
}

TEST_CASE("rng streams are reproducible and forks differ") {
  Rng a(123), b(123);
  for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
  Rng c(5);
  std::mt19937_64 ref(5);
  CHECK(c.next_u64() == ref());
  Rng f1 = Rng(9).fork(1), f2 = Rng(9).fork(2);
  CHECK(f1.next_u64() != f2.next_u64());
  Rng d(3);
  for (int i = 0; i < 1000; ++i) {
    const double u = d.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    REQUIRE(d.below(7) < 7);
  }
}

TEST_CASE("conv2d fixed cases") {
  Tensor<double> ones_in(Shape{1, 1, 3, 3}, 1.0), ones_k(Shape{1, 1, 3, 3}, 1.0), zero_b(Shape{1}, 0.0);
  const auto y = conv2d(ones_in, ones_k, zero_b, {1, Padding::valid});
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y[0] == 9.0);

  Rng rng(1);
  const auto x = random_tensor({1, 1, 5, 5}, rng);
  Tensor<double> ident(Shape{1, 1, 3, 3}, 0.0);
  ident[4] = 1.0;
  const auto same = conv2d(x, ident, zero_b, {1, Padding::same});
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(same[i] == x[i]);

  CHECK_THROWS_AS(conv2d(x, Tensor<double>(Shape{1, 2, 3, 3}), zero_b), Error);
  CHECK_THROWS_AS(conv2d(x, ones_k, zero_b, {0, Padding::same}), Error);
  CHECK_THROWS_AS(conv2d(Tensor<double>(Shape{1, 1, 2, 2}), ones_k, zero_b, {1, Padding::valid}), Error);
}

TEST_CASE("conv2d matches the nested-loop oracle") {
  Rng rng(2);
  for (std::size_t stride : {1u, 2u}) {
    for (bool same : {true, false}) {
      const auto x = random_tensor({2, 2, 6, 7}, rng);
      const auto k = random_tensor({3, 2, 3, 3}, rng);
      const auto b = random_tensor({3}, rng);
      const auto y = conv2d(x, k, b, {stride, same ? Padding::same : Padding::valid});
      require_close(y, naive_conv(x, k, b, stride, same), 1e-12);
    }
  }
  const auto x = random_tensor({2, 4, 8, 8}, rng);
  const auto k5 = random_tensor({2, 4, 5, 5}, rng);
  require_close(conv2d(x, k5, Tensor<double>{}, {1, Padding::same}), naive_conv(x, k5, Tensor<double>{}, 1, true), 1e-12);
}

TEST_CASE("conv2d gradients") {
  for (int s = 0; s < kGradInstances; ++s) {
    Rng rng(100 + s);
    const std::size_t stride = 1 + s % 2;
    auto x = random_tensor({2, 2, 5, 4}, rng);
    auto k = random_tensor({2, 2, 3, 3}, rng);
    auto b = random_tensor({2}, rng);
    const Padding pad = s % 3 == 0 ? Padding::valid : Padding::same;
    const auto w = random_tensor(conv2d(x, k, b, {stride, pad}).shape(), rng);
    const auto res = grad_check([&] { return probe(conv2d(x, k, b, {stride, pad}), w); },
                                {{"x", x}, {"k", k}, {"b", b}});
    INFO("worst " << res.worst);
    REQUIRE(res.max_rel_error < kGradTol);
  }
}

TEST_CASE("conv2d_transpose fixed cases") {
  Tensor<double> x(Shape{1, 1, 2, 2}, 1.0), k(Shape{1, 1, 2, 2}, 1.0);
  const auto y = conv2d_transpose(x, k, Tensor<double>{}, 2);
  CHECK(y.shape() == Shape{1, 1, 4, 4});
  for (double v : y.data()) CHECK(v == 1.0);

  // Overlapping scatter: 3x3 kernel of ones at stride 2 sums where windows meet.
  Tensor<double> k3(Shape{1, 1, 3, 3}, 1.0);
  const auto z = conv2d_transpose(x, k3, Tensor<double>{}, 2);
  CHECK(z.shape() == Shape{1, 1, 5, 5});
  const double expect[25] = {1, 1, 2, 1, 1, 1, 1, 2, 1, 1, 2, 2, 4, 2, 2, 1, 1, 2, 1, 1, 1, 1, 2, 1, 1};
  for (std::size_t i = 0; i < 25; ++i) CHECK(z[i] == expect[i]);

  Rng rng(3);
  const auto r = random_tensor({1, 2, 3, 3}, rng);
  Tensor<double> eye(Shape{2, 2, 1, 1}, 0.0);
  eye[0] = 1;
  eye[3] = 1;
  const auto same = conv2d_transpose(r, eye, Tensor<double>{}, 1);
  for (std::size_t i = 0; i < r.numel(); ++i) CHECK(same[i] == r[i]);
}

TEST_CASE("conv2d_transpose matches the scatter oracle and its gradient") {
  Rng rng(4);
  const auto x = random_tensor({2, 3, 4, 4}, rng);
  const auto k = random_tensor({3, 2, 2, 2}, rng);
  const auto b = random_tensor({2}, rng);
  require_close(conv2d_transpose(x, k, b, 2), naive_conv_transpose(x, k, b, 2), 1e-12);
  const auto k3 = random_tensor({3, 2, 3, 3}, rng);
  require_close(conv2d_transpose(x, k3, b, 2), naive_conv_transpose(x, k3, b, 2), 1e-12);

  for (int s = 0; s < kGradInstances; ++s) {
    Rng r(200 + s);
    auto xi = random_tensor({1, 2, 3, 3}, r);
    auto ki = random_tensor({2, 2, 2, 2}, r);
    auto bi = random_tensor({2}, r);
    const std::size_t stride = 1 + s % 2;
    const auto w = random_tensor(conv2d_transpose(xi, ki, bi, stride).shape(), r);
    const auto res = grad_check([&] { return probe(conv2d_transpose(xi, ki, bi, stride), w); },
                                {{"x", xi}, {"k", ki}, {"b", bi}});
    INFO("worst " << res.worst);
    REQUIRE(res.max_rel_error < 1e-6);
  }
}

TEST_CASE("maxpool2d") {
  Tensor<double> x(Shape{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  CHECK(maxpool2d(x)[0] == 4.0);

  Tensor<double> c(Shape{1, 1, 4, 4}, 2.0);
  c.set_requires_grad(true);
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    const auto y = maxpool2d(c);
    for (double v : y.data()) CHECK(v == 2.0);
    tape.backward(sum(y));
  }
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK(c.grad()[i * 4 + j] == ((i % 2 == 0 && j % 2 == 0) ? 1.0 : 0.0));

  Rng rng(5);
  const auto r = random_tensor({1, 1, 6, 6}, rng);
  const auto y = maxpool2d(r);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double m = -1e300;
      for (std::size_t u = 0; u < 2; ++u)
        for (std::size_t v = 0; v < 2; ++v) m = std::max(m, r[(2 * i + u) * 6 + 2 * j + v]);
      CHECK(y[i * 3 + j] == m);
    }

  CHECK_THROWS_AS(maxpool2d(Tensor<double>(Shape{1, 1, 5, 4})), Error);
  CHECK(maxpool2d(Tensor<double>(Shape{1, 1, 5, 4}), 2, 2, true).shape() == Shape{1, 1, 3, 2});

  for (int s = 0; s < kGradInstances; ++s) {
    Rng g(300 + s);
    auto xi = random_tensor({2, 2, 4, 4}, g);
    const auto w = random_tensor({2, 2, 2, 2}, g);
    const auto res = grad_check([&] { return probe(maxpool2d(xi), w); }, {{"x", xi}});
    REQUIRE(res.max_rel_error < kGradTol);
  }
}

TEST_CASE("global_avg_pool") {
  Tensor<double> x(Shape{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  CHECK(global_avg_pool(x)[0] == doctest::Approx(2.5));
  Tensor<double> c(Shape{2, 3, 3, 3}, -1.25);
  const auto zc = global_avg_pool(c);
  for (double v : zc.data()) CHECK(v == -1.25);

  Rng rng(6);
  const auto r = random_tensor({2, 4, 8, 8}, rng);
  const auto z = global_avg_pool(r);
  for (std::size_t nc = 0; nc < 8; ++nc) {
    double acc = 0;
    for (std::size_t i = 0; i < 64; ++i) acc += r[nc * 64 + i];
    CHECK(std::abs(z[nc] - acc / 64) < 1e-12);
  }
  for (int s = 0; s < kGradInstances; ++s) {
    Rng g(400 + s);
    auto xi = random_tensor({2, 3, 3, 2}, g);
    const auto w = random_tensor({2, 3}, g);
    REQUIRE(grad_check([&] { return probe(global_avg_pool(xi), w); }, {{"x", xi}}).max_rel_error < kGradTol);
  }
}

TEST_CASE("dense") {
  Rng rng(7);
  const auto x = random_tensor({2, 3}, rng);
  Tensor<double> eye(Shape{3, 3}, 0.0);
  for (std::size_t i = 0; i < 3; ++i) eye[i * 4] = 1;
  const auto same = dense(x, eye, Tensor<double>(Shape{3}, 0.0));
  for (std::size_t i = 0; i < 6; ++i) CHECK(same[i] == x[i]);
  const auto b = random_tensor({2}, rng);
  const auto zb = dense(x, Tensor<double>(Shape{2, 3}, 0.0), b);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t g = 0; g < 2; ++g) CHECK(zb[n * 2 + g] == b[g]);

  const auto w = random_tensor({4, 3}, rng);
  const auto wb = random_tensor({4}, rng);
  const auto y2 = dense(x, w, wb);
  CHECK(y2.shape() == Shape{2, 4});
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t g = 0; g < 4; ++g) {
      double acc = wb[g];
      for (std::size_t f = 0; f < 3; ++f) acc += w[g * 3 + f] * x[n * 3 + f];
      CHECK(std::abs(y2[n * 4 + g] - acc) < 1e-12);
    }
  CHECK_THROWS_AS(dense(x, Tensor<double>(Shape{2, 4}), Tensor<double>{}), Error);

  for (int s = 0; s < kGradInstances; ++s) {
    Rng g(500 + s);
    auto xi = random_tensor({3, 4}, g);
    auto wi = random_tensor({2, 4}, g);
    auto bi = random_tensor({2}, g);
    const auto p = random_tensor({3, 2}, g);
    REQUIRE(grad_check([&] { return probe(dense(xi, wi, bi), p); }, {{"x", xi}, {"w", wi}, {"b", bi}}).max_rel_error <
            kGradTol);
  }
}

TEST_CASE("batchnorm2d") {
  // Channel already standardized: mean 0, biased variance 1.
  Tensor<double> x(Shape{2, 1, 1, 2}, std::vector<double>{1, -1, 1, -1});
  Tensor<double> gamma(Shape{1}, 1.0), beta(Shape{1}, 0.0);
  BatchNormState<double> st(1);
  const auto y = batchnorm2d(x, gamma, beta, st, Mode::train);
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(y[i] - x[i]) < 1e-5);
  CHECK(st.updates == 1);
  CHECK(st.running_mean[0] == doctest::Approx(0.0));
  CHECK(st.running_var[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 1.0));

  Rng rng(8);
  const auto r = random_tensor({3, 2, 4, 4}, rng, -3, 5);
  Tensor<double> g0(Shape{2}, 0.0), b5(Shape{2}, 5.0);
  BatchNormState<double> st2(2);
  const auto shifted = batchnorm2d(r, g0, b5, st2, Mode::train);
  for (double v : shifted.data()) CHECK(v == 5.0);

  Tensor<double> g1(Shape{2}, 1.0), b0(Shape{2}, 0.0);
  BatchNormState<double> st3(2);
  const auto n = batchnorm2d(r, g1, b0, st3, Mode::train);
  for (std::size_t c = 0; c < 2; ++c) {
    double m = 0, v = 0;
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t i = 0; i < 16; ++i) m += n[(b * 2 + c) * 16 + i];
    m /= 48;
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t i = 0; i < 16; ++i) v += std::pow(n[(b * 2 + c) * 16 + i] - m, 2);
    v /= 48;
    CHECK(std::abs(m) < 1e-9);
    CHECK(v == doctest::Approx(1.0).epsilon(1e-4));
  }

  BatchNormState<double> fresh(2);
  CHECK_THROWS_AS(batchnorm2d(r, g1, b0, fresh, Mode::eval), Error);
  fresh.identity_fallback = true;
  const auto id = batchnorm2d(r, g1, b0, fresh, Mode::eval);
  for (std::size_t i = 0; i < r.numel(); ++i) CHECK(std::abs(id[i] - r[i] / std::sqrt(1 + 1e-5)) < 1e-12);

  for (int s = 0; s < kGradInstances; ++s) {
    Rng g(600 + s);
    auto xi = random_tensor({3, 2, 2, 2}, g);
    auto ga = random_tensor({2}, g, 0.5, 1.5);
    auto be = random_tensor({2}, g);
    const auto p = random_tensor({3, 2, 2, 2}, g);
    BatchNormState<double> state(2);
    const auto res = grad_check([&] { return probe(batchnorm2d(xi, ga, be, state, Mode::train), p); },
                                {{"x", xi}, {"gamma", ga}, {"beta", be}});
    INFO("worst " << res.worst);
    REQUIRE(res.max_rel_error < 1e-5);
    BatchNormState<double> trained(2);
    batchnorm2d(xi, ga, be, trained, Mode::train);
    REQUIRE(grad_check([&] { return probe(batchnorm2d(xi, ga, be, trained, Mode::eval), p); },
                       {{"x", xi}, {"gamma", ga}, {"beta", be}})
                .max_rel_error < 1e-5);
  }
}

TEST_CASE("activations") {
  Tensor<double> z(Shape{1}, 0.0);
  CHECK(sigmoid(z)[0] == 0.5);
  Tensor<double> v(Shape{2}, std::vector<double>{-3, 3});
  const auto r = relu(v);
  CHECK(r[0] == 0.0);
  CHECK(r[1] == 3.0);
  Rng rng(9);
  const auto x = random_tensor({50}, rng, -40, 40);
  const auto sx = sigmoid(x);
  for (double s : sx.data()) {
    CHECK(s > 0.0);
    CHECK(s < 1.0);
  }
  const auto tx = tanh(random_tensor({50}, rng, -5, 5));
  for (double t : tx.data()) {
    CHECK(t > -1.0);
    CHECK(t < 1.0);
  }
  for (auto kind : {ActivationKind::relu, ActivationKind::sigmoid, ActivationKind::tanh}) {
    for (int s = 0; s < kGradInstances; ++s) {
      Rng g(700 + s);
      auto xi = random_tensor({2, 5}, g, -2, 2);
      const auto p = random_tensor({2, 5}, g);
      REQUIRE(grad_check([&] { return probe(activation(xi, kind), p); }, {{"x", xi}}).max_rel_error < kGradTol);
    }
  }
}

TEST_CASE("softmax") {
  Tensor<double> u(Shape{2, 4}, 0.3);
  const auto su = softmax(u);
  for (double p : su.data()) CHECK(p == doctest::Approx(0.25));
  Tensor<double> big(Shape{1, 2}, std::vector<double>{1000, 0});
  const auto s = softmax(big);
  CHECK(s[0] == doctest::Approx(1.0));
  CHECK(s[1] < 1e-300);

  Rng rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    const double scale = trial % 2 ? 1000.0 : 3.0;
    const auto x = random_tensor({3, 5}, rng, -scale, scale);
    const auto p = softmax(x);
    for (std::size_t n = 0; n < 3; ++n) {
      double total = 0, mx = -1e300, denom = 0;
      for (std::size_t k = 0; k < 5; ++k) mx = std::max(mx, x[n * 5 + k]);
      for (std::size_t k = 0; k < 5; ++k) denom += std::exp(x[n * 5 + k] - mx);
      for (std::size_t k = 0; k < 5; ++k) {
        total += p[n * 5 + k];
        CHECK(std::abs(p[n * 5 + k] - std::exp(x[n * 5 + k] - mx) / denom) < 1e-15);
      }
      CHECK(std::abs(total - 1.0) < 1e-6);
    }
  }
  for (int s = 0; s < kGradInstances; ++s) {
    Rng g(800 + s);
    auto xi = random_tensor({2, 4}, g, -2, 2);
    const auto p = random_tensor({2, 4}, g);
    REQUIRE(grad_check([&] { return probe(softmax(xi), p); }, {{"x", xi}}).max_rel_error < kGradTol);
  }
}

TEST_CASE("dropout") {
  Rng rng(11);
  const auto x = random_tensor({4, 8}, rng);
  Rng d(1);
  for (auto mode : {Mode::train, Mode::eval}) {
    const auto y = dropout(x, 0.0, mode, d);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
  }
  const auto e = dropout(x, 0.7, Mode::eval, d);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(e[i] == x[i]);
  CHECK_THROWS_AS(dropout(x, 1.0, Mode::train, d), Error);

  Tensor<double> ones(Shape{1000000}, 1.0);
  const auto y = dropout(ones, 0.5, Mode::train, d);
  std::size_t survivors = 0;
  double total = 0;
  for (double v : y.data()) {
    if (v != 0.0) {
      ++survivors;
      CHECK(v == 2.0);
    }
    total += v;
  }
  CHECK(std::abs(static_cast<double>(survivors) / 1e6 - 0.5) < 0.01);
  CHECK(std::abs(total / 1e6 - 1.0) < 0.01);

  for (int s = 0; s < kGradInstances; ++s) {
    Rng g(900 + s);
    auto xi = random_tensor({3, 6}, g);
    const auto p = random_tensor({3, 6}, g);
    const auto res = grad_check([&] {
      Rng mask(static_cast<std::uint64_t>(s));
      return probe(dropout(xi, 0.4, Mode::train, mask), p);
    }, {{"x", xi}});
    REQUIRE(res.max_rel_error < kGradTol);
  }
}

TEST_CASE("shape and elementwise helpers have exact gradients") {
  for (int s = 0; s < kGradInstances; ++s) {
    Rng g(1000 + s);
    auto a = random_tensor({2, 2, 2, 3}, g);
    auto b = random_tensor({2, 2, 2, 3}, g);
    auto c = random_tensor({2, 1, 2, 3}, g);
    auto sc = random_tensor({2, 2}, g);
    const auto p4 = random_tensor({2, 3, 2, 3}, g);
    const auto p2 = random_tensor({2, 12}, g);
    const std::vector<std::size_t> idx{static_cast<std::size_t>(s % 3), 1};
    REQUIRE(grad_check([&] { return probe(concat_channels(a, c), p4); }, {{"a", a}, {"c", c}}).max_rel_error < kGradTol);
    REQUIRE(grad_check([&] { return probe(flatten(scale_channels(a, sc)), p2); }, {{"a", a}, {"s", sc}}).max_rel_error <
            kGradTol);
    REQUIRE(grad_check([&] { return sum(add_scalar(scale(add(mul(a, b), a), 0.5), 2.0)); }, {{"a", a}, {"b", b}})
                .max_rel_error < kGradTol);
    REQUIRE(grad_check([&] { return add(mean(a), sum_squares(b)); }, {{"a", a}, {"b", b}}).max_rel_error < kGradTol);
    auto m = random_tensor({2, 3}, g);
    REQUIRE(grad_check([&] { return sum(pick(m, std::span<const std::size_t>(idx))); }, {{"m", m}}).max_rel_error <
            kGradTol);
    REQUIRE(grad_check([&] { return sum_squares(reshape(a, Shape{4, 6})); }, {{"a", a}}).max_rel_error < kGradTol);
  }
}

TEST_CASE("backward semantics") {
  Rng rng(12);
  auto x = random_tensor({3, 2}, rng);
  auto y = random_tensor({3, 2}, rng);
  x.set_requires_grad(true);
  y.set_requires_grad(true);
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    tape.backward(sum(x));
  }
  for (double g : x.grad()) CHECK(g == 1.0);
  x.zero_grad();
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    const auto loss = sum(mul(x, y));
    tape.backward(loss);
    for (std::size_t i = 0; i < 6; ++i) {
      CHECK(x.grad()[i] == y[i]);
      CHECK(y.grad()[i] == x[i]);
    }
    // A second call without zeroing accumulates into the leaves.
    tape.backward(loss);
    for (std::size_t i = 0; i < 6; ++i) CHECK(x.grad()[i] == 2 * y[i]);
    CHECK_THROWS_AS(tape.backward(mul(x, y)), Error);
    // Nodes are appended after their inputs.
    for (std::size_t n = 0; n < tape.size(); ++n)
      for (std::size_t in : tape.node(n).inputs)
        if (in != Tape<double>::leaf) CHECK(in < n);
  }
  CHECK_FALSE(x.on_tape());

  // Without an active tape nothing is recorded.
  const auto z = mul(x, y);
  CHECK_FALSE(z.on_tape());
}

TEST_CASE("ops are deterministic") {
  Rng a(77), b(77);
  const auto x1 = random_tensor({2, 3, 4, 4}, a);
  const auto x2 = random_tensor({2, 3, 4, 4}, b);
  const auto k1 = random_tensor({2, 3, 3, 3}, a);
  const auto k2 = random_tensor({2, 3, 3, 3}, b);
  Rng d1(5), d2(5);
  const auto y1 = dropout(maxpool2d(relu(conv2d(x1, k1, Tensor<double>{}))), 0.3, Mode::train, d1);
  const auto y2 = dropout(maxpool2d(relu(conv2d(x2, k2, Tensor<double>{}))), 0.3, Mode::train, d2);
  for (std::size_t i = 0; i < y1.numel(); ++i) REQUIRE(y1[i] == y2[i]);
}

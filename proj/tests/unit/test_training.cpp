#include <algorithm>
#include <cmath>
#include <sstream>

#include "doctest.h"
#include "leafgrad/augment.hpp"
#include "leafgrad/losses.hpp"
#include "leafgrad/optim.hpp"
#include "leafgrad/synthetic.hpp"
#include "leafgrad/trainer.hpp"
#include "test_support.hpp"

using namespace leafgrad;
using leafgrad::testing::grad_check;
using leafgrad::testing::random_tensor;

namespace {

SEConvNetConfig small_convnet() {
  SEConvNetConfig c;
  c.height = c.width = 16;
  c.stages = {4};
  c.dense_width = 8;
  c.classes = 4;
  c.se_ratio = 2;
  return c;
}

UNetConfig small_unet() {
  UNetConfig c;
  c.height = c.width = 16;
  c.depth = 1;
  c.base_filters = 4;
  c.se_ratio = 2;
  return c;
}

TrainData<float> toy_classification() {
  TrainData<float> d;
  d.train = synthetic_classification<float>(4, 4, 16, 1);
  d.val = synthetic_classification<float>(2, 4, 16, 2);
  d.test = synthetic_classification<float>(2, 4, 16, 3);
  return d;
}

TrainData<float> toy_segmentation() {
  TrainData<float> d;
  d.train = synthetic_segmentation<float>(8, 16, 1);
  d.val = synthetic_segmentation<float>(4, 16, 2);
  d.test = synthetic_segmentation<float>(4, 16, 3);
  return d;
}

// Reference counter: strict improvement, trigger when the wait reaches the
// patience, then start a new window.
struct RefPlateau {
  double best;
  bool maximize;
  std::size_t wait = 0, patience, reductions = 0;
  double lr;
  RefPlateau(bool max, std::size_t p, double lr0)
      : best(max ? -INFINITY : INFINITY), maximize(max), patience(p), lr(lr0) {}
  void feed(double v) {
    if (maximize ? v > best : v < best) {
      best = v;
      wait = 0;
    } else if (++wait >= patience) {
      lr *= 0.5;
      ++reductions;
      wait = 0;
    }
  }
};

std::vector<NamedTensor<double>> scalar_param(double value) {
  Tensor<double> t(Shape{1}, value);
  t.set_requires_grad(true);
  return {{"theta", t, false}};
}

}  // namespace

TEST_CASE("cross entropy") {
  Tensor<double> onehot(Shape{2, 3}, std::vector<double>{1, 0, 0, 0, 0, 1});
  const std::vector<std::size_t> labels{0, 2};
  const double floor = -std::log(1 - kProbClamp);
  CHECK(std::abs(cross_entropy(onehot, labels).item() - floor) < 1e-12);

  Tensor<double> uniform(Shape{3, 4}, 0.25);
  const std::vector<std::size_t> l3{0, 1, 3};
  CHECK(std::abs(cross_entropy(uniform, l3).item() - std::log(4.0)) < 1e-12);
  CHECK(cross_entropy(uniform, l3).item() == doctest::Approx(1.386294).epsilon(1e-6));

  Rng rng(1);
  SEConvNetConfig cfg = small_convnet();
  cfg.height = cfg.width = 8;
  auto model = build_se_convnet<double>(cfg, rng);
  const auto probs = softmax(random_tensor({5, 4}, rng, -2, 2));
  const std::vector<std::size_t> y{0, 3, 2, 1, 3};
  double expect = 0;
  for (std::size_t n = 0; n < 5; ++n) expect -= std::log(probs[n * 4 + y[n]]);
  expect /= 5;
  double squares = 0;
  for (const auto& p : model->parameters())
    if (p.decay)
      for (double v : p.tensor.data()) squares += v * v;
  expect += 1e-3 * squares;
  CHECK(std::abs(cross_entropy_loss(probs, y, *model, 1e-3).item() - expect) < 1e-10);
  CHECK(cross_entropy_loss(probs, y, *model, 1e-3).item() >= 0);

  const std::vector<std::size_t> bad{0, 4, 0, 0, 0};
  CHECK_THROWS_AS(cross_entropy(probs, bad), Error);
}

TEST_CASE("dice and iou") {
  Tensor<double> t(Shape{1, 1, 2, 2}, std::vector<double>{1, 1, 0, 0});
  CHECK(std::abs(dice_coeff(t, t).item() - 1.0) < 1e-5);
  CHECK(std::abs(iou_coeff(t, t).item() - 1.0) < 1e-5);
  Tensor<double> other(Shape{1, 1, 2, 2}, std::vector<double>{0, 0, 1, 1});
  CHECK(dice_coeff(t, other).item() < 1e-5);
  CHECK(iou_coeff(t, other).item() < 1e-5);

  // Two predicted pixels, two target pixels, one shared.
  Tensor<double> p(Shape{1, 1, 2, 2}, std::vector<double>{1, 1, 0, 0});
  Tensor<double> g(Shape{1, 1, 2, 2}, std::vector<double>{0, 1, 1, 0});
  CHECK(std::abs(dice_coeff(p, g).item() - 0.5) < 1e-6);
  CHECK(std::abs(iou_coeff(p, g).item() - 1.0 / 3.0) < 1e-6);

  Rng rng(2);
  SEConvNetConfig cfg = small_convnet();
  cfg.height = cfg.width = 8;
  auto model = build_se_convnet<double>(cfg, rng);
  Tensor<double> logits(Shape{1, 1, 2, 2}, std::vector<double>{60, 60, -60, -60});
  CHECK(std::abs(combined_seg_loss(logits, g, *model, 0.0).item() - (0.5 * 0.5 + 0.5 * (2.0 / 3.0))) < 1e-6);
  Tensor<double> perfect(Shape{1, 1, 2, 2}, std::vector<double>{-60, 60, 60, -60});
  CHECK(combined_seg_loss(perfect, g, *model, 0.0).item() < 1e-6);
  CHECK_THROWS_AS(dice_coeff(p, Tensor<double>(Shape{1, 1, 4, 1})), Error);

  const std::vector<double> pv{1, 1, 0, 0}, gv{0, 1, 1, 0};
  CHECK(std::abs(dice_value(pv, gv) - 0.5) < 1e-6);
  CHECK(std::abs(iou_value(pv, gv) - 1.0 / 3.0) < 1e-6);

  for (int s = 0; s < 20; ++s) {
    Rng r(300 + s);
    auto lg = random_tensor({2, 1, 3, 3}, r, -2, 2);
    Tensor<double> mask(Shape{2, 1, 3, 3});
    for (auto& v : mask.data()) v = r.bernoulli(0.5) ? 1.0 : 0.0;
    const auto res = grad_check([&] { return combined_seg_loss(lg, mask, *model, 0.0); }, {{"logits", lg}});
    REQUIRE(res.max_rel_error < 1e-4);
    auto pr = random_tensor({2, 1, 3, 3}, r, 0.05, 0.95);
    REQUIRE(grad_check([&] { return add(dice_coeff(pr, mask), scale(iou_coeff(pr, mask), 2.0)); }, {{"p", pr}})
                .max_rel_error < 1e-4);
  }
}

TEST_CASE("adam") {
  auto params = scalar_param(1.0);
  auto state = AdamState<double>::for_params(params, 1e-3);
  params[0].tensor.grad_mut()[0] = 0.5;
  adam_step(params, state);
  const double delta = params[0].tensor[0] - 1.0;
  CHECK(std::abs(delta - (-1e-3 * 0.5 / (0.5 + 1e-8))) < 1e-15);
  CHECK(std::abs(delta - (-9.99998e-4)) < 1e-8);
  CHECK(state.step == 1);

  auto still = scalar_param(2.0);
  auto s2 = AdamState<double>::for_params(still, 1e-3);
  still[0].tensor.grad_mut()[0] = 0.0;
  for (int i = 0; i < 5; ++i) adam_step(still, s2);
  CHECK(still[0].tensor[0] == 2.0);

  auto quad = scalar_param(1.0);
  auto s3 = AdamState<double>::for_params(quad, 0.1);
  for (int i = 0; i < 100; ++i) {
    quad[0].tensor.grad_mut()[0] = 2 * quad[0].tensor[0];
    adam_step(quad, s3);
  }
  CHECK(std::abs(quad[0].tensor[0]) < 0.1);

  auto missing = scalar_param(1.0);
  auto s4 = AdamState<double>::for_params(missing, 1e-3);
  CHECK_THROWS_AS(adam_step(missing, s4), Error);
}

TEST_CASE("plateau schedule") {
  PlateauSchedule rising(1e-3, MonitorMode::max);
  for (int e = 0; e < 100; ++e) CHECK(rising.step(e) == 1e-3);

  PlateauSchedule flat(1e-3, MonitorMode::max);
  flat.step(0.5);
  for (int e = 1; e <= 15; ++e) {
    const double lr = flat.step(0.5);
    CHECK(lr == (e < 15 ? 1e-3 : 5e-4));
  }
  CHECK(flat.reductions() == 1);

  PlateauSchedule thirty_one(1e-3, MonitorMode::min);
  for (int e = 0; e < 31; ++e) thirty_one.step(1.0);
  CHECK(thirty_one.reductions() == 2);
  CHECK(thirty_one.lr() == 2.5e-4);

  PlateauSchedule floor(1e-3, MonitorMode::min, 0.5, 1, 6e-4);
  floor.step(1);
  floor.step(1);
  floor.step(1);
  CHECK(floor.lr() == 6e-4);

  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const bool maximize = rng.bernoulli(0.5);
    const std::size_t patience = 1 + rng.below(6);
    PlateauSchedule s(1.0, maximize ? MonitorMode::max : MonitorMode::min, 0.5, patience);
    RefPlateau ref(maximize, patience, 1.0);
    double prev = 1.0;
    for (int e = 0; e < 60; ++e) {
      const double v = static_cast<double>(rng.below(5));
      ref.feed(v);
      const double lr = s.step(v);
      REQUIRE(lr == ref.lr);
      REQUIRE(lr <= prev);
      prev = lr;
    }
  }
}

TEST_CASE("early stopping") {
  Rng rng(5);
  SEConvNetConfig cfg = small_convnet();
  cfg.height = cfg.width = 8;
  auto model = build_se_convnet<double>(cfg, rng);

  EarlyStop<double> always(15);
  for (std::size_t e = 1; e <= 50; ++e) CHECK_FALSE(always.step(100.0 - static_cast<double>(e), *model, e));

  // Improvement up to epoch 3, flat afterwards.
  EarlyStop<double> es(15);
  std::vector<double> at_best;
  std::size_t stopped_at = 0;
  for (std::size_t e = 1; e <= 40; ++e) {
    for (auto& p : model->parameters())
      for (auto& v : p.tensor.data()) v = rng.uniform(-1, 1);
    if (e == 3) at_best.assign(model->parameters()[0].tensor.data().begin(), model->parameters()[0].tensor.data().end());
    const double metric = e <= 3 ? 10.0 - static_cast<double>(e) : 7.0;
    if (es.step(metric, *model, e)) {
      stopped_at = e;
      break;
    }
  }
  CHECK(stopped_at == 18);
  CHECK(es.best_epoch() == 3);
  CHECK(es.stopped());
  const auto now = model->parameters()[0].tensor.data();
  CHECK(std::equal(now.begin(), now.end(), at_best.begin()));
}

TEST_CASE("restored weights reproduce the best validation loss") {
  auto data = toy_classification();
  Rng rng(6);
  auto model = build_se_convnet<float>(small_convnet(), rng);
  TrainConfig<float> cfg;
  cfg.epochs = 60;
  cfg.lr = 3e-2;  // aggressive so validation loss stops improving quickly
  cfg.batch_size = 4;
  cfg.early_stop_patience = 5;
  cfg.plateau = false;
  const auto report = train_classifier(*model, data, cfg);
  REQUIRE(report.stop_reason == "early_stop");
  CHECK(report.restored_best);
  const auto val = evaluate_split(*model, data.val, cfg.batch_size);
  CHECK(val.loss == report.best_val_loss);
  CHECK(report.epochs.size() == report.best_epoch + 5);
}

TEST_CASE("augmentation") {
  AugmentConfig off;
  off.enabled = true;
  off.hflip_prob = off.vflip_prob = 0.0;
  off.rotate = false;
  Rng rng(7);
  Tensor<float> imgs(Shape{3, 2, 4, 4});
  for (auto& v : imgs.data()) v = static_cast<float>(rng.uniform());
  const auto before = imgs.clone();
  augment_batch<float>(imgs, nullptr, off, rng);
  for (std::size_t i = 0; i < imgs.numel(); ++i) CHECK(imgs[i] == before[i]);

  AugmentConfig disabled;
  augment_batch<float>(imgs, nullptr, disabled, rng);
  for (std::size_t i = 0; i < imgs.numel(); ++i) CHECK(imgs[i] == before[i]);

  std::vector<double> plane(2 * 3 * 5);
  for (auto& v : plane) v = rng.uniform();
  const Transform h{true, false, 0};
  const auto twice = apply_transform<double>(apply_transform<double>(plane, 2, 3, 5, h), 2, 3, 5, h);
  CHECK(twice == plane);
  const Transform v{false, true, 0};
  CHECK(apply_transform<double>(apply_transform<double>(plane, 2, 3, 5, v), 2, 3, 5, v) == plane);

  // Quarter turn on a square mask: out(i, j) = in(j, W - 1 - i).
  const std::size_t n = 6;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> mask(n * n);
    for (auto& m : mask) m = rng.bernoulli(0.5);
    const auto rot = apply_transform<double>(mask, 1, n, n, Transform{false, false, 1});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) REQUIRE(rot[i * n + j] == mask[j * n + (n - 1 - i)]);
    auto a = rot, b = mask;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    REQUIRE(a == b);
    const auto full = apply_transform<double>(
        apply_transform<double>(apply_transform<double>(apply_transform<double>(mask, 1, n, n, {false, false, 1}), 1, n,
                                                        n, {false, false, 1}),
                                1, n, n, {false, false, 1}),
        1, n, n, {false, false, 1});
    REQUIRE(full == mask);
  }

  // Paired mode: the mask is derived from the image, so it must still match
  // after both receive the same transform.
  AugmentConfig on;
  on.enabled = true;
  Tensor<float> x(Shape{8, 1, 6, 6}), m(Shape{8, 1, 6, 6});
  for (std::size_t i = 0; i < x.numel(); ++i) {
    x[i] = static_cast<float>(rng.uniform());
    m[i] = x[i] > 0.5f ? 1.0f : 0.0f;
  }
  const auto x0 = x.clone();
  augment_batch(x, &m, on, rng);
  bool changed = false;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    REQUIRE(m[i] == (x[i] > 0.5f ? 1.0f : 0.0f));
    changed = changed || x[i] != x0[i];
  }
  CHECK(changed);

  // Sampling draws do not depend on the configuration.
  Rng r1(9), r2(9);
  sample_transform(off, r1);
  sample_transform(on, r2);
  CHECK(r1.next_u64() == r2.next_u64());
}

TEST_CASE("zero learning rate leaves parameters untouched") {
  auto data = toy_classification();
  Rng rng(10);
  auto model = build_se_convnet<float>(small_convnet(), rng);
  const auto snap = model->snapshot();
  TrainConfig<float> cfg;
  cfg.epochs = 3;
  cfg.lr = 0.0;
  cfg.batch_size = 4;
  train_classifier(*model, data, cfg);
  for (std::size_t k = 0; k < model->parameters().size(); ++k) {
    const auto now = model->parameters()[k].tensor.data();
    CHECK(std::equal(now.begin(), now.end(), snap.values[k].begin()));
  }

  auto seg = toy_segmentation();
  Rng r2(11);
  auto unet = build_unet<float>(small_unet(), r2);
  const auto usnap = unet->snapshot();
  cfg.lr = 0.0;
  train_segmenter(*unet, seg, cfg);
  for (std::size_t k = 0; k < unet->parameters().size(); ++k) {
    const auto now = unet->parameters()[k].tensor.data();
    CHECK(std::equal(now.begin(), now.end(), usnap.values[k].begin()));
  }
}

TEST_CASE("training is deterministic for a fixed seed") {
  auto data = toy_classification();
  TrainConfig<float> cfg;
  cfg.epochs = 4;
  cfg.batch_size = 4;
  cfg.augment.enabled = true;
  std::string csv[2];
  for (int run = 0; run < 2; ++run) {
    Rng rng(12);
    auto model = build_se_convnet<float>(small_convnet(), rng);
    csv[run] = train_classifier(*model, data, cfg).to_csv({"run"});
  }
  CHECK(csv[0] == csv[1]);
  CHECK(csv[0].rfind("# run\nepoch,lr,train_loss,val_loss,train_accuracy,val_accuracy\n", 0) == 0);

  auto seg = toy_segmentation();
  std::vector<double> dice[2];
  for (int run = 0; run < 2; ++run) {
    Rng rng(13);
    auto unet = build_unet<float>(small_unet(), rng);
    const auto rep = train_segmenter(*unet, seg, cfg);
    for (const auto& e : rep.epochs) dice[run].push_back(e.val_metric);
    CHECK(rep.metric_name == "dice");
    CHECK(rep.to_csv().find("val_iou") != std::string::npos);
  }
  CHECK(dice[0] == dice[1]);
}

TEST_CASE("training loop bookkeeping and errors") {
  auto data = toy_classification();
  Rng rng(14);
  auto model = build_se_convnet<float>(small_convnet(), rng);
  TrainConfig<float> cfg;
  cfg.epochs = 3;
  cfg.batch_size = 5;
  cfg.eval_train_metric = true;
  std::size_t epochs_seen = 0, bests = 0;
  cfg.on_epoch = [&](const EpochRecord& r) { CHECK(r.epoch == ++epochs_seen); };
  cfg.on_best = [&](const ModelGraph<float>&, const EpochRecord&) { ++bests; };
  const auto rep = train_classifier(*model, data, cfg);
  CHECK(epochs_seen == 3);
  CHECK(bests >= 1);
  CHECK(rep.test_predictions.size() == data.test.size());
  CHECK(rep.to_csv().find("train_eval_accuracy") != std::string::npos);
  for (const auto& e : rep.epochs) {
    CHECK(e.train_metric >= 0);
    CHECK(e.train_metric <= 1);
    CHECK_FALSE(std::isnan(e.train_eval_metric));
  }

  auto bad = data;
  bad.train.labels[0] = 9;
  CHECK_THROWS_AS(train_classifier(*model, bad, cfg), Error);
  auto empty = data;
  empty.train = DataSplit<float>{};
  CHECK_THROWS_AS(train_classifier(*model, empty, cfg), Error);

  auto seg = toy_segmentation();
  seg.train.masks = Tensor<float>(Shape{8, 1, 8, 8});
  Rng r2(15);
  auto unet = build_unet<float>(small_unet(), r2);
  CHECK_THROWS_AS(train_segmenter(*unet, seg, cfg), Error);

  TrainConfig<float> zero_batch;
  zero_batch.batch_size = 0;
  CHECK_THROWS_AS(zero_batch.validate(), Error);
}

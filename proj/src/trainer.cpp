#include "leafgrad/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "leafgrad/io_util.hpp"
#include "leafgrad/losses.hpp"
#include "leafgrad/ops.hpp"
#include "leafgrad/optim.hpp"

namespace leafgrad {

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& src, std::span<const std::size_t> rows) {
  if (!src.defined() || src.rank() < 1) fail(ErrorKind::shape, "gather_rows: undefined source");
  const std::size_t n = src.dim(0), stride = src.numel() / n;
  Shape shape = src.shape();
  shape[0] = rows.size();
  Tensor<T> out(shape);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n) fail(ErrorKind::value, "gather_rows: row " + std::to_string(rows[r]) + " out of range");
    std::copy_n(src.data().begin() + static_cast<std::ptrdiff_t>(rows[r] * stride), stride,
                out.data().begin() + static_cast<std::ptrdiff_t>(r * stride));
  }
  return out;
}

template <typename T>
DataSplit<T> subset(const DataSplit<T>& split, std::span<const std::size_t> rows) {
  DataSplit<T> out;
  if (rows.empty()) return out;
  out.images = gather_rows(split.images, rows);
  if (!split.labels.empty()) {
    for (auto r : rows) out.labels.push_back(split.labels.at(r));
  }
  if (split.masks.defined()) out.masks = gather_rows(split.masks, rows);
  return out;
}

std::string TrainReport::to_csv(const std::vector<std::string>& preamble) const {
  std::ostringstream os;
  for (const auto& line : preamble) os << "# " << line << "\n";
  const bool seg = task == Task::segment;
  bool train_eval = false;
  for (const auto& e : epochs) train_eval = train_eval || !std::isnan(e.train_eval_metric);
  os << "epoch,lr,train_loss,val_loss,train_" << metric_name << ",val_" << metric_name;
  if (seg) os << ",val_iou";
  if (train_eval) os << ",train_eval_" << metric_name;
  os << "\n";
  for (const auto& e : epochs) {
    os << e.epoch << "," << format_double(e.lr) << "," << format_double(e.train_loss) << ","
       << format_double(e.val_loss) << "," << format_double(e.train_metric) << "," << format_double(e.val_metric);
    if (seg) os << "," << format_double(e.val_iou);
    if (train_eval) os << "," << format_double(e.train_eval_metric);
    os << "\n";
  }
  return os.str();
}

void TrainReport::write_csv(const std::filesystem::path& path, const std::vector<std::string>& preamble) const {
  write_file_atomic(path, to_csv(preamble));
}

template <typename T>
void TrainConfig<T>::validate() const {
  if (epochs == 0) fail(ErrorKind::config, "epochs must be >= 1");
  if (batch_size == 0) fail(ErrorKind::config, "batch size must be >= 1");
  if (!(lr >= 0.0)) fail(ErrorKind::config, "learning rate must be >= 0");
  if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) fail(ErrorKind::config, "plateau factor must lie in (0, 1)");
  if (plateau_patience == 0 || early_stop_patience == 0) fail(ErrorKind::config, "patience must be >= 1");
  if (!(min_lr >= 0.0)) fail(ErrorKind::config, "min_lr must be >= 0");
  if (!(threshold > 0.0 && threshold < 1.0)) fail(ErrorKind::config, "threshold must lie in (0, 1)");
  augment.validate();
}

namespace {

double sigmoid_d(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

template <typename T>
std::size_t argmax_row(const Tensor<T>& t, std::size_t row) {
  const std::size_t K = t.dim(1);
  std::size_t best = 0;
  for (std::size_t k = 1; k < K; ++k)
    if (t[row * K + k] > t[row * K + best]) best = k;
  return best;
}

// Hard-threshold Dice and IoU of every sample in a logit batch.
template <typename T>
void hard_overlap(const Tensor<T>& logits, const Tensor<T>& masks, double threshold, std::vector<double>& dice,
                  std::vector<double>& iou) {
  const std::size_t N = logits.dim(0), M = logits.numel() / N;
  std::vector<double> p(M), t(M);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t i = 0; i < M; ++i) {
      p[i] = sigmoid_d(logits[n * M + i]) >= threshold ? 1.0 : 0.0;
      t[i] = masks[n * M + i];
    }
    dice.push_back(dice_value(p, t));
    iou.push_back(iou_value(p, t));
  }
}

template <typename T>
void check_split(const ModelGraph<T>& model, const DataSplit<T>& split, const std::string& name, bool required) {
  if (split.size() == 0) {
    if (required) fail(ErrorKind::value, "the " + name + " split is empty");
    return;
  }
  const Shape& in = split.images.shape();
  if (in.size() != 4 || Shape(in.begin() + 1, in.end()) != model.input_shape()) {
    fail(ErrorKind::shape, "the " + name + " images " + shape_str(in) + " do not match the model input " +
                               shape_str(model.input_shape()));
  }
  if (model.task() == Task::classify) {
    if (split.labels.size() != split.size()) fail(ErrorKind::shape, "the " + name + " split has a label count mismatch");
  } else {
    const Shape expect{split.size(), 1, in[2], in[3]};
    if (!split.masks.defined() || split.masks.shape() != expect) {
      fail(ErrorKind::shape, "the " + name + " masks " +
                                 (split.masks.defined() ? shape_str(split.masks.shape()) : std::string("[]")) +
                                 " do not pair with images " + shape_str(in));
    }
  }
}

template <typename T>
TrainReport train_loop(ModelGraph<T>& model, const TrainData<T>& data, const TrainConfig<T>& cfg, Task task) {
  cfg.validate();
  if (model.task() != task) fail(ErrorKind::state, "model task does not match the training loop");
  check_split(model, data.train, "train", true);
  check_split(model, data.val, "val", true);
  check_split(model, data.test, "test", false);
  const bool classify = task == Task::classify;
  if (classify) {
    const std::size_t K = model.num_outputs();
    for (const DataSplit<T>* s : {&data.train, &data.val, &data.test})
      for (auto l : s->labels)
        if (l >= K) {
          fail(ErrorKind::value, "label " + std::to_string(l) + " exceeds the model's " + std::to_string(K) +
                                     " classes");
        }
  }

  const double l2 = model.l2_coeff();
  Rng master(cfg.seed);
  Rng order_rng = master.fork(1), dropout_rng = master.fork(2), augment_rng = master.fork(3);

  model.set_requires_grad(true);
  model.zero_grad();
  AdamState<T> opt = AdamState<T>::for_params(model.parameters(), cfg.lr);
  PlateauSchedule sched(cfg.lr, classify ? MonitorMode::max : MonitorMode::min, cfg.plateau_factor,
                        cfg.plateau_patience, cfg.min_lr);
  EarlyStop<T> stopper(cfg.early_stop_patience, MonitorMode::min);

  TrainReport report;
  report.task = task;
  report.metric_name = classify ? "accuracy" : "dice";
  double best_val_loss = std::numeric_limits<double>::infinity();

  const std::size_t n_train = data.train.size();
  std::vector<std::size_t> order(n_train);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = opt.lr;
    std::iota(order.begin(), order.end(), std::size_t{0});
    order_rng.shuffle(order.begin(), order.end());

    double loss_sum = 0, metric_sum = 0;
    for (std::size_t start = 0; start < n_train; start += cfg.batch_size) {
      const std::size_t stop = std::min(n_train, start + cfg.batch_size);
      const std::span<const std::size_t> rows(order.data() + start, stop - start);
      Tensor<T> x = gather_rows(data.train.images, rows);
      Tensor<T> masks;
      if (!classify) masks = gather_rows(data.train.masks, rows);
      augment_batch(x, classify ? nullptr : &masks, cfg.augment, augment_rng);

      Tape<T> tape;
      TapeScope<T> scope(tape);
      const Tensor<T> out = model.forward(x, Mode::train, dropout_rng);
      Tensor<T> loss;
      if (classify) {
        std::vector<std::size_t> labels;
        for (auto r : rows) labels.push_back(data.train.labels[r]);
        loss = cross_entropy_loss(softmax(out), labels, model, l2);
        for (std::size_t i = 0; i < rows.size(); ++i) metric_sum += argmax_row(out, i) == labels[i] ? 1.0 : 0.0;
      } else {
        loss = combined_seg_loss(out, masks, model, l2);
        std::vector<double> dice, iou;
        hard_overlap(out, masks, cfg.threshold, dice, iou);
        for (double d : dice) metric_sum += d;
      }
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(rows.size());
      tape.backward(loss);
      adam_step(model.parameters(), opt);
      model.zero_grad();
    }
    rec.train_loss = loss_sum / static_cast<double>(n_train);
    rec.train_metric = metric_sum / static_cast<double>(n_train);

    const EvalResult<T> val = evaluate_split(model, data.val, cfg.batch_size, cfg.threshold);
    rec.val_loss = val.loss;
    rec.val_metric = val.metric;
    rec.val_iou = val.iou;
    if (cfg.eval_train_metric) rec.train_eval_metric = evaluate_split(model, data.train, cfg.batch_size, cfg.threshold).metric;
    report.epochs.push_back(rec);
    if (cfg.on_epoch) cfg.on_epoch(rec);

    if (rec.val_loss < best_val_loss) {
      best_val_loss = rec.val_loss;
      report.best_epoch = epoch;
      report.best_val_loss = rec.val_loss;
      if (cfg.on_best) cfg.on_best(model, rec);
    }
    if (cfg.plateau) {
      const double before = opt.lr;
      opt.lr = sched.step(classify ? rec.val_metric : rec.val_loss);
      if (opt.lr != before) report.lr_events.push_back({epoch, before, opt.lr});
    }
    if (cfg.early_stop && stopper.step(rec.val_loss, model, epoch)) {
      report.stop_reason = "early_stop";
      report.restored_best = true;
      break;
    }
    if (cfg.target_train_metric && rec.train_eval_metric >= *cfg.target_train_metric) {
      report.stop_reason = "target";
      break;
    }
  }

  if (data.test.size() > 0) {
    const EvalResult<T> test = evaluate_split(model, data.test, cfg.batch_size, cfg.threshold);
    report.test_loss = test.loss;
    report.test_metric = test.metric;
    report.test_iou = test.iou;
    report.test_predictions = test.predictions;
  }
  return report;
}

}  // namespace

template <typename T>
EvalResult<T> evaluate_split(ModelGraph<T>& model, const DataSplit<T>& split, std::size_t batch_size,
                             double threshold) {
  if (split.size() == 0) fail(ErrorKind::value, "cannot evaluate an empty split");
  if (batch_size == 0) fail(ErrorKind::config, "batch size must be >= 1");
  const bool classify = model.task() == Task::classify;
  Tape<T>* previous = Tape<T>::active();
  Tape<T>::set_active(nullptr);
  struct Restore {
    Tape<T>* tape;
    ~Restore() { Tape<T>::set_active(tape); }
  } restore{previous};

  const double l2 = model.l2_coeff();
  Rng unused(0);
  EvalResult<T> res;
  const std::size_t n = split.size();
  double loss_sum = 0, metric_sum = 0;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t stop = std::min(n, start + batch_size);
    rows.resize(stop - start);
    std::iota(rows.begin(), rows.end(), start);
    const Tensor<T> x = gather_rows(split.images, rows);
    const Tensor<T> out = model.forward(x, Mode::eval, unused);
    if (classify) {
      const std::vector<std::size_t> labels(split.labels.begin() + static_cast<std::ptrdiff_t>(start),
                                            split.labels.begin() + static_cast<std::ptrdiff_t>(stop));
      loss_sum += static_cast<double>(cross_entropy(softmax(out), labels).item()) * static_cast<double>(rows.size());
      for (std::size_t i = 0; i < rows.size(); ++i) {
        res.predictions.push_back(argmax_row(out, i));
        metric_sum += res.predictions.back() == labels[i] ? 1.0 : 0.0;
      }
    } else {
      const Tensor<T> masks = gather_rows(split.masks, rows);
      const Tensor<T> probs = sigmoid(out);
      const double d = dice_coeff(probs, masks).item(), j = iou_coeff(probs, masks).item();
      loss_sum += (1.0 - 0.5 * (d + j)) * static_cast<double>(rows.size());
      hard_overlap(out, masks, threshold, res.dice_per_sample, res.iou_per_sample);
    }
  }
  const double penalty = l2 > 0.0 ? static_cast<double>(l2_penalty(model, l2).item()) : 0.0;
  res.loss = loss_sum / static_cast<double>(n) + penalty;
  if (classify) {
    res.metric = metric_sum / static_cast<double>(n);
  } else {
    res.metric = std::accumulate(res.dice_per_sample.begin(), res.dice_per_sample.end(), 0.0) / static_cast<double>(n);
    res.iou = std::accumulate(res.iou_per_sample.begin(), res.iou_per_sample.end(), 0.0) / static_cast<double>(n);
  }
  return res;
}

template <typename T>
TrainReport train_classifier(ModelGraph<T>& model, const TrainData<T>& data, const TrainConfig<T>& cfg) {
  return train_loop(model, data, cfg, Task::classify);
}

template <typename T>
TrainReport train_segmenter(ModelGraph<T>& model, const TrainData<T>& data, const TrainConfig<T>& cfg) {
  return train_loop(model, data, cfg, Task::segment);
}

#define LEAFGRAD_INSTANTIATE_TRAINER(T)                                                                   \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);                        \
  template DataSplit<T> subset(const DataSplit<T>&, std::span<const std::size_t>);                       \
  template struct TrainConfig<T>;                                                                         \
  template EvalResult<T> evaluate_split(ModelGraph<T>&, const DataSplit<T>&, std::size_t, double);       \
  template TrainReport train_classifier(ModelGraph<T>&, const TrainData<T>&, const TrainConfig<T>&);     \
  template TrainReport train_segmenter(ModelGraph<T>&, const TrainData<T>&, const TrainConfig<T>&);

LEAFGRAD_INSTANTIATE_TRAINER(float)
LEAFGRAD_INSTANTIATE_TRAINER(double)

}  // namespace leafgrad

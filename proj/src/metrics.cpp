#include "leafgrad/metrics.hpp"

#include <algorithm>
#include <sstream>

#include "leafgrad/losses.hpp"
#include "leafgrad/models.hpp"

namespace leafgrad {

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t s = 0;
  for (auto c : counts) s += c;
  return s;
}

std::uint64_t ConfusionMatrix::row_sum(std::size_t truth) const {
  std::uint64_t s = 0;
  for (std::size_t p = 0; p < classes; ++p) s += at(truth, p);
  return s;
}

std::uint64_t ConfusionMatrix::col_sum(std::size_t pred) const {
  std::uint64_t s = 0;
  for (std::size_t t = 0; t < classes; ++t) s += at(t, pred);
  return s;
}

ConfusionMatrix confusion(std::span<const std::size_t> preds, std::span<const std::size_t> labels,
                          std::size_t classes) {
  if (preds.size() != labels.size()) {
    fail(ErrorKind::shape, "confusion: " + std::to_string(preds.size()) + " predictions for " +
                               std::to_string(labels.size()) + " labels");
  }
  if (classes == 0) fail(ErrorKind::value, "confusion: class count must be >= 1");
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] >= classes || labels[i] >= classes) {
      fail(ErrorKind::value, "confusion: class index outside [0, " + std::to_string(classes) + ") at sample " +
                                 std::to_string(i));
    }
    ++cm.at(labels[i], preds[i]);
  }
  return cm;
}

bool ClassMetrics::any_undefined() const {
  return std::find(precision_undefined.begin(), precision_undefined.end(), true) != precision_undefined.end() ||
         std::find(recall_undefined.begin(), recall_undefined.end(), true) != recall_undefined.end();
}

ClassMetrics class_metrics(const ConfusionMatrix& cm) {
  const std::size_t K = cm.classes;
  if (K == 0) fail(ErrorKind::value, "class_metrics: empty confusion matrix");
  ClassMetrics m;
  std::uint64_t diag = 0;
  for (std::size_t c = 0; c < K; ++c) {
    const auto tp = cm.at(c, c);
    const auto col = cm.col_sum(c), row = cm.row_sum(c);
    diag += tp;
    m.precision_undefined.push_back(col == 0);
    m.recall_undefined.push_back(row == 0);
    const double p = col == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(col);
    const double r = row == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(row);
    m.precision.push_back(p);
    m.recall.push_back(r);
    m.f1.push_back(p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r));
    m.support.push_back(row);
  }
  const double k = static_cast<double>(K);
  for (std::size_t c = 0; c < K; ++c) {
    m.macro_precision += m.precision[c] / k;
    m.macro_recall += m.recall[c] / k;
    m.macro_f1 += m.f1[c] / k;
  }
  const auto total = cm.total();
  m.accuracy = total == 0 ? 0.0 : static_cast<double>(diag) / static_cast<double>(total);
  return m;
}

template <typename T>
SegMetrics seg_metrics(const Tensor<T>& pred, const Tensor<T>& target, double threshold) {
  if (!pred.defined() || !target.defined() || pred.shape() != target.shape() || pred.rank() < 2) {
    fail(ErrorKind::shape, "seg_metrics: prediction and target must share an N x ... shape");
  }
  const std::size_t N = pred.dim(0), M = pred.numel() / N;
  SegMetrics out;
  std::vector<double> p(M), t(M);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t i = 0; i < M; ++i) {
      p[i] = static_cast<double>(pred[n * M + i]) >= threshold ? 1.0 : 0.0;
      t[i] = target[n * M + i] > T{0} ? 1.0 : 0.0;
    }
    out.dice_per_sample.push_back(dice_value(p, t));
    out.iou_per_sample.push_back(iou_value(p, t));
    out.dice += out.dice_per_sample.back() / static_cast<double>(N);
    out.iou += out.iou_per_sample.back() / static_cast<double>(N);
  }
  return out;
}

namespace {

std::string class_name(const std::vector<std::string>& names, std::size_t c) {
  return c < names.size() ? names[c] : std::to_string(c);
}

}  // namespace

std::string confusion_csv(const ConfusionMatrix& cm, const std::vector<std::string>& names) {
  std::ostringstream os;
  os << "true\\pred";
  for (std::size_t p = 0; p < cm.classes; ++p) os << "," << class_name(names, p);
  os << "\n";
  for (std::size_t t = 0; t < cm.classes; ++t) {
    os << class_name(names, t);
    for (std::size_t p = 0; p < cm.classes; ++p) os << "," << cm.at(t, p);
    os << "\n";
  }
  return os.str();
}

std::string class_metrics_csv(const ClassMetrics& m, const std::vector<std::string>& names) {
  std::ostringstream os;
  os << "class,precision,recall,f1,support,undefined\n";
  for (std::size_t c = 0; c < m.precision.size(); ++c) {
    std::string flag = m.precision_undefined[c] ? "precision" : "";
    if (m.recall_undefined[c]) flag += flag.empty() ? "recall" : "+recall";
    os << class_name(names, c) << "," << format_double(m.precision[c]) << "," << format_double(m.recall[c]) << ","
       << format_double(m.f1[c]) << "," << m.support[c] << "," << flag << "\n";
  }
  os << "macro_avg," << format_double(m.macro_precision) << "," << format_double(m.macro_recall) << ","
     << format_double(m.macro_f1) << ",,\n";
  os << "accuracy,,," << format_double(m.accuracy) << ",,\n";
  return os.str();
}

template SegMetrics seg_metrics(const Tensor<float>&, const Tensor<float>&, double);
template SegMetrics seg_metrics(const Tensor<double>&, const Tensor<double>&, double);

}  // namespace leafgrad

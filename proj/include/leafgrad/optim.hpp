#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "leafgrad/models.hpp"

namespace leafgrad {

template <typename T>
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  // Zero moments sized after `params`.
  static AdamState for_params(const std::vector<NamedTensor<T>>& params, double lr);
};

// Bias-corrected Adam: theta -= lr * m_hat / (sqrt(v_hat) + eps).
// Every parameter must carry a gradient.
template <typename T>
void adam_step(std::vector<NamedTensor<T>>& params, AdamState<T>& state);

enum class MonitorMode { min, max };

// Counts epochs without strict improvement of a monitored value. The first
// observation always counts as an improvement.
class PatienceCounter {
 public:
  PatienceCounter(MonitorMode mode, std::size_t patience);

  // Returns true when `value` improves on the best so far.
  bool observe(double value);
  bool exhausted() const { return wait_ >= patience_; }
  void reset_wait() { wait_ = 0; }

  MonitorMode mode() const { return mode_; }
  std::size_t patience() const { return patience_; }
  std::size_t wait() const { return wait_; }
  double best() const { return best_; }

 private:
  MonitorMode mode_;
  std::size_t patience_;
  std::size_t wait_ = 0;
  double best_;
};

// Multiplies the learning rate by `factor` (never below min_lr) once the
// monitored value has not improved for `patience` epochs, then starts a new
// waiting window.
class PlateauSchedule {
 public:
  PlateauSchedule(double lr, MonitorMode mode, double factor = 0.5, std::size_t patience = 15, double min_lr = 0.0);

  // Feeds one epoch's value and returns the learning rate for the next epoch.
  double step(double value);

  double lr() const { return lr_; }
  double factor() const { return factor_; }
  double min_lr() const { return min_lr_; }
  const PatienceCounter& counter() const { return counter_; }
  std::size_t reductions() const { return reductions_; }

 private:
  double lr_;
  double factor_;
  double min_lr_;
  PatienceCounter counter_;
  std::size_t reductions_ = 0;
};

// Tracks the best monitored value together with a snapshot of the model at
// that epoch. When patience runs out the snapshot is restored.
template <typename T>
class EarlyStop {
 public:
  explicit EarlyStop(std::size_t patience = 15, MonitorMode mode = MonitorMode::min);

  // Returns true when training should stop; the model has then been rolled
  // back to the best epoch.
  bool step(double value, ModelGraph<T>& model, std::size_t epoch);

  bool stopped() const { return stopped_; }
  std::size_t best_epoch() const { return best_epoch_; }
  double best() const { return counter_.best(); }
  std::size_t wait() const { return counter_.wait(); }
  bool last_improved() const { return last_improved_; }

 private:
  PatienceCounter counter_;
  std::optional<ModelSnapshot<T>> snapshot_;
  std::size_t best_epoch_ = 0;
  bool stopped_ = false;
  bool last_improved_ = false;
};

}  // namespace leafgrad

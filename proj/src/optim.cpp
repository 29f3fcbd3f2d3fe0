#include "leafgrad/optim.hpp"

#include <algorithm>
#include <cmath>

namespace leafgrad {

template <typename T>
AdamState<T> AdamState<T>::for_params(const std::vector<NamedTensor<T>>& params, double lr) {
  if (!(lr >= 0.0)) fail(ErrorKind::config, "learning rate must be >= 0");
  AdamState s;
  s.lr = lr;
  for (const auto& p : params) {
    s.m.emplace_back(p.tensor.numel(), 0.0);
    s.v.emplace_back(p.tensor.numel(), 0.0);
  }
  return s;
}

template <typename T>
void adam_step(std::vector<NamedTensor<T>>& params, AdamState<T>& state) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    fail(ErrorKind::state, "adam_step: optimizer state was built for a different parameter list");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!params[k].tensor.has_grad()) fail(ErrorKind::state, "adam_step: parameter '" + params[k].name + "' has no gradient");
    if (state.m[k].size() != params[k].tensor.numel()) {
      fail(ErrorKind::state, "adam_step: moment size mismatch for '" + params[k].name + "'");
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto theta = params[k].tensor.data();
    auto g = params[k].tensor.grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = g[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
      const double m_hat = m[i] / c1, v_hat = v[i] / c2;
      theta[i] = static_cast<T>(theta[i] - state.lr * m_hat / (std::sqrt(v_hat) + state.eps));
    }
  }
}

PatienceCounter::PatienceCounter(MonitorMode mode, std::size_t patience)
    : mode_(mode),
      patience_(patience),
      best_(mode == MonitorMode::min ? std::numeric_limits<double>::infinity()
                                     : -std::numeric_limits<double>::infinity()) {
  if (patience == 0) fail(ErrorKind::config, "patience must be >= 1");
}

bool PatienceCounter::observe(double value) {
  const bool better = mode_ == MonitorMode::min ? value < best_ : value > best_;
  if (better) {
    best_ = value;
    wait_ = 0;
  } else {
    ++wait_;
  }
  return better;
}

PlateauSchedule::PlateauSchedule(double lr, MonitorMode mode, double factor, std::size_t patience, double min_lr)
    : lr_(lr), factor_(factor), min_lr_(min_lr), counter_(mode, patience) {
  if (!(factor > 0.0 && factor < 1.0)) fail(ErrorKind::config, "plateau factor must lie in (0, 1)");
  if (!(min_lr >= 0.0)) fail(ErrorKind::config, "min_lr must be >= 0");
  if (!(lr >= 0.0)) fail(ErrorKind::config, "learning rate must be >= 0");
  lr_ = std::max(lr_, min_lr_);
}

double PlateauSchedule::step(double value) {
  counter_.observe(value);
  if (counter_.exhausted()) {
    const double next = std::max(lr_ * factor_, min_lr_);
    if (next < lr_) ++reductions_;
    lr_ = next;
    counter_.reset_wait();
  }
  return lr_;
}

template <typename T>
EarlyStop<T>::EarlyStop(std::size_t patience, MonitorMode mode) : counter_(mode, patience) {}

template <typename T>
bool EarlyStop<T>::step(double value, ModelGraph<T>& model, std::size_t epoch) {
  if (stopped_) return true;
  last_improved_ = counter_.observe(value);
  if (last_improved_) {
    snapshot_ = model.snapshot();
    best_epoch_ = epoch;
    return false;
  }
  if (!counter_.exhausted()) return false;
  if (snapshot_) model.restore(*snapshot_);
  stopped_ = true;
  return true;
}

template struct AdamState<float>;
template struct AdamState<double>;
template void adam_step(std::vector<NamedTensor<float>>&, AdamState<float>&);
template void adam_step(std::vector<NamedTensor<double>>&, AdamState<double>&);
template class EarlyStop<float>;
template class EarlyStop<double>;

}  // namespace leafgrad

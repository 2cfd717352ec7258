#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "incomes/core/error.hpp"
#include "incomes/core/tensor.hpp"

namespace incomes {

/// Linear warmup from min_lr to max_lr, then cosine decay back to min_lr.
struct LrSchedule {
  double max_lr = 1e-3;
  double min_lr = 1e-6;
  std::int64_t warmup_steps = 100;
  std::int64_t total_steps = 1000;

  double at(std::int64_t step) const {
    if (step < warmup_steps) return min_lr + (max_lr - min_lr) * static_cast<double>(step) / static_cast<double>(warmup_steps);
    const std::int64_t decay = std::max<std::int64_t>(1, total_steps - warmup_steps);
    const double progress = std::clamp(static_cast<double>(step - warmup_steps) / static_cast<double>(decay), 0.0, 1.0);
    return min_lr + 0.5 * (max_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
  }
};

/// Adam with decoupled weight decay. Moments live in the optimizer, aligned
/// with the parameter list passed at construction.
template <class T>
class Adam {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double clip_norm = 0.0;  // 0 disables global-norm clipping
  };

  Adam(std::vector<Parameter<T>*> params, LrSchedule schedule, Options opt)
      : params_(std::move(params)), schedule_(schedule), opt_(opt) {
    for (auto* p : params_) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }
  Adam(std::vector<Parameter<T>*> params, LrSchedule schedule) : Adam(std::move(params), schedule, Options{}) {}

  std::int64_t step_count() const { return step_; }
  double current_lr() const { return schedule_.at(step_); }
  const Tensor<T>& first_moment(std::size_t i) const { return m_[i]; }
  const Tensor<T>& second_moment(std::size_t i) const { return v_[i]; }
  const LrSchedule& schedule() const { return schedule_; }

  double grad_norm() const {
    double s = 0;
    for (auto* p : params_)
      if (p->trainable)
        for (T g : p->grad.vec()) s += static_cast<double>(g) * static_cast<double>(g);
    return std::sqrt(s);
  }

  /// One update using the gradients currently held by the parameters. Returns the LR used.
  double step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (params_[i]->grad.shape() != params_[i]->value.shape())
        throw DimensionError("optimizer: gradient shape " + shape_str(params_[i]->grad.shape()) + " != parameter " +
                             shape_str(params_[i]->value.shape()));
      if (!params_[i]->grad.all_finite()) throw NumericError("optimizer: non-finite gradient");
    }
    const double lr = schedule_.at(step_);
    ++step_;
    double clip = 1.0;
    if (opt_.clip_norm > 0) {
      const double norm = grad_norm();
      if (norm > opt_.clip_norm) clip = opt_.clip_norm / norm;
    }
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Parameter<T>& p = *params_[i];
      if (!p.trainable) continue;
      T* w = p.value.data();
      const T* g = p.grad.data();
      T* m = m_[i].data();
      T* v = v_[i].data();
      for (std::size_t j = 0; j < p.value.size(); ++j) {
        const double gj = static_cast<double>(g[j]) * clip;
        m[j] = static_cast<T>(opt_.beta1 * m[j] + (1.0 - opt_.beta1) * gj);
        v[j] = static_cast<T>(opt_.beta2 * v[j] + (1.0 - opt_.beta2) * gj * gj);
        const double upd = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + opt_.eps) + opt_.weight_decay * w[j];
        w[j] = static_cast<T>(w[j] - lr * upd);
      }
    }
    return lr;
  }

 private:
  std::vector<Parameter<T>*> params_;
  LrSchedule schedule_;
  Options opt_;
  std::vector<Tensor<T>> m_, v_;
  std::int64_t step_ = 0;
};

}  // namespace incomes

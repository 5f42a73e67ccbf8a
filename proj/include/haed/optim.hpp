#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <unordered_map>
#include <vector>

#include "haed/autodiff.hpp"

namespace haed {

/// Linear warmup to the peak, then cosine decay to floor_fraction * peak.
struct Schedule {
  std::size_t warmup_steps = 2000;
  std::size_t total_steps = 0;
  double floor_fraction = 0.05;
};

inline double lr_at(const Schedule& s, std::size_t step, double peak) {
  require(s.total_steps > s.warmup_steps, "InvalidSchedule",
          "schedule total steps (" + std::to_string(s.total_steps) +
              ") must exceed warmup steps (" + std::to_string(s.warmup_steps) + ")");
  require(step <= s.total_steps, "OutOfRange", "lr_at: step beyond total steps");
  if (step < s.warmup_steps)
    return peak * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  const double floor = s.floor_fraction * peak;
  const double progress = static_cast<double>(step - s.warmup_steps) /
                          static_cast<double>(s.total_steps - s.warmup_steps);
  return floor + (peak - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double lr_enc_dec = 0.002;
  double lr_main = 0.00035;
  double clip_norm = 0.01;
};

/// Moment accumulators of one parameter.
template <typename T>
struct AdamSlot {
  Tensor<T> m;
  Tensor<T> v;
};

/// Adam with decoupled weight decay. Keeps first/second moments per
/// parameter name and a shared step counter.
template <typename T>
class AdamW {
 public:
  explicit AdamW(OptimizerConfig cfg = {}) : cfg_(cfg) {}

  const OptimizerConfig& config() const noexcept { return cfg_; }
  std::size_t step_count() const noexcept { return t_; }
  void set_step_count(std::size_t t) noexcept { t_ = t; }

  /// Registers a parameter; only registered parameters are updated.
  void track(const Parameter<T>& p) {
    slots_.try_emplace(p.name, AdamSlot<T>{Tensor<T>(p.value.shape()), Tensor<T>(p.value.shape())});
  }
  bool tracks(const std::string& name) const { return slots_.contains(name); }
  std::size_t tracked_count() const noexcept { return slots_.size(); }
  AdamSlot<T>& slot(const std::string& name) {
    auto it = slots_.find(name);
    require(it != slots_.end(), "NotFound", "optimizer has no state for " + name);
    return it->second;
  }
  const AdamSlot<T>& slot(const std::string& name) const {
    auto it = slots_.find(name);
    require(it != slots_.end(), "NotFound", "optimizer has no state for " + name);
    return it->second;
  }

  /// One update for every tracked parameter, with a per-group learning rate.
  void step(ParamStore<T>& params, double lr_enc_dec, double lr_main) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    // Staged so a non-finite result leaves parameters and moments untouched.
    struct Staged {
      Parameter<T>* p;
      AdamSlot<T>* slot;
      Tensor<T> value;
      AdamSlot<T> next;
    };
    std::vector<Staged> staged;
    try {
      params.for_each([&](Parameter<T>& p) {
        auto it = slots_.find(p.name);
        if (it == slots_.end() || !p.trainable) return;
        const double lr = p.group == ParamGroup::main ? lr_main : lr_enc_dec;
        Staged s{&p, &it->second, p.value, it->second};
        update(s.value, p.grad, s.next, lr, bc1, bc2);
        staged.push_back(std::move(s));
      });
    } catch (...) {
      --t_;
      throw;
    }
    for (auto& s : staged) {
      s.p->value = std::move(s.value);
      *s.slot = std::move(s.next);
    }
  }

  /// Single-tensor update; exposed for tests of the closed form.
  void update(Tensor<T>& value, const Tensor<T>& grad, AdamSlot<T>& s, double lr, double bc1,
              double bc2) const {
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T eps = static_cast<T>(cfg_.eps);
    const T decay = static_cast<T>(lr * cfg_.weight_decay);
    const T step_size = static_cast<T>(lr / bc1);
    const T inv_bc2 = static_cast<T>(1.0 / bc2);
    for (std::size_t i = 0; i < value.size(); ++i) {
      const T g = grad[i];
      s.m[i] = b1 * s.m[i] + (T{1} - b1) * g;
      s.v[i] = b2 * s.v[i] + (T{1} - b2) * g * g;
      const T denom = std::sqrt(s.v[i] * inv_bc2) + eps;
      value[i] -= decay * value[i];
      value[i] -= step_size * s.m[i] / denom;
    }
    require(value.all_finite(), "NonFinite", "optimizer produced a non-finite parameter");
  }

 private:
  OptimizerConfig cfg_;
  std::size_t t_ = 0;
  std::unordered_map<std::string, AdamSlot<T>> slots_;
};

}  // namespace haed

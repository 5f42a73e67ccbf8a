#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "haed/ops.hpp"

namespace haed {

/// -log softmax(logits)[target] in nats, computed with max-subtraction.
template <typename T>
T softmax_xent(std::span<const T> logits, std::size_t target) {
  require(target < logits.size(), "OutOfRange",
          "softmax_xent: target " + std::to_string(target) + " >= " + std::to_string(logits.size()));
  require(std::all_of(logits.begin(), logits.end(), [](T v) { return std::isfinite(v); }),
          "NonFinite", "softmax_xent: non-finite logits");
  return detail::log_sum_exp(logits) - logits[target];
}

template <typename T>
T global_norm(std::span<const Tensor<T>* const> grads) {
  // Accumulate in double so the float path agrees with the threshold check.
  double s = 0.0;
  for (const auto* g : grads)
    for (T v : g->values()) s += static_cast<double>(v) * static_cast<double>(v);
  return static_cast<T>(std::sqrt(s));
}

/// Rescales the set of gradients so that their joint L2 norm is at most
/// max_norm. Returns the norm before clipping.
template <typename T>
T clip_global_norm(std::span<Tensor<T>* const> grads, T max_norm) {
  require(max_norm > T{0}, "InvalidValue", "clip_global_norm: max norm must be positive");
  double s = 0.0;
  for (const auto* g : grads) {
    require(g->all_finite(), "NonFinite", "clip_global_norm: non-finite gradient");
    for (T v : g->values()) s += static_cast<double>(v) * static_cast<double>(v);
  }
  const double norm = std::sqrt(s);
  if (norm > static_cast<double>(max_norm)) {
    const T factor = static_cast<T>(static_cast<double>(max_norm) / norm);
    for (auto* g : grads)
      for (T& v : g->values()) v *= factor;
  }
  return static_cast<T>(norm);
}

template <typename T>
T clip_global_norm(ParamStore<T>& params, std::type_identity_t<T> max_norm) {
  std::vector<Tensor<T>*> grads;
  params.for_each([&](Parameter<T>& p) {
    if (p.trainable) grads.push_back(&p.grad);
  });
  return clip_global_norm<T>(std::span<Tensor<T>* const>(grads), max_norm);
}

// ---------------------------------------------------------------------------
// Gradient checking

struct ParamCheck {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  double max_rel_error = 0.0;
  double tolerance = 1e-5;
  bool deterministic = true;
  bool passed = false;
};

struct GradCheckOptions {
  double eps = 1e-5;
  double tolerance = 1e-5;
  /// Coordinates sampled per parameter when the parameter is larger.
  std::size_t coords_per_param = 64;
  std::uint64_t seed = 1234;
};

inline double relative_error(double analytic, double numeric) {
  constexpr double kFloor = 1e-12;
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), kFloor});
}

/// Compares reverse-mode gradients of `loss_fn` against central differences.
/// `loss_fn` must build a scalar loss on the given graph from `params`.
inline GradCheckReport grad_check(const std::function<Var<double>(Graph<double>&)>& loss_fn,
                                  ParamStore<double>& params, const GradCheckOptions& opt = {}) {
  require(opt.eps >= 1e-6 && opt.eps <= 1e-4, "InvalidValue", "grad_check: eps must be in [1e-6, 1e-4]");
  auto evaluate = [&] {
    Graph<double> g(false);
    return loss_fn(g).value()[0];
  };

  GradCheckReport report;
  report.tolerance = opt.tolerance;
  if (evaluate() != evaluate()) {
    report.deterministic = false;
    return report;
  }

  params.zero_grad();
  {
    Graph<double> g(true);
    auto loss = loss_fn(g);
    g.backward(loss);
  }

  std::mt19937_64 rng(opt.seed);
  params.for_each([&](Parameter<double>& p) {
    if (!p.trainable) return;
    ParamCheck pc{p.name, 0.0, 0};
    std::vector<std::size_t> coords(p.value.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > opt.coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.coords_per_param);
    }
    for (std::size_t c : coords) {
      const double orig = p.value[c];
      p.value[c] = orig + opt.eps;
      const double fp = evaluate();
      p.value[c] = orig - opt.eps;
      const double fm = evaluate();
      p.value[c] = orig;
      const double numeric = (fp - fm) / (2.0 * opt.eps);
      pc.max_rel_error = std::max(pc.max_rel_error, relative_error(p.grad[c], numeric));
      ++pc.coords_checked;
    }
    report.max_rel_error = std::max(report.max_rel_error, pc.max_rel_error);
    report.params.push_back(std::move(pc));
  });
  report.passed = report.max_rel_error <= opt.tolerance;
  return report;
}

}  // namespace haed

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "rpp/errors.hpp"
#include "rpp/params.hpp"
#include "rpp/tensor.hpp"

namespace rpp {

// Linear warmup to 1 over warmup_steps, then linear decay to 0 at
// total_steps. Steps past the end clamp to 0 (callers may record the clamp).
struct ScheduleConfig {
  int64_t warmup_steps = 0;
  int64_t total_steps = 1;

  void validate() const {
    if (warmup_steps < 0 || total_steps <= 0 || warmup_steps > total_steps) {
      throw ConfigError("schedule: need 0 <= warmup_steps <= total_steps, total_steps > 0");
    }
  }
};

inline double schedule_multiplier(int64_t k, const ScheduleConfig& cfg, bool* clamped = nullptr) {
  cfg.validate();
  if (clamped) *clamped = false;
  if (k < 0) throw RuntimeFailure("schedule: negative step");
  if (k > cfg.total_steps) {
    if (clamped) *clamped = true;
    return 0.0;
  }
  if (k <= cfg.warmup_steps) {
    if (cfg.warmup_steps == 0) return 1.0;
    return static_cast<double>(k) / static_cast<double>(cfg.warmup_steps);
  }
  return static_cast<double>(cfg.total_steps - k) /
         static_cast<double>(cfg.total_steps - cfg.warmup_steps);
}

struct OptimizerState {
  std::vector<Tensor> m;  // first moments, aligned with ParamSet entries
  std::vector<Tensor> v;  // second moments
  int64_t step = 0;       // k, number of completed steps
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
  double lr = 1e-3;           // base step size (alpha)
  double weight_decay = 0.0;  // decoupled, prunable matrices only
  ScheduleConfig schedule;

  static OptimizerState init(const ParamSet& params, double lr, double weight_decay,
                             ScheduleConfig schedule, double beta1 = 0.9, double beta2 = 0.999,
                             double eps = 1e-6) {
    schedule.validate();
    OptimizerState s;
    s.lr = lr;
    s.weight_decay = weight_decay;
    s.schedule = schedule;
    s.beta1 = beta1;
    s.beta2 = beta2;
    s.eps = eps;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const auto& e : params.entries()) {
      s.m.emplace_back(e.value.shape());
      s.v.emplace_back(e.value.shape());
    }
    return s;
  }
};

enum class ExponentMode { candes, paper };

inline const char* exponent_mode_name(ExponentMode m) {
  return m == ExponentMode::candes ? "candes" : "paper";
}

// Per-weight positive factors for the reweighted penalty. Factors exist for
// prunable entries only; non-prunable slots stay empty.
struct ReweightState {
  std::vector<Tensor> alpha;  // aligned with ParamSet entries, empty when not prunable
  int64_t outer_iter = 0;     // t
  double gamma = 0.0;
  double epsilon = 1e-9;
  ExponentMode mode = ExponentMode::paper;

  static ReweightState init(const ParamSet& params, double gamma, double epsilon = 1e-9,
                            ExponentMode mode = ExponentMode::paper) {
    if (gamma < 0.0) throw ConfigError("reweight: gamma must be nonnegative");
    if (epsilon < 0.0) throw ConfigError("reweight: epsilon must be nonnegative");
    ReweightState s;
    s.gamma = gamma;
    s.epsilon = epsilon;
    s.mode = mode;
    s.alpha.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      const auto& e = params.entry(i);
      if (e.prunable) s.alpha[i] = Tensor::full(e.value.shape(), 1.0);
    }
    return s;
  }
};

// Closed-form weighted soft threshold, one coordinate. The zero branch
// returns +0.0 so pruned weights are bit-exact zeros; a zero threshold is an
// exact identity.
inline double prox_rw_l1_scalar(double a, double step, double gamma, double alpha) {
  double threshold = step * gamma * alpha;
  if (threshold == 0.0) return a;
  double mag = std::fabs(a);
  if (mag > threshold) return (1.0 - threshold / mag) * a;
  return 0.0;
}

inline Tensor prox_rw_l1(const Tensor& a, double step, double gamma, const Tensor& alpha) {
  if (!(step > 0.0)) throw RuntimeFailure("prox: step must be positive");
  if (gamma < 0.0) throw RuntimeFailure("prox: gamma must be nonnegative");
  if (!a.same_shape(alpha)) throw RuntimeFailure("prox: alpha shape mismatch");
  if (!a.all_finite()) throw RuntimeFailure("prox: non-finite input");
  Tensor w(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) {
    double af = alpha[i];
    if (!(af > 0.0)) throw RuntimeFailure("prox: alpha factors must be positive");
    w[i] = prox_rw_l1_scalar(a[i], step, gamma, af);
  }
  return w;
}

namespace detail {

// Shared AdamW core (Algorithm: moments, bias correction, schedule,
// decoupled decay). Returns eta_k so callers can derive the prox step.
inline double adamw_advance(OptimizerState& state, ParamSet& params, const ParamSet& grads,
                            const std::vector<Tensor>* extra_grad = nullptr) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw RuntimeFailure("adamw: state/param/grad sizes differ");
  }
  if (state.step == std::numeric_limits<int64_t>::max()) {
    throw RuntimeFailure("adamw: step counter overflow");
  }
  state.step += 1;
  int64_t k = state.step;
  double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(k));
  double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(k));
  double eta = schedule_multiplier(k, state.schedule);

  for (size_t e = 0; e < params.size(); ++e) {
    auto& entry = params.entry(e);
    const Tensor& g0 = grads.entry(e).value;
    if (!g0.same_shape(entry.value)) {
      throw RuntimeFailure("adamw: gradient shape mismatch for '" + entry.name + "'");
    }
    if (!g0.all_finite()) {
      throw RuntimeFailure("adamw: non-finite gradient for '" + entry.name + "'");
    }
    Tensor& m = state.m[e];
    Tensor& v = state.v[e];
    double decay = entry.prunable ? state.weight_decay : 0.0;
    const Tensor* extra = (extra_grad && entry.prunable) ? &(*extra_grad)[e] : nullptr;
    for (int64_t i = 0; i < entry.value.numel(); ++i) {
      double g = g0[i];
      if (extra) g += (*extra)[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      double w = entry.value[i];
      entry.value[i] = w - eta * (state.lr * mhat / (std::sqrt(vhat) + state.eps) + decay * w);
    }
  }
  return eta;
}

}  // namespace detail

// One AdamW step. Parameters become the pre-prox point `a`.
inline double adamw_step(OptimizerState& state, ParamSet& params, const ParamSet& grads) {
  return detail::adamw_advance(state, params, grads);
}

// AdamW step followed by the weighted-l1 proximal map on prunable tensors.
// The effective prox step is eta_k * lr (scalar form of the closed-form
// solution); non-prunable tensors keep the pre-prox point unchanged.
inline void adamw_prox_step(OptimizerState& state, ParamSet& params, const ParamSet& grads,
                            const ReweightState& rw) {
  double eta = detail::adamw_advance(state, params, grads);
  double prox_step = eta * state.lr;
  if (prox_step <= 0.0) return;  // schedule end: nothing moved, nothing to threshold
  for (size_t e = 0; e < params.size(); ++e) {
    auto& entry = params.entry(e);
    if (!entry.prunable) continue;
    const Tensor& alpha = rw.alpha[e];
    for (int64_t i = 0; i < entry.value.numel(); ++i) {
      entry.value[i] = prox_rw_l1_scalar(entry.value[i], prox_step, rw.gamma, alpha[i]);
    }
  }
}

// Failing-baseline update: the penalty subgradient gamma * alpha * sign(w)
// is folded into the gradient before the AdamW step; no proximal map runs.
// sign(0) is taken as 0.
inline void l1_subgradient_step(OptimizerState& state, ParamSet& params, const ParamSet& grads,
                                double gamma, const ReweightState& rw) {
  if (gamma == 0.0) {
    detail::adamw_advance(state, params, grads);
    return;
  }
  std::vector<Tensor> penalty(params.size());
  for (size_t e = 0; e < params.size(); ++e) {
    const auto& entry = params.entry(e);
    if (!entry.prunable) continue;
    const Tensor& alpha = rw.alpha[e];
    Tensor t(entry.value.shape());
    for (int64_t i = 0; i < entry.value.numel(); ++i) {
      double w = entry.value[i];
      double sg = w > 0.0 ? 1.0 : (w < 0.0 ? -1.0 : 0.0);
      t[i] = gamma * alpha[i] * sg;
    }
    penalty[e] = std::move(t);
  }
  detail::adamw_advance(state, params, grads, &penalty);
}

// Reweighting update (outer loop Step 2). candes: alpha = 1/(|w| + eps);
// paper: alpha = 1/(|w|^t + eps) with t the current outer iteration.
inline void reweight_update(const ParamSet& params, ReweightState& rw) {
  if (rw.outer_iter < 1) throw RuntimeFailure("reweight: outer iteration must be >= 1");
  for (size_t e = 0; e < params.size(); ++e) {
    const auto& entry = params.entry(e);
    if (!entry.prunable) continue;
    Tensor& alpha = rw.alpha[e];
    for (int64_t i = 0; i < entry.value.numel(); ++i) {
      double mag = std::fabs(entry.value[i]);
      double base;
      if (rw.mode == ExponentMode::candes) {
        base = mag;
      } else {
        base = 1.0;
        for (int64_t t = 0; t < rw.outer_iter; ++t) base *= mag;
      }
      alpha[i] = 1.0 / (base + rw.epsilon);
    }
  }
}

}  // namespace rpp

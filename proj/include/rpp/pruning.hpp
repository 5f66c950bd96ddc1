// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "rpp/data.hpp"
#include "rpp/errors.hpp"
#include "rpp/model.hpp"
#include "rpp/optim.hpp"
#include "rpp/params.hpp"
#include "rpp/report.hpp"

namespace rpp {

struct ExactRatio {
  int64_t num = 0;
  int64_t den = 1;
  double value() const { return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den); }
};

// Index sets of zeroed weights, one set per prunable tensor, in ParamSet
// entry order. Indices are sorted and duplicate-free.
struct TensorPattern {
  std::string name;
  int64_t numel = 0;
  std::vector<int64_t> indices;
};

struct SparsePattern {
  std::vector<TensorPattern> tensors;
  int64_t prunable_total = 0;
  int64_t all_total = 0;

  int64_t zero_count() const {
    int64_t n = 0;
    for (const auto& t : tensors) n += static_cast<int64_t>(t.indices.size());
    return n;
  }
  ExactRatio ratio_prunable() const { return {zero_count(), prunable_total}; }
  ExactRatio ratio_all() const { return {zero_count(), all_total}; }

  bool same_as(const SparsePattern& o) const {
    if (tensors.size() != o.tensors.size()) return false;
    for (size_t i = 0; i < tensors.size(); ++i) {
      if (tensors[i].name != o.tensors[i].name || tensors[i].indices != o.tensors[i].indices) return false;
    }
    return true;
  }

  // True when every index set of `this` is contained in `o`'s.
  bool subset_of(const SparsePattern& o) const {
    if (tensors.size() != o.tensors.size()) return false;
    for (size_t i = 0; i < tensors.size(); ++i) {
      if (tensors[i].name != o.tensors[i].name) return false;
      if (!std::includes(o.tensors[i].indices.begin(), o.tensors[i].indices.end(),
                         tensors[i].indices.begin(), tensors[i].indices.end()))
        return false;
    }
    return true;
  }
};

inline SparsePattern pattern_intersection(const SparsePattern& a, const SparsePattern& b) {
  SparsePattern out = a;
  for (size_t i = 0; i < out.tensors.size(); ++i) {
    std::vector<int64_t> both;
    std::set_intersection(a.tensors[i].indices.begin(), a.tensors[i].indices.end(),
                          b.tensors[i].indices.begin(), b.tensors[i].indices.end(),
                          std::back_inserter(both));
    out.tensors[i].indices = std::move(both);
  }
  return out;
}

inline SparsePattern pattern_union(const SparsePattern& a, const SparsePattern& b) {
  SparsePattern out = a;
  for (size_t i = 0; i < out.tensors.size(); ++i) {
    std::vector<int64_t> either;
    std::set_union(a.tensors[i].indices.begin(), a.tensors[i].indices.end(),
                   b.tensors[i].indices.begin(), b.tensors[i].indices.end(),
                   std::back_inserter(either));
    out.tensors[i].indices = std::move(either);
  }
  return out;
}

// Positions of bit-exact zeros among the prunable tensors.
inline SparsePattern extract_sparse_pattern(const ParamSet& params) {
  SparsePattern pat;
  pat.prunable_total = params.prunable_count();
  pat.all_total = params.total_count();
  for (const auto& e : params.entries()) {
    if (!e.prunable) continue;
    TensorPattern tp;
    tp.name = e.name;
    tp.numel = e.value.numel();
    for (int64_t i = 0; i < e.value.numel(); ++i) {
      if (e.value[i] == 0.0) tp.indices.push_back(i);
    }
    pat.tensors.push_back(std::move(tp));
  }
  return pat;
}

enum class PruneScope { global, per_tensor };

// Selects the floor(p*n) smallest-magnitude prunable weights. Ties break on
// (magnitude, tensor name, flat index), which makes the selection total and
// deterministic. Selection only; apply_pattern does the zeroing.
inline SparsePattern hard_threshold_prune(const ParamSet& params, double target_ratio,
                                          PruneScope scope = PruneScope::global) {
  if (!(target_ratio >= 0.0 && target_ratio <= 1.0)) {
    throw ConfigError("hard threshold: ratio must lie in [0,1]");
  }
  SparsePattern pat;
  pat.prunable_total = params.prunable_count();
  pat.all_total = params.total_count();

  std::vector<const ParamSet::Entry*> prunable;
  for (const auto& e : params.entries()) {
    if (e.prunable) prunable.push_back(&e);
  }
  // Lexicographic rank of each prunable tensor name, for tie-breaking.
  std::vector<size_t> lex(prunable.size());
  {
    std::vector<size_t> order(prunable.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return prunable[a]->name < prunable[b]->name; });
    for (size_t r = 0; r < order.size(); ++r) lex[order[r]] = r;
  }

  struct Item {
    double mag;
    size_t lex_rank;
    size_t tensor;
    int64_t index;
  };
  auto item_less = [](const Item& a, const Item& b) {
    if (a.mag != b.mag) return a.mag < b.mag;
    if (a.lex_rank != b.lex_rank) return a.lex_rank < b.lex_rank;
    return a.index < b.index;
  };

  std::vector<std::vector<int64_t>> selected(prunable.size());
  if (scope == PruneScope::global) {
    std::vector<Item> items;
    items.reserve(static_cast<size_t>(pat.prunable_total));
    for (size_t t = 0; t < prunable.size(); ++t) {
      const Tensor& v = prunable[t]->value;
      for (int64_t i = 0; i < v.numel(); ++i) items.push_back({std::fabs(v[i]), lex[t], t, i});
    }
    int64_t keep = static_cast<int64_t>(target_ratio * static_cast<double>(pat.prunable_total));
    keep = std::min(keep, pat.prunable_total);
    std::sort(items.begin(), items.end(), item_less);
    for (int64_t i = 0; i < keep; ++i) selected[items[static_cast<size_t>(i)].tensor].push_back(items[static_cast<size_t>(i)].index);
  } else {
    for (size_t t = 0; t < prunable.size(); ++t) {
      const Tensor& v = prunable[t]->value;
      std::vector<Item> items;
      items.reserve(static_cast<size_t>(v.numel()));
      for (int64_t i = 0; i < v.numel(); ++i) items.push_back({std::fabs(v[i]), lex[t], t, i});
      int64_t keep = static_cast<int64_t>(target_ratio * static_cast<double>(v.numel()));
      keep = std::min<int64_t>(keep, v.numel());
      std::sort(items.begin(), items.end(), item_less);
      for (int64_t i = 0; i < keep; ++i) selected[t].push_back(items[static_cast<size_t>(i)].index);
    }
  }

  for (size_t t = 0; t < prunable.size(); ++t) {
    TensorPattern tp;
    tp.name = prunable[t]->name;
    tp.numel = prunable[t]->value.numel();
    std::sort(selected[t].begin(), selected[t].end());
    tp.indices = std::move(selected[t]);
    pat.tensors.push_back(std::move(tp));
  }
  return pat;
}

// Sets every listed weight to exact zero; other coordinates untouched.
inline void apply_pattern(ParamSet& params, const SparsePattern& pattern) {
  for (const auto& tp : pattern.tensors) {
    Tensor& t = params.value(tp.name);
    for (int64_t idx : tp.indices) {
      if (idx < 0 || idx >= t.numel()) {
        throw RuntimeFailure("apply_pattern: index " + std::to_string(idx) + " outside '" + tp.name +
                             "' (" + std::to_string(t.numel()) + " weights)");
      }
      t[idx] = 0.0;
    }
  }
}

// Numerator is always the count of bit-exact zeros in the prunable set; the
// scope picks the denominator (prunable weights vs all parameters).
inline ExactRatio sparsity_prunable_scope(const ParamSet& params) {
  return extract_sparse_pattern(params).ratio_prunable();
}
inline ExactRatio sparsity_all_scope(const ParamSet& params) {
  return extract_sparse_pattern(params).ratio_all();
}

namespace detail {

inline std::pair<double, double> sparsity_pair(const ParamSet& params) {
  int64_t zeros = 0, prunable = 0;
  for (const auto& e : params.entries()) {
    if (!e.prunable) continue;
    prunable += e.value.numel();
    for (int64_t i = 0; i < e.value.numel(); ++i) {
      if (e.value[i] == 0.0) ++zeros;
    }
  }
  int64_t total = params.total_count();
  double p = prunable > 0 ? static_cast<double>(zeros) / static_cast<double>(prunable) : 0.0;
  double a = total > 0 ? static_cast<double>(zeros) / static_cast<double>(total) : 0.0;
  return {p, a};
}

inline void zero_masked_coordinates(ParamSet& target, const SparsePattern& pattern) {
  for (const auto& tp : pattern.tensors) {
    Tensor& t = target.value(tp.name);
    for (int64_t idx : tp.indices) t[idx] = 0.0;
  }
}

inline void verify_pattern_holds(const ParamSet& params, const SparsePattern& pattern,
                                 const std::string& where) {
  for (const auto& tp : pattern.tensors) {
    const Tensor& t = params.value(tp.name);
    for (int64_t idx : tp.indices) {
      if (t[idx] != 0.0) {
        throw InvariantBreach(where + ": sparse pattern violated at '" + tp.name + "'[" +
                              std::to_string(idx) + "]");
      }
    }
  }
}

}  // namespace detail

enum class UpdateRule { adamw, adamw_prox, l1_subgradient };

using StepObserver = std::function<void(int64_t step, const ParamSet& params)>;

struct TrainLoopConfig {
  int64_t steps = 0;
  int64_t batch_size = 16;
  double mask_prob = 0.15;
  uint64_t stream_seed = 0;  // identifies the batch stream
  int64_t step_offset = 0;   // continues a stream across phases
  std::string phase = "pretrain";
  bool record_divergence = false;  // penalty baseline: log and stop, don't throw
};

// Shared pre-training-objective loop used by plain pre-training, RPP inner
// iterations, NIP retraining and the penalty baseline. Batches depend only
// on (stream_seed, step_offset + i), so two runs over the same stream see
// identical data regardless of the update rule.
inline void run_pretrain_steps(const ModelConfig& cfg, ParamSet& params, const CorpusStore& corpus,
                               OptimizerState& opt, UpdateRule rule, ReweightState* rw,
                               double subgradient_gamma, const SparsePattern* mask, RunReport& report,
                               const TrainLoopConfig& loop, const StepObserver& observer = nullptr) {
  if ((rule == UpdateRule::adamw_prox || rule == UpdateRule::l1_subgradient) && rw == nullptr) {
    throw RuntimeFailure("train loop: update rule needs a reweight state");
  }
  for (int64_t i = 0; i < loop.steps; ++i) {
    int64_t global = loop.step_offset + i;
    MaskedBatch batch =
        make_pretrain_batch(corpus, cfg, loop.batch_size, loop.mask_prob, mix_seed(loop.stream_seed, static_cast<uint64_t>(global)));
    PretrainMetrics metrics;
    try {
      PretrainGraph pg = build_pretrain_graph(cfg, batch);
      Evaluation eval = evaluate_graph(pg.graph, params);
      metrics = pretrain_metrics(pg, eval, batch);
      ParamSet grads = backprop(pg.graph, eval, pg.loss, params);
      if (mask) {
        detail::zero_masked_coordinates(grads, *mask);
      }
      switch (rule) {
        case UpdateRule::adamw:
          adamw_step(opt, params, grads);
          break;
        case UpdateRule::adamw_prox:
          adamw_prox_step(opt, params, grads, *rw);
          break;
        case UpdateRule::l1_subgradient:
          l1_subgradient_step(opt, params, grads, subgradient_gamma, *rw);
          break;
      }
    } catch (const RuntimeFailure& e) {
      if (loop.record_divergence) {
        report.warnings.push_back(loop.phase + " diverged at step " + std::to_string(global) + ": " +
                                  e.what());
        return;
      }
      throw RuntimeFailure(loop.phase + " aborted at step " + std::to_string(global) + ": " + e.what());
    }
    if (mask) {
      detail::zero_masked_coordinates(params, *mask);
    }
    auto [sp, sa] = detail::sparsity_pair(params);
    MetricRow row;
    row.step = global;
    row.phase = loop.phase;
    row.loss = metrics.loss;
    row.mlm_acc = metrics.mlm_accuracy;
    row.nsp_acc = metrics.nsp_accuracy;
    row.sparsity_prunable = sp;
    row.sparsity_all = sa;
    report.rows.push_back(std::move(row));
    if (observer) observer(global, params);
  }
  auto [sp, sa] = detail::sparsity_pair(params);
  report.phase_final_ratio[loop.phase] = sp;
}

struct OptimHyper {
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
  int64_t warmup_steps = 0;
};

inline OptimizerState make_optimizer(const ParamSet& params, const OptimHyper& hyper,
                                     int64_t total_steps) {
  ScheduleConfig sched{std::min(hyper.warmup_steps, total_steps), std::max<int64_t>(total_steps, 1)};
  return OptimizerState::init(params, hyper.lr, hyper.weight_decay, sched, hyper.beta1, hyper.beta2,
                              hyper.eps);
}

struct FinetuneResult {
  ParamSet model;
  ParamSet head;
  RunReport report;
  double eval_accuracy = 0.0;
  double eval_loss = 0.0;
};

// Fixed-mask task fine-tuning: masked coordinates get zero gradients and are
// re-zeroed after every step; everything else (surviving weights and the
// head) trains freely. The pattern is re-verified before returning.
inline FinetuneResult finetune_with_mask(const ModelConfig& cfg, const ParamSet& model,
                                         const SparsePattern& pattern, const ParamSet& head,
                                         const LabeledBatch& store, int64_t train_pool, int64_t steps,
                                         int64_t batch_size, const OptimHyper& hyper,
                                         uint64_t stream_seed) {
  if (steps < 1) throw ConfigError("finetune: steps must be >= 1");
  if (train_pool <= 0 || train_pool > store.batch) throw ConfigError("finetune: bad train pool");
  ParamSet merged = merge_params(model, head);
  detail::verify_pattern_holds(merged, pattern, "finetune entry");
  OptimizerState opt = make_optimizer(merged, hyper, steps);
  FinetuneResult result;

  for (int64_t i = 0; i < steps; ++i) {
    LabeledBatch batch = sample_batch(store, train_pool, batch_size, mix_seed(stream_seed, static_cast<uint64_t>(i)));
    DownstreamGraph dg = build_downstream_graph(cfg, batch);
    Evaluation eval;
    try {
      eval = evaluate_graph(dg.graph, merged);
    } catch (const RuntimeFailure& e) {
      throw RuntimeFailure("finetune aborted at step " + std::to_string(i) + ": " + e.what());
    }
    DownstreamMetrics metrics = downstream_metrics(dg, eval, batch);
    ParamSet grads = backprop(dg.graph, eval, dg.loss, merged);
    detail::zero_masked_coordinates(grads, pattern);
    adamw_step(opt, merged, grads);
    detail::zero_masked_coordinates(merged, pattern);

    auto [sp, sa] = detail::sparsity_pair(merged);
    MetricRow row;
    row.step = i;
    row.phase = "finetune";
    row.task = store.task;
    row.loss = metrics.loss;
    row.task_acc = metrics.accuracy;
    row.sparsity_prunable = sp;
    row.sparsity_all = sa;
    result.report.rows.push_back(std::move(row));
  }

  detail::verify_pattern_holds(merged, pattern, "finetune exit");

  // Held-out evaluation over the remaining store rows.
  if (train_pool < store.batch) {
    LabeledBatch eval_batch = slice_batch(store, train_pool, store.batch - train_pool);
    DownstreamGraph dg = build_downstream_graph(cfg, eval_batch);
    Evaluation eval = evaluate_graph(dg.graph, merged);
    DownstreamMetrics metrics = downstream_metrics(dg, eval, eval_batch);
    result.eval_accuracy = metrics.accuracy;
    result.eval_loss = metrics.loss;
    MetricRow row;
    row.step = steps;
    row.phase = "finetune-eval";
    row.task = store.task;
    row.loss = metrics.loss;
    row.task_acc = metrics.accuracy;
    auto [sp, sa] = detail::sparsity_pair(merged);
    row.sparsity_prunable = sp;
    row.sparsity_all = sa;
    result.report.rows.push_back(std::move(row));
  }

  auto split = split_params(merged, "task.");
  result.model = std::move(split.first);
  result.head = std::move(split.second);
  auto [sp, sa] = detail::sparsity_pair(result.model);
  result.report.phase_final_ratio["finetune:" + store.task] = sp;
  return result;
}

// --- NIP: progressive hard-threshold pruning with fixed-mask retraining ---

struct PruneSchedule {
  double delta_p = 0.1;  // progressive prune ratio per iteration
  int64_t iterations = 9;
  int64_t retrain_steps = 100;
  OptimHyper retrain;
  int64_t batch_size = 16;
  double mask_prob = 0.15;
  PruneScope scope = PruneScope::global;

  void validate() const {
    if (!(delta_p > 0.0 && delta_p <= 1.0)) throw ConfigError("nip: need 0 < delta_p <= 1");
    if (iterations < 1) throw ConfigError("nip: iterations must be >= 1");
    if (static_cast<double>(iterations) * delta_p > 1.0 + 1e-12) {
      throw ConfigError("nip: iterations * delta_p must not exceed 1");
    }
    if (retrain_steps < 1) throw ConfigError("nip: retrain steps must be >= 1");
  }
};

struct NipIteration {
  ParamSet params;
  SparsePattern pattern;
  RunReport report;
};

inline std::vector<NipIteration> nip_run(const ModelConfig& cfg, const ParamSet& init,
                                         const PruneSchedule& schedule, const CorpusStore& corpus,
                                         uint64_t stream_seed) {
  schedule.validate();
  ParamSet params = init;
  std::vector<NipIteration> out;
  SparsePattern prev;
  for (int64_t t = 1; t <= schedule.iterations; ++t) {
    double pt = static_cast<double>(t) * schedule.delta_p;
    SparsePattern pattern = hard_threshold_prune(params, std::min(pt, 1.0), schedule.scope);
    apply_pattern(params, pattern);
    if (t > 1 && !prev.subset_of(pattern)) {
      throw InvariantBreach("nip: pattern at iteration " + std::to_string(t) +
                            " does not contain the previous one");
    }

    RunReport report;
    OptimizerState opt = make_optimizer(params, schedule.retrain, schedule.retrain_steps);
    TrainLoopConfig loop;
    loop.steps = schedule.retrain_steps;
    loop.batch_size = schedule.batch_size;
    loop.mask_prob = schedule.mask_prob;
    loop.stream_seed = stream_seed;
    loop.step_offset = (t - 1) * schedule.retrain_steps;
    loop.phase = "nip-retrain";
    run_pretrain_steps(cfg, params, corpus, opt, UpdateRule::adamw, nullptr, 0.0, &pattern, report, loop);
    detail::verify_pattern_holds(params, pattern, "nip iteration " + std::to_string(t));
    report.phase_final_ratio["nip-t" + std::to_string(t)] = pattern.ratio_prunable().value();

    out.push_back(NipIteration{params, pattern, std::move(report)});
    prev = std::move(pattern);
  }
  return out;
}

// --- RPP: reweighted l1 outer loop with proximal AdamW inner loop ---

struct RppConfig {
  double gamma = 1e-2;
  int64_t outer_iters = 6;  // T
  int64_t inner_steps = 100;
  double epsilon = 1e-9;  // reweight stabilizer
  ExponentMode exponent_mode = ExponentMode::paper;
  double trim_target = -1.0;  // < 0 disables the top-up
  OptimHyper optim;
  int64_t batch_size = 16;
  double mask_prob = 0.15;

  void validate() const {
    if (gamma < 0.0) throw ConfigError("rpp: gamma must be nonnegative");
    if (outer_iters < 1) throw ConfigError("rpp: outer iterations must be >= 1");
    if (inner_steps < 1) throw ConfigError("rpp: inner steps must be >= 1");
    if (!(epsilon > 0.0)) throw ConfigError("rpp: epsilon must be positive");
    if (trim_target > 1.0) throw ConfigError("rpp: trim target must be <= 1");
  }
};

struct RppResult {
  ParamSet params;
  SparsePattern pattern;
  RunReport report;
  ReweightState reweight;
};

// One continuous proximal training run: the optimizer state and the batch
// stream carry across outer iterations; only the alpha factors change at
// iteration boundaries. Weights may revive while training; the pattern is
// whatever is exactly zero at exit. No retraining happens here.
inline RppResult rpp_run(const ModelConfig& cfg, const ParamSet& init, const RppConfig& rpp,
                         const CorpusStore& corpus, uint64_t stream_seed,
                         const StepObserver& observer = nullptr) {
  rpp.validate();
  RppResult result;
  result.params = init;
  ReweightState rw = ReweightState::init(result.params, rpp.gamma, rpp.epsilon, rpp.exponent_mode);
  int64_t total = rpp.outer_iters * rpp.inner_steps;
  OptimizerState opt = make_optimizer(result.params, rpp.optim, total);

  for (int64_t t = 1; t <= rpp.outer_iters; ++t) {
    TrainLoopConfig loop;
    loop.steps = rpp.inner_steps;
    loop.batch_size = rpp.batch_size;
    loop.mask_prob = rpp.mask_prob;
    loop.stream_seed = stream_seed;
    loop.step_offset = (t - 1) * rpp.inner_steps;
    loop.phase = "rpp";
    run_pretrain_steps(cfg, result.params, corpus, opt, UpdateRule::adamw_prox, &rw, 0.0, nullptr,
                       result.report, loop, observer);
    rw.outer_iter = t;
    reweight_update(result.params, rw);
  }
  result.reweight = rw;

  result.pattern = extract_sparse_pattern(result.params);
  double emergent = result.pattern.ratio_prunable().value();
  result.report.phase_final_ratio["rpp-emergent"] = emergent;

  if (rpp.trim_target >= 0.0) {
    if (rpp.trim_target >= emergent) {
      result.pattern = hard_threshold_prune(result.params, rpp.trim_target, PruneScope::global);
      apply_pattern(result.params, result.pattern);
      result.report.trimmed = true;
      result.report.warnings.push_back("trim-to-ratio top-up applied: emergent " +
                                       std::to_string(emergent) + " -> target " +
                                       std::to_string(rpp.trim_target));
      result.report.phase_final_ratio["rpp-trimmed"] = result.pattern.ratio_prunable().value();
    } else {
      result.report.warnings.push_back("trim target " + std::to_string(rpp.trim_target) +
                                       " below emergent ratio " + std::to_string(emergent) +
                                       "; top-up skipped");
    }
  }
  return result;
}

// --- Appendix baseline: direct l1 subgradient through the optimizer ---

struct PenaltyResult {
  ParamSet params;
  RunReport report;
};

// Trains with the subgradient update and, from the same initial point over
// the same batch stream, a proximal reference run; the report interleaves
// both loss curves step-for-step ("penalty" vs "prox-ref" phases).
inline PenaltyResult penalty_baseline_run(const ModelConfig& cfg, const ParamSet& init, double gamma,
                                          int64_t steps, const CorpusStore& corpus,
                                          const OptimHyper& hyper, int64_t batch_size, double mask_prob,
                                          uint64_t stream_seed) {
  if (steps < 1) throw ConfigError("penalty baseline: steps must be >= 1");
  PenaltyResult result;
  result.params = init;
  {
    ReweightState rw = ReweightState::init(result.params, gamma);
    OptimizerState opt = make_optimizer(result.params, hyper, steps);
    TrainLoopConfig loop;
    loop.steps = steps;
    loop.batch_size = batch_size;
    loop.mask_prob = mask_prob;
    loop.stream_seed = stream_seed;
    loop.phase = "penalty";
    loop.record_divergence = true;
    run_pretrain_steps(cfg, result.params, corpus, opt, UpdateRule::l1_subgradient, &rw, gamma, nullptr,
                       result.report, loop);
  }
  {
    ParamSet ref = init;
    ReweightState rw = ReweightState::init(ref, gamma);
    OptimizerState opt = make_optimizer(ref, hyper, steps);
    TrainLoopConfig loop;
    loop.steps = steps;
    loop.batch_size = batch_size;
    loop.mask_prob = mask_prob;
    loop.stream_seed = stream_seed;
    loop.phase = "prox-ref";
    RunReport ref_report;
    run_pretrain_steps(cfg, ref, corpus, opt, UpdateRule::adamw_prox, &rw, 0.0, nullptr, ref_report, loop);
    result.report.merge(ref_report);
  }
  return result;
}

}  // namespace rpp

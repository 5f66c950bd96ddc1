// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "rpp/data.hpp"
#include "rpp/model.hpp"
#include "rpp/optim.hpp"
#include "rpp/pruning.hpp"
#include "test_util.hpp"

using namespace rpp;
using testutil::hash_params;

namespace {

ModelConfig tiny() {
  ModelConfig cfg;
  cfg.layers = 1;
  cfg.hidden = 16;
  cfg.heads = 2;
  cfg.vocab = 16;
  cfg.seq_len = 8;
  cfg.ffn = 32;
  cfg.seed = 5;
  return cfg;
}

OptimHyper quick_hyper() {
  OptimHyper h;
  h.lr = 1e-3;
  h.weight_decay = 0.0;
  h.warmup_steps = 2;
  return h;
}

}  // namespace

TEST_CASE("fresh random weights have an empty sparse pattern") {
  ParamSet p = build_model(tiny());
  SparsePattern pat = extract_sparse_pattern(p);
  CHECK(pat.zero_count() == 0);
  CHECK(pat.ratio_prunable().value() == 0.0);
  CHECK(pat.prunable_total == p.prunable_count());
  CHECK(pat.all_total == p.total_count());
}

TEST_CASE("hard threshold picks the two smallest magnitudes of four") {
  ParamSet p;
  p.add("w", Tensor({4}, {0.1, -0.2, 0.3, 0.05}), true);
  SparsePattern pat = hard_threshold_prune(p, 0.5);
  REQUIRE(pat.tensors.size() == 1);
  CHECK(pat.tensors[0].indices == std::vector<int64_t>{0, 3});  // 0.1 and 0.05
}

TEST_CASE("hard threshold at the ratio extremes") {
  ParamSet p = build_model(tiny());
  SparsePattern none = hard_threshold_prune(p, 0.0);
  CHECK(none.zero_count() == 0);
  SparsePattern full = hard_threshold_prune(p, 1.0);
  CHECK(full.zero_count() == p.prunable_count());
  CHECK(full.ratio_prunable().value() == 1.0);
  CHECK_THROWS_AS(hard_threshold_prune(p, 1.5), ConfigError);
}

TEST_CASE("global hard threshold matches an independent full-sort oracle") {
  Rng rng(2718);
  ParamSet p;
  p.add("za", testutil::random_tensor({40, 100}, rng, -1.0, 1.0), true);
  p.add("mb", testutil::random_tensor({50, 80}, rng, -1.0, 1.0), true);
  p.add("ac", testutil::random_tensor({25, 80}, rng, -1.0, 1.0), true);
  p.add("bias", testutil::random_tensor({100}, rng, -1.0, 1.0), false);
  double ratio = 0.37;

  SparsePattern pat = hard_threshold_prune(p, ratio, PruneScope::global);

  // Oracle: sort (magnitude, name, index) tuples lexicographically.
  std::vector<std::tuple<double, std::string, int64_t>> items;
  for (const auto& e : p.entries()) {
    if (!e.prunable) continue;
    for (int64_t i = 0; i < e.value.numel(); ++i) {
      items.emplace_back(std::fabs(e.value[i]), e.name, i);
    }
  }
  std::sort(items.begin(), items.end());
  int64_t keep = static_cast<int64_t>(ratio * static_cast<double>(items.size()));
  std::set<std::pair<std::string, int64_t>> expected;
  for (int64_t i = 0; i < keep; ++i) {
    expected.insert({std::get<1>(items[static_cast<size_t>(i)]), std::get<2>(items[static_cast<size_t>(i)])});
  }
  std::set<std::pair<std::string, int64_t>> got;
  for (const auto& tp : pat.tensors) {
    for (int64_t idx : tp.indices) got.insert({tp.name, idx});
  }
  CHECK(got == expected);
  CHECK(pat.zero_count() == keep);
}

TEST_CASE("per-tensor scope prunes each matrix to the target ratio") {
  Rng rng(3);
  ParamSet p;
  p.add("a", testutil::random_tensor({10, 10}, rng), true);
  p.add("b", testutil::random_tensor({20, 10}, rng), true);
  SparsePattern pat = hard_threshold_prune(p, 0.5, PruneScope::per_tensor);
  CHECK(pat.tensors[0].indices.size() == 50);
  CHECK(pat.tensors[1].indices.size() == 100);
}

TEST_CASE("apply_pattern: identity, idempotence, bounds") {
  ParamSet p = build_model(tiny());
  ParamSet orig = p;

  SparsePattern empty = extract_sparse_pattern(p);
  apply_pattern(p, empty);
  CHECK(p.bit_identical(orig));

  SparsePattern half = hard_threshold_prune(p, 0.5);
  apply_pattern(p, half);
  ParamSet once = p;
  apply_pattern(p, half);
  CHECK(p.bit_identical(once));
  CHECK(extract_sparse_pattern(p).zero_count() >= half.zero_count());

  SparsePattern bad = half;
  bad.tensors[0].indices.push_back(1 << 20);
  CHECK_THROWS_AS(apply_pattern(p, bad), RuntimeFailure);
}

TEST_CASE("prox with a dominating gamma yields the full pattern") {
  ModelConfig cfg = tiny();
  ParamSet p = build_model(cfg);
  OptimizerState st = OptimizerState::init(p, 1e-3, 0.0, {1, 10});
  ReweightState rw = ReweightState::init(p, 1e3);
  adamw_prox_step(st, p, p.zeros_like(), rw);
  SparsePattern pat = extract_sparse_pattern(p);
  CHECK(pat.ratio_prunable().value() == 1.0);
}

TEST_CASE("sparsity after a 50 percent threshold is exactly floor(n/2)/n") {
  ParamSet p = build_model(tiny());
  SparsePattern pat = hard_threshold_prune(p, 0.5);
  apply_pattern(p, pat);
  ExactRatio r = sparsity_prunable_scope(p);
  int64_t n = p.prunable_count();
  CHECK(r.num == n / 2);
  CHECK(r.den == n);
  ExactRatio all = sparsity_all_scope(p);
  CHECK(all.num == r.num);
  CHECK(all.den == p.total_count());
  CHECK(all.value() < r.value());  // dilution by non-prunable parameters
}

TEST_CASE("fixed-mask fine-tuning keeps masked coordinates at exact zero") {
  ModelConfig cfg = tiny();
  ParamSet model = build_model(cfg);
  SparsePattern pattern = hard_threshold_prune(model, 0.5);
  apply_pattern(model, pattern);

  LabeledBatch store = gen_downstream_task(task::kMajority, 7, 96, cfg);
  ParamSet head = build_task_head(task::kMajority, 2, cfg.hidden, 9);
  FinetuneResult res =
      finetune_with_mask(cfg, model, pattern, head, store, 64, 500, 8, quick_hyper(), 77);

  for (const auto& tp : pattern.tensors) {
    const Tensor& t = res.model.value(tp.name);
    for (int64_t idx : tp.indices) {
      REQUIRE(t[idx] == 0.0);
    }
  }
  // Surviving weights did train.
  CHECK(!res.model.bit_identical(model));
  CHECK(static_cast<int64_t>(res.report.rows.size()) == 500 + 1);  // steps + eval row
}

TEST_CASE("fine-tuning with an empty pattern is ordinary training") {
  ModelConfig cfg = tiny();
  ParamSet model = build_model(cfg);
  SparsePattern empty = extract_sparse_pattern(model);
  REQUIRE(empty.zero_count() == 0);

  LabeledBatch store = gen_downstream_task(task::kParity, 8, 64, cfg);
  ParamSet head = build_task_head(task::kParity, 2, cfg.hidden, 10);
  FinetuneResult a = finetune_with_mask(cfg, model, empty, head, store, 48, 40, 8, quick_hyper(), 5);
  FinetuneResult b = finetune_with_mask(cfg, model, empty, head, store, 48, 40, 8, quick_hyper(), 5);
  CHECK(a.model.bit_identical(b.model));
  CHECK(a.head.bit_identical(b.head));
  CHECK(a.eval_accuracy == b.eval_accuracy);
}

TEST_CASE("nip schedule: ratios, nesting, and the per-iteration counts") {
  ModelConfig cfg = tiny();
  ParamSet init = build_model(cfg);
  CorpusStore corpus = gen_pretrain_corpus(3, 128, cfg);

  PruneSchedule sched;
  sched.delta_p = 0.1;
  sched.iterations = 9;
  sched.retrain_steps = 5;
  sched.retrain = quick_hyper();
  sched.batch_size = 4;
  auto iterations = nip_run(cfg, init, sched, corpus, 900);
  REQUIRE(iterations.size() == 9);

  int64_t n = init.prunable_count();
  for (size_t t = 1; t <= iterations.size(); ++t) {
    const auto& it = iterations[t - 1];
    int64_t expected = static_cast<int64_t>(0.1 * static_cast<double>(t) * static_cast<double>(n));
    CHECK(it.pattern.zero_count() == expected);
    double ratio = it.pattern.ratio_prunable().value();
    CHECK(std::fabs(ratio - 0.1 * static_cast<double>(t)) <= 1.0 / static_cast<double>(n));
    // Measured sparsity of the retrained weights matches the pattern.
    CHECK(extract_sparse_pattern(it.params).zero_count() == expected);
    if (t > 1) CHECK(iterations[t - 2].pattern.subset_of(it.pattern));
  }
  CHECK(std::fabs(iterations.back().pattern.ratio_prunable().value() - 0.9) <=
        1.0 / static_cast<double>(n));
}

TEST_CASE("nip rejects invalid schedules") {
  PruneSchedule bad;
  bad.delta_p = 0.2;
  bad.iterations = 6;  // 1.2 > 1
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad.delta_p = 0.0;
  bad.iterations = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("rpp with one outer iteration is plain l1 proximal training") {
  ModelConfig cfg = tiny();
  ParamSet init = build_model(cfg);
  CorpusStore corpus = gen_pretrain_corpus(5, 128, cfg);
  const int64_t steps = 30;
  const double gamma = 0.05;

  RppConfig rc;
  rc.gamma = gamma;
  rc.outer_iters = 1;
  rc.inner_steps = steps;
  rc.optim = quick_hyper();
  rc.batch_size = 4;
  std::vector<uint64_t> rpp_hashes;
  RppResult res = rpp_run(cfg, init, rc, corpus, 321,
                          [&](int64_t, const ParamSet& p) { rpp_hashes.push_back(hash_params(p)); });

  // Reference: a hand-rolled proximal loop with factors pinned at one.
  ParamSet params = init;
  OptimizerState opt = make_optimizer(params, rc.optim, steps);
  ReweightState rw = ReweightState::init(params, gamma);
  std::vector<uint64_t> ref_hashes;
  for (int64_t k = 0; k < steps; ++k) {
    MaskedBatch batch = make_pretrain_batch(corpus, cfg, 4, 0.15, mix_seed(321, static_cast<uint64_t>(k)));
    PretrainGraph pg = build_pretrain_graph(cfg, batch);
    Evaluation eval = evaluate_graph(pg.graph, params);
    ParamSet grads = backprop(pg.graph, eval, pg.loss, params);
    adamw_prox_step(opt, params, grads, rw);
    ref_hashes.push_back(hash_params(params));
  }
  CHECK(rpp_hashes == ref_hashes);
  CHECK(res.params.bit_identical(params));
}

TEST_CASE("rpp with gamma zero is plain adamw pre-training") {
  ModelConfig cfg = tiny();
  ParamSet init = build_model(cfg);
  CorpusStore corpus = gen_pretrain_corpus(6, 128, cfg);
  const int64_t inner = 10, outers = 3;

  RppConfig rc;
  rc.gamma = 0.0;
  rc.outer_iters = outers;
  rc.inner_steps = inner;
  rc.optim = quick_hyper();
  rc.batch_size = 4;
  std::vector<uint64_t> rpp_hashes;
  RppResult res = rpp_run(cfg, init, rc, corpus, 555,
                          [&](int64_t, const ParamSet& p) { rpp_hashes.push_back(hash_params(p)); });
  CHECK(res.pattern.zero_count() == 0);

  ParamSet params = init;
  OptimizerState opt = make_optimizer(params, rc.optim, inner * outers);
  std::vector<uint64_t> ref_hashes;
  for (int64_t k = 0; k < inner * outers; ++k) {
    MaskedBatch batch = make_pretrain_batch(corpus, cfg, 4, 0.15, mix_seed(555, static_cast<uint64_t>(k)));
    PretrainGraph pg = build_pretrain_graph(cfg, batch);
    Evaluation eval = evaluate_graph(pg.graph, params);
    ParamSet grads = backprop(pg.graph, eval, pg.loss, params);
    adamw_step(opt, params, grads);
    ref_hashes.push_back(hash_params(params));
  }
  CHECK(rpp_hashes == ref_hashes);
  CHECK(res.params.bit_identical(params));
}

TEST_CASE("rpp trim-to-ratio tops up to the exact target and is flagged") {
  ModelConfig cfg = tiny();
  ParamSet init = build_model(cfg);
  CorpusStore corpus = gen_pretrain_corpus(7, 128, cfg);

  RppConfig rc;
  rc.gamma = 1e-4;  // little emergent sparsity in a short run
  rc.outer_iters = 1;
  rc.inner_steps = 10;
  rc.trim_target = 0.5;
  rc.optim = quick_hyper();
  rc.batch_size = 4;
  RppResult res = rpp_run(cfg, init, rc, corpus, 11);
  CHECK(res.report.trimmed);
  int64_t n = init.prunable_count();
  CHECK(res.pattern.zero_count() == n / 2);
  CHECK(extract_sparse_pattern(res.params).zero_count() >= n / 2);
}

TEST_CASE("training divergence aborts with a diagnostic") {
  ModelConfig cfg = tiny();
  ParamSet init = build_model(cfg);
  CorpusStore corpus = gen_pretrain_corpus(8, 64, cfg);

  OptimHyper insane;
  insane.lr = 1e150;  // guarantees non-finite values within a couple of steps
  insane.warmup_steps = 0;
  ParamSet params = init;
  OptimizerState opt = make_optimizer(params, insane, 20);
  RunReport report;
  TrainLoopConfig loop;
  loop.steps = 20;
  loop.batch_size = 4;
  loop.stream_seed = 1;
  loop.phase = "pretrain";
  try {
    run_pretrain_steps(cfg, params, corpus, opt, UpdateRule::adamw, nullptr, 0.0, nullptr, report, loop);
    FAIL("expected divergence");
  } catch (const RuntimeFailure& e) {
    CHECK(std::string(e.what()).find("aborted at step") != std::string::npos);
  }
}

TEST_CASE("penalty baseline with gamma zero matches plain adamw loss curves") {
  ModelConfig cfg = tiny();
  ParamSet init = build_model(cfg);
  CorpusStore corpus = gen_pretrain_corpus(9, 128, cfg);
  const int64_t steps = 15;

  PenaltyResult res = penalty_baseline_run(cfg, init, 0.0, steps, corpus, quick_hyper(), 4, 0.15, 77);

  ParamSet params = init;
  OptimizerState opt = make_optimizer(params, quick_hyper(), steps);
  std::vector<double> plain_losses;
  for (int64_t k = 0; k < steps; ++k) {
    MaskedBatch batch = make_pretrain_batch(corpus, cfg, 4, 0.15, mix_seed(77, static_cast<uint64_t>(k)));
    PretrainGraph pg = build_pretrain_graph(cfg, batch);
    Evaluation eval = evaluate_graph(pg.graph, params);
    plain_losses.push_back(eval.at(pg.loss)[0]);
    ParamSet grads = backprop(pg.graph, eval, pg.loss, params);
    adamw_step(opt, params, grads);
  }

  std::vector<double> penalty_losses, prox_losses;
  for (const auto& row : res.report.rows) {
    if (row.phase == "penalty") penalty_losses.push_back(*row.loss);
    if (row.phase == "prox-ref") prox_losses.push_back(*row.loss);
  }
  REQUIRE(penalty_losses.size() == static_cast<size_t>(steps));
  REQUIRE(prox_losses.size() == static_cast<size_t>(steps));
  for (int64_t k = 0; k < steps; ++k) {
    CHECK(std::bit_cast<uint64_t>(penalty_losses[static_cast<size_t>(k)]) ==
          std::bit_cast<uint64_t>(plain_losses[static_cast<size_t>(k)]));
    CHECK(std::bit_cast<uint64_t>(prox_losses[static_cast<size_t>(k)]) ==
          std::bit_cast<uint64_t>(plain_losses[static_cast<size_t>(k)]));
  }
}

TEST_CASE("penalty baseline emits aligned curves and creates no exact zeros") {
  ModelConfig cfg = tiny();
  ParamSet init = build_model(cfg);
  CorpusStore corpus = gen_pretrain_corpus(10, 128, cfg);
  const int64_t steps = 25;

  PenaltyResult res = penalty_baseline_run(cfg, init, 0.05, steps, corpus, quick_hyper(), 4, 0.15, 31);
  int64_t penalty_rows = 0, prox_rows = 0;
  for (const auto& row : res.report.rows) {
    if (row.phase == "penalty") {
      CHECK(row.sparsity_prunable == 0.0);  // subgradient path never zeroes
      ++penalty_rows;
    }
    if (row.phase == "prox-ref") ++prox_rows;
  }
  CHECK(penalty_rows == steps);
  CHECK(prox_rows == steps);
  CHECK(extract_sparse_pattern(res.params).zero_count() == 0);
}

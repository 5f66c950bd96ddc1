// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <bit>
#include <cmath>
#include <vector>

#include "rpp/optim.hpp"
#include "rpp/params.hpp"
#include "rpp/rng.hpp"
#include "prox_oracle.hpp"
#include "test_util.hpp"

using namespace rpp;
using testutil::prox_grid_search;
using testutil::prox_objective;

namespace {

ParamSet single_weight(double w, bool prunable = true) {
  ParamSet p;
  p.add("w", Tensor({1}, {w}), prunable);
  return p;
}

// One prunable matrix plus one non-prunable bias, same as the model layout.
ParamSet mixed_set(Rng& rng) {
  ParamSet p;
  p.add("mat", testutil::random_tensor({4, 4}, rng, -1.0, 1.0), true);
  p.add("bias", testutil::random_tensor({4}, rng, 0.5, 1.0), false);
  return p;
}

}  // namespace

TEST_CASE("prox closed form: documented branch examples") {
  Tensor ones = Tensor::full({1}, 1.0);

  SECTION("shrink branch") {
    Tensor a({1}, {2.0});
    Tensor w = prox_rw_l1(a, 0.1, 1.0, ones);
    CHECK(w[0] == Catch::Approx(1.9).epsilon(1e-14));
  }
  SECTION("zero branch is a bit-exact zero") {
    Tensor a({1}, {0.05});
    Tensor w = prox_rw_l1(a, 0.1, 1.0, ones);
    CHECK(w[0] == 0.0);
    CHECK(!std::signbit(w[0]));
    CHECK(std::bit_cast<uint64_t>(w[0]) == 0ull);
  }
  SECTION("zero input maps to zero") {
    Tensor a({1}, {0.0});
    CHECK(prox_rw_l1(a, 0.1, 1.0, ones)[0] == 0.0);
  }
  SECTION("gamma zero is the exact identity") {
    Tensor a({1}, {-0.738219});
    Tensor w = prox_rw_l1(a, 0.1, 0.0, ones);
    CHECK(std::bit_cast<uint64_t>(w[0]) == std::bit_cast<uint64_t>(a[0]));
  }
  SECTION("non-finite input fails") {
    Tensor a({1}, {std::numeric_limits<double>::infinity()});
    CHECK_THROWS_AS(prox_rw_l1(a, 0.1, 1.0, ones), RuntimeFailure);
  }
}

TEST_CASE("prox matches the grid-search minimizer on random scalars") {
  Rng rng(4242);
  for (int trial = 0; trial < 1000; ++trial) {
    double a = rng.log_uniform(1e-3, 3.0) * (rng.next_double() < 0.5 ? -1.0 : 1.0);
    double step = rng.log_uniform(1e-3, 1.0);
    double gamma = rng.log_uniform(1e-4, 1.0);
    double alpha = rng.log_uniform(1e-2, 1e2);
    double got = prox_rw_l1_scalar(a, step, gamma, alpha);
    double want = prox_grid_search(a, step, gamma, alpha);
    CHECK(std::fabs(got - want) < 1e-5);
  }
}

TEST_CASE("prox is nonexpansive, shrinks magnitude, keeps sign") {
  Rng rng(555);
  for (int trial = 0; trial < 2000; ++trial) {
    double step = rng.log_uniform(1e-3, 1.0);
    double gamma = rng.log_uniform(1e-4, 1.0);
    double alpha = rng.log_uniform(1e-2, 1e2);
    double a = rng.uniform(-3.0, 3.0);
    double b = rng.uniform(-3.0, 3.0);
    double pa = prox_rw_l1_scalar(a, step, gamma, alpha);
    double pb = prox_rw_l1_scalar(b, step, gamma, alpha);
    CHECK(std::fabs(pa - pb) <= std::fabs(a - b) + 1e-12);
    CHECK(std::fabs(pa) <= std::fabs(a));
    if (pa != 0.0) CHECK(std::signbit(pa) == std::signbit(a));
  }
}

TEST_CASE("prox output is a local minimum of the objective") {
  Rng rng(77123);
  for (int trial = 0; trial < 200; ++trial) {
    double a = rng.uniform(-2.0, 2.0);
    double step = rng.log_uniform(1e-3, 1.0);
    double gamma = rng.log_uniform(1e-4, 1.0);
    double alpha = rng.log_uniform(1e-2, 1e2);
    double w = prox_rw_l1_scalar(a, step, gamma, alpha);
    double at_w = prox_objective(w, a, step, gamma, alpha);
    for (int k = 0; k < 10; ++k) {
      double pert = w + rng.uniform(-0.5, 0.5);
      double at_pert = prox_objective(pert, a, step, gamma, alpha);
      CHECK(at_w <= at_pert + 1e-12 * std::max(1.0, std::fabs(at_pert)));
    }
  }
}

TEST_CASE("adamw first step matches a hand trace of the update rule") {
  // k=1, w=1, g=1, lr=0.001, no decay, schedule pinned at 1.
  ParamSet p = single_weight(1.0);
  OptimizerState st = OptimizerState::init(p, 0.001, 0.0, {1, 1000000});
  ParamSet g = p.zeros_like();
  g.value("w")[0] = 1.0;
  adamw_step(st, p, g);

  CHECK(st.m[0][0] == Catch::Approx(0.1).epsilon(1e-15));
  CHECK(st.v[0][0] == Catch::Approx(0.001).epsilon(1e-15));
  double mhat = 0.1 / (1.0 - 0.9);
  double vhat = 0.001 / (1.0 - 0.999);
  CHECK(mhat == Catch::Approx(1.0).epsilon(1e-12));
  CHECK(vhat == Catch::Approx(1.0).epsilon(1e-12));
  double expected = 1.0 - 0.001 * mhat / (std::sqrt(vhat) + 1e-6);
  CHECK(p.value("w")[0] == Catch::Approx(expected).epsilon(1e-15));
  CHECK(p.value("w")[0] == Catch::Approx(0.999000001).epsilon(1e-8));
}

TEST_CASE("adamw with zero gradients applies pure decoupled decay") {
  ParamSet p = single_weight(1.0);
  OptimizerState st = OptimizerState::init(p, 0.001, 0.01, {1, 1000000});
  ParamSet g = p.zeros_like();
  adamw_step(st, p, g);
  CHECK(p.value("w")[0] == Catch::Approx(1.0 * (1.0 - 0.01)).epsilon(1e-15));
}

TEST_CASE("adamw ignores decay on non-prunable tensors") {
  Rng rng(3);
  ParamSet p = mixed_set(rng);
  ParamSet copy = p;
  OptimizerState st = OptimizerState::init(p, 0.001, 0.5, {1, 100});
  adamw_step(st, p, p.zeros_like());
  for (int64_t i = 0; i < 4; ++i) {
    CHECK(p.value("bias")[i] == copy.value("bias")[i]);  // untouched
    CHECK(p.value("mat")[i] != copy.value("mat")[i]);    // decayed
  }
}

TEST_CASE("adamw steps are deterministic") {
  Rng rng(17);
  ParamSet p1 = mixed_set(rng);
  ParamSet p2 = p1;
  OptimizerState s1 = OptimizerState::init(p1, 1e-3, 1e-4, {2, 50});
  OptimizerState s2 = OptimizerState::init(p2, 1e-3, 1e-4, {2, 50});
  Rng grng(18);
  for (int k = 0; k < 10; ++k) {
    ParamSet g = p1.zeros_like();
    for (size_t e = 0; e < g.size(); ++e) {
      for (int64_t i = 0; i < g.entry(e).value.numel(); ++i) {
        g.entry(e).value[i] = grng.uniform(-1.0, 1.0);
      }
    }
    adamw_step(s1, p1, g);
    adamw_step(s2, p2, g);
  }
  CHECK(p1.bit_identical(p2));
}

TEST_CASE("schedule multiplier: warmup, peak, decay midpoint, clamp") {
  ScheduleConfig cfg{100, 1100};
  CHECK(schedule_multiplier(0, cfg) == 0.0);
  CHECK(schedule_multiplier(100, cfg) == 1.0);
  CHECK(schedule_multiplier(600, cfg) == Catch::Approx(0.5).epsilon(1e-12));
  CHECK(schedule_multiplier(1100, cfg) == 0.0);
  bool clamped = false;
  CHECK(schedule_multiplier(2000, cfg, &clamped) == 0.0);
  CHECK(clamped);
  CHECK_THROWS_AS((ScheduleConfig{10, 5}.validate()), ConfigError);
}

TEST_CASE("reweight factors: documented values") {
  SECTION("candes mode at an exact zero") {
    ParamSet p = single_weight(0.0);
    ReweightState rw = ReweightState::init(p, 1.0, 0.001, ExponentMode::candes);
    rw.outer_iter = 1;
    reweight_update(p, rw);
    CHECK(rw.alpha[0][0] == Catch::Approx(1000.0).epsilon(1e-12));
  }
  SECTION("candes mode near one") {
    ParamSet p = single_weight(0.999);
    ReweightState rw = ReweightState::init(p, 1.0, 0.001, ExponentMode::candes);
    rw.outer_iter = 1;
    reweight_update(p, rw);
    CHECK(rw.alpha[0][0] == Catch::Approx(1.0).epsilon(1e-12));
  }
  SECTION("paper mode squares the magnitude at t=2") {
    ParamSet p = single_weight(0.1);
    ReweightState rw = ReweightState::init(p, 1.0, 0.0, ExponentMode::paper);
    rw.outer_iter = 2;
    reweight_update(p, rw);
    CHECK(rw.alpha[0][0] == Catch::Approx(100.0).epsilon(1e-12));
  }
  SECTION("factors start at one") {
    ParamSet p = single_weight(0.5);
    ReweightState rw = ReweightState::init(p, 1.0);
    CHECK(rw.alpha[0][0] == 1.0);
  }
}

TEST_CASE("reweighting is antitone in weight magnitude") {
  Rng rng(909);
  for (auto mode : {ExponentMode::candes, ExponentMode::paper}) {
    for (int64_t t = 1; t <= 3; ++t) {
      ParamSet p;
      p.add("w", testutil::random_tensor({32}, rng, -2.0, 2.0), true);
      ReweightState rw = ReweightState::init(p, 1.0, 1e-9, mode);
      rw.outer_iter = t;
      reweight_update(p, rw);
      const Tensor& w = p.value("w");
      const Tensor& a = rw.alpha[0];
      for (int64_t i = 0; i < 32; ++i) {
        for (int64_t j = 0; j < 32; ++j) {
          if (std::fabs(w[i]) < std::fabs(w[j])) CHECK(a[i] > a[j]);
        }
      }
    }
  }
}

TEST_CASE("adamw_prox with gamma zero is bit-identical to adamw") {
  Rng rng(31);
  ParamSet p1 = mixed_set(rng);
  ParamSet p2 = p1;
  OptimizerState s1 = OptimizerState::init(p1, 1e-3, 1e-4, {1, 100});
  OptimizerState s2 = OptimizerState::init(p2, 1e-3, 1e-4, {1, 100});
  ReweightState rw = ReweightState::init(p2, 0.0);
  Rng grng(32);
  for (int k = 0; k < 20; ++k) {
    ParamSet g = p1.zeros_like();
    for (size_t e = 0; e < g.size(); ++e) {
      for (int64_t i = 0; i < g.entry(e).value.numel(); ++i) {
        g.entry(e).value[i] = grng.uniform(-1.0, 1.0);
      }
    }
    adamw_step(s1, p1, g);
    adamw_prox_step(s2, p2, g, rw);
  }
  CHECK(p1.bit_identical(p2));
}

TEST_CASE("a dominating gamma zeroes prunable weights in one step, biases survive") {
  Rng rng(41);
  ParamSet p = mixed_set(rng);
  OptimizerState st = OptimizerState::init(p, 1e-3, 0.0, {1, 100});
  ReweightState rw = ReweightState::init(p, 1e3);
  adamw_prox_step(st, p, p.zeros_like(), rw);
  for (int64_t i = 0; i < p.value("mat").numel(); ++i) CHECK(p.value("mat")[i] == 0.0);
  for (int64_t i = 0; i < 4; ++i) CHECK(p.value("bias")[i] != 0.0);
}

TEST_CASE("adamw_prox composes the two documented operations") {
  ParamSet p1 = single_weight(0.8);
  ParamSet p2 = p1;
  double gamma = 0.01;
  OptimizerState s1 = OptimizerState::init(p1, 1e-2, 0.0, {1, 100});
  OptimizerState s2 = OptimizerState::init(p2, 1e-2, 0.0, {1, 100});
  ReweightState rw = ReweightState::init(p1, gamma);
  ParamSet g = p1.zeros_like();
  g.value("w")[0] = 0.3;

  adamw_prox_step(s1, p1, g, rw);

  double eta = adamw_step(s2, p2, g);
  Tensor proxed = prox_rw_l1(p2.value("w"), eta * s2.lr, gamma, rw.alpha[0]);
  CHECK(std::bit_cast<uint64_t>(p1.value("w")[0]) == std::bit_cast<uint64_t>(proxed[0]));
}

TEST_CASE("subgradient baseline: gamma zero reduces to adamw") {
  Rng rng(51);
  ParamSet p1 = mixed_set(rng);
  ParamSet p2 = p1;
  OptimizerState s1 = OptimizerState::init(p1, 1e-3, 1e-4, {1, 100});
  OptimizerState s2 = OptimizerState::init(p2, 1e-3, 1e-4, {1, 100});
  ReweightState rw = ReweightState::init(p2, 0.0);
  Rng grng(52);
  for (int k = 0; k < 10; ++k) {
    ParamSet g = p1.zeros_like();
    for (size_t e = 0; e < g.size(); ++e) {
      for (int64_t i = 0; i < g.entry(e).value.numel(); ++i) {
        g.entry(e).value[i] = grng.uniform(-1.0, 1.0);
      }
    }
    adamw_step(s1, p1, g);
    l1_subgradient_step(s2, p2, g, 0.0, rw);
  }
  CHECK(p1.bit_identical(p2));
}

TEST_CASE("subgradient baseline pushes a positive weight downward") {
  ParamSet p = single_weight(0.5);
  OptimizerState st = OptimizerState::init(p, 1e-3, 0.0, {1, 100});
  ReweightState rw = ReweightState::init(p, 0.1);
  l1_subgradient_step(st, p, p.zeros_like(), 0.1, rw);
  CHECK(p.value("w")[0] < 0.5);
}

TEST_CASE("subgradient baseline never lands on bit-exact zeros") {
  // Quadratic pull toward random targets plus the l1 penalty, 1000 steps.
  Rng rng(61);
  ParamSet p;
  p.add("w", testutil::random_tensor({100}, rng, -1.0, 1.0), true);
  std::vector<double> target(100);
  for (auto& t : target) t = rng.uniform(-1.0, 1.0);
  OptimizerState st = OptimizerState::init(p, 1e-3, 0.0, {10, 1000});
  ReweightState rw = ReweightState::init(p, 0.01);
  int64_t zeros_seen = 0;
  for (int k = 0; k < 1000; ++k) {
    ParamSet g = p.zeros_like();
    for (int64_t i = 0; i < 100; ++i) g.value("w")[i] = p.value("w")[i] - target[i];
    l1_subgradient_step(st, p, g, 0.01, rw);
    for (int64_t i = 0; i < 100; ++i) {
      if (p.value("w")[i] == 0.0) ++zeros_seen;
    }
  }
  CHECK(zeros_seen == 0);
}

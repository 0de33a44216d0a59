#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <sstream>
#include <string>
#include <vector>

#include "ba2/budget.hpp"
#include "ba2/datasets.hpp"
#include "ba2/net.hpp"

using namespace ba2;

namespace {

SwitchVector make_switches(const std::vector<float>& scores) {
  SwitchVector sv(static_cast<int>(scores.size()));
  sv.set_scores(scores);
  return sv;
}

// Minimal adapter carrying only what budget_penalty consumes.
DomainAdapter penalty_probe(const std::vector<std::vector<float>>& layer_scores,
                            const std::vector<std::uint8_t>& gated) {
  DomainAdapter a;
  for (const auto& s : layer_scores) a.switches.push_back(make_switches(s));
  a.gated = gated;
  return a;
}

ResidualCnnConfig micro_net() {
  ResidualCnnConfig cfg;
  cfg.input_h = 8;
  cfg.input_w = 8;
  cfg.input_c = 1;
  cfg.stage_channels = {4, 8};
  cfg.blocks_per_stage = 1;
  return cfg;
}

DomainData micro_domain(std::uint64_t seed) {
  Dataset ds = synth_dataset("gratings", seed, 96, 8, 8);
  return split_domain(ds, 64, 16, 16);
}

TrainConfig micro_cfg() {
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch = 16;
  cfg.seed = 42;
  return cfg;
}

std::vector<float> flatten_backbone(const Backbone& bb) {
  std::vector<float> all;
  for (const auto& k : bb.kernels) all.insert(all.end(), k.v.begin(), k.v.end());
  for (const auto& b : bb.bn) {
    all.insert(all.end(), b.gamma.begin(), b.gamma.end());
    all.insert(all.end(), b.beta.begin(), b.beta.end());
  }
  all.insert(all.end(), bb.head.w.begin(), bb.head.w.end());
  all.insert(all.end(), bb.head.b.begin(), bb.head.b.end());
  return all;
}

bool same_floats(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("budget_penalty: pooled and per-layer arithmetic") {
  // Global pool: one layer, switches 1,1,0,0 -> usage 0.5 against budget 0.25
  // scaled by lambda 2 gives penalty 0.5.
  DomainAdapter one = penalty_probe({{0.5f, 0.5f, -0.5f, 0.0f}}, {1});
  BudgetSpec g;
  g.beta = 0.25f;
  g.mode = ConstraintMode::Global;
  g.lambdas = {2.0};
  PenaltyResult pr = budget_penalty(one, g);
  REQUIRE(pr.theta_bar.size() == 1);
  CHECK(pr.theta_bar[0] == 0.5);
  REQUIRE(pr.violations.size() == 1);
  CHECK(pr.violations[0] == 0.25);
  CHECK(pr.penalty == 0.5);

  // Per-layer: usages 3/5 and 1/5 against budget 0.5 with unit multipliers.
  DomainAdapter two = penalty_probe({{1, 1, 1, -1, -1}, {1, -1, -1, -1, -1}}, {1, 1});
  BudgetSpec p;
  p.beta = 0.5f;
  p.mode = ConstraintMode::PerLayer;
  p.lambdas = {1.0, 1.0};
  PenaltyResult pp = budget_penalty(two, p);
  REQUIRE(pp.theta_bar.size() == 2);
  CHECK(pp.theta_bar[0] == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(pp.theta_bar[1] == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(pp.violations[0] == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(pp.violations[1] == doctest::Approx(-0.3).epsilon(1e-12));
  CHECK(pp.penalty == doctest::Approx(-0.2).epsilon(1e-12));

  // Ungated layers stay out of scope entirely.
  DomainAdapter mixed =
      penalty_probe({{1, 1, 1, 1}, {0.5f, 0.5f, -0.5f, 0.0f}}, {0, 1});
  BudgetSpec gm = g;
  PenaltyResult pm = budget_penalty(mixed, gm);
  CHECK(pm.theta_bar[0] == 0.5);  // the all-on first layer does not count

  // Global pooling weights layers by channel count, not uniformly.
  DomainAdapter wide =
      penalty_probe({{1, 1, 1, 1, 1, 1, -1, -1}, {1, -1}}, {1, 1});
  BudgetSpec gw;
  gw.beta = 0.5f;
  gw.mode = ConstraintMode::Global;
  gw.lambdas = {1.0};
  CHECK(budget_penalty(wide, gw).theta_bar[0] == 0.7);  // (6+1)/(8+2)

  // Arity mismatches are configuration errors.
  BudgetSpec bad = p;
  bad.lambdas = {1.0};
  CHECK_THROWS_AS(budget_penalty(two, bad), ConfigError);
  DomainAdapter none = penalty_probe({{1, 1}}, {0});
  CHECK_THROWS_AS(budget_penalty(none, g), ConfigError);
}

TEST_CASE("lambda_step: projected ascent") {
  BudgetSpec s;
  s.mode = ConstraintMode::Global;
  s.lambdas = {0.0};
  s.lambda_lr = 1.0;
  lambda_step(s, {0.3});
  CHECK(s.lambdas[0] == 0.3);

  s.lambdas = {0.1};
  lambda_step(s, {-0.1});
  CHECK(s.lambdas[0] == 0.0);  // clamped at zero

  // Nonnegativity under an arbitrary violation sequence.
  s.lambdas = {0.0};
  s.lambda_lr = 0.7;
  for (double v : {0.4, -1.0, 0.2, -0.05, -2.0, 0.9})
    lambda_step(s, {v});
  CHECK(s.lambdas[0] >= 0.0);

  // Monotone response: a larger violation never yields a smaller multiplier.
  BudgetSpec a, b;
  a.mode = b.mode = ConstraintMode::Global;
  a.lambdas = b.lambdas = {0.25};
  a.lambda_lr = b.lambda_lr = 0.5;
  lambda_step(a, {0.4});
  lambda_step(b, {0.1});
  CHECK(a.lambdas[0] >= b.lambdas[0]);

  CHECK_THROWS_AS(lambda_step(a, {0.1, 0.2}), ConfigError);
}

TEST_CASE("validate_budget rejects degenerate configurations") {
  auto make = [](float beta) {
    BudgetSpec s;
    s.beta = beta;
    s.mode = ConstraintMode::PerLayer;
    return s;
  };
  BudgetSpec ok = make(0.5f);
  validate_budget(ok, 3);
  CHECK(ok.lambdas == std::vector<double>(3, 0.0));  // filled with zeros

  BudgetSpec zero = make(0.0f);
  CHECK_THROWS_AS(validate_budget(zero, 3), ConfigError);
  BudgetSpec over = make(1.5f);
  CHECK_THROWS_AS(validate_budget(over, 3), ConfigError);

  BudgetSpec neg = make(0.5f);
  neg.lambdas = {0.0, -0.1, 0.0};
  CHECK_THROWS_AS(validate_budget(neg, 3), ConfigError);

  BudgetSpec arity = make(0.5f);
  arity.lambdas = {0.0, 0.0};
  CHECK_THROWS_AS(validate_budget(arity, 3), ConfigError);

  BudgetSpec glob = make(0.5f);
  glob.mode = ConstraintMode::Global;
  validate_budget(glob, 3);
  CHECK(glob.lambdas.size() == 1);

  BudgetSpec lr = make(0.5f);
  lr.lambda_lr = 0.0;
  CHECK_THROWS_AS(validate_budget(lr, 3), ConfigError);
}

TEST_CASE("budget_compliant: boundary is inclusive") {
  DomainAdapter a = penalty_probe({{1, 1, -1, -1}}, {1});  // usage exactly 0.5
  BudgetSpec s;
  s.mode = ConstraintMode::Global;
  s.lambdas = {0.0};
  s.beta = 0.5f;
  CHECK(budget_compliant(a, s));
  s.beta = 0.49f;
  CHECK_FALSE(budget_compliant(a, s));
  s.beta = 1.0f;
  CHECK(budget_compliant(a, s));
}

TEST_CASE("penalty gradient equals lambda over scope width (finite differences)") {
  // Under the identity straight-through rule the penalty is linear in each
  // relaxed score, so central differences on the relaxed surrogate are exact.
  auto relaxed_penalty = [](const std::vector<std::vector<double>>& scores,
                            const BudgetSpec& spec) {
    if (spec.mode == ConstraintMode::Global) {
      double on = 0.0, total = 0.0;
      for (const auto& l : scores) {
        for (double v : l) on += v;
        total += static_cast<double>(l.size());
      }
      return spec.lambdas[0] * (on / total - spec.beta);
    }
    double p = 0.0;
    for (std::size_t k = 0; k < scores.size(); ++k) {
      double m = 0.0;
      for (double v : scores[k]) m += v;
      p += spec.lambdas[k] * (m / static_cast<double>(scores[k].size()) - spec.beta);
    }
    return p;
  };

  std::vector<std::vector<double>> scores = {{0.4, -0.2, 0.9}, {0.1, -0.6, 0.5, 0.7}};

  BudgetSpec per;
  per.mode = ConstraintMode::PerLayer;
  per.beta = 0.5f;
  per.lambdas = {0.8, 1.7};
  for (std::size_t l = 0; l < scores.size(); ++l)
    for (std::size_t c = 0; c < scores[l].size(); ++c) {
      const double eps = 1e-4;
      auto hi = scores, lo = scores;
      hi[l][c] += eps;
      lo[l][c] -= eps;
      const double fd =
          (relaxed_penalty(hi, per) - relaxed_penalty(lo, per)) / (2 * eps);
      const double analytic = per.lambdas[l] / static_cast<double>(scores[l].size());
      CHECK(fd == doctest::Approx(analytic).epsilon(1e-9));
    }

  BudgetSpec glob;
  glob.mode = ConstraintMode::Global;
  glob.beta = 0.5f;
  glob.lambdas = {1.3};
  const double width = 3 + 4;
  for (std::size_t l = 0; l < scores.size(); ++l)
    for (std::size_t c = 0; c < scores[l].size(); ++c) {
      const double eps = 1e-4;
      auto hi = scores, lo = scores;
      hi[l][c] += eps;
      lo[l][c] -= eps;
      const double fd =
          (relaxed_penalty(hi, glob) - relaxed_penalty(lo, glob)) / (2 * eps);
      CHECK(fd == doctest::Approx(glob.lambdas[0] / width).epsilon(1e-9));
    }
}

TEST_CASE("train_domain: frozen backbone, trace replay, determinism") {
  const Backbone bb = make_backbone(micro_net(), 4, 9);
  const std::vector<float> before = flatten_backbone(bb);
  DomainData data = micro_domain(21);

  BudgetSpec spec;
  spec.beta = 0.5f;
  spec.mode = ConstraintMode::PerLayer;
  spec.lambda_lr = 0.05;
  TrainConfig cfg = micro_cfg();

  TrainResult r1 = train_domain(bb, data, spec, cfg);
  TrainResult r2 = train_domain(bb, data, spec, cfg);

  // The backbone is read-only to adapter training.
  CHECK(same_floats(flatten_backbone(bb), before));

  // Bitwise reproducibility: same seed, same trace, same adapter.
  CHECK(r1.trace.csv() == r2.trace.csv());
  CHECK(same_floats(snapshot_adapter(r1.adapter), snapshot_adapter(r2.adapter)));
  CHECK(r1.val_error == r2.val_error);

  // Trace geometry: 2 epochs x 4 batches, 5 gated layers per record.
  CHECK(r1.trace.scope_names ==
        std::vector<std::string>{"s0b0c1", "s0b0c2", "s1b0c1", "s1b0c2", "s1b0proj"});
  REQUIRE(r1.trace.records.size() == 8);
  for (std::size_t i = 0; i < r1.trace.records.size(); ++i) {
    const auto& rec = r1.trace.records[i];
    CHECK(rec.step == static_cast<int>(i));
    REQUIRE(rec.theta_bar.size() == 5);
    REQUIRE(rec.lambdas.size() == 5);
  }
  // All switches start on, so the first record sees full usage.
  for (double t : r1.trace.records[0].theta_bar) CHECK(t == 1.0);

  // The recorded multiplier sequence must replay exactly from the recorded
  // usages under the projected-ascent rule.
  std::vector<double> lam(5, 0.0);
  for (const auto& rec : r1.trace.records) {
    for (std::size_t k = 0; k < lam.size(); ++k) {
      lam[k] = std::max(0.0, lam[k] + spec.lambda_lr * (rec.theta_bar[k] - spec.beta));
      CHECK(rec.lambdas[k] == lam[k]);
    }
  }

  // CSV shape: header + one row per (record, scope).
  std::istringstream is(r1.trace.csv());
  std::string line;
  std::getline(is, line);
  CHECK(line == "step,layer,theta_bar,lambda,loss");
  int rows = 0;
  while (std::getline(is, line)) ++rows;
  CHECK(rows == 8 * 5);

  CHECK(r1.val_error >= 0.0);
  CHECK(r1.val_error <= 1.0);
}

TEST_CASE("train_domain: full budget never activates the constraint") {
  const Backbone bb = make_backbone(micro_net(), 4, 9);
  DomainData data = micro_domain(22);
  BudgetSpec spec;
  spec.beta = 1.0f;
  spec.mode = ConstraintMode::PerLayer;
  TrainConfig cfg = micro_cfg();

  TrainResult r = train_domain(bb, data, spec, cfg);
  CHECK_FALSE(r.constraint_violated);
  for (const auto& rec : r.trace.records) {
    for (double l : rec.lambdas) CHECK(l == 0.0);  // usage <= 1 always
    for (double t : rec.theta_bar) CHECK(t <= 1.0);
  }
}

TEST_CASE("train_domain: unreachable budget is reported, not hidden") {
  const Backbone bb = make_backbone(micro_net(), 4, 9);
  DomainData data = micro_domain(23);
  BudgetSpec spec;
  spec.beta = 0.02f;  // tighter than one switch per layer
  spec.mode = ConstraintMode::PerLayer;
  TrainConfig cfg = micro_cfg();
  cfg.epochs = 1;

  TrainResult r = train_domain(bb, data, spec, cfg);
  CHECK(r.constraint_violated);
  // The multiplier must have engaged (positive violations recorded).
  const auto& last = r.trace.records.back();
  bool any_positive = false;
  for (double l : last.lambdas) any_positive = any_positive || l > 0.0;
  CHECK(any_positive);

  BudgetSpec zero = spec;
  zero.beta = 0.0f;
  CHECK_THROWS_AS(train_domain(bb, data, zero, cfg), ConfigError);
}

TEST_CASE("train_domain: mismatched data dimensions fail fast") {
  const Backbone bb = make_backbone(micro_net(), 4, 9);
  Dataset ds = synth_dataset("rings", 3, 48, 16, 16);  // wrong spatial size
  DomainData dom = split_domain(ds, 32, 8, 8);
  BudgetSpec spec;
  spec.beta = 0.5f;
  CHECK_THROWS_AS(train_domain(bb, dom, spec, micro_cfg()), DataError);
}

TEST_CASE("train_backbone and finetune_domain learn the synthetic task") {
  DomainData data = micro_domain(31);
  TrainConfig cfg = micro_cfg();
  cfg.epochs = 4;
  Backbone bb = train_backbone(micro_net(), data, cfg);
  const double err = eval_error_backbone(bb, data.test);
  CHECK(err < 0.75);  // strictly better than the 0.75 chance floor

  // Fine-tuning from the pretrained trunk keeps the same architecture and
  // reports test error of the best epoch.
  DomainData other = [] {
    Dataset ds = synth_dataset("checkers", 8, 96, 8, 8);
    return split_domain(ds, 64, 16, 16);
  }();
  FinetuneResult ft = finetune_domain(bb, other, cfg);
  CHECK(ft.model.plan.hash() == bb.plan.hash());
  CHECK(ft.test_error >= 0.0);
  CHECK(ft.test_error <= 1.0);
  // The trunk moved: fine-tuning trains every parameter.
  CHECK_FALSE(same_floats(ft.model.kernels[0].v, bb.kernels[0].v));
}

TEST_CASE("joint training: shared trunk, per-budget adapters") {
  const Backbone bb = make_backbone(micro_net(), 4, 9);
  DomainData data = micro_domain(33);
  TrainConfig cfg = micro_cfg();

  BudgetSpec full, half;
  full.beta = 1.0f;
  half.beta = 0.5f;
  full.mode = half.mode = ConstraintMode::PerLayer;
  full.lambda_lr = half.lambda_lr = 0.05;

  CHECK_THROWS_AS(train_multi_budget_joint(bb, data, {full, full}, cfg), ConfigError);
  CHECK_THROWS_AS(train_multi_budget_joint(bb, data, {}, cfg), ConfigError);

  JointResult jr = train_multi_budget_joint(bb, data, {full, half}, cfg);
  REQUIRE(jr.per_budget.size() == 2);
  REQUIRE(jr.traces.size() == 2);
  REQUIRE(jr.violated.size() == 2);

  // The shared kernels trained (unlike adapter-only mode).
  CHECK_FALSE(same_floats(jr.model.kernels[0].v, bb.kernels[0].v));
  // The input backbone itself is untouched; joint mode works on a copy.
  CHECK(same_floats(flatten_backbone(bb), flatten_backbone(make_backbone(micro_net(), 4, 9))));

  // Per-budget traces ran in lockstep on the shared batches.
  CHECK(jr.traces[0].records.size() == jr.traces[1].records.size());

  // Reported flags agree with a recomputation against each budget.
  BudgetSpec fchk = full, hchk = half;
  validate_budget(fchk, 5);
  validate_budget(hchk, 5);
  CHECK(jr.violated[0] == !budget_compliant(jr.per_budget[0], fchk));
  CHECK(jr.violated[1] == !budget_compliant(jr.per_budget[1], hchk));

  // Determinism end to end.
  JointResult jr2 = train_multi_budget_joint(bb, data, {full, half}, cfg);
  CHECK(jr.traces[0].csv() == jr2.traces[0].csv());
  CHECK(jr.traces[1].csv() == jr2.traces[1].csv());
  CHECK(same_floats(flatten_backbone(jr.model), flatten_backbone(jr2.model)));
  CHECK(same_floats(snapshot_adapter(jr.per_budget[1]),
                    snapshot_adapter(jr2.per_budget[1])));
}

#include "ba2/budget.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

#include "ba2/ops.hpp"
#include "ba2/optim.hpp"

namespace ba2 {

namespace {

std::vector<std::size_t> gated_layers(const ArchPlan& plan) {
  std::vector<std::size_t> gl;
  for (std::size_t i = 0; i < plan.convs.size(); ++i)
    if (plan.convs[i].gated) gl.push_back(i);
  return gl;
}

void check_data(const DomainData& data, const ArchPlan& plan) {
  for (const Dataset* ds : {&data.train, &data.val, &data.test}) {
    if (ds->count() < 1) throw DataError("domain '" + data.name + "': empty split");
    if (ds->images.h != plan.cfg.input_h || ds->images.w != plan.cfg.input_w ||
        ds->images.c != plan.cfg.input_c)
      throw DataError("domain '" + data.name + "': images are " + ds->images.shape_str() +
                      ", the network expects " + std::to_string(plan.cfg.input_h) + "x" +
                      std::to_string(plan.cfg.input_w) + "x" +
                      std::to_string(plan.cfg.input_c));
    if (ds->classes != data.classes) throw DataError("split class count mismatch");
  }
  if (data.classes < 2) throw DataError("domain '" + data.name + "': need >= 2 classes");
}

Tensor4<float> gather_batch(const Dataset& ds, const std::vector<int>& order,
                            std::size_t from, std::size_t to, std::vector<int>& labels) {
  const int b = static_cast<int>(to - from);
  Tensor4<float> out(b, ds.images.h, ds.images.w, ds.images.c);
  labels.resize(static_cast<std::size_t>(b));
  const std::size_t plane =
      static_cast<std::size_t>(ds.images.h) * ds.images.w * ds.images.c;
  for (std::size_t i = from; i < to; ++i) {
    const int src = order[i];
    std::copy(ds.images.v.begin() + static_cast<std::ptrdiff_t>(src * plane),
              ds.images.v.begin() + static_cast<std::ptrdiff_t>((src + 1) * plane),
              out.v.begin() + static_cast<std::ptrdiff_t>((i - from) * plane));
    labels[i - from] = ds.labels[static_cast<std::size_t>(src)];
  }
  return out;
}

// Per-sample horizontal mirror with probability 1/2.
void augment_mirror_inplace(Tensor4<float>& batch, Rng& rng) {
  for (int n = 0; n < batch.n; ++n) {
    if (rng.uniform() >= 0.5) continue;
    for (int y = 0; y < batch.h; ++y)
      for (int x = 0; x < batch.w / 2; ++x)
        for (int c = 0; c < batch.c; ++c)
          std::swap(batch.at(n, y, x, c), batch.at(n, y, batch.w - 1 - x, c));
  }
}

int argmax_row(const Tensor4<float>& logits, int n) {
  int best = 0;
  for (int k = 1; k < logits.c; ++k)
    if (logits.at(n, 0, 0, k) > logits.at(n, 0, 0, best)) best = k;
  return best;
}

double error_from_logits(const Tensor4<float>& logits, const std::vector<int>& labels,
                         int offset, int& wrong) {
  for (int n = 0; n < logits.n; ++n)
    if (argmax_row(logits, n) != labels[static_cast<std::size_t>(offset + n)]) ++wrong;
  return 0.0;
}

constexpr int kEvalBatch = 64;

std::vector<int> identity_order(int n) {
  std::vector<int> o(static_cast<std::size_t>(n));
  std::iota(o.begin(), o.end(), 0);
  return o;
}

void append_csv_value(std::ostringstream& os, double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  os << buf;
}

}  // namespace

void validate_budget(BudgetSpec& spec, int gated_layers) {
  if (!(spec.beta > 0.0f) || spec.beta > 1.0f)
    throw ConfigError("budget: beta must be in (0, 1]; a zero budget admits no network");
  if (!(spec.lambda_lr > 0.0)) throw ConfigError("budget: lambda_lr must be > 0");
  const std::size_t want =
      spec.mode == ConstraintMode::Global ? 1u : static_cast<std::size_t>(gated_layers);
  if (spec.lambdas.empty()) spec.lambdas.assign(want, 0.0);
  if (spec.lambdas.size() != want)
    throw ConfigError("budget: expected " + std::to_string(want) + " lambda(s), got " +
                      std::to_string(spec.lambdas.size()));
  for (double l : spec.lambdas)
    if (l < 0.0 || !std::isfinite(l)) throw ConfigError("budget: lambdas must be >= 0");
}

void validate_train_config(const TrainConfig& cfg) {
  if (cfg.epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (cfg.batch < 1) throw ConfigError("train: batch must be >= 1");
  if (!(cfg.head_lr > 0.0) || !(cfg.adapter_lr > 0.0))
    throw ConfigError("train: learning rates must be > 0");
  if (cfg.head_momentum < 0.0 || cfg.head_momentum >= 1.0)
    throw ConfigError("train: momentum must be in [0, 1)");
  if (cfg.adam_beta1 < 0.0 || cfg.adam_beta1 >= 1.0 || cfg.adam_beta2 < 0.0 ||
      cfg.adam_beta2 >= 1.0 || !(cfg.adam_eps > 0.0))
    throw ConfigError("train: bad Adam parameters");
  if (!(cfg.decay_factor > 0.0) || cfg.decay_factor > 1.0)
    throw ConfigError("train: decay factor must be in (0, 1]");
  for (std::size_t i = 1; i < cfg.decay_epochs.size(); ++i)
    if (cfg.decay_epochs[i] <= cfg.decay_epochs[i - 1])
      throw ConfigError("train: decay epochs must be strictly increasing");
}

std::string ConstraintTrace::csv() const {
  std::ostringstream os;
  os << "step,layer,theta_bar,lambda,loss\n";
  for (const Record& r : records)
    for (std::size_t k = 0; k < r.theta_bar.size(); ++k) {
      os << r.step << "," << scope_names[k] << ",";
      append_csv_value(os, r.theta_bar[k]);
      os << ",";
      append_csv_value(os, r.lambdas[k]);
      os << ",";
      append_csv_value(os, r.loss);
      os << "\n";
    }
  return os.str();
}

PenaltyResult budget_penalty(const DomainAdapter& adapter, const BudgetSpec& spec) {
  std::vector<double> means;
  std::vector<int> widths;
  for (std::size_t i = 0; i < adapter.switches.size(); ++i) {
    if (!adapter.gated[i]) continue;
    means.push_back(adapter.switches[i].mean());
    widths.push_back(adapter.switches[i].size());
  }
  if (means.empty()) throw ConfigError("budget_penalty: adapter has no gated layers");

  PenaltyResult r;
  if (spec.mode == ConstraintMode::Global) {
    if (spec.lambdas.size() != 1) throw ConfigError("budget_penalty: want one global lambda");
    double on = 0.0, total = 0.0;
    for (std::size_t k = 0; k < means.size(); ++k) {
      on += means[k] * widths[k];
      total += widths[k];
    }
    const double theta = on / total;
    r.theta_bar = {theta};
    r.violations = {theta - spec.beta};
    r.penalty = spec.lambdas[0] * r.violations[0];
  } else {
    if (spec.lambdas.size() != means.size())
      throw ConfigError("budget_penalty: lambda count != gated layer count");
    r.theta_bar = means;
    r.penalty = 0.0;
    for (std::size_t k = 0; k < means.size(); ++k) {
      r.violations.push_back(means[k] - spec.beta);
      r.penalty += spec.lambdas[k] * r.violations[k];
    }
  }
  return r;
}

void lambda_step(BudgetSpec& spec, const std::vector<double>& violations) {
  if (violations.size() != spec.lambdas.size())
    throw ConfigError("lambda_step: violation count != lambda count");
  for (std::size_t k = 0; k < spec.lambdas.size(); ++k)
    spec.lambdas[k] = std::max(0.0, spec.lambdas[k] + spec.lambda_lr * violations[k]);
}

bool budget_compliant(const DomainAdapter& adapter, const BudgetSpec& spec) {
  const PenaltyResult p = budget_penalty(adapter, spec);
  for (double v : p.violations)
    if (v > 0.0) return false;
  return true;
}

double eval_error(const Backbone& backbone, DomainAdapter& adapter, const Dataset& ds) {
  const std::vector<int> order = identity_order(ds.count());
  int wrong = 0;
  for (int start = 0; start < ds.count(); start += kEvalBatch) {
    const int stop = std::min(ds.count(), start + kEvalBatch);
    std::vector<int> labels;
    Tensor4<float> batch = gather_batch(ds, order, static_cast<std::size_t>(start),
                                        static_cast<std::size_t>(stop), labels);
    const Tensor4<float> logits = adapter_logits(backbone, adapter, batch);
    error_from_logits(logits, ds.labels, start, wrong);
  }
  return static_cast<double>(wrong) / ds.count();
}

double eval_error_backbone(Backbone& backbone, const Dataset& ds) {
  const std::vector<int> order = identity_order(ds.count());
  int wrong = 0;
  for (int start = 0; start < ds.count(); start += kEvalBatch) {
    const int stop = std::min(ds.count(), start + kEvalBatch);
    std::vector<int> labels;
    Tensor4<float> batch = gather_batch(ds, order, static_cast<std::size_t>(start),
                                        static_cast<std::size_t>(stop), labels);
    const Tensor4<float> logits = backbone_logits(backbone, batch);
    error_from_logits(logits, ds.labels, start, wrong);
  }
  return static_cast<double>(wrong) / ds.count();
}

TrainResult train_domain(const Backbone& backbone, const DomainData& data,
                         const BudgetSpec& spec_in, const TrainConfig& cfg,
                         const WarningSink& warn) {
  validate_train_config(cfg);
  check_data(data, backbone.plan);
  const std::vector<std::size_t> gl = gated_layers(backbone.plan);
  BudgetSpec spec = spec_in;
  validate_budget(spec, static_cast<int>(gl.size()));

  DomainAdapter adapter =
      make_adapter(backbone, data.name, spec.beta, data.classes, cfg.seed);

  ConstraintTrace trace;
  if (spec.mode == ConstraintMode::Global) {
    trace.scope_names = {"all"};
  } else {
    for (std::size_t li : gl) trace.scope_names.push_back(backbone.plan.convs[li].name);
  }

  SgdMomentum head_opt(static_cast<float>(cfg.head_lr), static_cast<float>(cfg.head_momentum));
  Adam adapter_opt(static_cast<float>(cfg.adapter_lr), static_cast<float>(cfg.adam_beta1),
                   static_cast<float>(cfg.adam_beta2), static_cast<float>(cfg.adam_eps));

  // Adam updates switch scores through these buffers; the SwitchVector
  // re-binarizes on each writeback.
  std::vector<std::vector<float>> score_buf(adapter.switches.size());

  Rng rng(derive_seed(cfg.seed, "train-domain:" + data.name + ":" +
                                    std::to_string(spec.beta)));

  double total_width = 0.0;
  for (std::size_t li : gl) total_width += backbone.plan.convs[li].cin;

  int step_id = 0;
  double lr_scale = 1.0;
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<float> best_snap;
  bool have_best = false;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (std::find(cfg.decay_epochs.begin(), cfg.decay_epochs.end(), epoch) !=
        cfg.decay_epochs.end()) {
      lr_scale *= cfg.decay_factor;
      head_opt.lr = static_cast<float>(cfg.head_lr * lr_scale);
      adapter_opt.lr = static_cast<float>(cfg.adapter_lr * lr_scale);
    }
    std::vector<int> order = identity_order(data.train.count());
    rng.shuffle(order);

    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      std::vector<int> labels;
      Tensor4<float> batch = gather_batch(data.train, order, start, stop, labels);
      if (cfg.augment_mirror) augment_mirror_inplace(batch, rng);

      Tape<float> tape;
      NodeId in = tape.leaf(std::move(batch), false);
      std::vector<BnStats<float>> running;
      ForwardParams p = mount_adapter(tape, backbone, adapter, true, running);
      NodeId logits =
          network_forward(tape, backbone.plan, p, in, BnMode::Train, running, warn, nullptr);
      SceResult<float> sce = softmax_cross_entropy(tape, logits, labels);
      tape.backward(sce.loss);

      const PenaltyResult pen = budget_penalty(adapter, spec);

      // The budget penalty differentiates to a constant per switch under the
      // identity straight-through rule: lambda / (channels in scope).
      std::vector<std::vector<float>> sgrads(gl.size());
      std::vector<ParamRef> arefs;
      for (std::size_t k = 0; k < gl.size(); ++k) {
        const std::size_t li = gl[k];
        sgrads[k] = tape.grad(p.switches[li]).v;
        const double add = spec.mode == ConstraintMode::Global
                               ? spec.lambdas[0] / total_width
                               : spec.lambdas[k] / backbone.plan.convs[li].cin;
        for (float& g : sgrads[k]) g += static_cast<float>(add);
        score_buf[li] = adapter.switches[li].scores();
        arefs.push_back({&score_buf[li], &sgrads[k]});
      }
      for (std::size_t i = 0; i < adapter.bn.size(); ++i) {
        arefs.push_back({&adapter.bn[i].gamma, &tape.grad(p.bn_gamma[i]).v});
        arefs.push_back({&adapter.bn[i].beta, &tape.grad(p.bn_beta[i]).v});
      }
      adapter_opt.step(arefs);
      for (std::size_t li : gl) adapter.switches[li].set_scores(score_buf[li]);

      std::vector<ParamRef> hrefs = {{&adapter.head.w, &tape.grad(p.head_w).v},
                                     {&adapter.head.b, &tape.grad(p.head_b).v}};
      head_opt.step(hrefs);

      lambda_step(spec, pen.violations);
      trace.records.push_back({step_id, pen.theta_bar, spec.lambdas,
                               static_cast<double>(tape.val(sce.loss).v[0]) + pen.penalty});
      ++step_id;
    }

    if (budget_compliant(adapter, spec)) {
      const double ve = eval_error(backbone, adapter, data.val);
      if (ve < best_val) {
        best_val = ve;
        best_snap = snapshot_adapter(adapter);
        have_best = true;
      }
    }
  }

  TrainResult result;
  if (have_best) {
    restore_adapter(adapter, best_snap);
    result.val_error = best_val;
  } else {
    result.constraint_violated = true;
    result.val_error = eval_error(backbone, adapter, data.val);
  }
  result.adapter = std::move(adapter);
  result.trace = std::move(trace);
  return result;
}

namespace {

// Shared full-model supervised training (backbone pretraining and the E_max
// fine-tuning baseline): every parameter learns, best epoch by val error.
void train_full_model(Backbone& bb, const DomainData& data, const TrainConfig& cfg,
                      const std::string& tag) {
  validate_train_config(cfg);
  check_data(data, bb.plan);

  SgdMomentum head_opt(static_cast<float>(cfg.head_lr), static_cast<float>(cfg.head_momentum));
  Adam body_opt(static_cast<float>(cfg.adapter_lr), static_cast<float>(cfg.adam_beta1),
                static_cast<float>(cfg.adam_beta2), static_cast<float>(cfg.adam_eps));
  Rng rng(derive_seed(cfg.seed, tag + ":" + data.name));

  double lr_scale = 1.0;
  double best_val = std::numeric_limits<double>::infinity();
  Backbone best = bb;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (std::find(cfg.decay_epochs.begin(), cfg.decay_epochs.end(), epoch) !=
        cfg.decay_epochs.end()) {
      lr_scale *= cfg.decay_factor;
      head_opt.lr = static_cast<float>(cfg.head_lr * lr_scale);
      body_opt.lr = static_cast<float>(cfg.adapter_lr * lr_scale);
    }
    std::vector<int> order = identity_order(data.train.count());
    rng.shuffle(order);

    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      std::vector<int> labels;
      Tensor4<float> batch = gather_batch(data.train, order, start, stop, labels);
      if (cfg.augment_mirror) augment_mirror_inplace(batch, rng);

      Tape<float> tape;
      NodeId in = tape.leaf(std::move(batch), false);
      std::vector<BnStats<float>> running;
      ForwardParams p = mount_backbone(tape, bb, BackboneTrain::Full, running);
      NodeId logits = network_forward(tape, bb.plan, p, in, BnMode::Train, running,
                                      WarningSink(), nullptr);
      SceResult<float> sce = softmax_cross_entropy(tape, logits, labels);
      tape.backward(sce.loss);

      std::vector<ParamRef> brefs;
      for (std::size_t i = 0; i < bb.kernels.size(); ++i) {
        brefs.push_back({&bb.kernels[i].v, &tape.grad(p.kernels[i]).v});
        brefs.push_back({&bb.bn[i].gamma, &tape.grad(p.bn_gamma[i]).v});
        brefs.push_back({&bb.bn[i].beta, &tape.grad(p.bn_beta[i]).v});
      }
      body_opt.step(brefs);
      std::vector<ParamRef> hrefs = {{&bb.head.w, &tape.grad(p.head_w).v},
                                     {&bb.head.b, &tape.grad(p.head_b).v}};
      head_opt.step(hrefs);
    }

    const double ve = eval_error_backbone(bb, data.val);
    if (ve < best_val) {
      best_val = ve;
      best = bb;
    }
  }
  bb = std::move(best);
}

}  // namespace

Backbone train_backbone(const ResidualCnnConfig& net, const DomainData& data,
                        const TrainConfig& cfg) {
  Backbone bb = make_backbone(net, data.classes, cfg.seed);
  train_full_model(bb, data, cfg, "pretrain");
  return bb;
}

FinetuneResult finetune_domain(const Backbone& backbone, const DomainData& data,
                               const TrainConfig& cfg) {
  FinetuneResult r;
  r.model = backbone;
  if (data.classes != r.model.classes) {
    Rng rng(derive_seed(cfg.seed, "finetune-head:" + data.name));
    r.model.head = make_dense(r.model.plan.feat_dim, data.classes, rng);
    r.model.classes = data.classes;
  }
  train_full_model(r.model, data, cfg, "finetune");
  r.test_error = eval_error_backbone(r.model, data.test);
  return r;
}

JointResult train_multi_budget_joint(const Backbone& backbone, const DomainData& data,
                                     std::vector<BudgetSpec> budgets, const TrainConfig& cfg) {
  validate_train_config(cfg);
  check_data(data, backbone.plan);
  if (budgets.empty()) throw ConfigError("joint: need at least one budget");
  for (std::size_t a = 0; a < budgets.size(); ++a)
    for (std::size_t b = a + 1; b < budgets.size(); ++b)
      if (budgets[a].beta == budgets[b].beta)
        throw ConfigError("joint: duplicate budget " + std::to_string(budgets[a].beta));

  JointResult jr;
  jr.model = backbone;
  const std::vector<std::size_t> gl = gated_layers(jr.model.plan);
  double total_width = 0.0;
  for (std::size_t li : gl) total_width += jr.model.plan.convs[li].cin;

  std::vector<std::string> scope_names;
  for (std::size_t li : gl) scope_names.push_back(jr.model.plan.convs[li].name);

  const std::size_t B = budgets.size();
  std::vector<SgdMomentum> head_opts;
  std::vector<Adam> adapter_opts;
  for (std::size_t b = 0; b < B; ++b) {
    validate_budget(budgets[b], static_cast<int>(gl.size()));
    jr.per_budget.push_back(make_adapter(jr.model, data.name, budgets[b].beta, data.classes,
                                         derive_seed(cfg.seed, "joint-head:" +
                                                                   std::to_string(b))));
    ConstraintTrace t;
    t.scope_names = budgets[b].mode == ConstraintMode::Global
                        ? std::vector<std::string>{"all"}
                        : scope_names;
    jr.traces.push_back(std::move(t));
    head_opts.emplace_back(static_cast<float>(cfg.head_lr),
                           static_cast<float>(cfg.head_momentum));
    adapter_opts.emplace_back(static_cast<float>(cfg.adapter_lr),
                              static_cast<float>(cfg.adam_beta1),
                              static_cast<float>(cfg.adam_beta2),
                              static_cast<float>(cfg.adam_eps));
  }
  Adam kernel_opt(static_cast<float>(cfg.adapter_lr), static_cast<float>(cfg.adam_beta1),
                  static_cast<float>(cfg.adam_beta2), static_cast<float>(cfg.adam_eps));

  Rng rng(derive_seed(cfg.seed, "joint:" + data.name));

  std::vector<std::vector<float>> kgrad(jr.model.kernels.size());
  std::vector<std::vector<std::vector<float>>> score_buf(
      B, std::vector<std::vector<float>>(jr.model.kernels.size()));

  int step_id = 0;
  double lr_scale = 1.0;
  double best_val = std::numeric_limits<double>::infinity();
  Backbone best_model = jr.model;
  std::vector<std::vector<float>> best_adapters;
  bool have_best = false;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (std::find(cfg.decay_epochs.begin(), cfg.decay_epochs.end(), epoch) !=
        cfg.decay_epochs.end()) {
      lr_scale *= cfg.decay_factor;
      kernel_opt.lr = static_cast<float>(cfg.adapter_lr * lr_scale);
      for (std::size_t b = 0; b < B; ++b) {
        head_opts[b].lr = static_cast<float>(cfg.head_lr * lr_scale);
        adapter_opts[b].lr = static_cast<float>(cfg.adapter_lr * lr_scale);
      }
    }
    std::vector<int> order = identity_order(data.train.count());
    rng.shuffle(order);

    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      std::vector<int> labels;
      Tensor4<float> batch = gather_batch(data.train, order, start, stop, labels);
      if (cfg.augment_mirror) augment_mirror_inplace(batch, rng);

      for (std::vector<float>& g : kgrad) g.clear();

      // Each budget contributes its own Lagrangian on the same batch; kernel
      // grads accumulate across budgets and step once.
      for (std::size_t b = 0; b < B; ++b) {
        DomainAdapter& ad = jr.per_budget[b];
        BudgetSpec& spec = budgets[b];

        Tape<float> tape;
        NodeId in = tape.leaf(batch, false);
        std::vector<BnStats<float>> running;
        ForwardParams p = mount_joint(tape, jr.model, ad, running);
        NodeId logits = network_forward(tape, jr.model.plan, p, in, BnMode::Train, running,
                                        WarningSink(), nullptr);
        SceResult<float> sce = softmax_cross_entropy(tape, logits, labels);
        tape.backward(sce.loss);

        const PenaltyResult pen = budget_penalty(ad, spec);

        for (std::size_t i = 0; i < jr.model.kernels.size(); ++i) {
          const std::vector<float>& g = tape.grad(p.kernels[i]).v;
          if (kgrad[i].empty()) kgrad[i].assign(g.size(), 0.0f);
          for (std::size_t j = 0; j < g.size(); ++j) kgrad[i][j] += g[j];
        }

        std::vector<std::vector<float>> sgrads(gl.size());
        std::vector<ParamRef> arefs;
        for (std::size_t k = 0; k < gl.size(); ++k) {
          const std::size_t li = gl[k];
          sgrads[k] = tape.grad(p.switches[li]).v;
          const double add = spec.mode == ConstraintMode::Global
                                 ? spec.lambdas[0] / total_width
                                 : spec.lambdas[k] / jr.model.plan.convs[li].cin;
          for (float& g : sgrads[k]) g += static_cast<float>(add);
          score_buf[b][li] = ad.switches[li].scores();
          arefs.push_back({&score_buf[b][li], &sgrads[k]});
        }
        for (std::size_t i = 0; i < ad.bn.size(); ++i) {
          arefs.push_back({&ad.bn[i].gamma, &tape.grad(p.bn_gamma[i]).v});
          arefs.push_back({&ad.bn[i].beta, &tape.grad(p.bn_beta[i]).v});
        }
        adapter_opts[b].step(arefs);
        for (std::size_t li : gl) ad.switches[li].set_scores(score_buf[b][li]);

        std::vector<ParamRef> hrefs = {{&ad.head.w, &tape.grad(p.head_w).v},
                                       {&ad.head.b, &tape.grad(p.head_b).v}};
        head_opts[b].step(hrefs);

        lambda_step(spec, pen.violations);
        jr.traces[b].records.push_back(
            {step_id, pen.theta_bar, spec.lambdas,
             static_cast<double>(tape.val(sce.loss).v[0]) + pen.penalty});
      }

      std::vector<ParamRef> krefs;
      for (std::size_t i = 0; i < jr.model.kernels.size(); ++i)
        krefs.push_back({&jr.model.kernels[i].v, &kgrad[i]});
      kernel_opt.step(krefs);
      ++step_id;
    }

    bool all_ok = true;
    for (std::size_t b = 0; b < B; ++b)
      all_ok = all_ok && budget_compliant(jr.per_budget[b], budgets[b]);
    if (all_ok) {
      double mean_err = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        mean_err += eval_error(jr.model, jr.per_budget[b], data.val);
      mean_err /= static_cast<double>(B);
      if (mean_err < best_val) {
        best_val = mean_err;
        best_model = jr.model;
        best_adapters.clear();
        for (const DomainAdapter& ad : jr.per_budget)
          best_adapters.push_back(snapshot_adapter(ad));
        have_best = true;
      }
    }
  }

  if (have_best) {
    jr.model = std::move(best_model);
    for (std::size_t b = 0; b < B; ++b)
      restore_adapter(jr.per_budget[b], best_adapters[b]);
  }
  jr.violated.resize(B);
  for (std::size_t b = 0; b < B; ++b)
    jr.violated[b] = !budget_compliant(jr.per_budget[b], budgets[b]);
  return jr;
}

}  // namespace ba2

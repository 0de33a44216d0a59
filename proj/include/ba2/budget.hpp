// Budget-constrained adapter training: cross-entropy loss plus a
// multiplier-weighted budget penalty, projected ascent on the multipliers,
// and the joint multi-budget mode that shares conv kernels across budgets.
//
// Constraint scope: the gated conv layers. The stem runs ungated (with a
// one-channel input a binary gate on it could only mean "no network"), so its
// stored switches stay all-ones and it is excluded from budgets, penalties,
// and compliance checks.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ba2/adapter.hpp"
#include "ba2/datasets.hpp"
#include "ba2/net.hpp"

namespace ba2 {

enum class ConstraintMode { Global, PerLayer };

struct BudgetSpec {
  float beta = 1.0f;
  ConstraintMode mode = ConstraintMode::PerLayer;
  std::vector<double> lambdas;  // one (global) or one per gated layer; empty = zeros
  double lambda_lr = 0.01;
};

// Checks beta in (0, 1], nonnegative lambdas of the right arity, positive
// lambda_lr; fills an empty lambda vector with zeros.
void validate_budget(BudgetSpec& spec, int gated_layers);

struct TrainConfig {
  int epochs = 12;
  int batch = 32;
  double head_lr = 0.05, head_momentum = 0.9;  // classifier: SGD with momentum
  double adapter_lr = 0.01;                    // switches/BN (and kernels when unfrozen): Adam
  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
  std::vector<int> decay_epochs = {};          // strictly increasing, 0-based epoch indices
  double decay_factor = 0.1;
  std::uint64_t seed = 0;
  bool augment_mirror = true;
};

void validate_train_config(const TrainConfig& cfg);

// One record per optimization step. theta_bar/lambdas carry one entry per
// constraint scope (a single entry in global mode, one per gated layer in
// per-layer mode); lambdas are the values after that step's ascent update.
struct ConstraintTrace {
  struct Record {
    int step = 0;
    std::vector<double> theta_bar;
    std::vector<double> lambdas;
    double loss = 0.0;
  };
  std::vector<Record> records;
  std::vector<std::string> scope_names;  // "all" or gated layer names

  std::string csv() const;  // step,layer,theta_bar,lambda,loss
};

struct PenaltyResult {
  double penalty = 0.0;
  std::vector<double> violations;  // theta_bar - beta, one per scope
  std::vector<double> theta_bar;
};

// Multiplier-weighted penalty on the BINARIZED switches: global mode pools
// every gated switch into one mean; per-layer mode sums
// lambda_l * (theta_l - beta).
PenaltyResult budget_penalty(const DomainAdapter& adapter, const BudgetSpec& spec);

// Projected multiplier ascent: lambda <- max(0, lambda + lr * violation).
void lambda_step(BudgetSpec& spec, const std::vector<double>& violations);

// True iff every scope satisfies theta_bar <= beta.
bool budget_compliant(const DomainAdapter& adapter, const BudgetSpec& spec);

struct TrainResult {
  DomainAdapter adapter;
  ConstraintTrace trace;
  bool constraint_violated = false;  // true when no epoch ended compliant
  double val_error = 1.0;            // of the returned (selected) adapter
};

// Trains one (domain, budget) adapter against the frozen backbone. Epochs
// that end budget-compliant are candidates; the best of them by validation
// error is returned. If no epoch complies, the final state is returned with
// constraint_violated set — never silently reported as compliant.
TrainResult train_domain(const Backbone& backbone, const DomainData& data,
                         const BudgetSpec& spec, const TrainConfig& cfg,
                         const WarningSink& warn = {});

// Classification error rate in eval mode (0 = perfect).
double eval_error(const Backbone& backbone, DomainAdapter& adapter, const Dataset& ds);
double eval_error_backbone(Backbone& backbone, const Dataset& ds);

// Plain supervised training of the full backbone (pretraining, domain 0).
Backbone train_backbone(const ResidualCnnConfig& net, const DomainData& data,
                        const TrainConfig& cfg);

// Clone the backbone, swap in a fresh head for this domain, fine-tune all
// parameters; the baseline used for E_max. Returns the tuned model and its
// test error.
struct FinetuneResult {
  Backbone model;
  double test_error = 1.0;
};
FinetuneResult finetune_domain(const Backbone& backbone, const DomainData& data,
                               const TrainConfig& cfg);

// Joint multi-budget training on one domain: one shared kernel set, one
// switch/BN/head set per budget, the sum of per-budget objectives per step.
// Kernels are unfrozen here. Budgets must be distinct.
struct JointResult {
  Backbone model;                        // holds the shared, fine-tuned kernels
  std::vector<DomainAdapter> per_budget;  // one per input spec, same order
  std::vector<ConstraintTrace> traces;
  std::vector<bool> violated;
};
JointResult train_multi_budget_joint(const Backbone& backbone, const DomainData& data,
                                     std::vector<BudgetSpec> budgets, const TrainConfig& cfg);

}  // namespace ba2

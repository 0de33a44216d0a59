// Decathlon-style scoring. Each domain contributes
//   partial = 1000 * max(0, (E_max - E) / E_max)^2
// which is alpha * max(0, E_max - E)^2 with alpha = 1000 / E_max^2, written so
// a perfect E = 0 lands on exactly 1000.0 (x/x == 1 in IEEE arithmetic) and
// E >= E_max on exactly 0. E_max is twice the per-domain fine-tuning error,
// deliberately uncapped; values above 1 are flagged but honored.
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace ba2 {

double baseline_error(double finetune_error);  // 2x, input must be in [0, 1]

double partial_score(double error, double e_max);

struct Partials {
  std::vector<double> alpha;    // 1000 / e_max^2, as reported
  std::vector<double> partial;  // per-domain scores
  double S = 0.0;               // sum of partials
};

// results: per-domain (E, E_max) pairs.
Partials decathlon_score(const std::vector<std::pair<double, double>>& results);

// S_O = S / rel_flop, S_P = S / rel_params. Denominators must be positive.
std::pair<double, double> efficiency_scores(double S, double rel_flop, double rel_params);

struct DomainScore {
  std::string domain;
  float budget = 1.0f;
  double error = 0.0;
  double e_max = 0.0;
  double alpha = 0.0;
  double partial = 0.0;
  bool e_max_flagged = false;  // baseline above 1
  bool compliant = false;
  double flop_fraction = 1.0;
  std::uint64_t param_bits = 0;
};

struct ScoreReport {
  std::vector<DomainScore> domains;
  double S = 0.0;
  double rel_flop = 1.0;
  double rel_params = 1.0;
  double S_O = 0.0;
  double S_P = 0.0;
};

// Noncompliant entries earn a zero partial (they are listed, but a network
// that overspends its budget gets no headline credit). S stays the exact sum
// of the partial column.
ScoreReport assemble_report(std::vector<DomainScore> domains, double rel_flop,
                            double rel_params);

// {"domains":[{id, budget, error, e_max, flop_fraction, param_bits, compliant}],
//  "totals":{S, rel_flop, rel_params, S_O, S_P}}
std::string report_json(const ScoreReport& report);

std::string report_text(const ScoreReport& report);  // aligned human-readable table

}  // namespace ba2

#include "ba2/scoring.hpp"

#include <cmath>
#include <cstdio>

#include "json.hpp"

#include "ba2/common.hpp"

using nlohmann::json;

namespace ba2 {

double baseline_error(double finetune_error) {
  if (!(finetune_error >= 0.0) || finetune_error > 1.0)
    throw ConfigError("baseline_error: fine-tuning error " +
                      std::to_string(finetune_error) + " outside [0, 1]");
  return 2.0 * finetune_error;
}

double partial_score(double error, double e_max) {
  if (!(error >= 0.0) || error > 1.0)
    throw ConfigError("partial_score: error " + std::to_string(error) + " outside [0, 1]");
  if (!(e_max > 0.0))
    throw ConfigError("partial_score: degenerate baseline (E_max = " +
                      std::to_string(e_max) + " must be > 0)");
  const double ratio = (e_max - error) / e_max;
  const double clamped = ratio > 0.0 ? ratio : 0.0;
  return 1000.0 * clamped * clamped;
}

Partials decathlon_score(const std::vector<std::pair<double, double>>& results) {
  Partials p;
  for (const auto& [e, e_max] : results) {
    p.partial.push_back(partial_score(e, e_max));
    p.alpha.push_back(1000.0 / (e_max * e_max));
    p.S += p.partial.back();
  }
  return p;
}

std::pair<double, double> efficiency_scores(double S, double rel_flop, double rel_params) {
  if (!(rel_flop > 0.0))
    throw ConfigError("efficiency_scores: relative FLOP must be > 0");
  if (!(rel_params > 0.0))
    throw ConfigError("efficiency_scores: relative params must be > 0");
  return {S / rel_flop, S / rel_params};
}

ScoreReport assemble_report(std::vector<DomainScore> domains, double rel_flop,
                            double rel_params) {
  ScoreReport r;
  r.domains = std::move(domains);
  for (DomainScore& d : r.domains) {
    d.alpha = 1000.0 / (d.e_max * d.e_max);
    d.e_max_flagged = d.e_max > 1.0;
    d.partial = d.compliant ? partial_score(d.error, d.e_max) : 0.0;
    r.S += d.partial;
  }
  r.rel_flop = rel_flop;
  r.rel_params = rel_params;
  std::tie(r.S_O, r.S_P) = efficiency_scores(r.S, rel_flop, rel_params);
  return r;
}

std::string report_json(const ScoreReport& report) {
  json j;
  j["domains"] = json::array();
  for (const DomainScore& d : report.domains)
    j["domains"].push_back({{"id", d.domain},
                            {"budget", d.budget},
                            {"error", d.error},
                            {"e_max", d.e_max},
                            {"flop_fraction", d.flop_fraction},
                            {"param_bits", d.param_bits},
                            {"compliant", d.compliant}});
  j["totals"] = {{"S", report.S},
                 {"rel_flop", report.rel_flop},
                 {"rel_params", report.rel_params},
                 {"S_O", report.S_O},
                 {"S_P", report.S_P}};
  return j.dump(2) + "\n";
}

std::string report_text(const ScoreReport& report) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-12s %7s %8s %8s %9s %8s %5s\n", "domain", "budget",
                "error", "e_max", "partial", "flops", "ok");
  out += line;
  for (const DomainScore& d : report.domains) {
    std::snprintf(line, sizeof line, "%-12s %7.3g %8.4f %8.4f %9.2f %8.4f %5s%s\n",
                  d.domain.c_str(), static_cast<double>(d.budget), d.error, d.e_max,
                  d.partial, d.flop_fraction, d.compliant ? "yes" : "NO",
                  d.e_max_flagged ? "  [baseline > 1]" : "");
    out += line;
  }
  std::snprintf(line, sizeof line,
                "S = %.2f   rel_flop = %.4f   rel_params = %.4f   S_O = %.2f   S_P = %.2f\n",
                report.S, report.rel_flop, report.rel_params, report.S_O, report.S_P);
  out += line;
  return out;
}

}  // namespace ba2

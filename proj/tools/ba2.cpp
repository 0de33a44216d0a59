// Command-line front end: training, evaluation, scoring, inspection, and
// storage operations over the budget-aware adapter toolkit.
//
// Exit codes: 0 success, 2 usage, 3 configuration, 4 data, 5 compliance,
// 1 anything else (I/O, corrupt files, internal errors).
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "ba2/budget.hpp"
#include "ba2/complexity.hpp"
#include "ba2/harness.hpp"
#include "ba2/hash.hpp"
#include "ba2/scoring.hpp"
#include "ba2/store.hpp"

using namespace ba2;
namespace fs = std::filesystem;

namespace {

std::string budget_tag(float budget) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", static_cast<double>(budget));
  return buf;
}

// "0.25,0.5,1" or "0.1..1.0" or "0.1..1.0:0.05"
std::vector<float> parse_budget_list(const std::string& text) {
  std::vector<float> out;
  const std::size_t dots = text.find("..");
  if (dots != std::string::npos) {
    double step = 0.1;
    std::string rest = text.substr(dots + 2);
    const std::size_t colon = rest.find(':');
    if (colon != std::string::npos) {
      step = std::stod(rest.substr(colon + 1));
      rest = rest.substr(0, colon);
    }
    const double lo = std::stod(text.substr(0, dots));
    const double hi = std::stod(rest);
    if (!(step > 0.0) || hi < lo) throw ConfigError("bad budget range '" + text + "'");
    const int n = static_cast<int>(std::lround((hi - lo) / step));
    for (int i = 0; i <= n; ++i)
      out.push_back(static_cast<float>(lo + step * i));
  } else {
    std::size_t at = 0;
    while (at < text.size()) {
      const std::size_t comma = text.find(',', at);
      const std::string piece =
          text.substr(at, comma == std::string::npos ? std::string::npos : comma - at);
      if (!piece.empty()) out.push_back(std::stof(piece));
      if (comma == std::string::npos) break;
      at = comma + 1;
    }
  }
  if (out.empty()) throw ConfigError("no budgets in '" + text + "'");
  for (float b : out)
    if (!(b > 0.0f) || b > 1.0f)
      throw ConfigError("budget " + budget_tag(b) + " outside (0, 1]");
  return out;
}

const DatasetSpec& find_domain(const BenchConfig& cfg, const std::string& name) {
  for (const DatasetSpec& d : cfg.domains)
    if (d.name == name) return d;
  std::string known;
  for (const DatasetSpec& d : cfg.domains) known += (known.empty() ? "" : ", ") + d.name;
  throw ConfigError("no domain '" + name + "' in the config (have: " + known + ")");
}

ConstraintMode parse_mode(const std::string& text) {
  if (text == "per-layer") return ConstraintMode::PerLayer;
  if (text == "global") return ConstraintMode::Global;
  throw ConfigError("mode must be 'per-layer' or 'global', got '" + text + "'");
}

void progress_to_stderr(const std::string& msg) { std::fprintf(stderr, "[ba2] %s\n", msg.c_str()); }

// Loads the backbone either from a registry directory or a checkpoint file.
Backbone backbone_from_flags(const std::string& registry, const std::string& file) {
  if (!registry.empty()) return ModelRegistry::open(registry).backbone();
  if (!file.empty()) return load_backbone(file);
  throw ConfigError("need --registry or --backbone to locate the trunk");
}

std::string fmt_error(double e) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", e);
  return buf;
}

void write_text(const std::string& path, const std::string& text) {
  write_bytes_atomic(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Budget-aware multi-domain adapter toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_path, out_dir, registry_dir, backbone_path, adapter_path;
  std::string domain_name, mode_str, budgets_str, results_path, trace_path;
  float budget = -1.0f;
  std::uint64_t seed = 0;
  bool seed_set = false, as_json = false;

  auto* cmd_backbone = app.add_subcommand("train-backbone", "Pretrain the shared trunk");
  cmd_backbone->add_option("--config", config_path, "benchmark config JSON")->required();
  cmd_backbone->add_option("--domain", domain_name, "pretraining domain (default: first)");
  cmd_backbone->add_option("--out", out_path, "checkpoint path");
  cmd_backbone->add_option("--registry", registry_dir, "create a registry here instead");
  cmd_backbone->add_option("--seed", seed, "override the config seed")
      ->each([&](const std::string&) { seed_set = true; });

  auto* cmd_domain =
      app.add_subcommand("train-domain", "Train one (domain, budget) adapter");
  cmd_domain->add_option("--config", config_path, "benchmark config JSON")->required();
  cmd_domain->add_option("--domain", domain_name, "domain name")->required();
  cmd_domain->add_option("--budget", budget, "channel budget in (0, 1]")->required();
  cmd_domain->add_option("--mode", mode_str, "global | per-layer (default from config)");
  cmd_domain->add_option("--registry", registry_dir, "registry holding the backbone");
  cmd_domain->add_option("--backbone", backbone_path, "backbone checkpoint file");
  cmd_domain->add_option("--out", out_path, "adapter file (when not using a registry)");
  cmd_domain->add_option("--trace", trace_path, "write the constraint trace CSV here");

  auto* cmd_joint =
      app.add_subcommand("train-joint", "Jointly train several budgets with a shared trunk");
  cmd_joint->add_option("--config", config_path, "benchmark config JSON")->required();
  cmd_joint->add_option("--domain", domain_name, "domain name")->required();
  cmd_joint->add_option("--budgets", budgets_str, "e.g. 1.0,0.5")->required();
  cmd_joint->add_option("--registry", registry_dir, "registry holding the initial trunk");
  cmd_joint->add_option("--backbone", backbone_path, "initial trunk checkpoint");
  cmd_joint->add_option("--out-dir", out_dir, "where to write the trained artifacts")
      ->required();

  auto* cmd_eval = app.add_subcommand("eval", "Evaluate a stored adapter on its test split");
  cmd_eval->add_option("--config", config_path, "benchmark config JSON")->required();
  cmd_eval->add_option("--registry", registry_dir, "registry directory")->required();
  cmd_eval->add_option("--domain", domain_name, "domain name")->required();
  cmd_eval->add_option("--budget", budget, "budget to resolve")->required();

  auto* cmd_score = app.add_subcommand("score", "Compute S, S_O, S_P from a results file");
  cmd_score->add_option("--results", results_path, "results JSON")->required();

  auto* cmd_inspect = app.add_subcommand("inspect", "Complexity report for a model");
  cmd_inspect->add_option("--config", config_path, "benchmark config JSON (for the plan)");
  cmd_inspect->add_option("--registry", registry_dir, "registry directory");
  cmd_inspect->add_option("--domain", domain_name, "adapter domain (with --registry)");
  cmd_inspect->add_option("--budget", budget, "adapter budget (with --registry)");
  cmd_inspect->add_flag("--json", as_json, "emit JSON instead of a table");

  auto* cmd_pack = app.add_subcommand("pack", "Export a stored adapter as a standalone file");
  cmd_pack->add_option("--registry", registry_dir, "registry directory")->required();
  cmd_pack->add_option("--domain", domain_name, "domain name")->required();
  cmd_pack->add_option("--budget", budget, "budget to resolve")->required();
  cmd_pack->add_option("--out", out_path, "output adapter file")->required();

  auto* cmd_verify = app.add_subcommand("verify", "Re-hash every file a registry references");
  cmd_verify->add_option("--registry", registry_dir, "registry directory")->required();

  auto* cmd_sweep = app.add_subcommand("sweep", "Budget sweep (accuracy-vs-budget curve)");
  cmd_sweep->add_option("--config", config_path, "benchmark config JSON")->required();
  cmd_sweep->add_option("--budgets", budgets_str, "list (0.25,0.5,...) or range (0.1..1.0)");
  cmd_sweep->add_option("--out-dir", out_dir, "override the config out_dir");
  cmd_sweep->add_option("--seed", seed, "override the config seed")
      ->each([&](const std::string&) { seed_set = true; });

  auto* cmd_bench = app.add_subcommand("run-benchmark", "Full multi-domain benchmark");
  cmd_bench->add_option("--config", config_path, "benchmark config JSON")->required();
  cmd_bench->add_option("--out-dir", out_dir, "override the config out_dir");
  cmd_bench->add_option("--seed", seed, "override the config seed")
      ->each([&](const std::string&) { seed_set = true; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    std::fprintf(stderr, "run with --help for usage\n");
    return 2;
  }

  try {
    if (cmd_backbone->parsed()) {
      BenchConfig cfg = load_bench_config(config_path);
      if (seed_set) cfg.seed = seed;
      if (cfg.domains.empty()) throw ConfigError("config lists no domains");
      const DatasetSpec& spec =
          domain_name.empty() ? cfg.domains[0] : find_domain(cfg, domain_name);
      DomainData data = ingest_dataset(spec);
      TrainConfig tc = cfg.full_train;
      tc.seed = cfg.seed;
      std::fprintf(stderr, "[ba2] pretraining on %s\n", data.name.c_str());
      Backbone bb = train_backbone(cfg.net, data, tc);
      const double err = eval_error_backbone(bb, data.test);
      if (!registry_dir.empty()) {
        ModelRegistry::create(registry_dir, bb, cfg.seed, bench_config_hash(cfg));
        std::printf("registry %s  test_error %s\n", registry_dir.c_str(),
                    fmt_error(err).c_str());
      } else {
        const std::string path =
            out_path.empty() ? (fs::path(cfg.out_dir) / "backbone.ba2w").string() : out_path;
        fs::create_directories(fs::path(path).parent_path());
        save_backbone(path, bb);
        std::printf("checkpoint %s  test_error %s\n", path.c_str(), fmt_error(err).c_str());
      }
      return 0;
    }

    if (cmd_domain->parsed()) {
      BenchConfig cfg = load_bench_config(config_path);
      DomainData data = ingest_dataset(find_domain(cfg, domain_name));
      BudgetSpec spec;
      spec.beta = budget;
      spec.mode = mode_str.empty() ? cfg.mode : parse_mode(mode_str);
      spec.lambda_lr = cfg.lambda_lr;
      TrainConfig tc = cfg.adapter_train;
      tc.seed = cfg.seed;

      if (!registry_dir.empty()) {
        ModelRegistry reg = ModelRegistry::open(registry_dir);
        TrainResult tr = train_domain(reg.backbone(), data, spec, tc);
        reg.add_adapter(tr.adapter, !tr.constraint_violated);
        if (!trace_path.empty()) write_text(trace_path, tr.trace.csv());
        std::printf("domain %s budget %s val_error %s %s\n", domain_name.c_str(),
                    budget_tag(budget).c_str(), fmt_error(tr.val_error).c_str(),
                    tr.constraint_violated ? "VIOLATED" : "compliant");
        return 0;
      }
      Backbone bb = backbone_from_flags(registry_dir, backbone_path);
      if (out_path.empty()) throw ConfigError("need --out when not writing to a registry");
      TrainResult tr = train_domain(bb, data, spec, tc);
      save_adapter(out_path, tr.adapter, bb.plan);
      if (!trace_path.empty()) write_text(trace_path, tr.trace.csv());
      std::printf("adapter %s val_error %s %s\n", out_path.c_str(),
                  fmt_error(tr.val_error).c_str(),
                  tr.constraint_violated ? "VIOLATED" : "compliant");
      return 0;
    }

    if (cmd_joint->parsed()) {
      BenchConfig cfg = load_bench_config(config_path);
      DomainData data = ingest_dataset(find_domain(cfg, domain_name));
      Backbone bb = backbone_from_flags(registry_dir, backbone_path);
      std::vector<BudgetSpec> specs;
      for (float b : parse_budget_list(budgets_str)) {
        BudgetSpec s;
        s.beta = b;
        s.mode = cfg.mode;
        s.lambda_lr = cfg.lambda_lr;
        specs.push_back(s);
      }
      TrainConfig tc = cfg.adapter_train;
      tc.seed = cfg.seed;
      JointResult jr = train_multi_budget_joint(bb, data, specs, tc);

      fs::create_directories(out_dir);
      save_backbone((fs::path(out_dir) / "trunk.ba2w").string(), jr.model);
      for (std::size_t i = 0; i < jr.per_budget.size(); ++i) {
        const std::string tag = budget_tag(specs[i].beta);
        save_adapter((fs::path(out_dir) / (domain_name + "_b" + tag + ".ba2a")).string(),
                     jr.per_budget[i], jr.model.plan);
        write_text((fs::path(out_dir) / (domain_name + "_b" + tag + ".trace.csv")).string(),
                   jr.traces[i].csv());
        const double err = eval_error(jr.model, jr.per_budget[i], data.test);
        std::printf("budget %s test_error %s %s\n", tag.c_str(), fmt_error(err).c_str(),
                    jr.violated[i] ? "VIOLATED" : "compliant");
      }
      return 0;
    }

    if (cmd_eval->parsed()) {
      BenchConfig cfg = load_bench_config(config_path);
      DomainData data = ingest_dataset(find_domain(cfg, domain_name));
      ModelRegistry reg = ModelRegistry::open(registry_dir);
      bool compliant = false;
      DomainAdapter ad = reg.resolve(domain_name, budget, &compliant);
      const double err = eval_error(reg.backbone(), ad, data.test);
      std::printf("domain %s budget %s test_error %s %s\n", domain_name.c_str(),
                  budget_tag(budget).c_str(), fmt_error(err).c_str(),
                  compliant ? "compliant" : "VIOLATED");
      return 0;
    }

    if (cmd_score->parsed()) {
      const std::vector<std::uint8_t> raw = read_bytes(results_path);
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(raw.begin(), raw.end());
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("results file: ") + e.what());
      }
      double S = 0.0, rel_flop = 1.0, rel_params = 1.0;
      if (j.count("domains")) {
        std::vector<std::pair<double, double>> pairs;
        for (const auto& d : j.at("domains"))
          pairs.push_back({d.at("error").get<double>(), d.at("e_max").get<double>()});
        S = decathlon_score(pairs).S;
        const nlohmann::json& t = j.count("totals") ? j.at("totals") : j;
        rel_flop = t.at("rel_flop").get<double>();
        rel_params = t.at("rel_params").get<double>();
      } else {
        S = j.at("S").get<double>();
        rel_flop = j.at("rel_flop").get<double>();
        rel_params = j.at("rel_params").get<double>();
      }
      const auto [so, sp] = efficiency_scores(S, rel_flop, rel_params);
      std::printf("S %.0f\nS_O %.0f\nS_P %.0f\n", S, so, sp);
      return 0;
    }

    if (cmd_inspect->parsed()) {
      if (!registry_dir.empty()) {
        ModelRegistry reg = ModelRegistry::open(registry_dir);
        const Backbone& bb = reg.backbone();
        if (!domain_name.empty()) {
          if (budget < 0.0f) throw ConfigError("--domain needs --budget");
          DomainAdapter ad = reg.resolve(domain_name, budget);
          const ComplexityReport rep = count_flops(bb.plan, &ad, ad.classes);
          std::fputs((as_json ? report_json(rep) : report_table(rep)).c_str(), stdout);
        } else {
          const ComplexityReport rep = count_flops(bb.plan, nullptr, bb.classes);
          std::fputs((as_json ? report_json(rep) : report_table(rep)).c_str(), stdout);
        }
        return 0;
      }
      if (config_path.empty()) throw ConfigError("need --config or --registry");
      BenchConfig cfg = load_bench_config(config_path);
      const ArchPlan plan = plan_architecture(cfg.net);
      const int classes = cfg.domains.empty() ? 2 : cfg.domains[0].classes;
      const ComplexityReport rep = count_flops(plan, nullptr, classes);
      std::fputs((as_json ? report_json(rep) : report_table(rep)).c_str(), stdout);
      return 0;
    }

    if (cmd_pack->parsed()) {
      ModelRegistry reg = ModelRegistry::open(registry_dir);
      DomainAdapter ad = reg.resolve(domain_name, budget);
      save_adapter(out_path, ad, reg.backbone().plan);
      std::printf("packed %s (%ju bytes)\n", out_path.c_str(),
                  static_cast<uintmax_t>(fs::file_size(out_path)));
      return 0;
    }

    if (cmd_verify->parsed()) {
      ModelRegistry reg = ModelRegistry::open(registry_dir);
      const std::vector<std::string> problems = reg.verify();
      if (problems.empty()) {
        std::printf("ok: backbone and %zu adapter file(s) match the manifest\n",
                    reg.list().size());
        return 0;
      }
      for (const std::string& p : problems) std::fprintf(stderr, "FAIL %s\n", p.c_str());
      return 1;
    }

    if (cmd_sweep->parsed() || cmd_bench->parsed()) {
      BenchConfig cfg = load_bench_config(config_path);
      if (seed_set) cfg.seed = seed;
      if (!out_dir.empty()) cfg.out_dir = out_dir;
      if (cmd_sweep->parsed() && !budgets_str.empty())
        cfg.budgets = parse_budget_list(budgets_str);
      cfg.progress = progress_to_stderr;
      BenchResult res = run_benchmark(cfg);
      if (cmd_sweep->parsed()) {
        std::fputs(res.sweep_csv.c_str(), stdout);
      } else {
        for (const ScoreReport& rep : res.reports) {
          std::printf("== budget %s ==\n",
                      budget_tag(rep.domains.empty() ? 0.0f : rep.domains[0].budget).c_str());
          std::fputs(report_text(rep).c_str(), stdout);
        }
      }
      return 0;
    }

    throw ConfigError("no subcommand handled");  // unreachable with require_subcommand
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 3;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 4;
  } catch (const ComplianceError& e) {
    std::fprintf(stderr, "compliance error: %s\n", e.what());
    return 5;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

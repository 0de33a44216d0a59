#include "ba2/harness.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <set>

#include "json.hpp"

#include "ba2/complexity.hpp"
#include "ba2/hash.hpp"
#include "ba2/store.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ba2 {

namespace {

std::string budget_tag(float budget) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", static_cast<double>(budget));
  return buf;
}

void reject_unknown_keys(const json& j, const std::set<std::string>& allowed,
                         const std::string& where) {
  for (const auto& [key, _] : j.items())
    if (!allowed.count(key))
      throw ConfigError(where + ": unknown key '" + key + "'");
}

template <typename T>
T get_or(const json& j, const std::string& key, T fallback) {
  if (!j.count(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type");
  }
}

TrainConfig parse_train(const json& j, const std::string& where) {
  reject_unknown_keys(j,
                      {"epochs", "batch", "head_lr", "head_momentum", "adapter_lr",
                       "adam_beta1", "adam_beta2", "adam_eps", "decay_epochs",
                       "decay_factor", "augment_mirror"},
                      where);
  TrainConfig t;
  t.epochs = get_or(j, "epochs", t.epochs);
  t.batch = get_or(j, "batch", t.batch);
  t.head_lr = get_or(j, "head_lr", t.head_lr);
  t.head_momentum = get_or(j, "head_momentum", t.head_momentum);
  t.adapter_lr = get_or(j, "adapter_lr", t.adapter_lr);
  t.adam_beta1 = get_or(j, "adam_beta1", t.adam_beta1);
  t.adam_beta2 = get_or(j, "adam_beta2", t.adam_beta2);
  t.adam_eps = get_or(j, "adam_eps", t.adam_eps);
  t.decay_epochs = get_or(j, "decay_epochs", t.decay_epochs);
  t.decay_factor = get_or(j, "decay_factor", t.decay_factor);
  t.augment_mirror = get_or(j, "augment_mirror", t.augment_mirror);
  return t;
}

json train_json(const TrainConfig& t) {
  return {{"epochs", t.epochs},
          {"batch", t.batch},
          {"head_lr", t.head_lr},
          {"head_momentum", t.head_momentum},
          {"adapter_lr", t.adapter_lr},
          {"adam_beta1", t.adam_beta1},
          {"adam_beta2", t.adam_beta2},
          {"adam_eps", t.adam_eps},
          {"decay_epochs", t.decay_epochs},
          {"decay_factor", t.decay_factor},
          {"augment_mirror", t.augment_mirror}};
}

DatasetSpec parse_domain(const json& j) {
  reject_unknown_keys(j,
                      {"name", "format", "images", "labels", "paths", "family", "seed",
                       "count", "h", "w", "classes", "train", "val", "test", "mean", "sd"},
                      "domain");
  DatasetSpec d;
  d.name = get_or<std::string>(j, "name", "");
  d.format = get_or<std::string>(j, "format", "synthetic");
  d.images = get_or<std::string>(j, "images", "");
  d.labels = get_or<std::string>(j, "labels", "");
  d.paths = get_or(j, "paths", d.paths);
  d.family = get_or<std::string>(j, "family", "");
  d.seed = get_or(j, "seed", d.seed);
  d.count = get_or(j, "count", d.count);
  d.h = get_or(j, "h", d.h);
  d.w = get_or(j, "w", d.w);
  d.classes = get_or(j, "classes", d.classes);
  d.train = get_or(j, "train", d.train);
  d.val = get_or(j, "val", d.val);
  d.test = get_or(j, "test", d.test);
  d.mean = get_or(j, "mean", d.mean);
  d.sd = get_or(j, "sd", d.sd);
  return d;
}

json domain_json(const DatasetSpec& d) {
  return {{"name", d.name},     {"format", d.format}, {"images", d.images},
          {"labels", d.labels}, {"paths", d.paths},   {"family", d.family},
          {"seed", d.seed},     {"count", d.count},   {"h", d.h},
          {"w", d.w},           {"classes", d.classes}, {"train", d.train},
          {"val", d.val},       {"test", d.test},     {"mean", d.mean},
          {"sd", d.sd}};
}

void append_csv_value(std::string& out, double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  out += buf;
}

void write_text_atomic(const std::string& path, const std::string& text) {
  write_bytes_atomic(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

}  // namespace

DomainData ingest_dataset(const DatasetSpec& spec) {
  if (spec.train < 1 || spec.val < 1 || spec.test < 1)
    throw ConfigError("dataset '" + spec.name + "': train/val/test sizes must be positive");

  Dataset ds;
  if (spec.format == "synthetic") {
    if (spec.family.empty())
      throw ConfigError("synthetic dataset '" + spec.name + "' needs a family");
    if (spec.classes != 4)
      throw ConfigError("synthetic families always have 4 classes");
    const int count = spec.count > 0 ? spec.count : spec.train + spec.val + spec.test;
    ds = synth_dataset(spec.family, spec.seed, count, spec.h, spec.w);
  } else if (spec.format == "idx") {
    if (spec.images.empty() || spec.labels.empty())
      throw ConfigError("idx dataset '" + spec.name + "' needs images and labels paths");
    ds = load_idx(spec.images, spec.labels, spec.classes, spec.mean, spec.sd);
  } else if (spec.format == "cifar") {
    if (spec.paths.empty())
      throw ConfigError("cifar dataset '" + spec.name + "' needs at least one path");
    ds = load_cifar(spec.paths, spec.classes, spec.mean, spec.sd);
  } else {
    throw ConfigError("dataset '" + spec.name + "': unknown format '" + spec.format + "'");
  }

  if (!spec.name.empty()) ds.name = spec.name;
  return split_domain(ds, spec.train, spec.val, spec.test);
}

BenchConfig parse_bench_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  reject_unknown_keys(j,
                      {"seed", "out_dir", "net", "budgets", "mode", "lambda_lr", "train",
                       "pretrain", "domains"},
                      "config");
  BenchConfig cfg;
  cfg.seed = get_or(j, "seed", cfg.seed);
  cfg.out_dir = get_or(j, "out_dir", cfg.out_dir);
  if (j.count("net")) {
    const json& n = j.at("net");
    reject_unknown_keys(
        n, {"input_h", "input_w", "input_c", "stage_channels", "blocks_per_stage"}, "net");
    cfg.net.input_h = get_or(n, "input_h", cfg.net.input_h);
    cfg.net.input_w = get_or(n, "input_w", cfg.net.input_w);
    cfg.net.input_c = get_or(n, "input_c", cfg.net.input_c);
    cfg.net.stage_channels = get_or(n, "stage_channels", cfg.net.stage_channels);
    cfg.net.blocks_per_stage = get_or(n, "blocks_per_stage", cfg.net.blocks_per_stage);
  }
  cfg.budgets = get_or(j, "budgets", cfg.budgets);
  const std::string mode = get_or<std::string>(j, "mode", "per-layer");
  if (mode == "per-layer")
    cfg.mode = ConstraintMode::PerLayer;
  else if (mode == "global")
    cfg.mode = ConstraintMode::Global;
  else
    throw ConfigError("mode must be 'per-layer' or 'global', got '" + mode + "'");
  cfg.lambda_lr = get_or(j, "lambda_lr", cfg.lambda_lr);
  if (j.count("train")) cfg.adapter_train = parse_train(j.at("train"), "train");
  if (j.count("pretrain")) cfg.full_train = parse_train(j.at("pretrain"), "pretrain");
  for (const json& d : get_or(j, "domains", json::array()))
    cfg.domains.push_back(parse_domain(d));
  return cfg;
}

BenchConfig load_bench_config(const std::string& path) {
  const std::vector<std::uint8_t> raw = [&] {
    try {
      return read_bytes(path);
    } catch (const StoreError& e) {
      throw ConfigError(std::string("config file: ") + e.what());
    }
  }();
  return parse_bench_config(std::string(raw.begin(), raw.end()));
}

std::string bench_config_hash(const BenchConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  j["net"] = {{"input_h", cfg.net.input_h},
              {"input_w", cfg.net.input_w},
              {"input_c", cfg.net.input_c},
              {"stage_channels", cfg.net.stage_channels},
              {"blocks_per_stage", cfg.net.blocks_per_stage}};
  j["budgets"] = cfg.budgets;
  j["mode"] = cfg.mode == ConstraintMode::PerLayer ? "per-layer" : "global";
  j["lambda_lr"] = cfg.lambda_lr;
  j["train"] = train_json(cfg.adapter_train);
  j["pretrain"] = train_json(cfg.full_train);
  j["domains"] = json::array();
  for (const DatasetSpec& d : cfg.domains) j["domains"].push_back(domain_json(d));
  return to_hex(sha256_str(j.dump()));
}

BenchResult run_benchmark(const BenchConfig& cfg_in) {
  BenchConfig cfg = cfg_in;
  if (cfg.domains.empty()) throw ConfigError("benchmark needs at least one domain");
  if (cfg.budgets.empty()) throw ConfigError("benchmark needs at least one budget");
  for (std::size_t a = 0; a < cfg.budgets.size(); ++a)
    for (std::size_t b = a + 1; b < cfg.budgets.size(); ++b)
      if (cfg.budgets[a] == cfg.budgets[b])
        throw ConfigError("duplicate budget " + budget_tag(cfg.budgets[a]));
  cfg.adapter_train.seed = cfg.seed;
  cfg.full_train.seed = cfg.seed;
  validate_train_config(cfg.adapter_train);
  validate_train_config(cfg.full_train);

  auto say = [&](const std::string& msg) {
    if (cfg.progress) cfg.progress(msg);
  };

  std::vector<DomainData> data;
  std::set<std::string> names;
  for (const DatasetSpec& spec : cfg.domains) {
    data.push_back(ingest_dataset(spec));
    if (!names.insert(data.back().name).second)
      throw ConfigError("duplicate domain name '" + data.back().name + "'");
  }

  say("pretraining backbone on " + data[0].name);
  const Backbone bb = train_backbone(cfg.net, data[0], cfg.full_train);

  std::error_code ec;
  fs::create_directories(fs::path(cfg.out_dir) / "traces", ec);
  if (ec) throw StoreError(StoreError::Kind::Io, "cannot create " + cfg.out_dir);

  BenchResult result;
  result.budgets = cfg.budgets;
  ModelRegistry reg = ModelRegistry::create((fs::path(cfg.out_dir) / "registry").string(),
                                            bb, cfg.seed, bench_config_hash(cfg));
  result.artifacts.push_back((fs::path(cfg.out_dir) / "registry" / "manifest.json").string());

  // Fine-tuned per-domain baselines define each domain's E_max. A baseline
  // with zero test error would make the score normalization 0/0, so refuse
  // here — before any adapter training — rather than at scoring time.
  for (const DomainData& dom : data) {
    say("fine-tuning baseline for " + dom.name);
    const FinetuneResult ft = finetune_domain(bb, dom, cfg.full_train);
    if (ft.test_error <= 0.0)
      throw DataError("domain '" + dom.name +
                      "': the fine-tuned baseline reached zero test error, so E_max would "
                      "be degenerate; use a harder domain, another seed, or more test data");
    reg.set_e_max(dom.name, baseline_error(ft.test_error));
  }

  const int gated = [&] {
    int n = 0;
    for (const ConvPlan& cp : bb.plan.convs)
      if (cp.gated) ++n;
    return n;
  }();

  for (float beta : cfg.budgets) {
    for (const DomainData& dom : data) {
      BudgetSpec spec;
      spec.beta = beta;
      spec.mode = cfg.mode;
      spec.lambda_lr = cfg.lambda_lr;
      say("training " + dom.name + " at budget " + budget_tag(beta));
      TrainResult tr = train_domain(bb, dom, spec, cfg.adapter_train);
      reg.add_adapter(tr.adapter, !tr.constraint_violated);
      const std::string trace_path =
          (fs::path(cfg.out_dir) / "traces" / (dom.name + "_b" + budget_tag(beta) + ".csv"))
              .string();
      write_text_atomic(trace_path, tr.trace.csv());
      result.artifacts.push_back(trace_path);
    }
  }

  // Score from what is on disk: reload every adapter, recompute compliance
  // from the stored masks, and require agreement with the manifest flag.
  std::string sweep = "domain,budget,error,e_max,partial,flop_fraction,param_bits,compliant\n";
  for (float beta : cfg.budgets) {
    std::vector<DomainScore> rows;
    std::vector<DomainAdapter> loaded;
    for (const DomainData& dom : data) {
      bool stored_flag = false;
      loaded.push_back(reg.resolve(dom.name, beta, &stored_flag));
      DomainAdapter& ad = loaded.back();

      BudgetSpec spec;
      spec.beta = beta;
      spec.mode = cfg.mode;
      spec.lambda_lr = cfg.lambda_lr;
      validate_budget(spec, gated);
      const bool recomputed = budget_compliant(ad, spec);
      if (recomputed != stored_flag)
        throw ComplianceError("stored compliance flag for (" + dom.name + ", " +
                              budget_tag(beta) + ") says " +
                              (stored_flag ? "compliant" : "violated") +
                              " but the stored masks say otherwise");

      DomainScore row;
      row.domain = dom.name;
      row.budget = beta;
      row.error = eval_error(bb, ad, dom.test);
      row.e_max = reg.e_max(dom.name);
      row.compliant = stored_flag;
      row.flop_fraction = flop_fraction(bb.plan, ad);
      row.param_bits = adapter_param_bits(bb.plan);
      rows.push_back(std::move(row));
    }
    std::vector<const DomainAdapter*> ptrs;
    for (const DomainAdapter& ad : loaded) ptrs.push_back(&ad);
    const double rel_flop = relative_flop(bb.plan, ptrs);
    const double rel_params = relative_params(bb.plan, loaded.size());
    ScoreReport report = assemble_report(std::move(rows), rel_flop, rel_params);

    for (const DomainScore& d : report.domains) {
      sweep += d.domain + "," + budget_tag(d.budget) + ",";
      append_csv_value(sweep, d.error);
      sweep += ",";
      append_csv_value(sweep, d.e_max);
      sweep += ",";
      append_csv_value(sweep, d.partial);
      sweep += ",";
      append_csv_value(sweep, d.flop_fraction);
      sweep += "," + std::to_string(d.param_bits) + ",";
      sweep += d.compliant ? "1" : "0";
      sweep += "\n";
    }

    const std::string report_path =
        (fs::path(cfg.out_dir) / ("report_b" + budget_tag(beta) + ".json")).string();
    write_text_atomic(report_path, report_json(report));
    result.artifacts.push_back(report_path);
    result.reports.push_back(std::move(report));
  }

  const std::string sweep_path = (fs::path(cfg.out_dir) / "sweep.csv").string();
  write_text_atomic(sweep_path, sweep);
  result.artifacts.push_back(sweep_path);
  result.sweep_csv = std::move(sweep);
  say("done; artifacts in " + cfg.out_dir);
  return result;
}

}  // namespace ba2

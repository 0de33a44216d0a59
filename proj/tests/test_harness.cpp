#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ba2/common.hpp"
#include "ba2/harness.hpp"
#include "ba2/store.hpp"

using namespace ba2;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"({
  "seed": 7,
  "out_dir": "OUTDIR",
  "net": {"input_h": 8, "input_w": 8, "input_c": 1,
          "stage_channels": [4, 8], "blocks_per_stage": 1},
  "budgets": [1.0, 0.5],
  "mode": "per-layer",
  "lambda_lr": 0.05,
  "train": {"epochs": 2, "batch": 16},
  "pretrain": {"epochs": 2, "batch": 16},
  "domains": [
    {"name": "gratings", "format": "synthetic", "family": "gratings",
     "seed": 5, "h": 8, "w": 8, "train": 64, "val": 16, "test": 16},
    {"name": "rings", "format": "synthetic", "family": "rings",
     "seed": 6, "h": 8, "w": 8, "train": 64, "val": 16, "test": 16}
  ]
})";

BenchConfig tiny_config(const std::string& out_dir) {
  std::string text = kTinyConfig;
  text.replace(text.find("OUTDIR"), 6, out_dir);
  return parse_bench_config(text);
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) : path(fs::temp_directory_path() / tag) {
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("ingest_dataset: formats and validation") {
  DatasetSpec s;
  s.name = "waves";
  s.format = "synthetic";
  s.family = "gratings";
  s.seed = 3;
  s.h = s.w = 8;
  s.train = 32;
  s.val = 8;
  s.test = 8;
  DomainData d = ingest_dataset(s);
  CHECK(d.name == "waves");  // spec name overrides the family name
  CHECK(d.train.count() == 32);
  CHECK(d.val.count() == 8);
  CHECK(d.test.count() == 8);
  CHECK(d.classes == 4);

  // count defaults to exactly the split total.
  DatasetSpec bigger = s;
  bigger.count = 64;
  CHECK(ingest_dataset(bigger).train.count() == 32);

  DatasetSpec bad = s;
  bad.classes = 7;
  CHECK_THROWS_AS(ingest_dataset(bad), ConfigError);
  bad = s;
  bad.family = "";
  CHECK_THROWS_AS(ingest_dataset(bad), ConfigError);
  bad = s;
  bad.format = "tar";
  CHECK_THROWS_AS(ingest_dataset(bad), ConfigError);
  bad = s;
  bad.test = 0;
  CHECK_THROWS_AS(ingest_dataset(bad), ConfigError);

  DatasetSpec idx = s;
  idx.format = "idx";
  CHECK_THROWS_AS(ingest_dataset(idx), ConfigError);  // no paths given
  idx.images = "/tmp/ba2_missing_images.idx";
  idx.labels = "/tmp/ba2_missing_labels.idx";
  CHECK_THROWS_AS(ingest_dataset(idx), DataError);  // paths given but absent

  DatasetSpec cf = s;
  cf.format = "cifar";
  CHECK_THROWS_AS(ingest_dataset(cf), ConfigError);
}

TEST_CASE("parse_bench_config: structure, defaults, strict keys") {
  BenchConfig cfg = tiny_config("/tmp/x");
  CHECK(cfg.seed == 7);
  CHECK(cfg.net.stage_channels == std::vector<int>{4, 8});
  CHECK(cfg.budgets == std::vector<float>{1.0f, 0.5f});
  CHECK(cfg.mode == ConstraintMode::PerLayer);
  CHECK(cfg.lambda_lr == 0.05);
  CHECK(cfg.adapter_train.epochs == 2);
  CHECK(cfg.adapter_train.head_lr == TrainConfig{}.head_lr);  // untouched default
  REQUIRE(cfg.domains.size() == 2);
  CHECK(cfg.domains[1].family == "rings");

  CHECK_THROWS_AS(parse_bench_config("{nope"), ConfigError);
  CHECK_THROWS_AS(parse_bench_config(R"({"sedd": 1})"), ConfigError);
  CHECK_THROWS_AS(parse_bench_config(R"({"net": {"imput_h": 8}})"), ConfigError);
  CHECK_THROWS_AS(parse_bench_config(R"({"train": {"epoch": 2}})"), ConfigError);
  CHECK_THROWS_AS(parse_bench_config(R"({"domains": [{"fmt": "idx"}]})"), ConfigError);
  CHECK_THROWS_AS(parse_bench_config(R"({"mode": "layered"})"), ConfigError);
  CHECK_THROWS_AS(parse_bench_config(R"({"seed": "seven"})"), ConfigError);

  // The config hash covers semantics, not artifact placement.
  BenchConfig a = tiny_config("/tmp/one");
  BenchConfig b = tiny_config("/tmp/two");
  CHECK(bench_config_hash(a) == bench_config_hash(b));
  BenchConfig c = a;
  c.lambda_lr = 0.06;
  CHECK(bench_config_hash(a) != bench_config_hash(c));
  BenchConfig d = a;
  d.domains[0].seed = 99;
  CHECK(bench_config_hash(a) != bench_config_hash(d));
}

TEST_CASE("run_benchmark: artifacts, schema, full-budget behavior, determinism") {
  TempDir run1("ba2_bench_run1");
  BenchConfig cfg = tiny_config(run1.path.string());
  BenchResult res = run_benchmark(cfg);

  REQUIRE(res.reports.size() == 2);
  REQUIRE(res.budgets == std::vector<float>{1.0f, 0.5f});

  // Budget 1.0: nothing to cut, so the constraint never engages.
  const ScoreReport& full = res.reports[0];
  REQUIRE(full.domains.size() == 2);
  CHECK(full.rel_flop <= 1.0);
  for (const DomainScore& d : full.domains) {
    CHECK(d.compliant);
    CHECK(d.error >= 0.0);
    CHECK(d.error <= 1.0);
    CHECK(d.flop_fraction <= 1.0);
  }

  // The full-budget lambda traces are identically zero.
  for (const char* name : {"gratings", "rings"}) {
    std::istringstream is(slurp((run1.path / "traces" / (std::string(name) + "_b1.csv")).string()));
    std::string line;
    std::getline(is, line);
    CHECK(line == "step,layer,theta_bar,lambda,loss");
    int rows = 0;
    while (std::getline(is, line)) {
      ++rows;
      std::istringstream ls(line);
      std::string step, layer, theta, lambda, loss;
      std::getline(ls, step, ',');
      std::getline(ls, layer, ',');
      std::getline(ls, theta, ',');
      std::getline(ls, lambda, ',');
      std::getline(ls, loss, ',');
      CHECK(lambda == "0");
    }
    CHECK(rows == 2 * 4 * 5);  // epochs x batches x gated layers
  }

  // Reports on disk parse and carry the exact schema.
  for (const char* tag : {"1", "0.5"}) {
    const nlohmann::json j =
        nlohmann::json::parse(slurp((run1.path / ("report_b" + std::string(tag) + ".json")).string()));
    REQUIRE(j.count("domains") == 1);
    REQUIRE(j.count("totals") == 1);
    CHECK(j["domains"].size() == 2);
    for (const auto& e : j["domains"]) {
      CHECK(e.size() == 7);
      for (const char* key :
           {"id", "budget", "error", "e_max", "flop_fraction", "param_bits", "compliant"})
        CHECK(e.count(key) == 1);
    }
    for (const char* key : {"S", "rel_flop", "rel_params", "S_O", "S_P"})
      CHECK(j["totals"].count(key) == 1);
  }

  // Sweep CSV: header plus one row per (domain, budget).
  std::istringstream sweep(res.sweep_csv);
  std::string line;
  std::getline(sweep, line);
  CHECK(line == "domain,budget,error,e_max,partial,flop_fraction,param_bits,compliant");
  std::vector<std::string> rows;
  while (std::getline(sweep, line)) rows.push_back(line);
  REQUIRE(rows.size() == 4);
  for (const std::string& r : rows) {
    const char last = r.back();
    CHECK((last == '0' || last == '1'));
  }
  CHECK(slurp((run1.path / "sweep.csv").string()) == res.sweep_csv);

  // The registry on disk is intact and resolvable.
  ModelRegistry reg = ModelRegistry::open((run1.path / "registry").string());
  CHECK(reg.verify().empty());
  CHECK(reg.list().size() == 4);
  CHECK(reg.has_e_max("gratings"));
  CHECK(reg.has_e_max("rings"));
  bool compliant = false;
  DomainAdapter ad = reg.resolve("gratings", 0.5f, &compliant);
  CHECK(ad.budget == 0.5f);

  // Same config, fresh output directory: byte-identical reports and sweep.
  TempDir run2("ba2_bench_run2");
  BenchConfig cfg2 = tiny_config(run2.path.string());
  BenchResult res2 = run_benchmark(cfg2);
  CHECK(res2.sweep_csv == res.sweep_csv);
  for (const char* tag : {"1", "0.5"}) {
    const std::string rel = "report_b" + std::string(tag) + ".json";
    CHECK(slurp((run1.path / rel).string()) == slurp((run2.path / rel).string()));
  }
  for (const char* trace : {"gratings_b1.csv", "gratings_b0.5.csv", "rings_b0.5.csv"})
    CHECK(slurp((run1.path / "traces" / trace).string()) ==
          slurp((run2.path / "traces" / trace).string()));
}

TEST_CASE("run_benchmark rejects degenerate configurations") {
  BenchConfig cfg = tiny_config("/tmp/ba2_bench_reject");
  BenchConfig no_domains = cfg;
  no_domains.domains.clear();
  CHECK_THROWS_AS(run_benchmark(no_domains), ConfigError);

  BenchConfig no_budgets = cfg;
  no_budgets.budgets.clear();
  CHECK_THROWS_AS(run_benchmark(no_budgets), ConfigError);

  BenchConfig dup = cfg;
  dup.budgets = {0.5f, 0.5f};
  CHECK_THROWS_AS(run_benchmark(dup), ConfigError);

  BenchConfig same_name = cfg;
  same_name.domains[1] = same_name.domains[0];
  CHECK_THROWS_AS(run_benchmark(same_name), ConfigError);
}

// Benchmark orchestration: dataset specs -> ingestion, config file parsing,
// and the end-to-end run (pretrain, per-domain baselines, per-(domain, budget)
// adapter training, persistence, scoring, artifact emission).
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ba2/budget.hpp"
#include "ba2/datasets.hpp"
#include "ba2/net.hpp"
#include "ba2/scoring.hpp"

namespace ba2 {

struct DatasetSpec {
  std::string name;
  std::string format;  // "idx" | "cifar" | "synthetic"

  std::string images, labels;      // idx pair
  std::vector<std::string> paths;  // cifar shards
  std::string family;              // synthetic family
  std::uint64_t seed = 0;          // synthetic stream
  int count = 0;                   // synthetic sample count (0 = train+val+test)
  int h = 16, w = 16;              // synthetic geometry

  int classes = 4;
  int train = 0, val = 0, test = 0;
  float mean = 0.5f, sd = 0.5f;
};

DomainData ingest_dataset(const DatasetSpec& spec);

struct BenchConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "bench-out";
  ResidualCnnConfig net;
  std::vector<float> budgets = {1.0f};
  ConstraintMode mode = ConstraintMode::PerLayer;
  double lambda_lr = 0.05;
  TrainConfig adapter_train;  // per-(domain, budget) runs
  TrainConfig full_train;     // backbone pretraining and fine-tuned baselines
  std::vector<DatasetSpec> domains;

  // Not part of the config identity; the CLI wires this to stderr.
  std::function<void(const std::string&)> progress;
};

BenchConfig parse_bench_config(const std::string& json_text);
BenchConfig load_bench_config(const std::string& path);

// Digest of the semantic config fields (out_dir and progress excluded), used
// as the registry's config_hash.
std::string bench_config_hash(const BenchConfig& cfg);

struct BenchResult {
  std::vector<float> budgets;
  std::vector<ScoreReport> reports;  // parallel to budgets
  std::string sweep_csv;             // also written to <out_dir>/sweep.csv
  std::vector<std::string> artifacts;
};

// Trains everything, persists adapters through the registry, re-loads each
// one, recomputes its compliance from the stored masks, and hard-fails on
// any disagreement with the stored flag before scoring.
BenchResult run_benchmark(const BenchConfig& cfg);

}  // namespace ba2

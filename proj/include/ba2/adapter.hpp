// Domain-adapter data model: batch-norm parameter sets banked per
// (domain, budget), per-layer switch vectors, and the per-domain classifier
// head. The backbone's convolution kernels are shared and frozen; everything
// here is the small per-domain state.
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ba2/common.hpp"
#include "ba2/switches.hpp"
#include "ba2/tensor.hpp"

namespace ba2 {

struct BnParams {
  std::vector<float> gamma, beta, running_mean, running_var;

  BnParams() = default;
  explicit BnParams(int channels)
      : gamma(static_cast<std::size_t>(channels), 1.0f),
        beta(static_cast<std::size_t>(channels), 0.0f),
        running_mean(static_cast<std::size_t>(channels), 0.0f),
        running_var(static_cast<std::size_t>(channels), 1.0f) {}

  int channels() const { return static_cast<int>(gamma.size()); }
};

struct BnKey {
  std::string domain;
  float budget = 1.0f;
  bool operator<(const BnKey& o) const {
    if (domain != o.domain) return domain < o.domain;
    return budget < o.budget;
  }
  bool operator==(const BnKey& o) const { return domain == o.domain && budget == o.budget; }
};

// One conv layer's batch-norm bank: an independent parameter set per
// (domain, budget). Entries never alias, so training one pair cannot touch
// another's statistics.
class BnBank {
 public:
  BnParams& add(const BnKey& key, BnParams p) {
    auto [it, inserted] = entries_.emplace(key, std::move(p));
    if (!inserted)
      throw ConfigError("BnBank: duplicate entry for (" + key.domain + ", " +
                        std::to_string(key.budget) + ")");
    return it->second;
  }

  bool has(const BnKey& key) const { return entries_.count(key) != 0; }

  BnParams& get(const BnKey& key) {
    auto it = entries_.find(key);
    if (it == entries_.end())
      throw ConfigError("BnBank: no entry for (" + key.domain + ", " +
                        std::to_string(key.budget) + ")");
    return it->second;
  }
  const BnParams& get(const BnKey& key) const { return const_cast<BnBank*>(this)->get(key); }

  std::size_t size() const { return entries_.size(); }

 private:
  std::map<BnKey, BnParams> entries_;
};

struct DenseParams {
  int in_features = 0, out_features = 0;
  std::vector<float> w;  // row-major (in_features, out_features)
  std::vector<float> b;
};

// Structured warning events (e.g. a layer whose switches are all off). These
// are not errors during training — gradient flow can revive channels — but
// callers get to observe them.
struct Warning {
  std::string layer;
  std::string kind;
  std::string message;
};
using WarningSink = std::function<void(const Warning&)>;

struct WarningLog {
  std::vector<Warning> events;
  WarningSink sink() {
    return [this](const Warning& w) { events.push_back(w); };
  }
};

// Everything trained for one (domain, budget) pair. Layer order follows the
// backbone's architecture plan; `gated[i]` marks layers under switch control
// (the stem runs ungated and its stored switches stay all-ones).
struct DomainAdapter {
  std::string domain;
  float budget = 1.0f;
  std::vector<SwitchVector> switches;   // one per conv layer, plan order
  std::vector<BnParams> bn;             // one per conv layer, plan order
  std::vector<std::uint8_t> gated;      // per conv layer: under budget control?
  DenseParams head;
  int classes = 0;
};

// Composed view of one conv layer as it runs for some (domain, budget):
// frozen backbone kernel + that pair's switches, with the layer's BN bank
// alongside. Non-owning.
struct AdaptedConvLayer {
  const Kernel<float>* kernel = nullptr;
  const SwitchVector* switches = nullptr;
  BnBank* bn = nullptr;
  int stride = 1;
  int padding = 0;
  std::string name;
};

}  // namespace ba2

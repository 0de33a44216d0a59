// Per-layer channel switches: a trainable real score per input channel,
// binarized by a hard threshold (score <= 0 turns the channel off). The
// binary cache is refreshed on every mutation, so readers never see a stale
// mask.
#pragma once

#include <cstdint>
#include <numeric>
#include <vector>

#include "ba2/common.hpp"

namespace ba2 {

// Initial switch score: positive, so every channel starts active, but small
// enough that a few penalty steps can push a channel below the threshold.
inline constexpr float kSwitchInit = 0.001f;

inline std::vector<std::uint8_t> binarize(const std::vector<float>& s_tilde) {
  std::vector<std::uint8_t> bits(s_tilde.size());
  for (std::size_t i = 0; i < s_tilde.size(); ++i) bits[i] = s_tilde[i] > 0.0f ? 1 : 0;
  return bits;
}

class SwitchVector {
 public:
  SwitchVector() = default;
  explicit SwitchVector(int channels) {
    if (channels <= 0) throw ShapeError("SwitchVector: channel count must be positive");
    scores_.assign(static_cast<std::size_t>(channels), kSwitchInit);
    bits_.assign(static_cast<std::size_t>(channels), 1);
  }

  int size() const { return static_cast<int>(scores_.size()); }

  const std::vector<float>& scores() const { return scores_; }
  const std::vector<std::uint8_t>& bits() const { return bits_; }

  void set_scores(std::vector<float> s) {
    scores_ = std::move(s);
    bits_ = binarize(scores_);
  }

  void set_score(int c, float v) {
    scores_.at(static_cast<std::size_t>(c)) = v;
    bits_[static_cast<std::size_t>(c)] = v > 0.0f ? 1 : 0;
  }

  int active() const {
    return std::accumulate(bits_.begin(), bits_.end(), 0,
                           [](int a, std::uint8_t b) { return a + (b ? 1 : 0); });
  }

  // Mean of the binarized switches — the layer's complexity fraction.
  double mean() const {
    if (bits_.empty()) throw ShapeError("SwitchVector: empty");
    return static_cast<double>(active()) / static_cast<double>(bits_.size());
  }

 private:
  std::vector<float> scores_;
  std::vector<std::uint8_t> bits_;
};

}  // namespace ba2

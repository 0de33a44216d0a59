// SGD-with-momentum and Adam over flat float vectors. Optimizer state is
// indexed by the position of each parameter in the step() list, so callers
// must pass the same parameters in the same order every step.
#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "ba2/common.hpp"

namespace ba2 {

struct ParamRef {
  std::vector<float>* p = nullptr;
  const std::vector<float>* g = nullptr;
};

namespace detail {
inline void check_refs(const std::vector<ParamRef>& refs,
                       std::vector<std::vector<float>>& state) {
  if (state.empty()) {
    state.reserve(refs.size());
    for (const ParamRef& r : refs) state.emplace_back(r.p->size(), 0.0f);
  }
  if (state.size() != refs.size())
    throw ConfigError("optimizer: parameter list changed between steps");
  for (std::size_t i = 0; i < refs.size(); ++i)
    if (!refs[i].p || !refs[i].g || refs[i].p->size() != refs[i].g->size() ||
        refs[i].p->size() != state[i].size())
      throw ShapeError("optimizer: parameter/gradient size mismatch");
}
}  // namespace detail

class SgdMomentum {
 public:
  SgdMomentum(float lr, float momentum) : lr(lr), momentum(momentum) {
    if (lr <= 0.0f) throw ConfigError("sgd: lr must be > 0");
  }

  void step(const std::vector<ParamRef>& refs) {
    detail::check_refs(refs, vel_);
    for (std::size_t i = 0; i < refs.size(); ++i) {
      std::vector<float>& p = *refs[i].p;
      const std::vector<float>& g = *refs[i].g;
      std::vector<float>& v = vel_[i];
      for (std::size_t j = 0; j < p.size(); ++j) {
        v[j] = momentum * v[j] + g[j];
        p[j] -= lr * v[j];
      }
    }
  }

  float lr;
  float momentum;

 private:
  std::vector<std::vector<float>> vel_;
};

class Adam {
 public:
  Adam(float lr, float b1 = 0.9f, float b2 = 0.999f, float eps = 1e-8f)
      : lr(lr), b1(b1), b2(b2), eps(eps) {
    if (lr <= 0.0f) throw ConfigError("adam: lr must be > 0");
  }

  void step(const std::vector<ParamRef>& refs) {
    detail::check_refs(refs, m_);
    detail::check_refs(refs, v_);
    ++t_;
    const double bc1 = 1.0 - std::pow(static_cast<double>(b1), static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(static_cast<double>(b2), static_cast<double>(t_));
    for (std::size_t i = 0; i < refs.size(); ++i) {
      std::vector<float>& p = *refs[i].p;
      const std::vector<float>& g = *refs[i].g;
      std::vector<float>& m = m_[i];
      std::vector<float>& v = v_[i];
      for (std::size_t j = 0; j < p.size(); ++j) {
        m[j] = b1 * m[j] + (1.0f - b1) * g[j];
        v[j] = b2 * v[j] + (1.0f - b2) * g[j] * g[j];
        const double mh = static_cast<double>(m[j]) / bc1;
        const double vh = static_cast<double>(v[j]) / bc2;
        p[j] -= static_cast<float>(static_cast<double>(lr) * mh / (std::sqrt(vh) + eps));
      }
    }
  }

  float lr;
  float b1, b2, eps;

 private:
  long t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

}  // namespace ba2

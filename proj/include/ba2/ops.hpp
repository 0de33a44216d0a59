// Forward/backward op set for small ConvNets: true 2-D convolution (kernel
// indexed with a sign flip, so an identity-impulse kernel reproduces the
// input), switch-masked convolution with straight-through switch gradients,
// batch norm, ReLU, pooling, dense, elementwise add, and softmax
// cross-entropy.
//
// Determinism contract: every reduction runs in a fixed order. Convolutions
// accumulate channel-major, then kernel rows, then kernel cols; batch norm
// and dense reduce in ascending index order. Repeated runs on identical
// inputs produce bit-identical outputs.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "ba2/common.hpp"
#include "ba2/tape.hpp"
#include "ba2/tensor.hpp"

namespace ba2 {

inline int conv_out_dim(int in, int extent, int stride, int pad) {
  const int span = in + 2 * pad - extent;
  if (span < 0)
    throw ShapeError("conv/pool window of extent " + std::to_string(extent) +
                     " exceeds padded input of size " + std::to_string(in + 2 * pad));
  return span / stride + 1;
}

// mask: per-input-channel bits, null means all channels active. The masked
// path and the plain path share this loop, so with an all-ones mask the
// arithmetic sequence is identical to the unmasked call.
template <typename T>
Tensor4<T> conv_forward_core(const Tensor4<T>& in, const Kernel<T>& k, int stride, int pad,
                             const std::uint8_t* mask) {
  validate_kernel(k);
  if (in.c != k.w)
    throw ShapeError("conv: input channels " + std::to_string(in.c) +
                     " != kernel C_in " + std::to_string(k.w));
  if (stride < 1) throw ShapeError("conv: stride must be >= 1");
  if (pad < 0) throw ShapeError("conv: padding must be >= 0");
  const int EH = k.n, EW = k.h, C = k.w, O = k.c;
  const int OH = conv_out_dim(in.h, EH, stride, pad);
  const int OW = conv_out_dim(in.w, EW, stride, pad);

  Tensor4<T> out(in.n, OH, OW, O);
  std::vector<T> acc(static_cast<std::size_t>(O));
  for (int n = 0; n < in.n; ++n) {
    for (int oi = 0; oi < OH; ++oi) {
      for (int oj = 0; oj < OW; ++oj) {
        std::fill(acc.begin(), acc.end(), T(0));
        for (int c = 0; c < C; ++c) {
          if (mask && !mask[c]) continue;
          for (int ah = 0; ah < EH; ++ah) {
            const int y = oi * stride - pad + (EH - 1) - ah;
            if (y < 0 || y >= in.h) continue;
            for (int aw = 0; aw < EW; ++aw) {
              const int x = oj * stride - pad + (EW - 1) - aw;
              if (x < 0 || x >= in.w) continue;
              const T iv = in.at(n, y, x, c);
              const T* kp = &k.v[k.idx(ah, aw, c, 0)];
              for (int o = 0; o < O; ++o) acc[o] += iv * kp[o];
            }
          }
        }
        T* op = &out.v[out.idx(n, oi, oj, 0)];
        for (int o = 0; o < O; ++o) op[o] = acc[o];
      }
    }
  }
  return out;
}

// Adjoint of the core above. din/dk receive contributions only for active
// channels (a gated channel contributes nothing to the output, so nothing
// flows back through it); ds, when given, receives <upstream, phi_c> for ALL
// channels — that is the straight-through switch gradient, and it requires
// walking inactive channels too.
template <typename T>
void conv_backward_core(const Tensor4<T>& in, const Kernel<T>& k, int stride, int pad,
                        const std::uint8_t* mask, const Tensor4<T>& up, Tensor4<T>* din,
                        Kernel<T>* dk, T* ds) {
  const int EH = k.n, EW = k.h, C = k.w, O = k.c;
  for (int n = 0; n < in.n; ++n) {
    for (int oi = 0; oi < up.h; ++oi) {
      for (int oj = 0; oj < up.w; ++oj) {
        const T* u = &up.v[up.idx(n, oi, oj, 0)];
        for (int c = 0; c < C; ++c) {
          const bool active = !mask || mask[c] != 0;
          if (!active && !ds) continue;
          for (int ah = 0; ah < EH; ++ah) {
            const int y = oi * stride - pad + (EH - 1) - ah;
            if (y < 0 || y >= in.h) continue;
            for (int aw = 0; aw < EW; ++aw) {
              const int x = oj * stride - pad + (EW - 1) - aw;
              if (x < 0 || x >= in.w) continue;
              const T iv = in.at(n, y, x, c);
              const T* kp = &k.v[k.idx(ah, aw, c, 0)];
              T dot = T(0);
              for (int o = 0; o < O; ++o) dot += u[o] * kp[o];
              if (ds) ds[c] += iv * dot;
              if (active) {
                if (din) din->at(n, y, x, c) += dot;
                if (dk) {
                  T* kg = &dk->v[dk->idx(ah, aw, c, 0)];
                  for (int o = 0; o < O; ++o) kg[o] += u[o] * iv;
                }
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
NodeId conv2d(Tape<T>& tape, NodeId x, NodeId kernel, int stride, int pad) {
  const Tensor4<T>& in = tape.val(x);
  const Kernel<T>& k = tape.val(kernel);
  require_finite(in, "conv2d input");
  require_finite(k, "conv2d kernel");
  NodeId out = tape.leaf(conv_forward_core(in, k, stride, pad, nullptr),
                         tape.needs_grad(x) || tape.needs_grad(kernel));
  tape.record(out, [x, kernel, out, stride, pad](Tape<T>& t) {
    const Tensor4<T>& up = t.grad(out);
    Tensor4<T>* din = t.needs_grad(x) ? &t.grad(x) : nullptr;
    Kernel<T>* dk = t.needs_grad(kernel) ? &t.grad(kernel) : nullptr;
    if (!din && !dk) return;
    conv_backward_core(t.val(x), t.val(kernel), stride, pad,
                       static_cast<const std::uint8_t*>(nullptr), up, din, dk,
                       static_cast<T*>(nullptr));
  });
  return out;
}

// Switch-masked convolution. `switches` is a (1,1,1,C_in) node holding the
// real-valued switch scores; they are binarized here (score <= 0 gates the
// channel off) and gated channels are skipped in the forward pass. The
// backward pass uses the identity straight-through rule: d(loss)/d(score_c)
// equals the gradient of the relaxed model sum_c s_c*phi_c at the binarized
// point, computed for every channel including gated ones.
template <typename T>
NodeId masked_conv(Tape<T>& tape, NodeId x, NodeId kernel, NodeId switches, int stride,
                   int pad) {
  const Tensor4<T>& in = tape.val(x);
  const Kernel<T>& k = tape.val(kernel);
  const Tensor4<T>& s = tape.val(switches);
  require_finite(in, "masked_conv input");
  require_finite(k, "masked_conv kernel");
  if (static_cast<int>(s.size()) != k.w)
    throw ShapeError("masked_conv: switch count " + std::to_string(s.size()) +
                     " != kernel C_in " + std::to_string(k.w));
  std::vector<std::uint8_t> mask(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) mask[i] = s.v[i] > T(0) ? 1 : 0;

  NodeId out = tape.leaf(
      conv_forward_core(in, k, stride, pad, mask.data()),
      tape.needs_grad(x) || tape.needs_grad(kernel) || tape.needs_grad(switches));
  tape.record(out, [x, kernel, switches, out, stride, pad, mask](Tape<T>& t) {
    const Tensor4<T>& up = t.grad(out);
    Tensor4<T>* din = t.needs_grad(x) ? &t.grad(x) : nullptr;
    Kernel<T>* dk = t.needs_grad(kernel) ? &t.grad(kernel) : nullptr;
    T* ds = t.needs_grad(switches) ? t.grad(switches).v.data() : nullptr;
    if (!din && !dk && !ds) return;
    conv_backward_core(t.val(x), t.val(kernel), stride, pad, mask.data(), up, din, dk, ds);
  });
  return out;
}

enum class BnMode { Train, Eval };

// Running statistics live outside the tape (they alias the owning model's
// storage); train mode writes them (running = (1-momentum)*running +
// momentum*batch) but never reads them. Batch variance is the biased (1/m)
// estimate, both for normalization and for the running update.
template <typename T>
struct BnStats {
  std::vector<T>* mean = nullptr;
  std::vector<T>* var = nullptr;
};

template <typename T>
NodeId batchnorm(Tape<T>& tape, NodeId x, NodeId gamma, NodeId beta, BnStats<T> stats,
                 BnMode mode, T momentum, T eps) {
  const Tensor4<T>& in = tape.val(x);
  const int C = in.c;
  if (static_cast<int>(tape.val(gamma).size()) != C ||
      static_cast<int>(tape.val(beta).size()) != C)
    throw ShapeError("batchnorm: gamma/beta length != channel count");
  if (eps <= T(0)) throw ConfigError("batchnorm: epsilon must be > 0");
  const bool has_stats = stats.mean != nullptr && stats.var != nullptr;
  if (has_stats && (static_cast<int>(stats.mean->size()) != C ||
                    static_cast<int>(stats.var->size()) != C))
    throw ShapeError("batchnorm: running stats length != channel count");
  const std::size_t m = in.size() / static_cast<std::size_t>(C);
  if (mode == BnMode::Train && m == 0) throw ShapeError("batchnorm: empty batch in train mode");

  std::vector<T> mu(C), inv_sd(C);
  if (mode == BnMode::Train) {
    std::vector<double> sum(C, 0.0), sq(C, 0.0);
    for (std::size_t i = 0; i < in.size(); ++i) sum[i % C] += static_cast<double>(in.v[i]);
    for (int c = 0; c < C; ++c) mu[c] = static_cast<T>(sum[c] / static_cast<double>(m));
    for (std::size_t i = 0; i < in.size(); ++i) {
      const double d = static_cast<double>(in.v[i]) - static_cast<double>(mu[i % C]);
      sq[i % C] += d * d;
    }
    for (int c = 0; c < C; ++c) {
      const T var = static_cast<T>(sq[c] / static_cast<double>(m));
      inv_sd[c] = T(1) / std::sqrt(var + eps);
      if (has_stats) {
        (*stats.mean)[c] = (T(1) - momentum) * (*stats.mean)[c] + momentum * mu[c];
        (*stats.var)[c] = (T(1) - momentum) * (*stats.var)[c] + momentum * var;
      }
    }
  } else {
    if (!has_stats) throw ConfigError("batchnorm: eval mode requires running stats");
    for (int c = 0; c < C; ++c) {
      mu[c] = (*stats.mean)[c];
      inv_sd[c] = T(1) / std::sqrt((*stats.var)[c] + eps);
    }
  }

  Tensor4<T> outv = Tensor4<T>::zeros_like(in);
  const Tensor4<T>& g = tape.val(gamma);
  const Tensor4<T>& b = tape.val(beta);
  for (std::size_t i = 0; i < in.size(); ++i) {
    const int c = static_cast<int>(i % C);
    outv.v[i] = g.v[c] * (in.v[i] - mu[c]) * inv_sd[c] + b.v[c];
  }
  NodeId out = tape.leaf(std::move(outv), tape.needs_grad(x) || tape.needs_grad(gamma) ||
                                              tape.needs_grad(beta));

  tape.record(out, [x, gamma, beta, out, mu, inv_sd, mode, C, m](Tape<T>& t) {
    const Tensor4<T>& up = t.grad(out);
    const Tensor4<T>& in = t.val(x);
    const Tensor4<T>& g = t.val(gamma);
    // Per-channel reductions of upstream and upstream*xhat, needed for both
    // the parameter grads and (in train mode) the input grad.
    std::vector<double> su(C, 0.0), sux(C, 0.0);
    for (std::size_t i = 0; i < in.size(); ++i) {
      const int c = static_cast<int>(i % C);
      const double xh = static_cast<double>((in.v[i] - mu[c]) * inv_sd[c]);
      su[c] += static_cast<double>(up.v[i]);
      sux[c] += static_cast<double>(up.v[i]) * xh;
    }
    if (t.needs_grad(gamma)) {
      Tensor4<T>& dg = t.grad(gamma);
      for (int c = 0; c < C; ++c) dg.v[c] += static_cast<T>(sux[c]);
    }
    if (t.needs_grad(beta)) {
      Tensor4<T>& db = t.grad(beta);
      for (int c = 0; c < C; ++c) db.v[c] += static_cast<T>(su[c]);
    }
    if (!t.needs_grad(x)) return;
    Tensor4<T>& dx = t.grad(x);
    if (mode == BnMode::Eval) {
      for (std::size_t i = 0; i < in.size(); ++i) {
        const int c = static_cast<int>(i % C);
        dx.v[i] += up.v[i] * g.v[c] * inv_sd[c];
      }
      return;
    }
    const double inv_m = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < in.size(); ++i) {
      const int c = static_cast<int>(i % C);
      const double xh = static_cast<double>((in.v[i] - mu[c]) * inv_sd[c]);
      const double term = static_cast<double>(up.v[i]) - su[c] * inv_m - xh * sux[c] * inv_m;
      dx.v[i] += static_cast<T>(static_cast<double>(g.v[c] * inv_sd[c]) * term);
    }
  });
  return out;
}

template <typename T>
NodeId relu(Tape<T>& tape, NodeId x) {
  const Tensor4<T>& in = tape.val(x);
  Tensor4<T> outv = Tensor4<T>::zeros_like(in);
  for (std::size_t i = 0; i < in.size(); ++i) outv.v[i] = in.v[i] > T(0) ? in.v[i] : T(0);
  NodeId out = tape.leaf(std::move(outv), tape.needs_grad(x));
  tape.record(out, [x, out](Tape<T>& t) {
    if (!t.needs_grad(x)) return;
    const Tensor4<T>& up = t.grad(out);
    const Tensor4<T>& in = t.val(x);
    Tensor4<T>& dx = t.grad(x);
    for (std::size_t i = 0; i < in.size(); ++i)
      if (in.v[i] > T(0)) dx.v[i] += up.v[i];
  });
  return out;
}

template <typename T>
NodeId avgpool2d(Tape<T>& tape, NodeId x, int win_h, int win_w, int stride) {
  const Tensor4<T>& in = tape.val(x);
  const int OH = conv_out_dim(in.h, win_h, stride, 0);
  const int OW = conv_out_dim(in.w, win_w, stride, 0);
  Tensor4<T> outv(in.n, OH, OW, in.c);
  const T inv = T(1) / static_cast<T>(win_h * win_w);
  for (int n = 0; n < in.n; ++n)
    for (int oi = 0; oi < OH; ++oi)
      for (int oj = 0; oj < OW; ++oj)
        for (int c = 0; c < in.c; ++c) {
          T acc = T(0);
          for (int a = 0; a < win_h; ++a)
            for (int b = 0; b < win_w; ++b) acc += in.at(n, oi * stride + a, oj * stride + b, c);
          outv.at(n, oi, oj, c) = acc * inv;
        }
  NodeId out = tape.leaf(std::move(outv), tape.needs_grad(x));
  tape.record(out, [x, out, win_h, win_w, stride, inv](Tape<T>& t) {
    if (!t.needs_grad(x)) return;
    const Tensor4<T>& up = t.grad(out);
    Tensor4<T>& dx = t.grad(x);
    for (int n = 0; n < up.n; ++n)
      for (int oi = 0; oi < up.h; ++oi)
        for (int oj = 0; oj < up.w; ++oj)
          for (int c = 0; c < up.c; ++c) {
            const T u = up.at(n, oi, oj, c) * inv;
            for (int a = 0; a < win_h; ++a)
              for (int b = 0; b < win_w; ++b)
                dx.at(n, oi * stride + a, oj * stride + b, c) += u;
          }
  });
  return out;
}

template <typename T>
NodeId maxpool2d(Tape<T>& tape, NodeId x, int win_h, int win_w, int stride) {
  const Tensor4<T>& in = tape.val(x);
  const int OH = conv_out_dim(in.h, win_h, stride, 0);
  const int OW = conv_out_dim(in.w, win_w, stride, 0);
  Tensor4<T> outv(in.n, OH, OW, in.c);
  // First strictly-greater element wins, so ties resolve to the earliest
  // window position in row-major order.
  auto argmax = std::make_shared<std::vector<std::size_t>>(outv.size());
  for (int n = 0; n < in.n; ++n)
    for (int oi = 0; oi < OH; ++oi)
      for (int oj = 0; oj < OW; ++oj)
        for (int c = 0; c < in.c; ++c) {
          T best = in.at(n, oi * stride, oj * stride, c);
          std::size_t best_i = in.idx(n, oi * stride, oj * stride, c);
          for (int a = 0; a < win_h; ++a)
            for (int b = 0; b < win_w; ++b) {
              const T val = in.at(n, oi * stride + a, oj * stride + b, c);
              if (val > best) {
                best = val;
                best_i = in.idx(n, oi * stride + a, oj * stride + b, c);
              }
            }
          outv.at(n, oi, oj, c) = best;
          (*argmax)[outv.idx(n, oi, oj, c)] = best_i;
        }
  NodeId out = tape.leaf(std::move(outv), tape.needs_grad(x));
  tape.record(out, [x, out, argmax](Tape<T>& t) {
    if (!t.needs_grad(x)) return;
    const Tensor4<T>& up = t.grad(out);
    Tensor4<T>& dx = t.grad(x);
    for (std::size_t i = 0; i < up.size(); ++i) dx.v[(*argmax)[i]] += up.v[i];
  });
  return out;
}

// Fully connected layer over the flattened (H,W,C) features of each batch
// element. weight is (1,1,F,O), bias (1,1,1,O); output (N,1,1,O).
template <typename T>
NodeId dense(Tape<T>& tape, NodeId x, NodeId weight, NodeId bias) {
  const Tensor4<T>& in = tape.val(x);
  const Tensor4<T>& wt = tape.val(weight);
  const Tensor4<T>& bs = tape.val(bias);
  const int F = in.h * in.w * in.c;
  const int O = wt.c;
  if (wt.w != F)
    throw ShapeError("dense: weight expects " + std::to_string(wt.w) + " features, input has " +
                     std::to_string(F));
  if (static_cast<int>(bs.size()) != O) throw ShapeError("dense: bias length != output size");
  Tensor4<T> outv(in.n, 1, 1, O);
  for (int n = 0; n < in.n; ++n) {
    const T* xp = &in.v[static_cast<std::size_t>(n) * F];
    T* op = &outv.v[static_cast<std::size_t>(n) * O];
    for (int o = 0; o < O; ++o) op[o] = bs.v[o];
    for (int f = 0; f < F; ++f) {
      const T xv = xp[f];
      const T* wp = &wt.v[static_cast<std::size_t>(f) * O];
      for (int o = 0; o < O; ++o) op[o] += xv * wp[o];
    }
  }
  NodeId out = tape.leaf(std::move(outv), tape.needs_grad(x) || tape.needs_grad(weight) ||
                                              tape.needs_grad(bias));
  tape.record(out, [x, weight, bias, out, F, O](Tape<T>& t) {
    const Tensor4<T>& up = t.grad(out);
    const Tensor4<T>& in = t.val(x);
    const Tensor4<T>& wt = t.val(weight);
    const int N = in.n;
    if (t.needs_grad(bias)) {
      Tensor4<T>& db = t.grad(bias);
      for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o) db.v[o] += up.v[static_cast<std::size_t>(n) * O + o];
    }
    if (t.needs_grad(weight)) {
      Tensor4<T>& dw = t.grad(weight);
      for (int n = 0; n < N; ++n) {
        const T* xp = &in.v[static_cast<std::size_t>(n) * F];
        const T* u = &up.v[static_cast<std::size_t>(n) * O];
        for (int f = 0; f < F; ++f) {
          T* wg = &dw.v[static_cast<std::size_t>(f) * O];
          const T xv = xp[f];
          for (int o = 0; o < O; ++o) wg[o] += xv * u[o];
        }
      }
    }
    if (t.needs_grad(x)) {
      Tensor4<T>& dx = t.grad(x);
      for (int n = 0; n < N; ++n) {
        T* xg = &dx.v[static_cast<std::size_t>(n) * F];
        const T* u = &up.v[static_cast<std::size_t>(n) * O];
        for (int f = 0; f < F; ++f) {
          const T* wp = &wt.v[static_cast<std::size_t>(f) * O];
          T acc = T(0);
          for (int o = 0; o < O; ++o) acc += wp[o] * u[o];
          xg[f] += acc;
        }
      }
    }
  });
  return out;
}

template <typename T>
NodeId add(Tape<T>& tape, NodeId a, NodeId b) {
  const Tensor4<T>& av = tape.val(a);
  const Tensor4<T>& bv = tape.val(b);
  if (!av.same_shape(bv))
    throw ShapeError("add: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
  Tensor4<T> outv = Tensor4<T>::zeros_like(av);
  for (std::size_t i = 0; i < av.size(); ++i) outv.v[i] = av.v[i] + bv.v[i];
  NodeId out = tape.leaf(std::move(outv), tape.needs_grad(a) || tape.needs_grad(b));
  tape.record(out, [a, b, out](Tape<T>& t) {
    const Tensor4<T>& up = t.grad(out);
    if (t.needs_grad(a)) {
      Tensor4<T>& da = t.grad(a);
      for (std::size_t i = 0; i < up.size(); ++i) da.v[i] += up.v[i];
    }
    if (t.needs_grad(b)) {
      Tensor4<T>& db = t.grad(b);
      for (std::size_t i = 0; i < up.size(); ++i) db.v[i] += up.v[i];
    }
  });
  return out;
}

// Scalar readout: sum_i w[i]*x[i] over the flattened tensor. Used to reduce
// arbitrary op outputs to a differentiable scalar.
template <typename T>
NodeId weighted_sum(Tape<T>& tape, NodeId x, const std::vector<T>& wts) {
  const Tensor4<T>& in = tape.val(x);
  if (wts.size() != in.size())
    throw ShapeError("weighted_sum: weight count != element count");
  Tensor4<T> outv(1, 1, 1, 1);
  T acc = T(0);
  for (std::size_t i = 0; i < in.size(); ++i) acc += wts[i] * in.v[i];
  outv.v[0] = acc;
  NodeId out = tape.leaf(std::move(outv), tape.needs_grad(x));
  tape.record(out, [x, out, wts](Tape<T>& t) {
    if (!t.needs_grad(x)) return;
    const T u = t.grad(out).v[0];
    Tensor4<T>& dx = t.grad(x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx.v[i] += u * wts[i];
  });
  return out;
}

template <typename T>
struct SceResult {
  NodeId loss;          // scalar node: mean cross-entropy over the batch
  Tensor4<T> probs;     // (N,1,1,K) softmax probabilities (value only)
};

template <typename T>
SceResult<T> softmax_cross_entropy(Tape<T>& tape, NodeId logits,
                                   const std::vector<int>& labels) {
  const Tensor4<T>& z = tape.val(logits);
  const int N = z.n, K = z.c;
  if (z.h != 1 || z.w != 1) throw ShapeError("softmax_cross_entropy: logits must be (N,1,1,K)");
  if (static_cast<int>(labels.size()) != N)
    throw ShapeError("softmax_cross_entropy: label count != batch size");
  for (int n = 0; n < N; ++n)
    if (labels[n] < 0 || labels[n] >= K)
      throw DataError("softmax_cross_entropy: label " + std::to_string(labels[n]) +
                      " out of range [0," + std::to_string(K) + ")");

  Tensor4<T> probs(N, 1, 1, K);
  double total = 0.0;
  for (int n = 0; n < N; ++n) {
    const T* zp = &z.v[static_cast<std::size_t>(n) * K];
    T zmax = zp[0];
    for (int k = 1; k < K; ++k) zmax = std::max(zmax, zp[k]);
    double denom = 0.0;
    for (int k = 0; k < K; ++k) denom += std::exp(static_cast<double>(zp[k] - zmax));
    const double log_denom = std::log(denom);
    for (int k = 0; k < K; ++k)
      probs.v[static_cast<std::size_t>(n) * K + k] =
          static_cast<T>(std::exp(static_cast<double>(zp[k] - zmax)) / denom);
    total += log_denom - static_cast<double>(zp[labels[n]] - zmax);
  }
  Tensor4<T> lossv(1, 1, 1, 1);
  lossv.v[0] = static_cast<T>(total / static_cast<double>(N));
  NodeId loss = tape.leaf(std::move(lossv), tape.needs_grad(logits));

  tape.record(loss, [logits, loss, labels, probs, N, K](Tape<T>& t) {
    if (!t.needs_grad(logits)) return;
    const T u = t.grad(loss).v[0];
    Tensor4<T>& dz = t.grad(logits);
    const T inv_n = T(1) / static_cast<T>(N);
    for (int n = 0; n < N; ++n)
      for (int k = 0; k < K; ++k) {
        T p = probs.v[static_cast<std::size_t>(n) * K + k];
        if (k == labels[n]) p -= T(1);
        dz.v[static_cast<std::size_t>(n) * K + k] += u * p * inv_n;
      }
  });
  return SceResult<T>{loss, std::move(probs)};
}

}  // namespace ba2

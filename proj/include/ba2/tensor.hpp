// Dense rank-4 tensors, row-major (N, H, W, C).
//
// Convolution kernels reuse the same container with the dims interpreted as
// (kh, kw, cin, cout); helpers that expect a kernel validate that shape.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ba2/common.hpp"

namespace ba2 {

template <typename T>
struct Tensor4 {
  int n = 0, h = 0, w = 0, c = 0;
  std::vector<T> v;

  Tensor4() = default;
  Tensor4(int n_, int h_, int w_, int c_, T fill = T(0)) : n(n_), h(h_), w(w_), c(c_) {
    if (n_ < 0 || h_ < 0 || w_ < 0 || c_ < 0)
      throw ShapeError("tensor dims must be nonnegative");
    v.assign(static_cast<std::size_t>(n_) * h_ * w_ * c_, fill);
  }

  static Tensor4 zeros_like(const Tensor4& o) { return Tensor4(o.n, o.h, o.w, o.c); }

  std::size_t size() const { return v.size(); }

  std::size_t idx(int in, int ih, int iw, int ic) const {
    return ((static_cast<std::size_t>(in) * h + ih) * w + iw) * c + ic;
  }

  T& at(int in, int ih, int iw, int ic) { return v[idx(in, ih, iw, ic)]; }
  const T& at(int in, int ih, int iw, int ic) const { return v[idx(in, ih, iw, ic)]; }

  bool same_shape(const Tensor4& o) const {
    return n == o.n && h == o.h && w == o.w && c == o.c;
  }

  std::string shape_str() const {
    return "(" + std::to_string(n) + "," + std::to_string(h) + "," + std::to_string(w) +
           "," + std::to_string(c) + ")";
  }

  template <typename U>
  Tensor4<U> cast() const {
    Tensor4<U> out(n, h, w, c);
    for (std::size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
    return out;
  }
};

// Kernel view of a Tensor4: dims are (kh, kw, cin, cout).
template <typename T>
using Kernel = Tensor4<T>;

template <typename T>
inline T kernel_at(const Kernel<T>& k, int ah, int aw, int ic, int io) {
  return k.at(ah, aw, ic, io);
}

// Kernels must have odd spatial extents so the center tap is well defined.
template <typename T>
inline void validate_kernel(const Kernel<T>& k) {
  if (k.n < 1 || k.w < 1 || k.c < 1 || k.h < 1)
    throw ShapeError("kernel dims must be positive, got " + k.shape_str());
  if (k.n % 2 == 0 || k.h % 2 == 0)
    throw ShapeError("kernel spatial extents must be odd, got " + k.shape_str());
}

template <typename T>
inline void require_finite(const Tensor4<T>& t, const char* what) {
  for (const T& x : t.v)
    if (!std::isfinite(static_cast<double>(x)))
      throw DataError(std::string(what) + ": non-finite value");
}

}  // namespace ba2

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <vector>

#include "eced/autograd.hpp"

namespace eced::ops {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

namespace detail {

template <typename T, typename F>
Tensor<T> map_unary(const Tensor<T>& x, F f) {
  Tensor<T> out = Tensor<T>::like(x);
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(x[i]);
  return out;
}

inline void require_rank(const Shape& s, int r, const char* op) {
  if (static_cast<int>(s.size()) != r)
    throw ShapeError(std::string(op) + " expects rank " + std::to_string(r) + ", got " + shape_str(s));
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  a.value().require_same_shape(b.value(), "add");
  return make_op<T>(a.value() + b.value(), {a, b}, [a, b](const Tensor<T>& g) {
    push_grad(a, g);
    push_grad(b, g);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  a.value().require_same_shape(b.value(), "sub");
  return make_op<T>(a.value() - b.value(), {a, b}, [a, b](const Tensor<T>& g) {
    push_grad(a, g);
    if (b.requires_grad()) push_grad(b, g * T(-1));
  });
}

// ca * a + cb * b
template <typename T>
Var<T> lincomb(const Var<T>& a, T ca, const Var<T>& b, T cb) {
  a.value().require_same_shape(b.value(), "lincomb");
  Tensor<T> out = Tensor<T>::like(a.value());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ca * a.value()[i] + cb * b.value()[i];
  return make_op<T>(std::move(out), {a, b}, [a, b, ca, cb](const Tensor<T>& g) {
    if (a.requires_grad()) push_grad(a, g * ca);
    if (b.requires_grad()) push_grad(b, g * cb);
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  a.value().require_same_shape(b.value(), "mul");
  Tensor<T> out = Tensor<T>::like(a.value());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_op<T>(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
    if (a.requires_grad()) {
      Tensor<T> ga = Tensor<T>::like(g);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * b.value()[i];
      push_grad(a, ga);
    }
    if (b.requires_grad()) {
      Tensor<T> gb = Tensor<T>::like(g);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * a.value()[i];
      push_grad(b, gb);
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  return make_op<T>(a.value() * s, {a}, [a, s](const Tensor<T>& g) { push_grad(a, g * s); });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  return make_op<T>(detail::map_unary(a.value(), [s](T v) { return v + s; }), {a},
                    [a](const Tensor<T>& g) { push_grad(a, g); });
}

// Elementwise product with a constant tensor of the same shape.
template <typename T>
Var<T> mul_const(const Var<T>& a, const Tensor<T>& c) {
  a.value().require_same_shape(c, "mul_const");
  Tensor<T> out = Tensor<T>::like(c);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * c[i];
  return make_op<T>(std::move(out), {a}, [a, c](const Tensor<T>& g) {
    Tensor<T> ga = Tensor<T>::like(g);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * c[i];
    push_grad(a, ga);
  });
}

// Adds a constant tensor of the same shape.
template <typename T>
Var<T> add_const(const Var<T>& a, const Tensor<T>& c) {
  return make_op<T>(a.value() + c, {a}, [a](const Tensor<T>& g) { push_grad(a, g); });
}

// Selects fg where mask(h, w) != 0 and bg elsewhere; mask broadcasts over N and C.
// The selection copies values, so unmasked cells equal bg bit-for-bit.
template <typename T>
Var<T> select_hw(const Var<T>& fg, const Var<T>& bg, const Tensor<T>& mask) {
  fg.value().require_same_shape(bg.value(), "select_hw");
  detail::require_rank(fg.shape(), 4, "select_hw");
  const int N = fg.dim(0), C = fg.dim(1), H = fg.dim(2), W = fg.dim(3);
  if (mask.size() != static_cast<std::size_t>(H * W))
    throw ShapeError("select_hw: mask " + shape_str(mask.shape()) + " vs latent " + shape_str(fg.shape()));
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  Tensor<T> out = Tensor<T>::like(fg.value());
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * C + c) * hw;
      for (std::size_t i = 0; i < hw; ++i)
        out[base + i] = mask[i] != T(0) ? fg.value()[base + i] : bg.value()[base + i];
    }
  return make_op<T>(std::move(out), {fg, bg}, [fg, bg, mask, N, C, hw](const Tensor<T>& g) {
    Tensor<T> gf = Tensor<T>::like(g), gb = Tensor<T>::like(g);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const std::size_t base = (static_cast<std::size_t>(n) * C + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) (mask[i] != T(0) ? gf : gb)[base + i] = g[base + i];
      }
    push_grad(fg, gf);
    push_grad(bg, gb);
  });
}

// Multiplies by a constant (h, w) map broadcast over N and C.
template <typename T>
Var<T> mul_hw(const Var<T>& x, const Tensor<T>& mask) {
  detail::require_rank(x.shape(), 4, "mul_hw");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (mask.size() != static_cast<std::size_t>(H * W)) throw ShapeError("mul_hw: mask size mismatch");
  Tensor<T> full(x.shape());
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  for (int nc = 0; nc < N * C; ++nc)
    for (std::size_t i = 0; i < hw; ++i) full[nc * hw + i] = mask[i];
  return mul_const(x, full);
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return make_op<T>(detail::map_unary(x.value(), [](T v) { return v > T(0) ? v : T(0); }), {x},
                    [x](const Tensor<T>& g) {
                      Tensor<T> gx = Tensor<T>::like(g);
                      for (std::size_t i = 0; i < g.size(); ++i) gx[i] = x.value()[i] > T(0) ? g[i] : T(0);
                      push_grad(x, gx);
                    });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> y = detail::map_unary(x.value(), [](T v) { return T(1) / (T(1) + std::exp(-v)); });
  return make_op<T>(y, {x}, [x, y](const Tensor<T>& g) {
    Tensor<T> gx = Tensor<T>::like(g);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * y[i] * (T(1) - y[i]);
    push_grad(x, gx);
  });
}

template <typename T>
Var<T> silu(const Var<T>& x) {
  Tensor<T> s = detail::map_unary(x.value(), [](T v) { return T(1) / (T(1) + std::exp(-v)); });
  Tensor<T> y = Tensor<T>::like(s);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x.value()[i] * s[i];
  return make_op<T>(std::move(y), {x}, [x, s](const Tensor<T>& g) {
    Tensor<T> gx = Tensor<T>::like(g);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = x.value()[i];
      gx[i] = g[i] * s[i] * (T(1) + v * (T(1) - s[i]));
    }
    push_grad(x, gx);
  });
}

template <typename T>
Var<T> exp(const Var<T>& x) {
  Tensor<T> y = detail::map_unary(x.value(), [](T v) { return std::exp(v); });
  return make_op<T>(y, {x}, [x, y](const Tensor<T>& g) {
    Tensor<T> gx = Tensor<T>::like(g);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * y[i];
    push_grad(x, gx);
  });
}

template <typename T>
Var<T> square(const Var<T>& x) {
  return make_op<T>(detail::map_unary(x.value(), [](T v) { return v * v; }), {x}, [x](const Tensor<T>& g) {
    Tensor<T> gx = Tensor<T>::like(g);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] = T(2) * x.value()[i] * g[i];
    push_grad(x, gx);
  });
}

// |x|^p elementwise, p > 0.
template <typename T>
Var<T> abs_pow(const Var<T>& x, T p) {
  return make_op<T>(detail::map_unary(x.value(), [p](T v) { return std::pow(std::abs(v), p); }), {x},
                    [x, p](const Tensor<T>& g) {
                      Tensor<T> gx = Tensor<T>::like(g);
                      for (std::size_t i = 0; i < g.size(); ++i) {
                        const T v = x.value()[i];
                        if (v == T(0)) continue;
                        const T sgn = v > T(0) ? T(1) : T(-1);
                        gx[i] = g[i] * p * std::pow(std::abs(v), p - T(1)) * sgn;
                      }
                      push_grad(x, gx);
                    });
}

// Scalar power s^q for a nonnegative scalar; derivative is taken as 0 at s = 0.
template <typename T>
Var<T> pow_scalar(const Var<T>& s, T q) {
  if (s.size() != 1) throw ShapeError("pow_scalar expects a scalar");
  const T v = s.value()[0];
  return make_op<T>(Tensor<T>({1}, std::vector<T>{std::pow(v, q)}), {s}, [s, q, v](const Tensor<T>& g) {
    T d = v > T(0) ? q * std::pow(v, q - T(1)) : T(0);
    push_grad(s, Tensor<T>({1}, std::vector<T>{g[0] * d}));
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  return make_op<T>(Tensor<T>({1}, std::vector<T>{x.value().sum()}), {x},
                    [x](const Tensor<T>& g) { push_grad(x, Tensor<T>::like(x.value(), g[0])); });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  const T inv = T(1) / static_cast<T>(x.size());
  return make_op<T>(Tensor<T>({1}, std::vector<T>{x.value().sum() * inv}), {x},
                    [x, inv](const Tensor<T>& g) { push_grad(x, Tensor<T>::like(x.value(), g[0] * inv)); });
}

// ---------------------------------------------------------------- structural

template <typename T>
Var<T> reshape(const Var<T>& x, Shape s) {
  Shape orig = x.shape();
  return make_op<T>(x.value().reshaped(std::move(s)), {x},
                    [x, orig](const Tensor<T>& g) { push_grad(x, g.reshaped(orig)); });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  detail::require_rank(a.shape(), 4, "concat_channels");
  detail::require_rank(b.shape(), 4, "concat_channels");
  const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
  if (b.dim(0) != N || b.dim(2) != H || b.dim(3) != W) throw ShapeError("concat_channels: spatial mismatch");
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  Tensor<T> out({N, Ca + Cb, H, W});
  for (int n = 0; n < N; ++n) {
    std::copy_n(a.value().data() + n * Ca * hw, Ca * hw, out.data() + n * (Ca + Cb) * hw);
    std::copy_n(b.value().data() + n * Cb * hw, Cb * hw, out.data() + (n * (Ca + Cb) + Ca) * hw);
  }
  return make_op<T>(std::move(out), {a, b}, [a, b, N, Ca, Cb, hw](const Tensor<T>& g) {
    Tensor<T> ga = Tensor<T>::like(a.value()), gb = Tensor<T>::like(b.value());
    for (int n = 0; n < N; ++n) {
      std::copy_n(g.data() + n * (Ca + Cb) * hw, Ca * hw, ga.data() + n * Ca * hw);
      std::copy_n(g.data() + (n * (Ca + Cb) + Ca) * hw, Cb * hw, gb.data() + n * Cb * hw);
    }
    push_grad(a, ga);
    push_grad(b, gb);
  });
}

template <typename T>
Var<T> slice_channels(const Var<T>& x, int c0, int c1) {
  detail::require_rank(x.shape(), 4, "slice_channels");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (c0 < 0 || c1 > C || c0 >= c1) throw ShapeError("slice_channels: bad range");
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  const int Cs = c1 - c0;
  Tensor<T> out({N, Cs, H, W});
  for (int n = 0; n < N; ++n) std::copy_n(x.value().data() + (n * C + c0) * hw, Cs * hw, out.data() + n * Cs * hw);
  return make_op<T>(std::move(out), {x}, [x, N, C, Cs, c0, hw](const Tensor<T>& g) {
    Tensor<T> gx = Tensor<T>::like(x.value());
    for (int n = 0; n < N; ++n) std::copy_n(g.data() + n * Cs * hw, Cs * hw, gx.data() + (n * C + c0) * hw);
    push_grad(x, gx);
  });
}

// Rows of `table` ([K, ...]) selected by index, stacked to [N, ...].
template <typename T>
Var<T> gather_rows(const Var<T>& table, const std::vector<int>& idx) {
  const int K = table.dim(0);
  const std::size_t row = table.size() / static_cast<std::size_t>(K);
  Shape s = table.shape();
  s[0] = static_cast<int>(idx.size());
  Tensor<T> out(s);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= K) throw DomainError("gather_rows: index out of range");
    std::copy_n(table.value().data() + idx[i] * row, row, out.data() + i * row);
  }
  return make_op<T>(std::move(out), {table}, [table, idx, row](const Tensor<T>& g) {
    Tensor<T> gt = Tensor<T>::like(table.value());
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < row; ++j) gt[idx[i] * row + j] += g[i * row + j];
    push_grad(table, gt);
  });
}

// [N, C, H, W] -> [N, H*W, C]
template <typename T>
Var<T> to_tokens(const Var<T>& x) {
  detail::require_rank(x.shape(), 4, "to_tokens");
  const int N = x.dim(0), C = x.dim(1), L = x.dim(2) * x.dim(3);
  Tensor<T> out({N, L, C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int l = 0; l < L; ++l) out[(n * L + l) * C + c] = x.value()[(n * C + c) * L + l];
  return make_op<T>(std::move(out), {x}, [x, N, C, L](const Tensor<T>& g) {
    Tensor<T> gx = Tensor<T>::like(x.value());
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int l = 0; l < L; ++l) gx[(n * C + c) * L + l] = g[(n * L + l) * C + c];
    push_grad(x, gx);
  });
}

// [N, H*W, C] -> [N, C, H, W]
template <typename T>
Var<T> from_tokens(const Var<T>& x, int H, int W) {
  detail::require_rank(x.shape(), 3, "from_tokens");
  const int N = x.dim(0), L = x.dim(1), C = x.dim(2);
  if (L != H * W) throw ShapeError("from_tokens: token count mismatch");
  Tensor<T> out({N, C, H, W});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int l = 0; l < L; ++l) out[(n * C + c) * L + l] = x.value()[(n * L + l) * C + c];
  return make_op<T>(std::move(out), {x}, [x, N, C, L](const Tensor<T>& g) {
    Tensor<T> gx = Tensor<T>::like(x.value());
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int l = 0; l < L; ++l) gx[(n * L + l) * C + c] = g[(n * C + c) * L + l];
    push_grad(x, gx);
  });
}

// ---------------------------------------------------------------- dense layers

// y = x W^T + b over the last dimension; x: [..., in], W: [out, in], b: [out].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const int in = w.dim(1), outd = w.dim(0);
  if (x.shape().back() != in) throw ShapeError("linear: input width " + shape_str(x.shape()) + " vs weight " +
                                               shape_str(w.shape()));
  const int M = static_cast<int>(x.size() / in);
  Shape s = x.shape();
  s.back() = outd;
  Tensor<T> out(s);
  {
    CMapMat<T> X(x.value().data(), M, in);
    CMapMat<T> Wm(w.value().data(), outd, in);
    MapMat<T> Y(out.data(), M, outd);
    Y.noalias() = X * Wm.transpose();
    for (int m = 0; m < M; ++m)
      for (int o = 0; o < outd; ++o) Y(m, o) += b.value()[o];
  }
  return make_op<T>(std::move(out), {x, w, b}, [x, w, b, M, in, outd](const Tensor<T>& g) {
    CMapMat<T> G(g.data(), M, outd);
    if (x.requires_grad()) {
      Tensor<T> gx = Tensor<T>::like(x.value());
      MapMat<T>(gx.data(), M, in).noalias() = G * CMapMat<T>(w.value().data(), outd, in);
      push_grad(x, gx);
    }
    if (w.requires_grad()) {
      Tensor<T> gw = Tensor<T>::like(w.value());
      MapMat<T>(gw.data(), outd, in).noalias() = G.transpose() * CMapMat<T>(x.value().data(), M, in);
      push_grad(w, gw);
    }
    if (b.requires_grad()) {
      Tensor<T> gb = Tensor<T>::like(b.value());
      for (int m = 0; m < M; ++m)
        for (int o = 0; o < outd; ++o) gb[o] += G(m, o);
      push_grad(b, gb);
    }
  });
}

// Batched matmul: a [B, M, K] x b [B, K, N] -> [B, M, N]; with transpose_b, b is [B, N, K].
template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool transpose_b = false) {
  detail::require_rank(a.shape(), 3, "bmm");
  detail::require_rank(b.shape(), 3, "bmm");
  const int B = a.dim(0), M = a.dim(1), K = a.dim(2);
  const int N = transpose_b ? b.dim(1) : b.dim(2);
  const int Kb = transpose_b ? b.dim(2) : b.dim(1);
  if (b.dim(0) != B || Kb != K) throw ShapeError("bmm: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor<T> out({B, M, N});
  for (int i = 0; i < B; ++i) {
    CMapMat<T> A(a.value().data() + i * M * K, M, K);
    MapMat<T> Y(out.data() + i * M * N, M, N);
    if (transpose_b)
      Y.noalias() = A * CMapMat<T>(b.value().data() + i * N * K, N, K).transpose();
    else
      Y.noalias() = A * CMapMat<T>(b.value().data() + i * K * N, K, N);
  }
  return make_op<T>(std::move(out), {a, b}, [a, b, B, M, K, N, transpose_b](const Tensor<T>& g) {
    Tensor<T> ga, gb;
    if (a.requires_grad()) ga = Tensor<T>::like(a.value());
    if (b.requires_grad()) gb = Tensor<T>::like(b.value());
    for (int i = 0; i < B; ++i) {
      CMapMat<T> G(g.data() + i * M * N, M, N);
      CMapMat<T> A(a.value().data() + i * M * K, M, K);
      if (transpose_b) {
        CMapMat<T> Bm(b.value().data() + i * N * K, N, K);
        if (a.requires_grad()) MapMat<T>(ga.data() + i * M * K, M, K).noalias() = G * Bm;
        if (b.requires_grad()) MapMat<T>(gb.data() + i * N * K, N, K).noalias() = G.transpose() * A;
      } else {
        CMapMat<T> Bm(b.value().data() + i * K * N, K, N);
        if (a.requires_grad()) MapMat<T>(ga.data() + i * M * K, M, K).noalias() = G * Bm.transpose();
        if (b.requires_grad()) MapMat<T>(gb.data() + i * K * N, K, N).noalias() = A.transpose() * G;
      }
    }
    if (a.requires_grad()) push_grad(a, ga);
    if (b.requires_grad()) push_grad(b, gb);
  });
}

// Softmax over the last dimension.
template <typename T>
Var<T> softmax_last(const Var<T>& x) {
  const int D = x.shape().back();
  const std::size_t rows = x.size() / D;
  Tensor<T> y = Tensor<T>::like(x.value());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.value().data() + r * D;
    T* o = y.data() + r * D;
    T m = *std::max_element(in, in + D);
    T z = 0;
    for (int j = 0; j < D; ++j) z += (o[j] = std::exp(in[j] - m));
    for (int j = 0; j < D; ++j) o[j] /= z;
  }
  return make_op<T>(y, {x}, [x, y, D, rows](const Tensor<T>& g) {
    Tensor<T> gx = Tensor<T>::like(g);
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (int j = 0; j < D; ++j) dot += g[r * D + j] * y[r * D + j];
      for (int j = 0; j < D; ++j) gx[r * D + j] = y[r * D + j] * (g[r * D + j] - dot);
    }
    push_grad(x, gx);
  });
}

// Per-row -log softmax(logits)[label]; logits [N, K]. Returns [N].
template <typename T>
Var<T> cross_entropy_rows(const Var<T>& logits, const std::vector<int>& labels) {
  detail::require_rank(logits.shape(), 2, "cross_entropy_rows");
  const int N = logits.dim(0), K = logits.dim(1);
  if (static_cast<int>(labels.size()) != N) throw ShapeError("cross_entropy_rows: label count mismatch");
  Tensor<T> probs = Tensor<T>::like(logits.value());
  Tensor<T> out({N});
  for (int n = 0; n < N; ++n) {
    if (labels[n] < 0 || labels[n] >= K) throw DomainError("cross_entropy_rows: label out of range");
    const T* in = logits.value().data() + n * K;
    T m = *std::max_element(in, in + K);
    T z = 0;
    for (int k = 0; k < K; ++k) z += (probs[n * K + k] = std::exp(in[k] - m));
    for (int k = 0; k < K; ++k) probs[n * K + k] /= z;
    out[n] = (m + std::log(z)) - in[labels[n]];
  }
  return make_op<T>(std::move(out), {logits}, [logits, labels, probs, N, K](const Tensor<T>& g) {
    Tensor<T> gl = Tensor<T>::like(logits.value());
    for (int n = 0; n < N; ++n)
      for (int k = 0; k < K; ++k) gl[n * K + k] = g[n] * (probs[n * K + k] - (k == labels[n] ? T(1) : T(0)));
    push_grad(logits, gl);
  });
}

// ---------------------------------------------------------------- convolution

namespace detail {

template <typename T>
void im2col(const T* x, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* cols) {
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* row = cols + ((c * k + ky) * k + kx) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          T* r = row + oy * Wo;
          if (iy < 0 || iy >= H) {
            std::fill(r, r + Wo, T(0));
            continue;
          }
          const T* xr = x + (c * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            r[ox] = (ix >= 0 && ix < W) ? xr[ix] : T(0);
          }
        }
      }
}

template <typename T>
void col2im_add(const T* cols, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* x) {
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* row = cols + ((c * k + ky) * k + kx) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          T* xr = x + (c * H + iy) * W;
          const T* r = row + oy * Wo;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) xr[ix] += r[ox];
          }
        }
      }
}

}  // namespace detail

// x [N, Cin, H, W], w [Cout, Cin, k, k], b [Cout] -> [N, Cout, Ho, Wo]
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride = 1, int pad = -1) {
  detail::require_rank(x.shape(), 4, "conv2d");
  detail::require_rank(w.shape(), 4, "conv2d weight");
  const int N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != Cin)
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  if (pad < 0) pad = k / 2;
  const int Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  const int KK = Cin * k * k, P = Ho * Wo;
  const bool direct = (k == 1 && stride == 1 && pad == 0);
  Tensor<T> out({N, Cout, Ho, Wo});
  std::vector<T> cols(direct ? 0 : static_cast<std::size_t>(KK) * P);
  CMapMat<T> Wm(w.value().data(), Cout, KK);
  for (int n = 0; n < N; ++n) {
    const T* xn = x.value().data() + static_cast<std::size_t>(n) * Cin * H * W;
    const T* cp = xn;
    if (!direct) {
      detail::im2col(xn, Cin, H, W, k, stride, pad, Ho, Wo, cols.data());
      cp = cols.data();
    }
    MapMat<T> Y(out.data() + static_cast<std::size_t>(n) * Cout * P, Cout, P);
    Y.noalias() = Wm * CMapMat<T>(cp, KK, P);
    for (int o = 0; o < Cout; ++o) Y.row(o).array() += b.value()[o];
  }
  return make_op<T>(std::move(out), {x, w, b}, [=](const Tensor<T>& g) {
    Tensor<T> gx, gw, gb;
    if (x.requires_grad()) gx = Tensor<T>::like(x.value());
    if (w.requires_grad()) gw = Tensor<T>::like(w.value());
    if (b.requires_grad()) gb = Tensor<T>::like(b.value());
    std::vector<T> colbuf(direct ? 0 : static_cast<std::size_t>(KK) * P);
    std::vector<T> dcols(direct ? 0 : static_cast<std::size_t>(KK) * P);
    CMapMat<T> Wm2(w.value().data(), Cout, KK);
    for (int n = 0; n < N; ++n) {
      CMapMat<T> G(g.data() + static_cast<std::size_t>(n) * Cout * P, Cout, P);
      const T* xn = x.value().data() + static_cast<std::size_t>(n) * Cin * H * W;
      if (w.requires_grad()) {
        const T* cp = xn;
        if (!direct) {
          detail::im2col(xn, Cin, H, W, k, stride, pad, Ho, Wo, colbuf.data());
          cp = colbuf.data();
        }
        MapMat<T>(gw.data(), Cout, KK).noalias() += G * CMapMat<T>(cp, KK, P).transpose();
      }
      if (b.requires_grad())
        for (int o = 0; o < Cout; ++o) gb[o] += G.row(o).sum();
      if (x.requires_grad()) {
        T* gxn = gx.data() + static_cast<std::size_t>(n) * Cin * H * W;
        if (direct) {
          MapMat<T>(gxn, KK, P).noalias() = Wm2.transpose() * G;
        } else {
          MapMat<T>(dcols.data(), KK, P).noalias() = Wm2.transpose() * G;
          detail::col2im_add(dcols.data(), Cin, H, W, k, stride, pad, Ho, Wo, gxn);
        }
      }
    }
    if (x.requires_grad()) push_grad(x, gx);
    if (w.requires_grad()) push_grad(w, gw);
    if (b.requires_grad()) push_grad(b, gb);
  });
}

template <typename T>
Var<T> upsample2x(const Var<T>& x) {
  detail::require_rank(x.shape(), 4, "upsample2x");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<T> out({N, C, 2 * H, 2 * W});
  for (int nc = 0; nc < N * C; ++nc)
    for (int y = 0; y < 2 * H; ++y)
      for (int xx = 0; xx < 2 * W; ++xx)
        out[(static_cast<std::size_t>(nc) * 2 * H + y) * 2 * W + xx] =
            x.value()[(static_cast<std::size_t>(nc) * H + y / 2) * W + xx / 2];
  return make_op<T>(std::move(out), {x}, [x, N, C, H, W](const Tensor<T>& g) {
    Tensor<T> gx = Tensor<T>::like(x.value());
    for (int nc = 0; nc < N * C; ++nc)
      for (int y = 0; y < 2 * H; ++y)
        for (int xx = 0; xx < 2 * W; ++xx)
          gx[(static_cast<std::size_t>(nc) * H + y / 2) * W + xx / 2] +=
              g[(static_cast<std::size_t>(nc) * 2 * H + y) * 2 * W + xx];
    push_grad(x, gx);
  });
}

template <typename T>
Var<T> avgpool2x(const Var<T>& x) {
  detail::require_rank(x.shape(), 4, "avgpool2x");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 || W % 2) throw ShapeError("avgpool2x: odd spatial size");
  const int Ho = H / 2, Wo = W / 2;
  Tensor<T> out({N, C, Ho, Wo});
  for (int nc = 0; nc < N * C; ++nc)
    for (int y = 0; y < Ho; ++y)
      for (int xx = 0; xx < Wo; ++xx) {
        const T* p = x.value().data() + (static_cast<std::size_t>(nc) * H + 2 * y) * W + 2 * xx;
        out[(static_cast<std::size_t>(nc) * Ho + y) * Wo + xx] = T(0.25) * (p[0] + p[1] + p[W] + p[W + 1]);
      }
  return make_op<T>(std::move(out), {x}, [x, N, C, H, W, Ho, Wo](const Tensor<T>& g) {
    Tensor<T> gx = Tensor<T>::like(x.value());
    for (int nc = 0; nc < N * C; ++nc)
      for (int y = 0; y < Ho; ++y)
        for (int xx = 0; xx < Wo; ++xx) {
          const T v = T(0.25) * g[(static_cast<std::size_t>(nc) * Ho + y) * Wo + xx];
          T* p = gx.data() + (static_cast<std::size_t>(nc) * H + 2 * y) * W + 2 * xx;
          p[0] += v;
          p[1] += v;
          p[W] += v;
          p[W + 1] += v;
        }
    push_grad(x, gx);
  });
}

// [N, C, H, W] -> [N, C]
template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  detail::require_rank(x.shape(), 4, "global_avg_pool");
  const int N = x.dim(0), C = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor<T> out({N, C});
  for (int nc = 0; nc < N * C; ++nc) {
    T s = 0;
    for (std::size_t i = 0; i < hw; ++i) s += x.value()[nc * hw + i];
    out[nc] = s / static_cast<T>(hw);
  }
  return make_op<T>(std::move(out), {x}, [x, N, C, hw](const Tensor<T>& g) {
    Tensor<T> gx = Tensor<T>::like(x.value());
    for (int nc = 0; nc < N * C; ++nc)
      for (std::size_t i = 0; i < hw; ++i) gx[nc * hw + i] = g[nc] / static_cast<T>(hw);
    push_grad(x, gx);
  });
}

// x [N, C, H, W] + e [N, C] broadcast over space.
template <typename T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& e) {
  detail::require_rank(x.shape(), 4, "add_channel_bias");
  const int N = x.dim(0), C = x.dim(1);
  if (e.shape() != Shape{N, C}) throw ShapeError("add_channel_bias: " + shape_str(e.shape()));
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor<T> out = x.value();
  for (int nc = 0; nc < N * C; ++nc)
    for (std::size_t i = 0; i < hw; ++i) out[nc * hw + i] += e.value()[nc];
  return make_op<T>(std::move(out), {x, e}, [x, e, N, C, hw](const Tensor<T>& g) {
    push_grad(x, g);
    if (e.requires_grad()) {
      Tensor<T> ge({N, C});
      for (int nc = 0; nc < N * C; ++nc)
        for (std::size_t i = 0; i < hw; ++i) ge[nc] += g[nc * hw + i];
      push_grad(e, ge);
    }
  });
}

}  // namespace eced::ops

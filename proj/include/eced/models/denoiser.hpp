// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "eced/kv.hpp"
#include "eced/nn.hpp"
#include "eced/types.hpp"

namespace eced {

struct DenoiserArch {
  int num_classes = 2;
  int c0 = 32, c1 = 64;
  int time_dim = 64;
  int tokens = 4;      // O
  int embed_dim = 64;  // d

  KeyValues to_kv() const {
    return {{"num_classes", std::to_string(num_classes)}, {"c0", std::to_string(c0)}, {"c1", std::to_string(c1)},
            {"time_dim", std::to_string(time_dim)},       {"tokens", std::to_string(tokens)},
            {"embed_dim", std::to_string(embed_dim)}};
  }
  static DenoiserArch from_kv(const KeyValues& kv) {
    DenoiserArch a;
    a.num_classes = kv_int(kv, "num_classes");
    a.c0 = kv_int(kv, "c0");
    a.c1 = kv_int(kv, "c1");
    a.time_dim = kv_int(kv, "time_dim");
    a.tokens = kv_int(kv, "tokens");
    a.embed_dim = kv_int(kv, "embed_dim");
    return a;
  }
  static DenoiserArch miniature(int k = 2) { return {k, 4, 8, 8, 2, 4}; }
};

// O x d condition tokens for one class label.
template <typename T>
struct ConditionEmbedding {
  Tensor<T> data;  // [O, d]
  int label = -1;

  int tokens() const { return data.dim(0); }
  int width() const { return data.dim(1); }
};

// Learned per-class token table standing in for a text encoder.
template <typename T>
struct ConditionEmbedder {
  Var<T> table;  // [K, O, d]

  ConditionEmbedder() = default;
  ConditionEmbedder(int num_classes, int tokens, int dim, Rng& rng)
      : table(rng.normal_tensor<T>({num_classes, tokens, dim}, 1.0), true) {}

  int num_classes() const { return table.dim(0); }
  int tokens() const { return table.dim(1); }
  int dim() const { return table.dim(2); }

  ConditionEmbedding<T> embed(int label) const {
    if (label < 0 || label >= num_classes())
      throw DomainError("label " + std::to_string(label) + " outside [0," + std::to_string(num_classes()) + ")");
    NoGradGuard ng;
    Var<T> row = ops::gather_rows(table, {label});
    return {row.value().reshaped({tokens(), dim()}), label};
  }

  // Differentiable batch lookup [N, O, d].
  Var<T> batch(const std::vector<int>& labels) const {
    for (int l : labels)
      if (l < 0 || l >= num_classes()) throw DomainError("label " + std::to_string(l) + " out of range");
    return ops::gather_rows(table, labels);
  }

  template <typename F>
  void visit(const std::string& p, F&& f) {
    f(p + "emb.table", table);
  }
};

namespace detail {

template <typename T>
struct ResBlock {
  nn::Conv2d<T> conv1, conv2, skip;
  nn::Linear<T> temb;
  bool has_skip = false;

  ResBlock() = default;
  ResBlock(int cin, int cout, int tdim, Rng& rng)
      : conv1(cin, cout, 3, rng), conv2(cout, cout, 3, rng, 1, 0.5), temb(tdim, cout, rng), has_skip(cin != cout) {
    if (has_skip) skip = nn::Conv2d<T>(cin, cout, 1, rng, 1, 1.0);
  }

  Var<T> operator()(const Var<T>& x, const Var<T>& t) const {
    Var<T> h = conv1(ops::silu(x));
    h = ops::add_channel_bias(h, temb(t));
    h = conv2(ops::silu(h));
    return ops::add(has_skip ? skip(x) : x, h);
  }

  template <typename F>
  void visit(const std::string& p, F&& f) {
    conv1.visit(p + ".conv1", f);
    conv2.visit(p + ".conv2", f);
    temb.visit(p + ".temb", f);
    if (has_skip) skip.visit(p + ".skip", f);
  }
};

// Single-head attention over spatial tokens; context is either the tokens
// themselves (self-attention) or the condition embedding (cross-attention).
template <typename T>
struct Attention {
  nn::Linear<T> q, k, v, o;
  int context_dim = 0;

  Attention() = default;
  Attention(int channels, int ctx_dim, Rng& rng)
      : q(channels, channels, rng), k(ctx_dim, channels, rng), v(ctx_dim, channels, rng),
        o(channels, channels, rng, 0.5), context_dim(ctx_dim) {}

  Var<T> operator()(const Var<T>& x, const Var<T>* context) const {
    const int H = x.dim(2), W = x.dim(3), C = x.dim(1);
    Var<T> tok = ops::to_tokens(x);
    const Var<T>& ctx = context ? *context : tok;
    if (ctx.shape().size() != 3 || ctx.dim(2) != context_dim || ctx.dim(0) != x.dim(0))
      throw ShapeError("attention context " + shape_str(ctx.shape()) + " does not match width " +
                       std::to_string(context_dim));
    Var<T> qq = q(tok), kk = k(ctx), vv = v(ctx);
    Var<T> att = ops::softmax_last(ops::scale(ops::bmm(qq, kk, true), T(1) / std::sqrt(static_cast<T>(C))));
    Var<T> out = o(ops::bmm(att, vv));
    return ops::from_tokens(ops::add(tok, out), H, W);
  }

  template <typename F>
  void visit(const std::string& p, F&& f) {
    q.visit(p + ".q", f);
    k.visit(p + ".k", f);
    v.visit(p + ".v", f);
    o.visit(p + ".o", f);
  }
};

}  // namespace detail

// Sinusoidal timestep features [N, dim].
template <typename T>
Tensor<T> timestep_features(const std::vector<int>& steps, int dim) {
  Tensor<T> out({static_cast<int>(steps.size()), dim});
  const int half = dim / 2;
  for (std::size_t n = 0; n < steps.size(); ++n)
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      out[n * dim + i] = static_cast<T>(std::sin(steps[n] * freq));
      out[n * dim + half + i] = static_cast<T>(std::cos(steps[n] * freq));
    }
  return out;
}

// Noise predictor: a two-level U-shaped conv net with self- and cross-attention
// at the lowest resolution.
template <typename T>
struct Denoiser {
  DenoiserArch arch;
  nn::Linear<T> t1, t2;
  nn::Conv2d<T> conv_in, down, up, conv_out;
  detail::ResBlock<T> res1, res2, res3, res4;
  detail::Attention<T> self_attn, cross_attn;

  Denoiser() = default;
  Denoiser(const DenoiserArch& a, Rng& rng)
      : arch(a),
        t1(a.time_dim / 2 * 2, a.time_dim, rng, std::sqrt(2.0)),
        t2(a.time_dim, a.time_dim, rng),
        conv_in(kLatentChannels, a.c0, 3, rng, 1, 1.0),
        down(a.c0, a.c1, 3, rng, 2),
        up(a.c1, a.c0, 3, rng),
        conv_out(a.c0, kLatentChannels, 3, rng, 1, 0.0),
        res1(a.c0, a.c0, a.time_dim, rng),
        res2(a.c1, a.c1, a.time_dim, rng),
        res3(a.c1, a.c1, a.time_dim, rng),
        res4(2 * a.c0, a.c0, a.time_dim, rng),
        self_attn(a.c1, a.c1, rng),
        cross_attn(a.c1, a.embed_dim, rng) {}

  // z [N, 4, h, w], condition [N, O, d], one timestep per sample -> predicted noise.
  Var<T> operator()(const Var<T>& z, const Var<T>& condition, const std::vector<int>& steps) const {
    if (z.shape().size() != 4 || z.dim(1) != kLatentChannels)
      throw ShapeError("denoiser expects [N,4,h,w], got " + shape_str(z.shape()));
    if (z.dim(2) % 2 || z.dim(3) % 2) throw ShapeError("denoiser latent size must be even");
    if (static_cast<int>(steps.size()) != z.dim(0)) throw ShapeError("denoiser: one timestep per sample required");
    Var<T> tf(timestep_features<T>(steps, arch.time_dim / 2 * 2));
    Var<T> temb = t2(ops::silu(t1(tf)));
    Var<T> h0 = conv_in(z);
    Var<T> h1 = res1(h0, temb);
    Var<T> h = res2(down(h1), temb);
    h = self_attn(h, nullptr);
    h = cross_attn(h, &condition);
    h = res3(h, temb);
    Var<T> u = up(ops::upsample2x(h));
    u = res4(ops::concat_channels(u, h1), temb);
    return conv_out(ops::silu(u));
  }

  // Single-latent convenience wrapper with a shared condition.
  Var<T> predict(const Var<T>& z, const ConditionEmbedding<T>& c, int step) const {
    const int N = z.dim(0);
    Tensor<T> cond({N, c.tokens(), c.width()});
    for (int n = 0; n < N; ++n) std::copy_n(c.data.data(), c.data.size(), cond.data() + n * c.data.size());
    return (*this)(z, Var<T>(std::move(cond)), std::vector<int>(static_cast<std::size_t>(N), step));
  }

  template <typename F>
  void visit(const std::string& p, F&& f) {
    t1.visit(p + "unet.t1", f);
    t2.visit(p + "unet.t2", f);
    conv_in.visit(p + "unet.conv_in", f);
    down.visit(p + "unet.down", f);
    up.visit(p + "unet.up", f);
    conv_out.visit(p + "unet.conv_out", f);
    res1.visit(p + "unet.res1", f);
    res2.visit(p + "unet.res2", f);
    res3.visit(p + "unet.res3", f);
    res4.visit(p + "unet.res4", f);
    self_attn.visit(p + "unet.self_attn", f);
    cross_attn.visit(p + "unet.cross_attn", f);
  }
};

}  // namespace eced

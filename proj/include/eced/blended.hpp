// SPDX-License-Identifier: Apache-2.0
#pragma once

// Forward noising, DDIM-family denoising steps, and mask-blended sampling.
//
// Sampling depth convention: with depth tau the latent is noised to
// sampler_steps[tau - 1] and then denoised through sampler_steps[tau - 1], ...,
// sampler_steps[0] down to the clean end (t = -1), i.e. tau network calls.
// tau = 0 leaves the latent untouched; tau = S starts from the noisiest step.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "eced/models/denoiser.hpp"
#include "eced/rng.hpp"
#include "eced/schedule.hpp"
#include "eced/types.hpp"

namespace eced {

// A noise predictor maps (z_t [N,4,h,w], condition, t) to predicted noise of the same shape.
template <typename M, typename T>
concept NoisePredictor = requires(const M& m, const Var<T>& z, const ConditionEmbedding<T>& c, int t) {
  { m.predict(z, c, t) } -> std::convertible_to<Var<T>>;
};

struct SamplerConfig {
  int tau = 5;
  double eta = 1.0;  // scales the stochastic term; 0 gives a deterministic sampler
};

// Independent random streams used inside one sampling run.
enum class NoiseStream : std::uint64_t { Start = 0, Step = 1, Background = 2 };

inline Rng noise_stream(std::uint64_t seed, NoiseStream s) {
  return Rng(derive_seed(seed, static_cast<std::uint64_t>(s)));
}

namespace detail {

template <typename T>
void require_same_latent(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T>
Tensor<T> mask_plane(const LatentMask& m, int h, int w) {
  if (m.height != h || m.width != w)
    throw ShapeError("latent mask " + std::to_string(m.height) + "x" + std::to_string(m.width) +
                     " does not match latent " + std::to_string(h) + "x" + std::to_string(w));
  return m.as_tensor<T>();
}

}  // namespace detail

// ---------------------------------------------------------------- differentiable core

// z_t = sqrt(abar_t) z + sqrt(1 - abar_t) eps
template <typename T>
Var<T> noise_to(const Var<T>& z, int t, const NoiseSchedule& sched, const Tensor<T>& eps) {
  detail::require_same_latent(z.value(), eps, "noise_to");
  const double ab = sched.alpha_bar(t);
  return ops::lincomb(z, static_cast<T>(std::sqrt(ab)), Var<T>(eps), static_cast<T>(std::sqrt(1.0 - ab)));
}

// z0_hat = (z_t - sqrt(1 - abar_t) eps_pred) / sqrt(abar_t)
template <typename T>
Var<T> predict_z0(const Var<T>& z_t, const Var<T>& eps_pred, int t, const NoiseSchedule& sched) {
  detail::require_same_latent(z_t.value(), eps_pred.value(), "predict_z0");
  const double ab = sched.alpha_bar(t);
  if (!(ab > 0.0)) throw NumericalError("predict_z0: alpha_bar(" + std::to_string(t) + ") = 0");
  const double inv = 1.0 / std::sqrt(ab);
  return ops::lincomb(z_t, static_cast<T>(inv), eps_pred, static_cast<T>(-std::sqrt(1.0 - ab) * inv));
}

// One step t -> t_prev:
//   sqrt(abar_prev) z0_hat + sqrt(1 - abar_prev - sigma^2) eps_pred + sigma noise,
// with sigma = eta * ddim_sigma(t, t_prev).
template <typename T, typename Model>
  requires NoisePredictor<Model, T>
Var<T> denoise_step(const Var<T>& z_t, const ConditionEmbedding<T>& cond, int t, int t_prev,
                    const NoiseSchedule& sched, const Model& model, const Tensor<T>& noise, double eta = 1.0) {
  const double sigma = eta * ddim_sigma(sched, t, t_prev);
  const double dir = direction_coefficient(sched, t_prev, sigma);
  Var<T> eps = model.predict(z_t, cond, t);
  detail::require_same_latent(z_t.value(), eps.value(), "denoiser output");
  Var<T> z0 = predict_z0(z_t, eps, t, sched);
  Var<T> out = ops::lincomb(z0, static_cast<T>(std::sqrt(sched.alpha_bar(t_prev))), eps, static_cast<T>(dir));
  if (sigma > 0.0) {
    detail::require_same_latent(z_t.value(), noise, "denoise_step noise");
    out = ops::add_const(out, noise * static_cast<T>(sigma));
  }
  return out;
}

// Observer for intermediate states: (t_prev, blended z_{t_prev}, noised background at t_prev).
template <typename T>
using BlendObserver = std::function<void(int, const Tensor<T>&, const Tensor<T>&)>;

// Blended sampling on a batch [N,4,h,w]; differentiable in z_init. Background
// cells at every step are the background source noised to that step.
template <typename T, typename Model>
  requires NoisePredictor<Model, T>
Var<T> blended_denoise(const Var<T>& z_init, const ConditionEmbedding<T>& cond, const LatentMask& mask,
                       const Tensor<T>& bg_source, const NoiseSchedule& sched, const Model& model,
                       const SamplerConfig& cfg, std::uint64_t seed, const BlendObserver<T>& observe = {}) {
  if (cfg.tau < 0 || cfg.tau > sched.num_sampler_steps())
    throw ConfigError("sampling depth tau=" + std::to_string(cfg.tau) + " outside [0, " +
                      std::to_string(sched.num_sampler_steps()) + "]");
  detail::require_same_latent(z_init.value(), bg_source, "blended_denoise background source");
  if (z_init.shape().size() != 4) throw ShapeError("blended_denoise expects [N,4,h,w]");
  const Tensor<T> m = detail::mask_plane<T>(mask, z_init.dim(2), z_init.dim(3));
  if (cfg.tau == 0) return z_init;
  Rng start = noise_stream(seed, NoiseStream::Start);
  Rng step = noise_stream(seed, NoiseStream::Step);
  Rng bgn = noise_stream(seed, NoiseStream::Background);
  Var<T> z = noise_to(z_init, sched.sampler_step(cfg.tau - 1), sched, start.normal_tensor<T>(z_init.shape()));
  const Var<T> bg(bg_source);
  for (int i = cfg.tau - 1; i >= 0; --i) {
    const int t = sched.sampler_step(i), t_prev = sched.sampler_step(i - 1);
    Var<T> fg = denoise_step(z, cond, t, t_prev, sched, model, step.normal_tensor<T>(z_init.shape()), cfg.eta);
    Var<T> bg_t = t_prev < 0 ? bg : noise_to(bg, t_prev, sched, bgn.normal_tensor<T>(z_init.shape()));
    z = ops::select_hw(fg, bg_t, m);
    if (observe) observe(t_prev, z.value(), bg_t.value());
  }
  return z;
}

// Same loop without blending; draws from the same streams so an all-foreground
// mask reproduces it exactly.
template <typename T, typename Model>
  requires NoisePredictor<Model, T>
Var<T> unblended_denoise(const Var<T>& z_init, const ConditionEmbedding<T>& cond, const NoiseSchedule& sched,
                         const Model& model, const SamplerConfig& cfg, std::uint64_t seed) {
  if (cfg.tau < 0 || cfg.tau > sched.num_sampler_steps()) throw ConfigError("sampling depth out of range");
  if (cfg.tau == 0) return z_init;
  Rng start = noise_stream(seed, NoiseStream::Start);
  Rng step = noise_stream(seed, NoiseStream::Step);
  Var<T> z = noise_to(z_init, sched.sampler_step(cfg.tau - 1), sched, start.normal_tensor<T>(z_init.shape()));
  for (int i = cfg.tau - 1; i >= 0; --i)
    z = denoise_step(z, cond, sched.sampler_step(i), sched.sampler_step(i - 1), sched, model,
                     step.normal_tensor<T>(z_init.shape()), cfg.eta);
  return z;
}

// Full conditional sampler from pure noise through all S sampler steps; [n,4,h,w].
template <typename T, typename Model>
  requires NoisePredictor<Model, T>
Tensor<T> sample_latents(const ConditionEmbedding<T>& cond, int n, int h, int w, const NoiseSchedule& sched,
                         const Model& model, double eta, std::uint64_t seed) {
  NoGradGuard ng;
  Rng start = noise_stream(seed, NoiseStream::Start);
  Rng step = noise_stream(seed, NoiseStream::Step);
  Var<T> z(start.normal_tensor<T>({n, kLatentChannels, h, w}));
  for (int i = sched.num_sampler_steps() - 1; i >= 0; --i)
    z = denoise_step(z, cond, sched.sampler_step(i), sched.sampler_step(i - 1), sched, model,
                     step.normal_tensor<T>(z.shape()), eta);
  return z.value();
}

// ---------------------------------------------------------------- LatentTensor wrappers

template <typename T>
LatentTensor<T> noise_to(const LatentTensor<T>& z, int t, const NoiseSchedule& sched, const LatentTensor<T>& eps) {
  NoGradGuard ng;
  return LatentTensor<T>(noise_to(Var<T>(z.batch()), t, sched, eps.batch()).value());
}

template <typename T>
LatentTensor<T> predict_z0(const LatentTensor<T>& z_t, const LatentTensor<T>& eps_pred, int t,
                           const NoiseSchedule& sched) {
  NoGradGuard ng;
  return LatentTensor<T>(predict_z0(Var<T>(z_t.batch()), Var<T>(eps_pred.batch()), t, sched).value());
}

template <typename T, typename Model>
  requires NoisePredictor<Model, T>
LatentTensor<T> denoise_step(const LatentTensor<T>& z_t, const ConditionEmbedding<T>& cond, int t, int t_prev,
                             const NoiseSchedule& sched, const Model& model, const LatentTensor<T>& noise,
                             double eta = 1.0) {
  NoGradGuard ng;
  return LatentTensor<T>(
      denoise_step(Var<T>(z_t.batch()), cond, t, t_prev, sched, model, noise.batch(), eta).value());
}

// z = z_bg where M' = 0, z_fg where M' = 1 (exact selection).
template <typename T>
LatentTensor<T> blend(const LatentTensor<T>& z_fg, const LatentTensor<T>& z_bg, const LatentMask& mask) {
  NoGradGuard ng;
  detail::require_same_latent(z_fg.tensor(), z_bg.tensor(), "blend");
  return LatentTensor<T>(
      ops::select_hw(Var<T>(z_fg.batch()), Var<T>(z_bg.batch()), detail::mask_plane<T>(mask, z_fg.height(), z_fg.width()))
          .value());
}

template <typename T, typename Model>
  requires NoisePredictor<Model, T>
LatentTensor<T> blended_denoise(const LatentTensor<T>& z_init, const ConditionEmbedding<T>& cond,
                                const LatentMask& mask, const LatentTensor<T>& bg_source, const NoiseSchedule& sched,
                                const Model& model, const SamplerConfig& cfg, std::uint64_t seed) {
  NoGradGuard ng;
  return LatentTensor<T>(
      blended_denoise(Var<T>(z_init.batch()), cond, mask, bg_source.batch(), sched, model, cfg, seed).value());
}

template <typename T, typename Model>
  requires NoisePredictor<Model, T>
LatentTensor<T> unblended_denoise(const LatentTensor<T>& z_init, const ConditionEmbedding<T>& cond,
                                  const NoiseSchedule& sched, const Model& model, const SamplerConfig& cfg,
                                  std::uint64_t seed) {
  NoGradGuard ng;
  return LatentTensor<T>(unblended_denoise(Var<T>(z_init.batch()), cond, sched, model, cfg, seed).value());
}

}  // namespace eced

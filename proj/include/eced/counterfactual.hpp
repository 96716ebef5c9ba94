// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "eced/blended.hpp"
#include "eced/models/classifier.hpp"
#include "eced/models/denoiser.hpp"
#include "eced/models/vae.hpp"
#include "eced/preservation.hpp"
#include "eced/saliency.hpp"

namespace eced {

inline constexpr double kProbFloor = 1e-12;

// ---------------------------------------------------------------- loss, pruning, angles

// -log p_target, with p clamped at 1e-12. `clamped` reports whether the floor was hit.
template <typename T>
double ce_loss(const ImageTensor<T>& image, int target, const ClassifierModel<T>& model, bool* clamped = nullptr) {
  const auto p = model.classify(image);
  if (target < 0 || target >= static_cast<int>(p.size()))
    throw DomainError("target class " + std::to_string(target) + " outside classifier range");
  const double pt = p[static_cast<std::size_t>(target)];
  if (clamped) *clamped = pt < kProbFloor;
  return -std::log(std::max(pt, kProbFloor));
}

// Zeroes every channel of the latent gradient at cells where M' = 0.
template <typename T>
Tensor<T> prune_gradient(const Tensor<T>& grad, const LatentMask& mask) {
  const int r = grad.rank();
  if (r < 3 || grad.dim(r - 3) != kLatentChannels || grad.dim(r - 2) != mask.height || grad.dim(r - 1) != mask.width)
    throw ShapeError("prune_gradient: gradient " + shape_str(grad.shape()) + " vs mask " +
                     std::to_string(mask.height) + "x" + std::to_string(mask.width));
  const std::size_t hw = mask.data.size();
  Tensor<T> out = Tensor<T>::like(grad);
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (mask.data[i % hw]) out[i] = grad[i];
  return out;
}

template <typename T>
LatentTensor<T> prune_gradient(const LatentTensor<T>& grad, const LatentMask& mask) {
  return LatentTensor<T>(prune_gradient(grad.tensor(), mask));
}

// Cosine of the angle between two flattened vectors.
template <typename T>
double gradient_cosine(const Tensor<T>& u, const Tensor<T>& v) {
  if (u.size() != v.size()) throw ShapeError("gradient_angle: size mismatch");
  double uv = 0, uu = 0, vv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    uv += static_cast<double>(u[i]) * v[i];
    uu += static_cast<double>(u[i]) * u[i];
    vv += static_cast<double>(v[i]) * v[i];
  }
  if (!(uu > 0.0)) throw DomainError("gradient_angle: reference gradient has zero norm");
  if (!(vv > 0.0)) throw DegenerateMaskError("pruned gradient has zero norm (mask misses the gradient support)");
  // sqrt(uu * vv) keeps cos exactly 1 for v == u.
  return std::clamp(uv / std::sqrt(uu * vv), -1.0, 1.0);
}

// Angle in degrees, in [0, 180].
template <typename T>
double gradient_angle(const Tensor<T>& u, const Tensor<T>& v) {
  return std::acos(gradient_cosine(u, v)) * 180.0 / std::numbers::pi;
}

// ---------------------------------------------------------------- proposition checks

struct Prop1Report {
  int trials = 0;
  int resampled = 0;   // draws with empty pruned support, redrawn
  int violations = 0;  // cos <= 0 or angle >= 90
  double min_cos = 1.0, max_cos = -1.0;
  double min_angle = 180.0, max_angle = 0.0;
  bool passed() const { return violations == 0 && trials > 0; }
};

// Random (gradient, latent mask) pairs: the pruned gradient stays within 90 degrees
// of the full one whenever the pruned support is nonempty.
inline Prop1Report verify_proposition_1(int trials, int height, int width, std::uint64_t seed,
                                        bool all_ones = false) {
  if (trials < 1) throw ConfigError("verify_proposition_1 needs trials >= 1");
  Prop1Report r;
  Rng rng(seed);
  while (r.trials < trials) {
    Tensor<double> u = rng.normal_tensor<double>({kLatentChannels, height, width});
    LatentMask m(height, width);
    const double q = rng.uniform();
    for (auto& cell : m.data) cell = all_ones || rng.uniform() < q ? 1 : 0;
    Tensor<double> v = prune_gradient(u, m);
    double vv = 0;
    for (double x : v.values()) vv += x * x;
    if (!(vv > 0.0)) {
      ++r.resampled;
      continue;
    }
    const double c = gradient_cosine(u, v);
    const double a = std::acos(c) * 180.0 / std::numbers::pi;
    ++r.trials;
    r.min_cos = std::min(r.min_cos, c);
    r.max_cos = std::max(r.max_cos, c);
    r.min_angle = std::min(r.min_angle, a);
    r.max_angle = std::max(r.max_angle, a);
    if (!(c > 0.0) || !(a < 90.0)) ++r.violations;
  }
  return r;
}

struct Prop2Report {
  std::vector<double> thresholds;  // thresholds actually evaluated
  std::vector<double> cosines;
  std::vector<double> angles;
  std::optional<double> truncated_at;  // first threshold with empty pruned support
  int violations = 0;                  // consecutive pairs where the angle decreases beyond tolerance
  bool passed() const { return violations == 0; }
};

// Nested masks from increasing thresholds give nondecreasing angles to the full gradient.
template <typename T>
Prop2Report verify_proposition_2(const AttentionMap& u_map, const std::vector<double>& thresholds,
                                 const Tensor<T>& grad, int factor, double cos_tol = 1e-9) {
  for (std::size_t i = 1; i < thresholds.size(); ++i)
    if (!(thresholds[i] > thresholds[i - 1])) throw OrderingError("thresholds must be strictly increasing");
  Prop2Report r;
  for (double xi : thresholds) {
    const LatentMask m = downsample_mask(threshold_mask(u_map, xi), factor);
    const Tensor<T> v = prune_gradient(grad, m);
    double c;
    try {
      c = gradient_cosine(grad, v);
    } catch (const DegenerateMaskError&) {
      r.truncated_at = xi;
      break;
    }
    if (!r.cosines.empty() && c > r.cosines.back() + cos_tol) ++r.violations;
    r.thresholds.push_back(xi);
    r.cosines.push_back(c);
    r.angles.push_back(std::acos(c) * 180.0 / std::numbers::pi);
  }
  return r;
}

// Smooth random attention map: a few Gaussian bumps, min-max normalized.
inline AttentionMap random_attention_map(int height, int width, Rng& rng) {
  AttentionMap u{height, width, std::vector<double>(static_cast<std::size_t>(height) * width, 0.0)};
  const int bumps = rng.uniform_int(1, 4);
  for (int b = 0; b < bumps; ++b) {
    const double cy = rng.uniform(0, height), cx = rng.uniform(0, width);
    const double s = rng.uniform(0.08, 0.35) * std::max(height, width);
    const double a = rng.uniform(0.3, 1.0);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        u.at(y, x) += a * std::exp(-((y - cy) * (y - cy) + (x - cx) * (x - cx)) / (2 * s * s));
  }
  normalize_min_max(u.data);
  return u;
}

struct Prop2SuiteReport {
  int maps = 0;
  int violations = 0;
  int truncated = 0;
  double min_angle = 180.0, max_angle = 0.0;
  bool passed() const { return violations == 0 && maps > 0; }
};

inline Prop2SuiteReport verify_proposition_2_suite(int maps, const std::vector<double>& thresholds, int image_size,
                                                   int factor, std::uint64_t seed) {
  Prop2SuiteReport s;
  Rng rng(seed);
  const int h = image_size / factor;
  for (int i = 0; i < maps; ++i) {
    const AttentionMap u = random_attention_map(image_size, image_size, rng);
    const Tensor<double> g = rng.normal_tensor<double>({kLatentChannels, h, h});
    const Prop2Report r = verify_proposition_2(u, thresholds, g, factor);
    ++s.maps;
    s.violations += r.violations;
    s.truncated += r.truncated_at.has_value();
    for (double a : r.angles) {
      s.min_angle = std::min(s.min_angle, a);
      s.max_angle = std::max(s.max_angle, a);
    }
  }
  return s;
}

// ---------------------------------------------------------------- attack

struct AttackConfig {
  int T2 = 100;
  SamplerConfig sampler;  // tau = 5, eta = 1
  double lr = 7e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double xi = 0.5;  // echo of the mask threshold
  std::uint64_t seed = 0;
  bool early_stop = false;
  // Reuse one noise seed for every iteration instead of deriving a fresh one per iteration.
  bool fixed_noise = false;
  int snapshot_every = 0;  // keep every k-th intermediate image; 0 keeps none

  KeyValues echo() const {
    return {{"T2", std::to_string(T2)},
            {"tau", std::to_string(sampler.tau)},
            {"eta", kv_format(sampler.eta)},
            {"lr", kv_format(lr)},
            {"beta1", kv_format(beta1)},
            {"beta2", kv_format(beta2)},
            {"xi", kv_format(xi)},
            {"seed", std::to_string(seed)},
            {"early_stop", early_stop ? "1" : "0"},
            {"fixed_noise", fixed_noise ? "1" : "0"}};
  }
};

template <typename T>
struct CEResult {
  ImageTensor<T> image;             // I^CF
  std::vector<double> loss_trace;   // CE loss of I^(k) for every updated iteration k
  std::vector<double> target_prob;  // p(y_cf | I^(k)), same indexing
  double final_loss = 0.0;          // for I^CF itself
  double final_target_prob = 0.0;
  int final_label = -1;
  std::optional<int> flip_epoch;    // first k in [0, T2] with argmax = y_cf
  LatentTensor<T> z_init;           // final optimized latent
  std::vector<std::pair<int, ImageTensor<T>>> snapshots;
  int clamped_steps = 0;            // iterations whose p_target fell below 1e-12
  int prop1_checks = 0, prop1_violations = 0;
  double prop1_min_cos = 1.0;
};

// Read-only models used by the attack. The decoder is normally the per-sample copy.
template <typename T>
struct AttackModels {
  const Decoder<T>* decoder = nullptr;
  const Denoiser<T>* denoiser = nullptr;
  const ConditionEmbedder<T>* embedder = nullptr;
  const ClassifierModel<T>* classifier = nullptr;
};

// Per-iteration observer: (k, z_init before the update, full gradient, pruned gradient).
template <typename T>
using AttackObserver = std::function<void(int, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&)>;

inline std::uint64_t iteration_seed(std::uint64_t seed, int k, bool fixed) {
  return fixed ? seed : derive_seed(seed, static_cast<std::uint64_t>(k));
}

// Logits of the classifier on D(blended_denoise(z_init)); differentiable in z_init.
template <typename T>
Var<T> counterfactual_logits(const Var<T>& z_init, const ConditionEmbedding<T>& cond, const LatentMask& mask,
                             const Tensor<T>& bg_source, const NoiseSchedule& sched, const AttackModels<T>& models,
                             const SamplerConfig& sampler, std::uint64_t seed, Var<T>* image_out = nullptr) {
  Var<T> z0 = blended_denoise(z_init, cond, mask, bg_source, sched, *models.denoiser, sampler, seed);
  Var<T> img = (*models.decoder)(z0);
  if (image_out) *image_out = img;
  return models.classifier->logits(img);
}

template <typename T>
CEResult<T> generate_counterfactual(const ImageTensor<T>& image, int y_cf, const LatentMask& mask_lat,
                                    const PreservationResult<T>& pres, const AttackModels<T>& models,
                                    const NoiseSchedule& sched, const AttackConfig& cfg,
                                    const AttackObserver<T>& observe = {}) {
  if (cfg.T2 < 1) throw ConfigError("attack needs T2 >= 1");
  if (!models.decoder || !models.denoiser || !models.embedder || !models.classifier)
    throw ConfigError("attack models incomplete");
  if (y_cf < 0 || y_cf >= models.classifier->num_classes())
    throw DomainError("counterfactual target " + std::to_string(y_cf) + " outside classifier range");
  if (mask_lat.foreground_count() == 0)
    throw DegenerateMaskError("latent mask is empty; nothing can be edited");
  if (pres.z_f.height() * VaeModel<T>::kFactor != image.height())
    throw ShapeError("preservation result does not match image");

  const ConditionEmbedding<T> cond = models.embedder->embed(y_cf);
  Var<T> z_init(pres.blended_init(mask_lat).batch(), true);
  const Tensor<T> bg = pres.z_bg_star.batch();
  nn::Adam<T> opt({z_init}, {cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, 0.0});

  CEResult<T> res;
  for (int k = 0; k <= cfg.T2; ++k) {
    const std::uint64_t s = iteration_seed(cfg.seed, k, cfg.fixed_noise);
    const bool last = k == cfg.T2;
    Var<T> img;
    Var<T> logits;
    if (last) {
      NoGradGuard ng;
      logits = counterfactual_logits(z_init, cond, mask_lat, bg, sched, models, cfg.sampler, s, &img);
    } else {
      logits = counterfactual_logits(z_init, cond, mask_lat, bg, sched, models, cfg.sampler, s, &img);
    }
    Var<T> loss = ops::cross_entropy_rows(logits, {y_cf});
    std::vector<double> p(static_cast<std::size_t>(logits.dim(1)));
    {
      NoGradGuard ng;
      const Tensor<T> pr = ops::softmax_last(logits.detach()).value();
      for (std::size_t j = 0; j < p.size(); ++j) p[j] = pr[j];
    }
    const double pt = p[static_cast<std::size_t>(y_cf)];
    const double l = std::min<double>(loss.item(), -std::log(kProbFloor));
    if (!std::isfinite(l)) throw NumericalError("attack loss is not finite at iteration " + std::to_string(k));
    const int pred = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
    const bool flipped = pred == y_cf;
    if (flipped && !res.flip_epoch) res.flip_epoch = k;
    if (cfg.snapshot_every > 0 && (k % cfg.snapshot_every == 0 || last))
      res.snapshots.emplace_back(k, image_from_batch(img.value(), 0));

    if (last || (cfg.early_stop && flipped)) {
      res.image = image_from_batch(img.value(), 0);
      res.final_loss = l;
      res.final_target_prob = pt;
      res.final_label = pred;
      break;
    }
    res.loss_trace.push_back(l);
    res.target_prob.push_back(pt);
    if (pt < kProbFloor) ++res.clamped_steps;

    opt.zero_grad();
    loss.backward();
    const Tensor<T> full = z_init.grad();
    Tensor<T> pruned = prune_gradient(full, mask_lat);
    double pn = 0, fn = 0;
    for (std::size_t i = 0; i < pruned.size(); ++i) {
      pn += static_cast<double>(pruned[i]) * pruned[i];
      fn += static_cast<double>(full[i]) * full[i];
    }
    if (pn > 0.0 && fn > 0.0) {
      const double c = gradient_cosine(full, pruned);
      ++res.prop1_checks;
      res.prop1_min_cos = std::min(res.prop1_min_cos, c);
      if (!(c > 0.0)) ++res.prop1_violations;
    }
    if (observe) observe(k, z_init.value(), full, pruned);
    z_init.mutable_grad() = std::move(pruned);
    opt.step();
  }
  res.z_init = LatentTensor<T>(z_init.value());
  return res;
}

}  // namespace eced

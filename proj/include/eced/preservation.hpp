// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "eced/models/checkpoint.hpp"
#include "eced/models/vae.hpp"
#include "eced/rng.hpp"
#include "eced/schedule.hpp"
#include "eced/types.hpp"

namespace eced {

// (sum over background pixels and channels of |reconstructed - original|^p)^(1/p)
template <typename T>
Var<T> distance_loss(const Var<T>& reconstructed, const Tensor<T>& original, const BinaryMask& mask, double p) {
  if (!(p > 0.0)) throw DomainError("distance_loss: p must be positive, got " + std::to_string(p));
  reconstructed.value().require_same_shape(original, "distance_loss");
  if (reconstructed.shape().size() != 4 || reconstructed.dim(2) != mask.height || reconstructed.dim(3) != mask.width)
    throw ShapeError("distance_loss: mask does not match image");
  Var<T> diff = ops::mul_hw(ops::add_const(reconstructed, original * T(-1)), mask.complement_tensor<T>());
  return ops::pow_scalar(ops::sum(ops::abs_pow(diff, static_cast<T>(p))), static_cast<T>(1.0 / p));
}

template <typename T>
double distance_loss(const ImageTensor<T>& reconstructed, const ImageTensor<T>& original, const BinaryMask& mask,
                     double p) {
  NoGradGuard ng;
  return distance_loss(Var<T>(reconstructed.batch()), original.batch(), mask, p).item();
}

// Mean squared error per element over background pixels (all three channels).
template <typename T>
double background_mse(const Tensor<T>& a, const Tensor<T>& b, const BinaryMask& mask) {
  a.require_same_shape(b, "background_mse");
  const std::size_t hw = static_cast<std::size_t>(mask.height) * mask.width;
  if (a.size() != kImageChannels * hw) throw ShapeError("background_mse: mask does not match image");
  double se = 0;
  std::size_t n = 0;
  for (int c = 0; c < kImageChannels; ++c)
    for (std::size_t i = 0; i < hw; ++i)
      if (!mask.data[i]) {
        const double d = static_cast<double>(a[c * hw + i]) - b[c * hw + i];
        se += d * d;
        ++n;
      }
  return n ? se / static_cast<double>(n) : 0.0;
}

struct PreservationConfig {
  int steps = 500;  // N
  double lr = 3e-4;
  double p = 1.5;

  KeyValues echo() const {
    return {{"steps", std::to_string(steps)}, {"lr", kv_format(lr)}, {"p", kv_format(p)}};
  }
};

template <typename T>
struct PreservationResult {
  LatentTensor<T> z_f;        // encoder latent of the input image
  LatentTensor<T> z_bg_star;  // optimized background latent
  Decoder<T> decoder_star;    // per-sample decoder copy
  std::vector<double> loss_trace;
  PreservationConfig config;
  double residual_alpha_bar = 1.0;  // abar at the lowest sampler step
  double initial_bg_mse = 0.0;      // shared decoder, same noised input as final_bg_mse
  double final_bg_mse = 0.0;        // fine-tuned decoder, noised blended latent

  // z_init = z_F on M', z_bg* elsewhere.
  LatentTensor<T> blended_init(const LatentMask& m) const {
    NoGradGuard ng;
    return LatentTensor<T>(
        ops::select_hw(Var<T>(z_f.batch()), Var<T>(z_bg_star.batch()), m.as_tensor<T>()).value());
  }
};

// Random stream for the i-th preservation step.
inline Rng preservation_noise(std::uint64_t seed) { return Rng(derive_seed(seed, 0xb6)); }

namespace detail {

template <typename T>
Var<T> residual_noised(const Var<T>& z, double ab0, const Tensor<T>& eps) {
  return ops::lincomb(z, static_cast<T>(std::sqrt(ab0)), Var<T>(eps), static_cast<T>(std::sqrt(1.0 - ab0)));
}

}  // namespace detail

// Jointly optimizes the background latent and a private decoder copy so that
// the decoded, slightly noised blend reproduces the background. The shared VAE
// is never modified.
template <typename T>
PreservationResult<T> preserve_background(const ImageTensor<T>& image, const BinaryMask& mask_px,
                                          const LatentMask& mask_lat, const VaeModel<T>& vae,
                                          const NoiseSchedule& sched, const PreservationConfig& cfg,
                                          std::uint64_t seed) {
  if (cfg.steps < 1) throw ConfigError("preservation needs at least one step");
  if (mask_px.height != image.height() || mask_px.width != image.width())
    throw ShapeError("pixel mask does not match image");
  PreservationResult<T> res;
  res.config = cfg;
  res.z_f = vae.encode(image);
  if (mask_lat.height != res.z_f.height() || mask_lat.width != res.z_f.width())
    throw ShapeError("latent mask does not match latent");
  res.residual_alpha_bar = sched.alpha_bar(sched.sampler_step(0));
  const double ab0 = res.residual_alpha_bar;

  Decoder<T> dec = nn::deep_copy<T>(vae.decoder);
  nn::set_trainable<T>(dec, true);
  Var<T> z_bg(res.z_f.batch(), true);
  const Var<T> z_f(res.z_f.batch());
  const Tensor<T> m = mask_lat.as_tensor<T>();
  const Tensor<T> target = image.batch();
  nn::Adam<T> opt_z({z_bg}, {cfg.lr, 0.9, 0.999, 1e-8, 0.0});
  nn::Adam<T> opt_d(nn::parameters<T>(dec), {cfg.lr, 0.9, 0.999, 1e-8, 0.0});
  Rng rng = preservation_noise(seed);
  res.loss_trace.reserve(static_cast<std::size_t>(cfg.steps));
  for (int i = 0; i < cfg.steps; ++i) {
    opt_z.zero_grad();
    opt_d.zero_grad();
    Tensor<T> eps = rng.normal_tensor<T>(z_f.shape());
    Var<T> z0 = detail::residual_noised(ops::select_hw(z_f, z_bg, m), ab0, eps);
    Var<T> loss = distance_loss(dec(z0), target, mask_px, cfg.p);
    const double l = loss.item();
    if (!std::isfinite(l)) throw NumericalError("background preservation diverged at step " + std::to_string(i));
    res.loss_trace.push_back(l);
    loss.backward();
    opt_z.step();
    opt_d.step();
  }
  nn::set_trainable<T>(dec, false);
  res.z_bg_star = LatentTensor<T>(z_bg.value());
  res.decoder_star = dec;
  {
    NoGradGuard ng;
    Rng eval(derive_seed(seed, 0xe7));
    Var<T> z0 = detail::residual_noised(ops::select_hw(z_f, Var<T>(z_bg.value()), m), ab0,
                                        eval.normal_tensor<T>(z_f.shape()));
    res.final_bg_mse = background_mse(res.decoder_star(z0).value(), target, mask_px);
    res.initial_bg_mse = background_mse(vae.decoder(z0).value(), target, mask_px);
  }
  return res;
}

// Baseline decoder fine-tune on a fixed latent:
//   ||D(z0) * M - edited * M||_2 + lambda ||D(z0) * (1 - M) - original * (1 - M)||_2
template <typename T>
Decoder<T> finetune_decoder_posthoc(const VaeModel<T>& vae, const LatentTensor<T>& z0, const ImageTensor<T>& edited,
                                    const ImageTensor<T>& original, const BinaryMask& mask_px, double lambda,
                                    int steps, double lr, std::vector<double>* trace = nullptr) {
  if (lambda < 0.0) throw DomainError("lambda must be nonnegative");
  if (steps < 0) throw ConfigError("fine-tune steps must be nonnegative");
  Decoder<T> dec = nn::deep_copy<T>(vae.decoder);
  nn::set_trainable<T>(dec, true);
  nn::Adam<T> opt(nn::parameters<T>(dec), {lr, 0.9, 0.999, 1e-8, 0.0});
  const Var<T> z(z0.batch());
  const Tensor<T> fg_mask = mask_px.as_tensor<T>(), bg_mask = mask_px.complement_tensor<T>();
  const Tensor<T> e = edited.batch(), o = original.batch();
  for (int i = 0; i < steps; ++i) {
    opt.zero_grad();
    Var<T> out = dec(z);
    Var<T> fg = ops::pow_scalar(ops::sum(ops::square(ops::mul_hw(ops::add_const(out, e * T(-1)), fg_mask))), T(0.5));
    Var<T> bg = ops::pow_scalar(ops::sum(ops::square(ops::mul_hw(ops::add_const(out, o * T(-1)), bg_mask))), T(0.5));
    Var<T> loss = ops::add(fg, ops::scale(bg, static_cast<T>(lambda)));
    if (!std::isfinite(loss.item())) throw NumericalError("decoder fine-tune diverged at step " + std::to_string(i));
    if (trace) trace->push_back(loss.item());
    loss.backward();
    opt.step();
  }
  nn::set_trainable<T>(dec, false);
  return dec;
}

// Persists z_F, z_bg* and the decoder copy in one checkpoint.
template <typename T>
void save_preservation(const PreservationResult<T>& r, const VaeArch& arch, const std::filesystem::path& path,
                       std::uint64_t seed) {
  CheckpointBlob<T> blob;
  blob.kind = ComponentKind::Preservation;
  blob.seed = seed;
  blob.record = detail::prefixed(arch.to_kv(), "arch.");
  for (const auto& [k, v] : detail::prefixed(r.config.echo(), "train.")) blob.record[k] = v;
  Decoder<T> d = r.decoder_star;
  d.visit("", [&](const std::string& name, Var<T>& v) { blob.tensors.emplace_back(name, v.value()); });
  blob.tensors.emplace_back("latent_scale", Tensor<T>({1}, std::vector<T>{r.decoder_star.latent_scale}));
  blob.tensors.emplace_back("z_f", r.z_f.tensor());
  blob.tensors.emplace_back("z_bg_star", r.z_bg_star.tensor());
  blob.tensors.emplace_back("loss_trace", Tensor<T>({static_cast<int>(r.loss_trace.size())},
                                                    std::vector<T>(r.loss_trace.begin(), r.loss_trace.end())));
  blob.tensors.emplace_back(
      "stats", Tensor<T>({3}, std::vector<T>{static_cast<T>(r.residual_alpha_bar), static_cast<T>(r.initial_bg_mse),
                                             static_cast<T>(r.final_bg_mse)}));
  write_checkpoint(path, blob);
}

template <typename T>
PreservationResult<T> load_preservation(const std::filesystem::path& path) {
  auto blob = read_checkpoint<T>(path, ComponentKind::Preservation);
  Rng rng(0);
  const VaeArch arch = VaeArch::from_kv(detail::strip_prefix(blob.record, "arch."));
  PreservationResult<T> r;
  r.decoder_star = Decoder<T>(arch, rng);
  r.decoder_star.visit("", [&](const std::string& name, Var<T>& v) {
    v = Var<T>(blob.tensor(name), false);
  });
  r.decoder_star.latent_scale = blob.tensor("latent_scale")[0];
  r.z_f = LatentTensor<T>(blob.tensor("z_f"));
  r.z_bg_star = LatentTensor<T>(blob.tensor("z_bg_star"));
  const auto& tr = blob.tensor("loss_trace");
  r.loss_trace.assign(tr.values().begin(), tr.values().end());
  const auto train = detail::strip_prefix(blob.record, "train.");
  r.config.steps = kv_int(train, "steps");
  r.config.lr = kv_double(train, "lr");
  r.config.p = kv_double(train, "p");
  const auto& st = blob.tensor("stats");
  r.residual_alpha_bar = st[0];
  r.initial_bg_mse = st[1];
  r.final_bg_mse = st[2];
  return r;
}

}  // namespace eced

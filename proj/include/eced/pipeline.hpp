// SPDX-License-Identifier: Apache-2.0
#pragma once

// End-to-end composition: identify the foreground, preserve the background,
// then attack through the blended sampler.

#include <cstdint>
#include <string>
#include <vector>

#include "eced/blended.hpp"
#include "eced/counterfactual.hpp"
#include "eced/models/classifier.hpp"
#include "eced/models/denoiser.hpp"
#include "eced/models/vae.hpp"
#include "eced/preservation.hpp"
#include "eced/saliency.hpp"

namespace eced {

template <typename T>
struct ModelBundle {
  VaeModel<T> vae;
  Denoiser<T> denoiser;
  ConditionEmbedder<T> embedder;
  ClassifierModel<T> classifier;
};

// Share of full-sampler draws that the classifier assigns to their conditioning class.
template <typename T>
double sample_fidelity(const ModelBundle<T>& m, const NoiseSchedule& sched, int per_class, int latent_size,
                       double eta, std::uint64_t seed, std::vector<double>* per_class_rate = nullptr) {
  int hits = 0, total = 0;
  for (int y = 0; y < m.embedder.num_classes(); ++y) {
    const Tensor<T> z = sample_latents(m.embedder.embed(y), per_class, latent_size, latent_size, sched, m.denoiser,
                                       eta, derive_seed(seed, static_cast<std::uint64_t>(y)));
    Tensor<T> imgs;
    {
      NoGradGuard ng;
      imgs = m.vae.decode_batch(Var<T>(z)).value();
    }
    const auto probs = m.classifier.probabilities(imgs);
    int h = 0;
    for (const auto& p : probs) h += static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin()) == y;
    if (per_class_rate) per_class_rate->push_back(static_cast<double>(h) / per_class);
    hits += h;
    total += per_class;
  }
  return static_cast<double>(hits) / total;
}

struct ExplainConfig {
  std::string layer = "features_3";
  double xi = 0.5;
  PreservationConfig preservation;
  AttackConfig attack;
  // Label whose attention map drives the mask: -1 uses the classifier prediction.
  int mask_label = -1;
};

template <typename T>
struct Explanation {
  int y_f = -1;
  int y_cf = -1;
  ForegroundSplit split;
  PreservationResult<T> preservation;
  CEResult<T> ce;
  ImageTensor<T> preserved_image;  // D*(noised z_init) before any attack step
};

// Decoded blend of z_F and z_bg* with the residual sampler noise, through the fine-tuned decoder.
template <typename T>
ImageTensor<T> preserved_image(const PreservationResult<T>& r, const LatentMask& m, std::uint64_t seed) {
  NoGradGuard ng;
  Rng eval(derive_seed(seed, 0xe7));
  const double ab0 = r.residual_alpha_bar;
  Var<T> z0 = ops::lincomb(Var<T>(r.blended_init(m).batch()), static_cast<T>(std::sqrt(ab0)),
                           Var<T>(eval.normal_tensor<T>({1, kLatentChannels, m.height, m.width})),
                           static_cast<T>(std::sqrt(1.0 - ab0)));
  return image_from_batch(r.decoder_star(z0).value(), 0);
}

template <typename T>
Explanation<T> explain(const ImageTensor<T>& image, int y_cf, const ModelBundle<T>& m, const NoiseSchedule& sched,
                       const ExplainConfig& cfg, std::uint64_t seed) {
  Explanation<T> e;
  e.y_f = m.classifier.predict(image);
  if (y_cf == e.y_f) throw DomainError("target equals original label (" + std::to_string(y_cf) + ")");
  e.y_cf = y_cf;
  const int mask_label = cfg.mask_label >= 0 ? cfg.mask_label : e.y_f;
  e.split = identify_foreground(image, mask_label, m.classifier, cfg.layer, cfg.xi, m.vae.factor());
  if (e.split.latent_mask.foreground_count() == 0)
    throw DegenerateMaskError("threshold " + std::to_string(cfg.xi) + " leaves no foreground");
  e.preservation = preserve_background(image, e.split.pixel_mask, e.split.latent_mask, m.vae, sched,
                                       cfg.preservation, derive_seed(seed, 0x70));
  e.preserved_image = preserved_image(e.preservation, e.split.latent_mask, derive_seed(seed, 0x70));
  AttackConfig ac = cfg.attack;
  ac.xi = cfg.xi;
  ac.seed = derive_seed(seed, 0xa7);
  const AttackModels<T> am{&e.preservation.decoder_star, &m.denoiser, &m.embedder, &m.classifier};
  e.ce = generate_counterfactual(image, y_cf, e.split.latent_mask, e.preservation, am, sched, ac);
  return e;
}

}  // namespace eced

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <numbers>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "eced/dataset.hpp"
#include "eced/models/classifier.hpp"
#include "eced/models/denoiser.hpp"
#include "eced/models/vae.hpp"
#include "eced/schedule.hpp"

namespace eced {

struct TrainConfig {
  int epochs = 10;
  int batch_size = 32;
  double lr = 1e-3;
  double weight_decay = 0.0;
  bool cosine_decay = true;  // lr follows a half cosine down to zero
  double kl_weight = 1e-4;   // VAE only
  std::uint64_t seed = 0;
  bool verbose = false;

  KeyValues echo() const {
    return {{"epochs", std::to_string(epochs)},       {"batch_size", std::to_string(batch_size)},
            {"lr", kv_format(lr)},               {"weight_decay", kv_format(weight_decay)},
            {"cosine_decay", cosine_decay ? "1" : "0"}, {"kl_weight", kv_format(kl_weight)},
            {"seed", std::to_string(seed)}};
  }
};

struct TrainLog {
  std::vector<double> epoch_loss;  // mean training loss per epoch
  double heldout_metric = 0.0;      // accuracy (classifier), per-pixel MSE (VAE), final loss (diffusion)
};

template <typename Model>
struct Trained {
  Model model;
  TrainLog log;
};

namespace detail {

inline void check_dataset(const ToyDataset& ds) {
  if (ds.train_index.empty()) throw ConfigError("training dataset is empty");
}

inline std::vector<int> epoch_order(const std::vector<int>& index, std::uint64_t seed, int epoch) {
  std::vector<int> order = index;
  std::mt19937_64 eng(derive_seed(seed, 0x5eed0000ULL + static_cast<std::uint64_t>(epoch)));
  std::shuffle(order.begin(), order.end(), eng);
  return order;
}

inline double scheduled_lr(const TrainConfig& cfg, long long step, long long total) {
  if (!cfg.cosine_decay || total <= 1) return cfg.lr;
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

inline void check_finite(double loss, const std::string& what, int epoch, int step) {
  if (!std::isfinite(loss))
    throw TrainingError(what + " diverged: loss " + std::to_string(loss) + " at epoch " + std::to_string(epoch) +
                        ", step " + std::to_string(step));
}

inline void report(const TrainConfig& cfg, const std::string& what, int epoch, double loss) {
  if (cfg.verbose) std::cerr << what << " epoch " << epoch + 1 << "/" << cfg.epochs << " loss " << loss << "\n";
}

inline std::vector<std::vector<int>> batches(const std::vector<int>& order, int batch_size) {
  std::vector<std::vector<int>> out;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size))
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size)));
  return out;
}

}  // namespace detail

// Held-out accuracy of a classifier.
template <typename T>
double classifier_accuracy(const ClassifierModel<T>& model, const ToyDataset& ds, const std::vector<int>& index) {
  if (index.empty()) return 0.0;
  int correct = 0;
  for (std::size_t i = 0; i < index.size(); i += 64) {
    std::vector<int> chunk(index.begin() + static_cast<std::ptrdiff_t>(i),
                           index.begin() + static_cast<std::ptrdiff_t>(std::min(index.size(), i + 64)));
    auto probs = model.probabilities(ds.batch<T>(chunk));
    for (std::size_t k = 0; k < chunk.size(); ++k) {
      const int pred = static_cast<int>(std::max_element(probs[k].begin(), probs[k].end()) - probs[k].begin());
      correct += pred == ds.labels[static_cast<std::size_t>(chunk[k])];
    }
  }
  return static_cast<double>(correct) / static_cast<double>(index.size());
}

template <typename T>
Trained<ClassifierModel<T>> train_classifier(const ToyDataset& ds, const ClassifierArch& arch,
                                             const TrainConfig& cfg) {
  detail::check_dataset(ds);
  {
    std::vector<int> seen(static_cast<std::size_t>(std::max(arch.num_classes, 1)), 0);
    int distinct = 0;
    for (int i : ds.train_index) {
      const int l = ds.labels[static_cast<std::size_t>(i)];
      if (l < 0 || l >= arch.num_classes) throw ConfigError("label outside classifier range");
      distinct += seen[static_cast<std::size_t>(l)]++ == 0;
    }
    if (distinct < 2) throw TrainingError("classifier training needs at least two distinct labels");
  }
  Rng rng(derive_seed(cfg.seed, 1));
  Trained<ClassifierModel<T>> out{ClassifierModel<T>(arch, rng), {}};
  auto& model = out.model;
  nn::Adam<T> opt(nn::parameters<T>(model), {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  const long long total = static_cast<long long>(cfg.epochs) *
                          ((static_cast<long long>(ds.train_index.size()) + cfg.batch_size - 1) / cfg.batch_size);
  long long step = 0;
  for (int e = 0; e < cfg.epochs; ++e) {
    double sum = 0;
    int count = 0;
    for (const auto& b : detail::batches(detail::epoch_order(ds.train_index, cfg.seed, e), cfg.batch_size)) {
      opt.set_lr(detail::scheduled_lr(cfg, step++, total));
      opt.zero_grad();
      Var<T> loss = ops::mean(ops::cross_entropy_rows(model.logits(Var<T>(ds.batch<T>(b))), ds.labels_of(b)));
      detail::check_finite(loss.item(), "classifier training", e, count);
      loss.backward();
      opt.step();
      sum += loss.item() * static_cast<double>(b.size());
      count += static_cast<int>(b.size());
    }
    out.log.epoch_loss.push_back(sum / count);
    detail::report(cfg, "classifier", e, sum / count);
  }
  nn::set_trainable<T>(model, false);
  out.log.heldout_metric = classifier_accuracy(model, ds, ds.holdout_index);
  return out;
}

// Mean per-element squared error of decode(encode(x)) over `index`.
template <typename T>
double reconstruction_mse(const VaeModel<T>& vae, const ToyDataset& ds, const std::vector<int>& index) {
  NoGradGuard ng;
  double se = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < index.size(); i += 64) {
    std::vector<int> chunk(index.begin() + static_cast<std::ptrdiff_t>(i),
                           index.begin() + static_cast<std::ptrdiff_t>(std::min(index.size(), i + 64)));
    Tensor<T> x = ds.batch<T>(chunk);
    Tensor<T> r = vae.decode_batch(vae.encode_batch(Var<T>(x))).value();
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double d = static_cast<double>(r[j]) - x[j];
      se += d * d;
    }
    n += x.size();
  }
  return n ? se / static_cast<double>(n) : 0.0;
}

// Trains with the reparameterized ELBO (MSE + weighted KL), then sets the latent
// scale to 1/std of the posterior means so latents are roughly unit variance.
template <typename T>
Trained<VaeModel<T>> train_vae(const ToyDataset& ds, const VaeArch& arch, const TrainConfig& cfg) {
  detail::check_dataset(ds);
  Rng rng(derive_seed(cfg.seed, 2));
  Trained<VaeModel<T>> out{VaeModel<T>(arch, rng), {}};
  auto& vae = out.model;
  nn::Adam<T> opt(nn::parameters<T>(vae), {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  Rng noise(derive_seed(cfg.seed, 3));
  const long long total = static_cast<long long>(cfg.epochs) *
                          ((static_cast<long long>(ds.train_index.size()) + cfg.batch_size - 1) / cfg.batch_size);
  long long step = 0;
  for (int e = 0; e < cfg.epochs; ++e) {
    double sum = 0;
    int count = 0;
    for (const auto& b : detail::batches(detail::epoch_order(ds.train_index, cfg.seed, e), cfg.batch_size)) {
      opt.set_lr(detail::scheduled_lr(cfg, step++, total));
      opt.zero_grad();
      Var<T> x(ds.batch<T>(b));
      auto [mu, logvar] = vae.encoder(x);
      Var<T> std_ = ops::exp(ops::scale(logvar, T(0.5)));
      Var<T> z = ops::add(mu, ops::mul(std_, Var<T>(noise.normal_tensor<T>(mu.shape()))));
      Var<T> rec = ops::mean(ops::square(ops::sub(vae.decoder(z), x)));
      Var<T> kl = ops::scale(
          ops::mean(ops::sub(ops::add(ops::square(mu), ops::exp(logvar)), ops::add_scalar(logvar, T(1)))), T(0.5));
      Var<T> loss = ops::add(rec, ops::scale(kl, static_cast<T>(cfg.kl_weight)));
      detail::check_finite(loss.item(), "VAE training", e, count);
      loss.backward();
      opt.step();
      sum += rec.item() * static_cast<double>(b.size());
      count += static_cast<int>(b.size());
    }
    out.log.epoch_loss.push_back(sum / count);
    detail::report(cfg, "vae", e, sum / count);
  }
  {
    NoGradGuard ng;
    double s = 0, s2 = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < ds.train_index.size(); i += 64) {
      std::vector<int> chunk(ds.train_index.begin() + static_cast<std::ptrdiff_t>(i),
                             ds.train_index.begin() +
                                 static_cast<std::ptrdiff_t>(std::min(ds.train_index.size(), i + 64)));
      Tensor<T> mu = vae.encoder(Var<T>(ds.batch<T>(chunk))).first.value();
      for (T v : mu.values()) {
        s += v;
        s2 += static_cast<double>(v) * v;
      }
      n += mu.size();
    }
    const double mean = s / n, sd = std::sqrt(std::max(s2 / n - mean * mean, 1e-12));
    vae.set_latent_scale(static_cast<T>(1.0 / sd));
  }
  nn::set_trainable<T>(vae, false);
  out.log.heldout_metric = reconstruction_mse(vae, ds, ds.holdout_index);
  return out;
}

template <typename T>
struct DiffusionPair {
  Denoiser<T> denoiser;
  ConditionEmbedder<T> embedder;
};

// Scaled posterior-mean latents for the given images, [n, 4, h, w].
template <typename T>
Tensor<T> encode_dataset(const VaeModel<T>& vae, const ToyDataset& ds, const std::vector<int>& index) {
  NoGradGuard ng;
  const int h = ds.image_size() / VaeModel<T>::kFactor;
  Tensor<T> out({static_cast<int>(index.size()), kLatentChannels, h, h});
  const std::size_t per = static_cast<std::size_t>(kLatentChannels) * h * h;
  for (std::size_t i = 0; i < index.size(); i += 64) {
    std::vector<int> chunk(index.begin() + static_cast<std::ptrdiff_t>(i),
                           index.begin() + static_cast<std::ptrdiff_t>(std::min(index.size(), i + 64)));
    Tensor<T> z = vae.encode_batch(Var<T>(ds.batch<T>(chunk))).value();
    std::copy_n(z.data(), z.size(), out.data() + i * per);
  }
  return out;
}

// Minimizes E||eps - eps_theta(z_t, C_y, t)||^2 over uniformly drawn t, jointly
// with the class-token table. The VAE is only read.
template <typename T>
Trained<DiffusionPair<T>> train_diffusion(const ToyDataset& ds, const VaeModel<T>& vae, const NoiseSchedule& sched,
                                          const DenoiserArch& arch, const TrainConfig& cfg) {
  detail::check_dataset(ds);
  Rng rng(derive_seed(cfg.seed, 4));
  Trained<DiffusionPair<T>> out{{Denoiser<T>(arch, rng), ConditionEmbedder<T>(arch.num_classes, arch.tokens,
                                                                              arch.embed_dim, rng)},
                                {}};
  auto& net = out.model.denoiser;
  auto& emb = out.model.embedder;
  Tensor<T> latents = encode_dataset(vae, ds, ds.train_index);
  std::vector<int> slot(ds.train_index.size());
  std::iota(slot.begin(), slot.end(), 0);
  auto params = nn::parameters<T>(net);
  params.push_back(emb.table);
  nn::Adam<T> opt(params, {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  Rng noise(derive_seed(cfg.seed, 5));
  const int h = latents.dim(2), w = latents.dim(3);
  const std::size_t per = static_cast<std::size_t>(kLatentChannels) * h * w;
  const long long total =
      static_cast<long long>(cfg.epochs) * ((static_cast<long long>(slot.size()) + cfg.batch_size - 1) / cfg.batch_size);
  long long step = 0;
  for (int e = 0; e < cfg.epochs; ++e) {
    double sum = 0;
    int count = 0;
    for (const auto& b : detail::batches(detail::epoch_order(slot, cfg.seed, e), cfg.batch_size)) {
      opt.set_lr(detail::scheduled_lr(cfg, step++, total));
      opt.zero_grad();
      const int B = static_cast<int>(b.size());
      Tensor<T> zt({B, kLatentChannels, h, w});
      Tensor<T> eps = noise.normal_tensor<T>({B, kLatentChannels, h, w});
      std::vector<int> steps(static_cast<std::size_t>(B)), labels(static_cast<std::size_t>(B));
      for (int k = 0; k < B; ++k) {
        const int t = noise.uniform_int(0, sched.T1 - 1);
        steps[static_cast<std::size_t>(k)] = t;
        labels[static_cast<std::size_t>(k)] =
            ds.labels[static_cast<std::size_t>(ds.train_index[static_cast<std::size_t>(b[static_cast<std::size_t>(k)])])];
        const double ab = sched.alpha_bar(t);
        const T a = static_cast<T>(std::sqrt(ab)), s = static_cast<T>(std::sqrt(1.0 - ab));
        const T* z0 = latents.data() + static_cast<std::size_t>(b[static_cast<std::size_t>(k)]) * per;
        for (std::size_t j = 0; j < per; ++j) zt[k * per + j] = a * z0[j] + s * eps[k * per + j];
      }
      Var<T> pred = net(Var<T>(std::move(zt)), emb.batch(labels), steps);
      Var<T> loss = ops::mean(ops::square(ops::sub(pred, Var<T>(std::move(eps)))));
      detail::check_finite(loss.item(), "diffusion training", e, count);
      loss.backward();
      opt.step();
      sum += loss.item() * B;
      count += B;
    }
    out.log.epoch_loss.push_back(sum / count);
    detail::report(cfg, "diffusion", e, sum / count);
  }
  nn::set_trainable<T>(net, false);
  emb.table.set_requires_grad(false);
  emb.table.zero_grad();
  out.log.heldout_metric = out.log.epoch_loss.empty() ? 0.0 : out.log.epoch_loss.back();
  return out;
}

}  // namespace eced

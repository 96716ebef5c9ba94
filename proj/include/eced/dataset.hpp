// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "eced/rng.hpp"
#include "eced/types.hpp"

namespace eced {

struct DatasetConfig {
  int size = 2000;
  int num_classes = 2;
  int image_size = 64;
  std::uint64_t seed = 7;
  double holdout_fraction = 0.1;
};

// Procedural images: a textured blob over a class-independent background.
// The class lives only in the blob texture:
//   0 spots, 1 horizontal stripes, 2 vertical stripes, 3 plain.
struct ToyDataset {
  DatasetConfig config;
  Tensor<float> images;           // [N, 3, S, S]
  std::vector<int> labels;
  std::vector<BinaryMask> objects;  // ground-truth blob support, for diagnostics
  std::vector<int> train_index, holdout_index;

  int size() const { return static_cast<int>(labels.size()); }
  int image_size() const { return config.image_size; }

  template <typename T = float>
  ImageTensor<T> image(int i) const {
    const int S = config.image_size;
    const std::size_t n = 3 * static_cast<std::size_t>(S) * S;
    std::vector<T> v(images.data() + i * n, images.data() + (i + 1) * n);
    return ImageTensor<T>(Tensor<T>({3, S, S}, std::move(v)));
  }

  template <typename T = float>
  Tensor<T> batch(const std::vector<int>& idx) const {
    const int S = config.image_size;
    const std::size_t n = 3 * static_cast<std::size_t>(S) * S;
    Tensor<T> out({static_cast<int>(idx.size()), 3, S, S});
    for (std::size_t k = 0; k < idx.size(); ++k)
      std::copy_n(images.data() + idx[k] * n, n, out.data() + k * n);
    return out;
  }

  std::vector<int> labels_of(const std::vector<int>& idx) const {
    std::vector<int> out;
    for (int i : idx) out.push_back(labels[static_cast<std::size_t>(i)]);
    return out;
  }
};

namespace detail {

inline double smoothstep01(double x) {
  x = std::clamp(x, 0.0, 1.0);
  return x * x * (3 - 2 * x);
}

// Renders one image into `px` (3 x S x S, channel-major) and its blob mask.
inline void render_toy_image(int label, int S, Rng& rng, float* px, BinaryMask& blob) {
  constexpr double kPi = std::numbers::pi;
  // Background: vertical green/olive gradient with a faint low-frequency ripple.
  const double top[3] = {rng.uniform(0.25, 0.40), rng.uniform(0.45, 0.60), rng.uniform(0.20, 0.35)};
  const double bot[3] = {rng.uniform(0.30, 0.45), rng.uniform(0.35, 0.50), rng.uniform(0.15, 0.30)};
  const double ripple_amp = rng.uniform(0.0, 0.04);
  const double ripple_fx = rng.uniform(0.5, 2.0) * 2 * kPi / S;
  const double ripple_fy = rng.uniform(0.5, 2.0) * 2 * kPi / S;
  const double ripple_ph = rng.uniform(0.0, 2 * kPi);

  // Blob: ellipse with tan body color.
  const double cx = rng.uniform(0.33, 0.67) * S, cy = rng.uniform(0.33, 0.67) * S;
  const double rx = rng.uniform(0.18, 0.25) * S, ry = rng.uniform(0.18, 0.25) * S;
  const double body[3] = {rng.uniform(0.75, 0.90), rng.uniform(0.60, 0.72), rng.uniform(0.35, 0.48)};
  const double ink = rng.uniform(0.10, 0.20);

  // Texture parameters.
  const double period = S / 8.0;
  const double phase_x = rng.uniform(0.0, period), phase_y = rng.uniform(0.0, period);
  std::vector<double> jitter(64);
  for (auto& j : jitter) j = rng.uniform(-0.15, 0.15) * period;

  blob = BinaryMask(S, S);
  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x) {
      const double fy = static_cast<double>(y) / (S - 1);
      double bg[3];
      const double rip = ripple_amp * std::sin(ripple_fx * x + ripple_fy * y + ripple_ph);
      for (int c = 0; c < 3; ++c) bg[c] = top[c] + (bot[c] - top[c]) * fy + rip;

      const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
      const double r = std::sqrt(dx * dx + dy * dy);
      // Anti-aliased edge about one pixel wide.
      const double cover = smoothstep01((1.0 - r) * std::min(rx, ry) + 0.5);
      blob.data[static_cast<std::size_t>(y) * S + x] = r < 1.0 ? 1 : 0;

      double tex = 0.0;  // 1 = dark marking
      const double u = x + 0.5 + phase_x, v = y + 0.5 + phase_y;
      switch (label) {
        case 0: {
          const int gx = static_cast<int>(std::floor(u / period)), gy = static_cast<int>(std::floor(v / period));
          const double sx = (gx + 0.5) * period + jitter[static_cast<std::size_t>((gx & 7) * 8 + (gy & 7))];
          const double sy = (gy + 0.5) * period + jitter[static_cast<std::size_t>((gy & 7) * 8 + (gx & 7))];
          const double d = std::hypot(u - sx, v - sy);
          tex = smoothstep01(0.32 * period - d + 0.5);
          break;
        }
        case 1: tex = smoothstep01(2.0 * std::sin(2 * kPi * v / period)); break;
        case 2: tex = smoothstep01(2.0 * std::sin(2 * kPi * u / period)); break;
        default: break;
      }
      for (int c = 0; c < 3; ++c) {
        const double fg = body[c] * (1.0 - tex) + ink * tex;
        const double val = bg[c] * (1.0 - cover) + fg * cover;
        px[(static_cast<std::size_t>(c) * S + y) * S + x] = static_cast<float>(std::clamp(val, 0.0, 1.0));
      }
    }
  }
}

}  // namespace detail

inline ToyDataset generate_dataset(const DatasetConfig& cfg) {
  if (cfg.num_classes < 2 || cfg.num_classes > 4)
    throw ConfigError("dataset needs between 2 and 4 classes, got " + std::to_string(cfg.num_classes));
  if (cfg.size < cfg.num_classes) throw ConfigError("dataset size smaller than class count");
  if (cfg.image_size <= 0 || cfg.image_size % 8)
    throw ConfigError("dataset image size must be a positive multiple of 8");
  if (!(cfg.holdout_fraction > 0.0 && cfg.holdout_fraction < 1.0))
    throw ConfigError("holdout fraction must lie in (0, 1)");
  ToyDataset ds;
  ds.config = cfg;
  const int S = cfg.image_size;
  ds.images = Tensor<float>({cfg.size, 3, S, S});
  ds.labels.resize(static_cast<std::size_t>(cfg.size));
  ds.objects.resize(static_cast<std::size_t>(cfg.size));
  const std::size_t n = 3 * static_cast<std::size_t>(S) * S;
  for (int i = 0; i < cfg.size; ++i) {
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(i)));
    ds.labels[static_cast<std::size_t>(i)] = i % cfg.num_classes;
    detail::render_toy_image(i % cfg.num_classes, S, rng, ds.images.data() + i * n,
                             ds.objects[static_cast<std::size_t>(i)]);
  }
  // Hold out whole label cycles (one image per class) so both splits stay balanced.
  const int every = std::max(2, static_cast<int>(std::lround(1.0 / cfg.holdout_fraction)));
  for (int i = 0; i < cfg.size; ++i) {
    if ((i / cfg.num_classes) % every == 0)
      ds.holdout_index.push_back(i);
    else
      ds.train_index.push_back(i);
  }
  return ds;
}

}  // namespace eced

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "eced/types.hpp"

namespace eced {

// What score_cam needs from a classifier:
//   Tensor<T> activations(const ImageTensor<T>&, const std::string& layer) const;  // [K_l, h, w]
//   std::vector<std::vector<double>> probabilities(const Tensor<T>& batch) const;    // [N][K]
template <typename C, typename T>
concept ActivationClassifier = requires(const C& c, const ImageTensor<T>& img, const Tensor<T>& batch) {
  { c.activations(img, std::string{}) } -> std::convertible_to<Tensor<T>>;
  { c.probabilities(batch) } -> std::convertible_to<std::vector<std::vector<double>>>;
};

// Bilinear resize of one h x w plane to H x W with half-pixel centers.
inline std::vector<double> resize_bilinear(const double* src, int h, int w, int H, int W) {
  std::vector<double> out(static_cast<std::size_t>(H) * W);
  for (int y = 0; y < H; ++y) {
    const double sy = std::clamp((y + 0.5) * h / H - 0.5, 0.0, static_cast<double>(h - 1));
    const int y0 = static_cast<int>(sy), y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - y0;
    for (int x = 0; x < W; ++x) {
      const double sx = std::clamp((x + 0.5) * w / W - 0.5, 0.0, static_cast<double>(w - 1));
      const int x0 = static_cast<int>(sx), x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - x0;
      const double top = src[y0 * w + x0] * (1 - fx) + src[y0 * w + x1] * fx;
      const double bot = src[y1 * w + x0] * (1 - fx) + src[y1 * w + x1] * fx;
      out[static_cast<std::size_t>(y) * W + x] = top * (1 - fy) + bot * fy;
    }
  }
  return out;
}

// Min-max normalization to [0, 1]; a constant input maps to all zeros.
inline void normalize_min_max(std::vector<double>& v) {
  if (v.empty()) return;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double a = *lo, b = *hi;
  if (!(b > a)) {
    std::fill(v.begin(), v.end(), 0.0);
    return;
  }
  for (double& x : v) x = (x - a) / (b - a);
}

template <typename T, typename Classifier>
  requires ActivationClassifier<Classifier, T>
AttentionMap score_cam(const ImageTensor<T>& image, int label, const Classifier& model, const std::string& layer) {
  const Tensor<T> acts = model.activations(image, layer);
  if (acts.rank() != 3) throw ShapeError("activation stack must be [K, h, w], got " + shape_str(acts.shape()));
  const int K = acts.dim(0), h = acts.dim(1), w = acts.dim(2);
  const int H = image.height(), W = image.width();
  const std::size_t HW = static_cast<std::size_t>(H) * W;

  std::vector<std::vector<double>> maps(static_cast<std::size_t>(K));
  std::vector<double> plane(static_cast<std::size_t>(h) * w);
  for (int k = 0; k < K; ++k) {
    for (std::size_t i = 0; i < plane.size(); ++i) plane[i] = acts[k * plane.size() + i];
    maps[static_cast<std::size_t>(k)] = resize_bilinear(plane.data(), h, w, H, W);
    normalize_min_max(maps[static_cast<std::size_t>(k)]);
  }

  // Score each channel by the target probability of the image masked with it.
  Tensor<T> masked({K, kImageChannels, H, W});
  for (int k = 0; k < K; ++k)
    for (int c = 0; c < kImageChannels; ++c)
      for (std::size_t p = 0; p < HW; ++p)
        masked[(static_cast<std::size_t>(k) * kImageChannels + c) * HW + p] =
            image.tensor()[c * HW + p] * static_cast<T>(maps[static_cast<std::size_t>(k)][p]);
  const auto probs = model.probabilities(masked);
  if (static_cast<int>(probs.size()) != K) throw ShapeError("classifier returned wrong batch size");
  if (label < 0 || label >= static_cast<int>(probs[0].size()))
    throw DomainError("label " + std::to_string(label) + " outside classifier range");

  std::vector<double> wts(static_cast<std::size_t>(K));
  double smax = -1e300;
  for (int k = 0; k < K; ++k) smax = std::max(smax, probs[static_cast<std::size_t>(k)][static_cast<std::size_t>(label)]);
  double z = 0;
  for (int k = 0; k < K; ++k) {
    wts[static_cast<std::size_t>(k)] = std::exp(probs[static_cast<std::size_t>(k)][static_cast<std::size_t>(label)] - smax);
    z += wts[static_cast<std::size_t>(k)];
  }

  AttentionMap u{H, W, std::vector<double>(HW, 0.0)};
  for (int k = 0; k < K; ++k) {
    const double wk = wts[static_cast<std::size_t>(k)] / z;
    const auto& m = maps[static_cast<std::size_t>(k)];
    for (std::size_t p = 0; p < HW; ++p) u.data[p] += wk * m[p];
  }
  for (double& v : u.data) v = std::max(v, 0.0);
  normalize_min_max(u.data);
  return u;
}

// M_ij = 1 iff U_ij > xi (strict).
inline BinaryMask threshold_mask(const AttentionMap& u, double xi) {
  if (!(xi >= 0.0 && xi < 1.0)) throw DomainError("threshold xi must lie in [0, 1), got " + std::to_string(xi));
  BinaryMask m(u.height, u.width);
  for (std::size_t i = 0; i < u.data.size(); ++i) m.data[i] = u.data[i] > xi ? 1 : 0;
  m.threshold = xi;
  return m;
}

// Block-max downsampling: a latent cell is foreground if any pixel in its f x f block is.
inline LatentMask downsample_mask(const BinaryMask& m, int f) {
  if (f <= 0 || m.height % f || m.width % f)
    throw ShapeError("mask " + std::to_string(m.height) + "x" + std::to_string(m.width) +
                     " not divisible by factor " + std::to_string(f));
  LatentMask out(m.height / f, m.width / f);
  out.threshold = m.threshold;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m.at(y, x)) out.at(y / f, x / f) = 1;
  return out;
}

struct ForegroundSplit {
  AttentionMap attention;
  BinaryMask pixel_mask;
  LatentMask latent_mask;
};

// Score-CAM map, thresholded pixel mask and latent mask for one image.
template <typename T, typename Classifier>
ForegroundSplit identify_foreground(const ImageTensor<T>& image, int label, const Classifier& model,
                                    const std::string& layer, double xi, int factor) {
  ForegroundSplit s;
  s.attention = score_cam(image, label, model, layer);
  s.pixel_mask = threshold_mask(s.attention, xi);
  s.latent_mask = downsample_mask(s.pixel_mask, factor);
  return s;
}

}  // namespace eced

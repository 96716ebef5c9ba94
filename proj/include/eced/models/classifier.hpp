// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <string>
#include <vector>

#include "eced/kv.hpp"
#include "eced/nn.hpp"
#include "eced/types.hpp"

namespace eced {

struct ClassifierArch {
  int num_classes = 2;
  int c0 = 16, c1 = 32, c2 = 32, c3 = 32;
  int feature_dim = 64;

  KeyValues to_kv() const {
    return {{"num_classes", std::to_string(num_classes)}, {"c0", std::to_string(c0)}, {"c1", std::to_string(c1)},
            {"c2", std::to_string(c2)}, {"c3", std::to_string(c3)}, {"feature_dim", std::to_string(feature_dim)}};
  }
  static ClassifierArch from_kv(const KeyValues& kv) {
    ClassifierArch a;
    a.num_classes = kv_int(kv, "num_classes");
    a.c0 = kv_int(kv, "c0");
    a.c1 = kv_int(kv, "c1");
    a.c2 = kv_int(kv, "c2");
    a.c3 = kv_int(kv, "c3");
    a.feature_dim = kv_int(kv, "feature_dim");
    return a;
  }
  static ClassifierArch miniature(int k = 2) { return {k, 4, 4, 4, 4, 8}; }
};

// Small CNN: four conv stages named features_0..features_3, global pooling,
// a penultimate ReLU feature layer, and a linear head.
template <typename T>
struct ClassifierModel {
  static inline const std::array<std::string, 4> kLayerNames = {"features_0", "features_1", "features_2",
                                                                "features_3"};

  ClassifierArch arch;
  nn::Conv2d<T> conv0, conv1, conv2, conv3;
  nn::Linear<T> fc1, fc2;

  ClassifierModel() = default;
  ClassifierModel(const ClassifierArch& a, Rng& rng)
      : arch(a),
        conv0(kImageChannels, a.c0, 3, rng),
        conv1(a.c0, a.c1, 3, rng),
        conv2(a.c1, a.c2, 3, rng),
        conv3(a.c2, a.c3, 3, rng),
        fc1(a.c3, a.feature_dim, rng, std::sqrt(2.0)),
        fc2(a.feature_dim, a.num_classes, rng) {}

  int num_classes() const { return arch.num_classes; }
  static std::string default_layer() { return kLayerNames.back(); }

  struct Outputs {
    Var<T> logits;
    Var<T> features;              // penultimate layer [N, feature_dim]
    std::array<Var<T>, 4> taps;   // post-activation conv stages
  };

  Outputs run(const Var<T>& x) const {
    if (x.shape().size() != 4 || x.dim(1) != kImageChannels)
      throw ShapeError("classifier expects [N,3,H,W], got " + shape_str(x.shape()));
    if (x.dim(2) % 8 || x.dim(3) % 8) throw ShapeError("classifier input must be a multiple of 8 pixels");
    Outputs o;
    o.taps[0] = ops::relu(conv0(x));
    o.taps[1] = ops::relu(conv1(ops::avgpool2x(o.taps[0])));
    o.taps[2] = ops::relu(conv2(ops::avgpool2x(o.taps[1])));
    o.taps[3] = ops::relu(conv3(ops::avgpool2x(o.taps[2])));
    o.features = ops::relu(fc1(ops::global_avg_pool(o.taps[3])));
    o.logits = fc2(o.features);
    return o;
  }

  Var<T> logits(const Var<T>& x) const { return run(x).logits; }

  // Softmax probabilities for a batch [N, 3, H, W]; rows sum to 1.
  std::vector<std::vector<double>> probabilities(const Tensor<T>& batch) const {
    NoGradGuard ng;
    Var<T> p = ops::softmax_last(logits(Var<T>(batch)));
    const int N = p.dim(0), K = p.dim(1);
    std::vector<std::vector<double>> out(static_cast<std::size_t>(N), std::vector<double>(K));
    for (int n = 0; n < N; ++n)
      for (int k = 0; k < K; ++k) out[n][k] = p.value()[n * K + k];
    return out;
  }

  std::vector<double> classify(const ImageTensor<T>& image) const { return probabilities(image.batch())[0]; }

  int predict(const ImageTensor<T>& image) const {
    auto p = classify(image);
    return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
  }

  static int layer_index(const std::string& layer) {
    for (std::size_t i = 0; i < kLayerNames.size(); ++i)
      if (kLayerNames[i] == layer) return static_cast<int>(i);
    std::string names;
    for (const auto& n : kLayerNames) names += (names.empty() ? "" : ", ") + n;
    throw LookupError("unknown classifier layer '" + layer + "'; available: " + names);
  }

  // Activation stack [K_l, h, w] at a named layer; pure.
  Tensor<T> activations(const ImageTensor<T>& image, const std::string& layer) const {
    const int idx = layer_index(layer);
    NoGradGuard ng;
    Tensor<T> a = run(Var<T>(image.batch())).taps[static_cast<std::size_t>(idx)].value();
    return a.reshaped({a.dim(1), a.dim(2), a.dim(3)});
  }

  // Penultimate features for a batch, [N, feature_dim].
  Tensor<T> features(const Tensor<T>& batch) const {
    NoGradGuard ng;
    return run(Var<T>(batch)).features.value();
  }

  template <typename F>
  void visit(const std::string& p, F&& f) {
    conv0.visit(p + "cls.features_0", f);
    conv1.visit(p + "cls.features_1", f);
    conv2.visit(p + "cls.features_2", f);
    conv3.visit(p + "cls.features_3", f);
    fc1.visit(p + "cls.fc1", f);
    fc2.visit(p + "cls.fc2", f);
  }
};

}  // namespace eced

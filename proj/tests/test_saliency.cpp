// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "eced/models/classifier.hpp"
#include "eced/saliency.hpp"
#include "test_util.hpp"

using namespace eced;

namespace {

// Fixed activation stack; channel k scores `scores[k]` for every class.
struct StubClassifier {
  Tensor<double> acts;  // [K, h, w]
  std::vector<double> scores;

  Tensor<double> activations(const ImageTensor<double>&, const std::string&) const { return acts; }
  std::vector<std::vector<double>> probabilities(const Tensor<double>& batch) const {
    std::vector<std::vector<double>> out;
    for (int n = 0; n < batch.dim(0); ++n) out.push_back({scores[static_cast<std::size_t>(n)], scores[static_cast<std::size_t>(n)]});
    return out;
  }
};

// Independent bilinear (half-pixel) upsampling by direct formula.
double bilinear_at(const std::vector<double>& src, int h, int w, int H, int W, int y, int x) {
  auto coord = [](int o, int in, int out) {
    double s = (o + 0.5) * in / out - 0.5;
    return std::min(std::max(s, 0.0), static_cast<double>(in - 1));
  };
  const double sy = coord(y, h, H), sx = coord(x, w, W);
  const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
  const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = sy - y0, fx = sx - x0;
  auto v = [&](int yy, int xx) { return src[static_cast<std::size_t>(yy * w + xx)]; };
  return (1 - fy) * ((1 - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((1 - fx) * v(y1, x0) + fx * v(y1, x1));
}

std::vector<double> normalized(std::vector<double> v) {
  const double lo = *std::min_element(v.begin(), v.end()), hi = *std::max_element(v.begin(), v.end());
  for (double& x : v) x = hi > lo ? (x - lo) / (hi - lo) : 0.0;
  return v;
}

// All six steps recomputed from scratch.
std::vector<double> score_cam_oracle(const Tensor<double>& acts, const std::vector<double>& scores, int H, int W) {
  const int K = acts.dim(0), h = acts.dim(1), w = acts.dim(2);
  std::vector<std::vector<double>> up(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    std::vector<double> plane(acts.data() + k * h * w, acts.data() + (k + 1) * h * w);
    std::vector<double> u(static_cast<std::size_t>(H * W));
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) u[static_cast<std::size_t>(y * W + x)] = bilinear_at(plane, h, w, H, W, y, x);
    up[static_cast<std::size_t>(k)] = normalized(u);
  }
  double z = 0;
  for (double s : scores) z += std::exp(s);
  std::vector<double> out(static_cast<std::size_t>(H * W), 0.0);
  for (int k = 0; k < K; ++k)
    for (std::size_t p = 0; p < out.size(); ++p) out[p] += std::exp(scores[static_cast<std::size_t>(k)]) / z * up[static_cast<std::size_t>(k)][p];
  for (double& v : out) v = std::max(v, 0.0);
  return normalized(out);
}

Tensor<double> two_channel_acts() {
  Tensor<double> a({2, 2, 2});
  const double vals[8] = {1, 0, 0, 0, 0, 0, 2, 3};
  for (int i = 0; i < 8; ++i) a[static_cast<std::size_t>(i)] = vals[i];
  return a;
}

}  // namespace

TEST(ScoreCam, SoftmaxWeightsForDeskCase) {
  // softmax(0.2, 0.8)
  const double w0 = std::exp(0.2) / (std::exp(0.2) + std::exp(0.8));
  EXPECT_NEAR(w0, 0.3543, 5e-5);
  EXPECT_NEAR(1 - w0, 0.6457, 5e-5);
}

TEST(ScoreCam, MatchesSixStepOracle) {
  StubClassifier stub{two_channel_acts(), {0.2, 0.8}};
  const ImageTensor<double> img(4, 4, 0.5);
  const auto u = score_cam(img, 0, stub, "any");
  const auto ref = score_cam_oracle(stub.acts, stub.scores, 4, 4);
  ASSERT_EQ(u.data.size(), ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(u.data[i], ref[i], 1e-12);
}

TEST(ScoreCam, SingleChannelReturnsItsNormalizedMap) {
  Tensor<double> a({1, 2, 2});
  a[0] = 0.0, a[1] = 1.0, a[2] = 3.0, a[3] = 2.0;
  StubClassifier stub{a, {0.37}};
  const auto u = score_cam(ImageTensor<double>(8, 8, 0.5), 1, stub, "x");
  std::vector<double> plane(a.data(), a.data() + 4);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      std::vector<double> up(64);
      for (int yy = 0; yy < 8; ++yy)
        for (int xx = 0; xx < 8; ++xx) up[static_cast<std::size_t>(yy * 8 + xx)] = bilinear_at(plane, 2, 2, 8, 8, yy, xx);
      EXPECT_NEAR(u.at(y, x), normalized(up)[static_cast<std::size_t>(y * 8 + x)], 1e-12);
    }
}

TEST(ScoreCam, EqualScoresAverageChannels) {
  StubClassifier stub{two_channel_acts(), {0.4, 0.4}};
  const auto u = score_cam(ImageTensor<double>(4, 4, 0.5), 0, stub, "x");
  const auto ref = score_cam_oracle(stub.acts, {0.0, 0.0}, 4, 4);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(u.data[i], ref[i], 1e-12);
}

TEST(ScoreCam, InvariantToPositiveChannelRescaling) {
  auto a = two_channel_acts();
  StubClassifier stub{a, {0.2, 0.8}};
  const auto u = score_cam(ImageTensor<double>(4, 4, 0.5), 0, stub, "x");
  for (int i = 0; i < 4; ++i) a[static_cast<std::size_t>(i)] *= 7.5;
  for (int i = 4; i < 8; ++i) a[static_cast<std::size_t>(i)] *= 0.01;
  StubClassifier scaled{a, {0.2, 0.8}};
  const auto v = score_cam(ImageTensor<double>(4, 4, 0.5), 0, scaled, "x");
  for (std::size_t i = 0; i < u.data.size(); ++i) EXPECT_NEAR(u.data[i], v.data[i], 1e-12);
}

TEST(ScoreCam, RealClassifierProducesUnitRangeMap) {
  Rng rng(1);
  ClassifierModel<double> cls(ClassifierArch::miniature(), rng);
  Rng ir(2);
  const auto img = eced::testing::random_image<double>(16, 16, ir);
  const auto u = score_cam(img, 1, cls, "features_3");
  EXPECT_EQ(u.height, 16);
  for (double v : u.data) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_THROW(score_cam(img, 5, cls, "features_3"), DomainError);
}

TEST(Threshold, Examples) {
  AttentionMap ones{2, 2, {1, 1, 1, 1}};
  EXPECT_EQ(threshold_mask(ones, 0.5).foreground_count(), 4u);
  AttentionMap zeros{2, 2, {0, 0, 0, 0}};
  EXPECT_EQ(threshold_mask(zeros, 0.0).foreground_count(), 0u);
  AttentionMap u{2, 2, {0.3, 0.6, 0.5, 0.9}};
  const auto m = threshold_mask(u, 0.5);
  EXPECT_EQ(m.data, (std::vector<std::uint8_t>{0, 1, 0, 1}));
  EXPECT_THROW(threshold_mask(u, 1.0), DomainError);
  EXPECT_THROW(threshold_mask(u, -0.1), DomainError);
}

TEST(Threshold, NestedForIncreasingThresholds) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    AttentionMap u{8, 8, std::vector<double>(64)};
    for (double& v : u.data) v = rng.uniform();
    const double a = rng.uniform(0, 0.99), b = rng.uniform(a, 0.99);
    const auto ma = threshold_mask(u, a), mb = threshold_mask(u, b);
    for (std::size_t i = 0; i < 64; ++i) EXPECT_LE(mb.data[i], ma.data[i]);
  }
}

TEST(Downsample, Examples) {
  EXPECT_EQ(downsample_mask(BinaryMask(16, 16, 1), 8).foreground_count(), 4u);
  EXPECT_EQ(downsample_mask(BinaryMask(16, 16, 0), 8).foreground_count(), 0u);
  BinaryMask m(16, 16);
  m.at(3, 5) = 1;
  const auto d = downsample_mask(m, 8);
  EXPECT_EQ(d.foreground_count(), 1u);
  EXPECT_EQ(d.at(0, 0), 1);
  EXPECT_THROW(downsample_mask(BinaryMask(12, 16), 8), ShapeError);
}

TEST(Downsample, Monotone) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    BinaryMask a(16, 16), b(16, 16);
    for (std::size_t i = 0; i < a.data.size(); ++i) {
      a.data[i] = rng.uniform() < 0.05;
      b.data[i] = a.data[i] || rng.uniform() < 0.05;
    }
    const auto da = downsample_mask(a, 8), db = downsample_mask(b, 8);
    for (std::size_t i = 0; i < da.data.size(); ++i) EXPECT_LE(da.data[i], db.data[i]);
  }
}

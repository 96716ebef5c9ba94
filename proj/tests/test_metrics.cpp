// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "eced/metrics.hpp"
#include "test_util.hpp"

using namespace eced;

namespace {

std::vector<FeatureVector> gaussian(int n, int d, double shift, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<FeatureVector> out(static_cast<std::size_t>(n), FeatureVector(static_cast<std::size_t>(d)));
  for (auto& v : out)
    for (auto& x : v) x = rng.normal() + shift;
  return out;
}

// Probability of class 1 grows with the mean intensity of the red channel.
std::vector<std::vector<double>> mean_red_probs(const Tensor<double>& batch) {
  const int N = batch.dim(0), HW = batch.dim(2) * batch.dim(3);
  std::vector<std::vector<double>> out;
  for (int n = 0; n < N; ++n) {
    double s = 0;
    for (int i = 0; i < HW; ++i) s += batch[static_cast<std::size_t>(n) * 3 * HW + i];
    const double p = 1 / (1 + std::exp(-8 * (s / HW - 0.5)));
    out.push_back({1 - p, p});
  }
  return out;
}

// Brute-force COUT: rebuild every insertion image from scratch and sum trapezoids.
double cout_oracle(const ImageTensor<double>& xf, const ImageTensor<double>& xcf, int yf, int ycf, double gf) {
  const int H = xf.height(), W = xf.width(), HW = H * W;
  std::vector<double> sal(static_cast<std::size_t>(HW));
  for (int p = 0; p < HW; ++p)
    for (int c = 0; c < 3; ++c)
      sal[static_cast<std::size_t>(p)] += std::abs(xf.tensor()[static_cast<std::size_t>(c * HW + p)] - xcf.tensor()[static_cast<std::size_t>(c * HW + p)]);
  // Rank: larger saliency first, then lower index.
  std::vector<int> rank(static_cast<std::size_t>(HW));
  for (int p = 0; p < HW; ++p) {
    int r = 0;
    for (int q = 0; q < HW; ++q)
      r += sal[static_cast<std::size_t>(q)] > sal[static_cast<std::size_t>(p)] ||
           (sal[static_cast<std::size_t>(q)] == sal[static_cast<std::size_t>(p)] && q < p);
    rank[static_cast<std::size_t>(p)] = r;
  }
  const int group = static_cast<int>(std::ceil(gf * HW - 1e-9));
  const int T = (HW + group - 1) / group;
  double acf = 0, af = 0, prev_cf = 0, prev_f = 0;
  for (int t = 0; t <= T; ++t) {
    Tensor<double> img({1, 3, H, W});
    for (int p = 0; p < HW; ++p)
      for (int c = 0; c < 3; ++c)
        img[static_cast<std::size_t>(c * HW + p)] =
            rank[static_cast<std::size_t>(p)] < t * group ? xcf.tensor()[static_cast<std::size_t>(c * HW + p)]
                                                          : xf.tensor()[static_cast<std::size_t>(c * HW + p)];
    const auto pr = mean_red_probs(img)[0];
    if (t > 0) {
      acf += 0.5 * (prev_cf + pr[static_cast<std::size_t>(ycf)]);
      af += 0.5 * (prev_f + pr[static_cast<std::size_t>(yf)]);
    }
    prev_cf = pr[static_cast<std::size_t>(ycf)];
    prev_f = pr[static_cast<std::size_t>(yf)];
  }
  return acf / T - af / T;
}

}  // namespace

TEST(LpDistance, Examples) {
  Rng rng(1);
  const auto a = eced::testing::random_image<double>(4, 4, rng);
  EXPECT_EQ(lp_distance<double>({{a, a}, {a, a}}, 1.5), 0.0);
  ImageTensor<double> x(4, 4, 0.0), y(4, 4, 0.0), z(4, 4, 0.2);
  y.at(1, 1, 2) = 1.0;
  EXPECT_NEAR(lp_distance<double>({{x, y}}, 1.0), 1.0, 1e-15);
  ImageTensor<double> w = z;
  w.at(0, 0, 0) = 0.5;
  w.at(3, 2, 1) = 0.5;
  EXPECT_NEAR(lp_distance<double>({{z, w}}, 2.0), std::sqrt(0.18), 1e-12);
  EXPECT_THROW(lp_distance<double>({}, 1.0), DomainError);
}

TEST(LpDistance, TriangleInequality) {
  Rng rng(2);
  for (int i = 0; i < 30; ++i) {
    const auto a = eced::testing::random_image<double>(4, 4, rng);
    const auto b = eced::testing::random_image<double>(4, 4, rng);
    const auto c = eced::testing::random_image<double>(4, 4, rng);
    for (double p : {1.0, 1.5, 2.0})
      EXPECT_LE(lp_norm_diff(a, c, p), lp_norm_diff(a, b, p) + lp_norm_diff(b, c, p) + 1e-12);
  }
}

TEST(S3, Examples) {
  EXPECT_NEAR(s3_similarity({{{1, 2, 3}, {1, 2, 3}}}).mean, 1.0, 1e-15);
  EXPECT_NEAR(s3_similarity({{{1, 0}, {0, 1}}}).mean, 0.0, 1e-15);
  EXPECT_NEAR(s3_similarity({{{1, 1}, {1, 0}}}).mean, 1 / std::sqrt(2.0), 1e-15);
  const auto r = s3_similarity({{{0, 0}, {1, 0}}, {{1, 0}, {1, 0}}});
  EXPECT_EQ(r.degenerate, 1);
  EXPECT_EQ(r.counted, 1);
  Rng rng(3);
  const auto a = eced::testing::random_image<double>(4, 4, rng);
  FeatureExtractor ex{"stub", [](const ImageTensor<double>& x) { return FeatureVector{x.at(0, 0, 0), x.at(1, 1, 1)}; }};
  EXPECT_NEAR(s3_similarity<double>({{a, a}}, ex).mean, 1.0, 1e-15);
}

TEST(Fid, IdenticalSetsGiveZero) {
  const auto a = gaussian(500, 6, 0.0, 4);
  EXPECT_LE(fid(a, a).value, 1e-6);
}

TEST(Fid, Symmetric) {
  const auto a = gaussian(300, 5, 0.0, 5), b = gaussian(300, 5, 0.4, 6);
  EXPECT_NEAR(fid(a, b).value, fid(b, a).value, 1e-8);
}

TEST(Fid, ScalarClosedForm) {
  Eigen::VectorXd m1(1), m2(1);
  m1 << 0.0;
  m2 << 1.0;
  Eigen::MatrixXd s1(1, 1), s2(1, 1);
  s1 << 1.0;
  s2 << 4.0;
  EXPECT_NEAR(fid_from_stats(m1, s1, m2, s2).value, 2.0, 1e-9);
}

TEST(Fid, MeanShiftMatchesSquaredNorm) {
  const int D = 4;
  const double shift = 1.0;  // ||mu||^2 = D
  const auto a = gaussian(20000, D, 0.0, 7), b = gaussian(20000, D, shift, 8);
  EXPECT_NEAR(fid(a, b).value, D * shift * shift, 0.05 * D * shift * shift);
}

TEST(Fid, SmallSetsAreRegularized) {
  const auto a = gaussian(3, 5, 0.0, 9), b = gaussian(3, 5, 0.0, 10);
  const auto r = fid(a, b);
  EXPECT_TRUE(r.regularized);
  EXPECT_TRUE(std::isfinite(r.value));
  EXPECT_THROW(fid({}, b), DomainError);
}

TEST(Sfid, ReproducibleAndConsistent) {
  const auto a = gaussian(2000, 4, 0.0, 11), b = gaussian(2000, 4, 0.0, 12);
  const auto r1 = sfid(a, b, 3), r2 = sfid(a, b, 3);
  EXPECT_EQ(r1.value, r2.value);
  EXPECT_NE(sfid(a, b, 4).value, r1.value);
  EXPECT_LT(sfid(a, a, 3).value, 0.5);
  const auto c = gaussian(2000, 4, 1.0, 13);
  EXPECT_NEAR(sfid(a, c, 3).value, 4.0, 0.4);
  EXPECT_THROW(sfid(gaussian(3, 2, 0, 1), a, 1), DomainError);
}

TEST(Cout, ExtremeAndSymmetricCurves) {
  const ImageTensor<double> xf(4, 4, 0.2), xcf(4, 4, 0.8);
  const auto sure = cout_score(xf, xcf, 0, 1, [](const Tensor<double>& b) {
    return std::vector<std::vector<double>>(static_cast<std::size_t>(b.dim(0)), {0.0, 1.0});
  });
  EXPECT_EQ(sure.cout, 1.0);
  const auto flat = cout_score(xf, xcf, 0, 1, [](const Tensor<double>& b) {
    return std::vector<std::vector<double>>(static_cast<std::size_t>(b.dim(0)), {0.5, 0.5});
  });
  EXPECT_EQ(flat.cout, 0.0);
}

TEST(Cout, HandTrapezoid) {
  // Two steps: half the pixels per group.
  const ImageTensor<double> xf(1, 2, 0.2), xcf(1, 2, 0.8);
  int call = 0;
  const auto r = cout_score(xf, xcf, 0, 1, [&](const Tensor<double>& b) {
    ++call;
    EXPECT_EQ(b.dim(0), 3);
    return std::vector<std::vector<double>>{{1.0, 0.0}, {0.5, 0.5}, {0.0, 1.0}};
  }, 0.5);
  EXPECT_EQ(call, 1);
  EXPECT_EQ(r.steps, 2);
  EXPECT_NEAR(r.aupc_cf, 0.5, 1e-15);
  EXPECT_NEAR(r.aupc_f, 0.5, 1e-15);
  EXPECT_NEAR(r.cout, 0.0, 1e-15);
}

TEST(Cout, MatchesBruteForceOracle) {
  Rng rng(14);
  for (int trial = 0; trial < 10; ++trial) {
    const auto xf = eced::testing::random_image<double>(8, 8, rng);
    auto xcf = eced::testing::random_image<double>(8, 8, rng);
    if (trial == 0) xcf.at(2, 2, 0) = xf.at(2, 2, 0);  // ties in saliency are fine
    for (double gf : {0.01, 0.05, 0.3, 1.0}) {
      const auto r = cout_score(xf, xcf, 0, 1, mean_red_probs, gf);
      EXPECT_NEAR(r.cout, cout_oracle(xf, xcf, 0, 1, gf), 1e-12);
      EXPECT_GE(r.cout, -1.0);
      EXPECT_LE(r.cout, 1.0);
      EXPECT_EQ(r.curve_cf.size(), static_cast<std::size_t>(r.steps + 1));
    }
  }
}

TEST(Cout, IdenticalImagesDegenerate) {
  const ImageTensor<double> x(4, 4, 0.3);
  const auto r = cout_score(x, x, 0, 1, mean_red_probs);
  EXPECT_TRUE(r.degenerate);
  EXPECT_NEAR(r.cout, mean_red_probs(x.batch())[0][1] - mean_red_probs(x.batch())[0][0], 1e-12);
}

TEST(FlipRatio, Counts) {
  const std::vector<std::vector<double>> p{{0.1, 0.9}, {0.2, 0.8}, {0.6, 0.4}, {0.3, 0.7}};
  EXPECT_EQ(flip_ratio(p, {1, 1, 1, 1}), 0.75);
  EXPECT_EQ(flip_ratio(p, {1, 1, 0, 1}), 1.0);
  EXPECT_EQ(flip_ratio(p, {0, 0, 1, 0}), 0.0);
  EXPECT_THROW(flip_ratio({}, {}), DomainError);
  // flip_ratio * N is an integer.
  Rng rng(15);
  for (int n = 1; n < 20; ++n) {
    std::vector<std::vector<double>> q;
    std::vector<int> t;
    for (int i = 0; i < n; ++i) {
      const double a = rng.uniform();
      q.push_back({a, 1 - a});
      t.push_back(rng.uniform_int(0, 1));
    }
    const double fr = flip_ratio(q, t) * n;
    EXPECT_EQ(fr, std::round(fr));
  }
}

TEST(Mnac, Examples) {
  using P = std::pair<AttributeScores, AttributeScores>;
  EXPECT_EQ(mnac({P{{0.3, 0.7}, {0.3, 0.7}}}), 0.0);
  EXPECT_EQ(mnac({P{{0.2, 0.9}, {0.8, 0.9}}, P{{0.6, 0.1}, {0.4, 0.1}}}), 1.0);
  const std::vector<P> hand{P{{0.1, 0.9, 0.6}, {0.9, 0.2, 0.7}}, P{{0.4, 0.3, 0.8}, {0.45, 0.3, 0.1}}};
  EXPECT_EQ(mnac(hand), 1.5);
  // Rescaling that keeps the >beta indicator leaves the count unchanged.
  std::vector<P> squashed = hand;
  for (auto& [f, cf] : squashed)
    for (auto* v : {&f, &cf})
      for (double& s : *v) s = s > 0.5 ? 0.5 + (s - 0.5) * 0.1 : s * 0.3;
  EXPECT_EQ(mnac(squashed), 1.5);
  EXPECT_THROW(mnac(hand, 1.0), DomainError);
}

TEST(Cd, Examples) {
  using P = std::pair<AttributeScores, AttributeScores>;
  EXPECT_EQ(correlation_difference({P{{0.3, 0.5}, {0.3, 0.5}}}, 0), 0.0);
  EXPECT_NEAR(correlation_difference({P{{0.3}, {0.5}}}, 0), 0.2, 1e-15);
  const std::vector<P> two{P{{0.1, 0.4}, {0.3, 0.1}}, P{{0.9, 0.2}, {0.5, 0.25}}};
  EXPECT_NEAR(correlation_difference(two, 1), ((0.2 + 0.3) + (0.4 + 0.05)) / 2, 1e-15);
  const CorrelatedScore weighted = [](const AttributeScores& s, int q, int a) { return (a == q ? 2.0 : 1.0) * s[static_cast<std::size_t>(a)]; };
  EXPECT_NEAR(correlation_difference(two, 1, weighted), ((0.2 + 0.6) + (0.4 + 0.1)) / 2, 1e-15);
  EXPECT_THROW(correlation_difference(two, 2), DomainError);
}

TEST(BackgroundLoss, Examples) {
  ImageTensor<double> a(10, 10, 0.4), b(10, 10, 0.4);
  EXPECT_EQ(background_mse<double>({{a, a}}, {BinaryMask(10, 10)}).mean, 0.0);
  b.at(3, 7, 1) = 0.5;
  const auto r = background_mse<double>({{a, b}}, {BinaryMask(10, 10)});
  EXPECT_NEAR(r.mean, 0.01 / 300, 1e-15);
  const auto d = background_mse<double>({{a, b}, {a, a}}, {BinaryMask(10, 10, 1), BinaryMask(10, 10)});
  EXPECT_EQ(d.degenerate, 1);
  EXPECT_EQ(d.n, 1);
}

TEST(BackgroundLoss, ConfidenceInterval) {
  const auto r = mean_ci95({1.0, 2.0, 3.0, 4.0});
  EXPECT_NEAR(r.mean, 2.5, 1e-15);
  EXPECT_NEAR(r.ci95, 1.96 * std::sqrt(5.0 / 3.0) / 2.0, 1e-12);
}

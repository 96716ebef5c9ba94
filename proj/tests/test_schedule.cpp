// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "eced/schedule.hpp"

using namespace eced;

TEST(Schedule, LinearBetaEndpoints) {
  const auto s = build_schedule(1000, 0.00085, 0.012, 50);
  EXPECT_DOUBLE_EQ(s.betas.front(), 0.00085);
  EXPECT_DOUBLE_EQ(s.betas.back(), 0.012);
  EXPECT_EQ(s.num_sampler_steps(), 50);
  EXPECT_EQ(s.sampler_steps.front(), 0);
  EXPECT_EQ(s.sampler_steps.back(), 999);
}

TEST(Schedule, DegenerateRangeRejected) {
  EXPECT_THROW(build_schedule(1, 0.5, 0.5, 1), ConfigError);
  EXPECT_THROW(build_schedule(10, 0.5, 0.5, 5), ConfigError);
  EXPECT_THROW(build_schedule(10, 0.2, 0.1, 5), ConfigError);
  EXPECT_THROW(build_schedule(10, 0.1, 0.2, 11), ConfigError);
  EXPECT_THROW(build_schedule(10, 0.1, 0.2, 0), ConfigError);
}

TEST(Schedule, ThreeStepCumulativeProduct) {
  const auto s = build_schedule(3, 0.1, 0.3, 3);
  // Independent recomputation of the products 0.9, 0.9*0.8, 0.9*0.8*0.7.
  const double expect[3] = {0.9, 0.9 * 0.8, 0.9 * 0.8 * 0.7};
  for (int t = 0; t < 3; ++t) EXPECT_NEAR(s.alpha_bar(t), expect[t], 1e-15);
  EXPECT_NEAR(s.alpha_bar(2), 0.504, 1e-12);
  EXPECT_EQ(s.alpha_bar(-1), 1.0);
  EXPECT_THROW(s.alpha_bar(3), DomainError);
}

TEST(Schedule, AlphaBarsStrictlyDecreasingInUnitInterval) {
  for (int T1 : {2, 10, 1000}) {
    const auto s = build_schedule(T1, 0.00085, 0.012, std::min(T1, 50));
    for (int t = 0; t < T1; ++t) {
      EXPECT_GT(s.alpha_bar(t), 0.0);
      EXPECT_LE(s.alpha_bar(t), 1.0);
      if (t > 0) EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
    }
  }
}

TEST(Schedule, Deterministic) {
  const auto a = build_schedule(1000, 0.00085, 0.012, 50);
  const auto b = build_schedule(1000, 0.00085, 0.012, 50);
  EXPECT_EQ(a.alpha_bars, b.alpha_bars);
  EXPECT_EQ(a.betas, b.betas);
  EXPECT_EQ(a.sampler_steps, b.sampler_steps);
}

TEST(Sigma, CleanEndIsZero) {
  const auto s = build_schedule(1000, 0.00085, 0.012, 50);
  EXPECT_EQ(ddim_sigma(s, 0, -1), 0.0);
  EXPECT_EQ(ddim_sigma(s, 999, -1), 0.0);
}

TEST(Sigma, HandValue) {
  const auto s = NoiseSchedule::from_alpha_bars({0.9, 0.5});
  EXPECT_NEAR(ddim_sigma(s, 1, 0), std::sqrt(0.1 / 0.5) * std::sqrt(1 - 0.5 / 0.9), 1e-15);
  EXPECT_NEAR(ddim_sigma(s, 1, 0), 0.2981, 1e-4);
}

TEST(Sigma, EqualAlphaBarsGiveZero) {
  const auto s = NoiseSchedule::from_alpha_bars({0.7, 0.7});
  EXPECT_EQ(ddim_sigma(s, 1, 0), 0.0);
}

TEST(Sigma, OrderingEnforced) {
  const auto s = build_schedule(10, 0.1, 0.2, 5);
  EXPECT_THROW(ddim_sigma(s, 3, 3), OrderingError);
  EXPECT_THROW(ddim_sigma(s, 2, 5), OrderingError);
  EXPECT_THROW(ddim_sigma(s, 2, -2), OrderingError);
}

TEST(DirectionCoefficient, HandValues) {
  const auto s = NoiseSchedule::from_alpha_bars({0.9, 0.5, 0.3});
  EXPECT_EQ(direction_coefficient(s, -1, 0.0), 0.0);
  EXPECT_NEAR(direction_coefficient(s, 0, 0.0), std::sqrt(0.1), 1e-15);
  const double sig = ddim_sigma(s, 2, 1);
  const double d = direction_coefficient(s, 1, sig);
  EXPECT_GE(d, 0.0);
  EXPECT_LE(d, std::sqrt(0.5));
  EXPECT_NEAR(d, std::sqrt(1 - 0.5 - sig * sig), 1e-15);
}

TEST(DirectionCoefficient, NegativeRadicandRejected) {
  const auto s = NoiseSchedule::from_alpha_bars({0.9, 0.5});
  EXPECT_THROW(direction_coefficient(s, 0, 0.5), NumericalError);
}

TEST(DirectionCoefficient, VarianceBudgetSumsToOne) {
  const auto s = build_schedule(1000, 0.00085, 0.012, 50);
  for (int i = 0; i < s.num_sampler_steps(); ++i) {
    const int t = s.sampler_step(i), tp = s.sampler_step(i - 1);
    for (double eta : {0.0, 0.5, 1.0}) {
      const double sig = eta * ddim_sigma(s, t, tp);
      const double d = direction_coefficient(s, tp, sig);
      EXPECT_NEAR(s.alpha_bar(tp) + d * d + sig * sig, 1.0, 1e-12);
    }
  }
}

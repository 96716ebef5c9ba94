// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "eced/errors.hpp"

namespace eced {

// Linear beta schedule with cumulative products and an S-step sampler subsequence.
// alpha_bar(t) is 1 for t < 0.
struct NoiseSchedule {
  int T1 = 0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;
  std::vector<int> sampler_steps;

  double alpha_bar(int t) const {
    if (t < 0) return 1.0;
    if (t >= T1) throw DomainError("timestep " + std::to_string(t) + " beyond schedule length " + std::to_string(T1));
    return alpha_bars[static_cast<std::size_t>(t)];
  }
  int num_sampler_steps() const { return static_cast<int>(sampler_steps.size()); }

  // Sampler timestep for index i; index -1 maps to the clean end (t = -1).
  int sampler_step(int i) const { return i < 0 ? -1 : sampler_steps.at(static_cast<std::size_t>(i)); }

  // Builds a schedule directly from cumulative products; used by stubs and tests.
  static NoiseSchedule from_alpha_bars(std::vector<double> abars) {
    NoiseSchedule s;
    s.T1 = static_cast<int>(abars.size());
    s.alpha_bars = std::move(abars);
    double prev = 1.0;
    for (double ab : s.alpha_bars) {
      if (!(ab > 0.0 && ab <= 1.0)) throw ConfigError("alpha_bar outside (0,1]");
      s.alphas.push_back(ab / prev);
      s.betas.push_back(1.0 - ab / prev);
      prev = ab;
    }
    for (int t = 0; t < s.T1; ++t) s.sampler_steps.push_back(t);
    return s;
  }
};

inline std::vector<int> even_sampler_steps(int T1, int S) {
  std::vector<int> steps;
  if (S == 1) return {T1 - 1};
  for (int i = 0; i < S; ++i)
    steps.push_back(static_cast<int>(std::lround(static_cast<double>(i) * (T1 - 1) / (S - 1))));
  return steps;
}

inline NoiseSchedule build_schedule(int T1, double beta_start, double beta_end, int S) {
  if (T1 < 2) throw ConfigError("schedule needs at least 2 steps, got " + std::to_string(T1));
  if (!(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0))
    throw ConfigError("betas must satisfy 0 < beta_start < beta_end < 1");
  if (S <= 0 || S > T1) throw ConfigError("sampler steps must satisfy 0 < S <= T1");
  NoiseSchedule s;
  s.T1 = T1;
  s.betas.resize(static_cast<std::size_t>(T1));
  double ab = 1.0;
  for (int t = 0; t < T1; ++t) {
    const double beta = beta_start + (beta_end - beta_start) * static_cast<double>(t) / (T1 - 1);
    s.betas[static_cast<std::size_t>(t)] = beta;
    s.alphas.push_back(1.0 - beta);
    ab *= 1.0 - beta;
    s.alpha_bars.push_back(ab);
  }
  s.sampler_steps = even_sampler_steps(T1, S);
  return s;
}

// DDPM-variance sigma for a sampler move t -> t_prev.
inline double ddim_sigma(const NoiseSchedule& s, int t, int t_prev) {
  if (!(t > t_prev && t_prev >= -1))
    throw OrderingError("ddim_sigma requires t > t_prev >= -1 (got t=" + std::to_string(t) +
                        ", t_prev=" + std::to_string(t_prev) + ")");
  const double ab_t = s.alpha_bar(t);
  const double ab_prev = s.alpha_bar(t_prev);
  if (ab_prev == 1.0 || ab_t == ab_prev) return 0.0;
  const double v = (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev);
  return std::sqrt(std::max(v, 0.0));
}

// Noise-direction coefficient sqrt(1 - alpha_bar_prev - sigma^2), clamped at 0 within tolerance.
inline double direction_coefficient(const NoiseSchedule& s, int t_prev, double sigma, double tol = 1e-10) {
  const double r = 1.0 - s.alpha_bar(t_prev) - sigma * sigma;
  if (r < -tol) throw NumericalError("direction coefficient radicand " + std::to_string(r) + " is negative");
  return std::sqrt(std::max(r, 0.0));
}

}  // namespace eced

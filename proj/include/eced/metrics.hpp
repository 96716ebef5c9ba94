// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "eced/preservation.hpp"
#include "eced/rng.hpp"
#include "eced/saliency.hpp"
#include "eced/types.hpp"

namespace eced {

template <typename T>
using ImagePair = std::pair<ImageTensor<T>, ImageTensor<T>>;  // (factual, counterfactual)

// ---------------------------------------------------------------- distances

template <typename T>
double lp_norm_diff(const ImageTensor<T>& a, const ImageTensor<T>& b, double p) {
  a.tensor().require_same_shape(b.tensor(), "lp_distance");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    s += std::pow(std::abs(static_cast<double>(a.tensor()[i]) - b.tensor()[i]), p);
  return std::pow(s, 1.0 / p);
}

// Mean over pairs of the per-image L_p norm of the difference.
template <typename T>
double lp_distance(const std::vector<ImagePair<T>>& pairs, double p) {
  if (!(p > 0.0)) throw DomainError("lp_distance: p must be positive");
  if (pairs.empty()) throw DomainError("lp_distance: no pairs");
  double s = 0;
  for (const auto& [f, cf] : pairs) s += lp_norm_diff(f, cf, p);
  return s / static_cast<double>(pairs.size());
}

// ---------------------------------------------------------------- feature-space metrics

using FeatureVector = std::vector<double>;

struct FeatureExtractor {
  std::string name;
  std::function<FeatureVector(const ImageTensor<double>&)> embed;
};

struct SimilarityResult {
  double mean = 0.0;
  int counted = 0;
  int degenerate = 0;  // pairs with a zero-norm embedding, excluded
};

inline double cosine_similarity(const FeatureVector& a, const FeatureVector& b) {
  if (a.size() != b.size()) throw ShapeError("cosine_similarity: width mismatch");
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (!(aa > 0.0 && bb > 0.0)) return std::numeric_limits<double>::quiet_NaN();
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

// Mean cosine similarity between embeddings of each factual/counterfactual pair.
inline SimilarityResult s3_similarity(const std::vector<std::pair<FeatureVector, FeatureVector>>& embedded) {
  SimilarityResult r;
  double s = 0;
  for (const auto& [a, b] : embedded) {
    const double c = cosine_similarity(a, b);
    if (std::isnan(c)) {
      ++r.degenerate;
      continue;
    }
    s += c;
    ++r.counted;
  }
  r.mean = r.counted ? s / r.counted : 0.0;
  return r;
}

template <typename T>
SimilarityResult s3_similarity(const std::vector<ImagePair<T>>& pairs, const FeatureExtractor& extractor) {
  std::vector<std::pair<FeatureVector, FeatureVector>> e;
  for (const auto& [f, cf] : pairs)
    e.emplace_back(extractor.embed(ImageTensor<double>(f.tensor().template cast<double>())),
                   extractor.embed(ImageTensor<double>(cf.tensor().template cast<double>())));
  return s3_similarity(e);
}

struct FidResult {
  double value = 0.0;
  bool regularized = false;  // covariance ridge added because n < D + 1
  double trace_residual = 0.0;
};

namespace detail {

inline Eigen::MatrixXd to_matrix(const std::vector<FeatureVector>& f) {
  if (f.empty()) throw DomainError("fid: empty feature set");
  const auto D = static_cast<Eigen::Index>(f[0].size());
  Eigen::MatrixXd m(static_cast<Eigen::Index>(f.size()), D);
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (static_cast<Eigen::Index>(f[i].size()) != D) throw ShapeError("fid: ragged feature set");
    for (Eigen::Index j = 0; j < D; ++j) m(static_cast<Eigen::Index>(i), j) = f[i][static_cast<std::size_t>(j)];
  }
  return m;
}

inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& a) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (a + a.transpose()));
  if (es.info() != Eigen::Success) throw NumericalError("fid: eigendecomposition failed");
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

// Frechet distance between Gaussians with the given moments:
//   ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)).
// Tr (S1 S2)^(1/2) is evaluated as Tr (S1^(1/2) S2 S1^(1/2))^(1/2), a symmetric PSD form.
inline FidResult fid_from_stats(const Eigen::VectorXd& mu1, const Eigen::MatrixXd& s1, const Eigen::VectorXd& mu2,
                                const Eigen::MatrixXd& s2) {
  if (mu1.size() != mu2.size() || s1.rows() != s2.rows()) throw ShapeError("fid: dimension mismatch");
  const Eigen::MatrixXd r1 = detail::psd_sqrt(s1);
  const Eigen::MatrixXd mid = r1 * s2 * r1;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (mid + mid.transpose()), Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw NumericalError("fid: eigendecomposition failed");
  double tr_sqrt = 0, neg = 0;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
    const double ev = es.eigenvalues()(i);
    if (ev < 0) neg = std::min(neg, ev);
    tr_sqrt += std::sqrt(std::max(ev, 0.0));
  }
  const double scale = std::max(1.0, mid.cwiseAbs().maxCoeff());
  if (neg < -1e-6 * scale)
    throw NumericalError("fid: covariance product has eigenvalue " + std::to_string(neg) + " beyond tolerance");
  FidResult r;
  r.trace_residual = neg;
  r.value = (mu1 - mu2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
  if (!std::isfinite(r.value)) throw NumericalError("fid: non-finite result");
  r.value = std::max(r.value, 0.0);
  return r;
}

inline std::pair<Eigen::VectorXd, Eigen::MatrixXd> feature_moments(const std::vector<FeatureVector>& f,
                                                                   bool* regularized = nullptr) {
  const Eigen::MatrixXd m = detail::to_matrix(f);
  const Eigen::VectorXd mu = m.colwise().mean();
  const Eigen::MatrixXd c = m.rowwise() - mu.transpose();
  const double denom = std::max<double>(1.0, static_cast<double>(m.rows()) - 1.0);
  Eigen::MatrixXd s = (c.transpose() * c) / denom;
  const bool reg = m.rows() < m.cols() + 1;
  if (reg) s += 1e-6 * Eigen::MatrixXd::Identity(s.rows(), s.cols());
  if (regularized) *regularized = reg;
  return {mu, s};
}

inline FidResult fid(const std::vector<FeatureVector>& a, const std::vector<FeatureVector>& b) {
  bool ra = false, rb = false;
  const auto [mu1, s1] = feature_moments(a, &ra);
  const auto [mu2, s2] = feature_moments(b, &rb);
  FidResult r = fid_from_stats(mu1, s1, mu2, s2);
  r.regularized = ra || rb;
  return r;
}

struct SfidResult {
  double value = 0.0;
  double first = 0.0, second = 0.0;  // the two cross-split FIDs
  bool regularized = false;
  std::uint64_t split_seed = 0;
};

// Splits both sets into halves with one seeded permutation each and averages
// FID(real_A, cf_B) and FID(real_B, cf_A).
inline SfidResult sfid(const std::vector<FeatureVector>& real, const std::vector<FeatureVector>& cf,
                       std::uint64_t split_seed) {
  if (real.size() < 4 || cf.size() < 4) throw DomainError("sfid: each set needs at least 4 samples");
  auto halves = [&](const std::vector<FeatureVector>& f, std::uint64_t stream) {
    std::vector<std::size_t> idx(f.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 eng(derive_seed(split_seed, stream));
    std::shuffle(idx.begin(), idx.end(), eng);
    std::pair<std::vector<FeatureVector>, std::vector<FeatureVector>> h;
    for (std::size_t i = 0; i < idx.size(); ++i) (i < idx.size() / 2 ? h.first : h.second).push_back(f[idx[i]]);
    return h;
  };
  const auto [ra, rb] = halves(real, 0);
  const auto [ca, cb] = halves(cf, 1);
  const FidResult f1 = fid(ra, cb), f2 = fid(rb, ca);
  SfidResult r;
  r.first = f1.value;
  r.second = f2.value;
  r.value = 0.5 * (f1.value + f2.value);
  r.regularized = f1.regularized || f2.regularized;
  r.split_seed = split_seed;
  return r;
}

// ---------------------------------------------------------------- COUT

// Batch probability function: images [N, 3, H, W] -> N probability rows.
using ProbabilityFn = std::function<std::vector<std::vector<double>>(const Tensor<double>&)>;

struct CoutResult {
  double cout = 0.0;
  double aupc_cf = 0.0, aupc_f = 0.0;
  std::vector<double> curve_cf, curve_f;  // T + 1 points, x_0 = factual ... x_T = counterfactual
  int steps = 0;
  bool degenerate = false;  // factual == counterfactual; insertion order fell back to row-major
};

// Pixel insertion order: descending channel-summed |x_F - x_CF| after min-max
// normalization; ties keep row-major order.
inline std::vector<std::size_t> insertion_order(const ImageTensor<double>& xf, const ImageTensor<double>& xcf,
                                                bool* degenerate = nullptr) {
  const int H = xf.height(), W = xf.width();
  std::vector<double> sal(static_cast<std::size_t>(H) * W, 0.0);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < kImageChannels; ++c)
        sal[static_cast<std::size_t>(y) * W + x] += std::abs(xf.at(y, x, c) - xcf.at(y, x, c));
  const bool flat = *std::max_element(sal.begin(), sal.end()) == *std::min_element(sal.begin(), sal.end());
  normalize_min_max(sal);
  if (degenerate) *degenerate = flat;
  std::vector<std::size_t> order(sal.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sal[a] > sal[b]; });
  return order;
}

// Trapezoid rule over T intervals of unit width 1/T.
inline double aupc(const std::vector<double>& curve) {
  if (curve.size() < 2) throw DomainError("aupc needs at least two points");
  const double T = static_cast<double>(curve.size() - 1);
  double s = 0;
  for (std::size_t t = 0; t + 1 < curve.size(); ++t) s += 0.5 * (curve[t] + curve[t + 1]);
  return s / T;
}

// COUT = AUPC(y_cf) - AUPC(y_f) while counterfactual pixels are inserted into the factual image.
inline CoutResult cout_score(const ImageTensor<double>& xf, const ImageTensor<double>& xcf, int y_f, int y_cf,
                             const ProbabilityFn& prob, double group_fraction = 0.01) {
  xf.tensor().require_same_shape(xcf.tensor(), "cout");
  if (!(group_fraction > 0.0 && group_fraction <= 1.0)) throw DomainError("cout: group_fraction must lie in (0, 1]");
  const int H = xf.height(), W = xf.width();
  const std::size_t HW = static_cast<std::size_t>(H) * W;
  const auto group = static_cast<std::size_t>(std::ceil(group_fraction * static_cast<double>(HW) - 1e-9));
  const std::size_t T = (HW + group - 1) / group;
  CoutResult r;
  const auto order = insertion_order(xf, xcf, &r.degenerate);
  // Materialize x_0 .. x_T and score them in one batch.
  Tensor<double> seq({static_cast<int>(T + 1), kImageChannels, H, W});
  Tensor<double> cur = xf.tensor();
  for (std::size_t t = 0; t <= T; ++t) {
    if (t > 0)
      for (std::size_t j = (t - 1) * group; j < std::min(HW, t * group); ++j)
        for (int c = 0; c < kImageChannels; ++c) cur[c * HW + order[j]] = xcf.tensor()[c * HW + order[j]];
    std::copy_n(cur.data(), cur.size(), seq.data() + t * cur.size());
  }
  const auto probs = prob(seq);
  if (probs.size() != T + 1) throw ShapeError("cout: probability function returned wrong batch size");
  for (const auto& row : probs) {
    r.curve_cf.push_back(row.at(static_cast<std::size_t>(y_cf)));
    r.curve_f.push_back(row.at(static_cast<std::size_t>(y_f)));
  }
  r.steps = static_cast<int>(T);
  r.aupc_cf = aupc(r.curve_cf);
  r.aupc_f = aupc(r.curve_f);
  r.cout = r.aupc_cf - r.aupc_f;
  return r;
}

// ---------------------------------------------------------------- validity

inline int argmax(const std::vector<double>& p) {
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

// Fraction of counterfactuals the classifier assigns to their target class.
inline double flip_ratio(const std::vector<std::vector<double>>& cf_probs, const std::vector<int>& targets) {
  if (cf_probs.empty()) throw DomainError("flip_ratio: no samples");
  if (cf_probs.size() != targets.size()) throw ShapeError("flip_ratio: size mismatch");
  int hits = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) hits += argmax(cf_probs[i]) == targets[i];
  return static_cast<double>(hits) / static_cast<double>(targets.size());
}

// ---------------------------------------------------------------- attribute metrics

struct AttributeOracle {
  std::vector<std::string> attributes;
  std::function<double(const ImageTensor<double>&, int)> score;  // in [0, 1]
};

using AttributeScores = std::vector<double>;  // one score per attribute

// Mean number of attributes whose >beta indicator changes between factual and counterfactual.
inline double mnac(const std::vector<std::pair<AttributeScores, AttributeScores>>& scored, double beta = 0.5) {
  if (!(beta > 0.0 && beta < 1.0)) throw DomainError("mnac: beta must lie in (0, 1)");
  if (scored.empty()) throw DomainError("mnac: no pairs");
  double total = 0;
  for (const auto& [f, cf] : scored) {
    if (f.empty() || f.size() != cf.size()) throw DomainError("mnac: empty or mismatched attribute set");
    for (std::size_t a = 0; a < f.size(); ++a) total += (f[a] > beta) != (cf[a] > beta);
  }
  return total / static_cast<double>(scored.size());
}

// c^{q,a}(x): per-attribute score used by CD for query attribute q. The default
// is the raw oracle score O_a(x), ignoring q.
using CorrelatedScore = std::function<double(const AttributeScores&, int q, int a)>;

inline double raw_attribute_score(const AttributeScores& s, int, int a) { return s.at(static_cast<std::size_t>(a)); }

// CD_q = (1/N) sum_i sum_a |c^{q,a}(x_cf_i) - c^{q,a}(x_f_i)|
inline double correlation_difference(const std::vector<std::pair<AttributeScores, AttributeScores>>& scored, int q,
                                     const CorrelatedScore& c = raw_attribute_score) {
  if (scored.empty()) throw DomainError("cd: no pairs");
  double total = 0;
  for (const auto& [f, cf] : scored) {
    if (f.empty() || f.size() != cf.size()) throw DomainError("cd: empty or mismatched attribute set");
    if (q < 0 || q >= static_cast<int>(f.size())) throw DomainError("cd: query attribute out of range");
    for (int a = 0; a < static_cast<int>(f.size()); ++a) total += std::abs(c(cf, q, a) - c(f, q, a));
  }
  return total / static_cast<double>(scored.size());
}

inline AttributeScores score_attributes(const AttributeOracle& o, const ImageTensor<double>& x) {
  AttributeScores s;
  for (int a = 0; a < static_cast<int>(o.attributes.size()); ++a) s.push_back(o.score(x, a));
  return s;
}

// ---------------------------------------------------------------- background loss

struct MeanCi {
  double mean = 0.0;
  double ci95 = 0.0;  // half-width, 1.96 * sd / sqrt(n)
  int n = 0;
  int degenerate = 0;  // samples with an empty background, excluded
};

inline MeanCi mean_ci95(const std::vector<double>& v) {
  MeanCi r;
  r.n = static_cast<int>(v.size());
  if (v.empty()) return r;
  r.mean = std::accumulate(v.begin(), v.end(), 0.0) / r.n;
  if (r.n > 1) {
    double ss = 0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    r.ci95 = 1.96 * std::sqrt(ss / (r.n - 1)) / std::sqrt(static_cast<double>(r.n));
  }
  return r;
}

// Per-element MSE over background pixels of each pair, summarized as mean +- 95% CI.
template <typename T>
MeanCi background_mse(const std::vector<ImagePair<T>>& pairs, const std::vector<BinaryMask>& masks) {
  if (pairs.size() != masks.size()) throw ShapeError("background_mse: pairs and masks differ in count");
  std::vector<double> v;
  int degenerate = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (masks[i].background_count() == 0) {
      ++degenerate;
      continue;
    }
    v.push_back(background_mse(pairs[i].first.tensor(), pairs[i].second.tensor(), masks[i]));
  }
  MeanCi r = mean_ci95(v);
  r.degenerate = degenerate;
  return r;
}

}  // namespace eced

// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "eced/models/classifier.hpp"
#include "eced/models/denoiser.hpp"
#include "eced/models/vae.hpp"
#include "test_util.hpp"

using namespace eced;
using eced::testing::check_gradient;

namespace {

Tensor<double> randn(Shape s, std::uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  return rng.normal_tensor<double>(std::move(s), sd);
}

// Weighted sum with fixed random weights, so every output coordinate matters.
Var<double> probe(const Var<double>& y, std::uint64_t seed = 99) {
  return ops::sum(ops::mul_const(y, randn(y.shape(), seed)));
}

}  // namespace

TEST(Autograd, Elementwise) {
  const auto x = randn({2, 3, 4, 4}, 1);
  for (auto f : std::vector<std::function<Var<double>(const Var<double>&)>>{
           [](const Var<double>& v) { return probe(ops::silu(v)); },
           [](const Var<double>& v) { return probe(ops::sigmoid(v)); },
           [](const Var<double>& v) { return probe(ops::exp(ops::scale(v, 0.3))); },
           [](const Var<double>& v) { return probe(ops::square(v)); },
           [](const Var<double>& v) { return ops::pow_scalar(ops::sum(ops::abs_pow(v, 1.5)), 1.0 / 1.5); },
           [](const Var<double>& v) { return probe(ops::add_scalar(ops::lincomb(v, 0.7, v, -0.2), 1.0)); },
       }) {
    const auto r = check_gradient(f, x, 40, 5);
    EXPECT_LE(r.max_rel, 1e-6);
  }
}

TEST(Autograd, SpatialOps) {
  const auto x = randn({2, 3, 4, 4}, 2);
  Tensor<double> mask({4, 4});
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = i % 3 == 0;
  const auto other = randn({2, 3, 4, 4}, 3);
  std::vector<std::function<Var<double>(const Var<double>&)>> fs{
      [](const Var<double>& v) { return probe(ops::upsample2x(v)); },
      [](const Var<double>& v) { return probe(ops::avgpool2x(v)); },
      [](const Var<double>& v) { return probe(ops::global_avg_pool(v)); },
      [&](const Var<double>& v) { return probe(ops::mul_hw(v, mask)); },
      [&](const Var<double>& v) { return probe(ops::select_hw(v, Var<double>(other), mask)); },
      [&](const Var<double>& v) { return probe(ops::select_hw(Var<double>(other), v, mask)); },
      [](const Var<double>& v) { return probe(ops::concat_channels(v, ops::square(v))); },
      [](const Var<double>& v) { return probe(ops::slice_channels(v, 1, 3)); },
      [](const Var<double>& v) { return probe(ops::from_tokens(ops::to_tokens(v), 4, 4)); },
  };
  for (const auto& f : fs) EXPECT_LE(check_gradient(f, x, 40, 7).max_rel, 1e-6);
}

TEST(Autograd, ConvolutionInputAndWeights) {
  const auto x = randn({2, 3, 6, 6}, 4);
  const auto w = randn({5, 3, 3, 3}, 5, 0.3);
  const auto b = randn({5}, 6);
  for (int stride : {1, 2}) {
    EXPECT_LE(check_gradient([&](const Var<double>& v) { return probe(ops::conv2d(v, Var<double>(w), Var<double>(b), stride)); },
                             x, 60, 8)
                  .max_rel,
              1e-6);
    EXPECT_LE(check_gradient([&](const Var<double>& v) { return probe(ops::conv2d(Var<double>(x), v, Var<double>(b), stride)); },
                             w, 60, 9)
                  .max_rel,
              1e-6);
  }
}

TEST(Autograd, LinearAttentionSoftmax) {
  const auto x = randn({2, 5, 4}, 10);
  const auto w = randn({3, 4}, 11);
  const auto b = randn({3}, 12);
  const auto k = randn({2, 6, 4}, 13);
  std::vector<std::function<Var<double>(const Var<double>&)>> fs{
      [&](const Var<double>& v) { return probe(ops::linear(v, Var<double>(w), Var<double>(b))); },
      [&](const Var<double>& v) { return probe(ops::bmm(v, Var<double>(k), true)); },
      [&](const Var<double>& v) { return probe(ops::softmax_last(v)); },
      [&](const Var<double>& v) { return probe(ops::bmm(ops::softmax_last(ops::bmm(v, v, true)), v)); },
  };
  for (const auto& f : fs) EXPECT_LE(check_gradient(f, x, 40, 14).max_rel, 1e-6);
  const auto logits = randn({3, 4}, 15);
  EXPECT_LE(check_gradient([](const Var<double>& v) { return ops::sum(ops::cross_entropy_rows(v, {0, 3, 1})); }, logits, 12, 16)
                .max_rel,
            1e-6);
}

TEST(Autograd, DecoderGradientMatchesFiniteDifferences) {
  Rng rng(20);
  Decoder<double> dec(VaeArch::miniature(), rng);
  const auto z = randn({1, 4, 2, 2}, 21);
  const auto r = check_gradient([&](const Var<double>& v) { return ops::sum(dec(v)); }, z, 16, 22);
  EXPECT_LE(r.max_rel, 1e-3);
}

TEST(Autograd, ClassifierLossGradientWrtInput) {
  Rng rng(30);
  ClassifierModel<double> cls(ClassifierArch::miniature(), rng);
  Rng ir(31);
  const auto img = eced::testing::random_image<double>(16, 16, ir);
  const auto r = check_gradient([&](const Var<double>& v) { return ops::cross_entropy_rows(cls.logits(v), {1}); },
                                img.batch(), 100, 32);
  EXPECT_LE(r.max_rel, 1e-3);
}

TEST(Autograd, DenoiserGradientWrtLatent) {
  Rng rng(40);
  Denoiser<double> net(DenoiserArch::miniature(), rng);
  // Nonzero output layer so the check is not trivially zero.
  for (auto& v : net.conv_out.weight.mutable_value().values()) v = rng.normal() * 0.2;
  ConditionEmbedder<double> emb(2, 2, 4, rng);
  const auto cond = emb.embed(1);
  const auto z = randn({1, 4, 4, 4}, 41);
  const auto r = check_gradient([&](const Var<double>& v) { return probe(net.predict(v, cond, 500)); }, z, 60, 42);
  EXPECT_LE(r.max_rel, 1e-3);
}

TEST(Autograd, NoGradGuardRecordsNothing) {
  Var<double> x(randn({3}, 1), true);
  NoGradGuard ng;
  Var<double> y = ops::square(x);
  EXPECT_FALSE(y.requires_grad());
}

// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>

#include "eced/models/training.hpp"
#include "eced/report.hpp"
#include "test_util.hpp"

using namespace eced;
namespace fs = std::filesystem;

namespace {

SampleRecord make_record(int i, const std::string& hash, Rng& rng) {
  SampleRecord r;
  r.sample = i;
  r.y_f = 0;
  r.y_cf = 1;
  r.xi = 0.5;
  r.config_hash = hash;
  r.factual = eced::testing::random_image<double>(16, 16, rng);
  r.counterfactual = eced::testing::random_image<double>(16, 16, rng);
  r.preserved = r.factual;
  r.mask = BinaryMask(16, 16);
  for (int y = 4; y < 12; ++y)
    for (int x = 4; x < 12; ++x) r.mask.at(y, x) = 1;
  for (int k = 0; k < 5; ++k) r.loss_trace.push_back(1.0 / (k + 1) + 0.01 * i);
  r.target_prob = {0.1, 0.2, 0.3, 0.4, 0.5};
  r.flip_epoch = i % 2 ? std::optional<int>(3) : std::nullopt;
  r.final_label = 1;
  return r;
}

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

ClassifierModel<double> small_classifier() {
  Rng rng(4);
  ClassifierModel<double> c(ClassifierArch::miniature(2), rng);
  nn::set_trainable<double>(c, false);
  return c;
}

}  // namespace

TEST(Record, RoundTrip) {
  Rng rng(1);
  const auto r = make_record(3, "abc", rng);
  const auto dir = fresh_dir("eced_rec_rt");
  save_record(r, dir / "a.rec");
  const auto l = load_record(dir / "a.rec");
  EXPECT_EQ(l.sample, 3);
  EXPECT_EQ(l.config_hash, "abc");
  EXPECT_EQ(l.factual, r.factual);
  EXPECT_EQ(l.counterfactual, r.counterfactual);
  EXPECT_EQ(l.mask.data, r.mask.data);
  EXPECT_EQ(l.loss_trace, r.loss_trace);
  EXPECT_EQ(l.flip_epoch, r.flip_epoch);
  EXPECT_THROW(load_vae<double>(dir / "a.rec"), CheckpointError);
}

TEST(Evaluate, EmptyDirectoryIsDomainError) {
  const auto dir = fresh_dir("eced_rec_empty");
  EXPECT_THROW(load_records(dir), DomainError);
  EXPECT_THROW(load_records(dir / "missing"), DomainError);
  EXPECT_THROW(evaluate_records<double>({}, small_classifier(), 0.01, 0), DomainError);
}

TEST(Evaluate, MixedConfigsRefusedUnlessForced) {
  Rng rng(2);
  const std::vector<SampleRecord> recs{make_record(0, "aaaa", rng), make_record(1, "bbbb", rng)};
  const auto cls = small_classifier();
  EXPECT_THROW(evaluate_records(recs, cls, 0.05, 0), ConfigError);
  EXPECT_EQ(evaluate_records(recs, cls, 0.05, 0, true).config_hash, "mixed");
}

TEST(Evaluate, ReportMatchesDirectComputationAndIsReproducible) {
  Rng rng(3);
  std::vector<SampleRecord> recs;
  for (int i = 0; i < 6; ++i) recs.push_back(make_record(i, "h", rng));
  const auto dir = fresh_dir("eced_rec_eval");
  for (const auto& r : recs) save_record(r, dir / ("s" + std::to_string(r.sample) + ".rec"));
  const auto cls = small_classifier();
  const auto a = evaluate_records(load_records(dir), cls, 0.05, 9);
  const auto b = evaluate_records(load_records(dir), cls, 0.05, 9);
  EXPECT_EQ(a.n, 6);
  EXPECT_EQ(a.l1, b.l1);
  EXPECT_EQ(a.fid, b.fid);
  EXPECT_EQ(a.sfid, b.sfid);
  EXPECT_EQ(a.cout, b.cout);
  std::vector<ImagePair<double>> pairs;
  for (const auto& r : recs) pairs.emplace_back(r.factual, r.counterfactual);
  EXPECT_NEAR(a.l2, lp_distance(pairs, 2.0), 1e-12);
  EXPECT_EQ(a.preserved_bg_mse.mean, 0.0);
  ASSERT_EQ(a.convergence.size(), 5u);
  EXPECT_NEAR(a.convergence[0].mean, 1.0 + 0.01 * 2.5, 1e-12);
  EXPECT_EQ(a.convergence[0].n, 6);
  write_metric_table(a, dir / "m.csv");
  write_convergence_csv(a, dir / "c.csv");
  EXPECT_TRUE(fs::file_size(dir / "m.csv") > 0);
}

TEST(MovingAverage, Examples) {
  EXPECT_EQ(moving_average({1, 2, 3, 4}, 2), (std::vector<double>{1, 1.5, 2.5, 3.5}));
  EXPECT_EQ(moving_average({5, 5, 5}, 10), (std::vector<double>{5, 5, 5}));
  EXPECT_THROW(moving_average({1}, 0), DomainError);
}

TEST(LatentGrid, ZeroLatentGivesUniformPanels) {
  const auto px = latent_grid(LatentTensor<double>(8, 8), 4);
  EXPECT_EQ(px.height, 32);
  EXPECT_EQ(px.width, 4 * 32 + 3 * 2);
  for (int p = 0; p < 4; ++p) {
    const int x0 = p * 34;
    const auto ref = px.bytes[static_cast<std::size_t>(x0) * 3];
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) EXPECT_EQ(px.bytes[(static_cast<std::size_t>(y) * px.width + x0 + x) * 3], ref);
  }
}

TEST(LatentGrid, PerChannelMinMaxAndDeterministic) {
  Rng rng(5);
  const auto z = eced::testing::random_latent<double>(4, 4, rng);
  const auto a = latent_grid(z, 1), b = latent_grid(z, 1);
  EXPECT_EQ(a.bytes, b.bytes);
  for (int p = 0; p < 4; ++p) {
    int lo = 255, hi = 0;
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) {
        const int v = a.bytes[(static_cast<std::size_t>(y) * a.width + p * 6 + x) * 3];
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    EXPECT_EQ(lo, 0);
    EXPECT_EQ(hi, 255);
  }
}

TEST(LatentGrid, EncodedImageCorrelatesWithLuminance) {
  const ToyDataset ds = eced::testing::tiny_dataset(48, 32, 6);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 16;
  cfg.lr = 3e-3;
  cfg.seed = 7;
  const auto vae = train_vae<double>(ds, VaeArch::miniature(), cfg).model;
  const auto img = ds.image<double>(0);
  const auto z = vae.encode(img);
  const int h = z.height(), f = 32 / h;
  std::vector<double> lum;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < h; ++x) {
      double s = 0;
      for (int dy = 0; dy < f; ++dy)
        for (int dx = 0; dx < f; ++dx)
          for (int c = 0; c < 3; ++c) s += img.at(y * f + dy, x * f + dx, c);
      lum.push_back(s);
    }
  double best = -1;
  for (int c = 0; c < 4; ++c) {
    std::vector<double> v;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < h; ++x) v.push_back(z.at(y, x, c));
    const double mv = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
    const double ml = std::accumulate(lum.begin(), lum.end(), 0.0) / lum.size();
    double cov = 0, vv = 0, ll = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      cov += (v[i] - mv) * (lum[i] - ml);
      vv += (v[i] - mv) * (v[i] - mv);
      ll += (lum[i] - ml) * (lum[i] - ml);
    }
    best = std::max(best, cov / std::sqrt(vv * ll));
  }
  EXPECT_GT(best, 0.0);
}

TEST(PngMetadata, RoundTrip) {
  const auto dir = fresh_dir("eced_png_meta");
  write_png(dir / "a.png", latent_grid(LatentTensor<double>(2, 2), 1), {{"config_hash", "0123456789abcdef"}});
  KeyValues meta;
  const auto px = read_png(dir / "a.png", &meta);
  EXPECT_EQ(meta.at("config_hash"), "0123456789abcdef");
  EXPECT_EQ(px.height, 2);
}

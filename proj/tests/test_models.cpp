// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "eced/models/checkpoint.hpp"
#include "eced/models/training.hpp"
#include "test_util.hpp"

using namespace eced;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "eced_model_tests";
  fs::create_directories(dir);
  return dir / name;
}

template <typename Model>
std::vector<Tensor<float>> params_of(Model m) {
  std::vector<Tensor<float>> out;
  m.visit("", [&](const std::string&, Var<float>& v) { out.push_back(v.value()); });
  return out;
}

}  // namespace

TEST(Vae, ShapeContract) {
  Rng rng(1);
  VaeModel<float> vae(VaeArch{}, rng);
  ImageTensor<float> img(64, 64, 0.5f);
  const auto z = vae.encode(img);
  EXPECT_EQ(z.height(), 8);
  EXPECT_EQ(z.width(), 8);
  EXPECT_EQ(z.tensor().dim(0), 4);
  const auto x = vae.decode(z);
  EXPECT_EQ(x.height(), 64);
  EXPECT_EQ(x.width(), 64);
  EXPECT_THROW(vae.encode(ImageTensor<float>(65, 64, 0.5f)), ShapeError);
}

TEST(Vae, DecodeOfZeroLatentInUnitRange) {
  Rng rng(2);
  VaeModel<float> vae(VaeArch{}, rng);
  const auto x = vae.decode(LatentTensor<float>(8, 8));
  for (float v : x.tensor().values()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Embedder, DeterministicAndRangeChecked) {
  Rng rng(3);
  ConditionEmbedder<float> emb(2, 4, 8, rng);
  EXPECT_EQ(emb.embed(0).data, emb.embed(0).data);
  EXPECT_EQ(emb.embed(0).tokens(), 4);
  EXPECT_EQ(emb.embed(0).width(), 8);
  EXPECT_THROW(emb.embed(2), DomainError);
  EXPECT_THROW(emb.embed(-1), DomainError);
}

TEST(Classifier, ProbabilitiesSumToOne) {
  Rng rng(4);
  ClassifierModel<float> cls(ClassifierArch{}, rng);
  Rng ir(5);
  for (int i = 0; i < 5; ++i) {
    const auto p = cls.classify(eced::testing::random_image<float>(64, 64, ir));
    double s = 0;
    for (double v : p) s += v;
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Classifier, ActivationsShapeLookupAndPurity) {
  Rng rng(6);
  ClassifierArch arch;
  ClassifierModel<float> cls(arch, rng);
  Rng ir(7);
  const auto img = eced::testing::random_image<float>(64, 64, ir);
  const auto a = cls.activations(img, "features_3");
  EXPECT_EQ(a.rank(), 3);
  EXPECT_EQ(a.dim(0), arch.c3);
  EXPECT_EQ(a.dim(1), 8);
  EXPECT_EQ(cls.activations(img, "features_0").dim(0), arch.c0);
  EXPECT_THROW(cls.activations(img, "features_99"), LookupError);
  EXPECT_EQ(a, cls.activations(img, "features_3"));
}

TEST(Checkpoint, RoundTripsAreBitExact) {
  Rng rng(8);
  Rng ir(9);
  const auto img = eced::testing::random_image<float>(64, 64, ir);

  VaeModel<float> vae(VaeArch{}, rng);
  vae.set_latent_scale(1.7f);
  save_checkpoint(vae, scratch("vae.ckpt"), 11);
  const auto vae2 = load_vae<float>(scratch("vae.ckpt"));
  EXPECT_EQ(vae.encode(img), vae2.encode(img));
  EXPECT_EQ(vae.decode(vae.encode(img)), vae2.decode(vae.encode(img)));
  EXPECT_EQ(vae2.latent_scale, 1.7f);

  ClassifierModel<float> cls(ClassifierArch{}, rng);
  save_checkpoint(cls, scratch("cls.ckpt"), 12);
  EXPECT_EQ(cls.classify(img), load_classifier<float>(scratch("cls.ckpt")).classify(img));

  Denoiser<float> net(DenoiserArch{}, rng);
  for (auto& v : net.conv_out.weight.mutable_value().values()) v = static_cast<float>(rng.normal() * 0.1);
  ConditionEmbedder<float> emb(2, 4, 64, rng);
  save_checkpoint(net, scratch("unet.ckpt"), 13);
  save_checkpoint(emb, scratch("emb.ckpt"), 13);
  const auto net2 = load_denoiser<float>(scratch("unet.ckpt"));
  const auto emb2 = load_embedder<float>(scratch("emb.ckpt"));
  EXPECT_EQ(emb.embed(1).data, emb2.embed(1).data);
  const Var<float> z(rng.normal_tensor<float>({1, 4, 8, 8}));
  NoGradGuard ng;
  EXPECT_EQ(net.predict(z, emb.embed(1), 321).value(), net2.predict(z, emb2.embed(1), 321).value());
}

TEST(Checkpoint, LoadedModelsAreFrozen) {
  Rng rng(10);
  ClassifierModel<float> cls(ClassifierArch::miniature(), rng);
  save_checkpoint(cls, scratch("frozen.ckpt"), 1);
  auto loaded = load_classifier<float>(scratch("frozen.ckpt"));
  for (auto& p : nn::parameters<float>(loaded)) EXPECT_FALSE(p.requires_grad());
}

TEST(Checkpoint, TruncatedFileRejected) {
  Rng rng(11);
  ClassifierModel<float> cls(ClassifierArch::miniature(), rng);
  save_checkpoint(cls, scratch("trunc.ckpt"), 1);
  const auto size = fs::file_size(scratch("trunc.ckpt"));
  for (auto keep : {size - 1, size / 2, std::uintmax_t{10}, std::uintmax_t{0}}) {
    fs::resize_file(scratch("trunc.ckpt"), keep);
    EXPECT_THROW(load_classifier<float>(scratch("trunc.ckpt")), CheckpointError) << keep;
    save_checkpoint(cls, scratch("trunc.ckpt"), 1);
  }
}

TEST(Checkpoint, CorruptByteRejected) {
  Rng rng(12);
  ClassifierModel<float> cls(ClassifierArch::miniature(), rng);
  save_checkpoint(cls, scratch("corrupt.ckpt"), 1);
  std::fstream f(scratch("corrupt.ckpt"), std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(200);
  f.put('\x5a');
  f.close();
  EXPECT_THROW(load_classifier<float>(scratch("corrupt.ckpt")), CheckpointError);
}

TEST(Checkpoint, WrongKindRejected) {
  Rng rng(13);
  VaeModel<float> vae(VaeArch::miniature(), rng);
  save_checkpoint(vae, scratch("kind.ckpt"), 1);
  EXPECT_THROW(load_classifier<float>(scratch("kind.ckpt")), KindMismatchError);
  EXPECT_THROW(load_denoiser<float>(scratch("kind.ckpt")), KindMismatchError);
  EXPECT_NO_THROW(load_vae<float>(scratch("kind.ckpt")));
  EXPECT_THROW(load_vae<float>(scratch("missing.ckpt")), CheckpointError);
}

TEST(Checkpoint, PrecisionConversionOnLoad) {
  Rng rng(14);
  ClassifierModel<float> cls(ClassifierArch::miniature(), rng);
  save_checkpoint(cls, scratch("f32.ckpt"), 1);
  const auto d = load_classifier<double>(scratch("f32.ckpt"));
  Rng ir(15);
  const auto img = eced::testing::random_image<float>(16, 16, ir);
  const auto pf = cls.classify(img);
  const auto pd = d.classify(ImageTensor<double>(img.tensor().cast<double>()));
  for (std::size_t k = 0; k < pf.size(); ++k) EXPECT_NEAR(pf[k], pd[k], 1e-5);
}

TEST(Training, ClassifierNeedsTwoLabels) {
  auto ds = eced::testing::tiny_dataset();
  for (auto& l : ds.labels) l = 0;
  TrainConfig c;
  c.epochs = 1;
  EXPECT_THROW(train_classifier<float>(ds, ClassifierArch::miniature(), c), TrainingError);
}

TEST(Training, EmptyDatasetRejected) {
  ToyDataset empty;
  TrainConfig c;
  EXPECT_THROW(train_vae<float>(empty, VaeArch::miniature(), c), ConfigError);
  EXPECT_THROW(train_classifier<float>(empty, ClassifierArch::miniature(), c), ConfigError);
}

TEST(Training, SameSeedSameResult) {
  const auto ds = eced::testing::tiny_dataset();
  TrainConfig c;
  c.epochs = 2;
  c.batch_size = 8;
  c.seed = 5;
  const auto a = train_vae<float>(ds, VaeArch::miniature(), c);
  const auto b = train_vae<float>(ds, VaeArch::miniature(), c);
  EXPECT_EQ(a.log.epoch_loss, b.log.epoch_loss);
  EXPECT_EQ(a.log.heldout_metric, b.log.heldout_metric);
  const auto ca = train_classifier<float>(ds, ClassifierArch::miniature(), c);
  const auto cb = train_classifier<float>(ds, ClassifierArch::miniature(), c);
  EXPECT_EQ(ca.log.heldout_metric, cb.log.heldout_metric);
  EXPECT_EQ(ca.log.epoch_loss, cb.log.epoch_loss);
}

TEST(Training, DiffusionZeroLearningRateLeavesParameters) {
  const auto ds = eced::testing::tiny_dataset(48, 32);
  Rng rng(16);
  VaeModel<float> vae(VaeArch::miniature(), rng);
  const auto sched = build_schedule(100, 0.00085, 0.012, 10);
  TrainConfig c;
  c.batch_size = 64;  // one batch per epoch
  c.lr = 0.0;
  c.epochs = 0;
  const auto before = train_diffusion<float>(ds, vae, sched, DenoiserArch::miniature(), c);
  c.epochs = 1;
  const auto after = train_diffusion<float>(ds, vae, sched, DenoiserArch::miniature(), c);
  EXPECT_EQ(params_of(before.model.denoiser), params_of(after.model.denoiser));
  EXPECT_EQ(before.model.embedder.table.value(), after.model.embedder.table.value());
}

TEST(Training, DiffusionInitialLossIsUnitNoiseEnergy) {
  // The output layer starts at zero, so the first loss is the mean squared noise.
  const auto ds = eced::testing::tiny_dataset(400, 32);
  Rng rng(17);
  VaeModel<float> vae(VaeArch::miniature(), rng);
  const auto sched = build_schedule(1000, 0.00085, 0.012, 50);
  TrainConfig c;
  c.batch_size = 400;
  c.lr = 0.0;
  c.epochs = 1;
  const auto r = train_diffusion<float>(ds, vae, sched, DenoiserArch::miniature(), c);
  EXPECT_NEAR(r.log.epoch_loss.at(0), 1.0, 0.1);
}

TEST(Training, TrainedEmbeddingsDiffer) {
  const auto ds = eced::testing::tiny_dataset(48, 32);
  Rng rng(18);
  VaeModel<float> vae(VaeArch::miniature(), rng);
  const auto sched = build_schedule(100, 0.00085, 0.012, 10);
  TrainConfig c;
  c.epochs = 1;
  c.batch_size = 16;
  const auto r = train_diffusion<float>(ds, vae, sched, DenoiserArch::miniature(), c);
  const auto e0 = r.model.embedder.embed(0).data, e1 = r.model.embedder.embed(1).data;
  double d = 0;
  for (std::size_t i = 0; i < e0.size(); ++i) d += (e0[i] - e1[i]) * (e0[i] - e1[i]);
  EXPECT_GT(d, 0.0);
}

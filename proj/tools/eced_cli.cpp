// SPDX-License-Identifier: Apache-2.0
// Command-line driver: data generation, training, explanation and evaluation.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "eced/config.hpp"
#include "eced/models/checkpoint.hpp"
#include "eced/models/training.hpp"
#include "eced/pipeline.hpp"
#include "eced/png_io.hpp"
#include "eced/report.hpp"

namespace fs = std::filesystem;
using namespace eced;

namespace {

constexpr int kExitOk = 0, kExitUsage = 1, kExitRuntime = 2, kExitAssert = 3;

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out;
  std::string checkpoints;
  std::vector<std::string> set;
};

struct Run {
  ExperimentConfig cfg;
  std::string hash;
  RunLayout layout;
  fs::path ckpt;

  KeyValues meta(const std::string& what) const {
    return {{"config_hash", hash}, {"artifact", what}, {"seed", std::to_string(cfg.seed)}};
  }
};

Run open_run(const Common& c) {
  Run r;
  if (!c.config.empty()) r.cfg = load_config(c.config);
  for (const auto& s : c.set) apply_config_text(r.cfg, s, "--set");
  if (c.seed_set) r.cfg.seed = c.seed;
  if (!c.out.empty()) r.cfg.out = c.out;
  r.cfg.sync();
  validate_config(r.cfg);
  r.hash = config_hash(r.cfg);
  r.layout = run_layout(r.cfg);
  r.layout.create();
  r.ckpt = c.checkpoints.empty() ? r.layout.checkpoints() : fs::path(c.checkpoints);
  // Echo the effective configuration next to the outputs.
  std::ofstream os(r.layout.root / "config.txt");
  os << "# config_hash = " << r.hash << "\n" << serialize_config(r.cfg);
  return r;
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p);
  if (!os) throw IoError("cannot write " + p.string());
  os << text;
}

std::string meta_text(const KeyValues& kv) {
  std::string s;
  for (const auto& [k, v] : kv) s += k + " = " + v + "\n";
  return s;
}

void write_trace_csv(const fs::path& p, const std::string& hash, const std::string& column,
                     const std::vector<double>& v) {
  std::string s = "# config_hash=" + hash + "\nstep," + column + "\n";
  for (std::size_t i = 0; i < v.size(); ++i) s += std::to_string(i) + "," + kv_format(v[i]) + "\n";
  write_text(p, s);
}

fs::path require(const Run& r, const std::string& file, const std::string& subcommand) {
  const fs::path p = r.ckpt / file;
  if (!fs::exists(p))
    throw ConfigError("missing checkpoint " + p.string() + "; run `eced " + subcommand +
                      "` with the same config first (or point --checkpoints at an existing directory)");
  return p;
}

ClassifierModel<float> need_classifier(const Run& r) {
  return load_classifier<float>(require(r, "classifier.ckpt", "train-classifier"));
}
VaeModel<float> need_vae(const Run& r) { return load_vae<float>(require(r, "vae.ckpt", "train-vae")); }

ModelBundle<float> need_all(const Run& r) {
  ModelBundle<float> m;
  m.classifier = need_classifier(r);
  m.vae = need_vae(r);
  m.denoiser = load_denoiser<float>(require(r, "denoiser.ckpt", "train-diffusion"));
  m.embedder = load_embedder<float>(require(r, "embedder.ckpt", "train-diffusion"));
  return m;
}

ImageTensor<float> input_image(const Run& r, int sample, const std::string& image_path) {
  if (!image_path.empty()) return from_pixels<float>(read_png(image_path));
  const ToyDataset ds = generate_dataset(r.cfg.dataset);
  if (sample < 0 || sample >= ds.size()) throw ConfigError("--sample out of range [0, " + std::to_string(ds.size()) + ")");
  return ds.image<float>(sample);
}

std::string tag(int sample) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "sample_%05d", sample);
  return buf;
}

void log_training(const Run& r, const std::string& name, const TrainLog& log, const std::string& metric) {
  write_trace_csv(r.layout.reports() / ("train_" + name + ".csv"), r.hash, "loss", log.epoch_loss);
  KeyValues kv = r.meta("train-" + name);
  kv[metric] = kv_format(log.heldout_metric);
  write_text(r.layout.reports() / ("train_" + name + ".txt"), meta_text(kv));
  std::cout << name << ": " << metric << " = " << log.heldout_metric << "\n";
}

// ---------------------------------------------------------------- subcommands

int cmd_gen_data(const Run& r) {
  const ToyDataset ds = generate_dataset(r.cfg.dataset);
  const fs::path dir = r.layout.data();
  std::string labels = "# config_hash=" + r.hash + "\nindex,label,split\n";
  std::vector<std::string> split(static_cast<std::size_t>(ds.size()), "train");
  for (int i : ds.holdout_index) split[static_cast<std::size_t>(i)] = "holdout";
  for (int i = 0; i < ds.size(); ++i) {
    write_image_png(dir / "images" / (tag(i) + ".png"), ds.image<double>(i), r.meta("image"));
    labels += std::to_string(i) + "," + std::to_string(ds.labels[static_cast<std::size_t>(i)]) + "," +
              split[static_cast<std::size_t>(i)] + "\n";
  }
  write_text(dir / "labels.csv", labels);
  std::cout << "wrote " << ds.size() << " images to " << dir << "\n";
  return kExitOk;
}

int cmd_train_classifier(const Run& r) {
  const auto t = train_classifier<float>(generate_dataset(r.cfg.dataset), r.cfg.classifier, r.cfg.train_classifier);
  save_checkpoint(t.model, r.ckpt / "classifier.ckpt", r.cfg.train_classifier.seed, r.cfg.train_classifier.echo());
  log_training(r, "classifier", t.log, "heldout_accuracy");
  return kExitOk;
}

int cmd_train_vae(const Run& r) {
  const auto t = train_vae<float>(generate_dataset(r.cfg.dataset), r.cfg.vae, r.cfg.train_vae);
  save_checkpoint(t.model, r.ckpt / "vae.ckpt", r.cfg.train_vae.seed, r.cfg.train_vae.echo());
  log_training(r, "vae", t.log, "heldout_mse");
  return kExitOk;
}

int cmd_train_diffusion(const Run& r) {
  const VaeModel<float> vae = need_vae(r);
  const auto t = train_diffusion<float>(generate_dataset(r.cfg.dataset), vae, r.cfg.schedule(), r.cfg.denoiser,
                                        r.cfg.train_diffusion);
  save_checkpoint(t.model.denoiser, r.ckpt / "denoiser.ckpt", r.cfg.train_diffusion.seed, r.cfg.train_diffusion.echo());
  save_checkpoint(t.model.embedder, r.ckpt / "embedder.ckpt", r.cfg.train_diffusion.seed, r.cfg.train_diffusion.echo());
  log_training(r, "diffusion", t.log, "heldout_loss");
  return kExitOk;
}

int cmd_mask(const Run& r, int sample, const std::string& image_path) {
  const auto cls = need_classifier(r);
  const auto img = input_image(r, sample, image_path);
  const int y = r.cfg.explain.mask_label >= 0 ? r.cfg.explain.mask_label : cls.predict(img);
  const auto s = identify_foreground(img, y, cls, r.cfg.explain.layer, r.cfg.explain.xi, VaeModel<float>::kFactor);
  const fs::path dir = r.layout.masks();
  const std::string base = tag(sample);
  write_map_png(dir / (base + "_attention.png"), s.attention, r.meta("attention"));
  write_mask_png(dir / (base + "_mask.png"), s.pixel_mask, r.meta("pixel mask"));
  BinaryMask lat(s.latent_mask.height, s.latent_mask.width);
  lat.data = s.latent_mask.data;
  write_mask_png(dir / (base + "_latent_mask.png"), lat, r.meta("latent mask"));
  KeyValues kv = r.meta("mask");
  kv["label"] = std::to_string(y);
  kv["xi"] = kv_format(r.cfg.explain.xi);
  kv["foreground_pixels"] = std::to_string(s.pixel_mask.foreground_count());
  kv["background_pixels"] = std::to_string(s.pixel_mask.background_count());
  kv["foreground_latent_cells"] = std::to_string(s.latent_mask.foreground_count());
  kv["background_latent_cells"] = std::to_string(s.latent_mask.background_count());
  write_text(dir / (base + "_sizes.txt"), meta_text(kv));
  std::cout << meta_text(kv);
  return kExitOk;
}

int cmd_preserve(const Run& r, int sample, const std::string& image_path) {
  const auto cls = need_classifier(r);
  const auto vae = need_vae(r);
  const auto img = input_image(r, sample, image_path);
  const int y = r.cfg.explain.mask_label >= 0 ? r.cfg.explain.mask_label : cls.predict(img);
  const auto s = identify_foreground(img, y, cls, r.cfg.explain.layer, r.cfg.explain.xi, vae.factor());
  const auto sched = r.cfg.schedule();
  const std::uint64_t seed = derive_seed(derive_seed(r.cfg.seed, static_cast<std::uint64_t>(sample)), 0x70);
  const auto p = preserve_background(img, s.pixel_mask, s.latent_mask, vae, sched, r.cfg.explain.preservation, seed);
  const fs::path dir = r.layout.preservation();
  const std::string base = tag(sample);
  save_preservation(p, vae.arch, dir / (base + ".ckpt"), seed);
  write_trace_csv(dir / (base + "_trace.csv"), r.hash, "loss", p.loss_trace);
  write_image_png(dir / (base + "_preserved.png"), preserved_image(p, s.latent_mask, seed), r.meta("preserved"));
  KeyValues kv = r.meta("preserve");
  kv["initial_bg_mse"] = kv_format(p.initial_bg_mse);
  kv["final_bg_mse"] = kv_format(p.final_bg_mse);
  write_text(dir / (base + ".txt"), meta_text(kv));
  std::cout << meta_text(kv);
  return kExitOk;
}

int default_target(int y_f, int K) { return (y_f + 1) % K; }

int cmd_explain(const Run& r, int sample, int count, int target, const std::string& image_path) {
  const ModelBundle<float> m = need_all(r);
  const auto sched = r.cfg.schedule();
  std::vector<int> samples;
  if (!image_path.empty() || count <= 0) {
    samples.push_back(sample);
  } else {
    const ToyDataset ds = generate_dataset(r.cfg.dataset);
    for (int i = 0; i < count && i < static_cast<int>(ds.holdout_index.size()); ++i)
      samples.push_back(ds.holdout_index[static_cast<std::size_t>(i)]);
  }
  const ToyDataset ds = generate_dataset(r.cfg.dataset);
  AttackConfig ac = r.cfg.explain.attack;
  const fs::path dir = r.layout.ce();
  int flips = 0;
  for (int s : samples) {
    const auto img = image_path.empty() ? ds.image<float>(s) : from_pixels<float>(read_png(image_path));
    const int y_f = m.classifier.predict(img);
    const int y_cf = target >= 0 ? target : default_target(y_f, m.embedder.num_classes());
    const std::uint64_t seed = derive_seed(r.cfg.seed, static_cast<std::uint64_t>(s));
    const auto e = explain(img, y_cf, m, sched, r.cfg.explain, seed);
    const std::string base = tag(s);
    SampleRecord rec;
    rec.sample = s;
    rec.y_f = e.y_f;
    rec.y_cf = e.y_cf;
    rec.xi = r.cfg.explain.xi;
    rec.config_hash = r.hash;
    rec.factual = ImageTensor<double>(img.tensor().cast<double>());
    rec.counterfactual = ImageTensor<double>(e.ce.image.tensor().cast<double>());
    rec.preserved = ImageTensor<double>(e.preserved_image.tensor().cast<double>());
    rec.mask = e.split.pixel_mask;
    rec.loss_trace = e.ce.loss_trace;
    rec.target_prob = e.ce.target_prob;
    rec.flip_epoch = e.ce.flip_epoch;
    rec.final_label = e.ce.final_label;
    save_record(rec, dir / (base + ".rec"));
    write_image_png(dir / (base + "_cf.png"), e.ce.image, r.meta("counterfactual"));
    write_image_png(dir / (base + "_factual.png"), img, r.meta("factual"));
    write_image_png(dir / (base + "_preserved.png"), e.preserved_image, r.meta("preserved"));
    write_mask_png(dir / (base + "_mask.png"), e.split.pixel_mask, r.meta("pixel mask"));
    write_map_png(dir / (base + "_attention.png"), e.split.attention, r.meta("attention"));
    write_png(dir / (base + "_strip.png"),
              hstack({to_pixels(img), to_pixels(e.preserved_image), to_pixels(e.ce.image)}), r.meta("strip"));
    for (const auto& [k, snap] : e.ce.snapshots)
      write_image_png(dir / (base + "_iter" + std::to_string(k) + ".png"), snap, r.meta("intermediate"));
    write_trace_csv(dir / (base + "_loss.csv"), r.hash, "ce_loss", e.ce.loss_trace);
    write_trace_csv(dir / (base + "_preservation.csv"), r.hash, "loss", e.preservation.loss_trace);
    KeyValues kv = r.meta("explain");
    kv["sample"] = std::to_string(s);
    kv["y_f"] = std::to_string(e.y_f);
    kv["y_cf"] = std::to_string(e.y_cf);
    kv["final_label"] = std::to_string(e.ce.final_label);
    kv["final_target_prob"] = kv_format(e.ce.final_target_prob);
    kv["flip_epoch"] = e.ce.flip_epoch ? std::to_string(*e.ce.flip_epoch) : "none";
    kv["foreground_pixels"] = std::to_string(e.split.pixel_mask.foreground_count());
    kv["preserved_bg_mse"] = kv_format(background_mse(rec.preserved.tensor(), rec.factual.tensor(), rec.mask));
    kv["cf_bg_mse"] = kv_format(background_mse(rec.counterfactual.tensor(), rec.factual.tensor(), rec.mask));
    write_text(dir / (base + ".txt"), meta_text(kv));
    flips += e.ce.final_label == e.y_cf;
    std::cout << base << ": " << e.y_f << " -> " << e.y_cf << " final " << e.ce.final_label << " p "
              << e.ce.final_target_prob << " flip_epoch " << kv["flip_epoch"] << "\n";
  }
  std::cout << "flipped " << flips << "/" << samples.size() << "\n";
  return kExitOk;
}

int cmd_evaluate(const Run& r, const std::string& results, bool force) {
  const fs::path dir = results.empty() ? r.layout.ce() : fs::path(results);
  const auto recs = load_records(dir);
  const auto cls = need_classifier(r);
  const auto rep = evaluate_records(recs, cls, r.cfg.group_fraction, r.cfg.split_seed, force);
  write_metric_table(rep, r.layout.reports() / "metrics.csv");
  write_convergence_csv(rep, r.layout.reports() / "convergence.csv");
  std::cout << "n " << rep.n << "  l1 " << rep.l1 << "  l1.5 " << rep.l15 << "  l2 " << rep.l2 << "  FID " << rep.fid
            << "  sFID " << rep.sfid << "  S3 " << rep.s3 << "  COUT " << rep.cout << "  FR " << rep.fr
            << "  bg_mse " << rep.bg_mse.mean << "\n";
  return kExitOk;
}

int cmd_props(const Run& r, int trials, int maps) {
  const auto p1 = verify_proposition_1(trials, 8, 8, derive_seed(r.cfg.seed, 1));
  const auto ones = verify_proposition_1(std::max(1, trials / 10), 8, 8, derive_seed(r.cfg.seed, 2), true);
  const std::vector<double> th{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  const auto p2 = verify_proposition_2_suite(maps, th, r.cfg.dataset.image_size, VaeModel<float>::kFactor,
                                             derive_seed(r.cfg.seed, 3));
  const bool ones_ok = ones.max_angle <= 1e-9;
  KeyValues kv = r.meta("props");
  kv["prop1.trials"] = std::to_string(p1.trials);
  kv["prop1.violations"] = std::to_string(p1.violations);
  kv["prop1.resampled"] = std::to_string(p1.resampled);
  kv["prop1.min_cos"] = kv_format(p1.min_cos);
  kv["prop1.max_angle_deg"] = kv_format(p1.max_angle);
  kv["prop1.all_ones_max_angle_deg"] = kv_format(ones.max_angle);
  kv["prop2.maps"] = std::to_string(p2.maps);
  kv["prop2.violations"] = std::to_string(p2.violations);
  kv["prop2.truncated"] = std::to_string(p2.truncated);
  kv["prop2.min_angle_deg"] = kv_format(p2.min_angle);
  kv["prop2.max_angle_deg"] = kv_format(p2.max_angle);
  const bool ok = p1.passed() && p2.passed() && ones_ok;
  kv["result"] = ok ? "pass" : "fail";
  write_text(r.layout.reports() / "props.txt", meta_text(kv));
  std::cout << meta_text(kv);
  return ok ? kExitOk : kExitAssert;
}

int cmd_visualize_latent(const Run& r, int sample, const std::string& image_path, bool zero, int scale,
                         const std::string& output) {
  LatentTensor<float> z;
  if (zero) {
    const int h = r.cfg.dataset.image_size / VaeModel<float>::kFactor;
    z = LatentTensor<float>(h, h);
  } else {
    const auto vae = need_vae(r);
    z = vae.encode(input_image(r, sample, image_path));
  }
  const fs::path out = output.empty() ? r.layout.reports() / (tag(sample) + "_latent.png") : fs::path(output);
  write_png(out, latent_grid(z, scale), r.meta("latent grid"));
  std::cout << "wrote " << out << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Counterfactual explanations with blended latent diffusion on a toy image domain"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sc) {
    sc->add_option("--config", common.config, "Config file (key = value lines)");
    sc->add_option("--seed", common.seed, "Run seed (overrides run.seed)")->each([&](const std::string&) {
      common.seed_set = true;
    });
    sc->add_option("--out", common.out, "Output root (overrides run.out)");
    sc->add_option("--checkpoints", common.checkpoints, "Checkpoint directory (default: <run>/checkpoints)");
    sc->add_option("--set", common.set, "Config override, key=value (repeatable)");
  };
  int sample = 0, count = 0, target = -1, trials = 1000, maps = 100, scale = 8;
  std::string image, results, output;
  bool force = false, zero = false;

  auto* gen = app.add_subcommand("gen-data", "Render the toy dataset to PNGs");
  auto* tc = app.add_subcommand("train-classifier", "Train the toy classifier");
  auto* tv = app.add_subcommand("train-vae", "Train the VAE");
  auto* td = app.add_subcommand("train-diffusion", "Train the conditional latent denoiser (needs the VAE)");
  auto* mk = app.add_subcommand("mask", "Attention map and foreground masks for one image");
  auto* pr = app.add_subcommand("preserve", "Background preservation for one image");
  auto* ex = app.add_subcommand("explain", "Counterfactual explanation for one or more images");
  auto* ev = app.add_subcommand("evaluate", "Metric table and convergence curves over explain results");
  auto* pp = app.add_subcommand("props", "Numerical checks of the gradient-pruning properties");
  auto* vl = app.add_subcommand("visualize-latent", "Per-channel grid of an image's latent");
  for (auto* sc : {gen, tc, tv, td, mk, pr, ex, ev, pp, vl}) add_common(sc);
  for (auto* sc : {mk, pr, ex, vl}) {
    sc->add_option("--sample", sample, "Dataset index");
    sc->add_option("--image", image, "PNG input instead of a dataset sample");
  }
  ex->add_option("--count", count, "Explain the first N held-out samples instead of --sample");
  ex->add_option("--target", target, "Counterfactual class (default: next class after the prediction)");
  ev->add_option("--results", results, "Directory of explain records (default: <run>/ce)");
  ev->add_flag("--force", force, "Allow records from different configs");
  pp->add_option("--trials", trials, "Random trials for the angle check");
  pp->add_option("--maps", maps, "Random attention maps for the nesting check");
  vl->add_flag("--zero", zero, "Render an all-zero latent");
  vl->add_option("--scale", scale, "Upscaling factor per latent cell");
  vl->add_option("--output", output, "PNG path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }
  try {
    const Run r = open_run(common);
    if (gen->parsed()) return cmd_gen_data(r);
    if (tc->parsed()) return cmd_train_classifier(r);
    if (tv->parsed()) return cmd_train_vae(r);
    if (td->parsed()) return cmd_train_diffusion(r);
    if (mk->parsed()) return cmd_mask(r, sample, image);
    if (pr->parsed()) return cmd_preserve(r, sample, image);
    if (ex->parsed()) return cmd_explain(r, sample, count, target, image);
    if (ev->parsed()) return cmd_evaluate(r, results, force);
    if (pp->parsed()) return cmd_props(r, trials, maps);
    if (vl->parsed()) return cmd_visualize_latent(r, sample, image, zero, scale, output);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const LookupError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

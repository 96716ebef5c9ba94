// SPDX-License-Identifier: Apache-2.0
#pragma once

// Flat, typed experiment configuration.
//
//   # comment
//   preservation.lr = 3e-4
//
// Every key has a declared type and unit. Unknown keys, malformed values and
// duplicate keys are rejected. The canonical serialization (sorted keys, the
// output root excluded) is hashed to name the run directory.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "eced/dataset.hpp"
#include "eced/kv.hpp"
#include "eced/models/classifier.hpp"
#include "eced/models/denoiser.hpp"
#include "eced/models/training.hpp"
#include "eced/models/vae.hpp"
#include "eced/pipeline.hpp"

namespace eced {

struct ExperimentConfig {
  DatasetConfig dataset;
  VaeArch vae;
  DenoiserArch denoiser;
  ClassifierArch classifier;
  TrainConfig train_classifier{3, 32, 2e-3, 0.0, true, 0.0, 0, false};
  TrainConfig train_vae{10, 32, 2e-3, 0.0, true, 1e-4, 0, false};
  TrainConfig train_diffusion{150, 32, 1e-3, 0.0, true, 0.0, 0, false};
  std::uint64_t train_seed = 0;
  int schedule_T1 = 1000;
  double beta_start = 0.00085;
  double beta_end = 0.012;
  int sampler_steps = 50;
  ExplainConfig explain;
  double mnac_beta = 0.5;
  double group_fraction = 0.01;
  std::uint64_t split_seed = 0;
  std::string extractor = "classifier_penultimate";
  int fidelity_per_class = 100;
  std::uint64_t seed = 0;  // run seed for masks, preservation and attacks
  std::string out = "runs";

  NoiseSchedule schedule() const { return build_schedule(schedule_T1, beta_start, beta_end, sampler_steps); }
  // Keeps the class count of every model in sync with the dataset.
  void sync() {
    denoiser.num_classes = dataset.num_classes;
    classifier.num_classes = dataset.num_classes;
    train_classifier.seed = derive_seed(train_seed, 1);
    train_vae.seed = derive_seed(train_seed, 2);
    train_diffusion.seed = derive_seed(train_seed, 3);
  }
};

namespace detail {

using FieldRef = std::variant<int*, double*, std::uint64_t*, bool*, std::string*>;

struct Field {
  std::string key;
  FieldRef ref;
  std::string unit;
};

inline std::vector<Field> config_fields(ExperimentConfig& c) {
  return {
      {"dataset.size", &c.dataset.size, "images"},
      {"dataset.classes", &c.dataset.num_classes, "count"},
      {"dataset.image_size", &c.dataset.image_size, "px"},
      {"dataset.seed", &c.dataset.seed, "seed"},
      {"dataset.holdout_fraction", &c.dataset.holdout_fraction, "fraction"},
      {"vae.enc0", &c.vae.enc0, "channels"},
      {"vae.enc1", &c.vae.enc1, "channels"},
      {"vae.enc2", &c.vae.enc2, "channels"},
      {"vae.enc3", &c.vae.enc3, "channels"},
      {"vae.dec0", &c.vae.dec0, "channels"},
      {"vae.dec1", &c.vae.dec1, "channels"},
      {"vae.dec2", &c.vae.dec2, "channels"},
      {"vae.dec3", &c.vae.dec3, "channels"},
      {"denoiser.c0", &c.denoiser.c0, "channels"},
      {"denoiser.c1", &c.denoiser.c1, "channels"},
      {"denoiser.time_dim", &c.denoiser.time_dim, "features"},
      {"condition.tokens", &c.denoiser.tokens, "tokens"},
      {"condition.dim", &c.denoiser.embed_dim, "features"},
      {"classifier.c0", &c.classifier.c0, "channels"},
      {"classifier.c1", &c.classifier.c1, "channels"},
      {"classifier.c2", &c.classifier.c2, "channels"},
      {"classifier.c3", &c.classifier.c3, "channels"},
      {"classifier.feature_dim", &c.classifier.feature_dim, "features"},
      {"train.seed", &c.train_seed, "seed"},
      {"train.classifier.epochs", &c.train_classifier.epochs, "epochs"},
      {"train.classifier.batch", &c.train_classifier.batch_size, "images"},
      {"train.classifier.lr", &c.train_classifier.lr, "step size"},
      {"train.vae.epochs", &c.train_vae.epochs, "epochs"},
      {"train.vae.batch", &c.train_vae.batch_size, "images"},
      {"train.vae.lr", &c.train_vae.lr, "step size"},
      {"train.vae.kl_weight", &c.train_vae.kl_weight, "weight"},
      {"train.diffusion.epochs", &c.train_diffusion.epochs, "epochs"},
      {"train.diffusion.batch", &c.train_diffusion.batch_size, "latents"},
      {"train.diffusion.lr", &c.train_diffusion.lr, "step size"},
      {"schedule.T1", &c.schedule_T1, "steps"},
      {"schedule.beta_start", &c.beta_start, "variance"},
      {"schedule.beta_end", &c.beta_end, "variance"},
      {"schedule.S", &c.sampler_steps, "steps"},
      {"mask.layer", &c.explain.layer, "layer name"},
      {"mask.xi", &c.explain.xi, "threshold"},
      {"mask.label", &c.explain.mask_label, "class (-1 = predicted)"},
      {"preservation.steps", &c.explain.preservation.steps, "steps"},
      {"preservation.lr", &c.explain.preservation.lr, "step size"},
      {"preservation.p", &c.explain.preservation.p, "norm order"},
      {"attack.T2", &c.explain.attack.T2, "iterations"},
      {"attack.tau", &c.explain.attack.sampler.tau, "sampler steps"},
      {"attack.eta", &c.explain.attack.sampler.eta, "noise scale"},
      {"attack.lr", &c.explain.attack.lr, "step size"},
      {"attack.beta1", &c.explain.attack.beta1, "decay"},
      {"attack.beta2", &c.explain.attack.beta2, "decay"},
      {"attack.early_stop", &c.explain.attack.early_stop, "flag"},
      {"attack.fixed_noise", &c.explain.attack.fixed_noise, "flag"},
      {"attack.snapshot_every", &c.explain.attack.snapshot_every, "iterations"},
      {"metrics.mnac_beta", &c.mnac_beta, "probability"},
      {"metrics.group_fraction", &c.group_fraction, "fraction of pixels"},
      {"metrics.split_seed", &c.split_seed, "seed"},
      {"metrics.extractor", &c.extractor, "name"},
      {"eval.fidelity_per_class", &c.fidelity_per_class, "samples"},
      {"run.seed", &c.seed, "seed"},
      {"run.out", &c.out, "path"},
  };
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline void assign_field(const Field& f, const std::string& text) {
  const auto bad = [&](const char* type) {
    return ConfigError("config key '" + f.key + "' expects " + type + ", got '" + text + "'");
  };
  std::visit(
      [&](auto* p) {
        using P = std::remove_pointer_t<decltype(p)>;
        std::size_t used = 0;
        try {
          if constexpr (std::is_same_v<P, int>) {
            *p = std::stoi(text, &used);
          } else if constexpr (std::is_same_v<P, std::uint64_t>) {
            if (!text.empty() && text[0] == '-') throw bad("a nonnegative integer");
            *p = std::stoull(text, &used);
          } else if constexpr (std::is_same_v<P, double>) {
            *p = std::stod(text, &used);
          } else if constexpr (std::is_same_v<P, bool>) {
            if (text == "true" || text == "1") *p = true;
            else if (text == "false" || text == "0") *p = false;
            else throw bad("true or false");
            used = text.size();
          } else {
            *p = text;
            used = text.size();
          }
        } catch (const ConfigError&) {
          throw;
        } catch (const std::exception&) {
          throw bad(std::is_same_v<P, double> ? "a real number" : "an integer");
        }
        if (used != text.size()) throw bad("a single value");
      },
      f.ref);
}

inline std::string field_text(const Field& f) {
  return std::visit(
      [](auto* p) -> std::string {
        using P = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<P, double>) return kv_format(*p);
        else if constexpr (std::is_same_v<P, bool>) return *p ? "true" : "false";
        else if constexpr (std::is_same_v<P, std::string>) return *p;
        else return std::to_string(*p);
      },
      f.ref);
}

}  // namespace detail

// Applies `key = value` assignments (file lines or CLI overrides).
inline void apply_config_text(ExperimentConfig& c, const std::string& text, const std::string& origin = "config") {
  auto fields = detail::config_fields(c);
  std::istringstream is(text);
  std::string line;
  std::set<std::string> seen;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line = line.substr(0, h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key " + key);
    auto it = std::find_if(fields.begin(), fields.end(), [&](const detail::Field& f) { return f.key == key; });
    if (it == fields.end()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
    detail::assign_field(*it, value);
  }
  c.sync();
}

inline void validate_config(const ExperimentConfig& c) {
  if (c.dataset.num_classes < 2 || c.dataset.num_classes > 4) throw ConfigError("dataset.classes must be 2..4");
  if (c.dataset.image_size % VaeModel<float>::kFactor) throw ConfigError("dataset.image_size must be a multiple of 8");
  if (!(c.explain.xi >= 0.0 && c.explain.xi < 1.0)) throw ConfigError("mask.xi must lie in [0, 1)");
  if (c.explain.preservation.steps < 1) throw ConfigError("preservation.steps must be >= 1");
  if (!(c.explain.preservation.p > 0.0)) throw ConfigError("preservation.p must be positive");
  if (c.explain.attack.T2 < 1) throw ConfigError("attack.T2 must be >= 1");
  if (c.explain.attack.sampler.tau < 0 || c.explain.attack.sampler.tau > c.sampler_steps)
    throw ConfigError("attack.tau must lie in [0, schedule.S]");
  if (!(c.mnac_beta > 0.0 && c.mnac_beta < 1.0)) throw ConfigError("metrics.mnac_beta must lie in (0, 1)");
  if (!(c.group_fraction > 0.0 && c.group_fraction <= 1.0)) throw ConfigError("metrics.group_fraction must lie in (0, 1]");
  if (c.extractor != "classifier_penultimate") throw ConfigError("unknown metrics.extractor '" + c.extractor + "'");
  ClassifierModel<float>::layer_index(c.explain.layer);
  (void)c.schedule();
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  ExperimentConfig c;
  apply_config_text(c, ss.str(), path.string());
  return c;
}

// Effective configuration with units, one key per line, sorted.
inline std::string serialize_config(const ExperimentConfig& cfg, bool with_units = true, bool with_out = true) {
  ExperimentConfig c = cfg;
  auto fields = detail::config_fields(c);
  std::map<std::string, std::pair<std::string, std::string>> sorted;
  for (const auto& f : fields)
    if (with_out || f.key != "run.out") sorted[f.key] = {detail::field_text(f), f.unit};
  std::ostringstream os;
  for (const auto& [k, vu] : sorted) {
    os << k << " = " << vu.first;
    if (with_units) os << "  # " << vu.second;
    os << '\n';
  }
  return os.str();
}

inline std::string config_hash(const ExperimentConfig& c) {
  const std::uint64_t h = detail::fnv1a(serialize_config(c, false, false));
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// runs/<hash>/{checkpoints, masks, preservation, ce, reports}
struct RunLayout {
  std::filesystem::path root;
  std::filesystem::path checkpoints() const { return root / "checkpoints"; }
  std::filesystem::path masks() const { return root / "masks"; }
  std::filesystem::path preservation() const { return root / "preservation"; }
  std::filesystem::path ce() const { return root / "ce"; }
  std::filesystem::path reports() const { return root / "reports"; }
  std::filesystem::path data() const { return root / "data"; }

  void create() const {
    for (const auto& p : {checkpoints(), masks(), preservation(), ce(), reports(), data()})
      std::filesystem::create_directories(p);
  }
};

inline RunLayout run_layout(const ExperimentConfig& c) { return {std::filesystem::path(c.out) / config_hash(c)}; }

}  // namespace eced

// SPDX-License-Identifier: Apache-2.0
#pragma once

// Per-sample explanation records, batch evaluation into the metric table, and
// latent-channel visualization.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "eced/metrics.hpp"
#include "eced/models/checkpoint.hpp"
#include "eced/models/classifier.hpp"
#include "eced/png_io.hpp"

namespace eced {

// What `explain` leaves behind for `evaluate`. Images stay real-valued.
struct SampleRecord {
  int sample = -1;
  int y_f = -1, y_cf = -1;
  double xi = 0.0;
  std::string config_hash;
  ImageTensor<double> factual, counterfactual, preserved;
  BinaryMask mask;
  std::vector<double> loss_trace, target_prob;
  std::optional<int> flip_epoch;
  int final_label = -1;
};

inline void save_record(const SampleRecord& r, const std::filesystem::path& path) {
  CheckpointBlob<double> blob;
  blob.kind = ComponentKind::Record;
  blob.record = {{"sample", std::to_string(r.sample)},
                 {"y_f", std::to_string(r.y_f)},
                 {"y_cf", std::to_string(r.y_cf)},
                 {"xi", kv_format(r.xi)},
                 {"config_hash", r.config_hash},
                 {"flip_epoch", std::to_string(r.flip_epoch.value_or(-1))},
                 {"final_label", std::to_string(r.final_label)}};
  auto vec = [](const std::vector<double>& v) { return Tensor<double>({static_cast<int>(v.size())}, v); };
  blob.tensors.emplace_back("factual", r.factual.tensor());
  blob.tensors.emplace_back("counterfactual", r.counterfactual.tensor());
  blob.tensors.emplace_back("preserved", r.preserved.tensor());
  blob.tensors.emplace_back("mask", Tensor<double>({r.mask.height, r.mask.width},
                                                   std::vector<double>(r.mask.data.begin(), r.mask.data.end())));
  blob.tensors.emplace_back("loss_trace", vec(r.loss_trace));
  blob.tensors.emplace_back("target_prob", vec(r.target_prob));
  write_checkpoint(path, blob);
}

inline SampleRecord load_record(const std::filesystem::path& path) {
  const auto blob = read_checkpoint<double>(path, ComponentKind::Record);
  SampleRecord r;
  r.sample = kv_int(blob.record, "sample");
  r.y_f = kv_int(blob.record, "y_f");
  r.y_cf = kv_int(blob.record, "y_cf");
  r.xi = kv_double(blob.record, "xi");
  r.config_hash = blob.record.at("config_hash");
  if (const int f = kv_int(blob.record, "flip_epoch"); f >= 0) r.flip_epoch = f;
  r.final_label = kv_int(blob.record, "final_label");
  r.factual = ImageTensor<double>(blob.tensor("factual"));
  r.counterfactual = ImageTensor<double>(blob.tensor("counterfactual"));
  r.preserved = ImageTensor<double>(blob.tensor("preserved"));
  const auto& m = blob.tensor("mask");
  r.mask = BinaryMask(m.dim(0), m.dim(1));
  for (std::size_t i = 0; i < m.size(); ++i) r.mask.data[i] = m[i] != 0.0;
  const auto lt = blob.tensor("loss_trace").values(), tp = blob.tensor("target_prob").values();
  r.loss_trace.assign(lt.begin(), lt.end());
  r.target_prob.assign(tp.begin(), tp.end());
  return r;
}

// All *.rec files under dir, in file-name order.
inline std::vector<SampleRecord> load_records(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DomainError("no results directory " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.path().extension() == ".rec") files.push_back(e.path());
  if (files.empty()) throw DomainError("no explanation records in " + dir.string() + "; run the explain subcommand first");
  std::sort(files.begin(), files.end());
  std::vector<SampleRecord> out;
  for (const auto& f : files) out.push_back(load_record(f));
  return out;
}

struct MetricReport {
  int n = 0;
  std::string config_hash;
  double l1 = 0, l15 = 0, l2 = 0;
  double fid = 0, sfid = std::numeric_limits<double>::quiet_NaN();
  double s3 = 0, cout = 0, fr = 0;
  MeanCi bg_mse;            // counterfactual vs factual, background pixels
  MeanCi preserved_bg_mse;  // preserved reconstruction vs factual
  std::vector<MeanCi> convergence;  // CE loss per attack iteration
};

// Metric table over a set of records. Records from different configurations
// are refused unless `force` is set.
template <typename T>
MetricReport evaluate_records(const std::vector<SampleRecord>& recs, const ClassifierModel<T>& cls,
                              double group_fraction, std::uint64_t split_seed, bool force = false) {
  if (recs.empty()) throw DomainError("evaluate: no records");
  MetricReport r;
  r.n = static_cast<int>(recs.size());
  r.config_hash = recs[0].config_hash;
  for (const auto& s : recs)
    if (s.config_hash != r.config_hash) {
      if (!force)
        throw ConfigError("evaluate: records come from configs " + r.config_hash + " and " + s.config_hash +
                          "; pass --force to mix them");
      r.config_hash = "mixed";
    }
  std::vector<ImagePair<double>> pairs, pres;
  std::vector<BinaryMask> masks;
  for (const auto& s : recs) {
    pairs.emplace_back(s.factual, s.counterfactual);
    pres.emplace_back(s.factual, s.preserved);
    masks.push_back(s.mask);
  }
  r.l1 = lp_distance(pairs, 1.0);
  r.l15 = lp_distance(pairs, 1.5);
  r.l2 = lp_distance(pairs, 2.0);

  auto feats = [&](const ImageTensor<double>& x) {
    const Tensor<T> f = cls.features(x.tensor().template cast<T>().reshaped({1, kImageChannels, x.height(), x.width()}));
    return FeatureVector(f.values().begin(), f.values().end());
  };
  std::vector<FeatureVector> ff, fcf;
  std::vector<std::pair<FeatureVector, FeatureVector>> emb;
  for (const auto& [f, cf] : pairs) {
    ff.push_back(feats(f));
    fcf.push_back(feats(cf));
    emb.emplace_back(ff.back(), fcf.back());
  }
  r.fid = fid(ff, fcf).value;
  if (ff.size() >= 4) r.sfid = sfid(ff, fcf, split_seed).value;
  r.s3 = s3_similarity(emb).mean;

  const ProbabilityFn prob = [&](const Tensor<double>& b) { return cls.probabilities(b.template cast<T>()); };
  std::vector<std::vector<double>> cf_probs;
  std::vector<int> targets;
  double cout_sum = 0;
  for (const auto& s : recs) {
    cout_sum += cout_score(s.factual, s.counterfactual, s.y_f, s.y_cf, prob, group_fraction).cout;
    cf_probs.push_back(prob(s.counterfactual.batch())[0]);
    targets.push_back(s.y_cf);
  }
  r.cout = cout_sum / r.n;
  r.fr = flip_ratio(cf_probs, targets);
  r.bg_mse = background_mse(pairs, masks);
  r.preserved_bg_mse = background_mse(pres, masks);

  std::size_t epochs = 0;
  for (const auto& s : recs) epochs = std::max(epochs, s.loss_trace.size());
  for (std::size_t k = 0; k < epochs; ++k) {
    std::vector<double> v;
    for (const auto& s : recs)
      if (k < s.loss_trace.size()) v.push_back(s.loss_trace[k]);
    r.convergence.push_back(mean_ci95(v));
  }
  return r;
}

inline void write_metric_table(const MetricReport& r, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << "# config_hash=" << r.config_hash << "\n";
  os << "n,l1,l1.5,l2,FID,sFID,S3,COUT,FR,bg_mse,bg_mse_ci95,preserved_bg_mse\n";
  os << r.n << ',' << kv_format(r.l1) << ',' << kv_format(r.l15) << ',' << kv_format(r.l2) << ',' << kv_format(r.fid)
     << ',' << kv_format(r.sfid) << ',' << kv_format(r.s3) << ',' << kv_format(r.cout) << ',' << kv_format(r.fr) << ','
     << kv_format(r.bg_mse.mean) << ',' << kv_format(r.bg_mse.ci95) << ',' << kv_format(r.preserved_bg_mse.mean)
     << "\n";
  if (!os) throw IoError("failed writing " + path.string());
}

inline void write_convergence_csv(const MetricReport& r, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << "# config_hash=" << r.config_hash << "\n";
  os << "epoch,mean_loss,ci95,n\n";
  for (std::size_t k = 0; k < r.convergence.size(); ++k)
    os << k << ',' << kv_format(r.convergence[k].mean) << ',' << kv_format(r.convergence[k].ci95) << ','
       << r.convergence[k].n << "\n";
  if (!os) throw IoError("failed writing " + path.string());
}

// Trailing moving average; the first window-1 points average what is available.
inline std::vector<double> moving_average(const std::vector<double>& v, int window) {
  if (window < 1) throw DomainError("moving_average: window must be >= 1");
  std::vector<double> out;
  double s = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    s += v[i];
    if (i >= static_cast<std::size_t>(window)) s -= v[i - static_cast<std::size_t>(window)];
    out.push_back(s / static_cast<double>(std::min<std::size_t>(i + 1, static_cast<std::size_t>(window))));
  }
  return out;
}

// Four grayscale panels, one per latent channel, each min-max normalized and
// upscaled by `scale`. A constant channel renders mid-gray.
template <typename T>
RgbPixels latent_grid(const LatentTensor<T>& z, int scale = 8) {
  if (scale < 1) throw DomainError("latent_grid: scale must be >= 1");
  const int h = z.height(), w = z.width();
  std::vector<RgbPixels> panels;
  for (int c = 0; c < kLatentChannels; ++c) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        lo = std::min<double>(lo, z.at(y, x, c));
        hi = std::max<double>(hi, z.at(y, x, c));
      }
    std::vector<double> v;
    for (int y = 0; y < h * scale; ++y)
      for (int x = 0; x < w * scale; ++x) {
        const double a = z.at(y / scale, x / scale, c);
        v.push_back(hi > lo ? (a - lo) / (hi - lo) : 0.5);
      }
    panels.push_back(gray_pixels(h * scale, w * scale, v));
  }
  return hstack(panels);
}

}  // namespace eced

// SPDX-License-Identifier: Apache-2.0
#pragma once

// Checkpoint file layout (little-endian):
//   16 bytes  magic "ECED-CHECKPOINT\0"
//   u32       format version
//   u32       component kind
//   u32       scalar size in bytes (4 = float32, 8 = float64)
//   u64       training seed
//   u32 + []  record text (architecture and training config echo, key=value lines)
//   u32       tensor count, then per tensor:
//               u32 + [] name, u32 rank, i32 dims[rank], raw scalars
//   u64       FNV-1a checksum of every preceding byte

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "eced/kv.hpp"
#include "eced/models/classifier.hpp"
#include "eced/models/denoiser.hpp"
#include "eced/models/vae.hpp"

namespace eced {

inline constexpr char kCheckpointMagic[16] = {'E', 'C', 'E', 'D', '-', 'C', 'H', 'E',
                                              'C', 'K', 'P', 'O', 'I', 'N', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class ComponentKind : std::uint32_t { Vae = 1, Denoiser = 2, Classifier = 3, Embedder = 4, Preservation = 5, Record = 6 };

inline std::string kind_name(ComponentKind k) {
  switch (k) {
    case ComponentKind::Vae: return "vae";
    case ComponentKind::Denoiser: return "denoiser";
    case ComponentKind::Classifier: return "classifier";
    case ComponentKind::Embedder: return "embedder";
    case ComponentKind::Preservation: return "preservation";
    case ComponentKind::Record: return "record";
  }
  return "unknown";
}

template <typename T>
struct CheckpointBlob {
  ComponentKind kind = ComponentKind::Vae;
  std::uint64_t seed = 0;
  KeyValues record;
  std::vector<std::pair<std::string, Tensor<T>>> tensors;

  const Tensor<T>& tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw CheckpointError("checkpoint has no tensor '" + name + "'");
  }
};

namespace detail {

inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

class ByteWriter {
 public:
  template <typename U>
  void pod(U v) {
    buf_.append(reinterpret_cast<const char*>(&v), sizeof(U));
  }
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  void str(const std::string& s) {
    pod<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    buf_.append(s);
  }
  std::string& buffer() { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& b, std::size_t end) : buf_(b), end_(end) {}
  template <typename U>
  U pod() {
    U v;
    need(sizeof(U));
    std::memcpy(&v, buf_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  void bytes(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::string str() {
    auto n = pod<std::uint32_t>();
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw CheckpointError("checkpoint truncated or corrupt");
  }
  const std::string& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <typename T>
void write_checkpoint(const std::filesystem::path& path, const CheckpointBlob<T>& blob) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.pod<std::uint32_t>(kCheckpointVersion);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(blob.kind));
  w.pod<std::uint32_t>(sizeof(T));
  w.pod<std::uint64_t>(blob.seed);
  w.str(kv_serialize(blob.record));
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(blob.tensors.size()));
  for (const auto& [name, t] : blob.tensors) {
    w.str(name);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) w.pod<std::int32_t>(d);
    w.bytes(t.data(), t.size() * sizeof(T));
  }
  const std::uint64_t sum = detail::fnv1a(w.buffer());
  w.pod<std::uint64_t>(sum);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint " + path.string());
  os.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
  if (!os) throw IoError("failed writing checkpoint " + path.string());
}

template <typename T>
CheckpointBlob<T> read_checkpoint(const std::filesystem::path& path, ComponentKind expected) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  std::string buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (buf.size() < sizeof(kCheckpointMagic) + 8 ||
      std::memcmp(buf.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw CheckpointError(path.string() + " is not a checkpoint (bad magic or truncated)");
  const std::size_t body = buf.size() - sizeof(std::uint64_t);
  std::uint64_t stored;
  std::memcpy(&stored, buf.data() + body, sizeof(stored));
  detail::ByteReader r(buf, body);
  char magic[16];
  r.bytes(magic, sizeof(magic));
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint format version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  if (detail::fnv1a(buf.substr(0, body)) != stored) throw CheckpointError("checkpoint checksum mismatch: " + path.string());
  CheckpointBlob<T> blob;
  blob.kind = static_cast<ComponentKind>(r.pod<std::uint32_t>());
  if (blob.kind != expected)
    throw KindMismatchError("checkpoint holds a " + kind_name(blob.kind) + ", expected " + kind_name(expected));
  const auto scalar = r.pod<std::uint32_t>();
  if (scalar != 4 && scalar != 8) throw CheckpointError("unsupported scalar size " + std::to_string(scalar));
  blob.seed = r.pod<std::uint64_t>();
  blob.record = kv_parse(r.str());
  const auto count = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const auto rank = r.pod<std::uint32_t>();
    if (rank > 8) throw CheckpointError("implausible tensor rank in checkpoint");
    Shape s;
    for (std::uint32_t d = 0; d < rank; ++d) s.push_back(r.pod<std::int32_t>());
    Tensor<T> t(s);
    if (scalar == sizeof(T)) {
      r.bytes(t.data(), t.size() * sizeof(T));
    } else if (scalar == 4) {
      std::vector<float> tmp(t.size());
      r.bytes(tmp.data(), tmp.size() * 4);
      for (std::size_t j = 0; j < tmp.size(); ++j) t[j] = static_cast<T>(tmp[j]);
    } else {
      std::vector<double> tmp(t.size());
      r.bytes(tmp.data(), tmp.size() * 8);
      for (std::size_t j = 0; j < tmp.size(); ++j) t[j] = static_cast<T>(tmp[j]);
    }
    blob.tensors.emplace_back(std::move(name), std::move(t));
  }
  return blob;
}

namespace detail {

template <typename T, typename Model>
void collect_params(Model& m, CheckpointBlob<T>& blob) {
  m.visit("", [&](const std::string& name, Var<T>& v) { blob.tensors.emplace_back(name, v.value()); });
}

template <typename T, typename Model>
void restore_params(Model& m, const CheckpointBlob<T>& blob) {
  m.visit("", [&](const std::string& name, Var<T>& v) {
    const Tensor<T>& t = blob.tensor(name);
    if (t.shape() != v.shape())
      throw CheckpointError("tensor '" + name + "' has shape " + shape_str(t.shape()) + ", model expects " +
                            shape_str(v.shape()));
    v = Var<T>(t, false);
  });
}

inline KeyValues prefixed(const KeyValues& kv, const std::string& prefix) {
  KeyValues out;
  for (const auto& [k, v] : kv) out[prefix + k] = v;
  return out;
}

inline KeyValues strip_prefix(const KeyValues& kv, const std::string& prefix) {
  KeyValues out;
  for (const auto& [k, v] : kv)
    if (k.rfind(prefix, 0) == 0) out[k.substr(prefix.size())] = v;
  return out;
}

}  // namespace detail

// Model-level save/load. `train_echo` records the training configuration.

template <typename T>
void save_checkpoint(const VaeModel<T>& model, const std::filesystem::path& path, std::uint64_t seed,
                     const KeyValues& train_echo = {}) {
  CheckpointBlob<T> blob;
  blob.kind = ComponentKind::Vae;
  blob.seed = seed;
  blob.record = detail::prefixed(model.arch.to_kv(), "arch.");
  for (const auto& [k, v] : detail::prefixed(train_echo, "train.")) blob.record[k] = v;
  VaeModel<T> m = model;
  detail::collect_params(m, blob);
  blob.tensors.emplace_back("latent_scale", Tensor<T>({1}, std::vector<T>{model.latent_scale}));
  write_checkpoint(path, blob);
}

template <typename T>
VaeModel<T> load_vae(const std::filesystem::path& path) {
  auto blob = read_checkpoint<T>(path, ComponentKind::Vae);
  Rng rng(0);
  VaeModel<T> m(VaeArch::from_kv(detail::strip_prefix(blob.record, "arch.")), rng);
  detail::restore_params(m, blob);
  m.set_latent_scale(blob.tensor("latent_scale")[0]);
  return m;
}

template <typename T>
void save_checkpoint(const ClassifierModel<T>& model, const std::filesystem::path& path, std::uint64_t seed,
                     const KeyValues& train_echo = {}) {
  CheckpointBlob<T> blob;
  blob.kind = ComponentKind::Classifier;
  blob.seed = seed;
  blob.record = detail::prefixed(model.arch.to_kv(), "arch.");
  for (const auto& [k, v] : detail::prefixed(train_echo, "train.")) blob.record[k] = v;
  ClassifierModel<T> m = model;
  detail::collect_params(m, blob);
  write_checkpoint(path, blob);
}

template <typename T>
ClassifierModel<T> load_classifier(const std::filesystem::path& path) {
  auto blob = read_checkpoint<T>(path, ComponentKind::Classifier);
  Rng rng(0);
  ClassifierModel<T> m(ClassifierArch::from_kv(detail::strip_prefix(blob.record, "arch.")), rng);
  detail::restore_params(m, blob);
  return m;
}

template <typename T>
void save_checkpoint(const Denoiser<T>& model, const std::filesystem::path& path, std::uint64_t seed,
                     const KeyValues& train_echo = {}) {
  CheckpointBlob<T> blob;
  blob.kind = ComponentKind::Denoiser;
  blob.seed = seed;
  blob.record = detail::prefixed(model.arch.to_kv(), "arch.");
  for (const auto& [k, v] : detail::prefixed(train_echo, "train.")) blob.record[k] = v;
  Denoiser<T> m = model;
  detail::collect_params(m, blob);
  write_checkpoint(path, blob);
}

template <typename T>
Denoiser<T> load_denoiser(const std::filesystem::path& path) {
  auto blob = read_checkpoint<T>(path, ComponentKind::Denoiser);
  Rng rng(0);
  Denoiser<T> m(DenoiserArch::from_kv(detail::strip_prefix(blob.record, "arch.")), rng);
  detail::restore_params(m, blob);
  return m;
}

template <typename T>
void save_checkpoint(const ConditionEmbedder<T>& model, const std::filesystem::path& path, std::uint64_t seed,
                     const KeyValues& train_echo = {}) {
  CheckpointBlob<T> blob;
  blob.kind = ComponentKind::Embedder;
  blob.seed = seed;
  blob.record = detail::prefixed(train_echo, "train.");
  blob.tensors.emplace_back("emb.table", model.table.value());
  write_checkpoint(path, blob);
}

template <typename T>
ConditionEmbedder<T> load_embedder(const std::filesystem::path& path) {
  auto blob = read_checkpoint<T>(path, ComponentKind::Embedder);
  ConditionEmbedder<T> m;
  m.table = Var<T>(blob.tensor("emb.table"), false);
  return m;
}

}  // namespace eced

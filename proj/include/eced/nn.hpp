// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "eced/ops.hpp"
#include "eced/rng.hpp"

namespace eced::nn {

template <typename T>
struct NamedParam {
  std::string name;
  Var<T>* var;
};

template <typename T>
struct Conv2d {
  Var<T> weight;
  Var<T> bias;
  int stride = 1;

  Conv2d() = default;
  Conv2d(int cin, int cout, int k, Rng& rng, int stride_ = 1, double gain = std::sqrt(2.0)) : stride(stride_) {
    const double std = gain / std::sqrt(static_cast<double>(cin * k * k));
    weight = Var<T>(rng.normal_tensor<T>({cout, cin, k, k}, std), true);
    bias = Var<T>(Tensor<T>({cout}), true);
  }
  Var<T> operator()(const Var<T>& x) const { return ops::conv2d(x, weight, bias, stride); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight);
    f(prefix + ".bias", bias);
  }
};

template <typename T>
struct Linear {
  Var<T> weight;
  Var<T> bias;

  Linear() = default;
  Linear(int in, int out, Rng& rng, double gain = 1.0) {
    const double std = gain / std::sqrt(static_cast<double>(in));
    weight = Var<T>(rng.normal_tensor<T>({out, in}, std), true);
    bias = Var<T>(Tensor<T>({out}), true);
  }
  Var<T> operator()(const Var<T>& x) const { return ops::linear(x, weight, bias); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight);
    f(prefix + ".bias", bias);
  }
};

// Collects (name, pointer) pairs from any model exposing visit(prefix, f).
template <typename T, typename Model>
std::vector<NamedParam<T>> named_parameters(Model& m) {
  std::vector<NamedParam<T>> out;
  m.visit("", [&](const std::string& name, Var<T>& v) { out.push_back({name, &v}); });
  return out;
}

template <typename T, typename Model>
std::vector<Var<T>> parameters(Model& m) {
  std::vector<Var<T>> out;
  m.visit("", [&](const std::string&, Var<T>& v) { out.push_back(v); });
  return out;
}

template <typename T, typename Model>
void set_trainable(Model& m, bool trainable) {
  m.visit("", [&](const std::string&, Var<T>& v) {
    v.set_requires_grad(trainable);
    v.zero_grad();
  });
}

// Deep copy: parameters get fresh storage so the copy can be optimized independently.
template <typename T, typename Model>
Model deep_copy(const Model& m) {
  Model copy = m;
  copy.visit("", [](const std::string&, Var<T>& v) { v = Var<T>(v.value(), v.requires_grad()); });
  return copy;
}

template <typename T, typename Model>
std::size_t parameter_count(Model& m) {
  std::size_t n = 0;
  m.visit("", [&](const std::string&, Var<T>& v) { n += v.size(); });
  return n;
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled (AdamW)
};

// Adam with bias correction on the global step count. Coordinates whose gradient
// is always zero keep zero moments and are left bit-identical.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Var<T>> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(Tensor<T>::like(p.value()));
      v_.emplace_back(Tensor<T>::like(p.value()));
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Var<T>& p = params_[i];
      const Tensor<T>& g = p.grad();
      Tensor<T>& w = p.mutable_value();
      Tensor<T>& m = m_[i];
      Tensor<T>& v = v_[i];
      if (cfg_.weight_decay != 0.0 && cfg_.lr != 0.0)
        for (std::size_t j = 0; j < w.size(); ++j) w[j] -= static_cast<T>(cfg_.lr * cfg_.weight_decay) * w[j];
      if (g.empty()) continue;
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g[j];
        const double mj = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
        const double vj = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
        m[j] = static_cast<T>(mj);
        v[j] = static_cast<T>(vj);
        const double upd = cfg_.lr * (mj / bc1) / (std::sqrt(vj / bc2) + cfg_.eps);
        w[j] = static_cast<T>(w[j] - upd);
      }
    }
  }

  long long steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  std::vector<Var<T>> params_;
  AdamConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  long long t_ = 0;
};

}  // namespace eced::nn

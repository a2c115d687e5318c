#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dcedit/autograd.hpp"

namespace dcedit::nn {

using Rng = std::mt19937_64;

using NamedParams = std::vector<std::pair<std::string, ag::Var*>>;

inline Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

inline Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

struct Conv2d {
  ag::Var weight;
  ag::Var bias;  // undefined when bias-free
  int stride = 1;
  int pad = 1;

  Conv2d() = default;
  Conv2d(int in, int out, int kernel, int stride_, int pad_, Rng& rng, bool with_bias = true)
      : stride(stride_), pad(pad_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel * kernel));
    weight = ag::parameter(uniform_tensor({out, in, kernel, kernel}, bound, rng));
    if (with_bias) bias = ag::parameter(uniform_tensor({out}, bound, rng));
  }

  ag::Var operator()(const ag::Var& x) const { return ag::conv2d(x, weight, bias, stride, pad); }

  int out_channels() const { return weight.dim(0); }

  void collect(NamedParams& out, const std::string& prefix) {
    out.emplace_back(prefix + ".weight", &weight);
    if (bias.defined()) out.emplace_back(prefix + ".bias", &bias);
  }
};

struct Linear {
  ag::Var weight;
  ag::Var bias;

  Linear() = default;
  Linear(int in, int out, Rng& rng, bool with_bias = true) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = ag::parameter(uniform_tensor({out, in}, bound, rng));
    if (with_bias) bias = ag::parameter(uniform_tensor({out}, bound, rng));
  }

  ag::Var operator()(const ag::Var& x) const { return ag::linear(x, weight, bias); }

  void collect(NamedParams& out, const std::string& prefix) {
    out.emplace_back(prefix + ".weight", &weight);
    if (bias.defined()) out.emplace_back(prefix + ".bias", &bias);
  }
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<ag::Var*> params, AdamConfig config) : params_(std::move(params)), config_(config) {
    for (ag::Var* p : params_) {
      m_.emplace_back(p->shape(), 0.0);
      v_.emplace_back(p->shape(), 0.0);
    }
  }

  void zero_grad() {
    for (ag::Var* p : params_) p->zero_grad();
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const Tensor& g = params_[i]->grad();
      if (g.empty()) continue;
      Tensor& w = params_[i]->mutable_value();
      for (std::size_t j = 0; j < w.size(); ++j) {
        m_[i][j] = config_.beta1 * m_[i][j] + (1.0 - config_.beta1) * g[j];
        v_[i][j] = config_.beta2 * v_[i][j] + (1.0 - config_.beta2) * g[j] * g[j];
        w[j] -= config_.lr * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + config_.eps);
      }
    }
  }

  const AdamConfig& config() const { return config_; }
  std::int64_t steps() const { return t_; }

 private:
  std::vector<ag::Var*> params_;
  AdamConfig config_;
  std::vector<Tensor> m_, v_;
  std::int64_t t_ = 0;
};

inline std::vector<ag::Var*> param_ptrs(const NamedParams& named) {
  std::vector<ag::Var*> out;
  out.reserve(named.size());
  for (const auto& [_, p] : named) out.push_back(p);
  return out;
}

inline std::map<std::string, Tensor> export_params(const NamedParams& named) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, p] : named) out.emplace(name, p->value());
  return out;
}

inline void import_params(const NamedParams& named, const std::map<std::string, Tensor>& tensors) {
  for (const auto& [name, p] : named) {
    auto it = tensors.find(name);
    require(it != tensors.end(), ErrorCode::io, "checkpoint is missing tensor '" + name + "'");
    require(it->second.shape() == p->shape(), ErrorCode::shape_mismatch,
            "checkpoint tensor '" + name + "' has shape " + shape_str(it->second.shape()) + ", expected " +
                shape_str(p->shape()));
    p->mutable_value() = it->second;
  }
}

}  // namespace dcedit::nn

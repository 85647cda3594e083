#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "defect_forge/random.hpp"
#include "defect_forge/tensor.hpp"

namespace defect_forge {

struct NamedParam {
  std::string name;
  Tensor* tensor = nullptr;
};

// Ordered, named view over a model's trainable tensors.
class ParamList {
 public:
  void add(std::string name, Tensor& t) { items_.push_back({std::move(name), &t}); }
  void add(const std::string& prefix, ConvKernel& k) {
    add(prefix + ".weight", k.weights);
    add(prefix + ".bias", k.bias);
  }

  const std::vector<NamedParam>& items() const { return items_; }
  std::vector<Tensor*> tensors() const {
    std::vector<Tensor*> out;
    for (const auto& p : items_) out.push_back(p.tensor);
    return out;
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : items_) n += p.tensor->size();
    return n;
  }

  void enable_grad() const {
    for (const auto& p : items_) p.tensor->enable_grad();
  }
  void zero_grad() const {
    for (const auto& p : items_) p.tensor->zero_grad();
  }
  void scale_grad(double s) const {
    for (const auto& p : items_)
      for (double& g : p.tensor->grad()) g *= s;
  }
  double grad_norm() const {
    double s = 0.0;
    for (const auto& p : items_)
      for (double g : p.tensor->grad()) s += g * g;
    return std::sqrt(s);
  }
  void step(double lr) const {
    const auto ts = tensors();
    sgd_step(ts, lr);
  }

 private:
  std::vector<NamedParam> items_;
};

inline void accumulate_grad(Tensor& param, const Tensor& g) {
  param.enable_grad();
  auto dst = param.grad();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

inline void accumulate_grads(ConvKernel& k, const ConvGrads& g) {
  accumulate_grad(k.weights, g.grad_weights);
  accumulate_grad(k.bias, g.grad_bias);
}

// He-normal weights, zero bias.
inline void he_init(ConvKernel& k, Rng& rng, double gain = 1.0) {
  const double fan_in = static_cast<double>(k.in_channels() * k.kh() * k.kw());
  const double sd = gain * std::sqrt(2.0 / fan_in);
  for (double& w : k.weights.data()) w = sd * rng.normal();
  k.bias.fill(0.0);
}

inline void he_init(Tensor& weights, Tensor& bias, Rng& rng, double gain = 1.0) {
  const double sd = gain * std::sqrt(2.0 / static_cast<double>(weights.dim(1)));
  for (double& w : weights.data()) w = sd * rng.normal();
  bias.fill(0.0);
}

}  // namespace defect_forge

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>

#include "defect_forge/random.hpp"
#include "defect_forge/tensor.hpp"

namespace testing_support {

using defect_forge::ConvKernel;
using defect_forge::Rng;
using defect_forge::Shape;
using defect_forge::Tensor;

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

inline ConvKernel random_kernel(std::size_t oc, std::size_t ic, std::size_t k, Rng& rng, std::size_t stride = 1,
                                std::size_t padding = 0) {
  ConvKernel kern(oc, ic, k, k, stride, padding);
  kern.weights = random_tensor(kern.weights.shape(), rng, -0.5, 0.5);
  kern.bias = random_tensor(kern.bias.shape(), rng, -0.5, 0.5);
  return kern;
}

inline double weighted_sum(const Tensor& out, const Tensor& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * w[i];
  return s;
}

// Relative error with a small absolute floor so that components that are
// zero analytically and numerically do not divide by zero.
inline double rel_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheck {
  std::size_t count = 0;
  std::size_t above_tight = 0;
  std::size_t above_loose = 0;
  double worst = 0.0;
  double tight = 1e-4, loose = 1e-2;

  void add(double analytic, double numeric) {
    const double e = rel_error(analytic, numeric);
    ++count;
    worst = std::max(worst, e);
    if (e >= tight) ++above_tight;
    if (e >= loose) ++above_loose;
  }
  void merge(const GradCheck& o) {
    count += o.count;
    above_tight += o.above_tight;
    above_loose += o.above_loose;
    worst = std::max(worst, o.worst);
  }
  // >= 99% of components under `tight`, all under `loose`.
  bool ok() const {
    return count > 0 && above_loose == 0 &&
           static_cast<double>(above_tight) <= 0.01 * static_cast<double>(count);
  }
  std::string summary() const {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%zu components, %zu >= %.0e, %zu >= %.0e, worst %.3e", count,
                  above_tight, tight, above_loose, loose, worst);
    return buf;
  }
};

inline double central_difference(const std::function<double()>& loss, double& x, double h = 1e-5) {
  const double saved = x;
  x = saved + h;
  const double up = loss();
  x = saved - h;
  const double down = loss();
  x = saved;
  return (up - down) / (2.0 * h);
}

// Compares `analytic` against central differences of `loss` in every
// component of `param`.
inline void check_tensor(GradCheck& gc, Tensor& param, const Tensor& analytic, const std::function<double()>& loss,
                         double h = 1e-5) {
  for (std::size_t i = 0; i < param.size(); ++i) gc.add(analytic[i], central_difference(loss, param[i], h));
}

inline void check_tensor(GradCheck& gc, Tensor& param, std::span<const double> analytic,
                         const std::function<double()>& loss, double h = 1e-5) {
  for (std::size_t i = 0; i < param.size(); ++i) gc.add(analytic[i], central_difference(loss, param[i], h));
}

}  // namespace testing_support

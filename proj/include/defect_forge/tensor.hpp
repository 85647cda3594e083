#pragma once

// Dense float64 tensors and the forward/backward ops shared by both stages.
// Layout is row-major NCHW everywhere.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "defect_forge/error.hpp"

namespace defect_forge {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_)) {
      throw Error(ErrorKind::ShapeMismatch, "data length " + std::to_string(data_.size()) +
                                                " does not match shape " + shape_str(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& values() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double& at(std::size_t c, std::size_t h, std::size_t w) {
    return data_[(c * shape_[1] + h) * shape_[2] + w];
  }
  double at(std::size_t c, std::size_t h, std::size_t w) const {
    return data_[(c * shape_[1] + h) * shape_[2] + w];
  }
  double& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  // Gradient buffer, allocated on demand with the same shape as the data.
  bool has_grad() const noexcept { return !grad_.empty() || data_.empty(); }
  void enable_grad() {
    if (grad_.size() != data_.size()) grad_.assign(data_.size(), 0.0);
  }
  void zero_grad() { std::fill(grad_.begin(), grad_.end(), 0.0); }
  std::span<double> grad() noexcept { return grad_; }
  std::span<const double> grad() const noexcept { return grad_; }

  Tensor reshaped(Shape shape) const {
    Tensor out(std::move(shape), data_);
    return out;
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

 private:
  Shape shape_;
  std::vector<double> data_;
  std::vector<double> grad_;
};

inline void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw Error(ErrorKind::ShapeMismatch, std::string(what) + " expects rank " +
                                              std::to_string(rank) + ", got " + shape_str(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorKind::ShapeMismatch,
                std::string(what) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// --------------------------------------------------------------------------
// Convolution

struct ConvKernel {
  Tensor weights;  // [out_channels, in_channels, kh, kw]
  Tensor bias;     // [out_channels]
  std::size_t stride = 1;
  std::size_t padding = 0;

  ConvKernel() = default;
  ConvKernel(std::size_t out_c, std::size_t in_c, std::size_t kh, std::size_t kw,
             std::size_t stride_ = 1, std::size_t padding_ = 0)
      : weights({out_c, in_c, kh, kw}), bias({out_c}), stride(stride_), padding(padding_) {}

  std::size_t out_channels() const { return weights.dim(0); }
  std::size_t in_channels() const { return weights.dim(1); }
  std::size_t kh() const { return weights.dim(2); }
  std::size_t kw() const { return weights.dim(3); }

  void validate() const {
    require_rank(weights, 4, "conv kernel weights");
    if (kh() < 1 || kw() < 1) throw Error(ErrorKind::InvalidArgument, "kernel extent must be >= 1");
    if (stride < 1) throw Error(ErrorKind::InvalidArgument, "stride must be >= 1");
    if (bias.shape() != Shape{out_channels()}) {
      throw Error(ErrorKind::ShapeMismatch, "bias " + shape_str(bias.shape()) + " vs weights " +
                                                shape_str(weights.shape()));
    }
  }

  void enable_grad() {
    weights.enable_grad();
    bias.enable_grad();
  }
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride,
                                   std::size_t padding) {
  const std::size_t padded = in + 2 * padding;
  if (padded < k) return 0;
  return (padded - k) / stride + 1;
}

inline Shape conv2d_output_shape(const Shape& input, const ConvKernel& kernel) {
  return {input[0], kernel.out_channels(),
          conv_out_extent(input[2], kernel.kh(), kernel.stride, kernel.padding),
          conv_out_extent(input[3], kernel.kw(), kernel.stride, kernel.padding)};
}

namespace detail {

inline void check_conv_args(const Tensor& input, const ConvKernel& kernel) {
  kernel.validate();
  require_rank(input, 4, "conv2d input");
  if (input.dim(1) != kernel.in_channels()) {
    throw Error(ErrorKind::ShapeMismatch, "conv2d input " + shape_str(input.shape()) +
                                              " vs kernel " + shape_str(kernel.weights.shape()));
  }
  const Shape out = conv2d_output_shape(input.shape(), kernel);
  if (out[2] == 0 || out[3] == 0) {
    throw Error(ErrorKind::ShapeMismatch, "conv2d input " + shape_str(input.shape()) +
                                              " too small for kernel " +
                                              shape_str(kernel.weights.shape()));
  }
}

// Output index range [lo, hi) whose input coordinate o*stride - pad + k lies in [0, in).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t in,
                                                       std::size_t k, std::size_t stride,
                                                       std::size_t pad) {
  const std::size_t lo = pad > k ? (pad - k + stride - 1) / stride : 0;
  std::size_t hi = in + pad > k ? (in + pad - k + stride - 1) / stride : 0;
  hi = std::min(hi, out);
  return {std::min(lo, hi), hi};
}

}  // namespace detail

// Cross-correlation. Each output accumulates its taps in (in_channel, ky, kx)
// order starting from zero, then adds the bias.
inline Tensor conv2d(const Tensor& input, const ConvKernel& kernel) {
  detail::check_conv_args(input, kernel);
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t OC = kernel.out_channels(), KH = kernel.kh(), KW = kernel.kw();
  const std::size_t S = kernel.stride, P = kernel.padding;
  Tensor out(conv2d_output_shape(input.shape(), kernel));
  const std::size_t OH = out.dim(2), OW = out.dim(3);
  const double* in = input.data().data();
  const double* w = kernel.weights.data().data();
  double* o = out.data().data();

  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t oc = 0; oc < OC; ++oc) {
      double* oplane = o + (n * OC + oc) * OH * OW;
      for (std::size_t ic = 0; ic < C; ++ic) {
        const double* iplane = in + (n * C + ic) * H * W;
        for (std::size_t ki = 0; ki < KH; ++ki) {
          const auto [oh_lo, oh_hi] = detail::valid_range(OH, H, ki, S, P);
          for (std::size_t kj = 0; kj < KW; ++kj) {
            const double wv = w[((oc * C + ic) * KH + ki) * KW + kj];
            const auto [ow_lo, ow_hi] = detail::valid_range(OW, W, kj, S, P);
            for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
              const double* irow = iplane + (oh * S + ki - P) * W;
              double* orow = oplane + oh * OW;
              if (S == 1) {
                const double* ip = irow + kj - P;
                for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) orow[ow] += wv * ip[ow];
              } else {
                for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) orow[ow] += wv * irow[ow * S + kj - P];
              }
            }
          }
        }
      }
      const double b = kernel.bias[oc];
      for (std::size_t i = 0; i < OH * OW; ++i) oplane[i] += b;
    }
  }
  return out;
}

struct ConvGrads {
  Tensor grad_input;
  Tensor grad_weights;
  Tensor grad_bias;
};

inline ConvGrads conv2d_backward(const Tensor& input, const ConvKernel& kernel,
                                 const Tensor& grad_out) {
  detail::check_conv_args(input, kernel);
  const Shape expect = conv2d_output_shape(input.shape(), kernel);
  if (grad_out.shape() != expect) {
    throw Error(ErrorKind::ShapeMismatch, "conv2d_backward grad_out " + shape_str(grad_out.shape()) +
                                              " vs output " + shape_str(expect));
  }
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t OC = kernel.out_channels(), KH = kernel.kh(), KW = kernel.kw();
  const std::size_t S = kernel.stride, P = kernel.padding;
  const std::size_t OH = expect[2], OW = expect[3];
  ConvGrads g{Tensor(input.shape()), Tensor(kernel.weights.shape()), Tensor(kernel.bias.shape())};
  const double* in = input.data().data();
  const double* w = kernel.weights.data().data();
  const double* go = grad_out.data().data();
  double* gi = g.grad_input.data().data();
  double* gw = g.grad_weights.data().data();

  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t oc = 0; oc < OC; ++oc) {
      const double* gplane = go + (n * OC + oc) * OH * OW;
      double bsum = 0.0;
      for (std::size_t i = 0; i < OH * OW; ++i) bsum += gplane[i];
      g.grad_bias[oc] += bsum;
      for (std::size_t ic = 0; ic < C; ++ic) {
        const double* iplane = in + (n * C + ic) * H * W;
        double* giplane = gi + (n * C + ic) * H * W;
        for (std::size_t ki = 0; ki < KH; ++ki) {
          const auto [oh_lo, oh_hi] = detail::valid_range(OH, H, ki, S, P);
          for (std::size_t kj = 0; kj < KW; ++kj) {
            const std::size_t widx = ((oc * C + ic) * KH + ki) * KW + kj;
            const double wv = w[widx];
            const auto [ow_lo, ow_hi] = detail::valid_range(OW, W, kj, S, P);
            double wsum = 0.0;
            for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
              const std::size_t ioff = (oh * S + ki - P) * W;
              const double* grow = gplane + oh * OW;
              for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) {
                const std::size_t iw = ow * S + kj - P;
                wsum += grow[ow] * iplane[ioff + iw];
                giplane[ioff + iw] += wv * grow[ow];
              }
            }
            gw[widx] += wsum;
          }
        }
      }
    }
  }
  return g;
}

// --------------------------------------------------------------------------
// Bilinear sampling

// Four-corner interpolation stencil. Corners flagged invalid contribute zero.
struct BilinearTaps {
  std::size_t index[4] = {0, 0, 0, 0};  // y0x0, y0x1, y1x0, y1x1 (offset within one plane)
  double weight[4] = {0, 0, 0, 0};
  bool valid[4] = {false, false, false, false};
  double ly = 0, lx = 0;
  bool dy_live = false, dx_live = false;  // false when the coordinate was clamped

  double sample(const double* plane) const {
    double v = 0.0;
    for (int k = 0; k < 4; ++k)
      if (valid[k]) v += weight[k] * plane[index[k]];
    return v;
  }

  // d(sample)/dy and d(sample)/dx.
  std::pair<double, double> slopes(const double* plane) const {
    const double v00 = valid[0] ? plane[index[0]] : 0.0;
    const double v01 = valid[1] ? plane[index[1]] : 0.0;
    const double v10 = valid[2] ? plane[index[2]] : 0.0;
    const double v11 = valid[3] ? plane[index[3]] : 0.0;
    const double dy = dy_live ? (1 - lx) * (v10 - v00) + lx * (v11 - v01) : 0.0;
    const double dx = dx_live ? (1 - ly) * (v01 - v00) + ly * (v11 - v10) : 0.0;
    return {dy, dx};
  }

  void scatter(double* grad_plane, double g) const {
    for (int k = 0; k < 4; ++k)
      if (valid[k]) grad_plane[index[k]] += weight[k] * g;
  }
};

// Coordinates outside [0, H-1] x [0, W-1] clamp to the border.
inline BilinearTaps bilinear_taps_clamped(std::size_t H, std::size_t W, double y, double x) {
  BilinearTaps t;
  const double ymax = static_cast<double>(H - 1), xmax = static_cast<double>(W - 1);
  t.dy_live = y > 0.0 && y < ymax;
  t.dx_live = x > 0.0 && x < xmax;
  y = std::clamp(y, 0.0, ymax);
  x = std::clamp(x, 0.0, xmax);
  const std::size_t y0 = static_cast<std::size_t>(std::floor(y));
  const std::size_t x0 = static_cast<std::size_t>(std::floor(x));
  const std::size_t y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
  t.ly = y - static_cast<double>(y0);
  t.lx = x - static_cast<double>(x0);
  t.index[0] = y0 * W + x0;
  t.index[1] = y0 * W + x1;
  t.index[2] = y1 * W + x0;
  t.index[3] = y1 * W + x1;
  t.weight[0] = (1 - t.ly) * (1 - t.lx);
  t.weight[1] = (1 - t.ly) * t.lx;
  t.weight[2] = t.ly * (1 - t.lx);
  t.weight[3] = t.ly * t.lx;
  for (bool& v : t.valid) v = true;
  return t;
}

// Corners outside the map read as zero (used by deformable convolution so that
// zero offsets reproduce zero-padded conv2d).
inline BilinearTaps bilinear_taps_zero(std::size_t H, std::size_t W, double y, double x) {
  BilinearTaps t;
  t.dy_live = t.dx_live = true;
  const double fy = std::floor(y), fx = std::floor(x);
  t.ly = y - fy;
  t.lx = x - fx;
  const long y0 = static_cast<long>(fy), x0 = static_cast<long>(fx);
  const long ys[2] = {y0, y0 + 1}, xs[2] = {x0, x0 + 1};
  const double wy[2] = {1 - t.ly, t.ly}, wx[2] = {1 - t.lx, t.lx};
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < 2; ++b) {
      const int k = a * 2 + b;
      t.weight[k] = wy[a] * wx[b];
      t.valid[k] = ys[a] >= 0 && ys[a] < static_cast<long>(H) && xs[b] >= 0 &&
                   xs[b] < static_cast<long>(W);
      if (t.valid[k]) t.index[k] = static_cast<std::size_t>(ys[a]) * W + static_cast<std::size_t>(xs[b]);
    }
  }
  return t;
}

// Samples every channel of map[C,H,W] at (y, x) in array-index coordinates.
inline std::vector<double> bilinear_sample(const Tensor& map, double y, double x) {
  require_rank(map, 3, "bilinear_sample map");
  const std::size_t C = map.dim(0), H = map.dim(1), W = map.dim(2);
  const BilinearTaps t = bilinear_taps_clamped(H, W, y, x);
  std::vector<double> out(C);
  for (std::size_t c = 0; c < C; ++c) out[c] = t.sample(map.data().data() + c * H * W);
  return out;
}

struct BilinearGrads {
  Tensor grad_map;
  double grad_y = 0.0;
  double grad_x = 0.0;
};

inline BilinearGrads bilinear_sample_backward(const Tensor& map, double y, double x,
                                              std::span<const double> grad_out) {
  require_rank(map, 3, "bilinear_sample map");
  const std::size_t C = map.dim(0), H = map.dim(1), W = map.dim(2);
  if (grad_out.size() != C) {
    throw Error(ErrorKind::ShapeMismatch, "bilinear_sample_backward grad length " +
                                              std::to_string(grad_out.size()) + " vs channels " +
                                              std::to_string(C));
  }
  const BilinearTaps t = bilinear_taps_clamped(H, W, y, x);
  BilinearGrads g{Tensor(map.shape())};
  for (std::size_t c = 0; c < C; ++c) {
    const double* plane = map.data().data() + c * H * W;
    t.scatter(g.grad_map.data().data() + c * H * W, grad_out[c]);
    const auto [dy, dx] = t.slopes(plane);
    g.grad_y += grad_out[c] * dy;
    g.grad_x += grad_out[c] * dx;
  }
  return g;
}

// --------------------------------------------------------------------------
// Pointwise and reduction ops

inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  const double m = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

// log(softmax(logits))[k], computed without forming the probabilities.
inline double log_softmax_at(std::span<const double> logits, std::size_t k) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - m);
  return logits[k] - m - std::log(sum);
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor relu(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
  return y;
}

// Gradient of relu given the forward input.
inline Tensor relu_backward(const Tensor& input, const Tensor& grad_out) {
  require_same_shape(input, grad_out, "relu_backward");
  Tensor g(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) g[i] = input[i] > 0.0 ? grad_out[i] : 0.0;
  return g;
}

struct PoolResult {
  Tensor output;
  std::vector<std::size_t> argmax;  // flat input index per output element
};

inline PoolResult max_pool2d(const Tensor& input, std::size_t kernel = 2, std::size_t stride = 2) {
  require_rank(input, 4, "max_pool2d input");
  if (kernel < 1 || stride < 1) throw Error(ErrorKind::InvalidArgument, "pool kernel/stride must be >= 1");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (H < kernel || W < kernel) {
    throw Error(ErrorKind::ShapeMismatch, "max_pool2d input " + shape_str(input.shape()) +
                                              " smaller than kernel " + std::to_string(kernel));
  }
  const std::size_t OH = (H - kernel) / stride + 1, OW = (W - kernel) / stride + 1;
  PoolResult r{Tensor({N, C, OH, OW}), std::vector<std::size_t>(N * C * OH * OW)};
  std::size_t o = 0;
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const std::size_t base = nc * H * W;
    for (std::size_t oh = 0; oh < OH; ++oh) {
      for (std::size_t ow = 0; ow < OW; ++ow, ++o) {
        std::size_t best = base + oh * stride * W + ow * stride;
        for (std::size_t i = 0; i < kernel; ++i)
          for (std::size_t j = 0; j < kernel; ++j) {
            const std::size_t idx = base + (oh * stride + i) * W + ow * stride + j;
            if (input[idx] > input[best]) best = idx;
          }
        r.output[o] = input[best];
        r.argmax[o] = best;
      }
    }
  }
  return r;
}

inline Tensor max_pool2d_backward(const Shape& input_shape, const PoolResult& forward,
                                  const Tensor& grad_out) {
  require_same_shape(forward.output, grad_out, "max_pool2d_backward");
  Tensor g(input_shape);
  for (std::size_t i = 0; i < grad_out.size(); ++i) g[forward.argmax[i]] += grad_out[i];
  return g;
}

// Fully connected layer: out[n, o] = sum_i input[n, i] * weights[o, i] + bias[o].
inline Tensor linear(const Tensor& input, const Tensor& weights, const Tensor& bias) {
  require_rank(input, 2, "linear input");
  require_rank(weights, 2, "linear weights");
  if (input.dim(1) != weights.dim(1) || bias.size() != weights.dim(0)) {
    throw Error(ErrorKind::ShapeMismatch, "linear input " + shape_str(input.shape()) +
                                              " vs weights " + shape_str(weights.shape()) +
                                              " bias " + shape_str(bias.shape()));
  }
  const std::size_t N = input.dim(0), I = input.dim(1), O = weights.dim(0);
  Tensor out({N, O});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o) {
      double acc = 0.0;
      for (std::size_t i = 0; i < I; ++i) acc += input.at(n, i) * weights.at(o, i);
      out.at(n, o) = acc + bias[o];
    }
  return out;
}

struct LinearGrads {
  Tensor grad_input;
  Tensor grad_weights;
  Tensor grad_bias;
};

inline LinearGrads linear_backward(const Tensor& input, const Tensor& weights,
                                   const Tensor& grad_out) {
  const std::size_t N = input.dim(0), I = input.dim(1), O = weights.dim(0);
  if (grad_out.shape() != Shape{N, O}) {
    throw Error(ErrorKind::ShapeMismatch, "linear_backward grad_out " +
                                              shape_str(grad_out.shape()) + " vs " +
                                              shape_str({N, O}));
  }
  LinearGrads g{Tensor(input.shape()), Tensor(weights.shape()), Tensor({O})};
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o) {
      const double go = grad_out.at(n, o);
      g.grad_bias[o] += go;
      for (std::size_t i = 0; i < I; ++i) {
        g.grad_weights.at(o, i) += go * input.at(n, i);
        g.grad_input.at(n, i) += go * weights.at(o, i);
      }
    }
  return g;
}

// Nearest-neighbour resize of an NCHW tensor to (out_h, out_w).
inline Tensor upsample_nearest(const Tensor& input, std::size_t out_h, std::size_t out_w) {
  require_rank(input, 4, "upsample input");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  Tensor out({N, C, out_h, out_w});
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t i = 0; i < out_h; ++i) {
      const std::size_t si = i * H / out_h;
      for (std::size_t j = 0; j < out_w; ++j)
        out[(nc * out_h + i) * out_w + j] = input[(nc * H + si) * W + j * W / out_w];
    }
  return out;
}

inline Tensor upsample_nearest_backward(const Shape& input_shape, const Tensor& grad_out) {
  const std::size_t N = input_shape[0], C = input_shape[1], H = input_shape[2], W = input_shape[3];
  const std::size_t OH = grad_out.dim(2), OW = grad_out.dim(3);
  Tensor g(input_shape);
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t i = 0; i < OH; ++i) {
      const std::size_t si = i * H / OH;
      for (std::size_t j = 0; j < OW; ++j)
        g[(nc * H + si) * W + j * W / OW] += grad_out[(nc * OH + i) * OW + j];
    }
  return g;
}

inline void add_inplace(Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  Tensor out = a;
  add_inplace(out, b);
  return out;
}

// --------------------------------------------------------------------------
// Optimizer

inline void sgd_step(Tensor& param, std::span<const double> grad, double lr) {
  if (grad.size() != param.size()) {
    throw Error(ErrorKind::ShapeMismatch, "sgd_step grad length " + std::to_string(grad.size()) +
                                              " vs param " + shape_str(param.shape()));
  }
  auto p = param.data();
  for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * grad[i];
}

// Updates each parameter from its own gradient buffer.
inline void sgd_step(std::span<Tensor* const> params, double lr) {
  for (Tensor* p : params) {
    if (p->grad().size() != p->size()) continue;
    sgd_step(*p, p->grad(), lr);
  }
}

}  // namespace defect_forge

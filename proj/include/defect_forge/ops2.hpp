#pragma once

// Differentiable building blocks of the stage-2 detector: deformable
// convolution, ROI Align, per-pixel BCE and mask pasting.

#include <algorithm>
#include <cmath>
#include <vector>

#include "defect_forge/geometry.hpp"
#include "defect_forge/image.hpp"
#include "defect_forge/losses.hpp"
#include "defect_forge/tensor.hpp"

namespace defect_forge {

// --------------------------------------------------------------------------
// Deformable convolution
//
// Offsets have 2*kh*kw channels laid out (dy, dx) per tap, tap t = ky*kw + kx,
// on the same output grid as the kernel. Taps sample the zero-padded input
// bilinearly, so all-zero offsets reproduce conv2d exactly (same accumulation
// order: in_channel, ky, kx, then bias).

namespace detail {

inline void check_offsets(const Tensor& input, const ConvKernel& kernel, const Tensor& offsets) {
  const Shape out = conv2d_output_shape(input.shape(), kernel);
  const Shape expect{input.dim(0), 2 * kernel.kh() * kernel.kw(), out[2], out[3]};
  if (offsets.shape() != expect) {
    throw Error(ErrorKind::ShapeMismatch, "deformable offsets " + shape_str(offsets.shape()) +
                                              " vs expected " + shape_str(expect));
  }
}

// Sampled columns [C, taps, OH*OW] and their stencils for one image.
struct DeformColumns {
  std::vector<double> values;
  std::vector<BilinearTaps> taps;  // [taps, OH*OW]
};

inline DeformColumns deform_columns(const Tensor& input, std::size_t n, const ConvKernel& kernel,
                                    const Tensor& offsets, std::size_t OH, std::size_t OW) {
  const std::size_t C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t KH = kernel.kh(), KW = kernel.kw(), T = KH * KW, P = OH * OW;
  DeformColumns cols{std::vector<double>(C * T * P), std::vector<BilinearTaps>(T * P)};
  for (std::size_t t = 0; t < T; ++t) {
    const std::size_t ki = t / KW, kj = t % KW;
    for (std::size_t oh = 0; oh < OH; ++oh)
      for (std::size_t ow = 0; ow < OW; ++ow) {
        const double base_y = static_cast<double>(oh * kernel.stride + ki) - static_cast<double>(kernel.padding);
        const double base_x = static_cast<double>(ow * kernel.stride + kj) - static_cast<double>(kernel.padding);
        const double y = base_y + offsets.at(n, 2 * t, oh, ow);
        const double x = base_x + offsets.at(n, 2 * t + 1, oh, ow);
        cols.taps[t * P + oh * OW + ow] = bilinear_taps_zero(H, W, y, x);
      }
  }
  for (std::size_t c = 0; c < C; ++c) {
    const double* plane = input.data().data() + (n * C + c) * H * W;
    for (std::size_t tp = 0; tp < T * P; ++tp) cols.values[c * T * P + tp] = cols.taps[tp].sample(plane);
  }
  return cols;
}

}  // namespace detail

inline Tensor deformable_conv2d_with_offsets(const Tensor& input, const ConvKernel& kernel,
                                             const Tensor& offsets) {
  detail::check_conv_args(input, kernel);
  detail::check_offsets(input, kernel, offsets);
  const std::size_t N = input.dim(0), C = input.dim(1), OC = kernel.out_channels();
  const std::size_t T = kernel.kh() * kernel.kw();
  Tensor out(conv2d_output_shape(input.shape(), kernel));
  const std::size_t OH = out.dim(2), OW = out.dim(3), P = OH * OW;
  for (std::size_t n = 0; n < N; ++n) {
    const auto cols = detail::deform_columns(input, n, kernel, offsets, OH, OW);
    for (std::size_t oc = 0; oc < OC; ++oc) {
      double* o = out.data().data() + (n * OC + oc) * P;
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t t = 0; t < T; ++t) {
          const double w = kernel.weights[(oc * C + c) * T + t];
          const double* col = cols.values.data() + (c * T + t) * P;
          for (std::size_t p = 0; p < P; ++p) o[p] += w * col[p];
        }
      const double b = kernel.bias[oc];
      for (std::size_t p = 0; p < P; ++p) o[p] += b;
    }
  }
  return out;
}

inline void check_offset_net(const ConvKernel& kernel, const ConvKernel& offset_net) {
  if (offset_net.out_channels() != 2 * kernel.kh() * kernel.kw()) {
    throw Error(ErrorKind::ShapeMismatch,
                "offset net emits " + std::to_string(offset_net.out_channels()) +
                    " channels, deformable kernel needs 2*kh*kw = " +
                    std::to_string(2 * kernel.kh() * kernel.kw()));
  }
  if (offset_net.stride != kernel.stride || offset_net.kh() != kernel.kh() ||
      offset_net.kw() != kernel.kw() || offset_net.padding != kernel.padding) {
    throw Error(ErrorKind::ShapeMismatch, "offset net geometry must match the deformable kernel");
  }
}

// Offsets are predicted from the input by `offset_net` (a plain conv2d).
inline Tensor deformable_conv2d(const Tensor& input, const ConvKernel& kernel,
                                const ConvKernel& offset_net) {
  check_offset_net(kernel, offset_net);
  return deformable_conv2d_with_offsets(input, kernel, conv2d(input, offset_net));
}

struct DeformGrads {
  Tensor grad_input;
  Tensor grad_weights;
  Tensor grad_bias;
  Tensor grad_offsets;
};

inline DeformGrads deformable_conv2d_with_offsets_backward(const Tensor& input,
                                                           const ConvKernel& kernel,
                                                           const Tensor& offsets,
                                                           const Tensor& grad_out) {
  detail::check_conv_args(input, kernel);
  detail::check_offsets(input, kernel, offsets);
  const Shape out_shape = conv2d_output_shape(input.shape(), kernel);
  if (grad_out.shape() != out_shape) {
    throw Error(ErrorKind::ShapeMismatch, "deformable grad_out " + shape_str(grad_out.shape()) +
                                              " vs " + shape_str(out_shape));
  }
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t OC = kernel.out_channels(), T = kernel.kh() * kernel.kw();
  const std::size_t OH = out_shape[2], OW = out_shape[3], P = OH * OW;
  DeformGrads g{Tensor(input.shape()), Tensor(kernel.weights.shape()), Tensor(kernel.bias.shape()),
                Tensor(offsets.shape())};
  std::vector<double> gcol(C * T * P);
  for (std::size_t n = 0; n < N; ++n) {
    const auto cols = detail::deform_columns(input, n, kernel, offsets, OH, OW);
    std::fill(gcol.begin(), gcol.end(), 0.0);
    for (std::size_t oc = 0; oc < OC; ++oc) {
      const double* go = grad_out.data().data() + (n * OC + oc) * P;
      double bsum = 0.0;
      for (std::size_t p = 0; p < P; ++p) bsum += go[p];
      g.grad_bias[oc] += bsum;
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t t = 0; t < T; ++t) {
          const std::size_t widx = (oc * C + c) * T + t;
          const double w = kernel.weights[widx];
          const double* col = cols.values.data() + (c * T + t) * P;
          double* gc = gcol.data() + (c * T + t) * P;
          double acc = 0.0;
          for (std::size_t p = 0; p < P; ++p) {
            acc += go[p] * col[p];
            gc[p] += w * go[p];
          }
          g.grad_weights[widx] += acc;
        }
    }
    for (std::size_t c = 0; c < C; ++c) {
      const double* plane = input.data().data() + (n * C + c) * H * W;
      double* gplane = g.grad_input.data().data() + (n * C + c) * H * W;
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t p = 0; p < P; ++p) {
          const double gv = gcol[(c * T + t) * P + p];
          if (gv == 0.0) continue;
          const BilinearTaps& tap = cols.taps[t * P + p];
          tap.scatter(gplane, gv);
          const auto [dy, dx] = tap.slopes(plane);
          const std::size_t oh = p / OW, ow = p % OW;
          g.grad_offsets.at(n, 2 * t, oh, ow) += gv * dy;
          g.grad_offsets.at(n, 2 * t + 1, oh, ow) += gv * dx;
        }
    }
  }
  return g;
}

struct DeformNetGrads {
  Tensor grad_input;
  Tensor grad_weights;
  Tensor grad_bias;
  Tensor grad_offset_weights;
  Tensor grad_offset_bias;
};

inline DeformNetGrads deformable_conv2d_backward(const Tensor& input, const ConvKernel& kernel,
                                                 const ConvKernel& offset_net,
                                                 const Tensor& grad_out) {
  check_offset_net(kernel, offset_net);
  const Tensor offsets = conv2d(input, offset_net);
  DeformGrads d = deformable_conv2d_with_offsets_backward(input, kernel, offsets, grad_out);
  ConvGrads o = conv2d_backward(input, offset_net, d.grad_offsets);
  add_inplace(d.grad_input, o.grad_input);
  return {std::move(d.grad_input), std::move(d.grad_weights), std::move(d.grad_bias),
          std::move(o.grad_weights), std::move(o.grad_bias)};
}

// --------------------------------------------------------------------------
// ROI Align
//
// `roi` is in the map's pixel-edge coordinates (cell (i, j) spans
// [j, j+1) x [i, i+1)); a continuous point (x, y) is read at array index
// (y - 0.5, x - 0.5) with border clamping. Each of the out_h x out_w bins
// averages samples^2 points at regular sub-bin centres. No rounding.

namespace detail {

template <typename Fn>
void for_each_roi_sample(const Box& roi, std::size_t H, std::size_t W, std::size_t out_h,
                         std::size_t out_w, std::size_t samples, Fn&& fn) {
  const double bin_h = roi.height() / static_cast<double>(out_h);
  const double bin_w = roi.width() / static_cast<double>(out_w);
  const double inv = 1.0 / static_cast<double>(samples * samples);
  for (std::size_t i = 0; i < out_h; ++i)
    for (std::size_t j = 0; j < out_w; ++j)
      for (std::size_t sy = 0; sy < samples; ++sy) {
        const double y = roi.y_min + bin_h * (static_cast<double>(i) +
                                              (static_cast<double>(sy) + 0.5) / static_cast<double>(samples));
        for (std::size_t sx = 0; sx < samples; ++sx) {
          const double x = roi.x_min + bin_w * (static_cast<double>(j) +
                                                (static_cast<double>(sx) + 0.5) / static_cast<double>(samples));
          fn(i * out_w + j, bilinear_taps_clamped(H, W, y - 0.5, x - 0.5), inv);
        }
      }
}

inline void check_roi(const Box& roi, std::size_t out_h, std::size_t out_w, std::size_t samples) {
  if (!roi.valid() || !(roi.area() > 0.0)) {
    throw Error(ErrorKind::InvalidArgument, "roi_align needs a positive-area roi");
  }
  if (out_h < 1 || out_w < 1 || samples < 1) {
    throw Error(ErrorKind::InvalidArgument, "roi_align output size and samples must be >= 1");
  }
}

}  // namespace detail

inline Tensor roi_align(const Tensor& map, const Box& roi, std::size_t out_h, std::size_t out_w,
                        std::size_t samples_per_bin = 2) {
  require_rank(map, 3, "roi_align map");
  detail::check_roi(roi, out_h, out_w, samples_per_bin);
  const std::size_t C = map.dim(0), H = map.dim(1), W = map.dim(2);
  Tensor out({C, out_h, out_w});
  const std::size_t B = out_h * out_w;
  detail::for_each_roi_sample(roi, H, W, out_h, out_w, samples_per_bin,
                              [&](std::size_t bin, const BilinearTaps& t, double wgt) {
                                for (std::size_t c = 0; c < C; ++c)
                                  out[c * B + bin] += wgt * t.sample(map.data().data() + c * H * W);
                              });
  return out;
}

// Accumulates d(loss)/d(map) into grad_map.
inline void roi_align_backward(const Shape& map_shape, const Box& roi, std::size_t samples_per_bin,
                               const Tensor& grad_out, Tensor& grad_map) {
  const std::size_t C = map_shape[0], H = map_shape[1], W = map_shape[2];
  const std::size_t out_h = grad_out.dim(1), out_w = grad_out.dim(2), B = out_h * out_w;
  detail::check_roi(roi, out_h, out_w, samples_per_bin);
  if (grad_map.shape() != map_shape) grad_map = Tensor(map_shape);
  detail::for_each_roi_sample(roi, H, W, out_h, out_w, samples_per_bin,
                              [&](std::size_t bin, const BilinearTaps& t, double wgt) {
                                for (std::size_t c = 0; c < C; ++c)
                                  t.scatter(grad_map.data().data() + c * H * W,
                                            wgt * grad_out[c * B + bin]);
                              });
}

inline Tensor roi_align_backward(const Shape& map_shape, const Box& roi,
                                 std::size_t samples_per_bin, const Tensor& grad_out) {
  Tensor g(map_shape);
  roi_align_backward(map_shape, roi, samples_per_bin, grad_out, g);
  return g;
}

// --------------------------------------------------------------------------
// Segmentation masks and the per-pixel patch loss

struct SegmentationMask {
  std::size_t width = 0, height = 0;
  Plane values;  // [height, width] probabilities in [0, 1]

  Plane binarized(double threshold = 0.5) const { return threshold_plane(values, threshold); }
};

constexpr double kProbClamp = 1e-7;

// Mean over pixels of -[g log p + (1-g) log(1-p)], p clamped to [1e-7, 1-1e-7].
inline double patch_loss(const Plane& prob, const Plane& gt, Plane* grad = nullptr) {
  if (prob.shape() != gt.shape()) {
    throw Error(ErrorKind::ShapeMismatch, "patch_loss prediction " + shape_str(prob.shape()) +
                                              " vs ground truth " + shape_str(gt.shape()));
  }
  const double n = static_cast<double>(prob.size());
  double total = 0.0;
  for (std::size_t i = 0; i < prob.size(); ++i) {
    const double raw = prob[i];
    const double p = std::clamp(raw, kProbClamp, 1.0 - kProbClamp);
    const double g = gt[i];
    total -= g * std::log(p) + (1.0 - g) * std::log(1.0 - p);
    if (grad && raw > kProbClamp && raw < 1.0 - kProbClamp)
      (*grad)[i] += (-g / p + (1.0 - g) / (1.0 - p)) / n;
  }
  return total / n;
}

inline LossBreakdown combined_loss(double l_cls, double l_loc, double l_pat) {
  for (double v : {l_cls, l_loc, l_pat})
    if (!std::isfinite(v) || v < 0.0) {
      throw Error(ErrorKind::InvalidArgument, "loss components must be finite and non-negative");
    }
  return make_breakdown(l_cls, l_loc, l_pat);
}

// Pastes per-roi probability masks onto an H x W canvas, combining overlaps
// by per-pixel max. A canvas pixel whose centre lies inside a roi reads that
// roi's mask bilinearly at the corresponding position.
struct PasteTrace {
  std::vector<long> owner;          // per canvas pixel, -1 if no roi won
  std::vector<BilinearTaps> taps;   // stencil into the owner's mask
};

inline Plane paste_masks(const std::vector<Box>& rois, const std::vector<Plane>& masks,
                         std::size_t H, std::size_t W, PasteTrace* trace = nullptr) {
  Plane canvas = make_plane(H, W);
  if (trace) {
    trace->owner.assign(H * W, -1);
    trace->taps.assign(H * W, BilinearTaps{});
  }
  for (std::size_t r = 0; r < rois.size(); ++r) {
    const Box& b = rois[r];
    if (!(b.width() > 0 && b.height() > 0)) continue;
    const Plane& m = masks[r];
    const std::size_t mh = m.dim(0), mw = m.dim(1);
    const auto i0 = static_cast<std::size_t>(std::max(0.0, std::floor(b.y_min - 0.5)));
    const auto j0 = static_cast<std::size_t>(std::max(0.0, std::floor(b.x_min - 0.5)));
    const auto i1 = std::min(H, static_cast<std::size_t>(std::max(0.0, std::ceil(b.y_max + 0.5))));
    const auto j1 = std::min(W, static_cast<std::size_t>(std::max(0.0, std::ceil(b.x_max + 0.5))));
    for (std::size_t i = i0; i < i1; ++i) {
      const double cy = static_cast<double>(i) + 0.5;
      if (cy < b.y_min || cy >= b.y_max) continue;
      const double v_idx = (cy - b.y_min) / b.height() * static_cast<double>(mh) - 0.5;
      for (std::size_t j = j0; j < j1; ++j) {
        const double cx = static_cast<double>(j) + 0.5;
        if (cx < b.x_min || cx >= b.x_max) continue;
        const double u_idx = (cx - b.x_min) / b.width() * static_cast<double>(mw) - 0.5;
        const BilinearTaps t = bilinear_taps_clamped(mh, mw, v_idx, u_idx);
        const double v = t.sample(m.data().data());
        if (v > canvas.at(i, j)) {
          canvas.at(i, j) = v;
          if (trace) {
            trace->owner[i * W + j] = static_cast<long>(r);
            trace->taps[i * W + j] = t;
          }
        }
      }
    }
  }
  return canvas;
}

inline std::vector<Plane> paste_masks_backward(const PasteTrace& trace,
                                               const std::vector<Plane>& masks,
                                               const Plane& grad_canvas) {
  std::vector<Plane> grads;
  for (const auto& m : masks) grads.emplace_back(m.shape());
  for (std::size_t p = 0; p < trace.owner.size(); ++p) {
    if (trace.owner[p] < 0 || grad_canvas[p] == 0.0) continue;
    trace.taps[p].scatter(grads[static_cast<std::size_t>(trace.owner[p])].data().data(), grad_canvas[p]);
  }
  return grads;
}

}  // namespace defect_forge

#pragma once

// Stage 2: compact residual backbone, deformable-kernel layer, six-level
// feature pyramid with an additive bias level, RPN, ROI Align heads and the
// per-patch mask, trained with L = L_cls + L_loc + L_pat.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "defect_forge/geometry.hpp"
#include "defect_forge/losses.hpp"
#include "defect_forge/ops2.hpp"
#include "defect_forge/params.hpp"
#include "defect_forge/stage1.hpp"
#include "defect_forge/tensor.hpp"

namespace defect_forge {

constexpr std::size_t kPyramidLevels = 6;
constexpr std::size_t kMinStage2Input = 64;

struct Stage2Config {
  std::size_t input_size = 64;
  std::size_t channels = 8;          // backbone width
  std::size_t pyramid_channels = 8;
  std::size_t fc_hidden = 32;
  std::size_t num_classes = 1;
  std::vector<Ratio> anchor_ratios{{1, 1}, {1, 2}, {2, 1}};
  double anchor_base = 4.0;          // anchor side = anchor_base * level stride
  double rpn_nms = 0.7;
  std::size_t rpn_top_k = 100;
  std::size_t rpn_train_top_k = 16;
  double match_threshold = 0.5;
  double neg_ratio = 3.0;
  double rpn_ignore_iou = 0.3;       // unmatched anchors at or above this IoU are never Neg
  std::size_t roi_size = 14;
  std::size_t samples_per_bin = 2;
  std::size_t roi_max_level = 1;
  double roi_canonical = 32.0;       // box side mapped to level 1
  std::size_t max_pos_rois = 8;
  double det_threshold = 0.1;
  double det_nms = 0.5;
  std::size_t max_detections = 10;
};

// --------------------------------------------------------------------------
// Feature pyramid

struct FeaturePyramid {
  std::array<Tensor, kPyramidLevels> levels;  // finest -> coarsest, bias already added
  Tensor bias_level;                          // extra coarsest level
};

struct PyramidParams {
  std::array<ConvKernel, kPyramidLevels> lateral;
  ConvKernel bias_conv;

  PyramidParams() = default;
  PyramidParams(std::size_t in_c, std::size_t out_c, Rng& rng) {
    for (auto& l : lateral) {
      l = ConvKernel(out_c, in_c, 1, 1);
      he_init(l, rng);
    }
    bias_conv = ConvKernel(out_c, in_c, 3, 3, 2, 1);
    he_init(bias_conv, rng);
  }

  void collect(ParamList& p) {
    for (std::size_t k = 0; k < kPyramidLevels; ++k) p.add("stage2.lateral" + std::to_string(k), lateral[k]);
    p.add("stage2.bias_level", bias_conv);
  }
};

struct PyramidTrace {
  std::array<Tensor, kPyramidLevels> topdown;  // before the bias is added
  Tensor bias_pre;
};

inline void check_pyramid_stages(const std::array<Tensor, kPyramidLevels>& stages) {
  for (std::size_t k = 0; k < kPyramidLevels; ++k) require_rank(stages[k], 4, "pyramid stage");
  const std::size_t finest = std::min(stages[0].dim(2), stages[0].dim(3));
  constexpr std::size_t kMinFinest = std::size_t{1} << (kPyramidLevels - 1);
  if (finest < kMinFinest) {
    throw Error(ErrorKind::ImageTooSmall,
                "feature pyramid needs a finest level of at least " + std::to_string(kMinFinest) +
                    "x" + std::to_string(kMinFinest) + " (input of at least " +
                    std::to_string(2 * kMinFinest) + "x" + std::to_string(2 * kMinFinest) +
                    "), got " + shape_str(stages[0].shape()));
  }
  for (std::size_t k = 1; k < kPyramidLevels; ++k) {
    const std::size_t eh = (stages[k - 1].dim(2) + 1) / 2, ew = (stages[k - 1].dim(3) + 1) / 2;
    if (stages[k].dim(2) != eh || stages[k].dim(3) != ew) {
      throw Error(ErrorKind::ShapeMismatch, "pyramid stage " + std::to_string(k) + " " +
                                                shape_str(stages[k].shape()) +
                                                " is not half of stage " + std::to_string(k - 1));
    }
  }
}

// Top-down pathway: 1x1 lateral projections plus nearest 2x upsampling; the
// bias level is a stride-2 conv of the coarsest stage, upsampled and added to
// every level.
inline FeaturePyramid build_pyramid(const std::array<Tensor, kPyramidLevels>& stages,
                                    const PyramidParams& params, PyramidTrace* trace = nullptr) {
  check_pyramid_stages(stages);
  PyramidTrace local;
  PyramidTrace& t = trace ? *trace : local;
  for (std::size_t k = kPyramidLevels; k-- > 0;) {
    t.topdown[k] = conv2d(stages[k], params.lateral[k]);
    if (k + 1 < kPyramidLevels) {
      add_inplace(t.topdown[k],
                  upsample_nearest(t.topdown[k + 1], t.topdown[k].dim(2), t.topdown[k].dim(3)));
    }
  }
  t.bias_pre = conv2d(stages[kPyramidLevels - 1], params.bias_conv);
  FeaturePyramid fp;
  fp.bias_level = t.bias_pre;
  for (std::size_t k = 0; k < kPyramidLevels; ++k) {
    fp.levels[k] = add(t.topdown[k], upsample_nearest(t.bias_pre, t.topdown[k].dim(2), t.topdown[k].dim(3)));
  }
  return fp;
}

// Returns gradients w.r.t. the stages; parameter gradients accumulate into
// `params`.
inline std::array<Tensor, kPyramidLevels> build_pyramid_backward(
    const std::array<Tensor, kPyramidLevels>& stages, PyramidParams& params,
    const PyramidTrace& t, const std::array<Tensor, kPyramidLevels>& grad_levels) {
  std::array<Tensor, kPyramidLevels> grad_stages;
  std::array<Tensor, kPyramidLevels> grad_td;
  Tensor grad_bias(t.bias_pre.shape());
  for (std::size_t k = 0; k < kPyramidLevels; ++k) {
    grad_td[k] = grad_levels[k];
    add_inplace(grad_bias, upsample_nearest_backward(t.bias_pre.shape(), grad_levels[k]));
  }
  for (std::size_t k = 0; k + 1 < kPyramidLevels; ++k)
    add_inplace(grad_td[k + 1], upsample_nearest_backward(t.topdown[k + 1].shape(), grad_td[k]));
  for (std::size_t k = 0; k < kPyramidLevels; ++k) {
    ConvGrads g = conv2d_backward(stages[k], params.lateral[k], grad_td[k]);
    accumulate_grads(params.lateral[k], g);
    grad_stages[k] = std::move(g.grad_input);
  }
  ConvGrads gb = conv2d_backward(stages[kPyramidLevels - 1], params.bias_conv, grad_bias);
  accumulate_grads(params.bias_conv, gb);
  add_inplace(grad_stages[kPyramidLevels - 1], gb.grad_input);
  return grad_stages;
}

// --------------------------------------------------------------------------
// Anchors and proposals

struct Proposal {
  Box box;              // patch (network input) frame
  double objectness = 0.0;
  std::size_t level = 0;  // pyramid level used for ROI features
};

inline double level_stride(std::size_t level) { return static_cast<double>(std::size_t{2} << level); }

// Anchors for all levels in (level, row, col, ratio) order, clipped to the
// input. Level k has stride 2^(k+1).
inline std::vector<Box> pyramid_anchors(const FeaturePyramid& fp, const Stage2Config& cfg) {
  std::vector<Box> anchors;
  const double S = static_cast<double>(cfg.input_size);
  for (std::size_t k = 0; k < kPyramidLevels; ++k) {
    const std::size_t mh = fp.levels[k].dim(2), mw = fp.levels[k].dim(3);
    const double stride = level_stride(k), side = cfg.anchor_base * stride;
    for (std::size_t r = 0; r < mh; ++r)
      for (std::size_t c = 0; c < mw; ++c)
        for (const Ratio& ratio : cfg.anchor_ratios) {
          const double aspect = std::sqrt(ratio.w / ratio.h);
          anchors.push_back(clip_box(box_from_center((static_cast<double>(c) + 0.5) * stride,
                                                     (static_cast<double>(r) + 0.5) * stride,
                                                     side * aspect, side / aspect),
                                     S, S));
        }
  }
  return anchors;
}

inline std::size_t roi_level(const Box& b, const Stage2Config& cfg) {
  const double side = std::sqrt(std::max(b.area(), 1e-12));
  const double k = std::floor(1.0 + std::log2(side / cfg.roi_canonical));
  return static_cast<std::size_t>(std::clamp(k, 0.0, static_cast<double>(cfg.roi_max_level)));
}

struct RpnOutput {
  Tensor objectness;  // [A_total] logits
  Tensor offsets;     // [A_total, 4]
};

// Decodes, clips, drops degenerate boxes, NMS at cfg.rpn_nms, keeps top_k by
// objectness.
inline std::vector<Proposal> rpn_propose(const RpnOutput& rpn, const std::vector<Box>& anchors,
                                         const Stage2Config& cfg, std::size_t top_k) {
  const double S = static_cast<double>(cfg.input_size);
  std::vector<ScoredBox> cands;
  cands.reserve(anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    if (!(anchors[i].width() > 0 && anchors[i].height() > 0)) continue;
    const Offsets d{rpn.offsets.at(i, 0), rpn.offsets.at(i, 1), rpn.offsets.at(i, 2), rpn.offsets.at(i, 3)};
    const Box b = clip_box(decode_offsets(d, anchors[i]), S, S);
    if (b.width() < 1.0 || b.height() < 1.0) continue;
    cands.push_back({b, sigmoid(rpn.objectness[i]), 1});
  }
  std::vector<Proposal> out;
  for (std::size_t i : nms_indices(cands, cfg.rpn_nms, top_k))
    out.push_back({cands[i].box, cands[i].score, roi_level(cands[i].box, cfg)});
  return out;
}

// --------------------------------------------------------------------------
// Model

struct Stage2Targets {
  std::vector<GroundTruth> boxes;  // network-input frame
  Plane mask;                      // [S, S] binary
};

// Discrete choices of one training pass (proposals, matches, mined
// negatives). Reusing a frozen selection makes the loss a smooth function of
// the parameters, which is what gradient checking needs.
struct Stage2Selection {
  bool frozen = false;
  MatchAssignment anchor_match;
  std::vector<Box> rois;
  std::vector<std::size_t> roi_levels;
  MatchAssignment roi_match;
};

struct Stage2Result {
  std::vector<Detection> detections;  // network-input frame
  Plane mask;                         // [S, S] probabilities
};

class Stage2Model {
 public:
  explicit Stage2Model(const Stage2Config& config = {}, std::uint64_t seed = 2) : config_(config) {
    if (config.input_size < kMinStage2Input) {
      throw Error(ErrorKind::ImageTooSmall, "stage-2 input must be at least " +
                                                std::to_string(kMinStage2Input) + " pixels");
    }
    Rng rng(seed);
    const std::size_t C = config.channels, F = config.pyramid_channels;
    const std::size_t A = config.anchor_ratios.size();
    stem = ConvKernel(C, 1, 3, 3, 2, 1);
    he_init(stem, rng);
    for (auto& r : res) {
      r[0] = ConvKernel(C, C, 3, 3, 1, 1);
      r[1] = ConvKernel(C, C, 3, 3, 1, 1);
      he_init(r[0], rng);
      he_init(r[1], rng, 0.5);
    }
    for (auto& t : transitions) {
      t = ConvKernel(C, C, 3, 3, 2, 1);
      he_init(t, rng);
    }
    dk = ConvKernel(C, C, 3, 3, 1, 1);
    he_init(dk, rng);
    dk_offsets = ConvKernel(18, C, 3, 3, 1, 1);  // zero init: starts as a plain conv
    pyramid = PyramidParams(C, F, rng);
    rpn_conv = ConvKernel(F, F, 3, 3, 1, 1);
    he_init(rpn_conv, rng);
    rpn_obj = ConvKernel(A, F, 1, 1);
    rpn_box = ConvKernel(4 * A, F, 1, 1);
    he_init(rpn_obj, rng, 0.1);
    he_init(rpn_box, rng, 0.1);
    const std::size_t pooled = (config.roi_size / 2) * (config.roi_size / 2) * F;
    fc_w = Tensor({config.fc_hidden, pooled});
    fc_b = Tensor({config.fc_hidden});
    he_init(fc_w, fc_b, rng);
    cls_w = Tensor({config.num_classes + 1, config.fc_hidden});
    cls_b = Tensor({config.num_classes + 1});
    he_init(cls_w, cls_b, rng, 0.1);
    box_w = Tensor({4, config.fc_hidden});
    box_b = Tensor({4});
    he_init(box_w, box_b, rng, 0.1);
    mask1 = ConvKernel(F, F, 3, 3, 1, 1);
    mask2 = ConvKernel(F, F, 3, 3, 1, 1);
    mask_pred = ConvKernel(1, F, 1, 1);
    he_init(mask1, rng);
    he_init(mask2, rng);
    he_init(mask_pred, rng, 0.1);
  }

  const Stage2Config& config() const { return config_; }

  ParamList params() {
    ParamList p;
    p.add("stage2.stem", stem);
    for (std::size_t i = 0; i < res.size(); ++i) {
      p.add("stage2.res" + std::to_string(i) + ".a", res[i][0]);
      p.add("stage2.res" + std::to_string(i) + ".b", res[i][1]);
    }
    for (std::size_t i = 0; i < transitions.size(); ++i)
      p.add("stage2.down" + std::to_string(i), transitions[i]);
    p.add("stage2.dk", dk);
    p.add("stage2.dk_offsets", dk_offsets);
    pyramid.collect(p);
    p.add("stage2.rpn_conv", rpn_conv);
    p.add("stage2.rpn_obj", rpn_obj);
    p.add("stage2.rpn_box", rpn_box);
    p.add("stage2.fc.weight", fc_w);
    p.add("stage2.fc.bias", fc_b);
    p.add("stage2.cls.weight", cls_w);
    p.add("stage2.cls.bias", cls_b);
    p.add("stage2.box.weight", box_w);
    p.add("stage2.box.bias", box_b);
    p.add("stage2.mask1", mask1);
    p.add("stage2.mask2", mask2);
    p.add("stage2.mask_pred", mask_pred);
    return p;
  }

  // ---- trunk: backbone -> DK -> pyramid -> RPN ----

  struct ResTrace {
    Tensor in, a1, a2, sum;
  };

  struct TrunkTrace {
    Tensor input;
    std::array<Tensor, kPyramidLevels> pre;  // stem / transition conv outputs
    std::array<ResTrace, 3> res;
    std::array<Tensor, kPyramidLevels> stages;  // backbone stage outputs
    Tensor dk_pre;
    std::array<Tensor, kPyramidLevels> pyramid_in;  // stage 0 replaced by DK output
    PyramidTrace pyr;
    FeaturePyramid fp;
    std::array<Tensor, kPyramidLevels> rpn_pre;
    std::array<Tensor, kPyramidLevels> rpn_hidden;
    std::vector<Box> anchors;
    RpnOutput rpn;
  };

  void trunk_forward(const Tensor& input, TrunkTrace& t) const {
    const std::size_t S = config_.input_size;
    if (input.shape() != Shape{1, 1, S, S}) {
      throw Error(ErrorKind::ShapeMismatch,
                  "stage-2 input " + shape_str(input.shape()) + " vs " + shape_str({1, 1, S, S}));
    }
    t.input = input;
    for (std::size_t k = 0; k < kPyramidLevels; ++k) {
      const Tensor& x = k == 0 ? t.input : t.stages[k - 1];
      t.pre[k] = conv2d(x, k == 0 ? stem : transitions[k - 1]);
      Tensor h = relu(t.pre[k]);
      if (k < res.size()) {
        ResTrace& r = t.res[k];
        r.in = std::move(h);
        r.a1 = conv2d(r.in, res[k][0]);
        r.a2 = conv2d(relu(r.a1), res[k][1]);
        r.sum = add(r.in, r.a2);
        t.stages[k] = relu(r.sum);
      } else {
        t.stages[k] = std::move(h);
      }
    }
    t.dk_pre = deformable_conv2d(t.stages[0], dk, dk_offsets);
    t.pyramid_in = t.stages;
    t.pyramid_in[0] = relu(t.dk_pre);
    t.fp = build_pyramid(t.pyramid_in, pyramid, &t.pyr);
    t.anchors = pyramid_anchors(t.fp, config_);
    const std::size_t A = config_.anchor_ratios.size();
    t.rpn = {Tensor({t.anchors.size()}), Tensor({t.anchors.size(), 4})};
    std::size_t base = 0;
    for (std::size_t k = 0; k < kPyramidLevels; ++k) {
      t.rpn_pre[k] = conv2d(t.fp.levels[k], rpn_conv);
      t.rpn_hidden[k] = relu(t.rpn_pre[k]);
      const Tensor obj = conv2d(t.rpn_hidden[k], rpn_obj);
      const Tensor box = conv2d(t.rpn_hidden[k], rpn_box);
      const std::size_t mh = obj.dim(2), mw = obj.dim(3);
      for (std::size_t r = 0; r < mh; ++r)
        for (std::size_t c = 0; c < mw; ++c)
          for (std::size_t a = 0; a < A; ++a) {
            const std::size_t i = base + (r * mw + c) * A + a;
            t.rpn.objectness[i] = obj.at(0, a, r, c);
            for (std::size_t q = 0; q < 4; ++q) t.rpn.offsets.at(i, q) = box.at(0, a * 4 + q, r, c);
          }
      base += mh * mw * A;
    }
  }

  // grad_levels: extra gradient on each pyramid level (from ROI heads).
  void trunk_backward(const TrunkTrace& t, const Tensor& grad_obj, const Tensor& grad_off,
                      std::array<Tensor, kPyramidLevels> grad_levels) {
    const std::size_t A = config_.anchor_ratios.size();
    std::size_t base = 0;
    for (std::size_t k = 0; k < kPyramidLevels; ++k) {
      const std::size_t mh = t.fp.levels[k].dim(2), mw = t.fp.levels[k].dim(3);
      Tensor gobj({1, A, mh, mw}), gbox({1, 4 * A, mh, mw});
      for (std::size_t r = 0; r < mh; ++r)
        for (std::size_t c = 0; c < mw; ++c)
          for (std::size_t a = 0; a < A; ++a) {
            const std::size_t i = base + (r * mw + c) * A + a;
            gobj.at(0, a, r, c) = grad_obj[i];
            for (std::size_t q = 0; q < 4; ++q) gbox.at(0, a * 4 + q, r, c) = grad_off.at(i, q);
          }
      base += mh * mw * A;
      ConvGrads go = conv2d_backward(t.rpn_hidden[k], rpn_obj, gobj);
      ConvGrads gb = conv2d_backward(t.rpn_hidden[k], rpn_box, gbox);
      accumulate_grads(rpn_obj, go);
      accumulate_grads(rpn_box, gb);
      add_inplace(go.grad_input, gb.grad_input);
      const Tensor gpre = relu_backward(t.rpn_pre[k], go.grad_input);
      ConvGrads gc = conv2d_backward(t.fp.levels[k], rpn_conv, gpre);
      accumulate_grads(rpn_conv, gc);
      if (grad_levels[k].empty()) grad_levels[k] = Tensor(t.fp.levels[k].shape());
      add_inplace(grad_levels[k], gc.grad_input);
    }
    auto grad_in = build_pyramid_backward(t.pyramid_in, pyramid, t.pyr, grad_levels);
    // DK layer on the finest stage.
    const Tensor gdk = relu_backward(t.dk_pre, grad_in[0]);
    DeformNetGrads dg = deformable_conv2d_backward(t.stages[0], dk, dk_offsets, gdk);
    accumulate_grad(dk.weights, dg.grad_weights);
    accumulate_grad(dk.bias, dg.grad_bias);
    accumulate_grad(dk_offsets.weights, dg.grad_offset_weights);
    accumulate_grad(dk_offsets.bias, dg.grad_offset_bias);
    std::array<Tensor, kPyramidLevels> grad_stage;
    for (std::size_t k = 1; k < kPyramidLevels; ++k) grad_stage[k] = std::move(grad_in[k]);
    grad_stage[0] = std::move(dg.grad_input);
    for (std::size_t k = kPyramidLevels; k-- > 0;) {
      Tensor gh;
      if (k < res.size()) {
        const ResTrace& r = t.res[k];
        const Tensor gsum = relu_backward(r.sum, grad_stage[k]);
        const Tensor b1 = relu(r.a1);
        ConvGrads g2 = conv2d_backward(b1, res[k][1], gsum);
        accumulate_grads(res[k][1], g2);
        const Tensor ga1 = relu_backward(r.a1, g2.grad_input);
        ConvGrads g1 = conv2d_backward(r.in, res[k][0], ga1);
        accumulate_grads(res[k][0], g1);
        gh = add(gsum, g1.grad_input);
      } else {
        gh = std::move(grad_stage[k]);
      }
      const Tensor gpre = relu_backward(t.pre[k], gh);
      const Tensor& x = k == 0 ? t.input : t.stages[k - 1];
      ConvKernel& kern = k == 0 ? stem : transitions[k - 1];
      ConvGrads g = conv2d_backward(x, kern, gpre);
      accumulate_grads(kern, g);
      if (k > 0) add_inplace(grad_stage[k - 1], g.grad_input);
    }
  }

  // ---- ROI heads ----

  struct RoiTrace {
    Box roi;            // input frame
    std::size_t level = 0;
    Box roi_level;      // level-map frame
    Tensor feat;        // [1, F, R, R]
    PoolResult pooled;
    Tensor fc_in;       // [1, F*R/2*R/2]
    Tensor fc_pre;
    Tensor fc_hidden;
    Tensor cls;         // [1, K+1]
    Tensor box;         // [1, 4]
    // mask branch
    Tensor m1_pre, m2_pre, up;
    Tensor mask_logits;  // [1,1,2R,2R]
    bool has_mask = false;
  };

  static Tensor level_map(const FeaturePyramid& fp, std::size_t level) {
    const Tensor& l = fp.levels[level];
    return l.reshaped({l.dim(1), l.dim(2), l.dim(3)});
  }

  void roi_forward(const std::vector<Tensor>& level_maps, const Box& roi, std::size_t level,
                   bool with_mask, RoiTrace& r) const {
    const std::size_t R = config_.roi_size, F = config_.pyramid_channels;
    r.roi = roi;
    r.level = level;
    const double s = 1.0 / level_stride(level);
    r.roi_level = transform_box(roi, 0, 0, s, s);
    r.feat = roi_align(level_maps[level], r.roi_level, R, R, config_.samples_per_bin).reshaped({1, F, R, R});
    r.pooled = max_pool2d(r.feat);
    r.fc_in = r.pooled.output.reshaped({1, r.pooled.output.size()});
    r.fc_pre = linear(r.fc_in, fc_w, fc_b);
    r.fc_hidden = relu(r.fc_pre);
    r.cls = linear(r.fc_hidden, cls_w, cls_b);
    r.box = linear(r.fc_hidden, box_w, box_b);
    r.has_mask = with_mask;
    if (with_mask) {
      r.m1_pre = conv2d(r.feat, mask1);
      r.m2_pre = conv2d(relu(r.m1_pre), mask2);
      r.up = upsample_nearest(relu(r.m2_pre), 2 * R, 2 * R);
      r.mask_logits = conv2d(r.up, mask_pred);
    }
  }

  static Plane mask_probs(const RoiTrace& r) {
    const std::size_t M = r.mask_logits.dim(2);
    Plane p = make_plane(M, M);
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = sigmoid(r.mask_logits[i]);
    return p;
  }

  // Accumulates parameter grads and the level-map gradient.
  void roi_backward(const RoiTrace& r, const Tensor& grad_cls, const Tensor& grad_box,
                    const Plane* grad_mask_prob, std::vector<Tensor>& grad_level_maps) {
    const std::size_t F = config_.pyramid_channels, R = config_.roi_size;
    LinearGrads gc = linear_backward(r.fc_hidden, cls_w, grad_cls);
    LinearGrads gb = linear_backward(r.fc_hidden, box_w, grad_box);
    accumulate_grad(cls_w, gc.grad_weights);
    accumulate_grad(cls_b, gc.grad_bias);
    accumulate_grad(box_w, gb.grad_weights);
    accumulate_grad(box_b, gb.grad_bias);
    add_inplace(gc.grad_input, gb.grad_input);
    const Tensor gpre = relu_backward(r.fc_pre, gc.grad_input);
    LinearGrads gf = linear_backward(r.fc_in, fc_w, gpre);
    accumulate_grad(fc_w, gf.grad_weights);
    accumulate_grad(fc_b, gf.grad_bias);
    Tensor gfeat = max_pool2d_backward(r.feat.shape(), r.pooled,
                                       gf.grad_input.reshaped(r.pooled.output.shape()));
    if (r.has_mask && grad_mask_prob) {
      Tensor glog(r.mask_logits.shape());
      for (std::size_t i = 0; i < glog.size(); ++i) {
        const double p = sigmoid(r.mask_logits[i]);
        glog[i] = (*grad_mask_prob)[i] * p * (1.0 - p);
      }
      ConvGrads gp = conv2d_backward(r.up, mask_pred, glog);
      accumulate_grads(mask_pred, gp);
      const Tensor h2 = relu(r.m2_pre);
      const Tensor gh2 = upsample_nearest_backward(h2.shape(), gp.grad_input);
      ConvGrads g2 = conv2d_backward(relu(r.m1_pre), mask2, relu_backward(r.m2_pre, gh2));
      accumulate_grads(mask2, g2);
      ConvGrads g1 = conv2d_backward(r.feat, mask1, relu_backward(r.m1_pre, g2.grad_input));
      accumulate_grads(mask1, g1);
      add_inplace(gfeat, g1.grad_input);
    }
    roi_align_backward(level_maps_shape(grad_level_maps, r.level), r.roi_level,
                       config_.samples_per_bin, gfeat.reshaped({F, R, R}),
                       grad_level_maps[r.level]);
  }

  // ---- training ----

  // Forward + loss (+ backward when `accumulate` is set) for one patch.
  LossBreakdown train_step(const Tensor& input, const Stage2Targets& targets,
                           Stage2Selection* selection = nullptr, bool accumulate = true) {
    const Stage2Config& cfg = config_;
    const std::size_t S = cfg.input_size, K1 = cfg.num_classes + 1;
    if (targets.mask.shape() != Shape{S, S}) {
      throw Error(ErrorKind::ShapeMismatch, "stage-2 target mask " + shape_str(targets.mask.shape()) +
                                                " vs " + shape_str({S, S}));
    }
    Stage2Selection local;
    Stage2Selection& sel = selection ? *selection : local;
    const bool reuse = sel.frozen;

    TrunkTrace t;
    trunk_forward(input, t);

    // RPN loss: objectness as two-way logits (0, o).
    const std::size_t NA = t.anchors.size();
    Tensor rpn_conf({NA, 2});
    for (std::size_t i = 0; i < NA; ++i) rpn_conf.at(i, 1) = t.rpn.objectness[i];
    if (!reuse) {
      sel.anchor_match = match(t.anchors, targets.boxes, cfg.match_threshold);
      mine_hard_negatives(sel.anchor_match, background_losses(rpn_conf), cfg.neg_ratio,
                          overlapping_boxes(sel.anchor_match, t.anchors, targets.boxes, cfg.rpn_ignore_iou));
      // Degenerate (fully clipped) anchors never count as negatives.
      std::erase_if(sel.anchor_match.neg, [&](std::size_t i) { return !(t.anchors[i].area() > 0); });
    }
    const Tensor rpn_targets = encode_targets(sel.anchor_match, t.anchors, targets.boxes);
    Tensor g_rpn_conf(rpn_conf.shape()), g_rpn_off(t.rpn.offsets.shape());
    const LossBreakdown rpn_loss = multibox_loss(sel.anchor_match, rpn_conf, t.rpn.offsets,
                                                 rpn_targets, 1.0, &g_rpn_conf, &g_rpn_off);

    // ROIs: proposals plus the gt boxes themselves.
    std::vector<Tensor> maps;
    for (std::size_t k = 0; k < kPyramidLevels; ++k) maps.push_back(level_map(t.fp, k));
    if (!reuse) {
      sel.rois.clear();
      sel.roi_levels.clear();
      for (const auto& p : rpn_propose(t.rpn, t.anchors, cfg, cfg.rpn_train_top_k)) {
        sel.rois.push_back(p.box);
        sel.roi_levels.push_back(p.level);
      }
      for (const auto& g : targets.boxes) {
        sel.rois.push_back(g.box);
        sel.roi_levels.push_back(roi_level(g.box, cfg));
      }
    }
    std::vector<RoiTrace> rois(sel.rois.size());
    for (std::size_t i = 0; i < rois.size(); ++i) roi_forward(maps, sel.rois[i], sel.roi_levels[i], false, rois[i]);
    Tensor roi_conf({rois.size(), K1}), roi_loc({rois.size(), 4});
    for (std::size_t i = 0; i < rois.size(); ++i) {
      for (std::size_t k = 0; k < K1; ++k) roi_conf.at(i, k) = rois[i].cls[k];
      for (std::size_t q = 0; q < 4; ++q) roi_loc.at(i, q) = rois[i].box[q];
    }
    if (!reuse) {
      sel.roi_match = match(sel.rois, targets.boxes, cfg.match_threshold);
      limit_positives(sel.roi_match, sel.rois, targets.boxes);
      mine_hard_negatives(sel.roi_match, background_losses(roi_conf), cfg.neg_ratio);
      sel.frozen = true;
    }
    const Tensor roi_targets = encode_targets(sel.roi_match, sel.rois, targets.boxes);
    Tensor g_roi_conf(roi_conf.shape()), g_roi_loc(roi_loc.shape());
    const LossBreakdown roi_loss = multibox_loss(sel.roi_match, roi_conf, roi_loc, roi_targets, 1.0,
                                                 &g_roi_conf, &g_roi_loc);

    // Mask branch on positive ROIs, pasted onto the patch canvas.
    std::vector<Box> mask_boxes;
    std::vector<Plane> probs;
    for (std::size_t i : sel.roi_match.pos) {
      RoiTrace& r = rois[i];
      r.m1_pre = conv2d(r.feat, mask1);
      r.m2_pre = conv2d(relu(r.m1_pre), mask2);
      r.up = upsample_nearest(relu(r.m2_pre), 2 * cfg.roi_size, 2 * cfg.roi_size);
      r.mask_logits = conv2d(r.up, mask_pred);
      r.has_mask = true;
      mask_boxes.push_back(r.roi);
      probs.push_back(mask_probs(r));
    }
    PasteTrace paste;
    const Plane canvas = paste_masks(mask_boxes, probs, S, S, &paste);
    Plane g_canvas(canvas.shape());
    const double l_pat = patch_loss(canvas, targets.mask, &g_canvas);

    const LossBreakdown loss = combined_loss(rpn_loss.l_cls + roi_loss.l_cls,
                                             rpn_loss.l_loc + roi_loss.l_loc, l_pat);
    if (!accumulate) return loss;

    const auto g_masks = paste_masks_backward(paste, probs, g_canvas);
    std::vector<Tensor> g_maps;
    for (const auto& m : maps) g_maps.emplace_back(m.shape());
    std::size_t mi = 0;
    for (std::size_t i = 0; i < rois.size(); ++i) {
      Tensor gc({1, K1}), gb({1, 4});
      for (std::size_t k = 0; k < K1; ++k) gc[k] = g_roi_conf.at(i, k);
      for (std::size_t q = 0; q < 4; ++q) gb[q] = g_roi_loc.at(i, q);
      const Plane* gm = rois[i].has_mask ? &g_masks[mi++] : nullptr;
      roi_backward(rois[i], gc, gb, gm, g_maps);
    }
    std::array<Tensor, kPyramidLevels> g_levels;
    for (std::size_t k = 0; k < kPyramidLevels; ++k) g_levels[k] = g_maps[k].reshaped(t.fp.levels[k].shape());
    Tensor g_obj({NA});
    // The first logit is the constant 0, so only the second carries gradient.
    for (std::size_t i = 0; i < NA; ++i) g_obj[i] = g_rpn_conf.at(i, 1);
    trunk_backward(t, g_obj, g_rpn_off, g_levels);
    return loss;
  }

  // ---- inference ----

  Stage2Result segment(const Tensor& input) const {
    const Stage2Config& cfg = config_;
    const std::size_t S = cfg.input_size, K1 = cfg.num_classes + 1;
    TrunkTrace t;
    trunk_forward(input, t);
    std::vector<Tensor> maps;
    for (std::size_t k = 0; k < kPyramidLevels; ++k) maps.push_back(level_map(t.fp, k));
    const auto proposals = rpn_propose(t.rpn, t.anchors, cfg, cfg.rpn_top_k);
    std::vector<ScoredBox> dets;
    for (const auto& p : proposals) {
      RoiTrace r;
      roi_forward(maps, p.box, p.level, false, r);
      const auto prob = softmax(r.cls.data());
      std::size_t label = 1;
      for (std::size_t k = 2; k < K1; ++k)
        if (prob[k] > prob[label]) label = k;
      if (prob[label] < cfg.det_threshold) continue;
      const Offsets d{r.box[0], r.box[1], r.box[2], r.box[3]};
      const Box b = clip_box(decode_offsets(d, p.box), static_cast<double>(S), static_cast<double>(S));
      if (b.width() < 1.0 || b.height() < 1.0) continue;
      dets.push_back({b, prob[label], label});
    }
    Stage2Result res;
    std::vector<Box> boxes;
    std::vector<Plane> probs;
    for (std::size_t i : nms_indices(dets, cfg.det_nms, cfg.max_detections)) {
      RoiTrace r;
      roi_forward(maps, dets[i].box, roi_level(dets[i].box, cfg), true, r);
      boxes.push_back(dets[i].box);
      probs.push_back(mask_probs(r));
      res.detections.push_back({dets[i].box, dets[i].label, dets[i].score});
    }
    res.mask = paste_masks(boxes, probs, S, S);
    return res;
  }

  ConvKernel stem;
  std::array<std::array<ConvKernel, 2>, 3> res;
  std::array<ConvKernel, 5> transitions;
  ConvKernel dk, dk_offsets;
  PyramidParams pyramid;
  ConvKernel rpn_conv, rpn_obj, rpn_box;
  Tensor fc_w, fc_b, cls_w, cls_b, box_w, box_b;
  ConvKernel mask1, mask2, mask_pred;

 private:
  static const Shape& level_maps_shape(const std::vector<Tensor>& maps, std::size_t level) {
    return maps[level].shape();
  }

  // Keeps the max_pos_rois positives with the highest overlap to their gt.
  void limit_positives(MatchAssignment& m, const std::vector<Box>& rois,
                       const std::vector<GroundTruth>& gt) const {
    if (m.pos.size() <= config_.max_pos_rois) return;
    std::vector<std::size_t> order = m.pos;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return jaccard(rois[a], gt[static_cast<std::size_t>(m.matched_gt[a])].box) >
             jaccard(rois[b], gt[static_cast<std::size_t>(m.matched_gt[b])].box);
    });
    for (std::size_t k = config_.max_pos_rois; k < order.size(); ++k) {
      m.matched_gt[order[k]] = -1;
      m.labels[order[k]] = 0;
    }
    order.resize(config_.max_pos_rois);
    std::sort(order.begin(), order.end());
    m.pos = std::move(order);
  }

  Stage2Config config_;
};

// Patch plane -> network input -> masks/detections mapped back to the patch
// extent (SegmentationMask has the patch's pixel dimensions).
struct PatchSegmentation {
  std::vector<Detection> detections;  // patch frame
  SegmentationMask mask;
};

inline PatchSegmentation segment_patch(const Plane& work, const Box& patch, const Stage2Model& model) {
  const std::size_t S = model.config().input_size;
  const Stage2Result r = model.segment(patch_input(work, patch, S));
  PatchSegmentation out;
  const auto pw = static_cast<std::size_t>(std::lround(patch.width()));
  const auto ph = static_cast<std::size_t>(std::lround(patch.height()));
  out.mask.width = pw;
  out.mask.height = ph;
  if (pw == S && ph == S) {
    out.mask.values = r.mask;
  } else {
    out.mask.values = resize_bilinear(r.mask, ph, pw);
  }
  for (double& v : out.mask.values.data()) v = std::clamp(v, 0.0, 1.0);
  const double sx = patch.width() / static_cast<double>(S), sy = patch.height() / static_cast<double>(S);
  for (const auto& d : r.detections) out.detections.push_back({transform_box(d.box, 0, 0, sx, sy), d.label, d.score});
  return out;
}

}  // namespace defect_forge

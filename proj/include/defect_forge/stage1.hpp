#pragma once

// Stage 1: preprocessing, default-box matching, multibox loss, the compact
// SSD-style patch network and defective-patch selection.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "defect_forge/geometry.hpp"
#include "defect_forge/image.hpp"
#include "defect_forge/losses.hpp"
#include "defect_forge/parallel.hpp"
#include "defect_forge/params.hpp"
#include "defect_forge/tensor.hpp"

namespace defect_forge {

struct Stage1Config {
  std::size_t work_size = 512;  // preprocess resize target (square)
  SliceConfig slicing;
  std::size_t input_size = 32;  // patches are resampled to input_size^2
  std::vector<std::size_t> channels{8, 16, 16, 16};
  std::size_t num_classes = 1;  // defect classes, background excluded
  double alpha = 1.0;
  double match_threshold = 0.5;
  double neg_ratio = 3.0;
  double select_threshold = 0.5;
  double nms_threshold = 0.45;
  double min_score = 0.01;
  double min_visible = 0.5;  // fraction of a gt box inside a patch for it to count
  double ignore_coverage = 0.5;  // unmatched boxes covering this much of a gt are never Neg (> 1 disables)
};

// Grayscale (0.299, 0.587, 0.114), bilinear resize, [0,1] scaling.
inline Tensor preprocess(const Image& image, std::size_t out_h = 512, std::size_t out_w = 512) {
  if (image.empty()) throw Error(ErrorKind::InvalidArgument, "cannot preprocess an image with a zero dimension");
  Plane gray = to_gray_plane(image);
  if (gray.dim(0) != out_h || gray.dim(1) != out_w) gray = resize_bilinear(gray, out_h, out_w);
  return gray.reshaped({1, 1, out_h, out_w});
}

// --------------------------------------------------------------------------
// Matching

struct GroundTruth {
  Box box;
  std::size_t label = 1;  // 0 is background
};

struct MatchAssignment {
  std::size_t num_defaults = 0;
  std::size_t num_gt = 0;
  std::vector<long> matched_gt;      // per default box, -1 when unmatched
  std::vector<std::size_t> labels;   // per default box, 0 = background
  std::vector<std::size_t> pos;      // ascending indices
  std::vector<std::size_t> neg;

  std::size_t n() const { return pos.size(); }
  bool indicator(std::size_t i, std::size_t j) const {
    return matched_gt[i] == static_cast<long>(j);
  }
};

// (a) each gt takes its best default box (greedy over the global IoU maximum
// so two gts never claim the same box); (b) every other default box with IoU
// >= threshold against its best gt is matched to that gt.
inline MatchAssignment match(const std::vector<Box>& defaults, const std::vector<GroundTruth>& gt,
                             double threshold = 0.5) {
  MatchAssignment m;
  m.num_defaults = defaults.size();
  m.num_gt = gt.size();
  m.matched_gt.assign(defaults.size(), -1);
  m.labels.assign(defaults.size(), 0);
  if (gt.empty() || defaults.empty()) return m;

  const std::size_t D = defaults.size(), G = gt.size();
  std::vector<double> iou(G * D);
  for (std::size_t j = 0; j < G; ++j)
    for (std::size_t i = 0; i < D; ++i) iou[j * D + i] = jaccard(gt[j].box, defaults[i]);

  std::vector<bool> gt_done(G, false);
  for (std::size_t round = 0; round < std::min(G, D); ++round) {
    double best = -1.0;
    std::size_t bj = 0, bi = 0;
    for (std::size_t j = 0; j < G; ++j) {
      if (gt_done[j]) continue;
      for (std::size_t i = 0; i < D; ++i) {
        if (m.matched_gt[i] >= 0) continue;
        if (iou[j * D + i] > best) {
          best = iou[j * D + i];
          bj = j;
          bi = i;
        }
      }
    }
    gt_done[bj] = true;
    m.matched_gt[bi] = static_cast<long>(bj);
  }
  for (std::size_t i = 0; i < D; ++i) {
    if (m.matched_gt[i] >= 0) continue;
    double best = -1.0;
    std::size_t bj = 0;
    for (std::size_t j = 0; j < G; ++j)
      if (iou[j * D + i] > best) {
        best = iou[j * D + i];
        bj = j;
      }
    if (best >= threshold) m.matched_gt[i] = static_cast<long>(bj);
  }
  for (std::size_t i = 0; i < D; ++i)
    if (m.matched_gt[i] >= 0) {
      m.labels[i] = gt[static_cast<std::size_t>(m.matched_gt[i])].label;
      m.pos.push_back(i);
    }
  return m;
}

inline MatchAssignment match(const DefaultBoxSet& defaults, const std::vector<GroundTruth>& gt,
                             double threshold = 0.5) {
  return match(defaults.boxes, gt, threshold);
}

// Fills Neg with the unmatched boxes of highest background loss, at most
// ratio * max(N, 1) of them. Ties resolve to the lower index.
// Boxes flagged in `excluded` (when non-empty) are skipped.
inline void mine_hard_negatives(MatchAssignment& m, std::span<const double> background_loss,
                                double ratio = 3.0, const std::vector<bool>& excluded = {}) {
  std::vector<std::size_t> cand;
  for (std::size_t i = 0; i < m.num_defaults; ++i)
    if (m.matched_gt[i] < 0 && (excluded.empty() || !excluded[i])) cand.push_back(i);
  std::stable_sort(cand.begin(), cand.end(), [&](std::size_t a, std::size_t b) {
    return background_loss[a] > background_loss[b];
  });
  const auto limit = static_cast<std::size_t>(ratio * static_cast<double>(std::max<std::size_t>(m.n(), 1)));
  cand.resize(std::min(cand.size(), limit));
  std::sort(cand.begin(), cand.end());
  m.neg = std::move(cand);
}

// Unmatched default boxes that contain at least `coverage` of some gt box.
inline std::vector<bool> covering_boxes(const MatchAssignment& m, const std::vector<Box>& defaults,
                                        const std::vector<GroundTruth>& gt, double coverage) {
  std::vector<bool> out(defaults.size(), false);
  for (std::size_t i = 0; i < defaults.size(); ++i) {
    if (m.matched_gt[i] >= 0) continue;
    for (const auto& g : gt) {
      const double a = g.box.area();
      if (a > 0.0 && intersect(g.box, defaults[i]).area() >= coverage * a) {
        out[i] = true;
        break;
      }
    }
  }
  return out;
}

// Unmatched boxes whose IoU with some gt box reaches `iou`.
inline std::vector<bool> overlapping_boxes(const MatchAssignment& m, const std::vector<Box>& boxes,
                                           const std::vector<GroundTruth>& gt, double iou) {
  std::vector<bool> out(boxes.size(), false);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    if (m.matched_gt[i] >= 0) continue;
    for (const auto& g : gt)
      if (jaccard(g.box, boxes[i]) >= iou) {
        out[i] = true;
        break;
      }
  }
  return out;
}

// Background loss -log softmax(c_i)[0] per default box, the hard-mining key.
inline std::vector<double> background_losses(const Tensor& conf) {
  const std::size_t D = conf.dim(0), K1 = conf.dim(1);
  std::vector<double> out(D);
  for (std::size_t i = 0; i < D; ++i)
    out[i] = -log_softmax_at(conf.data().subspan(i * K1, K1), 0);
  return out;
}

// Encoded regression target per default box (zeros for unmatched boxes).
inline Tensor encode_targets(const MatchAssignment& m, const std::vector<Box>& defaults,
                             const std::vector<GroundTruth>& gt) {
  Tensor t({m.num_defaults, 4});
  for (std::size_t i : m.pos) {
    const Offsets o = encode_offsets(gt[static_cast<std::size_t>(m.matched_gt[i])].box, defaults[i]);
    for (std::size_t k = 0; k < 4; ++k) t.at(i, k) = o[k];
  }
  return t;
}

// --------------------------------------------------------------------------
// Losses

// Sum over Pos of smooth-L1 over the four offset coordinates.
inline double loc_loss(const MatchAssignment& m, const Tensor& loc, const Tensor& targets,
                       Tensor* grad = nullptr) {
  double total = 0.0;
  for (std::size_t i : m.pos)
    for (std::size_t k = 0; k < 4; ++k) {
      const double d = loc.at(i, k) - targets.at(i, k);
      total += smooth_l1(d);
      if (grad) grad->at(i, k) += smooth_l1_grad(d);
    }
  return total;
}

// -sum_{Pos} log c_i^{label} - sum_{Neg} log c_i^0 with softmax confidences.
inline double conf_loss(const MatchAssignment& m, const Tensor& conf, Tensor* grad = nullptr) {
  const std::size_t K1 = conf.dim(1);
  double total = 0.0;
  auto term = [&](std::size_t i, std::size_t label) {
    const auto logits = conf.data().subspan(i * K1, K1);
    total -= log_softmax_at(logits, label);
    if (grad) {
      const auto p = softmax(logits);
      for (std::size_t k = 0; k < K1; ++k) grad->at(i, k) += p[k] - (k == label ? 1.0 : 0.0);
    }
  };
  for (std::size_t i : m.pos) term(i, m.labels[i]);
  for (std::size_t i : m.neg) term(i, 0);
  return total;
}

// (L_conf + alpha * L_loc) / N, with N replaced by 1 when nothing matched.
// Reported as l_cls = L_conf / N, l_loc = alpha * L_loc / N.
inline LossBreakdown multibox_loss(const MatchAssignment& m, const Tensor& conf, const Tensor& loc,
                                   const Tensor& targets, double alpha = 1.0,
                                   Tensor* grad_conf = nullptr, Tensor* grad_loc = nullptr) {
  const double n = static_cast<double>(std::max<std::size_t>(m.n(), 1));
  Tensor gc, gl;
  if (grad_conf) gc = Tensor(conf.shape());
  if (grad_loc) gl = Tensor(loc.shape());
  const double lc = conf_loss(m, conf, grad_conf ? &gc : nullptr);
  const double ll = loc_loss(m, loc, targets, grad_loc ? &gl : nullptr);
  if (grad_conf)
    for (std::size_t i = 0; i < gc.size(); ++i) (*grad_conf)[i] += gc[i] / n;
  if (grad_loc)
    for (std::size_t i = 0; i < gl.size(); ++i) (*grad_loc)[i] += alpha * gl[i] / n;
  return make_breakdown(lc / n, alpha * ll / n, 0.0);
}

// --------------------------------------------------------------------------
// Network

struct Stage1Output {
  Tensor conf;  // [D, K+1]
  Tensor loc;   // [D, 4]
};

class Stage1Model {
 public:
  static constexpr std::size_t kBlocks = 4;
  static constexpr std::size_t kLevels = 3;

  explicit Stage1Model(const Stage1Config& config = {}, std::uint64_t seed = 1) : config_(config) {
    if (config.channels.size() != kBlocks) {
      throw Error(ErrorKind::InvalidArgument, "stage-1 network needs 4 block widths");
    }
    if (config.input_size < 16 || config.input_size % 16 != 0) {
      throw Error(ErrorKind::InvalidArgument, "stage-1 input size must be a positive multiple of 16");
    }
    if (config.slicing.scales.size() != kLevels) {
      throw Error(ErrorKind::InvalidArgument, "stage-1 uses exactly three scales, one per feature level");
    }
    Rng rng(seed);
    std::size_t in = 1;
    for (std::size_t b = 0; b < kBlocks; ++b) {
      blocks[b] = ConvKernel(config.channels[b], in, 3, 3, 1, 1);
      he_init(blocks[b], rng);
      in = config.channels[b];
    }
    const std::size_t A = config.slicing.ratios.size();
    for (std::size_t l = 0; l < kLevels; ++l) {
      const std::size_t c = config.channels[l + 1];
      conf_heads[l] = ConvKernel(A * (config.num_classes + 1), c, 3, 3, 1, 1);
      loc_heads[l] = ConvKernel(A * 4, c, 3, 3, 1, 1);
      he_init(conf_heads[l], rng, 0.1);
      he_init(loc_heads[l], rng, 0.1);
    }
  }

  const Stage1Config& config() const { return config_; }

  ParamList params() {
    ParamList p;
    for (std::size_t b = 0; b < kBlocks; ++b) p.add("stage1.block" + std::to_string(b), blocks[b]);
    for (std::size_t l = 0; l < kLevels; ++l) {
      p.add("stage1.conf" + std::to_string(l), conf_heads[l]);
      p.add("stage1.loc" + std::to_string(l), loc_heads[l]);
    }
    return p;
  }

  DefaultBoxConfig default_box_config() const {
    DefaultBoxConfig c;
    c.levels.clear();
    for (std::size_t l = 0; l < kLevels; ++l) {
      const std::size_t m = config_.input_size >> (l + 2);
      c.levels.emplace_back(m, m);
    }
    c.scales = config_.slicing.scales;
    c.reference_scale = *std::max_element(c.scales.begin(), c.scales.end());
    c.ratios = config_.slicing.ratios;
    return c;
  }

  DefaultBoxSet defaults_for(double patch_w, double patch_h) const {
    return default_boxes(patch_w, patch_h, default_box_config());
  }

  struct Trace {
    Tensor input;
    Tensor pre[kBlocks];       // conv outputs before relu
    PoolResult pooled[kBlocks];
  };

  // input: [1, 1, S, S]
  Stage1Output forward(const Tensor& input, Trace* trace = nullptr) const {
    const std::size_t S = config_.input_size;
    if (input.shape() != Shape{1, 1, S, S}) {
      throw Error(ErrorKind::ShapeMismatch, "stage-1 input " + shape_str(input.shape()) + " vs " +
                                                shape_str({1, 1, S, S}));
    }
    Trace local;
    Trace& t = trace ? *trace : local;
    t.input = input;
    const Tensor* x = &t.input;
    for (std::size_t b = 0; b < kBlocks; ++b) {
      t.pre[b] = conv2d(*x, blocks[b]);
      t.pooled[b] = max_pool2d(relu(t.pre[b]));
      x = &t.pooled[b].output;
    }
    const std::size_t A = config_.slicing.ratios.size(), K1 = config_.num_classes + 1;
    std::size_t D = 0;
    for (std::size_t l = 0; l < kLevels; ++l) {
      const std::size_t m = t.pooled[l + 1].output.dim(2);
      D += m * m * A;
    }
    Stage1Output out{Tensor({D, K1}), Tensor({D, 4})};
    std::size_t base = 0;
    for (std::size_t l = 0; l < kLevels; ++l) {
      const Tensor& f = t.pooled[l + 1].output;
      const Tensor c = conv2d(f, conf_heads[l]);
      const Tensor g = conv2d(f, loc_heads[l]);
      const std::size_t m = f.dim(2);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t cc = 0; cc < m; ++cc)
          for (std::size_t a = 0; a < A; ++a) {
            const std::size_t i = base + (r * m + cc) * A + a;
            for (std::size_t k = 0; k < K1; ++k) out.conf.at(i, k) = c.at(0, a * K1 + k, r, cc);
            for (std::size_t k = 0; k < 4; ++k) out.loc.at(i, k) = g.at(0, a * 4 + k, r, cc);
          }
      base += m * m * A;
    }
    return out;
  }

  // Accumulates parameter gradients into each parameter's grad buffer.
  void backward(const Trace& t, const Tensor& grad_conf, const Tensor& grad_loc) {
    const std::size_t A = config_.slicing.ratios.size(), K1 = config_.num_classes + 1;
    Tensor grad_feat[kBlocks];
    for (std::size_t b = 0; b < kBlocks; ++b) grad_feat[b] = Tensor(t.pooled[b].output.shape());
    std::size_t base = 0;
    for (std::size_t l = 0; l < kLevels; ++l) {
      const Tensor& f = t.pooled[l + 1].output;
      const std::size_t m = f.dim(2);
      Tensor gc({1, A * K1, m, m}), gl({1, A * 4, m, m});
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t cc = 0; cc < m; ++cc)
          for (std::size_t a = 0; a < A; ++a) {
            const std::size_t i = base + (r * m + cc) * A + a;
            for (std::size_t k = 0; k < K1; ++k) gc.at(0, a * K1 + k, r, cc) = grad_conf.at(i, k);
            for (std::size_t k = 0; k < 4; ++k) gl.at(0, a * 4 + k, r, cc) = grad_loc.at(i, k);
          }
      base += m * m * A;
      const ConvGrads cg = conv2d_backward(f, conf_heads[l], gc);
      const ConvGrads lg = conv2d_backward(f, loc_heads[l], gl);
      accumulate_grads(conf_heads[l], cg);
      accumulate_grads(loc_heads[l], lg);
      add_inplace(grad_feat[l + 1], cg.grad_input);
      add_inplace(grad_feat[l + 1], lg.grad_input);
    }
    for (std::size_t b = kBlocks; b-- > 0;) {
      const Tensor grelu = max_pool2d_backward(t.pre[b].shape(), t.pooled[b], grad_feat[b]);
      const Tensor gpre = relu_backward(t.pre[b], grelu);
      const Tensor& in = b == 0 ? t.input : t.pooled[b - 1].output;
      const ConvGrads g = conv2d_backward(in, blocks[b], gpre);
      accumulate_grads(blocks[b], g);
      if (b > 0) add_inplace(grad_feat[b - 1], g.grad_input);
    }
  }

  ConvKernel blocks[kBlocks];
  ConvKernel conf_heads[kLevels];
  ConvKernel loc_heads[kLevels];

 private:
  Stage1Config config_;
};

// --------------------------------------------------------------------------
// Patch-level helpers

// Ground-truth boxes of `image_gt` (working frame) that are at least
// `min_visible` inside `patch`, clipped and expressed in patch coordinates.
inline std::vector<GroundTruth> patch_ground_truth(const std::vector<GroundTruth>& image_gt,
                                                   const Box& patch, double min_visible) {
  std::vector<GroundTruth> out;
  for (const auto& g : image_gt) {
    const Box in = intersect(g.box, patch);
    const double area = g.box.area();
    if (area <= 0.0 || in.area() < min_visible * area) continue;
    out.push_back({transform_box(in, patch.x_min, patch.y_min, 1.0, 1.0), g.label});
  }
  return out;
}

inline Tensor patch_input(const Plane& work, const Box& patch, std::size_t size) {
  return resample_region(work, patch, size, size).reshaped({1, 1, size, size});
}

struct Detection {
  Box box;
  std::size_t label = 1;
  double score = 0.0;
};

struct PatchVerdict {
  Box patch;  // original-image coordinates
  std::size_t patch_index = 0;
  double defect_score = 0.0;
  bool selected = false;
  std::vector<Detection> detections;  // original-image coordinates
};

// Post-NMS detections of one patch in patch coordinates.
inline std::vector<Detection> detect_in_patch(const Stage1Model& model, const Stage1Output& out,
                                              double patch_w, double patch_h) {
  const Stage1Config& cfg = model.config();
  const DefaultBoxSet defaults = model.defaults_for(patch_w, patch_h);
  const std::size_t K1 = cfg.num_classes + 1;
  std::vector<ScoredBox> cands;
  for (std::size_t i = 0; i < defaults.size(); ++i) {
    const auto p = softmax(out.conf.data().subspan(i * K1, K1));
    std::size_t label = 1;
    for (std::size_t k = 2; k < K1; ++k)
      if (p[k] > p[label]) label = k;
    if (p[label] < cfg.min_score) continue;
    const Offsets d{out.loc.at(i, 0), out.loc.at(i, 1), out.loc.at(i, 2), out.loc.at(i, 3)};
    const Box b = clip_box(decode_offsets(d, defaults.boxes[i]), patch_w, patch_h);
    cands.push_back({b, p[label], label});
  }
  std::vector<Detection> dets;
  for (const auto& s : nms(cands, cfg.nms_threshold)) dets.push_back({s.box, s.label, s.score});
  return dets;
}

// Scores every patch of `grid` over the preprocessed working plane. Patch
// boxes and detections are mapped back by (scale_x, scale_y).
inline std::vector<PatchVerdict> score_patches(const Plane& work, const PatchGrid& grid,
                                               const Stage1Model& model, double threshold,
                                               double scale_x = 1.0, double scale_y = 1.0) {
  std::vector<PatchVerdict> verdicts(grid.patches.size());
  const std::size_t S = model.config().input_size;
  parallel_for(grid.patches.size(), [&](std::size_t i) {
    const Box& pb = grid.patches[i].box;
    const Stage1Output out = model.forward(patch_input(work, pb, S));
    const double sx = S / pb.width(), sy = S / pb.height();
    // Detections are decoded in network-input coordinates, then mapped back.
    auto dets = detect_in_patch(model, out, static_cast<double>(S), static_cast<double>(S));
    PatchVerdict v;
    v.patch_index = i;
    v.patch = transform_box(pb, 0, 0, scale_x, scale_y);
    for (auto& d : dets) {
      v.defect_score = std::max(v.defect_score, d.score);
      const Box in_work = transform_box(d.box, 0, 0, 1.0 / sx, 1.0 / sy);
      d.box = transform_box({in_work.x_min + pb.x_min, in_work.y_min + pb.y_min,
                             in_work.x_max + pb.x_min, in_work.y_max + pb.y_min},
                            0, 0, scale_x, scale_y);
    }
    v.detections = std::move(dets);
    v.selected = v.defect_score >= threshold;
    verdicts[i] = std::move(v);
  });
  return verdicts;
}

struct Stage1Selection {
  Tensor work;  // preprocessed [1,1,H,W]
  PatchGrid grid;
  std::vector<PatchVerdict> verdicts;
};

// preprocess -> slice -> per-patch network + NMS -> threshold. Verdict boxes
// are in original-image coordinates.
inline Stage1Selection select_patches_detailed(const Image& image, const Stage1Model& model,
                                               const Stage1Config& config) {
  Stage1Selection s;
  s.work = preprocess(image, config.work_size, config.work_size);
  const Plane work = s.work.reshaped({config.work_size, config.work_size});
  s.grid = slice_image(config.work_size, config.work_size, config.slicing);
  const double sx = static_cast<double>(image.width) / static_cast<double>(config.work_size);
  const double sy = static_cast<double>(image.height) / static_cast<double>(config.work_size);
  s.verdicts = score_patches(work, s.grid, model, config.select_threshold, sx, sy);
  return s;
}

inline std::vector<PatchVerdict> select_patches(const Image& image, const Stage1Model& model,
                                                const Stage1Config& config) {
  return select_patches_detailed(image, model, config).verdicts;
}

// One training sample: forward, match, hard-mine, loss, backward. Gradients
// accumulate into the parameters; the caller steps and zeroes them.
inline LossBreakdown stage1_train_patch(Stage1Model& model, const Tensor& input,
                                        const std::vector<GroundTruth>& gt_in_input) {
  const Stage1Config& cfg = model.config();
  Stage1Model::Trace trace;
  const Stage1Output out = model.forward(input, &trace);
  const double S = static_cast<double>(cfg.input_size);
  const DefaultBoxSet defaults = model.defaults_for(S, S);
  MatchAssignment m = match(defaults, gt_in_input, cfg.match_threshold);
  mine_hard_negatives(m, background_losses(out.conf), cfg.neg_ratio,
                      covering_boxes(m, defaults.boxes, gt_in_input, cfg.ignore_coverage));
  const Tensor targets = encode_targets(m, defaults.boxes, gt_in_input);
  Tensor gc(out.conf.shape()), gl(out.loc.shape());
  const LossBreakdown loss = multibox_loss(m, out.conf, out.loc, targets, cfg.alpha, &gc, &gl);
  model.backward(trace, gc, gl);
  return loss;
}

}  // namespace defect_forge

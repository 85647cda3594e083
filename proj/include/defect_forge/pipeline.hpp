#pragma once

// Two-stage orchestration: patch labelling, training loops for both stages and
// whole-image inspection with optional stage-1 bypass.

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "defect_forge/config.hpp"
#include "defect_forge/data_io.hpp"
#include "defect_forge/geometry.hpp"
#include "defect_forge/image.hpp"
#include "defect_forge/parallel.hpp"
#include "defect_forge/stage1.hpp"
#include "defect_forge/stage2.hpp"

namespace defect_forge {

// Image and mask in the square working frame.
struct WorkingImage {
  Plane work;  // [ws, ws] grayscale
  Plane mask;  // [ws, ws] binary; empty when the record carries no mask
  double scale_x = 1.0, scale_y = 1.0;  // working -> original
};

inline WorkingImage to_working(const Image& image, const Plane* mask, std::size_t work_size) {
  WorkingImage w;
  w.work = preprocess(image, work_size, work_size).reshaped({work_size, work_size});
  w.scale_x = static_cast<double>(image.width) / static_cast<double>(work_size);
  w.scale_y = static_cast<double>(image.height) / static_cast<double>(work_size);
  if (mask && mask->size() > 0) {
    if (mask->dim(0) == work_size && mask->dim(1) == work_size) {
      w.mask = threshold_plane(*mask, 0.5);
    } else {
      const Box full{0, 0, static_cast<double>(mask->dim(1)), static_cast<double>(mask->dim(0))};
      w.mask = threshold_plane(resample_region(*mask, full, work_size, work_size), 0.5);
    }
  }
  return w;
}

inline WorkingImage to_working(const DatasetRecord& r, std::size_t work_size) {
  return to_working(r.image, &r.mask, work_size);
}

inline Plane crop_box(const Plane& p, const Box& b) {
  return crop(p, static_cast<std::size_t>(b.y_min), static_cast<std::size_t>(b.x_min),
              static_cast<std::size_t>(std::lround(b.height())), static_cast<std::size_t>(std::lround(b.width())));
}

// Defect components inside a patch, in patch coordinates. A patch is
// defective iff this is non-empty.
inline std::vector<Box> patch_defects(const Plane& work_mask, const Box& patch, std::size_t min_pixels) {
  return component_boxes(crop_box(work_mask, patch), 0.5, min_pixels);
}

inline std::vector<std::vector<Box>> label_patches(const Plane& work_mask, const PatchGrid& grid,
                                                   std::size_t min_pixels) {
  std::vector<std::vector<Box>> out(grid.patches.size());
  for (std::size_t i = 0; i < grid.patches.size(); ++i) out[i] = patch_defects(work_mask, grid.patches[i].box, min_pixels);
  return out;
}

inline std::vector<GroundTruth> scale_boxes(const std::vector<Box>& boxes, double sx, double sy) {
  std::vector<GroundTruth> out;
  for (const Box& b : boxes) out.push_back({transform_box(b, 0, 0, sx, sy), 1});
  return out;
}

// Stage-2 targets for one patch resampled to the network input.
inline Stage2Targets stage2_targets(const Plane& work_mask, const Box& patch, std::size_t size) {
  Stage2Targets t;
  t.mask = threshold_plane(resample_region(work_mask, patch, size, size), 0.5);
  for (const Box& b : component_boxes(t.mask, 0.5, 4)) t.boxes.push_back({b, 1});
  return t;
}

// --------------------------------------------------------------------------
// Training

struct EpochLog {
  std::size_t stage = 1;
  std::size_t epoch = 0;
  std::size_t samples = 0;
  LossBreakdown mean;
  double seconds = 0.0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

inline std::string format_epoch(const EpochLog& e) {
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "stage=%zu epoch=%zu samples=%zu l_cls=%.6f l_loc=%.6f l_pat=%.6f total=%.6f time=%.1fs",
                e.stage, e.epoch, e.samples, e.mean.l_cls, e.mean.l_loc, e.mean.l_pat, e.mean.total, e.seconds);
  return buf;
}

namespace detail {

struct LabeledSet {
  PatchGrid grid;
  std::vector<std::vector<std::vector<Box>>> labels;  // [image][patch] -> defect boxes
};

inline LabeledSet label_records(const std::vector<const DatasetRecord*>& records, const PipelineConfig& cfg) {
  LabeledSet s;
  const std::size_t ws = cfg.stage1.work_size;
  s.grid = slice_image(ws, ws, cfg.stage1.slicing);
  s.labels.resize(records.size());
  parallel_for(records.size(), [&](std::size_t i) {
    const WorkingImage w = to_working(*records[i], ws);
    s.labels[i] = label_patches(w.mask, s.grid, cfg.train.min_defect_pixels);
  });
  return s;
}

// Picks up to n_pos defective and n_neg clean patch indices.
inline std::vector<std::size_t> sample_patches(const std::vector<std::vector<Box>>& labels, std::size_t n_pos,
                                               std::size_t n_neg, Rng& rng) {
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i].empty() ? neg : pos).push_back(i);
  rng.shuffle(pos);
  rng.shuffle(neg);
  pos.resize(std::min(pos.size(), n_pos));
  neg.resize(std::min(neg.size(), n_neg));
  pos.insert(pos.end(), neg.begin(), neg.end());
  rng.shuffle(pos);
  return pos;
}

template <typename Model, typename StepFn>
std::vector<EpochLog> train_loop(Model& model, const std::vector<const DatasetRecord*>& records,
                                 const PipelineConfig& cfg, std::size_t stage, std::size_t epochs, double lr,
                                 std::size_t n_pos, std::size_t n_neg, std::uint64_t seed_offset,
                                 StepFn&& step, const EpochCallback& on_epoch) {
  std::vector<EpochLog> logs;
  if (records.empty() || epochs == 0) return logs;
  const LabeledSet set = label_records(records, cfg);
  ParamList params = model.params();
  params.enable_grad();
  params.zero_grad();
  Rng rng(cfg.train.seed * 1000003ULL + seed_offset);
  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    rng.shuffle(order);
    EpochLog log;
    log.stage = stage;
    log.epoch = epoch;
    std::size_t pending = 0;
    auto flush = [&] {
      if (pending == 0) return;
      params.scale_grad(1.0 / static_cast<double>(pending));
      const double norm = params.grad_norm();
      if (cfg.train.clip_norm > 0.0 && norm > cfg.train.clip_norm) params.scale_grad(cfg.train.clip_norm / norm);
      params.step(lr);
      params.zero_grad();
      pending = 0;
    };
    for (std::size_t idx : order) {
      const WorkingImage w = to_working(*records[idx], cfg.stage1.work_size);
      for (std::size_t p : sample_patches(set.labels[idx], n_pos, n_neg, rng)) {
        log.mean += step(w, set.grid.patches[p].box, set.labels[idx][p]);
        ++log.samples;
        if (++pending == cfg.train.batch_size) flush();
      }
    }
    flush();
    if (log.samples > 0) log.mean = log.mean.scaled(1.0 / static_cast<double>(log.samples));
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    logs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return logs;
}

}  // namespace detail

inline std::vector<EpochLog> train_stage1(Stage1Model& model, const std::vector<const DatasetRecord*>& records,
                                          const PipelineConfig& cfg, const EpochCallback& on_epoch = {}) {
  const std::size_t S = model.config().input_size;
  return detail::train_loop(
      model, records, cfg, 1, cfg.train.epochs1, cfg.train.lr1, cfg.train.pos_per_image1,
      cfg.train.neg_per_image1, 1,
      [&](const WorkingImage& w, const Box& patch, const std::vector<Box>& defects) {
        const double sx = static_cast<double>(S) / patch.width(), sy = static_cast<double>(S) / patch.height();
        return stage1_train_patch(model, patch_input(w.work, patch, S), scale_boxes(defects, sx, sy));
      },
      on_epoch);
}

inline std::vector<EpochLog> train_stage2(Stage2Model& model, const std::vector<const DatasetRecord*>& records,
                                          const PipelineConfig& cfg, const EpochCallback& on_epoch = {}) {
  const std::size_t S = model.config().input_size;
  return detail::train_loop(
      model, records, cfg, 2, cfg.train.epochs2, cfg.train.lr2, cfg.train.pos_per_image2,
      cfg.train.neg_per_image2, 2,
      [&](const WorkingImage& w, const Box& patch, const std::vector<Box>&) {
        return model.train_step(patch_input(w.work, patch, S), stage2_targets(w.mask, patch, S));
      },
      on_epoch);
}

inline std::vector<const DatasetRecord*> record_pointers(const std::vector<DatasetRecord>& records) {
  std::vector<const DatasetRecord*> out;
  for (const auto& r : records) out.push_back(&r);
  return out;
}

// Records tagged with `split`.
inline std::vector<const DatasetRecord*> split_records(const std::vector<DatasetRecord>& records,
                                                       const std::string& split) {
  std::vector<const DatasetRecord*> out;
  for (const auto& r : records)
    if (r.split == split) out.push_back(&r);
  return out;
}

// --------------------------------------------------------------------------
// Inspection

struct InspectionTimings {
  double stage1_ms = 0.0;
  double stage2_ms = 0.0;
  double total_ms = 0.0;
};

struct InspectionResult {
  std::size_t width = 0, height = 0;
  bool stage1_enabled = true;
  PatchGrid grid;                     // working frame
  std::vector<PatchVerdict> verdicts;  // original frame; defect_score NaN when stage 1 is off
  std::vector<Detection> detections;   // stage-2 detections, original frame
  Plane probability;                   // [H, W] defect probability, original frame
  Plane mask;                          // binarized probability
  InspectionTimings timings;
  std::size_t patches_segmented = 0;
};

// Stage-2 masks of the given patches pasted (max) onto a working-frame canvas.
inline Plane segment_patches(const Plane& work, const PatchGrid& grid, const std::vector<std::size_t>& which,
                             const Stage2Model& model, std::vector<PatchSegmentation>* out = nullptr) {
  std::vector<PatchSegmentation> segs(which.size());
  parallel_for(which.size(), [&](std::size_t i) { segs[i] = segment_patch(work, grid.patches[which[i]].box, model); });
  Plane canvas(work.shape());
  for (std::size_t i = 0; i < which.size(); ++i) {
    const Box& b = grid.patches[which[i]].box;
    const auto x0 = static_cast<std::size_t>(b.x_min), y0 = static_cast<std::size_t>(b.y_min);
    const Plane& m = segs[i].mask.values;
    for (std::size_t y = 0; y < m.dim(0) && y0 + y < canvas.dim(0); ++y)
      for (std::size_t x = 0; x < m.dim(1) && x0 + x < canvas.dim(1); ++x)
        canvas.at(y0 + y, x0 + x) = std::max(canvas.at(y0 + y, x0 + x), m.at(y, x));
  }
  if (out) *out = std::move(segs);
  return canvas;
}

inline InspectionResult inspect(const Image& image, const Stage1Model& stage1, const Stage2Model& stage2,
                                const PipelineConfig& cfg, bool skip_stage1 = false) {
  using clock = std::chrono::steady_clock;
  auto ms = [](clock::duration d) { return std::chrono::duration<double, std::milli>(d).count(); };
  const auto t0 = clock::now();
  InspectionResult res;
  res.width = image.width;
  res.height = image.height;
  res.stage1_enabled = !skip_stage1;
  const std::size_t ws = cfg.stage1.work_size;
  const WorkingImage w = to_working(image, nullptr, ws);
  res.grid = slice_image(ws, ws, cfg.stage1.slicing);
  if (skip_stage1) {
    for (std::size_t i = 0; i < res.grid.patches.size(); ++i) {
      PatchVerdict v;
      v.patch_index = i;
      v.patch = transform_box(res.grid.patches[i].box, 0, 0, w.scale_x, w.scale_y);
      v.defect_score = std::numeric_limits<double>::quiet_NaN();
      v.selected = true;
      res.verdicts.push_back(std::move(v));
    }
  } else {
    res.verdicts = score_patches(w.work, res.grid, stage1, cfg.stage1.select_threshold, w.scale_x, w.scale_y);
  }
  const auto t1 = clock::now();
  std::vector<std::size_t> which;
  for (const auto& v : res.verdicts)
    if (v.selected) which.push_back(v.patch_index);
  std::vector<PatchSegmentation> segs;
  const Plane canvas = segment_patches(w.work, res.grid, which, stage2, &segs);
  res.patches_segmented = which.size();
  for (std::size_t i = 0; i < which.size(); ++i) {
    const Box& pb = res.grid.patches[which[i]].box;
    for (const auto& d : segs[i].detections) {
      const Box in_work{d.box.x_min + pb.x_min, d.box.y_min + pb.y_min, d.box.x_max + pb.x_min,
                        d.box.y_max + pb.y_min};
      res.detections.push_back({transform_box(in_work, 0, 0, w.scale_x, w.scale_y), d.label, d.score});
    }
  }
  if (canvas.dim(0) == image.height && canvas.dim(1) == image.width) {
    res.probability = canvas;
  } else {
    res.probability = resize_bilinear(canvas, image.height, image.width);
  }
  res.mask = threshold_plane(res.probability, cfg.mask_threshold);
  const auto t2 = clock::now();
  res.timings = {ms(t1 - t0), ms(t2 - t1), ms(t2 - t0)};
  return res;
}

// Original image with the mask blended in red and selected patches outlined
// in green.
inline Image render_overlay(const Image& image, const InspectionResult& r, double alpha = 0.5) {
  Image out(image.width, image.height, 3);
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t src_c = image.channels >= 3 ? c : 0;
        double v = image.at(y, x, src_c);
        if (r.mask.size() && r.mask.at(y, x) >= 0.5) v = (1 - alpha) * v + alpha * (c == 0 ? 255.0 : 0.0);
        out.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0));
      }
  auto plot = [&](long x, long y) {
    if (x < 0 || y < 0 || x >= static_cast<long>(image.width) || y >= static_cast<long>(image.height)) return;
    out.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), 0) = 0;
    out.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), 1) = 255;
    out.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), 2) = 0;
  };
  for (const auto& v : r.verdicts) {
    if (!v.selected) continue;
    const long x0 = std::lround(v.patch.x_min), y0 = std::lround(v.patch.y_min);
    const long x1 = std::lround(v.patch.x_max) - 1, y1 = std::lround(v.patch.y_max) - 1;
    for (long x = x0; x <= x1; ++x) {
      plot(x, y0);
      plot(x, y1);
    }
    for (long y = y0; y <= y1; ++y) {
      plot(x0, y);
      plot(x1, y);
    }
  }
  return out;
}

inline nlohmann::json box_json(const Box& b) { return {b.x_min, b.y_min, b.x_max, b.y_max}; }

inline nlohmann::json to_json(const InspectionResult& r) {
  nlohmann::json patches = nlohmann::json::array();
  for (const auto& v : r.verdicts) {
    const Patch& p = r.grid.patches[v.patch_index];
    nlohmann::json dets = nlohmann::json::array();
    for (const auto& d : v.detections) dets.push_back({{"box", box_json(d.box)}, {"label", d.label}, {"score", d.score}});
    patches.push_back({{"index", v.patch_index},
                       {"box", box_json(v.patch)},
                       {"scale", r.grid.scales[p.scale_index]},
                       {"ratio", std::to_string(static_cast<int>(r.grid.ratios[p.ratio_index].w)) + ":" +
                                     std::to_string(static_cast<int>(r.grid.ratios[p.ratio_index].h))},
                       {"defect_score", std::isnan(v.defect_score) ? nlohmann::json(nullptr) : nlohmann::json(v.defect_score)},
                       {"selected", v.selected},
                       {"detections", dets}});
  }
  nlohmann::json dets = nlohmann::json::array();
  for (const auto& d : r.detections) dets.push_back({{"box", box_json(d.box)}, {"label", d.label}, {"score", d.score}});
  std::size_t positive = 0;
  for (double v : r.mask.data()) positive += v >= 0.5 ? 1 : 0;
  std::size_t selected = 0;
  for (const auto& v : r.verdicts) selected += v.selected ? 1 : 0;
  return {{"image", {{"width", r.width}, {"height", r.height}}},
          {"stage1_enabled", r.stage1_enabled},
          {"patch_count", r.verdicts.size()},
          {"selected_count", selected},
          {"patches", patches},
          {"detections", dets},
          {"mask",
           {{"height", r.height},
            {"width", r.width},
            {"encoding", "rle-column-major-1-indexed"},
            {"counts", rle_encode(r.mask)},
            {"defect_pixels", positive}}},
          {"timings_ms", {{"stage1", r.timings.stage1_ms}, {"stage2", r.timings.stage2_ms}, {"total", r.timings.total_ms}}}};
}

// --------------------------------------------------------------------------
// Checkpoints holding either or both stages.

struct Models {
  Stage1Model stage1;
  Stage2Model stage2;
  bool has_stage1 = false, has_stage2 = false;
};

inline std::vector<CheckpointEntry> models_snapshot(Models& m) {
  std::vector<CheckpointEntry> out;
  if (m.has_stage1) {
    auto s = snapshot(m.stage1.params());
    out.insert(out.end(), s.begin(), s.end());
  }
  if (m.has_stage2) {
    auto s = snapshot(m.stage2.params());
    out.insert(out.end(), s.begin(), s.end());
  }
  return out;
}

// Routes entries by their "stage1." / "stage2." prefix.
inline void apply_models(Models& m, const std::vector<CheckpointEntry>& entries) {
  std::vector<CheckpointEntry> e1, e2;
  for (const auto& e : entries) {
    if (e.name.starts_with("stage1.")) e1.push_back(e);
    else if (e.name.starts_with("stage2.")) e2.push_back(e);
    else throw Error(ErrorKind::UnknownEntry, "checkpoint entry '" + e.name + "' belongs to no stage");
  }
  if (!e1.empty()) {
    apply_checkpoint(e1, m.stage1.params());
    m.has_stage1 = true;
  }
  if (!e2.empty()) {
    apply_checkpoint(e2, m.stage2.params());
    m.has_stage2 = true;
  }
}

inline Models make_models(const PipelineConfig& cfg) {
  return Models{Stage1Model(cfg.stage1, cfg.train.seed * 2 + 1), Stage2Model(cfg.stage2, cfg.train.seed * 2 + 2)};
}

}  // namespace defect_forge

#pragma once

// Pixel/patch/image metrics, defect-area binning, evaluation reports and the
// training-scale sweep.

#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "defect_forge/data_io.hpp"
#include "defect_forge/pipeline.hpp"

namespace defect_forge {

struct Confusion {
  std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::uint64_t total() const { return tp + fp + tn + fn; }
  double accuracy() const {
    return total() ? static_cast<double>(tp + tn) / static_cast<double>(total()) : 0.0;
  }
  Confusion& operator+=(const Confusion& o) {
    tp += o.tp;
    fp += o.fp;
    tn += o.tn;
    fn += o.fn;
    return *this;
  }
};

// Both masks are binarized at 0.5.
inline Confusion confusion(const Plane& pred, const Plane& gt) {
  if (pred.shape() != gt.shape()) {
    throw Error(ErrorKind::ShapeMismatch, "prediction " + shape_str(pred.shape()) + " vs ground truth " +
                                              shape_str(gt.shape()));
  }
  Confusion c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] >= 0.5, g = gt[i] >= 0.5;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

inline double pixel_accuracy(const Plane& pred, const Plane& gt) { return confusion(pred, gt).accuracy(); }

inline double mask_iou(const Plane& pred, const Plane& gt) {
  const Confusion c = confusion(pred, gt);
  const auto uni = c.tp + c.fp + c.fn;
  return uni ? static_cast<double>(c.tp) / static_cast<double>(uni) : 1.0;
}

// --------------------------------------------------------------------------
// Defect-area bins: [0, 10%), [10%, 30%), [30%, 100%].

enum class AreaBin { Below10 = 0, From10To30 = 1, From30 = 2 };

inline constexpr std::array<const char*, 3> kAreaBinNames{"<10%", "10-30%", ">=30%"};

inline AreaBin area_bin(double fraction) {
  if (fraction < 0.10) return AreaBin::Below10;
  if (fraction < 0.30) return AreaBin::From10To30;
  return AreaBin::From30;
}

inline std::array<std::vector<std::size_t>, 3> bin_by_defect_area(const std::vector<DatasetRecord>& records) {
  std::array<std::vector<std::size_t>, 3> bins;
  for (std::size_t i = 0; i < records.size(); ++i)
    bins[static_cast<std::size_t>(area_bin(mask_fraction(records[i].mask)))].push_back(i);
  return bins;
}

// --------------------------------------------------------------------------
// Reports

struct ImageEval {
  std::string id;
  double pixel_accuracy = 0.0;
  double area_fraction = 0.0;
  AreaBin bin = AreaBin::Below10;
  bool gt_defective = false, pred_defective = false;
  double runtime_ms = 0.0;
  Confusion pixels;
  Confusion patches;
};

struct EvalReport {
  std::vector<ImageEval> images;
  double mean_accuracy = 0.0;               // mean per-image pixel accuracy (primary ACC)
  std::array<double, 3> bin_accuracy{};     // NaN for empty bins
  std::array<std::size_t, 3> bin_count{};
  Confusion pixels;                         // summed over images
  Confusion patches;                        // stage-1 selection vs patch labels
  double patch_accuracy = 0.0;
  double mean_mask_iou = 0.0;               // stage 2 over defective patches
  std::size_t mask_iou_count = 0;
  double image_accuracy = 0.0;              // defective-or-not per image
  double mean_runtime_ms = 0.0;
  bool stage1_enabled = true;
};

struct EvalOptions {
  bool skip_stage1 = false;
  bool mask_iou = true;  // run stage 2 on every defective patch for the mask-IoU metric
};

inline EvalReport evaluate(const std::vector<const DatasetRecord*>& records, const Stage1Model& stage1,
                           const Stage2Model& stage2, const PipelineConfig& cfg, const EvalOptions& opt = {}) {
  EvalReport rep;
  rep.stage1_enabled = !opt.skip_stage1;
  std::array<double, 3> bin_sum{};
  double iou_sum = 0.0, runtime_sum = 0.0;
  std::size_t image_correct = 0;
  for (const DatasetRecord* r : records) {
    const InspectionResult res = inspect(r->image, stage1, stage2, cfg, opt.skip_stage1);
    ImageEval e;
    e.id = r->id;
    e.runtime_ms = res.timings.total_ms;
    e.pixels = confusion(res.mask, r->mask);
    e.pixel_accuracy = e.pixels.accuracy();
    e.area_fraction = mask_fraction(r->mask);
    e.bin = area_bin(e.area_fraction);
    e.gt_defective = e.pixels.tp + e.pixels.fn > 0;
    e.pred_defective = e.pixels.tp + e.pixels.fp > 0;

    const WorkingImage w = to_working(*r, cfg.stage1.work_size);
    const auto labels = label_patches(w.mask, res.grid, cfg.train.min_defect_pixels);
    std::vector<std::size_t> defective;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const bool g = !labels[i].empty(), p = res.verdicts[i].selected;
      if (g) defective.push_back(i);
      if (p && g) ++e.patches.tp;
      else if (p) ++e.patches.fp;
      else if (g) ++e.patches.fn;
      else ++e.patches.tn;
    }
    if (opt.mask_iou && !defective.empty()) {
      std::vector<PatchSegmentation> segs;
      segment_patches(w.work, res.grid, defective, stage2, &segs);
      for (std::size_t k = 0; k < defective.size(); ++k) {
        const Plane gt = crop_box(w.mask, res.grid.patches[defective[k]].box);
        iou_sum += mask_iou(threshold_plane(segs[k].mask.values, cfg.mask_threshold), gt);
        ++rep.mask_iou_count;
      }
    }
    rep.pixels += e.pixels;
    rep.patches += e.patches;
    rep.mean_accuracy += e.pixel_accuracy;
    bin_sum[static_cast<std::size_t>(e.bin)] += e.pixel_accuracy;
    ++rep.bin_count[static_cast<std::size_t>(e.bin)];
    runtime_sum += e.runtime_ms;
    image_correct += e.gt_defective == e.pred_defective ? 1 : 0;
    rep.images.push_back(std::move(e));
  }
  const double n = static_cast<double>(records.size());
  if (!records.empty()) {
    rep.mean_accuracy /= n;
    rep.mean_runtime_ms = runtime_sum / n;
    rep.image_accuracy = static_cast<double>(image_correct) / n;
  }
  for (std::size_t b = 0; b < 3; ++b)
    rep.bin_accuracy[b] = rep.bin_count[b] ? bin_sum[b] / static_cast<double>(rep.bin_count[b])
                                           : std::numeric_limits<double>::quiet_NaN();
  rep.patch_accuracy = rep.patches.accuracy();
  rep.mean_mask_iou = rep.mask_iou_count ? iou_sum / static_cast<double>(rep.mask_iou_count) : 0.0;
  return rep;
}

inline nlohmann::json to_json(const Confusion& c) {
  return {{"tp", c.tp}, {"fp", c.fp}, {"tn", c.tn}, {"fn", c.fn}};
}

inline nlohmann::json nan_null(double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); }

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json images = nlohmann::json::array();
  for (const auto& e : r.images)
    images.push_back({{"id", e.id},
                      {"pixel_accuracy", e.pixel_accuracy},
                      {"area_fraction", e.area_fraction},
                      {"bin", kAreaBinNames[static_cast<std::size_t>(e.bin)]},
                      {"gt_defective", e.gt_defective},
                      {"pred_defective", e.pred_defective},
                      {"runtime_ms", e.runtime_ms},
                      {"pixels", to_json(e.pixels)},
                      {"patches", to_json(e.patches)}});
  nlohmann::json bins = nlohmann::json::array();
  for (std::size_t b = 0; b < 3; ++b)
    bins.push_back({{"bin", kAreaBinNames[b]}, {"count", r.bin_count[b]}, {"accuracy", nan_null(r.bin_accuracy[b])}});
  return {{"stage1_enabled", r.stage1_enabled},
          {"image_count", r.images.size()},
          {"mean_accuracy", r.mean_accuracy},
          {"bins", bins},
          {"pixels", to_json(r.pixels)},
          {"patch_accuracy", r.patch_accuracy},
          {"patches", to_json(r.patches)},
          {"mean_mask_iou", r.mean_mask_iou},
          {"mask_iou_count", r.mask_iou_count},
          {"image_accuracy", r.image_accuracy},
          {"mean_runtime_ms", r.mean_runtime_ms},
          {"images", images}};
}

inline std::string format_report(const EvalReport& r) {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "images            %zu\n", r.images.size());
  out += buf;
  std::snprintf(buf, sizeof(buf), "ACC (pixel)       %.2f%%\n", 100.0 * r.mean_accuracy);
  out += buf;
  std::snprintf(buf, sizeof(buf), "patch accuracy    %.2f%%\n", 100.0 * r.patch_accuracy);
  out += buf;
  std::snprintf(buf, sizeof(buf), "image accuracy    %.2f%%\n", 100.0 * r.image_accuracy);
  out += buf;
  std::snprintf(buf, sizeof(buf), "mask IoU          %.3f (%zu patches)\n", r.mean_mask_iou, r.mask_iou_count);
  out += buf;
  std::snprintf(buf, sizeof(buf), "runtime / image   %.1f ms\n\n", r.mean_runtime_ms);
  out += buf;
  out += "area bin   images   ACC\n";
  for (std::size_t b = 0; b < 3; ++b) {
    if (r.bin_count[b]) std::snprintf(buf, sizeof(buf), "%-9s  %6zu   %.2f%%\n", kAreaBinNames[b], r.bin_count[b], 100.0 * r.bin_accuracy[b]);
    else std::snprintf(buf, sizeof(buf), "%-9s  %6zu   -\n", kAreaBinNames[b], r.bin_count[b]);
    out += buf;
  }
  std::snprintf(buf, sizeof(buf), "\npixels  TP %llu  FP %llu  TN %llu  FN %llu\n",
                static_cast<unsigned long long>(r.pixels.tp), static_cast<unsigned long long>(r.pixels.fp),
                static_cast<unsigned long long>(r.pixels.tn), static_cast<unsigned long long>(r.pixels.fn));
  out += buf;
  return out;
}

// --------------------------------------------------------------------------
// Training-scale sweep

struct SweepPoint {
  double fraction = 0.0;
  std::size_t defective = 0, clean = 0;
  double mean_accuracy = 0.0;
  double patch_accuracy = 0.0;
};

// First ceil(f * n) defective and first ceil(f * n) clean training records,
// keeping their order.
inline std::vector<const DatasetRecord*> stratified_subset(const std::vector<const DatasetRecord*>& train,
                                                           double fraction) {
  std::size_t n_def = 0, n_clean = 0;
  for (const auto* r : train) (r->defective() ? n_def : n_clean)++;
  const auto take = [&](std::size_t n) {
    return static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
  };
  std::size_t left_def = take(n_def), left_clean = take(n_clean);
  if (left_def == 0) {
    throw Error(ErrorKind::InvalidArgument, "training fraction " + std::to_string(fraction) +
                                                " leaves no defective images");
  }
  std::vector<const DatasetRecord*> out;
  for (const auto* r : train) {
    std::size_t& left = r->defective() ? left_def : left_clean;
    if (left > 0) {
      out.push_back(r);
      --left;
    }
  }
  return out;
}

// Trains both stages from the same seed on each stratified fraction of
// `train` and evaluates on `test`.
inline std::vector<SweepPoint> scale_sweep(const std::vector<const DatasetRecord*>& train,
                                           const std::vector<const DatasetRecord*>& test,
                                           const std::vector<double>& fractions, const PipelineConfig& cfg,
                                           const EpochCallback& on_epoch = {}) {
  std::vector<SweepPoint> out;
  for (double f : fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw Error(ErrorKind::InvalidArgument, "sweep fractions must lie in (0, 1]");
    const auto subset = stratified_subset(train, f);
    Models m = make_models(cfg);
    train_stage1(m.stage1, subset, cfg, on_epoch);
    train_stage2(m.stage2, subset, cfg, on_epoch);
    EvalOptions opt;
    opt.mask_iou = false;
    const EvalReport rep = evaluate(test, m.stage1, m.stage2, cfg, opt);
    SweepPoint p;
    p.fraction = f;
    for (const auto* r : subset) (r->defective() ? p.defective : p.clean)++;
    p.mean_accuracy = rep.mean_accuracy;
    p.patch_accuracy = rep.patch_accuracy;
    out.push_back(p);
  }
  return out;
}

inline nlohmann::json to_json(const std::vector<SweepPoint>& pts) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& p : pts)
    a.push_back({{"fraction", p.fraction},
                 {"defective", p.defective},
                 {"clean", p.clean},
                 {"mean_accuracy", p.mean_accuracy},
                 {"patch_accuracy", p.patch_accuracy}});
  return {{"sweep", a}};
}

inline std::string format_sweep(const std::vector<SweepPoint>& pts) {
  std::string out = "training scale        ACC\n";
  char buf[128];
  for (const auto& p : pts) {
    std::snprintf(buf, sizeof(buf), "%zu+%zu (%3.0f%%)   %8.2f%%\n", p.defective, p.clean, 100.0 * p.fraction,
                  100.0 * p.mean_accuracy);
    out += buf;
  }
  return out;
}

}  // namespace defect_forge

#pragma once

// Boxes, overlap, patch-grid slicing, default boxes, offset coding and NMS.
//
// Coordinates are continuous pixel-edge coordinates: pixel (row i, col j)
// covers [j, j+1) x [i, i+1), so an H x W image spans the box (0, 0, W, H).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "defect_forge/error.hpp"

namespace defect_forge {

struct Box {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  double center_x() const { return 0.5 * (x_min + x_max); }
  double center_y() const { return 0.5 * (y_min + y_max); }
  bool valid() const { return x_min <= x_max && y_min <= y_max; }

  friend bool operator==(const Box&, const Box&) = default;
};

inline Box box_from_center(double cx, double cy, double w, double h) {
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

inline Box clip_box(const Box& b, double width, double height) {
  Box c{std::clamp(b.x_min, 0.0, width), std::clamp(b.y_min, 0.0, height),
        std::clamp(b.x_max, 0.0, width), std::clamp(b.y_max, 0.0, height)};
  return c;
}

inline Box intersect(const Box& a, const Box& b) {
  Box r{std::max(a.x_min, b.x_min), std::max(a.y_min, b.y_min), std::min(a.x_max, b.x_max),
        std::min(a.y_max, b.y_max)};
  if (r.x_max < r.x_min) r.x_max = r.x_min;
  if (r.y_max < r.y_min) r.y_max = r.y_min;
  return r;
}

// Maps a box from one frame to another: subtract origin, then scale.
inline Box transform_box(const Box& b, double origin_x, double origin_y, double sx, double sy) {
  return {(b.x_min - origin_x) * sx, (b.y_min - origin_y) * sy, (b.x_max - origin_x) * sx,
          (b.y_max - origin_y) * sy};
}

// Jaccard overlap |A n B| / |A u B|; zero when the union is empty.
inline double jaccard(const Box& a, const Box& b) {
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

// --------------------------------------------------------------------------
// Patch grid

struct Ratio {
  double w = 1, h = 1;  // width : height
};

struct SliceConfig {
  std::vector<double> scales{64, 128, 256};
  std::vector<Ratio> ratios{{1, 1}, {1, 2}, {2, 1}};
  double stride_fraction = 0.5;
};

struct Patch {
  Box box;
  std::size_t scale_index = 0;
  std::size_t ratio_index = 0;
  std::size_t row = 0, col = 0;  // position within its (scale, ratio) grid
};

struct PatchGrid {
  std::size_t height = 0, width = 0;
  std::vector<Patch> patches;
  std::vector<double> scales;
  std::vector<Ratio> ratios;
};

// Nominal patch extent before clamping: area scale^2 with the ratio's aspect.
inline std::pair<std::size_t, std::size_t> patch_extent(double scale, const Ratio& r) {
  const double aspect = std::sqrt(r.w / r.h);
  const auto w = static_cast<std::size_t>(std::max(1.0, std::round(scale * aspect)));
  const auto h = static_cast<std::size_t>(std::max(1.0, std::round(scale / aspect)));
  return {w, h};
}

namespace detail {

// Start offsets of windows of `size` over `extent`; the last window is
// shifted inward to end flush with the edge.
inline std::vector<std::size_t> window_starts(std::size_t extent, std::size_t size,
                                              std::size_t stride) {
  std::vector<std::size_t> starts;
  if (size >= extent) return {0};
  for (std::size_t s = 0; s + size < extent; s += stride) starts.push_back(s);
  if (starts.empty() || starts.back() + size != extent) starts.push_back(extent - size);
  return starts;
}

}  // namespace detail

inline PatchGrid slice_image(std::size_t height, std::size_t width, const SliceConfig& config) {
  if (config.scales.empty() || config.ratios.empty()) {
    throw Error(ErrorKind::InvalidArgument, "slicing needs at least one scale and one ratio");
  }
  if (!(config.stride_fraction > 0.0 && config.stride_fraction <= 1.0)) {
    throw Error(ErrorKind::InvalidArgument, "stride fraction must lie in (0, 1]");
  }
  const double smallest = *std::min_element(config.scales.begin(), config.scales.end());
  if (static_cast<double>(height) < smallest || static_cast<double>(width) < smallest) {
    throw Error(ErrorKind::ImageTooSmall,
                "image " + std::to_string(height) + "x" + std::to_string(width) +
                    " is smaller than the minimum patch scale " + std::to_string(smallest) +
                    "; resize the image first");
  }
  PatchGrid grid{height, width, {}, config.scales, config.ratios};
  for (std::size_t si = 0; si < config.scales.size(); ++si) {
    std::vector<Patch> level;
    for (std::size_t ri = 0; ri < config.ratios.size(); ++ri) {
      auto [pw, ph] = patch_extent(config.scales[si], config.ratios[ri]);
      pw = std::min(pw, width);
      ph = std::min(ph, height);
      const auto sx = std::max<std::size_t>(1, static_cast<std::size_t>(pw * config.stride_fraction));
      const auto sy = std::max<std::size_t>(1, static_cast<std::size_t>(ph * config.stride_fraction));
      const auto xs = detail::window_starts(width, pw, sx);
      const auto ys = detail::window_starts(height, ph, sy);
      for (std::size_t r = 0; r < ys.size(); ++r)
        for (std::size_t c = 0; c < xs.size(); ++c) {
          const double x0 = static_cast<double>(xs[c]), y0 = static_cast<double>(ys[r]);
          level.push_back({{x0, y0, x0 + static_cast<double>(pw), y0 + static_cast<double>(ph)},
                           si, ri, r, c});
        }
    }
    std::stable_sort(level.begin(), level.end(), [](const Patch& a, const Patch& b) {
      if (a.row != b.row) return a.row < b.row;
      if (a.col != b.col) return a.col < b.col;
      return a.ratio_index < b.ratio_index;
    });
    grid.patches.insert(grid.patches.end(), level.begin(), level.end());
  }
  return grid;
}

// --------------------------------------------------------------------------
// Default boxes

struct DefaultBoxConfig {
  // Feature-map extents (rows, cols) per level, finest first.
  std::vector<std::pair<std::size_t, std::size_t>> levels{{8, 8}, {4, 4}, {2, 2}};
  // One scale per level; a level's box side is patch_side * scale / reference.
  std::vector<double> scales{64, 128, 256};
  double reference_scale = 256;
  std::vector<Ratio> ratios{{1, 1}, {1, 2}, {2, 1}};
};

struct DefaultBoxOrigin {
  std::size_t level = 0, row = 0, col = 0, index = 0;
};

struct DefaultBoxSet {
  std::vector<Box> boxes;
  std::vector<DefaultBoxOrigin> origins;
  std::size_t size() const { return boxes.size(); }
};

inline DefaultBoxSet default_boxes(double patch_w, double patch_h, const DefaultBoxConfig& config) {
  if (config.levels.size() != config.scales.size()) {
    throw Error(ErrorKind::InvalidArgument, "default boxes need one scale per feature level");
  }
  DefaultBoxSet set;
  for (std::size_t l = 0; l < config.levels.size(); ++l) {
    const auto [rows, cols] = config.levels[l];
    const double rel = config.scales[l] / config.reference_scale;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) {
        const double cx = (static_cast<double>(c) + 0.5) * patch_w / static_cast<double>(cols);
        const double cy = (static_cast<double>(r) + 0.5) * patch_h / static_cast<double>(rows);
        for (std::size_t a = 0; a < config.ratios.size(); ++a) {
          const double aspect = std::sqrt(config.ratios[a].w / config.ratios[a].h);
          const Box b = box_from_center(cx, cy, patch_w * rel * aspect, patch_h * rel / aspect);
          set.boxes.push_back(clip_box(b, patch_w, patch_h));
          set.origins.push_back({l, r, c, a});
        }
      }
  }
  return set;
}

// --------------------------------------------------------------------------
// Offset coding: (dcx / w_a, dcy / h_a, log(w_g / w_a), log(h_g / h_a))

using Offsets = std::array<double, 4>;

inline Offsets encode_offsets(const Box& gt, const Box& anchor) {
  if (!(anchor.width() > 0.0 && anchor.height() > 0.0)) {
    throw Error(ErrorKind::InvalidArgument, "anchor must have positive width and height");
  }
  if (!(gt.width() > 0.0 && gt.height() > 0.0)) {
    throw Error(ErrorKind::InvalidArgument, "ground-truth box must have positive width and height");
  }
  return {(gt.center_x() - anchor.center_x()) / anchor.width(),
          (gt.center_y() - anchor.center_y()) / anchor.height(),
          std::log(gt.width() / anchor.width()), std::log(gt.height() / anchor.height())};
}

inline Box decode_offsets(const Offsets& d, const Box& anchor) {
  if (!(anchor.width() > 0.0 && anchor.height() > 0.0)) {
    throw Error(ErrorKind::InvalidArgument, "anchor must have positive width and height");
  }
  // Keep exp() finite for wild untrained predictions.
  constexpr double kMaxLog = 10.0;
  const double cx = anchor.center_x() + d[0] * anchor.width();
  const double cy = anchor.center_y() + d[1] * anchor.height();
  const double w = anchor.width() * std::exp(std::min(d[2], kMaxLog));
  const double h = anchor.height() * std::exp(std::min(d[3], kMaxLog));
  return box_from_center(cx, cy, w, h);
}

// --------------------------------------------------------------------------
// Greedy NMS

struct ScoredBox {
  Box box;
  double score = 0;
  std::size_t label = 0;
};

// Indices (into `boxes`) of the survivors, in descending score order. Ties
// keep input order.
inline std::vector<std::size_t> nms_indices(const std::vector<ScoredBox>& boxes,
                                            double iou_threshold,
                                            std::size_t max_keep = static_cast<std::size_t>(-1)) {
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return boxes[a].score > boxes[b].score; });
  std::vector<std::size_t> keep;
  for (std::size_t idx : order) {
    if (keep.size() >= max_keep) break;
    bool ok = true;
    for (std::size_t k : keep)
      if (jaccard(boxes[idx].box, boxes[k].box) > iou_threshold) {
        ok = false;
        break;
      }
    if (ok) keep.push_back(idx);
  }
  return keep;
}

inline std::vector<ScoredBox> nms(const std::vector<ScoredBox>& boxes, double iou_threshold) {
  std::vector<ScoredBox> out;
  for (std::size_t i : nms_indices(boxes, iou_threshold)) out.push_back(boxes[i]);
  return out;
}

}  // namespace defect_forge

#pragma once

#include <cmath>
#include <cstddef>

namespace defect_forge {

// Per-component losses of one forward pass. `total` is always the plain sum
// of the three parts.
struct LossBreakdown {
  double l_cls = 0.0;
  double l_loc = 0.0;
  double l_pat = 0.0;
  double total = 0.0;

  LossBreakdown& operator+=(const LossBreakdown& o) {
    l_cls += o.l_cls;
    l_loc += o.l_loc;
    l_pat += o.l_pat;
    total += o.total;
    return *this;
  }
  LossBreakdown scaled(double s) const { return {l_cls * s, l_loc * s, l_pat * s, total * s}; }
};

inline LossBreakdown make_breakdown(double l_cls, double l_loc, double l_pat) {
  return {l_cls, l_loc, l_pat, l_cls + l_loc + l_pat};
}

inline double smooth_l1(double d) {
  const double a = std::abs(d);
  return a < 1.0 ? 0.5 * d * d : a - 0.5;
}

inline double smooth_l1_grad(double d) {
  if (d >= 1.0) return 1.0;
  if (d <= -1.0) return -1.0;
  return d;
}

}  // namespace defect_forge

#include <gtest/gtest.h>

#include <cmath>

#include "defect_forge/ops2.hpp"
#include "defect_forge/stage2.hpp"
#include "support.hpp"

using namespace defect_forge;
using testing_support::GradCheck;
using testing_support::random_kernel;
using testing_support::random_tensor;
using testing_support::weighted_sum;

namespace {

// Independent clamped bilinear read at array-index coordinates.
double bilinear_oracle(const Tensor& map, std::size_t c, double y, double x) {
  const auto H = static_cast<double>(map.dim(1)), W = static_cast<double>(map.dim(2));
  y = std::min(std::max(y, 0.0), H - 1);
  x = std::min(std::max(x, 0.0), W - 1);
  const double fy = std::floor(y), fx = std::floor(x);
  const double cy = std::min(fy + 1, H - 1), cx = std::min(fx + 1, W - 1);
  auto at = [&](double yy, double xx) { return map.at(c, std::size_t(yy), std::size_t(xx)); };
  const double ly = y - fy, lx = x - fx;
  return (1 - ly) * ((1 - lx) * at(fy, fx) + lx * at(fy, cx)) + ly * ((1 - lx) * at(cy, fx) + lx * at(cy, cx));
}

Stage2Config tiny_stage2() {
  Stage2Config c;
  c.input_size = 64;
  c.channels = 2;
  c.pyramid_channels = 2;
  c.fc_hidden = 4;
  c.rpn_train_top_k = 4;
  c.max_pos_rois = 2;
  return c;
}

}  // namespace

TEST(Deformable, ZeroOffsetsEqualConv) {
  Rng rng(31);
  const Tensor x = random_tensor({2, 3, 7, 6}, rng);
  const ConvKernel k = random_kernel(4, 3, 3, rng, 1, 1);
  ConvKernel off(18, 3, 3, 3, 1, 1);
  const Tensor a = deformable_conv2d(x, k, off), b = conv2d(x, k);
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(a[i], b[i]);
  const ConvKernel ks = random_kernel(2, 3, 3, rng, 2, 1);
  const Tensor c = deformable_conv2d(x, ks, ConvKernel(18, 3, 3, 3, 2, 1)), d = conv2d(x, ks);
  for (std::size_t i = 0; i < c.size(); ++i) ASSERT_EQ(c[i], d[i]);
}

TEST(Deformable, ConstantFieldIgnoresOffsets) {
  Rng rng(32);
  const Tensor x({1, 2, 12, 12}, 0.7);
  const ConvKernel k = random_kernel(3, 2, 3, rng, 1, 0);
  const Tensor off = random_tensor({1, 18, 10, 10}, rng, -0.9, 0.9);
  const Tensor a = deformable_conv2d_with_offsets(x, k, off), b = conv2d(x, k);
  // Interior positions: taps stay inside the map after a sub-pixel shift.
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t i = 1; i < 9; ++i)
      for (std::size_t j = 1; j < 9; ++j) EXPECT_NEAR(a.at(0, o, i, j), b.at(0, o, i, j), 1e-12);
}

TEST(Deformable, OffsetChannelMismatch) {
  Rng rng(33);
  const Tensor x = random_tensor({1, 2, 5, 5}, rng);
  const ConvKernel k = random_kernel(2, 2, 3, rng, 1, 1);
  EXPECT_THROW(deformable_conv2d(x, k, ConvKernel(17, 2, 3, 3, 1, 1)), Error);
}

TEST(Deformable, GradientsMatchFiniteDifferences) {
  Rng rng(34);
  Tensor x = random_tensor({1, 2, 6, 6}, rng);
  ConvKernel k = random_kernel(2, 2, 3, rng, 1, 1);
  Tensor off = random_tensor({1, 18, 6, 6}, rng, -1.5, 1.5);
  const Tensor w = random_tensor({1, 2, 6, 6}, rng);
  const DeformGrads g = deformable_conv2d_with_offsets_backward(x, k, off, w);
  auto f = [&] { return weighted_sum(deformable_conv2d_with_offsets(x, k, off), w); };
  GradCheck gc;
  testing_support::check_tensor(gc, x, g.grad_input, f);
  testing_support::check_tensor(gc, k.weights, g.grad_weights, f);
  testing_support::check_tensor(gc, k.bias, g.grad_bias, f);
  testing_support::check_tensor(gc, off, g.grad_offsets, f);
  EXPECT_TRUE(gc.ok()) << gc.summary();
}

TEST(Deformable, OffsetNetGradients) {
  Rng rng(35);
  Tensor x = random_tensor({1, 2, 5, 5}, rng);
  ConvKernel k = random_kernel(2, 2, 3, rng, 1, 1);
  ConvKernel net = random_kernel(18, 2, 3, rng, 1, 1);
  const Tensor w = random_tensor({1, 2, 5, 5}, rng);
  const DeformNetGrads g = deformable_conv2d_backward(x, k, net, w);
  auto f = [&] { return weighted_sum(deformable_conv2d(x, k, net), w); };
  GradCheck gc;
  testing_support::check_tensor(gc, x, g.grad_input, f);
  testing_support::check_tensor(gc, k.weights, g.grad_weights, f);
  testing_support::check_tensor(gc, net.weights, g.grad_offset_weights, f);
  testing_support::check_tensor(gc, net.bias, g.grad_offset_bias, f);
  EXPECT_TRUE(gc.ok()) << gc.summary();
}

TEST(RoiAlign, ConstantMap) {
  const Tensor map({3, 9, 11}, 2.5);
  for (const Box& roi : {Box{0, 0, 11, 9}, Box{1.3, 2.7, 5.1, 4.0}, Box{-2, -1, 3, 20}}) {
    const Tensor out = roi_align(map, roi, 4, 5, 2);
    EXPECT_EQ(out.shape(), (Shape{3, 4, 5}));
    for (double v : out.data()) EXPECT_NEAR(v, 2.5, 1e-12);
  }
}

TEST(RoiAlign, WholeMapReproducesCells) {
  Rng rng(36);
  const Tensor map = random_tensor({2, 6, 7}, rng);
  const Tensor out = roi_align(map, Box{0, 0, 7, 6}, 6, 7, 1);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], map[i], 1e-12);
}

TEST(RoiAlign, MatchesSamplerOracle) {
  Rng rng(37);
  const Tensor map = random_tensor({2, 10, 12}, rng);
  for (int t = 0; t < 20; ++t) {
    const double x0 = rng.uniform(-1, 8), y0 = rng.uniform(-1, 6);
    const Box roi{x0, y0, x0 + rng.uniform(0.5, 6), y0 + rng.uniform(0.5, 6)};
    const std::size_t oh = 3, ow = 4, s = 2;
    const Tensor out = roi_align(map, roi, oh, ow, s);
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = 0.0;
          for (std::size_t a = 0; a < s; ++a)
            for (std::size_t b = 0; b < s; ++b) {
              const double y = roi.y_min + roi.height() / double(oh) * (double(i) + (double(a) + 0.5) / double(s));
              const double x = roi.x_min + roi.width() / double(ow) * (double(j) + (double(b) + 0.5) / double(s));
              acc += bilinear_oracle(map, c, y - 0.5, x - 0.5);
            }
          EXPECT_NEAR(out.at(c, i, j), acc / double(s * s), 1e-12);
        }
  }
}

TEST(RoiAlign, TranslationConsistent) {
  Rng rng(38);
  const Tensor map = random_tensor({2, 20, 20}, rng);
  Tensor shifted({2, 20, 20});
  const std::size_t dy = 3, dx = 2;
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = dy; i < 20; ++i)
      for (std::size_t j = dx; j < 20; ++j) shifted.at(c, i, j) = map.at(c, i - dy, j - dx);
  const Box roi{2.3, 1.7, 9.6, 8.2};
  const Box moved{roi.x_min + dx, roi.y_min + dy, roi.x_max + dx, roi.y_max + dy};
  const Tensor a = roi_align(map, roi, 5, 5, 2), b = roi_align(shifted, moved, 5, 5, 2);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-9);
}

TEST(RoiAlign, ZeroAreaError) {
  const Tensor map({1, 4, 4});
  EXPECT_THROW(roi_align(map, Box{1, 1, 1, 3}, 2, 2), Error);
  EXPECT_THROW(roi_align(map, Box{0, 0, 2, 2}, 0, 2), Error);
}

TEST(RoiAlign, GradientMatchesFiniteDifferences) {
  Rng rng(39);
  Tensor map = random_tensor({2, 8, 9}, rng);
  const Box roi{0.7, 1.2, 6.9, 7.4};
  const Tensor w = random_tensor({2, 3, 3}, rng);
  const Tensor g = roi_align_backward(map.shape(), roi, 2, w);
  GradCheck gc;
  testing_support::check_tensor(gc, map, g, [&] { return weighted_sum(roi_align(map, roi, 3, 3, 2), w); });
  EXPECT_TRUE(gc.ok()) << gc.summary();
}

TEST(Pyramid, LevelSizesFor128Input) {
  Stage2Config cfg;
  cfg.input_size = 128;
  const Stage2Model m(cfg, 1);
  Stage2Model::TrunkTrace t;
  Rng rng(40);
  m.trunk_forward(random_tensor({1, 1, 128, 128}, rng, 0, 1), t);
  const std::size_t expect[] = {64, 32, 16, 8, 4, 2};
  for (std::size_t k = 0; k < kPyramidLevels; ++k) {
    EXPECT_EQ(t.fp.levels[k].dim(2), expect[k]);
    EXPECT_EQ(t.fp.levels[k].dim(3), expect[k]);
    EXPECT_EQ(t.fp.levels[k].dim(1), cfg.pyramid_channels);
  }
  EXPECT_EQ(t.fp.bias_level.dim(2), 1u);
  EXPECT_EQ(t.fp.bias_level.dim(3), 1u);
}

TEST(Pyramid, TooSmallInput) {
  Stage2Config cfg;
  cfg.input_size = 32;
  try {
    Stage2Model m(cfg, 1);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ImageTooSmall);
    EXPECT_NE(std::string(e.what()).find("64"), std::string::npos);
  }
  std::array<Tensor, kPyramidLevels> stages;
  std::size_t s = 16;
  for (auto& st : stages) {
    st = Tensor({1, 2, s, s});
    s = (s + 1) / 2;
  }
  Rng rng(41);
  EXPECT_THROW(build_pyramid(stages, PyramidParams(2, 2, rng)), Error);
}

TEST(Pyramid, ZeroFeaturesGiveZeroPyramid) {
  Rng rng(42);
  const PyramidParams p(3, 2, rng);
  std::array<Tensor, kPyramidLevels> stages;
  std::size_t s = 40;
  for (auto& st : stages) {
    st = Tensor({1, 3, s, s});
    s = (s + 1) / 2;
  }
  const FeaturePyramid fp = build_pyramid(stages, p);
  for (const auto& l : fp.levels)
    for (double v : l.data()) EXPECT_EQ(v, 0.0);
  for (double v : fp.bias_level.data()) EXPECT_EQ(v, 0.0);
}

TEST(Pyramid, GradientMatchesFiniteDifferences) {
  Rng rng(43);
  PyramidParams p(2, 2, rng);
  for (auto& l : p.lateral) l.bias = random_tensor(l.bias.shape(), rng);
  std::array<Tensor, kPyramidLevels> stages;
  std::array<Tensor, kPyramidLevels> w;
  std::size_t s = 33;
  for (std::size_t k = 0; k < kPyramidLevels; ++k) {
    stages[k] = random_tensor({1, 2, s, s}, rng);
    w[k] = random_tensor({1, 2, s, s}, rng);
    s = (s + 1) / 2;
  }
  ParamList params;
  p.collect(params);
  params.enable_grad();
  params.zero_grad();
  PyramidTrace t;
  build_pyramid(stages, p, &t);
  const auto gs = build_pyramid_backward(stages, p, t, w);
  auto f = [&] {
    const FeaturePyramid fp = build_pyramid(stages, p);
    double v = 0.0;
    for (std::size_t k = 0; k < kPyramidLevels; ++k) v += weighted_sum(fp.levels[k], w[k]);
    return v;
  };
  GradCheck gc;
  for (std::size_t k = 0; k < kPyramidLevels; ++k) testing_support::check_tensor(gc, stages[k], gs[k], f);
  for (const auto& item : params.items()) {
    const std::vector<double> g(item.tensor->grad().begin(), item.tensor->grad().end());
    GradCheck one;
    // Many ReLU and sampling kinks sit within 1e-5 of the operating point.
    testing_support::check_tensor(one, *item.tensor, std::span<const double>(g), f, 1e-7);
    gc.merge(one);
  }
  EXPECT_TRUE(gc.ok()) << gc.summary();
}

TEST(Rpn, ZeroHeadsGiveUniformObjectness) {
  Stage2Config cfg = tiny_stage2();
  cfg.rpn_top_k = 5000;
  cfg.rpn_nms = 1.0;  // keep every candidate
  Stage2Model m(cfg, 2);
  m.rpn_obj.weights.fill(0.0);
  m.rpn_box.weights.fill(0.0);
  Stage2Model::TrunkTrace t;
  Rng rng(44);
  m.trunk_forward(random_tensor({1, 1, 64, 64}, rng, 0, 1), t);
  for (double v : t.rpn.objectness.data()) EXPECT_EQ(v, 0.0);
  const auto props = rpn_propose(t.rpn, t.anchors, cfg, cfg.rpn_top_k);
  std::size_t usable = 0;
  for (const Box& a : t.anchors) usable += a.width() >= 1.0 && a.height() >= 1.0;
  EXPECT_EQ(props.size(), usable);
  for (const auto& p : props) EXPECT_EQ(p.objectness, 0.5);
  // Ties keep anchor order, so the survivors are the usable anchors verbatim.
  std::size_t k = 0;
  for (const Box& a : t.anchors) {
    if (a.width() < 1.0 || a.height() < 1.0) continue;
    const Box& b = props[k++].box;
    EXPECT_NEAR(b.x_min, a.x_min, 1e-9);
    EXPECT_NEAR(b.y_min, a.y_min, 1e-9);
    EXPECT_NEAR(b.x_max, a.x_max, 1e-9);
    EXPECT_NEAR(b.y_max, a.y_max, 1e-9);
  }
}

TEST(Rpn, TopOneIsBestObjectness) {
  const Stage2Config cfg = tiny_stage2();
  Rng rng(45);
  const std::vector<Box> anchors{{0, 0, 10, 10}, {20, 20, 40, 40}, {5, 30, 25, 50}};
  RpnOutput rpn{Tensor({3}), Tensor({3, 4})};
  rpn.objectness[0] = -1.0;
  rpn.objectness[1] = 2.0;
  rpn.objectness[2] = 0.5;
  const auto p = rpn_propose(rpn, anchors, cfg, 1);
  ASSERT_EQ(p.size(), 1u);
  EXPECT_EQ(p[0].box, anchors[1]);
  EXPECT_NEAR(p[0].objectness, 1.0 / (1.0 + std::exp(-2.0)), 1e-15);
}

TEST(PatchLoss, Examples) {
  Plane g = make_plane(3, 3);
  g.at(1, 1) = 1.0;
  EXPECT_LT(patch_loss(g, g), 1e-5);
  EXPECT_NEAR(patch_loss(make_plane(3, 3, 0.5), g), std::log(2.0), 1e-15);
  EXPECT_THROW(patch_loss(make_plane(3, 4), g), Error);
}

TEST(PatchLoss, MatchesDirectSummation) {
  Rng rng(46);
  const Plane p = random_tensor({8, 8}, rng, 0.01, 0.99);
  Plane g = make_plane(8, 8);
  for (double& v : g.data()) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < 64; ++i) s += g[i] > 0.5 ? -std::log(p[i]) : -std::log(1.0 - p[i]);
  EXPECT_NEAR(patch_loss(p, g), s / 64.0, 1e-12);
}

TEST(PatchLoss, GradientMatchesFiniteDifferences) {
  Rng rng(47);
  Plane p = random_tensor({5, 6}, rng, 0.05, 0.95);
  Plane g = make_plane(5, 6);
  for (double& v : g.data()) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
  Plane grad(p.shape());
  patch_loss(p, g, &grad);
  GradCheck gc;
  testing_support::check_tensor(gc, p, grad, [&] { return patch_loss(p, g); });
  EXPECT_TRUE(gc.ok()) << gc.summary();
}

TEST(CombinedLoss, Examples) {
  EXPECT_EQ(combined_loss(0, 0, 0).total, 0.0);
  const auto l = combined_loss(1.0, 0.5, 0.25);
  EXPECT_EQ(l.total, 1.75);
  EXPECT_THROW(combined_loss(-1.0, 0, 0), Error);
  EXPECT_THROW(combined_loss(std::nan(""), 0, 0), Error);
}

TEST(PasteMasks, MaxCombineAndBounds) {
  const Plane a = make_plane(4, 4, 0.2), b = make_plane(4, 4, 0.9);
  const Plane c = paste_masks({Box{0, 0, 8, 8}, Box{4, 4, 12, 12}}, {a, b}, 10, 10);
  EXPECT_NEAR(c.at(1, 1), 0.2, 1e-12);
  EXPECT_NEAR(c.at(5, 5), 0.9, 1e-12);
  EXPECT_NEAR(c.at(9, 9), 0.9, 1e-12);
  EXPECT_EQ(c.at(0, 9), 0.0);
  EXPECT_EQ(paste_masks({}, {}, 3, 3).size(), 9u);
}

TEST(Stage2Model, SegmentMaskInRangeAndShaped) {
  const Stage2Config cfg = tiny_stage2();
  const Stage2Model m(cfg, 3);
  Rng rng(48);
  const Stage2Result r = m.segment(random_tensor({1, 1, 64, 64}, rng, 0, 1));
  EXPECT_EQ(r.mask.shape(), (Shape{64, 64}));
  for (double v : r.mask.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Stage2Model, NoDetectionsGiveZeroMask) {
  Stage2Config cfg = tiny_stage2();
  cfg.det_threshold = 1.1;
  const Stage2Model m(cfg, 3);
  Rng rng(49);
  const Plane work = random_tensor({100, 90}, rng, 0, 1);
  const PatchSegmentation s = segment_patch(work, Box{10, 20, 50, 60}, m);
  EXPECT_TRUE(s.detections.empty());
  EXPECT_EQ(s.mask.width, 40u);
  EXPECT_EQ(s.mask.height, 40u);
  for (double v : s.mask.values.data()) EXPECT_EQ(v, 0.0);
}

TEST(Stage2Model, LossRecomposes) {
  const Stage2Config cfg = tiny_stage2();
  Stage2Model m(cfg, 5);
  Rng rng(50);
  const Tensor input = random_tensor({1, 1, 64, 64}, rng, 0, 1);
  Stage2Targets tg;
  tg.mask = make_plane(64, 64);
  for (std::size_t i = 20; i < 36; ++i)
    for (std::size_t j = 10; j < 40; ++j) tg.mask.at(i, j) = 1.0;
  tg.boxes.push_back({Box{10, 20, 40, 36}, 1});
  const LossBreakdown l = m.train_step(input, tg, nullptr, false);
  EXPECT_EQ(l.total, l.l_cls + l.l_loc + l.l_pat);
  const LossBreakdown again = combined_loss(l.l_cls, l.l_loc, l.l_pat);
  EXPECT_NEAR(again.total, l.total, 1e-12);
  EXPECT_GE(l.l_cls, 0.0);
  EXPECT_GE(l.l_loc, 0.0);
  EXPECT_GE(l.l_pat, 0.0);
}

// Full combined loss of the whole detector against central differences, on a
// model small enough to perturb every parameter.
TEST(Stage2Model, EndToEndGradient) {
  const Stage2Config cfg = tiny_stage2();
  Stage2Model m(cfg, 6);
  ParamList params = m.params();
  ASSERT_LE(params.count(), 2000u);
  Rng rng(51);
  // Zero biases leave pre-activations over all-zero inputs exactly on a ReLU kink.
  for (const auto& item : params.items())
    if (item.name.ends_with(".bias")) *item.tensor = random_tensor(item.tensor->shape(), rng, -0.1, 0.1);
  // Non-zero offsets exercise the deformable sampling path.
  m.dk_offsets.weights = random_tensor(m.dk_offsets.weights.shape(), rng, -0.05, 0.05);
  m.dk_offsets.bias = random_tensor(m.dk_offsets.bias.shape(), rng, -0.3, 0.3);
  const Tensor input = random_tensor({1, 1, 64, 64}, rng, 0, 1);
  Stage2Targets tg;
  tg.mask = make_plane(64, 64);
  for (std::size_t i = 12; i < 30; ++i)
    for (std::size_t j = 8; j < 44; ++j) tg.mask.at(i, j) = 1.0;
  tg.boxes.push_back({Box{8, 12, 44, 30}, 1});
  params.enable_grad();
  params.zero_grad();
  Stage2Selection sel;
  m.train_step(input, tg, &sel, true);
  ASSERT_TRUE(sel.frozen);
  ASSERT_GE(sel.roi_match.n(), 1u);
  auto f = [&] { return m.train_step(input, tg, &sel, false).total; };
  GradCheck gc;
  for (const auto& item : params.items()) {
    const std::vector<double> g(item.tensor->grad().begin(), item.tensor->grad().end());
    // Many ReLU and sampling kinks sit within 1e-5 of the operating point.
    testing_support::check_tensor(gc, *item.tensor, std::span<const double>(g), f, 1e-7);
  }
  EXPECT_TRUE(gc.ok()) << gc.summary();
}

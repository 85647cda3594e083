#include <gtest/gtest.h>

#include <bit>
#include <fstream>

#include "defect_forge/data_io.hpp"
#include "support.hpp"

using namespace defect_forge;
using testing_support::random_tensor;

namespace {

template <typename F>
ErrorKind error_kind(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorKind::Config;
}

class TempDir {
 public:
  TempDir() {
    const auto* info = testing::UnitTest::GetInstance()->current_test_info();
    path_ = fs::temp_directory_path() /
            ("df_" + std::string(info->test_suite_name()) + "_" + info->name() + "_" + std::to_string(::getpid()));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

Image gray(std::size_t w, std::size_t h, std::uint8_t v) { return Image(w, h, 1, v); }

Plane random_mask(Rng& rng, std::size_t h, std::size_t w, double density) {
  Plane m = make_plane(h, w);
  for (double& v : m.data()) v = rng.uniform() < density ? 1.0 : 0.0;
  return m;
}

}  // namespace

// ---- RLE

TEST(Rle, EmptyEncodingIsZeroMask) {
  const Plane m = rle_decode("", 3, 5);
  EXPECT_EQ(m.shape(), (Shape{3, 5}));
  for (double v : m.data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(rle_encode(m), "");
}

TEST(Rle, FirstRunFillsFirstColumn) {
  const Plane m = rle_decode("1 4", 4, 2);
  for (std::size_t y = 0; y < 4; ++y) {
    EXPECT_EQ(m.at(y, 0), 1.0);
    EXPECT_EQ(m.at(y, 1), 0.0);
  }
  EXPECT_EQ(rle_encode(m), "1 4");
}

TEST(Rle, RunsWrapAcrossColumns) {
  // Pixels 3..6 of a 4x2 mask: rows 2,3 of column 0 then rows 0,1 of column 1.
  const Plane m = rle_decode("3 4", 4, 2);
  EXPECT_EQ(m.at(0, 0), 0.0);
  EXPECT_EQ(m.at(2, 0), 1.0);
  EXPECT_EQ(m.at(3, 0), 1.0);
  EXPECT_EQ(m.at(0, 1), 1.0);
  EXPECT_EQ(m.at(1, 1), 1.0);
  EXPECT_EQ(m.at(2, 1), 0.0);
}

TEST(Rle, CanonicalTextRoundtrips) {
  for (const char* s : {"1 1", "2 3 7 2", "1 12", "5 1 7 1 9 4"}) EXPECT_EQ(rle_encode(rle_decode(s, 3, 4)), s);
}

TEST(Rle, RandomMasksRoundtrip) {
  Rng rng(3);
  for (int t = 0; t < 100; ++t) {
    const std::size_t h = 1 + static_cast<std::size_t>(rng.integer(0, 19));
    const std::size_t w = 1 + static_cast<std::size_t>(rng.integer(0, 19));
    const Plane m = random_mask(rng, h, w, rng.uniform());
    const Plane back = rle_decode(rle_encode(m), h, w);
    ASSERT_EQ(back.values(), m.values()) << "trial " << t;
  }
}

TEST(Rle, MalformedInputRejected) {
  EXPECT_EQ(error_kind([] { rle_decode("1", 4, 2); }), ErrorKind::Format);
  EXPECT_EQ(error_kind([] { rle_decode("1 x", 4, 2); }), ErrorKind::Format);
  EXPECT_EQ(error_kind([] { rle_decode("0 2", 4, 2); }), ErrorKind::Format);
  EXPECT_EQ(error_kind([] { rle_decode("1 0", 4, 2); }), ErrorKind::Format);
  EXPECT_EQ(error_kind([] { rle_decode("7 3", 4, 2); }), ErrorKind::Format);    // past the end
  EXPECT_EQ(error_kind([] { rle_decode("1 3 2 2", 4, 2); }), ErrorKind::Format);  // overlap
  EXPECT_EQ(error_kind([] { rle_decode("5 1 1 1", 4, 2); }), ErrorKind::Format);  // out of order
  EXPECT_EQ(error_kind([] { rle_decode("-1 2", 4, 2); }), ErrorKind::Format);
}

TEST(Rle, AdjacentRunsAccepted) {
  const Plane m = rle_decode("1 2 3 2", 4, 2);
  EXPECT_EQ(rle_encode(m), "1 4");
}

// ---- Components

TEST(Components, EightConnectivity) {
  Plane m = make_plane(6, 6);
  m.at(0, 0) = m.at(1, 1) = m.at(2, 2) = 1.0;  // diagonal chain: one component
  m.at(4, 4) = m.at(4, 5) = m.at(5, 4) = 1.0;
  const auto boxes = component_boxes(m);
  ASSERT_EQ(boxes.size(), 2u);
  EXPECT_EQ(boxes[0], (Box{0, 0, 3, 3}));
  EXPECT_EQ(boxes[1], (Box{4, 4, 6, 6}));
  EXPECT_EQ(component_boxes(m, 0.5, 4).size(), 0u);
  EXPECT_EQ(component_boxes(make_plane(3, 3)).size(), 0u);
}

TEST(Components, MaskFraction) {
  Plane m = make_plane(2, 5);
  m.at(0, 0) = m.at(1, 4) = 1.0;
  EXPECT_DOUBLE_EQ(mask_fraction(m), 0.2);
}

// ---- Layouts

TEST(Layout, ParseNames) {
  EXPECT_EQ(parse_layout("kolektor"), DatasetLayout::Kolektor);
  EXPECT_EQ(parse_layout("severstal"), DatasetLayout::Severstal);
  EXPECT_EQ(parse_layout("cplid"), DatasetLayout::Cplid);
  EXPECT_EQ(parse_layout("synthetic"), DatasetLayout::Synthetic);
  EXPECT_EQ(error_kind([] { parse_layout("voc"); }), ErrorKind::InvalidArgument);
}

TEST(LoadDataset, EmptyRootGivesNoRecords) {
  TempDir d;
  for (auto l : {DatasetLayout::Kolektor, DatasetLayout::Severstal, DatasetLayout::Cplid, DatasetLayout::Synthetic})
    EXPECT_TRUE(load_dataset(d.path(), l).empty());
}

TEST(LoadDataset, MissingRootIsIoError) {
  EXPECT_EQ(error_kind([] { load_dataset("/nonexistent/df_root", DatasetLayout::Kolektor); }), ErrorKind::Io);
}

TEST(LoadDataset, KolektorTwoPartsEightImages) {
  TempDir d;
  std::map<std::string, std::pair<std::size_t, std::size_t>> painted;  // id -> defect pixel
  for (int part = 0; part < 2; ++part) {
    const fs::path dir = d.path() / ("kos0" + std::to_string(part + 1));
    fs::create_directories(dir);
    for (int k = 0; k < 8; ++k) {
      const std::string stem = "Part" + std::to_string(k);
      write_png(dir / (stem + ".png"), gray(12, 10, static_cast<std::uint8_t>(10 * k + part)));
      Image label = gray(12, 10, 0);
      if (k % 3 == 0) {
        const std::size_t y = static_cast<std::size_t>(k % 10), x = static_cast<std::size_t>(part + k);
        label.at(y, x) = 255;
        painted[dir.filename().string() + "/" + stem] = {y, x};
      }
      write_png(dir / (stem + "_label.png"), label);
    }
  }
  const auto recs = load_dataset(d.path(), DatasetLayout::Kolektor);
  ASSERT_EQ(recs.size(), 16u);
  for (const auto& r : recs) {
    EXPECT_EQ(r.source, DatasetLayout::Kolektor);
    EXPECT_EQ(r.mask.shape(), (Shape{10, 12}));
    // The raster value identifies the image, so a mispaired mask would show.
    const int k = r.id.back() - '0', part = r.id[4] - '1';
    EXPECT_EQ(r.image.at(0, 0), 10 * k + part) << r.id;
    auto it = painted.find(r.id);
    if (it == painted.end()) {
      EXPECT_FALSE(r.defective()) << r.id;
      EXPECT_EQ(mask_fraction(r.mask), 0.0);
    } else {
      ASSERT_EQ(r.boxes.size(), 1u) << r.id;
      EXPECT_EQ(r.mask.at(it->second.first, it->second.second), 1.0);
      EXPECT_EQ(mask_fraction(r.mask), 1.0 / 120.0);
    }
  }
}

TEST(LoadDataset, KolektorMissingMaskNamesFile) {
  TempDir d;
  fs::create_directories(d.path() / "kos01");
  write_png(d.path() / "kos01" / "Part0.png", gray(4, 4, 0));
  try {
    load_dataset(d.path(), DatasetLayout::Kolektor);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Io);
    EXPECT_NE(std::string(e.what()).find("Part0_label.png"), std::string::npos);
  }
}

TEST(LoadDataset, UnreadableRasterIsError) {
  TempDir d;
  fs::create_directories(d.path() / "kos01");
  std::ofstream(d.path() / "kos01" / "Part0.png") << "not a png";
  write_png(d.path() / "kos01" / "Part0_label.png", gray(4, 4, 0));
  EXPECT_EQ(error_kind([&] { load_dataset(d.path(), DatasetLayout::Kolektor); }), ErrorKind::Format);
}

TEST(LoadDataset, SeverstalRleRowMatchesRaster) {
  TempDir d;
  fs::create_directories(d.path() / "train_images");
  write_png(d.path() / "train_images" / "a.png", gray(7, 5, 90));
  write_png(d.path() / "train_images" / "b.png", gray(7, 5, 90));
  Rng rng(11);
  const Plane truth = random_mask(rng, 5, 7, 0.3);
  std::ofstream(d.path() / "train.csv") << "ImageId,ClassId,EncodedPixels\na.png,3," << rle_encode(truth) << "\n";
  const auto recs = load_dataset(d.path(), DatasetLayout::Severstal);
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[0].id, "a");
  EXPECT_EQ(recs[0].mask.values(), truth.values());
  ASSERT_EQ(recs[0].class_masks.count(3), 1u);
  EXPECT_EQ(recs[0].class_masks.at(3).values(), truth.values());
  EXPECT_FALSE(recs[1].defective());
}

TEST(LoadDataset, SeverstalClassesCollapse) {
  TempDir d;
  fs::create_directories(d.path() / "train_images");
  write_png(d.path() / "train_images" / "a.png", gray(2, 4, 0));
  std::ofstream(d.path() / "train.csv") << "ImageId,ClassId,EncodedPixels\na.png,1,1 2\na.png,2,7 2\n";
  const auto recs = load_dataset(d.path(), DatasetLayout::Severstal);
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_EQ(rle_encode(recs[0].mask), "1 2 7 2");
  EXPECT_EQ(recs[0].class_masks.size(), 2u);
}

TEST(LoadDataset, SeverstalErrors) {
  TempDir d;
  fs::create_directories(d.path() / "train_images");
  write_png(d.path() / "train_images" / "a.png", gray(2, 4, 0));
  std::ofstream(d.path() / "train.csv") << "ImageId,ClassId,EncodedPixels\nghost.png,1,1 2\n";
  EXPECT_EQ(error_kind([&] { load_dataset(d.path(), DatasetLayout::Severstal); }), ErrorKind::Io);
  std::ofstream(d.path() / "train.csv") << "ImageId,ClassId,EncodedPixels\na.png,1\n";
  EXPECT_EQ(error_kind([&] { load_dataset(d.path(), DatasetLayout::Severstal); }), ErrorKind::Format);
  std::ofstream(d.path() / "train.csv") << "ImageId,ClassId,EncodedPixels\na.png,1,1 99\n";
  EXPECT_EQ(error_kind([&] { load_dataset(d.path(), DatasetLayout::Severstal); }), ErrorKind::Format);
}

TEST(LoadDataset, CplidNormalAndDefect) {
  TempDir d;
  for (const char* sub : {"normal", "defect", "defect_mask"}) fs::create_directories(d.path() / sub);
  write_png(d.path() / "normal" / "n0.png", gray(6, 6, 200));
  write_png(d.path() / "normal" / "n1.png", gray(6, 6, 200));
  write_png(d.path() / "defect" / "d0.png", gray(6, 6, 100));
  Image m = gray(6, 6, 0);
  m.at(2, 3) = m.at(3, 3) = 255;
  write_png(d.path() / "defect_mask" / "d0.png", m);
  const auto recs = load_dataset(d.path(), DatasetLayout::Cplid);
  ASSERT_EQ(recs.size(), 3u);
  EXPECT_FALSE(recs[0].defective());
  EXPECT_FALSE(recs[1].defective());
  ASSERT_TRUE(recs[2].defective());
  EXPECT_EQ(recs[2].boxes[0].box, (Box{3, 2, 4, 4}));

  fs::remove(d.path() / "defect_mask" / "d0.png");
  EXPECT_EQ(error_kind([&] { load_dataset(d.path(), DatasetLayout::Cplid); }), ErrorKind::Io);
  write_png(d.path() / "defect_mask" / "d0.png", gray(6, 6, 0));
  EXPECT_EQ(error_kind([&] { load_dataset(d.path(), DatasetLayout::Cplid); }), ErrorKind::Format);
}

TEST(LoadDataset, MaskShapeMismatch) {
  TempDir d;
  for (const char* sub : {"defect", "defect_mask"}) fs::create_directories(d.path() / sub);
  write_png(d.path() / "defect" / "d0.png", gray(6, 6, 100));
  write_png(d.path() / "defect_mask" / "d0.png", gray(5, 6, 255));
  EXPECT_EQ(error_kind([&] { load_dataset(d.path(), DatasetLayout::Cplid); }), ErrorKind::ShapeMismatch);
}

// ---- Synthetic

namespace {

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.width = 64;
  s.height = 64;
  s.seed = 99;
  return s;
}

}  // namespace

TEST(Synthetic, SameSeedBitIdentical) {
  const auto a = generate_synthetic(small_spec(), 12), b = generate_synthetic(small_spec(), 12);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].id, b[i].id);
    EXPECT_EQ(a[i].image.pixels, b[i].image.pixels);
    EXPECT_EQ(a[i].mask.values(), b[i].mask.values());
    EXPECT_EQ(a[i].split, b[i].split);
  }
  SyntheticSpec other = small_spec();
  other.seed = 100;
  const auto c = generate_synthetic(other, 12);
  std::size_t differ = 0;
  for (std::size_t i = 0; i < a.size(); ++i) differ += a[i].image.pixels != c[i].image.pixels;
  EXPECT_GT(differ, 0u);
}

TEST(Synthetic, RecordDependsOnlyOnIndex) {
  // A prefix of a longer run matches, split tags aside.
  const auto a = generate_synthetic(small_spec(), 5), b = generate_synthetic(small_spec(), 9);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].image.pixels, b[i].image.pixels);
}

TEST(Synthetic, ZeroDefectsGiveZeroMasks) {
  SyntheticSpec s = small_spec();
  s.min_defects = s.max_defects = 0;
  for (const auto& r : generate_synthetic(s, 10)) {
    EXPECT_FALSE(r.defective());
    EXPECT_EQ(mask_fraction(r.mask), 0.0);
  }
}

TEST(Synthetic, AreaTargetTenPercent) {
  SyntheticSpec s;
  s.width = s.height = 96;
  s.area_fraction = 0.10;
  s.defect_free_fraction = 0.0;
  s.shapes = {DefectShape::Rectangle, DefectShape::Scratch, DefectShape::Blob};
  const auto recs = generate_synthetic(s, 100);
  double sum = 0.0;
  for (const auto& r : recs) sum += mask_fraction(r.mask);
  const double mean = sum / 100.0;
  EXPECT_GE(mean, 0.08);
  EXPECT_LE(mean, 0.12);
}

TEST(Synthetic, PerImageAreaWithinTwentyPercent) {
  SyntheticSpec s = small_spec();
  s.shapes = {DefectShape::Rectangle, DefectShape::Scratch, DefectShape::Blob};
  s.area_fraction = 0.05;
  for (const auto& r : generate_synthetic(s, 60)) {
    if (!r.defective()) continue;
    EXPECT_NEAR(mask_fraction(r.mask), 0.05, 0.2 * 0.05) << r.id;
  }
}

TEST(Synthetic, BoxesAreMaskComponents) {
  for (const auto& r : generate_synthetic(small_spec(), 20)) {
    const auto boxes = component_boxes(r.mask);
    ASSERT_EQ(r.boxes.size(), boxes.size());
    for (std::size_t k = 0; k < boxes.size(); ++k) EXPECT_EQ(r.boxes[k].box, boxes[k]);
    EXPECT_EQ(r.mask.dim(0), r.image.height);
    EXPECT_EQ(r.mask.dim(1), r.image.width);
  }
}

TEST(Synthetic, TrailingRecordsAreTest) {
  SyntheticSpec s = small_spec();
  s.test_fraction = 0.25;
  const auto recs = generate_synthetic(s, 8);
  for (std::size_t i = 0; i < recs.size(); ++i) EXPECT_EQ(recs[i].split, i >= 6 ? "test" : "train");
}

TEST(Synthetic, InfeasibleSpecsRejected) {
  SyntheticSpec s = small_spec();
  s.area_fraction = 0.95;
  EXPECT_EQ(error_kind([&] { generate_synthetic(s, 1); }), ErrorKind::InvalidArgument);
  s = small_spec();
  s.area_fraction = 0.0;
  EXPECT_EQ(error_kind([&] { generate_synthetic(s, 1); }), ErrorKind::InvalidArgument);
  s = small_spec();
  s.min_defects = 3;
  s.max_defects = 2;
  EXPECT_EQ(error_kind([&] { generate_synthetic(s, 1); }), ErrorKind::InvalidArgument);
  s = small_spec();
  s.shapes.clear();
  EXPECT_EQ(error_kind([&] { generate_synthetic(s, 1); }), ErrorKind::InvalidArgument);
}

TEST(Synthetic, SpecJsonRoundtripAndUnknownKey) {
  SyntheticSpec s = small_spec();
  s.shapes = {DefectShape::Blob};
  s.contrast = 0.5;
  const SyntheticSpec back = synthetic_spec_from_json(to_json(s));
  EXPECT_EQ(to_json(back), to_json(s));
  EXPECT_EQ(error_kind([] { synthetic_spec_from_json({{"colour", 1}}); }), ErrorKind::Config);
  EXPECT_EQ(error_kind([] { synthetic_spec_from_json({{"shapes", {"star"}}}); }), ErrorKind::Config);
}

TEST(Synthetic, WrittenDatasetReloads) {
  TempDir d;
  const auto recs = generate_synthetic(small_spec(), 6);
  const auto manifest = write_synthetic_dataset(d.path(), small_spec(), recs);
  EXPECT_EQ(manifest["statistics"]["count"], 6);
  const auto back = load_dataset(d.path(), DatasetLayout::Synthetic);
  ASSERT_EQ(back.size(), recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    EXPECT_EQ(back[i].id, recs[i].id);
    EXPECT_EQ(back[i].split, recs[i].split);
    EXPECT_EQ(back[i].image.pixels, recs[i].image.pixels);
    EXPECT_EQ(back[i].mask.values(), recs[i].mask.values());
  }
}

// ---- Checkpoints

namespace {

struct TwoTensors {
  Tensor a{Shape{2, 3}}, b{Shape{4}};
  ParamList params() {
    ParamList p;
    p.add("net.a", a);
    p.add("net.b", b);
    return p;
  }
};

}  // namespace

TEST(Checkpoint, EmptyModelIsValidFile) {
  const std::string buf = encode_checkpoint({});
  EXPECT_EQ(buf.size(), 16u);
  EXPECT_EQ(buf.substr(0, 8), std::string("DFCKPT\r\n"));
  EXPECT_TRUE(decode_checkpoint(buf).empty());
}

TEST(Checkpoint, LayoutIsLittleEndian) {
  Tensor t(Shape{1}, std::vector<double>{1.0});
  const std::string buf = encode_checkpoint({{"x", t}});
  // magic, version, count, name length, name, rank, dim, payload
  ASSERT_EQ(buf.size(), 8u + 4 + 4 + 4 + 1 + 4 + 8 + 8);
  EXPECT_EQ(static_cast<unsigned char>(buf[8]), 1);
  EXPECT_EQ(static_cast<unsigned char>(buf[12]), 1);
  EXPECT_EQ(buf[20], 'x');
  const std::uint64_t one = std::bit_cast<std::uint64_t>(1.0);
  for (int i = 0; i < 8; ++i)
    EXPECT_EQ(static_cast<unsigned char>(buf[buf.size() - 8 + static_cast<std::size_t>(i)]), (one >> (8 * i)) & 0xFF);
}

TEST(Checkpoint, RoundtripBitExact) {
  TempDir d;
  Rng rng(5);
  TwoTensors m;
  m.a = random_tensor(m.a.shape(), rng);
  m.b = random_tensor(m.b.shape(), rng, -1e300, 1e300);
  m.b[0] = -0.0;
  m.b[1] = std::numeric_limits<double>::denorm_min();
  save_checkpoint(d.path() / "ck.bin", m.params());
  TwoTensors fresh;
  EXPECT_EQ(apply_checkpoint(load_checkpoint(d.path() / "ck.bin"), fresh.params()), 2u);
  for (std::size_t i = 0; i < m.a.size(); ++i)
    EXPECT_EQ(std::bit_cast<std::uint64_t>(fresh.a[i]), std::bit_cast<std::uint64_t>(m.a[i]));
  for (std::size_t i = 0; i < m.b.size(); ++i)
    EXPECT_EQ(std::bit_cast<std::uint64_t>(fresh.b[i]), std::bit_cast<std::uint64_t>(m.b[i]));
}

TEST(Checkpoint, CorruptedMagic) {
  TwoTensors m;
  std::string buf = encode_checkpoint(snapshot(m.params()));
  buf[0] = 'X';
  EXPECT_EQ(error_kind([&] { decode_checkpoint(buf); }), ErrorKind::Format);
}

TEST(Checkpoint, VersionMismatch) {
  TwoTensors m;
  std::string buf = encode_checkpoint(snapshot(m.params()));
  buf[8] = 2;
  EXPECT_EQ(error_kind([&] { decode_checkpoint(buf); }), ErrorKind::Version);
}

TEST(Checkpoint, TruncatedAtEveryLength) {
  TwoTensors m;
  const std::string buf = encode_checkpoint(snapshot(m.params()));
  for (std::size_t n = 0; n < buf.size(); ++n)
    ASSERT_EQ(error_kind([&] { decode_checkpoint(buf.substr(0, n)); }), ErrorKind::Truncated) << n;
  EXPECT_EQ(error_kind([&] { decode_checkpoint(buf + "z"); }), ErrorKind::Format);
}

TEST(Checkpoint, UnknownEntryAndShapeMismatch) {
  TwoTensors m;
  Tensor extra(Shape{1});
  EXPECT_EQ(error_kind([&] { apply_checkpoint({{"net.c", extra}}, m.params()); }), ErrorKind::UnknownEntry);
  EXPECT_EQ(error_kind([&] { apply_checkpoint({{"net.a", extra}}, m.params()); }), ErrorKind::ShapeMismatch);
}

TEST(Checkpoint, MissingFileIsIoError) {
  EXPECT_EQ(error_kind([] { load_checkpoint("/nonexistent/ck.bin"); }), ErrorKind::Io);
}

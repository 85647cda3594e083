#pragma once

// Dataset ingestion, the run-length mask codec, synthetic defect images and
// model checkpoints.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "defect_forge/error.hpp"
#include "defect_forge/geometry.hpp"
#include "defect_forge/image.hpp"
#include "defect_forge/params.hpp"
#include "defect_forge/random.hpp"
#include "defect_forge/stage1.hpp"
#include "defect_forge/tensor.hpp"

namespace defect_forge {

namespace fs = std::filesystem;

// --------------------------------------------------------------------------
// RLE: space-separated "start length" pairs, 1-indexed, column-major
// (top-to-bottom, then left-to-right).

inline Plane rle_decode(std::string_view text, std::size_t height, std::size_t width) {
  Plane mask = make_plane(height, width);
  std::vector<std::uint64_t> nums;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i >= text.size()) break;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    std::uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(text.data() + i, text.data() + j, v);
    if (ec != std::errc{} || ptr != text.data() + j) {
      throw Error(ErrorKind::Format, "RLE token '" + std::string(text.substr(i, j - i)) + "' is not a number");
    }
    nums.push_back(v);
    i = j;
  }
  if (nums.size() % 2 != 0) throw Error(ErrorKind::Format, "RLE has an odd number of values");
  const std::uint64_t total = static_cast<std::uint64_t>(height) * width;
  std::uint64_t prev_end = 0;  // one past the last covered 1-indexed pixel
  for (std::size_t k = 0; k < nums.size(); k += 2) {
    const std::uint64_t start = nums[k], len = nums[k + 1];
    if (start < 1 || len < 1) throw Error(ErrorKind::Format, "RLE starts and lengths must be >= 1");
    if (k > 0 && start < prev_end) {
      throw Error(ErrorKind::Format, "RLE run at " + std::to_string(start) + " overlaps or is out of order");
    }
    if (start + len - 1 > total) {
      throw Error(ErrorKind::Format, "RLE run " + std::to_string(start) + "+" + std::to_string(len) +
                                         " exceeds " + std::to_string(total) + " pixels");
    }
    for (std::uint64_t p = start - 1; p < start - 1 + len; ++p) {
      const std::size_t x = static_cast<std::size_t>(p / height), y = static_cast<std::size_t>(p % height);
      mask.at(y, x) = 1.0;
    }
    prev_end = start + len;
  }
  return mask;
}

inline std::string rle_encode(const Plane& mask) {
  require_rank(mask, 2, "rle_encode mask");
  const std::size_t H = mask.dim(0), W = mask.dim(1);
  std::string out;
  std::size_t run_start = 0, run_len = 0;
  auto flush = [&] {
    if (run_len == 0) return;
    if (!out.empty()) out += ' ';
    out += std::to_string(run_start + 1) + ' ' + std::to_string(run_len);
    run_len = 0;
  };
  for (std::size_t x = 0; x < W; ++x)
    for (std::size_t y = 0; y < H; ++y) {
      const std::size_t p = x * H + y;
      if (mask.at(y, x) >= 0.5) {
        if (run_len == 0) run_start = p;
        ++run_len;
      } else {
        flush();
      }
    }
  flush();
  return out;
}

// --------------------------------------------------------------------------
// Connected components (8-connectivity) -> bounding boxes in pixel-edge
// coordinates. Components smaller than `min_pixels` are dropped.

inline std::vector<Box> component_boxes(const Plane& mask, double threshold = 0.5,
                                        std::size_t min_pixels = 1) {
  require_rank(mask, 2, "component mask");
  const std::size_t H = mask.dim(0), W = mask.dim(1);
  std::vector<std::uint8_t> seen(H * W, 0);
  std::vector<Box> boxes;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < H * W; ++start) {
    if (seen[start] || mask[start] < threshold) continue;
    std::size_t x0 = W, y0 = H, x1 = 0, y1 = 0, count = 0;
    stack.push_back(start);
    seen[start] = 1;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      ++count;
      const std::size_t y = p / W, x = p % W;
      x0 = std::min(x0, x);
      y0 = std::min(y0, y);
      x1 = std::max(x1, x);
      y1 = std::max(y1, y);
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const long ny = static_cast<long>(y) + dy, nx = static_cast<long>(x) + dx;
          if (ny < 0 || nx < 0 || ny >= static_cast<long>(H) || nx >= static_cast<long>(W)) continue;
          const std::size_t q = static_cast<std::size_t>(ny) * W + static_cast<std::size_t>(nx);
          if (!seen[q] && mask[q] >= threshold) {
            seen[q] = 1;
            stack.push_back(q);
          }
        }
    }
    if (count >= min_pixels) {
      boxes.push_back({static_cast<double>(x0), static_cast<double>(y0), static_cast<double>(x1 + 1),
                       static_cast<double>(y1 + 1)});
    }
  }
  return boxes;
}

inline double mask_fraction(const Plane& mask) {
  if (mask.size() == 0) return 0.0;
  std::size_t pos = 0;
  for (double v : mask.data()) pos += v >= 0.5 ? 1 : 0;
  return static_cast<double>(pos) / static_cast<double>(mask.size());
}

// --------------------------------------------------------------------------
// Records

enum class DatasetLayout { Kolektor, Severstal, Cplid, Synthetic };

inline DatasetLayout parse_layout(std::string_view tag) {
  if (tag == "kolektor" || tag == "kolektorsdd") return DatasetLayout::Kolektor;
  if (tag == "severstal") return DatasetLayout::Severstal;
  if (tag == "cplid") return DatasetLayout::Cplid;
  if (tag == "synthetic") return DatasetLayout::Synthetic;
  throw Error(ErrorKind::InvalidArgument,
              "unknown dataset layout '" + std::string(tag) + "' (kolektor|severstal|cplid|synthetic)");
}

inline const char* layout_name(DatasetLayout l) {
  switch (l) {
    case DatasetLayout::Kolektor: return "kolektor";
    case DatasetLayout::Severstal: return "severstal";
    case DatasetLayout::Cplid: return "cplid";
    case DatasetLayout::Synthetic: return "synthetic";
  }
  return "unknown";
}

struct DatasetRecord {
  std::string id;
  fs::path image_path;
  Image image;
  Plane mask;                              // [H, W] binary, all classes collapsed
  std::map<std::size_t, Plane> class_masks;  // per-class masks when the source has them
  std::vector<GroundTruth> boxes;          // components of `mask`, image frame
  std::string split = "train";
  DatasetLayout source = DatasetLayout::Synthetic;

  bool defective() const { return !boxes.empty(); }
};

inline std::vector<GroundTruth> boxes_from_mask(const Plane& mask, std::size_t label = 1) {
  std::vector<GroundTruth> out;
  for (const Box& b : component_boxes(mask)) out.push_back({b, label});
  return out;
}

inline Plane mask_from_image(const Image& img) {
  Plane m = make_plane(img.height, img.width);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) m.at(y, x) = img.at(y, x, 0) >= 128 ? 1.0 : 0.0;
  return m;
}

inline Image mask_to_image(const Plane& m) {
  Image img(m.dim(1), m.dim(0), 1);
  for (std::size_t i = 0; i < m.size(); ++i) img.pixels[i] = m[i] >= 0.5 ? 255 : 0;
  return img;
}

namespace detail {

inline std::vector<fs::path> sorted_pngs(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

inline DatasetRecord make_record(std::string id, const fs::path& image_path, Plane mask,
                                 DatasetLayout source) {
  DatasetRecord r;
  r.id = std::move(id);
  r.image_path = image_path;
  r.image = read_png(image_path);
  if (mask.size() == 0) mask = make_plane(r.image.height, r.image.width);
  if (mask.dim(0) != r.image.height || mask.dim(1) != r.image.width) {
    throw Error(ErrorKind::ShapeMismatch, "mask for " + image_path.string() + " is " +
                                              shape_str(mask.shape()) + ", image is " +
                                              std::to_string(r.image.height) + "x" +
                                              std::to_string(r.image.width));
  }
  r.mask = std::move(mask);
  r.boxes = boxes_from_mask(r.mask);
  r.source = source;
  return r;
}

// KolektorSDD-like: <root>/<part>/<name>.png with <name>_label.png beside it.
inline std::vector<DatasetRecord> load_kolektor(const fs::path& root) {
  std::vector<fs::path> parts;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) parts.push_back(e.path());
  std::sort(parts.begin(), parts.end());
  std::vector<DatasetRecord> out;
  for (const auto& part : parts) {
    for (const auto& img : sorted_pngs(part)) {
      const std::string stem = img.stem().string();
      if (stem.ends_with("_label")) continue;
      const fs::path label = part / (stem + "_label.png");
      if (!fs::exists(label)) throw Error(ErrorKind::Io, "missing mask " + label.string() + " for " + img.string());
      out.push_back(make_record(part.filename().string() + "/" + stem, img,
                                mask_from_image(read_png(label)), DatasetLayout::Kolektor));
    }
  }
  return out;
}

// CPLID-like: <root>/normal/*.png (defect-free), <root>/defect/*.png with
// masks in <root>/defect_mask/<same name>.png.
inline std::vector<DatasetRecord> load_cplid(const fs::path& root) {
  std::vector<DatasetRecord> out;
  for (const auto& img : sorted_pngs(root / "normal"))
    out.push_back(make_record("normal/" + img.stem().string(), img, {}, DatasetLayout::Cplid));
  for (const auto& img : sorted_pngs(root / "defect")) {
    const fs::path mask = root / "defect_mask" / img.filename();
    if (!fs::exists(mask)) throw Error(ErrorKind::Io, "missing mask " + mask.string() + " for " + img.string());
    auto r = make_record("defect/" + img.stem().string(), img, mask_from_image(read_png(mask)),
                         DatasetLayout::Cplid);
    if (!r.defective()) throw Error(ErrorKind::Format, "defect image " + img.string() + " has an empty mask");
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      cells.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  cells.push_back(cur);
  return cells;
}

// Severstal-like: <root>/train_images/*.png and <root>/train.csv with rows
// "ImageId,ClassId,EncodedPixels". Images without rows are defect-free.
inline std::vector<DatasetRecord> load_severstal(const fs::path& root) {
  const fs::path csv = root / "train.csv";
  std::map<std::string, std::vector<std::pair<std::size_t, std::string>>> rows;
  if (fs::exists(csv)) {
    std::ifstream in(csv);
    if (!in) throw Error(ErrorKind::Io, "cannot read " + csv.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty() || (lineno == 1 && line.starts_with("ImageId"))) continue;
      const auto cells = split_csv_line(line);
      if (cells.size() != 3) {
        throw Error(ErrorKind::Format, csv.string() + ":" + std::to_string(lineno) + ": expected 3 columns");
      }
      std::size_t cls = 0;
      const auto [p, ec] = std::from_chars(cells[1].data(), cells[1].data() + cells[1].size(), cls);
      if (ec != std::errc{}) {
        throw Error(ErrorKind::Format, csv.string() + ":" + std::to_string(lineno) + ": bad ClassId");
      }
      rows[cells[0]].emplace_back(cls, cells[2]);
    }
  }
  std::vector<DatasetRecord> out;
  const auto images = sorted_pngs(root / "train_images");
  for (const auto& img : images) {
    const std::string name = img.filename().string();
    Image raster = read_png(img);
    Plane mask = make_plane(raster.height, raster.width);
    std::map<std::size_t, Plane> per_class;
    if (auto it = rows.find(name); it != rows.end()) {
      for (const auto& [cls, enc] : it->second) {
        Plane m = rle_decode(enc, raster.height, raster.width);
        for (std::size_t i = 0; i < m.size(); ++i) mask[i] = std::max(mask[i], m[i]);
        per_class[cls] = std::move(m);
      }
    }
    DatasetRecord r;
    r.id = img.stem().string();
    r.image_path = img;
    r.image = std::move(raster);
    r.mask = std::move(mask);
    r.class_masks = std::move(per_class);
    r.boxes = boxes_from_mask(r.mask);
    r.source = DatasetLayout::Severstal;
    out.push_back(std::move(r));
  }
  for (const auto& [name, _] : rows)
    if (!fs::exists(root / "train_images" / name)) {
      throw Error(ErrorKind::Io, "annotation references missing image " + (root / "train_images" / name).string());
    }
  return out;
}

std::vector<DatasetRecord> load_synthetic_dir(const fs::path& root);

}  // namespace detail

inline std::vector<DatasetRecord> load_dataset(const fs::path& root, DatasetLayout layout) {
  if (!fs::is_directory(root)) throw Error(ErrorKind::Io, "dataset root " + root.string() + " is not a directory");
  if (fs::is_empty(root)) return {};
  switch (layout) {
    case DatasetLayout::Kolektor: return detail::load_kolektor(root);
    case DatasetLayout::Severstal: return detail::load_severstal(root);
    case DatasetLayout::Cplid: return detail::load_cplid(root);
    case DatasetLayout::Synthetic: return detail::load_synthetic_dir(root);
  }
  return {};
}

// --------------------------------------------------------------------------
// Synthetic defect images

enum class DefectShape { Rectangle, Scratch, Blob };

inline const char* shape_name(DefectShape s) {
  switch (s) {
    case DefectShape::Rectangle: return "rectangle";
    case DefectShape::Scratch: return "scratch";
    case DefectShape::Blob: return "blob";
  }
  return "?";
}

struct SyntheticSpec {
  std::size_t width = 256, height = 256;
  double background_level = 0.6;
  double noise_amplitude = 0.06;
  double gradient = 0.15;
  std::size_t min_defects = 1, max_defects = 2;
  double defect_free_fraction = 0.3;
  std::vector<DefectShape> shapes{DefectShape::Rectangle, DefectShape::Scratch};
  double area_fraction = 0.02;  // target defect-area fraction per defective image
  double contrast = 0.35;
  double scratch_width = 5.0;
  double test_fraction = 0.2;   // trailing share of records tagged "test"
  std::uint64_t seed = 7;

  void validate() const {
    if (width < 8 || height < 8) throw Error(ErrorKind::InvalidArgument, "synthetic images must be at least 8x8");
    if (!(area_fraction > 0.0) || area_fraction > 0.9) {
      throw Error(ErrorKind::InvalidArgument, "defect-area target must lie in (0, 0.9]; got " +
                                                  std::to_string(area_fraction));
    }
    if (min_defects > max_defects) throw Error(ErrorKind::InvalidArgument, "min_defects > max_defects");
    if (max_defects > 0 && shapes.empty()) throw Error(ErrorKind::InvalidArgument, "no defect shapes enabled");
    if (defect_free_fraction < 0.0 || defect_free_fraction > 1.0 || test_fraction < 0.0 || test_fraction > 1.0) {
      throw Error(ErrorKind::InvalidArgument, "fractions must lie in [0, 1]");
    }
  }
};

inline nlohmann::json to_json(const SyntheticSpec& s) {
  nlohmann::json shapes = nlohmann::json::array();
  for (auto sh : s.shapes) shapes.push_back(shape_name(sh));
  return {{"width", s.width},
          {"height", s.height},
          {"background_level", s.background_level},
          {"noise_amplitude", s.noise_amplitude},
          {"gradient", s.gradient},
          {"min_defects", s.min_defects},
          {"max_defects", s.max_defects},
          {"defect_free_fraction", s.defect_free_fraction},
          {"shapes", shapes},
          {"area_fraction", s.area_fraction},
          {"contrast", s.contrast},
          {"scratch_width", s.scratch_width},
          {"test_fraction", s.test_fraction},
          {"seed", s.seed}};
}

inline SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
  SyntheticSpec s;
  for (const auto& [key, v] : j.items()) {
    if (key == "width") s.width = v.get<std::size_t>();
    else if (key == "height") s.height = v.get<std::size_t>();
    else if (key == "background_level") s.background_level = v.get<double>();
    else if (key == "noise_amplitude") s.noise_amplitude = v.get<double>();
    else if (key == "gradient") s.gradient = v.get<double>();
    else if (key == "min_defects") s.min_defects = v.get<std::size_t>();
    else if (key == "max_defects") s.max_defects = v.get<std::size_t>();
    else if (key == "defect_free_fraction") s.defect_free_fraction = v.get<double>();
    else if (key == "area_fraction") s.area_fraction = v.get<double>();
    else if (key == "contrast") s.contrast = v.get<double>();
    else if (key == "scratch_width") s.scratch_width = v.get<double>();
    else if (key == "test_fraction") s.test_fraction = v.get<double>();
    else if (key == "seed") s.seed = v.get<std::uint64_t>();
    else if (key == "shapes") {
      s.shapes.clear();
      for (const auto& name : v) {
        const auto n = name.get<std::string>();
        if (n == "rectangle") s.shapes.push_back(DefectShape::Rectangle);
        else if (n == "scratch") s.shapes.push_back(DefectShape::Scratch);
        else if (n == "blob") s.shapes.push_back(DefectShape::Blob);
        else throw Error(ErrorKind::Config, "unknown defect shape '" + n + "'");
      }
    } else {
      throw Error(ErrorKind::Config, "unknown synthetic spec key '" + key + "'");
    }
  }
  s.validate();
  return s;
}

namespace detail {

inline double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double vx = bx - ax, vy = by - ay;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

// Draws one defect of roughly `area` pixels into `mask`.
inline void draw_defect(Plane& mask, DefectShape shape, double area, double scratch_width, Rng& rng) {
  const double H = static_cast<double>(mask.dim(0)), W = static_cast<double>(mask.dim(1));
  auto paint = [&](auto&& inside, double x0, double y0, double x1, double y1) {
    const auto i0 = static_cast<std::size_t>(std::clamp(std::floor(y0), 0.0, H));
    const auto i1 = static_cast<std::size_t>(std::clamp(std::ceil(y1), 0.0, H));
    const auto j0 = static_cast<std::size_t>(std::clamp(std::floor(x0), 0.0, W));
    const auto j1 = static_cast<std::size_t>(std::clamp(std::ceil(x1), 0.0, W));
    for (std::size_t i = i0; i < i1; ++i)
      for (std::size_t j = j0; j < j1; ++j)
        if (inside(static_cast<double>(j) + 0.5, static_cast<double>(i) + 0.5)) mask.at(i, j) = 1.0;
  };
  switch (shape) {
    case DefectShape::Rectangle: {
      const double aspect = std::exp(rng.uniform(std::log(0.5), std::log(2.0)));
      const double w = std::min(W - 2, std::sqrt(area * aspect)), h = std::min(H - 2, area / std::max(w, 1.0));
      const double x0 = rng.uniform(1.0, std::max(1.0, W - 1 - w));
      const double y0 = rng.uniform(1.0, std::max(1.0, H - 1 - h));
      paint([&](double, double) { return true; }, x0, y0, x0 + w, y0 + h);
      break;
    }
    case DefectShape::Scratch: {
      // Long scratches that would not fit get thicker instead.
      const double max_len = 0.8 * std::min(W, H);
      const double t = std::max(scratch_width, area / max_len);
      const double length = area / t;
      const double ang = rng.uniform(0.0, std::numbers::pi);
      const double bend = rng.uniform(-0.35, 0.35);
      const double dx = std::cos(ang), dy = std::sin(ang);
      const double ex = std::abs(dx) * length * 0.5 + t, ey = std::abs(dy) * length * 0.5 + t;
      const double cx = rng.uniform(std::min(ex, W / 2), std::max(W - ex, W / 2));
      const double cy = rng.uniform(std::min(ey, H / 2), std::max(H - ey, H / 2));
      // Two segments meeting at the centre with a slight bend.
      const double ax = cx - dx * length * 0.5, ay = cy - dy * length * 0.5;
      const double bx = cx + (std::cos(ang + bend)) * length * 0.5;
      const double by = cy + (std::sin(ang + bend)) * length * 0.5;
      const double r = t * 0.5;
      paint([&](double px, double py) {
        return segment_distance(px, py, ax, ay, cx, cy) <= r || segment_distance(px, py, cx, cy, bx, by) <= r;
      },
            std::min({ax, bx, cx}) - r, std::min({ay, by, cy}) - r, std::max({ax, bx, cx}) + r,
            std::max({ay, by, cy}) + r);
      break;
    }
    case DefectShape::Blob: {
      const double aspect = std::exp(rng.uniform(std::log(0.6), std::log(1.6)));
      const double a = std::sqrt(area * aspect / std::numbers::pi), b = area / (std::numbers::pi * a);
      const double cx = rng.uniform(std::min(a + 1, W / 2), std::max(W - a - 1, W / 2));
      const double cy = rng.uniform(std::min(b + 1, H / 2), std::max(H - b - 1, H / 2));
      const double wobble = rng.uniform(0.0, 0.15), phase = rng.uniform(0.0, 2 * std::numbers::pi);
      paint([&](double px, double py) {
        const double u = (px - cx) / a, v = (py - cy) / b;
        const double th = std::atan2(v, u);
        const double rr = 1.0 + wobble * std::sin(3 * th + phase);
        return u * u + v * v <= rr * rr;
      },
            cx - 1.2 * a, cy - 1.2 * b, cx + 1.2 * a, cy + 1.2 * b);
      break;
    }
  }
}

}  // namespace detail

// Deterministic in (spec, index): record i only depends on the spec and i.
inline DatasetRecord generate_synthetic_record(const SyntheticSpec& spec, std::size_t index,
                                               std::size_t count) {
  Rng rng(spec.seed * 0x9E3779B97F4A7C15ULL + index * 0xBF58476D1CE4E5B9ULL + 1);
  const std::size_t H = spec.height, W = spec.width;
  const double total = static_cast<double>(H * W);
  DatasetRecord r;
  char name[32];
  std::snprintf(name, sizeof(name), "%05zu", index);
  r.id = name;
  r.source = DatasetLayout::Synthetic;
  const auto n_test = static_cast<std::size_t>(std::llround(spec.test_fraction * static_cast<double>(count)));
  r.split = index + n_test >= count && n_test > 0 ? "test" : "train";

  const bool clean = spec.max_defects == 0 || rng.uniform() < spec.defect_free_fraction;
  const auto n_defects = clean ? 0
                               : static_cast<std::size_t>(rng.integer(
                                     static_cast<std::int64_t>(std::max<std::size_t>(spec.min_defects, 1)),
                                     static_cast<std::int64_t>(spec.max_defects)));
  Plane mask = make_plane(H, W);
  if (n_defects > 0) {
    std::vector<DefectShape> shapes(n_defects);
    for (auto& s : shapes) s = spec.shapes[static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(spec.shapes.size()) - 1))];
    const std::uint64_t shape_seed = rng.next();
    double scale = 1.0;
    bool ok = false;
    for (int attempt = 0; attempt < 40 && !ok; ++attempt) {
      Rng srng(shape_seed + static_cast<std::uint64_t>(attempt / 8));
      mask.fill(0.0);
      const double per = spec.area_fraction * total * scale / static_cast<double>(n_defects);
      for (auto s : shapes) detail::draw_defect(mask, s, per, spec.scratch_width, srng);
      const double frac = mask_fraction(mask);
      if (std::abs(frac - spec.area_fraction) <= 0.1 * spec.area_fraction) {
        ok = true;
      } else if (frac > 0) {
        scale *= std::clamp(spec.area_fraction / frac, 0.5, 2.0);
      } else {
        scale *= 2.0;
      }
    }
    if (!ok) {
      const double frac = mask_fraction(mask);
      if (std::abs(frac - spec.area_fraction) > 0.2 * spec.area_fraction) {
        throw Error(ErrorKind::InvalidArgument, "cannot reach defect-area target " +
                                                    std::to_string(spec.area_fraction) + " for record " + r.id);
      }
    }
  }

  // Background: level + linear gradient + fine noise + low-frequency texture.
  const double gdir = rng.uniform(0.0, 2 * std::numbers::pi);
  const double fx = rng.uniform(0.02, 0.06), fy = rng.uniform(0.02, 0.06), ph = rng.uniform(0.0, 6.28);
  Image img(W, H, 3);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double u = static_cast<double>(x) / static_cast<double>(W) - 0.5;
      const double v = static_cast<double>(y) / static_cast<double>(H) - 0.5;
      double val = spec.background_level + spec.gradient * (u * std::cos(gdir) + v * std::sin(gdir));
      val += 0.5 * spec.noise_amplitude * std::sin(fx * static_cast<double>(x) + fy * static_cast<double>(y) + ph);
      val += spec.noise_amplitude * (rng.uniform() + rng.uniform() - 1.0);
      if (mask.at(y, x) >= 0.5) val -= spec.contrast * (0.85 + 0.3 * rng.uniform());
      const auto b = static_cast<std::uint8_t>(std::clamp(std::round(val * 255.0), 0.0, 255.0));
      for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = b;
    }
  r.image = std::move(img);
  r.boxes = boxes_from_mask(mask);
  r.mask = std::move(mask);
  return r;
}

inline std::vector<DatasetRecord> generate_synthetic(const SyntheticSpec& spec, std::size_t count) {
  spec.validate();
  std::vector<DatasetRecord> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_synthetic_record(spec, i, count));
  return out;
}

// Writes images/<id>.png, masks/<id>.png and manifest.json.
inline nlohmann::json write_synthetic_dataset(const fs::path& dir, const SyntheticSpec& spec,
                                              const std::vector<DatasetRecord>& records) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  nlohmann::json recs = nlohmann::json::array();
  double sum_frac = 0.0, sum_def = 0.0;
  std::size_t defective = 0;
  for (const auto& r : records) {
    write_png(dir / "images" / (r.id + ".png"), r.image);
    write_png(dir / "masks" / (r.id + ".png"), mask_to_image(r.mask));
    const double frac = mask_fraction(r.mask);
    sum_frac += frac;
    if (r.defective()) {
      ++defective;
      sum_def += frac;
    }
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& b : r.boxes) boxes.push_back({b.box.x_min, b.box.y_min, b.box.x_max, b.box.y_max});
    recs.push_back({{"id", r.id},
                    {"image", "images/" + r.id + ".png"},
                    {"mask", "masks/" + r.id + ".png"},
                    {"split", r.split},
                    {"area_fraction", frac},
                    {"boxes", boxes}});
  }
  const double n = static_cast<double>(records.size());
  nlohmann::json manifest = {
      {"format", "defect-forge-synthetic"},
      {"version", 1},
      {"spec", to_json(spec)},
      {"records", recs},
      {"statistics",
       {{"count", records.size()},
        {"defective", defective},
        {"mean_area_fraction", records.empty() ? 0.0 : sum_frac / n},
        {"mean_area_fraction_defective", defective ? sum_def / static_cast<double>(defective) : 0.0}}}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw Error(ErrorKind::Io, "cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
  return manifest;
}

namespace detail {

inline std::vector<DatasetRecord> load_synthetic_dir(const fs::path& root) {
  const fs::path mpath = root / "manifest.json";
  if (!fs::exists(mpath)) throw Error(ErrorKind::Io, "missing " + mpath.string());
  std::ifstream in(mpath);
  nlohmann::json m;
  try {
    in >> m;
  } catch (const std::exception& e) {
    throw Error(ErrorKind::Format, mpath.string() + ": " + e.what());
  }
  std::vector<DatasetRecord> out;
  for (const auto& jr : m.at("records")) {
    const fs::path img = root / jr.at("image").get<std::string>();
    const fs::path mask = root / jr.at("mask").get<std::string>();
    if (!fs::exists(mask)) throw Error(ErrorKind::Io, "missing mask " + mask.string() + " for " + img.string());
    auto r = make_record(jr.at("id").get<std::string>(), img, mask_from_image(read_png(mask)),
                         DatasetLayout::Synthetic);
    r.split = jr.value("split", "train");
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace detail

// --------------------------------------------------------------------------
// Checkpoints
//
// Layout (all integers little-endian):
//   magic    8 bytes  "DFCKPT\r\n"
//   version  u32      1
//   count    u32      number of entries
//   entry*:  u32 name length, name bytes (UTF-8), u32 rank, u64 dims[rank],
//            f64 payload[prod(dims)] (IEEE-754 little-endian)

inline constexpr std::array<char, 8> kCheckpointMagic{'D', 'F', 'C', 'K', 'P', 'T', '\r', '\n'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Tensor value;
};

namespace detail {

template <typename T>
void put_le(std::string& buf, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  Reader(const std::string& data, std::string source) : data_(data), source_(std::move(source)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<T>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) {
      throw Error(ErrorKind::Truncated, source_ + " ends at byte " + std::to_string(data_.size()) +
                                            ", needed " + std::to_string(pos_ + n));
    }
  }
  const std::string& data_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const std::vector<CheckpointEntry>& entries) {
  std::string buf(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_le<std::uint32_t>(buf, kCheckpointVersion);
  detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(e.name.size()));
    buf += e.name;
    detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(e.value.rank()));
    for (std::size_t d : e.value.shape()) detail::put_le<std::uint64_t>(buf, d);
    for (double v : e.value.data()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      detail::put_le<std::uint64_t>(buf, bits);
    }
  }
  return buf;
}

inline std::vector<CheckpointEntry> decode_checkpoint(const std::string& data,
                                                      const std::string& source = "checkpoint") {
  detail::Reader rd(data, source);
  const std::string magic = rd.bytes(kCheckpointMagic.size());
  if (!std::equal(magic.begin(), magic.end(), kCheckpointMagic.begin())) {
    throw Error(ErrorKind::Format, source + " is not a defect-forge checkpoint (bad magic)");
  }
  const auto version = rd.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw Error(ErrorKind::Version, source + " has version " + std::to_string(version) + ", expected " +
                                        std::to_string(kCheckpointVersion));
  }
  const auto count = rd.get<std::uint32_t>();
  std::vector<CheckpointEntry> out;
  for (std::uint32_t k = 0; k < count; ++k) {
    CheckpointEntry e;
    e.name = rd.bytes(rd.get<std::uint32_t>());
    const auto rank = rd.get<std::uint32_t>();
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(rd.get<std::uint64_t>());
    std::vector<double> values(shape_size(shape));
    for (double& v : values) {
      const auto bits = rd.get<std::uint64_t>();
      std::memcpy(&v, &bits, sizeof v);
    }
    e.value = Tensor(std::move(shape), std::move(values));
    out.push_back(std::move(e));
  }
  if (!rd.done()) throw Error(ErrorKind::Format, source + " has trailing bytes after the last entry");
  return out;
}

inline std::vector<CheckpointEntry> snapshot(const ParamList& params) {
  std::vector<CheckpointEntry> out;
  for (const auto& p : params.items()) out.push_back({p.name, Tensor(p.tensor->shape(), p.tensor->values())});
  return out;
}

inline void save_checkpoint(const fs::path& path, const std::vector<CheckpointEntry>& entries) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  const std::string buf = encode_checkpoint(entries);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw Error(ErrorKind::Io, "failed writing " + path.string());
}

inline void save_checkpoint(const fs::path& path, const ParamList& params) {
  save_checkpoint(path, snapshot(params));
}

inline std::vector<CheckpointEntry> load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str(), path.string());
}

// Copies entries into matching parameters. Entries naming no parameter are an
// error; parameters absent from the checkpoint keep their values.
inline std::size_t apply_checkpoint(const std::vector<CheckpointEntry>& entries, const ParamList& params) {
  std::map<std::string, Tensor*> by_name;
  for (const auto& p : params.items()) by_name[p.name] = p.tensor;
  std::size_t applied = 0;
  for (const auto& e : entries) {
    auto it = by_name.find(e.name);
    if (it == by_name.end()) throw Error(ErrorKind::UnknownEntry, "checkpoint entry '" + e.name + "' matches no parameter");
    if (it->second->shape() != e.value.shape()) {
      throw Error(ErrorKind::ShapeMismatch, "checkpoint entry '" + e.name + "' " + shape_str(e.value.shape()) +
                                                " vs parameter " + shape_str(it->second->shape()));
    }
    std::copy(e.value.data().begin(), e.value.data().end(), it->second->data().begin());
    ++applied;
  }
  return applied;
}

}  // namespace defect_forge

#pragma once

// Flat key=value pipeline configuration. Blank lines and lines starting with
// '#' are ignored; unknown keys are rejected.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "defect_forge/error.hpp"
#include "defect_forge/geometry.hpp"
#include "defect_forge/stage1.hpp"
#include "defect_forge/stage2.hpp"

namespace defect_forge {

struct TrainConfig {
  std::size_t epochs1 = 10;
  std::size_t epochs2 = 16;
  double lr1 = 0.05;
  double clip_norm = 10.0;  // global gradient-norm cap per step, 0 disables
  double lr2 = 0.02;
  std::size_t batch_size = 8;
  std::size_t pos_per_image1 = 10;  // stage-1 positive patches sampled per image and epoch
  std::size_t neg_per_image1 = 4;
  std::size_t pos_per_image2 = 3;
  std::size_t neg_per_image2 = 1;
  std::size_t min_defect_pixels = 16;  // smallest component (working frame) that labels a patch
  std::uint64_t seed = 1;
};

struct PipelineConfig {
  Stage1Config stage1;
  Stage2Config stage2;
  TrainConfig train;
  double mask_threshold = 0.5;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(trim(cur));
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) {
    throw Error(ErrorKind::Config, "config key '" + key + "': '" + v + "' is not a number");
  }
  return out;
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) {
    throw Error(ErrorKind::Config, "config key '" + key + "': '" + v + "' is not a non-negative integer");
  }
  return out;
}

inline std::vector<double> parse_doubles(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const auto& t : split(v, ',')) out.push_back(parse_double(key, t));
  return out;
}

inline std::vector<Ratio> parse_ratios(const std::string& key, const std::string& v) {
  std::vector<Ratio> out;
  for (const auto& t : split(v, ',')) {
    const auto parts = split(t, ':');
    if (parts.size() != 2) throw Error(ErrorKind::Config, "config key '" + key + "': ratio '" + t + "' is not w:h");
    const double w = parse_double(key, parts[0]), h = parse_double(key, parts[1]);
    if (!(w > 0 && h > 0)) throw Error(ErrorKind::Config, "config key '" + key + "': ratio sides must be positive");
    out.push_back({w, h});
  }
  return out;
}

}  // namespace detail

// Applies one key=value setting.
inline void set_config_value(PipelineConfig& c, const std::string& key, const std::string& value) {
  using namespace detail;
  using Setter = std::function<void(const std::string&)>;
  const std::map<std::string, Setter> setters{
      {"work_size", [&](auto& v) { c.stage1.work_size = parse_size(key, v); }},
      {"scales", [&](auto& v) { c.stage1.slicing.scales = parse_doubles(key, v); }},
      {"ratios", [&](auto& v) { c.stage1.slicing.ratios = parse_ratios(key, v); }},
      {"stride_fraction", [&](auto& v) { c.stage1.slicing.stride_fraction = parse_double(key, v); }},
      {"alpha", [&](auto& v) { c.stage1.alpha = parse_double(key, v); }},
      {"match_threshold", [&](auto& v) { c.stage1.match_threshold = c.stage2.match_threshold = parse_double(key, v); }},
      {"neg_ratio", [&](auto& v) { c.stage1.neg_ratio = c.stage2.neg_ratio = parse_double(key, v); }},
      {"ignore_coverage", [&](auto& v) { c.stage1.ignore_coverage = parse_double(key, v); }},
      {"rpn_ignore_iou", [&](auto& v) { c.stage2.rpn_ignore_iou = parse_double(key, v); }},
      {"select_threshold", [&](auto& v) { c.stage1.select_threshold = parse_double(key, v); }},
      {"nms_threshold", [&](auto& v) { c.stage1.nms_threshold = parse_double(key, v); }},
      {"stage1_input", [&](auto& v) { c.stage1.input_size = parse_size(key, v); }},
      {"stage1_channels", [&](auto& v) {
         c.stage1.channels.clear();
         for (double d : parse_doubles(key, v)) c.stage1.channels.push_back(static_cast<std::size_t>(d));
       }},
      {"stage2_input", [&](auto& v) { c.stage2.input_size = parse_size(key, v); }},
      {"fc_hidden", [&](auto& v) { c.stage2.fc_hidden = parse_size(key, v); }},
      {"rpn_train_top_k", [&](auto& v) { c.stage2.rpn_train_top_k = parse_size(key, v); }},
      {"max_pos_rois", [&](auto& v) { c.stage2.max_pos_rois = parse_size(key, v); }},
      {"stage2_channels", [&](auto& v) { c.stage2.channels = c.stage2.pyramid_channels = parse_size(key, v); }},
      {"rpn_nms", [&](auto& v) { c.stage2.rpn_nms = parse_double(key, v); }},
      {"rpn_top_k", [&](auto& v) { c.stage2.rpn_top_k = parse_size(key, v); }},
      {"det_threshold", [&](auto& v) { c.stage2.det_threshold = parse_double(key, v); }},
      {"mask_threshold", [&](auto& v) { c.mask_threshold = parse_double(key, v); }},
      {"learning_rate", [&](auto& v) { c.train.lr1 = c.train.lr2 = parse_double(key, v); }},
      {"clip_norm", [&](auto& v) { c.train.clip_norm = parse_double(key, v); }},
      {"lr1", [&](auto& v) { c.train.lr1 = parse_double(key, v); }},
      {"lr2", [&](auto& v) { c.train.lr2 = parse_double(key, v); }},
      {"epochs", [&](auto& v) { c.train.epochs1 = c.train.epochs2 = parse_size(key, v); }},
      {"epochs1", [&](auto& v) { c.train.epochs1 = parse_size(key, v); }},
      {"epochs2", [&](auto& v) { c.train.epochs2 = parse_size(key, v); }},
      {"batch_size", [&](auto& v) { c.train.batch_size = parse_size(key, v); }},
      {"pos_per_image1", [&](auto& v) { c.train.pos_per_image1 = parse_size(key, v); }},
      {"neg_per_image1", [&](auto& v) { c.train.neg_per_image1 = parse_size(key, v); }},
      {"pos_per_image2", [&](auto& v) { c.train.pos_per_image2 = parse_size(key, v); }},
      {"neg_per_image2", [&](auto& v) { c.train.neg_per_image2 = parse_size(key, v); }},
      {"min_defect_pixels", [&](auto& v) { c.train.min_defect_pixels = parse_size(key, v); }},
      {"seed", [&](auto& v) { c.train.seed = parse_size(key, v); }},
  };
  const auto it = setters.find(key);
  if (it == setters.end()) throw Error(ErrorKind::Config, "unknown config key '" + key + "'");
  it->second(value);
}

inline void validate(const PipelineConfig& c) {
  if (c.stage1.slicing.scales.size() != Stage1Model::kLevels) {
    throw Error(ErrorKind::Config, "config key 'scales' needs exactly three values");
  }
  if (c.stage1.channels.size() != 4) throw Error(ErrorKind::Config, "config key 'stage1_channels' needs exactly four values");
  for (std::size_t ch : c.stage1.channels)
    if (ch == 0) throw Error(ErrorKind::Config, "config key 'stage1_channels' values must be positive");
  if (c.train.batch_size == 0) throw Error(ErrorKind::Config, "config key 'batch_size' must be positive");
  if (c.stage1.work_size == 0) throw Error(ErrorKind::Config, "config key 'work_size' must be positive");
  if (c.stage2.input_size < kMinStage2Input) {
    throw Error(ErrorKind::Config, "config key 'stage2_input' must be at least " + std::to_string(kMinStage2Input));
  }
}

inline PipelineConfig parse_config(const std::string& text, const std::string& source = "config") {
  PipelineConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorKind::Config, source + ":" + std::to_string(lineno) + ": expected key=value");
    }
    set_config_value(c, detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
  }
  validate(c);
  return c;
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

}  // namespace defect_forge

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "defect_forge/config.hpp"
#include "defect_forge/data_io.hpp"
#include "defect_forge/eval.hpp"
#include "defect_forge/pipeline.hpp"

namespace df = defect_forge;
namespace fs = std::filesystem;

namespace {

df::PipelineConfig resolve_config(const std::string& path, std::optional<std::uint64_t> seed) {
  df::PipelineConfig cfg = path.empty() ? df::PipelineConfig{} : df::load_config(path);
  if (seed) cfg.train.seed = *seed;
  return cfg;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw df::Error(df::ErrorKind::Io, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw df::Error(df::ErrorKind::Io, "cannot write " + path.string());
  out << text;
}

df::Models load_models(const std::string& checkpoint, const df::PipelineConfig& cfg) {
  df::Models m = df::make_models(cfg);
  df::apply_models(m, df::load_checkpoint(checkpoint));
  return m;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"defect-forge: two-stage patch selection and defect segmentation"};
  app.require_subcommand(1);
  std::optional<std::uint64_t> seed;
  app.add_option("--seed", seed, "RNG seed (overrides the config and spec seeds)");

  // synth
  auto* synth = app.add_subcommand("synth", "write a synthetic defect dataset");
  std::string spec_path, synth_out;
  std::size_t count = 0;
  synth->add_option("--spec", spec_path, "synthetic spec JSON")->check(CLI::ExistingFile);
  synth->add_option("--count", count, "number of images")->required();
  synth->add_option("--out", synth_out, "output directory")->required();

  // train
  auto* train = app.add_subcommand("train", "train stage 1, stage 2 or both");
  std::string data_dir, layout = "synthetic", config_path, train_out, stage = "both", split = "train";
  train->add_option("--data", data_dir, "dataset root")->required();
  train->add_option("--layout", layout, "kolektor|severstal|cplid|synthetic");
  train->add_option("--config", config_path, "key=value config file");
  train->add_option("--stage", stage, "1, 2 or both")->check(CLI::IsMember({"1", "2", "both"}));
  train->add_option("--split", split, "records used for training ('all' for every record)");
  train->add_option("--out", train_out, "checkpoint path")->required();

  // inspect
  auto* insp = app.add_subcommand("inspect", "run the pipeline on one image");
  std::string image_path, checkpoint, insp_out;
  bool skip_stage1 = false;
  insp->add_option("--image", image_path, "PNG image")->required()->check(CLI::ExistingFile);
  insp->add_option("--checkpoint", checkpoint, "checkpoint with both stages")->required()->check(CLI::ExistingFile);
  insp->add_option("--config", config_path, "key=value config file");
  insp->add_flag("--skip-stage1", skip_stage1, "bypass patch selection and segment every patch");
  insp->add_option("--out", insp_out, "output directory")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint or run the training-scale sweep");
  std::string eval_out = "eval_out", eval_split = "test";
  bool sweep = false;
  std::vector<double> fractions{0.3, 0.6, 1.0};
  ev->add_option("--data", data_dir, "dataset root")->required();
  ev->add_option("--layout", layout, "kolektor|severstal|cplid|synthetic");
  ev->add_option("--checkpoint", checkpoint, "checkpoint with both stages")->check(CLI::ExistingFile);
  ev->add_option("--config", config_path, "key=value config file");
  ev->add_option("--split", eval_split, "records evaluated ('all' for every record)");
  ev->add_flag("--skip-stage1", skip_stage1, "bypass patch selection");
  ev->add_flag("--sweep", sweep, "train and evaluate at several training-set fractions");
  ev->add_option("--fractions", fractions, "sweep fractions")->delimiter(',');
  ev->add_option("--out", eval_out, "report directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      df::SyntheticSpec spec;
      if (!spec_path.empty()) {
        std::ifstream in(spec_path);
        nlohmann::json j;
        try {
          in >> j;
        } catch (const std::exception& e) {
          throw df::Error(df::ErrorKind::Format, spec_path + ": " + e.what());
        }
        spec = df::synthetic_spec_from_json(j);
      }
      if (seed) spec.seed = *seed;
      const auto records = df::generate_synthetic(spec, count);
      const auto manifest = df::write_synthetic_dataset(synth_out, spec, records);
      std::printf("wrote %zu images to %s (mean defect area %.4f)\n", records.size(), synth_out.c_str(),
                  manifest["statistics"]["mean_area_fraction"].get<double>());
      return 0;
    }

    const df::PipelineConfig cfg = resolve_config(config_path, seed);

    if (*train) {
      const auto records = df::load_dataset(data_dir, df::parse_layout(layout));
      const auto subset = split == "all" ? df::record_pointers(records) : df::split_records(records, split);
      std::printf("training on %zu records\n", subset.size());
      df::Models m = df::make_models(cfg);
      auto log = [](const df::EpochLog& e) {
        std::printf("%s\n", df::format_epoch(e).c_str());
        std::fflush(stdout);
      };
      if (fs::exists(train_out) && stage != "both") {
        // Keep the other stage of an existing checkpoint.
        df::apply_models(m, df::load_checkpoint(train_out));
      }
      if (stage == "1" || stage == "both") {
        df::train_stage1(m.stage1, subset, cfg, log);
        m.has_stage1 = true;
      }
      if (stage == "2" || stage == "both") {
        df::train_stage2(m.stage2, subset, cfg, log);
        m.has_stage2 = true;
      }
      if (stage == "1") m.has_stage2 = false;
      if (stage == "2") m.has_stage1 = false;
      df::save_checkpoint(train_out, df::models_snapshot(m));
      std::printf("checkpoint written to %s\n", train_out.c_str());
      return 0;
    }

    if (*insp) {
      df::Models m = load_models(checkpoint, cfg);
      if (!m.has_stage2 || (!skip_stage1 && !m.has_stage1)) {
        throw df::Error(df::ErrorKind::UnknownEntry, "checkpoint " + checkpoint + " lacks the stages needed");
      }
      const df::Image image = df::read_png(image_path);
      const auto res = df::inspect(image, m.stage1, m.stage2, cfg, skip_stage1);
      fs::create_directories(insp_out);
      const std::string stem = fs::path(image_path).stem().string();
      auto j = df::to_json(res);
      j["source"] = image_path;
      write_json(fs::path(insp_out) / (stem + ".json"), j);
      df::write_png(fs::path(insp_out) / (stem + "_overlay.png"), df::render_overlay(image, res));
      std::printf("%zu of %zu patches selected, %zu defect pixels, %.1f ms\n",
                  j["selected_count"].get<std::size_t>(), res.verdicts.size(),
                  j["mask"]["defect_pixels"].get<std::size_t>(), res.timings.total_ms);
      return 0;
    }

    if (*ev) {
      const auto records = df::load_dataset(data_dir, df::parse_layout(layout));
      fs::create_directories(eval_out);
      if (sweep) {
        const auto train_set = df::split_records(records, "train");
        const auto test_set = eval_split == "all" ? df::record_pointers(records) : df::split_records(records, eval_split);
        const auto pts = df::scale_sweep(train_set, test_set, fractions, cfg, [](const df::EpochLog& e) {
          std::printf("%s\n", df::format_epoch(e).c_str());
          std::fflush(stdout);
        });
        write_json(fs::path(eval_out) / "sweep.json", df::to_json(pts));
        const std::string text = df::format_sweep(pts);
        write_text(fs::path(eval_out) / "sweep.txt", text);
        std::printf("%s", text.c_str());
        return 0;
      }
      if (checkpoint.empty()) throw df::Error(df::ErrorKind::InvalidArgument, "eval needs --checkpoint (or --sweep)");
      df::Models m = load_models(checkpoint, cfg);
      const auto subset = eval_split == "all" ? df::record_pointers(records) : df::split_records(records, eval_split);
      df::EvalOptions opt;
      opt.skip_stage1 = skip_stage1;
      const auto rep = df::evaluate(subset, m.stage1, m.stage2, cfg, opt);
      write_json(fs::path(eval_out) / "report.json", df::to_json(rep));
      const std::string text = df::format_report(rep);
      write_text(fs::path(eval_out) / "report.txt", text);
      std::printf("%s", text.c_str());
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

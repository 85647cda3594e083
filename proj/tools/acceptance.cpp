// Acceptance run: one PASS/FAIL line per headline criterion.
//
// The oracle-style criteria run the matching GoogleTest cases; the
// experimental ones train and evaluate the full pipeline on synthetic data.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "defect_forge/config.hpp"
#include "defect_forge/data_io.hpp"
#include "defect_forge/eval.hpp"
#include "defect_forge/pipeline.hpp"

namespace df = defect_forge;
namespace fs = std::filesystem;
using clock_type = std::chrono::steady_clock;

namespace {

double seconds_since(clock_type::time_point t0) {
  return std::chrono::duration<double>(clock_type::now() - t0).count();
}

struct Verdict {
  std::string name;
  bool pass = false;
  std::string detail;
  nlohmann::json data;
};

std::vector<Verdict> verdicts;

void report(Verdict v) {
  std::printf("%s  %-22s %s\n", v.pass ? "PASS" : "FAIL", v.name.c_str(), v.detail.c_str());
  std::fflush(stdout);
  verdicts.push_back(std::move(v));
}

void progress(const std::string& msg) {
  std::fprintf(stderr, "[acceptance] %s\n", msg.c_str());
  std::fflush(stderr);
}

struct GtestRun {
  std::string binary, filter;
};

// Runs each binary with its filter; true iff all exit 0.
bool run_gtests(const fs::path& dir, const std::vector<GtestRun>& runs, std::size_t& tests, std::string& failed) {
  bool ok = true;
  tests = 0;
  for (const auto& r : runs) {
    const fs::path bin = dir / r.binary;
    const fs::path log = fs::temp_directory_path() / ("df_acc_" + r.binary + ".log");
    const std::string cmd = bin.string() + " --gtest_brief=1 '--gtest_filter=" + r.filter + "' >" + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    std::ifstream in(log);
    for (std::string line; std::getline(in, line);) {
      if (line.starts_with("[  PASSED  ]")) tests += std::stoul(line.substr(13));
      if (line.starts_with("[  FAILED  ] ") && line.find(',') == std::string::npos && line.find(" tests,") == std::string::npos)
        failed += " " + line.substr(13);
    }
    if (status != 0) {
      ok = false;
      if (failed.empty()) failed = " " + r.binary + " exited with status " + std::to_string(status);
    }
  }
  return ok;
}

void oracle_criterion(const std::string& name, const fs::path& dir, const std::vector<GtestRun>& runs,
                      double time_limit_s = 0.0) {
  const auto t0 = clock_type::now();
  std::size_t tests = 0;
  std::string failed;
  bool ok = run_gtests(dir, runs, tests, failed);
  const double secs = seconds_since(t0);
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%zu oracle tests passed in %.1f s", tests, secs);
  std::string detail = buf;
  if (time_limit_s > 0) {
    std::snprintf(buf, sizeof(buf), " (limit %.0f s)", time_limit_s);
    detail += buf;
    ok = ok && secs < time_limit_s;
  }
  if (!failed.empty()) detail += "; failed:" + failed;
  report({name, ok && tests > 0, detail, {{"tests_passed", tests}, {"seconds", secs}}});
}

df::SyntheticSpec e2e_spec(std::uint64_t seed) {
  df::SyntheticSpec s;
  s.width = s.height = 256;
  s.shapes = {df::DefectShape::Rectangle, df::DefectShape::Scratch};
  s.test_fraction = 0.2;
  s.seed = seed;
  return s;
}

df::PipelineConfig e2e_config(std::uint64_t seed) {
  df::PipelineConfig cfg;
  cfg.stage1.work_size = 256;
  cfg.train.seed = seed;
  return cfg;
}

void log_epoch(const df::EpochLog& e) { progress(df::format_epoch(e)); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks for the defect-forge pipeline"};
  std::string tests_dir = DF_TESTS_DIR, work = (fs::temp_directory_path() / "df_acceptance").string(), json_out;
  bool skip_e2e = false, skip_sweep = false;
  std::size_t sweep_seeds = 5, speed_images = 20;
  app.add_option("--tests-dir", tests_dir, "directory holding the GoogleTest binaries");
  app.add_option("--work", work, "scratch directory for datasets and checkpoints");
  app.add_option("--json", json_out, "write the verdicts as JSON");
  app.add_flag("--skip-e2e", skip_e2e, "skip the synthetic end-to-end and speed criteria");
  app.add_flag("--skip-sweep", skip_sweep, "skip the training-scale trend criterion");
  app.add_option("--sweep-seeds", sweep_seeds, "seeds for the training-scale trend");
  app.add_option("--speed-images", speed_images, "images timed for the stage-1 speed criterion");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);

  try {
    // ---- Oracle criteria
    progress("gradient suite");
    oracle_criterion("gradient-suite", tests_dir,
                     {{"test_tensor", "*FiniteDifferences*"},
                      {"test_stage1", "*FiniteDifferences*"},
                      {"test_stage2", "*Gradient*:*Gradients*"}},
                     120.0);
    progress("geometry oracles");
    oracle_criterion("geometry-oracles", tests_dir,
                     {{"test_geometry", "Jaccard.MatchesPixelOracle:Nms.MatchesBruteForce:Offsets.RoundTrip"},
                      {"test_stage1", "Match.EqualsExhaustiveOracle:Match.InvariantsOnRandomInstances"}});
    progress("reductions");
    oracle_criterion("reductions", tests_dir,
                     {{"test_stage2", "Deformable.ZeroOffsetsEqualConv:RoiAlign.ConstantMap"},
                      {"test_tensor", "Softmax.*"}});
    progress("codec and persistence");
    oracle_criterion("codec-persistence", tests_dir,
                     {{"test_data_io", "Rle.RandomMasksRoundtrip:Rle.CanonicalTextRoundtrips:Checkpoint.RoundtripBitExact"}});

    // ---- Synthetic end-to-end
    std::optional<df::Models> trained;
    if (!skip_e2e) {
      progress("synthetic end-to-end: generating 250 images");
      const auto records = df::generate_synthetic(e2e_spec(7), 250);
      const auto train = df::split_records(records, "train"), test = df::split_records(records, "test");
      const df::PipelineConfig cfg = e2e_config(1);
      df::Models m = df::make_models(cfg);
      const auto t0 = clock_type::now();
      df::train_stage1(m.stage1, train, cfg, log_epoch);
      df::train_stage2(m.stage2, train, cfg, log_epoch);
      const double train_s = seconds_since(t0);
      m.has_stage1 = m.has_stage2 = true;
      df::save_checkpoint(fs::path(work) / "e2e.ckpt", df::models_snapshot(m));
      progress("synthetic end-to-end: evaluating");
      const df::EvalReport rep = df::evaluate(test, m.stage1, m.stage2, cfg);
      {
        std::ofstream out(fs::path(work) / "e2e_report.json");
        out << df::to_json(rep).dump(2) << '\n';
      }
      const bool ok = train.size() == 200 && test.size() == 50 && train_s < 900.0 && rep.patch_accuracy >= 0.90 &&
                      rep.mean_mask_iou >= 0.5 && rep.mean_accuracy >= 0.95;
      char buf[320];
      std::snprintf(buf, sizeof(buf),
                    "%zu/%zu images, train %.0f s (< 900), patch acc %.2f%% (>= 90), mask IoU %.3f (>= 0.5, %zu "
                    "patches), pixel ACC %.2f%% (>= 95)",
                    train.size(), test.size(), train_s, 100 * rep.patch_accuracy, rep.mean_mask_iou,
                    rep.mask_iou_count, 100 * rep.mean_accuracy);
      report({"synthetic-e2e", ok, buf,
              {{"train_seconds", train_s},
               {"patch_accuracy", rep.patch_accuracy},
               {"mean_mask_iou", rep.mean_mask_iou},
               {"pixel_accuracy", rep.mean_accuracy}}});
      trained = std::move(m);
    }

    // ---- Stage-1 speed
    if (trained) {
      progress("stage-1 speed");
      df::SyntheticSpec sparse = e2e_spec(1234);
      sparse.max_defects = 1;
      sparse.area_fraction = 0.01;
      sparse.defect_free_fraction = 0.0;
      const auto images = df::generate_synthetic(sparse, speed_images);
      const df::PipelineConfig cfg = e2e_config(1);
      double on_ms = 0.0, off_ms = 0.0;
      for (const auto& r : images) {
        auto t0 = clock_type::now();
        df::inspect(r.image, trained->stage1, trained->stage2, cfg, false);
        on_ms += 1000 * seconds_since(t0);
        t0 = clock_type::now();
        df::inspect(r.image, trained->stage1, trained->stage2, cfg, true);
        off_ms += 1000 * seconds_since(t0);
      }
      char buf[256];
      std::snprintf(buf, sizeof(buf), "%zu images: stage 1 on %.1f ms/image, off %.1f ms/image (%.1fx)",
                    images.size(), on_ms / static_cast<double>(images.size()),
                    off_ms / static_cast<double>(images.size()), off_ms / std::max(on_ms, 1e-9));
      report({"stage1-speed", on_ms < off_ms, buf, {{"on_ms", on_ms}, {"off_ms", off_ms}}});
    }
    // ---- Training-scale trend
    if (!skip_sweep) {
      const std::vector<double> fractions{0.3, 0.6, 1.0};
      std::vector<std::array<double, 3>> acc;
      nlohmann::json per_seed = nlohmann::json::array();
      std::size_t diminishing = 0;
      for (std::size_t s = 0; s < sweep_seeds; ++s) {
        progress("training-scale sweep, seed " + std::to_string(s + 1) + " of " + std::to_string(sweep_seeds));
        const auto records = df::generate_synthetic(e2e_spec(7 + s), 250);
        const auto train = df::split_records(records, "train"), test = df::split_records(records, "test");
        const auto pts = df::scale_sweep(train, test, fractions, e2e_config(1 + s), log_epoch);
        std::array<double, 3> a{pts[0].mean_accuracy, pts[1].mean_accuracy, pts[2].mean_accuracy};
        acc.push_back(a);
        const bool dim = a[2] - a[1] < a[1] - a[0];
        diminishing += dim;
        per_seed.push_back({{"seed", s + 1}, {"accuracy", a}, {"diminishing_gain", dim}});
        progress("  ACC " + std::to_string(a[0]) + " " + std::to_string(a[1]) + " " + std::to_string(a[2]));
      }
      std::array<double, 3> mean{};
      for (const auto& a : acc)
        for (std::size_t k = 0; k < 3; ++k) mean[k] += a[k] / static_cast<double>(acc.size());
      const bool monotone = mean[0] <= mean[1] && mean[1] <= mean[2];
      const std::size_t need = (3 * sweep_seeds + 4) / 5;
      char buf[320];
      std::snprintf(buf, sizeof(buf),
                    "mean ACC %.2f%% -> %.2f%% -> %.2f%% (non-decreasing: %s), smaller 60->100 gain in %zu of %zu "
                    "seeds (need %zu)",
                    100 * mean[0], 100 * mean[1], 100 * mean[2], monotone ? "yes" : "no", diminishing, sweep_seeds,
                    need);
      report({"scale-sweep-trend", monotone && diminishing >= need, buf,
              {{"mean_accuracy", mean}, {"seeds", per_seed}}});
    }

  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }

  bool all = true;
  nlohmann::json j = nlohmann::json::array();
  for (const auto& v : verdicts) {
    all = all && v.pass;
    j.push_back({{"criterion", v.name}, {"pass", v.pass}, {"detail", v.detail}, {"data", v.data}});
  }
  if (!json_out.empty()) std::ofstream(json_out) << j.dump(2) << '\n';
  std::printf("%zu of %zu criteria passed\n", static_cast<std::size_t>(std::count_if(verdicts.begin(), verdicts.end(), [](const Verdict& v) { return v.pass; })), verdicts.size());
  return all ? 0 : 1;
}

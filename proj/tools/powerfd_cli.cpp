#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "powerfd/bytes.hpp"
#include "powerfd/dataset.hpp"
#include "powerfd/detector.hpp"
#include "powerfd/error.hpp"
#include "powerfd/evalcli.hpp"
#include "powerfd/grid.hpp"
#include "powerfd/hash.hpp"

namespace fs = std::filesystem;
using namespace powerfd;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitStage = 2;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::optional<unsigned> threads;
  std::optional<double> threshold;
};

eval::ExperimentConfig load_config(const Globals& g) {
  eval::ExperimentConfig c;
  if (!g.config.empty()) c = eval::load_experiment_config(g.config);
  if (g.seed) c.seed = *g.seed;
  if (g.threshold) c.threshold = *g.threshold;
  return c;
}

void write_text(const fs::path& path, const std::string& text) {
  write_binary_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

int grid_validate(const std::string& path) {
  const auto grid = grid::load_grid(path);
  const auto report = grid::validate_grid(grid);
  if (report.ok()) {
    std::printf("%s: valid (%zu buses, %zu branches, %zu measurements)\n", path.c_str(), grid.bus_count(),
                grid.branches.size(), grid.plan.entries.size());
    return 0;
  }
  for (const auto& f : report.violations) std::printf("%s\n", f.c_str());
  return kExitStage;
}

int simulate(const Globals& g, const std::string& grid_path, std::optional<std::size_t> days) {
  auto c = load_config(g);
  if (!grid_path.empty()) c.grid = grid_path;
  if (c.grid.empty()) throw CLI::ValidationError("--grid", "a grid is required (flag or config)");
  if (days) c.profiles.days = *days;
  const auto clean = eval::simulate_stage(c);
  fs::create_directories(g.out);
  dataset::save_dataset(clean, fs::path(g.out) / "clean.pfd");
  std::printf("simulated %zu steps over %zu days -> %s\n", clean.clean.size(), clean.days,
              (fs::path(g.out) / "clean.pfd").c_str());
  return 0;
}

int attack_gen(const Globals& g, const std::string& input, const std::string& grid_path) {
  auto c = load_config(g);
  if (!grid_path.empty()) c.grid = grid_path;
  if (c.grid.empty()) throw CLI::ValidationError("--grid", "a grid is required (flag or config)");
  const auto data = eval::attack_stage(dataset::load_dataset(input), c);
  fs::create_directories(g.out);
  dataset::save_dataset(data, fs::path(g.out) / "dataset.pfd");
  std::printf("%zu attacked frames, %zu skipped variants, %zu clean steps already flagged -> %s\n",
              data.attacked.size(), data.skipped.size(), data.clean_flagged,
              (fs::path(g.out) / "dataset.pfd").c_str());
  return 0;
}

int train(const Globals& g, const std::string& input, std::optional<std::size_t> epochs) {
  const auto c = load_config(g);
  const auto data = dataset::load_dataset(input);
  const auto splits = eval::split_stage(data, c);
  auto outcome = eval::train_stage(data, splits, c, epochs.value_or(c.detector.epochs), std::nullopt,
                                   [](const detector::EpochRecord& r) {
                                     std::fprintf(stderr, "%s\n", detector::epoch_json(r).c_str());
                                   });
  outcome.checkpoint.dataset_hash = fnv1a64(read_binary_file(input));
  fs::create_directories(g.out);
  detector::save_checkpoint(outcome.checkpoint, fs::path(g.out) / "checkpoint.pfdc");
  std::string log;
  for (const auto& l : outcome.log) log += l + "\n";
  write_text(fs::path(g.out) / "train_log.jsonl", log);
  std::printf("best epoch %zu, val F1 %.3f%% -> %s\n", outcome.report.best_epoch, 100.0 * outcome.report.best_val_f1,
              (fs::path(g.out) / "checkpoint.pfdc").c_str());
  return 0;
}

int evaluate(const Globals& g, const std::string& input, const std::string& checkpoint_path) {
  const auto c = load_config(g);
  const auto data = dataset::load_dataset(input);
  const auto splits = eval::split_stage(data, c);
  const grid::MeasurementLayout layout(data.plan);
  auto ck = detector::load_checkpoint(checkpoint_path, detector::config_for(layout, c.window));
  const detector::WindowSource test_set(data, splits.test, c.window, ck.standardizer);
  const auto attacks = eval::window_attacks(data, splits.test);
  const auto p = detector::predict_all(ck.model, test_set);

  eval::MetricsReport report;
  report.case_name = c.case_name();
  report.threshold = c.threshold;
  report.dataset_file = fs::path(input).filename().string();
  report.dataset_hash = fnv1a64(read_binary_file(input));
  report.checkpoint_file = fs::path(checkpoint_path).filename().string();
  report.checkpoint_hash = fnv1a64(read_binary_file(checkpoint_path));
  report.best_epoch = ck.epoch;
  report.train_days = splits.train_days;
  report.val_days = splits.val_days;
  report.test_days = splits.test_days;
  report.train_windows = splits.train.size();
  report.val_windows = splits.val.size();
  report.test_windows = splits.test.size();
  std::size_t positives = 0;
  for (const auto& a : attacks) positives += a.has_value();
  report.positive_rate = static_cast<double>(positives) / static_cast<double>(attacks.size());
  report.models.push_back(eval::slice_metrics("powerfdnet", p, attacks, c.threshold));
  if (report.dataset_hash != ck.dataset_hash) {
    std::fprintf(stderr, "note: checkpoint was trained on a different dataset file\n");
  }
  fs::create_directories(g.out);
  write_text(fs::path(g.out) / "report.json", eval::report_json(report));
  const auto table = eval::report_table(report);
  write_text(fs::path(g.out) / "report.txt", table);
  std::fputs(table.c_str(), stdout);
  return 0;
}

/// Window file: {"frames": [[plan-order measurements], ...]}, oldest first.
int detect(const std::string& checkpoint_path, const std::string& grid_path, const std::string& window_path,
           double threshold) {
  const auto grid = grid::load_grid(grid_path);
  const grid::MeasurementLayout layout(grid);
  std::ifstream in(window_path);
  if (!in) throw ParseError("cannot open " + window_path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(window_path + ": " + e.what());
  }
  std::vector<std::vector<float>> frames;
  try {
    frames = j.at("frames").get<std::vector<std::vector<float>>>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(window_path + ": " + e.what());
  }
  if (frames.size() < 2) throw ShapeError("a window needs at least two frames");
  auto ck = detector::load_checkpoint(checkpoint_path, detector::config_for(layout, frames.size() - 1));
  const auto batch = detector::window_batch<float>(frames, layout, ck.standardizer);
  const double p = ck.model.predict(batch).at(0);
  std::printf("%.9g %s\n", p, p >= threshold ? "attack" : "normal");
  return 0;
}

int gradcheck(const Globals& g, std::size_t cases) {
  bool ok = true;
  for (const auto& [name, r] : eval::gradcheck_suite(g.seed.value_or(1), cases)) {
    std::printf("%-18s %s  checked %6zu  max rel error %.3e  tolerance %.0e\n", name.c_str(),
                r.passed() ? "PASS" : "FAIL", r.checked, r.max_rel_error, r.tolerance);
    for (std::size_t i = 0; i < std::min<std::size_t>(r.failures.size(), 3); ++i) {
      std::printf("    %s\n", r.failures[i].c_str());
    }
    ok = ok && r.passed();
  }
  return ok ? 0 : kExitStage;
}

int experiment(const Globals& g) {
  if (g.config.empty()) throw CLI::ValidationError("--config", "the experiment needs a config file");
  const auto c = load_config(g);
  const auto result = eval::run_experiment(c, g.out, [](const std::string& s) { std::fprintf(stderr, "%s\n", s.c_str()); });
  std::fputs(result.table.c_str(), stdout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stealthy false data injection toolkit: grids, estimation, attacks, datasets and the detector"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Master seed");
  app.add_option("--out", g.out, "Output directory")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--threshold", g.threshold, "Decision threshold")->check(CLI::Range(0.0, 1.0));

  auto* grid_cmd = app.add_subcommand("grid", "Grid utilities");
  grid_cmd->require_subcommand(1);
  std::string grid_file;
  auto* validate_cmd = grid_cmd->add_subcommand("validate", "Validate a grid file");
  validate_cmd->add_option("grid", grid_file, "Grid JSON")->required()->check(CLI::ExistingFile);

  std::string sim_grid;
  std::optional<std::size_t> sim_days;
  auto* sim_cmd = app.add_subcommand("simulate", "Simulate clean measurement frames into <out>/clean.pfd");
  sim_cmd->add_option("--grid", sim_grid, "Grid JSON (overrides the config)")->check(CLI::ExistingFile);
  sim_cmd->add_option("--days", sim_days, "Synthetic profile days (overrides the config)");

  std::string atk_in, atk_grid;
  auto* atk_cmd = app.add_subcommand("attack-gen", "Add stealthy attacks; writes <out>/dataset.pfd");
  atk_cmd->add_option("--dataset", atk_in, "Clean dataset file")->required()->check(CLI::ExistingFile);
  atk_cmd->add_option("--grid", atk_grid, "Grid JSON (overrides the config)")->check(CLI::ExistingFile);

  std::string train_in;
  std::optional<std::size_t> train_epochs;
  auto* train_cmd = app.add_subcommand("train", "Train the detector; writes <out>/checkpoint.pfdc");
  train_cmd->add_option("--dataset", train_in, "Dataset file")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--epochs", train_epochs, "Epochs (overrides the config)");

  std::string eval_in, eval_ck;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  eval_cmd->add_option("--dataset", eval_in, "Dataset file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--checkpoint", eval_ck, "Checkpoint file")->required()->check(CLI::ExistingFile);

  std::string det_ck, det_grid, det_window;
  auto* det_cmd = app.add_subcommand("detect", "Probability that a single window is attacked");
  det_cmd->add_option("--checkpoint", det_ck, "Checkpoint file")->required()->check(CLI::ExistingFile);
  det_cmd->add_option("--grid", det_grid, "Grid JSON with the measurement plan")->required()->check(CLI::ExistingFile);
  det_cmd->add_option("--window", det_window, "Window JSON")->required()->check(CLI::ExistingFile);

  std::size_t gc_cases = 10;
  auto* gc_cmd = app.add_subcommand("gradcheck", "64-bit gradient checks of every layer and a tiny model");
  gc_cmd->add_option("--cases", gc_cases, "Sampled cases per check")->capture_default_str();

  auto* exp_cmd = app.add_subcommand("experiment", "Run the full pipeline from a config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }
  if (g.threads) setenv("POWERFD_THREADS", std::to_string(*g.threads).c_str(), 1);

  try {
    if (validate_cmd->parsed()) return grid_validate(grid_file);
    if (sim_cmd->parsed()) return simulate(g, sim_grid, sim_days);
    if (atk_cmd->parsed()) return attack_gen(g, atk_in, atk_grid);
    if (train_cmd->parsed()) return train(g, train_in, train_epochs);
    if (eval_cmd->parsed()) return evaluate(g, eval_in, eval_ck);
    if (det_cmd->parsed()) {
      return detect(det_ck, det_grid, det_window, g.threshold.value_or(eval::kDefaultThreshold));
    }
    if (gc_cmd->parsed()) return gradcheck(g, gc_cases);
    if (exp_cmd->parsed()) return experiment(g);
  } catch (const CLI::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitStage;
  }
  return kExitUsage;
}

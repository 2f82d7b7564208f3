#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "powerfd/attack.hpp"
#include "powerfd/dataset.hpp"
#include "powerfd/detector.hpp"
#include "powerfd/error.hpp"
#include "powerfd/metrics.hpp"
#include "powerfd/nncore.hpp"

namespace powerfd::eval {

/// Failure of one pipeline stage; what() is prefixed with "[stage] ".
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& message)
      : Error("[" + stage + "] " + message), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

// ---------------------------------------------------------------------------
// Report

/// Counts over the positives of one slice plus every negative window.
struct Slice {
  std::string name;
  ConfusionCounts counts;
  Metrics metrics;
};

struct ModelMetrics {
  std::string model;
  std::vector<Slice> slices;  // overall, A, B, C, Vm, Va, then type x variable

  /// Throws std::out_of_range for an unknown slice.
  const Slice& slice(std::string_view name) const;
};

/// Attack record behind each window, nullopt for clean ones.
std::vector<std::optional<attack::AttackSpec>> window_attacks(const dataset::Dataset& data,
                                                              const std::vector<dataset::MeasurementWindow>& windows);

/// Per-slice metrics of window probabilities. The type x variable slices
/// partition the positives.
ModelMetrics slice_metrics(std::string model, std::span<const double> probabilities,
                           const std::vector<std::optional<attack::AttackSpec>>& attacks, double threshold);

struct MetricsReport {
  std::string case_name;
  double threshold = kDefaultThreshold;
  std::string dataset_file;
  std::uint64_t dataset_hash = 0;
  std::string checkpoint_file;
  std::uint64_t checkpoint_hash = 0;
  std::size_t best_epoch = 0;
  std::size_t train_days = 0;
  std::size_t val_days = 0;
  std::size_t test_days = 0;
  std::size_t train_windows = 0;
  std::size_t val_windows = 0;
  std::size_t test_windows = 0;
  double positive_rate = 0.0;  // share of attacked test windows
  std::vector<ModelMetrics> models;

  /// F1 of the predictor that flags everything, the best a label-blind
  /// predictor can reach in expectation.
  double chance_f1() const { return 2.0 * positive_rate / (1.0 + positive_rate); }
  const ModelMetrics& model(std::string_view name) const;
};

/// Label-shuffled controls pass when their F1 stays within this margin of chance.
inline constexpr double kControlMargin = 0.03;

/// Ordered JSON text; equal reports give identical bytes.
std::string report_json(const MetricsReport& report);
/// Fixed-width table of percentages to three decimals.
std::string report_table(const MetricsReport& report);

// ---------------------------------------------------------------------------
// Logistic-regression baseline

struct LogisticOptions {
  std::size_t epochs = 30;
  std::size_t batch = 64;
  double lr = 1e-2;  // Adam step
  double l2 = 1e-4;
  std::uint64_t seed = 1;
};

/// Flattened standardized windows: one row per window, frames oldest first,
/// each frame its bus block followed by its line block.
Eigen::MatrixXd window_features(const detector::WindowSource& source);

class LogisticRegression {
 public:
  /// Mini-batch Adam on mean BCE plus l2 / 2 * |w|^2 from zero weights.
  /// Shuffling depends only on the seed and the epoch.
  void fit(const Eigen::MatrixXd& x, std::span<const std::uint8_t> labels, const LogisticOptions& options);
  std::vector<double> predict(const Eigen::MatrixXd& x) const;

  Eigen::VectorXd weights;
  double bias = 0.0;
};

// ---------------------------------------------------------------------------
// Experiment

struct ProfileSource {
  std::string kind = "synthetic";  // "synthetic" or "csv"
  std::filesystem::path path;      // csv only
  std::size_t days = 20;           // synthetic only
  std::uint64_t seed = 2024;       // synthetic only
  double jitter = 0.10;            // synthetic only
};

struct DetectorSettings {
  double lr = 1e-4;
  std::size_t batch = 64;
  std::size_t epochs = 50;
  nn::Reduction reduction = nn::Reduction::Mean;
  int patience = 5;
  double lr_factor = 0.5;
  double min_lr = 1e-6;
};

/// Every knob of the pipeline. Stage seeds derive from `seed`.
struct ExperimentConfig {
  std::filesystem::path grid;
  ProfileSource profiles;
  std::size_t steps_per_day = 96;
  std::uint64_t seed = 1;
  dataset::GenerationConfig generation;  // its seed and window are overwritten from `seed` and `window`
  std::size_t window = 7;
  std::optional<std::size_t> train_days;  // train includes the validation days; default 312:366 of the days
  std::optional<std::size_t> test_days;
  std::size_t val_days = 2;
  std::vector<attack::AttackType> case_types{attack::AttackType::A, attack::AttackType::B, attack::AttackType::C};
  double threshold = kDefaultThreshold;
  DetectorSettings detector;
  bool control = true;
  std::size_t control_epochs = 10;
  LogisticOptions baseline;

  /// Seed of a pipeline stage.
  std::uint64_t stage_seed(std::uint64_t stage) const;
  dataset::GenerationConfig generation_config() const;
  detector::TrainOptions train_options() const;
  std::string case_name() const;
};

/// Parses the JSON config; relative paths resolve against `base_dir`.
/// Unknown keys are rejected. Throws ParseError.
ExperimentConfig parse_experiment_config(std::string_view json_text, const std::filesystem::path& base_dir);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
/// Canonical JSON of the config with every default filled in.
std::string experiment_config_json(const ExperimentConfig& config);

dataset::ProfileSeries load_profile_source(const ExperimentConfig& config, const grid::GridModel& grid);

/// Clean frames only (no attacks).
dataset::Dataset simulate_stage(const ExperimentConfig& config);
dataset::Dataset attack_stage(const dataset::Dataset& clean, const ExperimentConfig& config);

/// Chronological train / validation / test windows restricted to clean
/// windows and the configured attack types. Validation takes the last
/// val_days of the training days.
struct SplitSets {
  std::vector<dataset::MeasurementWindow> train;
  std::vector<dataset::MeasurementWindow> val;
  std::vector<dataset::MeasurementWindow> test;
  std::size_t train_days = 0;  // excluding validation
  std::size_t val_days = 0;
  std::size_t test_days = 0;
};
SplitSets split_stage(const dataset::Dataset& data, const ExperimentConfig& config);

/// Standardizer fitted on the clean frames of the training days.
detector::Standardizer fit_standardizer(const dataset::Dataset& data, const SplitSets& splits);

/// Permutation of labels drawn from `seed`.
std::vector<std::uint8_t> shuffled_labels(std::vector<std::uint8_t> labels, std::uint64_t seed);

struct TrainOutcome {
  detector::Checkpoint checkpoint;
  detector::TrainReport report;
  std::vector<std::string> log;  // one JSON line per epoch
};

/// Trains PowerFDNet. When `shuffle_seed` is set the train and validation
/// labels are permuted first (label-shuffled control).
TrainOutcome train_stage(const dataset::Dataset& data, const SplitSets& splits, const ExperimentConfig& config,
                         std::size_t epochs, std::optional<std::uint64_t> shuffle_seed = std::nullopt,
                         const std::function<void(const detector::EpochRecord&)>& on_epoch = {});

struct BaselineOutcome {
  LogisticRegression model;
  std::vector<double> test_probabilities;
};
BaselineOutcome baseline_stage(const dataset::Dataset& data, const SplitSets& splits,
                               const detector::Standardizer& standardizer, const ExperimentConfig& config,
                               std::optional<std::uint64_t> shuffle_seed = std::nullopt);

struct ExperimentResult {
  MetricsReport report;
  std::string json;
  std::string table;
};

/// simulate -> attack-gen -> window/split -> train -> baseline -> control ->
/// evaluate. Writes dataset.pfd, checkpoint.pfdc, train_log.jsonl,
/// control_log.jsonl, report.json and report.txt into `out_dir`. Stage
/// failures surface as StageError. `progress` receives human-readable lines.
ExperimentResult run_experiment(const ExperimentConfig& config, const std::filesystem::path& out_dir,
                                const std::function<void(const std::string&)>& progress = {});

// ---------------------------------------------------------------------------
// Gradient checks

/// 64-bit gradient checks of every layer and of a tiny full model.
std::vector<std::pair<std::string, nn::GradCheckReport>> gradcheck_suite(std::uint64_t seed = 1,
                                                                          std::size_t cases = 10);

}  // namespace powerfd::eval

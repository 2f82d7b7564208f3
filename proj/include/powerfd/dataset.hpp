#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "powerfd/attack.hpp"
#include "powerfd/grid.hpp"
#include "powerfd/powerflow.hpp"

namespace powerfd::dataset {

/// Multiplier channels of a profile, in CSV column order.
enum class ProfileChannel : std::uint8_t { PLoad = 0, QLoad = 1, PGen = 2, QGen = 3 };

/// Per-step, per-bus multipliers on the bus data of a grid.
class ProfileSeries {
 public:
  ProfileSeries() = default;
  /// All multipliers start at 1.
  ProfileSeries(std::size_t bus_count, std::size_t steps_per_day, std::size_t days);

  std::size_t bus_count() const { return bus_count_; }
  std::size_t steps_per_day() const { return steps_per_day_; }
  std::size_t days() const { return days_; }
  std::size_t steps() const { return steps_per_day_ * days_; }

  double factor(std::size_t step, std::size_t bus, ProfileChannel c) const { return data_[index(step, bus, c)]; }
  double& factor(std::size_t step, std::size_t bus, ProfileChannel c) { return data_[index(step, bus, c)]; }

  /// Net injections at a step: p_gen * f_pg - p_load * f_pl, likewise for q.
  std::vector<powerflow::PowerPair> injections(const grid::GridModel& grid, std::size_t step) const;

  friend bool operator==(const ProfileSeries&, const ProfileSeries&) = default;

 private:
  std::size_t index(std::size_t step, std::size_t bus, ProfileChannel c) const {
    return (step * bus_count_ + bus) * 4 + static_cast<std::size_t>(c);
  }

  std::size_t bus_count_ = 0;
  std::size_t steps_per_day_ = 0;
  std::size_t days_ = 0;
  std::vector<double> data_;
};

/// CSV with header `step,bus,p_load,q_load,p_gen,q_gen`; `bus` is a grid bus
/// id. Steps must run 0..S-1 without gaps and S must be a whole number of
/// days. Buses absent at a step keep multiplier 1. Throws ParseError or
/// StepGapError.
ProfileSeries parse_profiles(std::string_view csv, const grid::GridModel& grid, std::size_t steps_per_day = 96);
ProfileSeries load_profiles(const std::filesystem::path& path, const grid::GridModel& grid,
                            std::size_t steps_per_day = 96);
std::string serialize_profiles(const ProfileSeries& profiles, const grid::GridModel& grid);

struct SynthOptions {
  std::size_t steps_per_day = 96;
  double jitter = 0.10;  // half-width of the uniform multiplicative jitter
};

/// Daily double-peak load shape with a flatter generation shape, times
/// seeded per-bus, per-step jitter. Jitter 0 makes every day identical.
ProfileSeries synth_profiles(const grid::GridModel& grid, std::size_t days, std::uint64_t seed,
                             const SynthOptions& options = {});

struct NoiseConfig {
  double sigma_v = 0.003;
  double sigma_p = 0.006;
  double sigma_q = 0.006;
  double sigma_i = 0.006;

  double sigma_for(grid::MeasurementKind kind) const;
  bool zero() const { return sigma_v == 0.0 && sigma_p == 0.0 && sigma_q == 0.0 && sigma_i == 0.0; }
  friend bool operator==(const NoiseConfig&, const NoiseConfig&) = default;
};

/// Copies the noise sigmas into the plan so estimation weights match the
/// generator. Throws ValidationError if any sigma is below kMinSigma.
void apply_noise(grid::GridModel& grid, const NoiseConfig& noise);

struct GenerationConfig {
  NoiseConfig noise;
  double alpha = 0.05;
  std::size_t attacks_per_step = 6;
  std::size_t max_retries = 10;
  double stealth_tolerance = 1e-6;
  std::uint64_t seed = 1;
  std::size_t window = 7;     // T; a window holds T + 1 frames
  bool clean_history = true;  // attacked windows use clean frames before the final one
  friend bool operator==(const GenerationConfig&, const GenerationConfig&) = default;
};

/// One solved time step with its noisy double-precision measurement vector.
/// Measurements are rounded to float before use so that stored frames and
/// the vectors attacks are crafted on agree.
struct TimeStep {
  std::size_t t = 0;
  powerflow::StateVector truth;
  Eigen::VectorXd z;
};

/// Solves one power flow per step and adds Gaussian noise. The random stream
/// of step t depends only on (seed, t). Throws ConvergenceError naming the step.
std::vector<TimeStep> simulate_timeseries(const grid::GridModel& grid, const ProfileSeries& profiles,
                                          const NoiseConfig& noise, std::uint64_t seed);

/// Measurement vector in plan order, stored as float.
struct Frame {
  std::size_t t = 0;
  std::vector<float> values;
  std::uint8_t label = 0;
  std::optional<attack::AttackRecord> attack;
  double residual_gap = 0.0;  // verified stealth identity gap, label-1 frames only
};

Frame clean_frame(const TimeStep& step);

struct AttackGeneration {
  std::vector<Frame> frames;
  std::vector<std::string> skipped;  // one line per variant that ran out of retries
  std::size_t clean_flagged = 0;     // steps whose clean frame already trips the detector
};

/// Buses eligible as attack targets: flagged with an injection, not the slack.
std::vector<std::size_t> injection_buses(const grid::GridModel& grid);

/// Up to attacks_per_step attacked variants of every step, each against a
/// distinct injection bus, cycling through {A,B,C} x {Vm,Va}. A variant is
/// kept only if calibration succeeds, the stealth gap is within tolerance
/// and the detector does not flag the attacked vector; otherwise another
/// unused bus and sign are drawn, up to max_retries times. Steps whose clean
/// vector is already flagged carry no attacks.
AttackGeneration generate_attacked_frames(const std::vector<TimeStep>& steps, const grid::GridModel& grid,
                                          const GenerationConfig& config);

struct Dataset {
  GenerationConfig config;
  grid::MeasurementPlan plan;
  std::uint64_t grid_hash = 0;
  std::size_t steps_per_day = 96;
  std::size_t days = 0;
  std::string profile_source;
  std::vector<Frame> clean;     // one per step, clean[t].t == t
  std::vector<Frame> attacked;  // ordered by t
  std::vector<std::string> skipped;
  std::size_t clean_flagged = 0;
};

/// Full pipeline: noise into the plan, simulation, attacks.
Dataset generate_dataset(const grid::GridModel& grid, const ProfileSeries& profiles, const GenerationConfig& config,
                         std::string profile_source = "synthetic");

/// Replaces the attacked frames of `data` with those `config` produces from
/// its clean frames. With the generation noise and seed of `data` this
/// reproduces generate_dataset exactly. Throws ConfigMismatchError if the
/// noise or the grid differ from the ones the frames were simulated with.
Dataset attach_attacks(const Dataset& data, const grid::GridModel& grid, const GenerationConfig& config);

/// T + 1 frames ending at end_step. `attacked` indexes Dataset::attacked for
/// windows whose final frame is attacked.
struct MeasurementWindow {
  std::size_t end_step = 0;
  std::optional<std::size_t> attacked;
  std::uint8_t label = 0;
};

/// One window per clean frame with index >= T, then one per attacked frame
/// with index >= T. Throws DomainError for T < 1.
std::vector<MeasurementWindow> window(const Dataset& data, std::size_t T);

/// Frames of a window, oldest first.
std::vector<const Frame*> window_frames(const Dataset& data, const MeasurementWindow& w, std::size_t T);

struct Split {
  std::vector<MeasurementWindow> train;
  std::vector<MeasurementWindow> test;
};

/// Train and test day counts scaled from 312:54. Train is floored.
std::pair<std::size_t, std::size_t> default_split_days(std::size_t days);

/// Windows whose final frame falls in days [0, train_days) go to train, those
/// in [train_days, train_days + test_days) to test. Throws
/// InsufficientDaysError if the days do not fit.
Split split_train_test(const std::vector<MeasurementWindow>& windows, std::size_t steps_per_day,
                       std::size_t available_days, std::size_t train_days, std::size_t test_days);

/// Little-endian binary container, see docs/formats.md.
inline constexpr std::array<char, 8> kDatasetMagic{'P', 'F', 'D', 'N', 'D', 'S', 'E', 'T'};
inline constexpr std::uint32_t kDatasetVersion = 1;

std::vector<std::uint8_t> encode_dataset(const Dataset& data);
/// Throws ParseError on truncation or checksum mismatch, VersionMismatchError
/// on an unknown version.
Dataset decode_dataset(const std::vector<std::uint8_t>& bytes);
void save_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace powerfd::dataset

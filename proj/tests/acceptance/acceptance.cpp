// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "powerfd/attack.hpp"
#include "powerfd/bytes.hpp"
#include "powerfd/dataset.hpp"
#include "powerfd/detector.hpp"
#include "powerfd/error.hpp"
#include "powerfd/estimation.hpp"
#include "powerfd/evalcli.hpp"
#include "powerfd/metrics.hpp"
#include "powerfd/nncore.hpp"
#include "powerfd/powerflow.hpp"

namespace fs = std::filesystem;
using namespace powerfd;
using attack::AttackSpec;
using attack::AttackType;
using attack::StateVariable;
using powerflow::MeasurementModel;
using powerflow::StateVector;

namespace {

// Tolerances and budgets.
constexpr std::size_t kStealthAttacksPerGrid = 500;
constexpr double kStealthGapTolerance = 1e-6;
constexpr double kFlagRateSlack = 0.02;
constexpr double kStealthBudgetSeconds = 120.0;
constexpr std::size_t kBddTrials = 1000;
constexpr double kGrossSigmas = 20.0;
constexpr double kGrossDetectionRate = 0.99;
constexpr double kAlpha = 0.05;
constexpr double kCleanRateSlack = 0.02;
constexpr std::size_t kWlsStates = 100;
constexpr double kWlsTolerance = 1e-8;
constexpr double kJacobianTolerance = 1e-6;
constexpr double kQuantileTolerance = 1e-3;
constexpr double kLayerGradTolerance = 1e-5;
constexpr std::size_t kGradCases = 20;
constexpr double kF1Tolerance = 1e-3;
constexpr double kDeskF1 = 0.90;
constexpr double kDeskBudgetSeconds = 30.0 * 60.0;
constexpr std::size_t kDeskInjectionBuses = 6;
constexpr std::size_t kDeskDays = 20;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct Outcome {
  bool pass;
  std::string detail;
};

int failures = 0;

void report(const char* id, const char* title, const std::function<Outcome()>& check) {
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  failures += !o.pass;
  std::printf("[%s] criterion %s: %s | %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", id, title, o.detail.c_str(),
              seconds_since(t0));
  std::fflush(stdout);
}

fs::path data_path(const std::string& rel) { return fs::path(POWERFD_DATA_DIR) / rel; }

Eigen::VectorXd add_noise(const Eigen::VectorXd& h, const grid::MeasurementPlan& plan, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Eigen::VectorXd z = h;
  for (std::size_t i = 0; i < plan.size(); ++i) z[static_cast<Eigen::Index>(i)] += plan.entries[i].sigma * n01(rng);
  return z;
}

// Operating point with every load and generation scaled by one factor.
StateVector scaled_operating_point(const grid::GridModel& g, double scale) {
  auto inj = powerflow::scheduled_injections(g);
  for (auto& p : inj) p.p *= scale, p.q *= scale;
  return powerflow::solve_power_flow(g, inj).state;
}

// ---------------------------------------------------------------------------

struct StealthTally {
  std::size_t attacks = 0;
  std::size_t identity_ok = 0;
  std::size_t reestimate_ok = 0;
  std::size_t clean_flagged = 0;
  std::size_t attacked_flagged = 0;
  std::size_t calibration_retries = 0;
  double worst_identity = 0.0;
  double worst_reestimate = 0.0;
};

StealthTally stealth_run(const std::string& grid_file, std::uint64_t seed) {
  auto g = grid::load_grid(data_path(grid_file));
  dataset::apply_noise(g, {});
  const MeasurementModel model(g);
  const auto targets = dataset::injection_buses(g);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> scale(0.8, 1.2);
  StealthTally t;
  while (t.attacks < kStealthAttacksPerGrid) {
    const auto truth = scaled_operating_point(g, scale(rng));
    const auto z = add_noise(model.evaluate(truth), g.plan, rng);
    const auto clean = estimation::run_bdd(z, model, kAlpha);
    const AttackSpec spec{targets[rng() % targets.size()], static_cast<StateVariable>(rng() % 2),
                          static_cast<AttackType>(t.attacks % 3), rng() % 2 ? 1 : -1};
    attack::AttackRecord rec;
    try {
      rec = attack::calibrate_attack(model, clean.estimate.x_hat, spec);
    } catch (const Error&) {
      ++t.calibration_retries;
      continue;
    }
    const auto check = attack::verify_stealth(clean, z, rec, model);
    ++t.attacks;
    t.identity_ok += check.residual_gap <= kStealthGapTolerance;
    t.reestimate_ok += check.reestimated_gap <= kStealthGapTolerance;
    t.worst_identity = std::max(t.worst_identity, check.residual_gap);
    t.worst_reestimate = std::max(t.worst_reestimate, check.reestimated_gap);
    t.clean_flagged += check.clean.flagged;
    t.attacked_flagged += check.attacked.flagged;
  }
  return t;
}

Outcome criterion_stealth() {
  const auto t0 = Clock::now();
  bool pass = true;
  std::string detail;
  for (const auto& [file, seed] : {std::pair{"grids/four_bus.json", 11ULL}, std::pair{"grids/ieee14.json", 12ULL}}) {
    const auto t = stealth_run(file, seed);
    const double n = static_cast<double>(t.attacks);
    const double clean_rate = static_cast<double>(t.clean_flagged) / n;
    const double attacked_rate = static_cast<double>(t.attacked_flagged) / n;
    const bool reest = t.reestimate_ok == t.attacks;
    const bool flags = std::abs(attacked_rate - clean_rate) <= kFlagRateSlack;
    pass = pass && reest && flags;
    detail += fmt("%s: %zu attacks, re-estimated gap<=1e-6 in %.1f%% (worst %.2e) [%s], identity at x+c worst %.1e, "
                  "flag rate %.1f%% vs clean %.1f%% [%s]; ",
                  fs::path(file).stem().c_str(), t.attacks, 100.0 * static_cast<double>(t.reestimate_ok) / n,
                  t.worst_reestimate, reest ? "ok" : "FAIL", t.worst_identity, 100.0 * attacked_rate,
                  100.0 * clean_rate, flags ? "ok" : "FAIL");
  }
  const double secs = seconds_since(t0);
  const bool fast = secs <= kStealthBudgetSeconds;
  detail += fmt("runtime %.1f s [%s]", secs, fast ? "ok" : "FAIL");
  return {pass && fast, detail};
}

// ---------------------------------------------------------------------------

Outcome criterion_bdd() {
  bool pass = true;
  std::string detail;
  std::uint64_t seed = 21;
  for (const auto* file : {"grids/four_bus.json", "grids/ieee14.json"}) {
    auto g = grid::load_grid(data_path(file));
    dataset::apply_noise(g, {});
    const MeasurementModel model(g);
    const auto h = model.evaluate(scaled_operating_point(g, 1.0));
    std::mt19937_64 rng(seed++);
    std::size_t gross = 0, clean = 0, stalled = 0;
    for (std::size_t trial = 0; trial < kBddTrials; ++trial) {
      auto z = add_noise(h, g.plan, rng);
      clean += estimation::run_bdd(z, model, kAlpha).verdict.flagged;
      const std::size_t i = rng() % g.plan.size();
      z[static_cast<Eigen::Index>(i)] += (rng() % 2 ? kGrossSigmas : -kGrossSigmas) * g.plan.entries[i].sigma;
      // An estimator that cannot fit the corrupted vector counts as a detection.
      try {
        gross += estimation::run_bdd(z, model, kAlpha).verdict.flagged;
      } catch (const ConvergenceError&) {
        ++gross, ++stalled;
      }
    }
    const double n = static_cast<double>(kBddTrials);
    const double gross_rate = static_cast<double>(gross) / n;
    const double clean_rate = static_cast<double>(clean) / n;
    const bool ok = gross_rate >= kGrossDetectionRate && std::abs(clean_rate - kAlpha) <= kCleanRateSlack;
    pass = pass && ok;
    detail += fmt("%s: 20-sigma flagged %.1f%% (%zu stalled), clean %.1f%% [%s]; ", fs::path(file).stem().c_str(),
                  100.0 * gross_rate, stalled, 100.0 * clean_rate, ok ? "ok" : "FAIL");
  }
  return {pass, detail};
}

// ---------------------------------------------------------------------------

Outcome criterion_wls() {
  const auto g = grid::load_grid(data_path("grids/ieee14.json"));
  const MeasurementModel model(g);
  const auto slack = model.slack();
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> ang(-0.2, 0.2), mag(0.9, 1.1);
  double worst_state = 0.0, worst_jac = 0.0;
  for (std::size_t k = 0; k < kWlsStates; ++k) {
    auto x = StateVector::flat(g.bus_count());
    for (Eigen::Index b = 0; b < x.v.size(); ++b) {
      x.theta[b] = static_cast<std::size_t>(b) == slack ? 0.0 : ang(rng);
      x.v[b] = mag(rng);
    }
    const auto est = estimation::wls_estimate(model.evaluate(x), model, StateVector::flat(g.bus_count()));
    worst_state = std::max(worst_state, (est.x_hat.pack(slack) - x.pack(slack)).cwiseAbs().maxCoeff());

    const Eigen::MatrixXd j = model.jacobian(x);
    const Eigen::VectorXd free = x.pack(slack);
    // Five-point stencil: truncation O(h^4) stays negligible although entries
    // reach ~50, and the small step keeps clear of the kink of |I| at zero flow.
    constexpr double h = 1e-5;
    auto eval_at = [&](const Eigen::VectorXd& base, Eigen::Index c, double d) {
      Eigen::VectorXd p = base;
      p[c] += d;
      return model.evaluate(StateVector::unpack(p, slack));
    };
    for (Eigen::Index c = 0; c < free.size(); ++c) {
      const Eigen::VectorXd fd =
          (8.0 * (eval_at(free, c, h) - eval_at(free, c, -h)) - (eval_at(free, c, 2 * h) - eval_at(free, c, -2 * h))) /
          (12.0 * h);
      worst_jac = std::max(worst_jac, (fd - j.col(c)).cwiseAbs().maxCoeff());
    }
  }
  const bool ok = worst_state <= kWlsTolerance && worst_jac <= kJacobianTolerance;
  return {ok, fmt("%zu states on ieee14: max |x_hat - x| %.2e (tol %.0e), max |J - J_fd| %.2e (tol %.0e)",
                  kWlsStates, worst_state, kWlsTolerance, worst_jac, kJacobianTolerance)};
}

// ---------------------------------------------------------------------------

Outcome criterion_quantiles() {
  const double t10 = estimation::chi_square_threshold(10, 0.05);
  const double t5 = estimation::chi_square_threshold(5, 0.05);
  const bool ok = std::abs(t10 - 18.307) <= kQuantileTolerance && std::abs(t5 - 11.0705) <= kQuantileTolerance;
  return {ok, fmt("tau(10, 0.05) = %.5f, tau(5, 0.05) = %.5f", t10, t5)};
}

// ---------------------------------------------------------------------------

using nn::Tensor;

Tensor<double> random_tensor(nn::Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor<double> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

// Zero-padded nested-loop grouped cross-correlation, summed in (ci, ky, kx)
// order with the bias added last.
Tensor<double> conv_oracle(const Tensor<double>& x, const nn::ConvSpec& s, const Tensor<double>& w,
                           const Tensor<double>& b) {
  const std::size_t n = x.dim(0), h = x.dim(2), wd = x.dim(3);
  const std::size_t ho = s.out_h(h), wo = s.out_w(wd);
  const std::size_t cig = s.in_channels / s.groups, cog = s.out_channels / s.groups;
  auto at = [&](std::size_t a, std::size_t ch, std::ptrdiff_t y, std::ptrdiff_t q) {
    if (y < 0 || q < 0 || y >= static_cast<std::ptrdiff_t>(h) || q >= static_cast<std::ptrdiff_t>(wd)) return 0.0;
    return x.at(a, ch, static_cast<std::size_t>(y), static_cast<std::size_t>(q));
  };
  Tensor<double> out({n, s.out_channels, ho, wo});
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t co = 0; co < s.out_channels; ++co)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          double acc = 0.0;
          for (std::size_t ci = 0; ci < cig; ++ci)
            for (std::size_t ky = 0; ky < s.kernel_h; ++ky)
              for (std::size_t kx = 0; kx < s.kernel_w; ++kx)
                acc += w.at(co, ci, ky, kx) *
                       at(a, co / cog * cig + ci,
                          static_cast<std::ptrdiff_t>(oy * s.stride + ky) - static_cast<std::ptrdiff_t>(s.pad_h),
                          static_cast<std::ptrdiff_t>(ox * s.stride + kx) - static_cast<std::ptrdiff_t>(s.pad_w));
          out.at(a, co, oy, ox) = acc + (s.bias ? b[co] : 0.0);
        }
  return out;
}

Outcome criterion_gradients() {
  bool pass = true;
  std::string detail;
  for (const auto& [name, r] : eval::gradcheck_suite(1, kGradCases)) {
    const bool layer = name != "powerfdnet_tiny";
    const bool ok = r.passed() && (!layer || r.tolerance <= kLayerGradTolerance);
    pass = pass && ok;
    detail += fmt("%s %.1e%s; ", name.c_str(), r.max_rel_error, ok ? "" : " FAIL");
  }
  std::mt19937_64 rng(51);
  std::size_t exact = 0;
  constexpr std::size_t kConvTrials = 300;
  for (std::size_t trial = 0; trial < kConvTrials; ++trial) {
    auto pick = [&](std::size_t lo, std::size_t hi) { return lo + rng() % (hi - lo + 1); };
    nn::ConvSpec s;
    s.groups = pick(1, 4);
    s.in_channels = s.groups * pick(1, 3);
    s.out_channels = s.groups * pick(1, 3);
    s.kernel_h = pick(1, 3);
    s.kernel_w = pick(1, 3);
    s.stride = pick(1, 2);
    s.pad_h = pick(0, s.kernel_h - 1);
    s.pad_w = pick(0, s.kernel_w - 1);
    s.bias = rng() % 2;
    const auto x = random_tensor({2, s.in_channels, s.kernel_h + pick(0, 4), s.kernel_w + pick(0, 5)}, rng);
    const auto w = random_tensor(s.weight_shape(), rng);
    const auto b = random_tensor({s.out_channels}, rng);
    const auto y = nn::conv2d_grouped(x, s, w, s.bias ? &b : nullptr);
    const auto o = conv_oracle(x, s, w, b);
    exact += y.shape() == o.shape() && y.values() == o.values();
  }
  pass = pass && exact == kConvTrials;
  detail += fmt("grouped conv equals brute force in %zu/%zu random specs", exact, kConvTrials);
  return {pass, detail};
}

// ---------------------------------------------------------------------------

Outcome criterion_shapes() {
  using detector::PowerFdConfig;
  bool pass = true;
  std::string detail;
  for (const auto& cfg : {PowerFdConfig{3, 4, 2}, PowerFdConfig{16, 24, 7}}) {
    std::mt19937_64 rng(61);
    detector::PowerFdModel<float> model(cfg);
    model.init(5);
    constexpr std::size_t windows = 2;
    const std::size_t n = windows * cfg.frames(), mb = cfg.m_b, ml = cfg.m_l, f = cfg.frames();
    detector::WindowBatch<float> batch;
    batch.bus = random_tensor({n, mb, 1, PowerFdConfig::c_b}, rng).cast<float>();
    batch.line = random_tensor({n, ml, 1, PowerFdConfig::c_l}, rng).cast<float>();
    batch.labels = {0.0f, 1.0f};
    detector::ShapeLedger ledger;
    typename detector::PowerFdModel<float>::Cache cache;
    const auto p = model.forward(batch, nn::Mode::Train, cache, &ledger);
    const std::vector<std::pair<std::string, nn::Shape>> expected{
        {"bus.input", {n, mb, 1, 3}},          {"bus.conv1", {n, mb, 1, 3}},
        {"bus.stack1", {n, mb, 2, 3}},         {"bus.conv2", {n, mb, 1, 3}},
        {"bus.stack2", {n, mb, 2, 3}},         {"bus.conv3", {n, 12 * mb, 1, 1}},
        {"bus.reshape3", {n, mb, 1, 12}},      {"bus.conv4", {n, mb, 1, 6}},
        {"bus.conv5", {n, mb, 1, 4}},          {"line.input", {n, ml, 1, 6}},
        {"line.conv1", {n, ml, 1, 6}},         {"line.stack1", {n, ml, 2, 6}},
        {"line.conv2", {n, ml, 1, 6}},         {"line.stack2", {n, ml, 2, 6}},
        {"line.conv3", {n, 12 * ml, 1, 1}},    {"line.reshape3", {n, ml, 1, 12}},
        {"line.conv4", {n, ml, 1, 6}},         {"line.conv5", {n, ml, 1, 4}},
        {"spatial.input", {n, 1, mb + ml, 4}}, {"spatial.conv1", {n, 256, 1, 4}},
        {"spatial.conv2", {n, 256, 1, 1}},     {"spatial.reshape2", {n, 1, 256, 1}},
        {"spatial.conv3", {n, 128, 1, 1}},     {"spatial.output", {n, 128}},
        {"temporal.input", {f, windows, 128}}, {"temporal.lstm1", {f, windows, 256}},
        {"temporal.lstm2", {f, windows, 256}}, {"temporal.lstm3", {f, windows, 256}},
        {"temporal.lstm4", {f, windows, 128}}, {"temporal.head", {windows, 1}},
    };
    bool ok = ledger.entries == expected && p.size() == windows;
    for (float v : p) ok = ok && v > 0.0f && v < 1.0f;
    pass = pass && ok;
    detail += fmt("(%zu, %zu, %zu): %zu ledger entries, y_p = {%.4f, %.4f} [%s]; ", cfg.m_b, cfg.m_l, cfg.T,
                  ledger.entries.size(), p.size() > 0 ? p[0] : -1.0f, p.size() > 1 ? p[1] : -1.0f,
                  ok ? "ok" : "FAIL");
  }
  return {pass, detail};
}

// ---------------------------------------------------------------------------

Outcome criterion_f1() {
  const double f1 = 100.0 * eval::f1_score(0.99557, 0.99778);
  return {std::abs(f1 - 99.668) <= kF1Tolerance, fmt("F1(99.557%%, 99.778%%) = %.4f%%", f1)};
}

// ---------------------------------------------------------------------------

fs::path work_dir(const std::string& name) {
  const auto dir = fs::current_path() / "acceptance_runs" / name;
  fs::remove_all(dir);
  return dir;
}

Outcome criterion_desk(const eval::ExperimentConfig& cfg, const fs::path& out) {
  const auto t0 = Clock::now();
  const auto result = eval::run_experiment(cfg, out, [](const std::string& line) {
    std::fprintf(stderr, "%s\n", line.c_str());
  });
  const double secs = seconds_since(t0);
  const auto& r = result.report;
  const auto data = dataset::load_dataset(out / "dataset.pfd");
  const auto g = grid::load_grid(cfg.grid);
  const std::size_t buses = dataset::injection_buses(g).size();
  const auto [train_default, test_default] = dataset::default_split_days(data.days);

  const bool scale = buses >= kDeskInjectionBuses && data.days >= kDeskDays && data.steps_per_day == 96 &&
                     data.config.attacks_per_step == 6 && r.train_days + r.val_days == train_default &&
                     r.test_days == test_default && cfg.case_types == std::vector<AttackType>{AttackType::A};
  const double f1 = r.model("powerfdnet").slice("overall").metrics.f1;
  const double lr = r.model("logistic_regression").slice("overall").metrics.f1;
  const double control = r.model("powerfdnet_shuffled_labels").slice("overall").metrics.f1;
  const double chance = r.chance_f1();
  const bool beats = f1 >= kDeskF1 && f1 > lr;
  const bool at_chance = control <= chance + eval::kControlMargin;
  const bool fast = secs <= kDeskBudgetSeconds;
  return {scale && beats && at_chance && fast,
          fmt("%zu injection buses, %zu days x %zu steps, %zu attacks/step, %zu+%zu train/val days vs %zu test "
              "[%s]; Type-A test F1 %.2f%% vs LR %.2f%% [%s]; shuffled-label F1 %.2f%% vs chance %.2f%% + %.0f "
              "[%s]; runtime %.1f min [%s]",
              buses, data.days, data.steps_per_day, data.config.attacks_per_step, r.train_days, r.val_days,
              r.test_days, scale ? "ok" : "FAIL", 100.0 * f1, 100.0 * lr, beats ? "ok" : "FAIL", 100.0 * control,
              100.0 * chance, 100.0 * eval::kControlMargin, at_chance ? "ok" : "FAIL", secs / 60.0,
              fast ? "ok" : "FAIL")};
}

// ---------------------------------------------------------------------------

Outcome criterion_determinism(const eval::ExperimentConfig& desk, const fs::path& desk_out) {
  bool pass = true;
  std::string detail;

  // Every stage of a small experiment, run twice into separate directories.
  auto small = desk;
  small.profiles.days = 4;
  small.val_days = 1;
  small.detector.epochs = 2;
  small.control_epochs = 1;
  small.baseline.epochs = 3;
  const auto a = work_dir("determinism_a");
  const auto b = work_dir("determinism_b");
  eval::run_experiment(small, a);
  eval::run_experiment(small, b);
  for (const auto* f : {"config.json", "dataset.pfd", "checkpoint.pfdc", "train_log.jsonl", "control_log.jsonl",
                        "report.json", "report.txt"}) {
    const bool same = read_binary_file(a / f) == read_binary_file(b / f);
    pass = pass && same;
    if (!same) detail += fmt("%s differs; ", f);
  }
  detail += "small experiment artifacts identical across runs; ";

  // The desk-scale dataset regenerates byte for byte through the separate stages.
  const auto rebuilt = eval::attack_stage(eval::simulate_stage(desk), desk);
  const bool same_dataset = dataset::encode_dataset(rebuilt) == read_binary_file(desk_out / "dataset.pfd");
  pass = pass && same_dataset;
  detail += fmt("desk dataset regenerated %s", same_dataset ? "identically" : "DIFFERENTLY");
  return {pass, detail};
}

}  // namespace

int main(int argc, char** argv) {
  // With an argument, only the listed criteria run, e.g. `acceptance 1 4`.
  const std::vector<std::string> only(argv + 1, argv + argc);
  auto wanted = [&](const char* id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };

  if (wanted("1")) report("1", "stealth bypass of the residual detector", criterion_stealth);
  if (wanted("2")) report("2", "chi-square bad-data detection", criterion_bdd);
  if (wanted("3")) report("3", "WLS recovery and Jacobian", criterion_wls);
  if (wanted("4")) report("4", "chi-square quantiles", criterion_quantiles);
  if (wanted("5")) report("5", "layer gradients and grouped convolution", criterion_gradients);
  if (wanted("6")) report("6", "PowerFDNet shape ledger", criterion_shapes);
  if (wanted("7")) report("7", "F1 arithmetic", criterion_f1);
  if (wanted("8") || wanted("9")) {
    const auto cfg = eval::load_experiment_config(data_path("configs/desk.json"));
    const auto desk_out = work_dir("desk");
    bool desk_ok = false;
    report("8", "desk-scale detection experiment", [&] {
      auto o = criterion_desk(cfg, desk_out);
      desk_ok = true;
      return o;
    });
    if (wanted("9")) {
      report("9", "byte-determinism of every stage", [&]() -> Outcome {
        if (!desk_ok) return {false, "desk experiment did not complete"};
        return criterion_determinism(cfg, desk_out);
      });
    }
  }
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}

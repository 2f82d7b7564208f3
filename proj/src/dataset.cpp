#include "powerfd/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "powerfd/bytes.hpp"
#include "powerfd/error.hpp"
#include "powerfd/hash.hpp"
#include "powerfd/parallel.hpp"
#include "powerfd/random.hpp"

namespace powerfd::dataset {


namespace {

constexpr std::uint64_t kNoiseStream = 1;
constexpr std::uint64_t kAttackStream = 2;
constexpr std::uint64_t kProfileStream = 3;
constexpr std::uint64_t kDayStream = 4;

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(trim(line.substr(start, comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

template <class T>
T parse_number(std::string_view field, std::size_t line_no) {
  T value{};
  const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
  if (ec != std::errc() || ptr != field.data() + field.size()) {
    throw ParseError("profile line " + std::to_string(line_no) + ": cannot parse '" + std::string(field) + "'");
  }
  return value;
}

std::string format_double(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

double gaussian_bump(double h, double mu, double s) { return std::exp(-0.5 * (h - mu) * (h - mu) / (s * s)); }

}  // namespace

// ---------------------------------------------------------------------------
// Profiles

ProfileSeries::ProfileSeries(std::size_t bus_count, std::size_t steps_per_day, std::size_t days)
    : bus_count_(bus_count), steps_per_day_(steps_per_day), days_(days), data_(steps() * bus_count * 4, 1.0) {}

std::vector<powerflow::PowerPair> ProfileSeries::injections(const grid::GridModel& grid, std::size_t step) const {
  if (grid.bus_count() != bus_count_) throw DomainError("profile bus count does not match the grid");
  if (step >= steps()) throw DomainError("profile step " + std::to_string(step) + " out of range");
  std::vector<powerflow::PowerPair> out(bus_count_);
  for (std::size_t b = 0; b < bus_count_; ++b) {
    const auto& bus = grid.buses[b];
    out[b].p = bus.p_gen * factor(step, b, ProfileChannel::PGen) - bus.p_load * factor(step, b, ProfileChannel::PLoad);
    out[b].q = bus.q_gen * factor(step, b, ProfileChannel::QGen) - bus.q_load * factor(step, b, ProfileChannel::QLoad);
  }
  return out;
}

ProfileSeries parse_profiles(std::string_view csv, const grid::GridModel& grid, std::size_t steps_per_day) {
  if (steps_per_day == 0) throw DomainError("steps_per_day must be positive");
  std::map<int, std::size_t> bus_index;
  for (std::size_t b = 0; b < grid.bus_count(); ++b) bus_index[grid.buses[b].id] = b;

  struct Row {
    std::size_t step;
    std::size_t bus;
    std::array<double, 4> f;
  };
  std::vector<Row> rows;
  std::size_t line_no = 0;
  bool header_seen = false;
  std::size_t pos = 0;
  while (pos <= csv.size()) {
    const auto nl = csv.find('\n', pos);
    const auto line = trim(csv.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos));
    pos = nl == std::string_view::npos ? csv.size() + 1 : nl + 1;
    ++line_no;
    if (line.empty() || line.front() == '#') continue;
    const auto fields = split_csv(line);
    if (!header_seen) {
      header_seen = true;
      if (fields.size() != 6 || fields[0] != "step" || fields[1] != "bus") {
        throw ParseError("profile header must be step,bus,p_load,q_load,p_gen,q_gen");
      }
      continue;
    }
    if (fields.size() != 6) throw ParseError("profile line " + std::to_string(line_no) + ": expected 6 fields");
    Row r{};
    r.step = parse_number<std::size_t>(fields[0], line_no);
    const int id = parse_number<int>(fields[1], line_no);
    const auto it = bus_index.find(id);
    if (it == bus_index.end()) {
      throw ParseError("profile line " + std::to_string(line_no) + ": unknown bus id " + std::to_string(id));
    }
    r.bus = it->second;
    for (std::size_t c = 0; c < 4; ++c) {
      r.f[c] = parse_number<double>(fields[2 + c], line_no);
      if (!std::isfinite(r.f[c])) throw ParseError("profile line " + std::to_string(line_no) + ": non-finite factor");
    }
    rows.push_back(r);
  }
  if (!header_seen) throw ParseError("profile file is empty");
  if (rows.empty()) throw ParseError("profile file has no data rows");

  std::set<std::size_t> steps;
  for (const auto& r : rows) steps.insert(r.step);
  std::size_t expect = 0;
  for (auto s : steps) {
    if (s != expect) throw StepGapError("profile step " + std::to_string(expect) + " is missing");
    ++expect;
  }
  if (steps.size() % steps_per_day != 0) {
    throw ParseError("profile has " + std::to_string(steps.size()) + " steps, not a whole number of " +
                     std::to_string(steps_per_day) + "-step days");
  }
  ProfileSeries out(grid.bus_count(), steps_per_day, steps.size() / steps_per_day);
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < 4; ++c) out.factor(r.step, r.bus, static_cast<ProfileChannel>(c)) = r.f[c];
  }
  return out;
}

ProfileSeries load_profiles(const std::filesystem::path& path, const grid::GridModel& grid,
                            std::size_t steps_per_day) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open profile file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_profiles(ss.str(), grid, steps_per_day);
}

std::string serialize_profiles(const ProfileSeries& profiles, const grid::GridModel& grid) {
  std::string out = "step,bus,p_load,q_load,p_gen,q_gen\n";
  for (std::size_t t = 0; t < profiles.steps(); ++t) {
    for (std::size_t b = 0; b < profiles.bus_count(); ++b) {
      out += std::to_string(t);
      out += ',';
      out += std::to_string(grid.buses[b].id);
      for (std::size_t c = 0; c < 4; ++c) {
        out += ',';
        out += format_double(profiles.factor(t, b, static_cast<ProfileChannel>(c)));
      }
      out += '\n';
    }
  }
  return out;
}

ProfileSeries synth_profiles(const grid::GridModel& grid, std::size_t days, std::uint64_t seed,
                             const SynthOptions& options) {
  if (days < 1) throw DomainError("synth_profiles needs at least one day");
  if (options.steps_per_day < 1) throw DomainError("steps_per_day must be positive");
  if (!(options.jitter >= 0.0 && options.jitter < 1.0)) throw DomainError("jitter must lie in [0, 1)");
  ProfileSeries out(grid.bus_count(), options.steps_per_day, days);
  const double j = options.jitter;
  for (std::size_t d = 0; d < days; ++d) {
    auto day_rng = make_rng(seed, kDayStream, d);
    std::uniform_real_distribution<double> day_level(-0.5 * j, 0.5 * j);
    const double level = j > 0.0 ? 1.0 + day_level(day_rng) : 1.0;
    for (std::size_t s = 0; s < options.steps_per_day; ++s) {
      const std::size_t t = d * options.steps_per_day + s;
      auto rng = make_rng(seed, kProfileStream, t);
      std::uniform_real_distribution<double> u(-j, j);
      const double h = 24.0 * static_cast<double>(s) / static_cast<double>(options.steps_per_day);
      // Morning and evening peaks on a night base, peak close to 1.
      const double load = 0.6 + 0.25 * gaussian_bump(h, 8.5, 1.8) + 0.4 * gaussian_bump(h, 19.0, 2.2);
      const double gen = 0.85 + 0.15 * load;
      for (std::size_t b = 0; b < grid.bus_count(); ++b) {
        const std::array<double, 4> base{load, load, gen, gen};
        for (std::size_t c = 0; c < 4; ++c) {
          const double noise = j > 0.0 ? 1.0 + u(rng) : 1.0;
          out.factor(t, b, static_cast<ProfileChannel>(c)) = base[c] * level * noise;
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Simulation

double NoiseConfig::sigma_for(grid::MeasurementKind kind) const {
  using grid::MeasurementKind;
  switch (kind) {
    case MeasurementKind::BusV: return sigma_v;
    case MeasurementKind::BusP:
    case MeasurementKind::LinePIn:
    case MeasurementKind::LinePOut: return sigma_p;
    case MeasurementKind::BusQ:
    case MeasurementKind::LineQIn:
    case MeasurementKind::LineQOut: return sigma_q;
    default: return sigma_i;
  }
}

void apply_noise(grid::GridModel& grid, const NoiseConfig& noise) {
  for (auto& d : grid.plan.entries) {
    const double s = noise.sigma_for(d.kind);
    if (!(s >= grid::kMinSigma)) {
      throw ValidationError("noise sigma for " + std::string(grid::to_string(d.kind)) + " is below the minimum");
    }
    d.sigma = s;
  }
}

std::vector<TimeStep> simulate_timeseries(const grid::GridModel& grid, const ProfileSeries& profiles,
                                          const NoiseConfig& noise, std::uint64_t seed) {
  const powerflow::MeasurementModel model(grid);
  std::vector<TimeStep> out(profiles.steps());
  parallel_for(out.size(), [&](std::size_t t) {
    powerflow::PowerFlowSolution sol;
    try {
      sol = powerflow::solve_power_flow(grid, profiles.injections(grid, t));
    } catch (const ConvergenceError& e) {
      throw ConvergenceError("power flow failed at step " + std::to_string(t) + ": " + e.what());
    }
    auto rng = make_rng(seed, kNoiseStream, t);
    std::normal_distribution<double> n01(0.0, 1.0);
    Eigen::VectorXd z = model.evaluate(sol.state);
    for (std::size_t i = 0; i < model.size(); ++i) {
      const auto k = static_cast<Eigen::Index>(i);
      z[k] = static_cast<double>(static_cast<float>(z[k] + noise.sigma_for(grid.plan.entries[i].kind) * n01(rng)));
    }
    out[t] = TimeStep{t, std::move(sol.state), std::move(z)};
  });
  return out;
}

Frame clean_frame(const TimeStep& step) {
  Frame f;
  f.t = step.t;
  f.values.resize(static_cast<std::size_t>(step.z.size()));
  for (Eigen::Index i = 0; i < step.z.size(); ++i) f.values[static_cast<std::size_t>(i)] = static_cast<float>(step.z[i]);
  return f;
}

// ---------------------------------------------------------------------------
// Attacks

std::vector<std::size_t> injection_buses(const grid::GridModel& grid) {
  std::vector<std::size_t> out;
  for (std::size_t b = 0; b < grid.bus_count(); ++b) {
    if (grid.buses[b].has_injection && !grid.buses[b].is_slack) out.push_back(b);
  }
  return out;
}

AttackGeneration generate_attacked_frames(const std::vector<TimeStep>& steps, const grid::GridModel& grid,
                                          const GenerationConfig& config) {
  const powerflow::MeasurementModel model(grid);
  const auto candidates = injection_buses(grid);
  if (candidates.size() < config.attacks_per_step) {
    throw DomainError("grid has " + std::to_string(candidates.size()) + " injection buses, fewer than the " +
                      std::to_string(config.attacks_per_step) + " attacks per step");
  }
  static constexpr std::array<attack::AttackType, 3> kTypes{attack::AttackType::A, attack::AttackType::B,
                                                            attack::AttackType::C};

  struct StepResult {
    std::vector<Frame> frames;
    std::vector<std::string> skipped;
    bool clean_flagged = false;
  };
  std::vector<StepResult> results(steps.size());

  parallel_for(steps.size(), [&](std::size_t s) {
    const auto& step = steps[s];
    auto& res = results[s];
    const auto clean = estimation::run_bdd(step.z, model, config.alpha);
    if (clean.verdict.flagged) {
      res.clean_flagged = true;
      return;
    }
    auto rng = make_rng(config.seed, kAttackStream, step.t);
    auto pool = candidates;
    std::shuffle(pool.begin(), pool.end(), rng);
    std::size_t next = 0;
    std::bernoulli_distribution coin(0.5);

    for (std::size_t v = 0; v < config.attacks_per_step; ++v) {
      const auto variable = v % 2 == 0 ? attack::StateVariable::Vm : attack::StateVariable::Va;
      const auto type = kTypes[(v / 2) % kTypes.size()];
      bool done = false;
      std::string last_reason = "no unused injection bus left";
      for (std::size_t attempt = 0; attempt <= config.max_retries && next < pool.size() && !done; ++attempt) {
        const attack::AttackSpec spec{pool[next++], variable, type, coin(rng) ? 1 : -1};
        try {
          auto rec = attack::calibrate_attack(model, clean.estimate.x_hat, spec);
          const auto check = attack::verify_stealth(clean, step.z, rec, model);
          if (check.residual_gap > config.stealth_tolerance) {
            last_reason = "stealth gap " + format_double(check.residual_gap);
            continue;
          }
          if (check.attacked.flagged) {
            last_reason = "attacked vector flagged";
            continue;
          }
          Frame f;
          f.t = step.t;
          f.label = 1;
          f.residual_gap = check.residual_gap;
          f.values.resize(model.size());
          for (std::size_t i = 0; i < model.size(); ++i) {
            const auto k = static_cast<Eigen::Index>(i);
            f.values[i] = static_cast<float>(step.z[k] + rec.a[k]);
          }
          f.attack = std::move(rec);
          res.frames.push_back(std::move(f));
          done = true;
        } catch (const CalibrationError& e) {
          last_reason = e.what();
        } catch (const ConvergenceError& e) {
          last_reason = e.what();
        } catch (const RankDeficiencyError& e) {
          last_reason = e.what();
        }
      }
      if (!done) {
        res.skipped.push_back("step " + std::to_string(step.t) + " type " + std::string(attack::to_string(type)) +
                              " " + std::string(attack::to_string(variable)) + ": " + last_reason);
      }
    }
  });

  AttackGeneration out;
  for (auto& r : results) {
    out.clean_flagged += r.clean_flagged;
    for (auto& f : r.frames) out.frames.push_back(std::move(f));
    for (auto& s : r.skipped) out.skipped.push_back(std::move(s));
  }
  return out;
}

Dataset generate_dataset(const grid::GridModel& grid_in, const ProfileSeries& profiles, const GenerationConfig& config,
                         std::string profile_source) {
  if (!config.clean_history) throw DomainError("only clean-history windows are supported");
  if (config.window < 1) throw DomainError("window length T must be at least 1");
  grid::GridModel grid = grid_in;
  apply_noise(grid, config.noise);

  Dataset data;
  data.config = config;
  data.plan = grid.plan;
  data.grid_hash = grid::grid_hash(grid);
  data.steps_per_day = profiles.steps_per_day();
  data.days = profiles.days();
  data.profile_source = std::move(profile_source);

  const auto steps = simulate_timeseries(grid, profiles, config.noise, config.seed);
  data.clean.reserve(steps.size());
  for (const auto& s : steps) data.clean.push_back(clean_frame(s));
  auto attacks = generate_attacked_frames(steps, grid, config);
  data.attacked = std::move(attacks.frames);
  data.skipped = std::move(attacks.skipped);
  data.clean_flagged = attacks.clean_flagged;
  return data;
}

Dataset attach_attacks(const Dataset& data, const grid::GridModel& grid_in, const GenerationConfig& config) {
  if (!config.clean_history) throw DomainError("only clean-history windows are supported");
  if (!(config.noise == data.config.noise)) {
    throw ConfigMismatchError("attack generation noise differs from the noise the frames were simulated with");
  }
  grid::GridModel grid = grid_in;
  apply_noise(grid, config.noise);
  if (grid::grid_hash(grid) != data.grid_hash) throw ConfigMismatchError("dataset was generated on a different grid");

  std::vector<TimeStep> steps(data.clean.size());
  for (std::size_t k = 0; k < steps.size(); ++k) {
    const auto& values = data.clean[k].values;
    steps[k].t = data.clean[k].t;
    steps[k].z = Eigen::Map<const Eigen::VectorXf>(values.data(), static_cast<Eigen::Index>(values.size()))
                     .cast<double>();
  }
  Dataset out = data;
  out.config = config;
  auto attacks = generate_attacked_frames(steps, grid, config);
  out.attacked = std::move(attacks.frames);
  out.skipped = std::move(attacks.skipped);
  out.clean_flagged = attacks.clean_flagged;
  return out;
}

// ---------------------------------------------------------------------------
// Windows and split

std::vector<MeasurementWindow> window(const Dataset& data, std::size_t T) {
  if (T < 1) throw DomainError("window length T must be at least 1");
  std::vector<MeasurementWindow> out;
  for (std::size_t t = T; t < data.clean.size(); ++t) out.push_back({t, std::nullopt, data.clean[t].label});
  for (std::size_t i = 0; i < data.attacked.size(); ++i) {
    const auto t = data.attacked[i].t;
    if (t >= T) out.push_back({t, i, data.attacked[i].label});
  }
  return out;
}

std::vector<const Frame*> window_frames(const Dataset& data, const MeasurementWindow& w, std::size_t T) {
  if (w.end_step < T || w.end_step >= data.clean.size()) throw DomainError("window does not fit the dataset");
  std::vector<const Frame*> out;
  out.reserve(T + 1);
  for (std::size_t k = w.end_step - T; k < w.end_step; ++k) out.push_back(&data.clean[k]);
  out.push_back(w.attacked ? &data.attacked.at(*w.attacked) : &data.clean[w.end_step]);
  return out;
}

std::pair<std::size_t, std::size_t> default_split_days(std::size_t days) {
  const std::size_t train = days * 312 / 366;
  return {train, days - train};
}

Split split_train_test(const std::vector<MeasurementWindow>& windows, std::size_t steps_per_day,
                       std::size_t available_days, std::size_t train_days, std::size_t test_days) {
  if (train_days < 1 || test_days < 1 || train_days + test_days > available_days) {
    throw InsufficientDaysError("cannot split " + std::to_string(available_days) + " days into " +
                                std::to_string(train_days) + " training and " + std::to_string(test_days) +
                                " test days");
  }
  Split out;
  for (const auto& w : windows) {
    const std::size_t day = w.end_step / steps_per_day;
    if (day < train_days) {
      out.train.push_back(w);
    } else if (day < train_days + test_days) {
      out.test.push_back(w);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binary container

namespace {

void put_mask(ByteWriter& w, const std::vector<std::uint8_t>& mask) {
  std::vector<std::uint8_t> packed((mask.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) packed[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  }
  w.put_bytes(packed.data(), packed.size());
}

std::vector<std::uint8_t> get_mask(ByteReader& r, std::size_t n) {
  std::vector<std::uint8_t> packed((n + 7) / 8);
  r.get_bytes(packed.data(), packed.size());
  std::vector<std::uint8_t> mask(n);
  for (std::size_t i = 0; i < n; ++i) mask[i] = (packed[i / 8] >> (i % 8)) & 1u;
  return mask;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

nlohmann::ordered_json metadata_json(const Dataset& d) {
  nlohmann::ordered_json plan = nlohmann::ordered_json::array();
  for (const auto& e : d.plan.entries) {
    plan.push_back({{"kind", grid::to_string(e.kind)}, {"location", e.location}, {"sigma", e.sigma}});
  }
  const auto& c = d.config;
  return {
      {"format", "powerfd-dataset"},
      {"grid_hash", hex64(d.grid_hash)},
      {"steps_per_day", d.steps_per_day},
      {"days", d.days},
      {"profile_source", d.profile_source},
      {"config",
       {{"alpha", c.alpha},
        {"noise", {{"sigma_v", c.noise.sigma_v}, {"sigma_p", c.noise.sigma_p}, {"sigma_q", c.noise.sigma_q},
                   {"sigma_i", c.noise.sigma_i}}},
        {"attacks_per_step", c.attacks_per_step},
        {"max_retries", c.max_retries},
        {"stealth_tolerance", c.stealth_tolerance},
        {"seed", c.seed},
        {"window", c.window},
        {"clean_history", c.clean_history}}},
      {"clean_flagged", d.clean_flagged},
      {"skipped", d.skipped},
      {"plan", plan},
  };
}

void read_metadata(const nlohmann::json& j, Dataset& d) {
  if (j.at("format") != "powerfd-dataset") throw ParseError("dataset metadata has the wrong format tag");
  d.grid_hash = std::stoull(j.at("grid_hash").get<std::string>(), nullptr, 16);
  d.steps_per_day = j.at("steps_per_day").get<std::size_t>();
  d.days = j.at("days").get<std::size_t>();
  d.profile_source = j.at("profile_source").get<std::string>();
  const auto& c = j.at("config");
  d.config.alpha = c.at("alpha").get<double>();
  const auto& n = c.at("noise");
  d.config.noise = {n.at("sigma_v").get<double>(), n.at("sigma_p").get<double>(), n.at("sigma_q").get<double>(),
                    n.at("sigma_i").get<double>()};
  d.config.attacks_per_step = c.at("attacks_per_step").get<std::size_t>();
  d.config.max_retries = c.at("max_retries").get<std::size_t>();
  d.config.stealth_tolerance = c.at("stealth_tolerance").get<double>();
  d.config.seed = c.at("seed").get<std::uint64_t>();
  d.config.window = c.at("window").get<std::size_t>();
  d.config.clean_history = c.at("clean_history").get<bool>();
  d.clean_flagged = j.at("clean_flagged").get<std::size_t>();
  d.skipped = j.at("skipped").get<std::vector<std::string>>();
  for (const auto& e : j.at("plan")) {
    const auto kind = grid::kind_from_string(e.at("kind").get<std::string>());
    if (!kind) throw ParseError("dataset plan has an unknown measurement kind");
    d.plan.entries.push_back({*kind, e.at("location").get<std::size_t>(), e.at("sigma").get<double>()});
  }
}

void put_frame(ByteWriter& w, const Frame& f) {
  w.put<std::uint64_t>(f.t);
  w.put<std::uint8_t>(f.label);
  w.put_bytes(f.values.data(), f.values.size() * sizeof(float));
}

Frame get_frame(ByteReader& r, std::size_t m) {
  Frame f;
  f.t = r.get<std::uint64_t>();
  f.label = r.get<std::uint8_t>();
  f.values.resize(m);
  r.get_bytes(f.values.data(), m * sizeof(float));
  return f;
}

}  // namespace

std::vector<std::uint8_t> encode_dataset(const Dataset& data) {
  const std::size_t m = data.plan.size();
  ByteWriter w;
  w.put_bytes(kDatasetMagic.data(), kDatasetMagic.size());
  w.put<std::uint32_t>(kDatasetVersion);
  const std::string meta = metadata_json(data).dump();
  w.put<std::uint64_t>(meta.size());
  w.put_bytes(meta.data(), meta.size());

  const grid::MeasurementLayout layout(data.plan);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(layout.monitored_buses()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(layout.monitored_lines()));
  put_mask(w, layout.bus_mask());
  put_mask(w, layout.line_mask());

  w.put<std::uint32_t>(static_cast<std::uint32_t>(m));
  w.put<std::uint64_t>(data.clean.size());
  w.put<std::uint64_t>(data.attacked.size());
  for (const auto& f : data.clean) {
    if (f.values.size() != m) throw ShapeError("frame length does not match the plan");
    put_frame(w, f);
  }
  for (const auto& f : data.attacked) {
    if (f.values.size() != m || !f.attack) throw ShapeError("attacked frame is malformed");
    put_frame(w, f);
    const auto& rec = *f.attack;
    w.put<double>(f.residual_gap);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(rec.spec.target_bus));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(rec.spec.variable));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(rec.spec.type));
    w.put<std::int8_t>(static_cast<std::int8_t>(rec.spec.sign));
    w.put<double>(rec.c2);
    w.put<double>(rec.achieved_rate);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(rec.affected.size()));
    for (auto i : rec.affected) w.put<std::uint32_t>(static_cast<std::uint32_t>(i));
    for (auto i : rec.affected) w.put<double>(rec.a[static_cast<Eigen::Index>(i)]);
  }
  w.put<std::uint64_t>(fnv1a64(w.bytes));
  return std::move(w.bytes);
}

Dataset decode_dataset(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kDatasetMagic.size() + sizeof(std::uint32_t) + sizeof(std::uint64_t)) {
    throw ParseError("dataset file is truncated");
  }
  if (!std::equal(kDatasetMagic.begin(), kDatasetMagic.end(), bytes.begin())) {
    throw ParseError("not a dataset file (bad magic)");
  }
  ByteReader r(bytes, "dataset file");
  std::array<char, 8> magic{};
  r.get_bytes(magic.data(), magic.size());
  const auto version = r.get<std::uint32_t>();
  if (version != kDatasetVersion) {
    throw VersionMismatchError("dataset format version " + std::to_string(version) + " is not supported (expected " +
                               std::to_string(kDatasetVersion) + ")");
  }
  const std::span<const std::uint8_t> body(bytes.data(), bytes.size() - sizeof(std::uint64_t));
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + body.size(), sizeof stored);
  if (fnv1a64(body) != stored) throw ParseError("dataset checksum mismatch (truncated or corrupted file)");

  Dataset d;
  const auto meta_len = r.get<std::uint64_t>();
  if (meta_len > r.remaining()) throw ParseError("dataset file is truncated");
  std::string meta(meta_len, '\0');
  r.get_bytes(meta.data(), meta.size());
  try {
    read_metadata(nlohmann::json::parse(meta), d);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("dataset metadata: ") + e.what());
  }

  const grid::MeasurementLayout layout(d.plan);
  const auto m_b = r.get<std::uint32_t>();
  const auto m_l = r.get<std::uint32_t>();
  if (m_b != layout.monitored_buses() || m_l != layout.monitored_lines()) {
    throw ParseError("dataset block shape does not match its plan");
  }
  if (get_mask(r, layout.bus_cells()) != layout.bus_mask() || get_mask(r, layout.line_cells()) != layout.line_mask()) {
    throw ParseError("dataset presence masks do not match its plan");
  }
  const auto m = r.get<std::uint32_t>();
  if (m != d.plan.size()) throw ParseError("dataset frame length does not match its plan");
  const auto n_clean = r.get<std::uint64_t>();
  const auto n_attacked = r.get<std::uint64_t>();
  const std::size_t frame_bytes = 9 + std::size_t{m} * sizeof(float);
  if (n_clean > r.remaining() / frame_bytes || n_attacked > r.remaining() / frame_bytes) {
    throw ParseError("dataset file is truncated");
  }
  d.clean.reserve(n_clean);
  for (std::uint64_t i = 0; i < n_clean; ++i) d.clean.push_back(get_frame(r, m));
  d.attacked.reserve(n_attacked);
  for (std::uint64_t i = 0; i < n_attacked; ++i) {
    Frame f = get_frame(r, m);
    f.residual_gap = r.get<double>();
    attack::AttackRecord rec;
    rec.spec.target_bus = r.get<std::uint32_t>();
    const auto var = r.get<std::uint8_t>();
    const auto type = r.get<std::uint8_t>();
    if (var > 1 || type > 2) throw ParseError("dataset attack record has an invalid enum value");
    rec.spec.variable = static_cast<attack::StateVariable>(var);
    rec.spec.type = static_cast<attack::AttackType>(type);
    rec.spec.sign = r.get<std::int8_t>();
    rec.c2 = r.get<double>();
    rec.achieved_rate = r.get<double>();
    const auto n_aff = r.get<std::uint32_t>();
    if (n_aff > m) throw ParseError("dataset attack record is malformed");
    rec.affected.resize(n_aff);
    for (auto& a : rec.affected) {
      a = r.get<std::uint32_t>();
      if (a >= m) throw ParseError("dataset attack record index out of range");
    }
    rec.a = Eigen::VectorXd::Zero(m);
    for (auto a : rec.affected) rec.a[static_cast<Eigen::Index>(a)] = r.get<double>();
    f.attack = std::move(rec);
    d.attacked.push_back(std::move(f));
  }
  if (r.remaining() != sizeof(std::uint64_t)) throw ParseError("dataset file has trailing bytes");
  return d;
}

void save_dataset(const Dataset& data, const std::filesystem::path& path) {
  write_binary_file(path, encode_dataset(data));
}

Dataset load_dataset(const std::filesystem::path& path) { return decode_dataset(read_binary_file(path)); }

}  // namespace powerfd::dataset

#include "powerfd/evalcli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "powerfd/bytes.hpp"
#include "powerfd/hash.hpp"
#include "powerfd/random.hpp"

namespace powerfd::eval {

using attack::AttackType;
using attack::StateVariable;
using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace {

// Stage streams under the master seed.
constexpr std::uint64_t kSeedStream = 0x5eed;
constexpr std::uint64_t kGenerationStage = 1;
constexpr std::uint64_t kInitStage = 2;
constexpr std::uint64_t kShuffleStage = 3;
constexpr std::uint64_t kControlLabelStage = 4;
constexpr std::uint64_t kBaselineStage = 5;
constexpr std::uint64_t kControlInitStage = 6;
constexpr std::uint64_t kControlShuffleStage = 7;

constexpr std::uint64_t kBaselineShuffleStream = 4;

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

double percent(double fraction) { return 100.0 * fraction; }

struct SliceKey {
  std::string name;
  std::optional<AttackType> type;
  std::optional<StateVariable> variable;
  bool matches(const attack::AttackSpec& s) const {
    return (!type || *type == s.type) && (!variable || *variable == s.variable);
  }
};

std::vector<SliceKey> slice_keys() {
  std::vector<SliceKey> keys{{"overall", std::nullopt, std::nullopt}};
  constexpr std::array<AttackType, 3> types{AttackType::A, AttackType::B, AttackType::C};
  constexpr std::array<StateVariable, 2> vars{StateVariable::Vm, StateVariable::Va};
  for (auto t : types) keys.push_back({std::string(attack::to_string(t)), t, std::nullopt});
  for (auto v : vars) keys.push_back({std::string(attack::to_string(v)), std::nullopt, v});
  for (auto t : types) {
    for (auto v : vars) keys.push_back({std::string(attack::to_string(t)) + "-" + std::string(attack::to_string(v)), t, v});
  }
  return keys;
}

}  // namespace

// ---------------------------------------------------------------------------
// Report

const Slice& ModelMetrics::slice(std::string_view name) const {
  for (const auto& s : slices) {
    if (s.name == name) return s;
  }
  throw std::out_of_range("no slice named " + std::string(name));
}

const ModelMetrics& MetricsReport::model(std::string_view name) const {
  for (const auto& m : models) {
    if (m.model == name) return m;
  }
  throw std::out_of_range("no model named " + std::string(name));
}

std::vector<std::optional<attack::AttackSpec>> window_attacks(const dataset::Dataset& data,
                                                              const std::vector<dataset::MeasurementWindow>& windows) {
  std::vector<std::optional<attack::AttackSpec>> out;
  out.reserve(windows.size());
  for (const auto& w : windows) {
    if (w.attacked) {
      const auto& f = data.attacked.at(*w.attacked);
      if (!f.attack) throw FormatError("attacked frame without an attack record");
      out.push_back(f.attack->spec);
    } else {
      out.push_back(std::nullopt);
    }
  }
  return out;
}

ModelMetrics slice_metrics(std::string model, std::span<const double> probabilities,
                           const std::vector<std::optional<attack::AttackSpec>>& attacks, double threshold) {
  if (probabilities.size() != attacks.size()) {
    throw ShapeError("slice_metrics: " + std::to_string(probabilities.size()) + " predictions for " +
                     std::to_string(attacks.size()) + " windows");
  }
  const auto keys = slice_keys();
  ModelMetrics out;
  out.model = std::move(model);
  for (const auto& k : keys) out.slices.push_back({k.name, {}, {}});
  for (std::size_t i = 0; i < attacks.size(); ++i) {
    const bool predicted = probabilities[i] >= threshold;
    for (std::size_t s = 0; s < keys.size(); ++s) {
      auto& c = out.slices[s].counts;
      if (!attacks[i]) {
        ++(predicted ? c.fp : c.tn);
      } else if (keys[s].matches(*attacks[i])) {
        ++(predicted ? c.tp : c.fn);
      }
    }
  }
  for (auto& s : out.slices) s.metrics = metrics(s.counts);
  return out;
}

std::string report_json(const MetricsReport& r) {
  ordered_json j;
  j["format"] = "powerfd-report";
  j["version"] = 1;
  j["case"] = r.case_name;
  j["level"] = "window";
  j["threshold"] = r.threshold;
  j["dataset"] = {{"file", r.dataset_file},         {"hash", hex64(r.dataset_hash)}, {"train_days", r.train_days},
                  {"val_days", r.val_days},         {"test_days", r.test_days},      {"train_windows", r.train_windows},
                  {"val_windows", r.val_windows},   {"test_windows", r.test_windows}};
  j["checkpoint"] = {{"file", r.checkpoint_file}, {"hash", hex64(r.checkpoint_hash)}, {"best_epoch", r.best_epoch}};
  j["positive_rate"] = r.positive_rate;
  j["chance_f1_pct"] = percent(r.chance_f1());
  j["control_margin_pct"] = percent(kControlMargin);
  ordered_json models = ordered_json::array();
  for (const auto& m : r.models) {
    ordered_json slices = ordered_json::array();
    for (const auto& s : m.slices) {
      ordered_json e;
      e["name"] = s.name;
      e["tp"] = s.counts.tp;
      e["fp"] = s.counts.fp;
      e["fn"] = s.counts.fn;
      e["tn"] = s.counts.tn;
      e["precision_pct"] = percent(s.metrics.precision);
      e["recall_pct"] = percent(s.metrics.recall);
      e["f1_pct"] = percent(s.metrics.f1);
      e["precision_defined"] = s.metrics.precision_defined;
      e["recall_defined"] = s.metrics.recall_defined;
      e["f1_defined"] = s.metrics.f1_defined;
      slices.push_back(std::move(e));
    }
    models.push_back({{"model", m.model}, {"slices", std::move(slices)}});
  }
  j["models"] = std::move(models);
  return j.dump(2) + "\n";
}

std::string report_table(const MetricsReport& r) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "Case %s detection, window level, threshold %.3f\n", r.case_name.c_str(),
                r.threshold);
  out += line;
  std::snprintf(line, sizeof line, "Test windows %zu, attacked share %.3f%%, chance F1 %.3f%%\n\n", r.test_windows,
                percent(r.positive_rate), percent(r.chance_f1()));
  out += line;
  std::snprintf(line, sizeof line, "%-36s %-8s %7s %7s %7s %7s %13s %10s %8s\n", "Method", "Slice", "TP", "FP", "FN",
                "TN", "Precision(%)", "Recall(%)", "F1(%)");
  out += line;
  auto cell = [](bool defined, double v) {
    char buf[32];
    if (defined) std::snprintf(buf, sizeof buf, "%.3f", percent(v));
    else std::snprintf(buf, sizeof buf, "-");
    return std::string(buf);
  };
  for (const auto& m : r.models) {
    for (const auto& s : m.slices) {
      if (s.name != "overall" && s.counts.positives() == 0) continue;
      std::snprintf(line, sizeof line, "%-36s %-8s %7llu %7llu %7llu %7llu %13s %10s %8s\n", m.model.c_str(),
                    s.name.c_str(), static_cast<unsigned long long>(s.counts.tp),
                    static_cast<unsigned long long>(s.counts.fp), static_cast<unsigned long long>(s.counts.fn),
                    static_cast<unsigned long long>(s.counts.tn),
                    cell(s.metrics.precision_defined, s.metrics.precision).c_str(),
                    cell(s.metrics.recall_defined, s.metrics.recall).c_str(),
                    cell(s.metrics.f1_defined, s.metrics.f1).c_str());
      out += line;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Logistic regression

Eigen::MatrixXd window_features(const detector::WindowSource& source) {
  const std::size_t frames = source.T() + 1;
  const std::size_t bus_cells = source.layout().bus_cells();
  const std::size_t line_cells = source.layout().line_cells();
  const std::size_t width = frames * (bus_cells + line_cells);
  Eigen::MatrixXd x(static_cast<Eigen::Index>(source.size()), static_cast<Eigen::Index>(width));
  constexpr std::size_t kChunk = 256;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < source.size(); start += kChunk) {
    idx.resize(std::min(kChunk, source.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto b = source.batch<double>(idx);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const auto row = static_cast<Eigen::Index>(start + k);
      Eigen::Index col = 0;
      for (std::size_t j = 0; j < frames; ++j) {
        const std::size_t f = k * frames + j;
        for (std::size_t c = 0; c < bus_cells; ++c) x(row, col++) = b.bus[f * bus_cells + c];
        for (std::size_t c = 0; c < line_cells; ++c) x(row, col++) = b.line[f * line_cells + c];
      }
    }
  }
  return x;
}

void LogisticRegression::fit(const Eigen::MatrixXd& x, std::span<const std::uint8_t> labels,
                             const LogisticOptions& o) {
  const auto n = x.rows();
  const auto d = x.cols();
  if (static_cast<std::size_t>(n) != labels.size()) throw ShapeError("logistic regression labels do not match rows");
  if (n == 0) throw DomainError("logistic regression needs at least one row");
  if (o.batch == 0) throw DomainError("batch size must be positive");
  weights = Eigen::VectorXd::Zero(d);
  bias = 0.0;
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  Eigen::VectorXd mw = Eigen::VectorXd::Zero(d), vw = Eigen::VectorXd::Zero(d);
  double mb = 0.0, vb = 0.0;
  std::uint64_t t = 0;

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 1; epoch <= o.epochs; ++epoch) {
    auto rng = make_rng(o.seed, kBaselineShuffleStream, epoch);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += o.batch) {
      const std::size_t m = std::min(o.batch, order.size() - start);
      Eigen::MatrixXd xb(static_cast<Eigen::Index>(m), d);
      Eigen::VectorXd yb(static_cast<Eigen::Index>(m));
      for (std::size_t k = 0; k < m; ++k) {
        xb.row(static_cast<Eigen::Index>(k)) = x.row(order[start + k]);
        yb[static_cast<Eigen::Index>(k)] = labels[static_cast<std::size_t>(order[start + k])];
      }
      Eigen::VectorXd z = xb * weights;
      Eigen::VectorXd g(static_cast<Eigen::Index>(m));
      for (Eigen::Index k = 0; k < g.size(); ++k) {
        const double p = 1.0 / (1.0 + std::exp(-(z[k] + bias)));
        g[k] = (p - yb[k]) / static_cast<double>(m);
      }
      const Eigen::VectorXd gw = xb.transpose() * g + o.l2 * weights;
      const double gb = g.sum();
      ++t;
      const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
      const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
      mw = beta1 * mw + (1.0 - beta1) * gw;
      vw = beta2 * vw + (1.0 - beta2) * gw.cwiseProduct(gw);
      mb = beta1 * mb + (1.0 - beta1) * gb;
      vb = beta2 * vb + (1.0 - beta2) * gb * gb;
      weights.array() -= o.lr * (mw.array() / c1) / ((vw.array() / c2).sqrt() + eps);
      bias -= o.lr * (mb / c1) / (std::sqrt(vb / c2) + eps);
    }
  }
}

std::vector<double> LogisticRegression::predict(const Eigen::MatrixXd& x) const {
  if (x.cols() != weights.size()) throw ShapeError("logistic regression feature width mismatch");
  const Eigen::VectorXd z = x * weights;
  std::vector<double> out(static_cast<std::size_t>(z.size()));
  for (Eigen::Index k = 0; k < z.size(); ++k) out[static_cast<std::size_t>(k)] = 1.0 / (1.0 + std::exp(-(z[k] + bias)));
  return out;
}

// ---------------------------------------------------------------------------
// Config

std::uint64_t ExperimentConfig::stage_seed(std::uint64_t stage) const {
  auto rng = make_rng(seed, kSeedStream, stage);
  return rng();
}

dataset::GenerationConfig ExperimentConfig::generation_config() const {
  auto g = generation;
  g.seed = stage_seed(kGenerationStage);
  g.window = window;
  return g;
}

detector::TrainOptions ExperimentConfig::train_options() const {
  detector::TrainOptions o;
  o.lr = detector.lr;
  o.batch = detector.batch;
  o.epochs = detector.epochs;
  o.seed = stage_seed(kShuffleStage);
  o.reduction = detector.reduction;
  o.threshold = threshold;
  o.patience = detector.patience;
  o.lr_factor = detector.lr_factor;
  o.min_lr = detector.min_lr;
  return o;
}

std::string ExperimentConfig::case_name() const {
  std::string s;
  for (auto t : case_types) s += attack::to_string(t);
  return s;
}

namespace {

/// Reads the keys of one JSON object and rejects any it did not consume.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ParseError(where_ + " must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ParseError(path(key) + ": " + e.what());
    }
  }
  template <class T>
  void get(const char* key, std::optional<T>& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    if (j_.at(key).is_null()) {
      out.reset();
      return;
    }
    T v{};
    get(key, v);
    out = v;
  }
  const json* sub(const char* key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }
  std::string path(const std::string& key) const { return where_ + "." + key; }
  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.contains(k)) throw ParseError("unknown config key " + path(k));
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

void positive(bool ok, const std::string& what) {
  if (!ok) throw ParseError(what + " is out of range");
}

}  // namespace

ExperimentConfig parse_experiment_config(std::string_view text, const std::filesystem::path& base_dir) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("experiment config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  ObjectReader root(j, "config");
  std::string grid;
  root.get("grid", grid);
  if (grid.empty()) throw ParseError("config.grid is required");
  c.grid = base_dir / grid;
  root.get("steps_per_day", c.steps_per_day);
  root.get("seed", c.seed);
  root.get("window", c.window);
  root.get("threshold", c.threshold);
  positive(c.steps_per_day >= 1, "config.steps_per_day");
  positive(c.window >= 1, "config.window");
  positive(c.threshold > 0.0 && c.threshold < 1.0, "config.threshold");

  if (const auto* p = root.sub("profiles")) {
    ObjectReader r(*p, "config.profiles");
    r.get("source", c.profiles.kind);
    std::string path;
    r.get("path", path);
    if (!path.empty()) c.profiles.path = base_dir / path;
    r.get("days", c.profiles.days);
    r.get("seed", c.profiles.seed);
    r.get("jitter", c.profiles.jitter);
    r.finish();
    if (c.profiles.kind != "synthetic" && c.profiles.kind != "csv") {
      throw ParseError("config.profiles.source must be \"synthetic\" or \"csv\"");
    }
    if (c.profiles.kind == "csv" && path.empty()) throw ParseError("config.profiles.path is required for csv");
    positive(c.profiles.days >= 1, "config.profiles.days");
  }
  if (const auto* g = root.sub("generation")) {
    ObjectReader r(*g, "config.generation");
    r.get("alpha", c.generation.alpha);
    r.get("attacks_per_step", c.generation.attacks_per_step);
    r.get("max_retries", c.generation.max_retries);
    r.get("stealth_tolerance", c.generation.stealth_tolerance);
    if (const auto* n = r.sub("noise")) {
      ObjectReader nr(*n, "config.generation.noise");
      nr.get("sigma_v", c.generation.noise.sigma_v);
      nr.get("sigma_p", c.generation.noise.sigma_p);
      nr.get("sigma_q", c.generation.noise.sigma_q);
      nr.get("sigma_i", c.generation.noise.sigma_i);
      nr.finish();
    }
    r.finish();
    positive(c.generation.alpha > 0.0 && c.generation.alpha < 1.0, "config.generation.alpha");
  }
  if (const auto* s = root.sub("split")) {
    ObjectReader r(*s, "config.split");
    r.get("train_days", c.train_days);
    r.get("test_days", c.test_days);
    r.get("val_days", c.val_days);
    r.finish();
    positive(c.val_days >= 1, "config.split.val_days");
  }
  if (const auto* k = root.sub("case")) {
    std::vector<std::string> names;
    if (k->is_string() && k->get<std::string>() == "all") {
      names = {"A", "B", "C"};
    } else {
      try {
        names = k->get<std::vector<std::string>>();
      } catch (const json::exception& e) {
        throw ParseError(std::string("config.case: ") + e.what());
      }
    }
    c.case_types.clear();
    for (const auto& n : names) {
      const auto t = attack::attack_type_from_string(n);
      if (!t) throw ParseError("config.case: unknown attack type " + n);
      if (std::find(c.case_types.begin(), c.case_types.end(), *t) == c.case_types.end()) c.case_types.push_back(*t);
    }
    std::sort(c.case_types.begin(), c.case_types.end());
    if (c.case_types.empty()) throw ParseError("config.case must name at least one attack type");
  }
  if (const auto* d = root.sub("detector")) {
    ObjectReader r(*d, "config.detector");
    r.get("lr", c.detector.lr);
    r.get("batch", c.detector.batch);
    r.get("epochs", c.detector.epochs);
    std::string red = "mean";
    r.get("reduction", red);
    if (red == "mean") c.detector.reduction = nn::Reduction::Mean;
    else if (red == "sum") c.detector.reduction = nn::Reduction::Sum;
    else throw ParseError("config.detector.reduction must be \"mean\" or \"sum\"");
    r.get("patience", c.detector.patience);
    r.get("lr_factor", c.detector.lr_factor);
    r.get("min_lr", c.detector.min_lr);
    r.finish();
    positive(c.detector.lr > 0.0, "config.detector.lr");
    positive(c.detector.batch >= 1, "config.detector.batch");
    positive(c.detector.epochs >= 1, "config.detector.epochs");
  }
  if (const auto* k = root.sub("control")) {
    ObjectReader r(*k, "config.control");
    r.get("enabled", c.control);
    r.get("epochs", c.control_epochs);
    r.finish();
    positive(c.control_epochs >= 1, "config.control.epochs");
  }
  if (const auto* b = root.sub("baseline")) {
    ObjectReader r(*b, "config.baseline");
    r.get("epochs", c.baseline.epochs);
    r.get("batch", c.baseline.batch);
    r.get("lr", c.baseline.lr);
    r.get("l2", c.baseline.l2);
    r.finish();
    positive(c.baseline.batch >= 1, "config.baseline.batch");
  }
  root.finish();
  c.baseline.seed = c.stage_seed(kBaselineStage);
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_experiment_config(ss.str(), path.parent_path());
}

std::string experiment_config_json(const ExperimentConfig& c) {
  ordered_json j;
  j["grid"] = c.grid.generic_string();
  ordered_json p;
  p["source"] = c.profiles.kind;
  if (c.profiles.kind == "csv") {
    p["path"] = c.profiles.path.generic_string();
  } else {
    p["days"] = c.profiles.days;
    p["seed"] = c.profiles.seed;
    p["jitter"] = c.profiles.jitter;
  }
  j["profiles"] = p;
  j["steps_per_day"] = c.steps_per_day;
  j["seed"] = c.seed;
  j["window"] = c.window;
  j["threshold"] = c.threshold;
  const auto& g = c.generation;
  j["generation"] = {{"alpha", g.alpha},
                     {"attacks_per_step", g.attacks_per_step},
                     {"max_retries", g.max_retries},
                     {"stealth_tolerance", g.stealth_tolerance},
                     {"noise",
                      {{"sigma_v", g.noise.sigma_v},
                       {"sigma_p", g.noise.sigma_p},
                       {"sigma_q", g.noise.sigma_q},
                       {"sigma_i", g.noise.sigma_i}}}};
  j["split"] = {{"train_days", c.train_days ? ordered_json(*c.train_days) : ordered_json(nullptr)},
                {"test_days", c.test_days ? ordered_json(*c.test_days) : ordered_json(nullptr)},
                {"val_days", c.val_days}};
  ordered_json types = ordered_json::array();
  for (auto t : c.case_types) types.push_back(std::string(attack::to_string(t)));
  j["case"] = types;
  j["detector"] = {{"lr", c.detector.lr},
                   {"batch", c.detector.batch},
                   {"epochs", c.detector.epochs},
                   {"reduction", c.detector.reduction == nn::Reduction::Mean ? "mean" : "sum"},
                   {"patience", c.detector.patience},
                   {"lr_factor", c.detector.lr_factor},
                   {"min_lr", c.detector.min_lr}};
  j["control"] = {{"enabled", c.control}, {"epochs", c.control_epochs}};
  j["baseline"] = {{"epochs", c.baseline.epochs},
                   {"batch", c.baseline.batch},
                   {"lr", c.baseline.lr},
                   {"l2", c.baseline.l2}};
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Stages

dataset::ProfileSeries load_profile_source(const ExperimentConfig& c, const grid::GridModel& grid) {
  if (c.profiles.kind == "csv") return dataset::load_profiles(c.profiles.path, grid, c.steps_per_day);
  dataset::SynthOptions o;
  o.steps_per_day = c.steps_per_day;
  o.jitter = c.profiles.jitter;
  return dataset::synth_profiles(grid, c.profiles.days, c.profiles.seed, o);
}

namespace {

std::string profile_label(const ExperimentConfig& c) {
  if (c.profiles.kind == "csv") return "csv:" + c.profiles.path.filename().string();
  return "synthetic:seed=" + std::to_string(c.profiles.seed) + ",days=" + std::to_string(c.profiles.days);
}

}  // namespace

dataset::Dataset simulate_stage(const ExperimentConfig& c) {
  const auto grid = grid::load_grid(c.grid);
  auto g = c.generation_config();
  g.attacks_per_step = 0;
  return dataset::generate_dataset(grid, load_profile_source(c, grid), g, profile_label(c));
}

dataset::Dataset attack_stage(const dataset::Dataset& clean, const ExperimentConfig& c) {
  return dataset::attach_attacks(clean, grid::load_grid(c.grid), c.generation_config());
}

SplitSets split_stage(const dataset::Dataset& data, const ExperimentConfig& c) {
  const auto [auto_train, auto_test] = dataset::default_split_days(data.days);
  SplitSets out;
  const std::size_t train_total = c.train_days.value_or(auto_train);
  out.test_days = c.test_days.value_or(c.train_days ? data.days - std::min(data.days, train_total) : auto_test);
  if (c.val_days >= train_total) {
    throw InsufficientDaysError("validation takes " + std::to_string(c.val_days) + " of only " +
                                std::to_string(train_total) + " training days");
  }
  out.val_days = c.val_days;
  out.train_days = train_total - c.val_days;

  const auto split = dataset::split_train_test(dataset::window(data, c.window), data.steps_per_day, data.days,
                                               train_total, out.test_days);
  auto keep = [&](const dataset::MeasurementWindow& w) {
    if (!w.attacked) return true;
    const auto t = data.attacked.at(*w.attacked).attack->spec.type;
    return std::find(c.case_types.begin(), c.case_types.end(), t) != c.case_types.end();
  };
  const std::size_t val_start = out.train_days * data.steps_per_day;
  for (const auto& w : split.train) {
    if (!keep(w)) continue;
    (w.end_step >= val_start ? out.val : out.train).push_back(w);
  }
  for (const auto& w : split.test) {
    if (keep(w)) out.test.push_back(w);
  }
  if (out.train.empty() || out.val.empty() || out.test.empty()) throw DomainError("a split is empty");
  return out;
}

detector::Standardizer fit_standardizer(const dataset::Dataset& data, const SplitSets& splits) {
  const std::size_t end = splits.train_days * data.steps_per_day;
  std::vector<const dataset::Frame*> frames;
  for (const auto& f : data.clean) {
    if (f.t < end) frames.push_back(&f);
  }
  return detector::Standardizer::fit(frames, data.plan.entries.size());
}

std::vector<std::uint8_t> shuffled_labels(std::vector<std::uint8_t> labels, std::uint64_t seed) {
  auto rng = make_rng(seed, 0, 0);
  std::shuffle(labels.begin(), labels.end(), rng);
  return labels;
}

namespace {

std::vector<dataset::MeasurementWindow> relabel(std::vector<dataset::MeasurementWindow> windows,
                                                const std::vector<std::uint8_t>& labels) {
  for (std::size_t i = 0; i < windows.size(); ++i) windows[i].label = labels[i];
  return windows;
}

std::vector<std::uint8_t> labels_of(const std::vector<dataset::MeasurementWindow>& windows) {
  std::vector<std::uint8_t> out;
  out.reserve(windows.size());
  for (const auto& w : windows) out.push_back(w.label);
  return out;
}

}  // namespace

TrainOutcome train_stage(const dataset::Dataset& data, const SplitSets& splits, const ExperimentConfig& c,
                         std::size_t epochs, std::optional<std::uint64_t> shuffle_seed,
                         const std::function<void(const detector::EpochRecord&)>& on_epoch) {
  const auto standardizer = fit_standardizer(data, splits);
  const detector::WindowSource train_set(data, splits.train, c.window, standardizer);
  auto options = c.train_options();
  options.epochs = epochs;
  auto val_windows = splits.val;
  std::uint64_t init_seed = c.stage_seed(kInitStage);
  if (shuffle_seed) {
    options.train_labels = shuffled_labels(train_set.labels(), *shuffle_seed);
    val_windows = relabel(std::move(val_windows), shuffled_labels(labels_of(splits.val), *shuffle_seed + 1));
    init_seed = c.stage_seed(kControlInitStage);
    options.seed = c.stage_seed(kControlShuffleStage);
  }
  const detector::WindowSource val_set(data, std::move(val_windows), c.window, standardizer);

  TrainOutcome out;
  out.checkpoint.model = detector::PowerFdModel<float>(detector::config_for(train_set.layout(), c.window));
  out.checkpoint.model.init(init_seed);
  out.checkpoint.standardizer = standardizer;
  out.checkpoint.init_seed = init_seed;
  out.checkpoint.dataset_hash = fnv1a64(dataset::encode_dataset(data));
  out.report = detector::train(out.checkpoint.model, train_set, val_set, options, [&](const detector::EpochRecord& r) {
    out.log.push_back(detector::epoch_json(r));
    if (on_epoch) on_epoch(r);
  });
  out.checkpoint.epoch = out.report.best_epoch;
  return out;
}

BaselineOutcome baseline_stage(const dataset::Dataset& data, const SplitSets& splits,
                               const detector::Standardizer& standardizer, const ExperimentConfig& c,
                               std::optional<std::uint64_t> shuffle_seed) {
  const detector::WindowSource train_set(data, splits.train, c.window, standardizer);
  const detector::WindowSource test_set(data, splits.test, c.window, standardizer);
  auto labels = train_set.labels();
  if (shuffle_seed) labels = shuffled_labels(std::move(labels), *shuffle_seed);
  BaselineOutcome out;
  out.model.fit(window_features(train_set), labels, c.baseline);
  out.test_probabilities = out.model.predict(window_features(test_set));
  return out;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_binary_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string join_lines(const std::vector<std::string>& lines) {
  std::string s;
  for (const auto& l : lines) s += l + "\n";
  return s;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& c, const std::filesystem::path& out_dir,
                                const std::function<void(const std::string&)>& progress) {
  auto say = [&](const std::string& s) {
    if (progress) progress(s);
  };
  auto stage = [&](const char* name, auto&& f) {
    const auto t0 = std::chrono::steady_clock::now();
    say(std::string("[") + name + "] start");
    try {
      auto r = f();
      const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      char buf[64];
      std::snprintf(buf, sizeof buf, "] done in %.1f s", sec);
      say(std::string("[") + name + buf);
      return r;
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(name, e.what());
    }
  };

  stage("setup", [&] {
    std::filesystem::create_directories(out_dir);
    write_text(out_dir / "config.json", experiment_config_json(c));
    return 0;
  });
  const auto clean = stage("simulate", [&] { return simulate_stage(c); });
  const auto data = stage("attack-gen", [&] {
    auto d = attack_stage(clean, c);
    dataset::save_dataset(d, out_dir / "dataset.pfd");
    return d;
  });
  const auto splits = stage("split", [&] { return split_stage(data, c); });
  const auto standardizer = fit_standardizer(data, splits);
  const auto test_attacks = window_attacks(data, splits.test);

  auto trained = stage("train", [&] {
    auto o = train_stage(data, splits, c, c.detector.epochs, std::nullopt, [&](const detector::EpochRecord& r) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "[train] epoch %zu loss %.5f val_loss %.5f val_f1 %.4f lr %.2e", r.epoch,
                    r.train_loss, r.val_loss, r.val_f1, r.lr);
      say(buf);
    });
    detector::save_checkpoint(o.checkpoint, out_dir / "checkpoint.pfdc");
    write_text(out_dir / "train_log.jsonl", join_lines(o.log));
    return o;
  });

  MetricsReport report;
  report.case_name = c.case_name();
  report.threshold = c.threshold;
  report.dataset_file = "dataset.pfd";
  report.dataset_hash = trained.checkpoint.dataset_hash;
  report.checkpoint_file = "checkpoint.pfdc";
  report.checkpoint_hash = fnv1a64(read_binary_file(out_dir / "checkpoint.pfdc"));
  report.best_epoch = trained.report.best_epoch;
  report.train_days = splits.train_days;
  report.val_days = splits.val_days;
  report.test_days = splits.test_days;
  report.train_windows = splits.train.size();
  report.val_windows = splits.val.size();
  report.test_windows = splits.test.size();
  const auto positives =
      std::count_if(test_attacks.begin(), test_attacks.end(), [](const auto& a) { return a.has_value(); });
  report.positive_rate = static_cast<double>(positives) / static_cast<double>(test_attacks.size());

  stage("evaluate", [&] {
    const detector::WindowSource test_set(data, splits.test, c.window, standardizer);
    const auto p = detector::predict_all(trained.checkpoint.model, test_set);
    report.models.push_back(slice_metrics("powerfdnet", p, test_attacks, c.threshold));
    return 0;
  });
  stage("baseline", [&] {
    const auto b = baseline_stage(data, splits, standardizer, c);
    report.models.push_back(slice_metrics("logistic_regression", b.test_probabilities, test_attacks, c.threshold));
    return 0;
  });
  if (c.control) {
    stage("control", [&] {
      const auto label_seed = c.stage_seed(kControlLabelStage);
      auto o = train_stage(data, splits, c, c.control_epochs, label_seed, [&](const detector::EpochRecord& r) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "[control] epoch %zu loss %.5f val_loss %.5f", r.epoch, r.train_loss,
                      r.val_loss);
        say(buf);
      });
      write_text(out_dir / "control_log.jsonl", join_lines(o.log));
      const detector::WindowSource test_set(data, splits.test, c.window, standardizer);
      const auto p = detector::predict_all(o.checkpoint.model, test_set);
      report.models.push_back(slice_metrics("powerfdnet_shuffled_labels", p, test_attacks, c.threshold));
      const auto b = baseline_stage(data, splits, standardizer, c, label_seed);
      report.models.push_back(
          slice_metrics("logistic_regression_shuffled_labels", b.test_probabilities, test_attacks, c.threshold));
      return 0;
    });
  }

  ExperimentResult result;
  result.report = std::move(report);
  result.json = report_json(result.report);
  result.table = report_table(result.report);
  stage("report", [&] {
    write_text(out_dir / "report.json", result.json);
    write_text(out_dir / "report.txt", result.table);
    return 0;
  });
  return result;
}

}  // namespace powerfd::eval

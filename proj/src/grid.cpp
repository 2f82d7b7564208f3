#include "powerfd/grid.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "powerfd/error.hpp"
#include "powerfd/hash.hpp"

namespace powerfd::grid {

namespace {

using json = nlohmann::ordered_json;

constexpr std::array<std::string_view, 9> kKindNames = {
    "BusP", "BusQ", "BusV", "LinePIn", "LinePOut", "LineQIn", "LineQOut", "LineIIn", "LineIOut"};

double number_field(const json& obj, const char* key, double fallback) {
  auto it = obj.find(key);
  if (it == obj.end()) return fallback;
  if (!it->is_number()) throw ParseError(std::string("field '") + key + "' must be numeric");
  return it->get<double>();
}

double required_number(const json& obj, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end()) throw ParseError(std::string("missing field '") + key + "'");
  if (!it->is_number()) throw ParseError(std::string("field '") + key + "' must be numeric");
  return it->get<double>();
}

std::int64_t required_integer(const json& obj, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end()) throw ParseError(std::string("missing field '") + key + "'");
  if (!it->is_number_integer()) throw ParseError(std::string("field '") + key + "' must be an integer");
  return it->get<std::int64_t>();
}

// Union-find over bus indices.
std::size_t find_root(std::vector<std::size_t>& parent, std::size_t i) {
  while (parent[i] != i) {
    parent[i] = parent[parent[i]];
    i = parent[i];
  }
  return i;
}

std::size_t line_column(MeasurementKind kind) {
  switch (kind) {
    case MeasurementKind::LinePIn: return 0;
    case MeasurementKind::LinePOut: return 1;
    case MeasurementKind::LineQIn: return 2;
    case MeasurementKind::LineQOut: return 3;
    case MeasurementKind::LineIIn: return 4;
    case MeasurementKind::LineIOut: return 5;
    default: return 0;
  }
}

std::size_t bus_column(MeasurementKind kind) {
  switch (kind) {
    case MeasurementKind::BusP: return 0;
    case MeasurementKind::BusQ: return 1;
    default: return 2;
  }
}

}  // namespace

std::string_view to_string(MeasurementKind kind) { return kKindNames[static_cast<std::size_t>(kind)]; }

std::optional<MeasurementKind> kind_from_string(std::string_view name) {
  for (std::size_t i = 0; i < kKindNames.size(); ++i) {
    if (kKindNames[i] == name) return static_cast<MeasurementKind>(i);
  }
  return std::nullopt;
}

bool is_bus_kind(MeasurementKind kind) {
  return kind == MeasurementKind::BusP || kind == MeasurementKind::BusQ || kind == MeasurementKind::BusV;
}

std::size_t GridModel::slack_bus() const {
  std::optional<std::size_t> slack;
  for (std::size_t i = 0; i < buses.size(); ++i) {
    if (!buses[i].is_slack) continue;
    if (slack) throw ValidationError("more than one slack bus");
    slack = i;
  }
  if (!slack) throw ValidationError("no slack bus");
  return *slack;
}

std::vector<std::size_t> GridModel::neighbours(std::size_t bus) const {
  std::set<std::size_t> out;
  for (const auto& br : branches) {
    if (!br.in_service) continue;
    if (br.from_bus == bus) out.insert(br.to_bus);
    if (br.to_bus == bus) out.insert(br.from_bus);
  }
  return {out.begin(), out.end()};
}

std::vector<std::size_t> GridModel::incident_branches(std::size_t bus) const {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < branches.size(); ++k) {
    const auto& br = branches[k];
    if (br.in_service && (br.from_bus == bus || br.to_bus == bus)) out.push_back(k);
  }
  return out;
}

std::string ValidationReport::to_string() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < violations.size(); ++i) {
    if (i) os << "; ";
    os << violations[i];
  }
  return os.str();
}

ValidationReport validate_grid(const GridModel& grid) {
  ValidationReport report;
  auto& v = report.violations;
  const std::size_t n = grid.buses.size();

  if (!(grid.base_mva > 0.0)) v.push_back("base_mva must be positive");
  if (n == 0) {
    v.push_back("grid has no buses");
    return report;
  }

  std::set<std::int64_t> ids;
  for (const auto& bus : grid.buses) {
    if (!ids.insert(bus.id).second) v.push_back("duplicate bus id " + std::to_string(bus.id));
  }

  const auto slack_count = std::count_if(grid.buses.begin(), grid.buses.end(),
                                         [](const Bus& b) { return b.is_slack; });
  if (slack_count != 1) {
    v.push_back("exactly one slack bus required, found " + std::to_string(slack_count));
  }
  for (const auto& bus : grid.buses) {
    if (bus.is_slack && !(bus.v_set > 0.0)) v.push_back("slack voltage setpoint must be positive");
  }

  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  std::size_t in_service = 0;
  for (std::size_t k = 0; k < grid.branches.size(); ++k) {
    const auto& br = grid.branches[k];
    const std::string tag = "branch " + std::to_string(k);
    if (br.from_bus >= n || br.to_bus >= n) {
      v.push_back(tag + " references a nonexistent bus");
      continue;
    }
    if (br.from_bus == br.to_bus) v.push_back(tag + " connects a bus to itself");
    if (br.g_series == 0.0 && br.b_series == 0.0) v.push_back(tag + " has zero series admittance");
    if (!br.in_service) continue;
    ++in_service;
    parent[find_root(parent, br.from_bus)] = find_root(parent, br.to_bus);
  }
  if (n > 1 && in_service == 0) v.push_back("no branch in service");
  std::set<std::size_t> roots;
  for (std::size_t i = 0; i < n; ++i) roots.insert(find_root(parent, i));
  if (roots.size() > 1) v.push_back("in-service network is not connected (" + std::to_string(roots.size()) + " islands)");

  const std::size_t m = grid.plan.size();
  if (m < 2 * n - 1) {
    v.push_back("measurement plan has " + std::to_string(m) + " entries, fewer than 2n-1 = " +
                std::to_string(2 * n - 1) + " (unobservable)");
  }
  std::set<std::pair<int, std::size_t>> seen;
  for (std::size_t i = 0; i < m; ++i) {
    const auto& d = grid.plan.entries[i];
    const std::string tag = "measurement " + std::to_string(i);
    if (!(d.sigma >= kMinSigma)) v.push_back(tag + " has non-positive or degenerate sigma");
    const std::size_t limit = is_bus_kind(d.kind) ? n : grid.branches.size();
    if (d.location >= limit) v.push_back(tag + " location out of range");
    if (!seen.insert({static_cast<int>(d.kind), d.location}).second) v.push_back(tag + " duplicates an earlier entry");
  }
  return report;
}

GridModel parse_grid(std::string_view json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("grid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ParseError("grid JSON: top level must be an object");

  GridModel grid;
  try {
    grid.base_mva = required_number(doc, "base_mva");

    const auto& buses = doc.at("buses");
    if (!buses.is_array()) throw ParseError("'buses' must be an array");
    std::map<std::int64_t, std::size_t> index_of;
    for (const auto& jb : buses) {
      Bus bus;
      bus.id = required_integer(jb, "id");
      bus.p_load = number_field(jb, "p_load", 0.0);
      bus.q_load = number_field(jb, "q_load", 0.0);
      bus.p_gen = number_field(jb, "p_gen", 0.0);
      bus.q_gen = number_field(jb, "q_gen", 0.0);
      bus.v_set = number_field(jb, "v_set", 1.0);
      if (auto it = jb.find("has_injection"); it != jb.end()) {
        bus.has_injection = it->get<bool>();
      } else {
        bus.has_injection = bus.p_load != 0.0 || bus.q_load != 0.0 || bus.p_gen != 0.0 || bus.q_gen != 0.0;
      }
      if (index_of.count(bus.id)) throw ValidationError("duplicate bus id " + std::to_string(bus.id));
      index_of[bus.id] = grid.buses.size();
      grid.buses.push_back(bus);
    }

    auto bus_index = [&](std::int64_t id) -> std::size_t {
      auto it = index_of.find(id);
      if (it == index_of.end()) throw ValidationError("reference to nonexistent bus id " + std::to_string(id));
      return it->second;
    };

    const auto& slack = doc.at("slack_bus");
    std::vector<std::int64_t> slack_ids;
    if (slack.is_array()) {
      for (const auto& s : slack) slack_ids.push_back(s.get<std::int64_t>());
    } else {
      slack_ids.push_back(slack.get<std::int64_t>());
    }
    for (auto id : slack_ids) grid.buses[bus_index(id)].is_slack = true;

    for (const auto& jl : doc.at("branches")) {
      Branch br;
      br.from_bus = bus_index(required_integer(jl, "from"));
      br.to_bus = bus_index(required_integer(jl, "to"));
      br.g_series = required_number(jl, "g");
      br.b_series = required_number(jl, "b");
      br.g_shunt_from = number_field(jl, "g_sf", 0.0);
      br.b_shunt_from = number_field(jl, "b_sf", 0.0);
      br.g_shunt_to = number_field(jl, "g_st", 0.0);
      br.b_shunt_to = number_field(jl, "b_st", 0.0);
      if (auto it = jl.find("in_service"); it != jl.end()) br.in_service = it->get<bool>();
      grid.branches.push_back(br);
    }

    for (const auto& jm : doc.at("measurements")) {
      MeasurementDescriptor d;
      const auto name = jm.at("kind").get<std::string>();
      auto kind = kind_from_string(name);
      if (!kind) throw ParseError("unknown measurement kind '" + name + "'");
      d.kind = *kind;
      const auto loc = required_integer(jm, "location");
      if (is_bus_kind(d.kind)) {
        d.location = bus_index(loc);
      } else {
        if (loc < 0) throw ValidationError("negative branch index in measurement");
        d.location = static_cast<std::size_t>(loc);
      }
      d.sigma = required_number(jm, "sigma");
      grid.plan.entries.push_back(d);
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("grid JSON: ") + e.what());
  }

  auto report = validate_grid(grid);
  if (!report.ok()) throw ValidationError("invalid grid: " + report.to_string());
  return grid;
}

GridModel load_grid(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open grid file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_grid(buf.str());
}

std::string serialize_grid(const GridModel& grid) {
  json doc;
  doc["base_mva"] = grid.base_mva;
  std::vector<std::int64_t> slack;
  for (const auto& b : grid.buses) {
    if (b.is_slack) slack.push_back(b.id);
  }
  if (slack.size() == 1) {
    doc["slack_bus"] = slack.front();
  } else {
    doc["slack_bus"] = slack;
  }
  json buses = json::array();
  for (const auto& b : grid.buses) {
    json jb;
    jb["id"] = b.id;
    jb["p_load"] = b.p_load;
    jb["q_load"] = b.q_load;
    jb["p_gen"] = b.p_gen;
    jb["q_gen"] = b.q_gen;
    jb["v_set"] = b.v_set;
    jb["has_injection"] = b.has_injection;
    buses.push_back(jb);
  }
  doc["buses"] = buses;
  json branches = json::array();
  for (const auto& br : grid.branches) {
    json jl;
    jl["from"] = grid.buses[br.from_bus].id;
    jl["to"] = grid.buses[br.to_bus].id;
    jl["g"] = br.g_series;
    jl["b"] = br.b_series;
    jl["g_sf"] = br.g_shunt_from;
    jl["b_sf"] = br.b_shunt_from;
    jl["g_st"] = br.g_shunt_to;
    jl["b_st"] = br.b_shunt_to;
    jl["in_service"] = br.in_service;
    branches.push_back(jl);
  }
  doc["branches"] = branches;
  json meas = json::array();
  for (const auto& d : grid.plan.entries) {
    json jm;
    jm["kind"] = std::string(to_string(d.kind));
    jm["location"] = is_bus_kind(d.kind) ? grid.buses[d.location].id : static_cast<std::int64_t>(d.location);
    jm["sigma"] = d.sigma;
    meas.push_back(jm);
  }
  doc["measurements"] = meas;
  return doc.dump(2);
}

void save_grid(const GridModel& grid, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write grid file " + path.string());
  out << serialize_grid(grid) << '\n';
}

std::uint64_t grid_hash(const GridModel& grid) { return fnv1a64(serialize_grid(grid)); }

AdmittanceMatrix build_admittance(const GridModel& grid) {
  const auto n = static_cast<Eigen::Index>(grid.buses.size());
  AdmittanceMatrix y{Eigen::MatrixXd::Zero(n, n), Eigen::MatrixXd::Zero(n, n)};
  for (const auto& br : grid.branches) {
    if (!br.in_service) continue;
    const auto i = static_cast<Eigen::Index>(br.from_bus);
    const auto k = static_cast<Eigen::Index>(br.to_bus);
    y.G(i, k) -= br.g_series;
    y.G(k, i) -= br.g_series;
    y.B(i, k) -= br.b_series;
    y.B(k, i) -= br.b_series;
    y.G(i, i) += br.g_series + br.g_shunt_from;
    y.B(i, i) += br.b_series + br.b_shunt_from;
    y.G(k, k) += br.g_series + br.g_shunt_to;
    y.B(k, k) += br.b_series + br.b_shunt_to;
  }
  return y;
}

MeasurementLayout::MeasurementLayout(const GridModel& grid) : MeasurementLayout(grid.plan) {}

MeasurementLayout::MeasurementLayout(const MeasurementPlan& plan) {
  std::set<std::size_t> buses;
  std::set<std::size_t> lines;
  for (const auto& d : plan.entries) {
    (is_bus_kind(d.kind) ? buses : lines).insert(d.location);
  }
  bus_rows_.assign(buses.begin(), buses.end());
  line_rows_.assign(lines.begin(), lines.end());
  std::map<std::size_t, std::size_t> bus_row_of;
  std::map<std::size_t, std::size_t> line_row_of;
  for (std::size_t r = 0; r < bus_rows_.size(); ++r) bus_row_of[bus_rows_[r]] = r;
  for (std::size_t r = 0; r < line_rows_.size(); ++r) line_row_of[line_rows_[r]] = r;

  bus_mask_.assign(bus_cells(), 0);
  line_mask_.assign(line_cells(), 0);
  slots_.reserve(plan.size());
  for (const auto& d : plan.entries) {
    BlockSlot s;
    s.bus_block = is_bus_kind(d.kind);
    if (s.bus_block) {
      s.row = bus_row_of.at(d.location);
      s.col = bus_column(d.kind);
      bus_mask_[s.row * kBusColumns + s.col] = 1;
    } else {
      s.row = line_row_of.at(d.location);
      s.col = line_column(d.kind);
      line_mask_[s.row * kLineColumns + s.col] = 1;
    }
    slots_.push_back(s);
  }
}

std::size_t MeasurementLayout::cell(std::size_t entry) const {
  const auto& s = slots_.at(entry);
  return s.row * (s.bus_block ? kBusColumns : kLineColumns) + s.col;
}

}  // namespace powerfd::grid

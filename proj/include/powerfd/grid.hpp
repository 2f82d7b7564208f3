#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace powerfd::grid {

enum class MeasurementKind : std::uint8_t {
  BusP,
  BusQ,
  BusV,
  LinePIn,
  LinePOut,
  LineQIn,
  LineQOut,
  LineIIn,
  LineIOut,
};

std::string_view to_string(MeasurementKind kind);
std::optional<MeasurementKind> kind_from_string(std::string_view name);
bool is_bus_kind(MeasurementKind kind);

struct MeasurementDescriptor {
  MeasurementKind kind = MeasurementKind::BusV;
  std::size_t location = 0;  // bus index for bus kinds, branch index for line kinds
  double sigma = 0.0;        // p.u.
};

/// Ordered list of metered quantities; the order is the canonical order of z.
struct MeasurementPlan {
  std::vector<MeasurementDescriptor> entries;

  std::size_t size() const { return entries.size(); }
};

struct Bus {
  std::int64_t id = 0;
  bool has_injection = false;
  bool is_slack = false;
  double p_load = 0.0;
  double q_load = 0.0;
  double p_gen = 0.0;
  double q_gen = 0.0;
  double v_set = 1.0;  // voltage setpoint, used for the slack bus

  double p_net() const { return p_gen - p_load; }
  double q_net() const { return q_gen - q_load; }
};

/// Pi-equivalent branch. Transformers are stored the same way, with
/// pre-computed per-unit admittances and no tap model.
struct Branch {
  std::size_t from_bus = 0;
  std::size_t to_bus = 0;
  double g_series = 0.0;
  double b_series = 0.0;
  double g_shunt_from = 0.0;
  double b_shunt_from = 0.0;
  double g_shunt_to = 0.0;
  double b_shunt_to = 0.0;
  bool in_service = true;
};

struct GridModel {
  std::vector<Bus> buses;
  std::vector<Branch> branches;
  double base_mva = 100.0;
  MeasurementPlan plan;

  std::size_t bus_count() const { return buses.size(); }
  std::size_t state_dim() const { return 2 * buses.size() - 1; }

  /// Index of the unique slack bus. Throws ValidationError if there is not exactly one.
  std::size_t slack_bus() const;

  /// Neighbours of `bus` over in-service branches, ascending, without duplicates.
  std::vector<std::size_t> neighbours(std::size_t bus) const;

  /// In-service branches touching `bus`, ascending.
  std::vector<std::size_t> incident_branches(std::size_t bus) const;
};

struct AdmittanceMatrix {
  Eigen::MatrixXd G;
  Eigen::MatrixXd B;
};

struct ValidationReport {
  std::vector<std::string> violations;

  bool ok() const { return violations.empty(); }
  std::string to_string() const;
};

/// Smallest accepted measurement sigma; below this the weights blow up.
inline constexpr double kMinSigma = 1e-9;

ValidationReport validate_grid(const GridModel& grid);

/// Parses a grid JSON document. Throws ParseError or ValidationError.
GridModel parse_grid(std::string_view json_text);
GridModel load_grid(const std::filesystem::path& path);

std::string serialize_grid(const GridModel& grid);
void save_grid(const GridModel& grid, const std::filesystem::path& path);

/// FNV-1a 64 of the canonical serialization.
std::uint64_t grid_hash(const GridModel& grid);

AdmittanceMatrix build_admittance(const GridModel& grid);

// ---------------------------------------------------------------------------
// Bus/line block layout of the measurement vector.

/// Columns of a bus row: P, Q, V.
inline constexpr std::size_t kBusColumns = 3;
/// Columns of a line row: P_I, P_O, Q_I, Q_O, I_I, I_O.
inline constexpr std::size_t kLineColumns = 6;

/// Position of one plan entry inside the bus or line block.
struct BlockSlot {
  bool bus_block = true;
  std::size_t row = 0;
  std::size_t col = 0;
};

/// Maps the measurement vector onto an (m_b x c_b) bus block and an
/// (m_l x c_l) line block. Monitored buses/lines are those with at least one
/// descriptor, ordered by index. Cells without a descriptor are padding.
class MeasurementLayout {
 public:
  MeasurementLayout() = default;
  explicit MeasurementLayout(const GridModel& grid);
  explicit MeasurementLayout(const MeasurementPlan& plan);

  std::size_t monitored_buses() const { return bus_rows_.size(); }
  std::size_t monitored_lines() const { return line_rows_.size(); }
  std::size_t bus_cells() const { return bus_rows_.size() * kBusColumns; }
  std::size_t line_cells() const { return line_rows_.size() * kLineColumns; }
  std::size_t plan_size() const { return slots_.size(); }

  const std::vector<std::size_t>& bus_rows() const { return bus_rows_; }
  const std::vector<std::size_t>& line_rows() const { return line_rows_; }
  const std::vector<BlockSlot>& slots() const { return slots_; }

  /// Presence masks, row-major.
  const std::vector<std::uint8_t>& bus_mask() const { return bus_mask_; }
  const std::vector<std::uint8_t>& line_mask() const { return line_mask_; }

  /// Flat offset of slot i inside its block.
  std::size_t cell(std::size_t entry) const;

 private:
  std::vector<std::size_t> bus_rows_;
  std::vector<std::size_t> line_rows_;
  std::vector<BlockSlot> slots_;
  std::vector<std::uint8_t> bus_mask_;
  std::vector<std::uint8_t> line_mask_;
};

}  // namespace powerfd::grid

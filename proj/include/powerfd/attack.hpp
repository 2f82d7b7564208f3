#pragma once

#include <cstddef>
#include <optional>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "powerfd/estimation.hpp"
#include "powerfd/grid.hpp"
#include "powerfd/powerflow.hpp"

namespace powerfd::attack {

using powerflow::MeasurementModel;
using powerflow::StateVector;

enum class StateVariable : std::uint8_t { Vm, Va };
enum class AttackType : std::uint8_t { A, B, C };

std::string_view to_string(StateVariable v);
std::string_view to_string(AttackType t);
std::optional<AttackType> attack_type_from_string(std::string_view s);
std::optional<StateVariable> variable_from_string(std::string_view s);

/// Half-open injection-change range (lo, hi] of an attack type.
struct RateRange {
  double lo;
  double hi;
  bool contains(double rate) const { return rate > lo && rate <= hi; }
};

RateRange rate_range(AttackType type);

struct AttackSpec {
  std::size_t target_bus = 0;
  StateVariable variable = StateVariable::Vm;
  AttackType type = AttackType::A;
  int sign = +1;
};

struct AttackRecord {
  AttackSpec spec;
  double c2 = 0.0;             // signed shift of the attacked state variable
  Eigen::VectorXd a;           // injected vector, zero outside `affected`
  std::vector<std::size_t> affected;
  double achieved_rate = 0.0;  // |dP_i| / |P_i(x_hat)| at the target bus
};

/// Plan entries whose measurement function depends on the angle or magnitude
/// at `target_bus`: its own P/Q/V, P/Q of every neighbour, and all line
/// quantities on incident in-service branches. Ascending.
std::vector<std::size_t> affected_measurements(const grid::GridModel& grid, std::size_t target_bus);

/// x_hat with the attacked variable of the target shifted by c2.
StateVector shifted_state(const StateVector& x_hat, const AttackSpec& spec, double c2);

/// a_i = h_i(x_hat shifted by c2) - h_i(x_hat) on the affected set, 0 elsewhere.
AttackRecord craft_attack(const MeasurementModel& model, const StateVector& x_hat, const AttackSpec& spec,
                          double c2);

struct CalibrationOptions {
  double c_max_vm = 0.2;  // p.u.
  double c_max_va = 0.5;  // rad
  int max_iterations = 60;
  double min_injection = 1e-6;
};

/// (|c2|, rate) pairs visited by the bisection, in order.
using CalibrationTrace = std::vector<std::pair<double, double>>;

/// Injection-change rate at the target for a shift of magnitude `magnitude`
/// in the spec's direction.
double injection_change_rate(const MeasurementModel& model, const StateVector& x_hat, const AttackSpec& spec,
                             double magnitude);

/// Bisects |c2| in (0, c_max] until the injection-change rate at the target
/// lands inside the spec's type range. Throws NearZeroInjectionError or
/// CalibrationError (range unreachable, or the rate is not monotone along
/// the bracket).
AttackRecord calibrate_attack(const MeasurementModel& model, const StateVector& x_hat, const AttackSpec& spec,
                              const CalibrationOptions& options = {}, CalibrationTrace* trace = nullptr);

struct StealthCheck {
  estimation::BddVerdict clean;
  estimation::BddVerdict attacked;
  /// | ||z + a - h(x_hat + c)|| - ||z - h(x_hat)|| | / max(||r||, 1e-12), with
  /// x_hat the estimate from z. Zero up to rounding for a crafted attack.
  double residual_gap = 0.0;
  /// Same quantity with the attacked residual taken from a fresh estimate of z + a.
  double reestimated_gap = 0.0;
  double clean_norm = 0.0;
  double attacked_norm = 0.0;
};

/// Runs the detector on z and on z + a and compares residual norms.
StealthCheck verify_stealth(const Eigen::VectorXd& z, const AttackRecord& record, const MeasurementModel& model,
                            double alpha);

/// Same, reusing a detection pass already run on z at the same alpha.
StealthCheck verify_stealth(const estimation::BddOutcome& clean, const Eigen::VectorXd& z, const AttackRecord& record,
                            const MeasurementModel& model);

}  // namespace powerfd::attack

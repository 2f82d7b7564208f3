#pragma once

#include <cstddef>
#include <vector>

#include <Eigen/Dense>

#include "powerfd/grid.hpp"

namespace powerfd::powerflow {

/// Bus voltage angles (rad) and magnitudes (p.u.). The slack angle is 0.
struct StateVector {
  Eigen::VectorXd theta;
  Eigen::VectorXd v;

  static StateVector flat(std::size_t bus_count);

  std::size_t bus_count() const { return static_cast<std::size_t>(v.size()); }

  /// Free coordinates [theta without slack..., v...] of length 2n-1.
  Eigen::VectorXd pack(std::size_t slack) const;
  static StateVector unpack(const Eigen::VectorXd& x, std::size_t slack);
};

enum class FlowDirection { In, Out };

struct PowerPair {
  double p = 0.0;
  double q = 0.0;
};

/// Active/reactive flow leaving the measuring end of a branch. `In` measures
/// at the from-end, `Out` at the to-end with that end's shunt.
PowerPair line_flow(const StateVector& state, const grid::Branch& branch, FlowDirection direction);

/// |S|/V at the measuring end. Throws DomainError when that end's voltage is not positive.
double line_current_magnitude(const StateVector& state, const grid::Branch& branch, FlowDirection direction);

PowerPair bus_injection(const StateVector& state, const grid::AdmittanceMatrix& y, std::size_t bus);

/// Precomputed pieces shared by the measurement model. Immutable once built.
class MeasurementModel {
 public:
  explicit MeasurementModel(const grid::GridModel& grid);

  const grid::GridModel& grid() const { return grid_; }
  const grid::AdmittanceMatrix& admittance() const { return y_; }
  std::size_t slack() const { return slack_; }
  std::size_t size() const { return grid_.plan.size(); }
  std::size_t state_dim() const { return grid_.state_dim(); }

  double evaluate_entry(const StateVector& state, std::size_t entry) const;
  Eigen::VectorXd evaluate(const StateVector& state) const;
  Eigen::MatrixXd jacobian(const StateVector& state) const;

 private:
  grid::GridModel grid_;
  grid::AdmittanceMatrix y_;
  std::size_t slack_;
};

Eigen::VectorXd measurement_function(const StateVector& state, const grid::GridModel& grid);

/// Rows follow the plan; columns are theta_k (k != slack, ascending) then v_k.
Eigen::MatrixXd measurement_jacobian(const StateVector& state, const grid::GridModel& grid);

struct PowerFlowOptions {
  int max_iterations = 30;
  double tolerance = 1e-8;
  int divergence_window = 3;
};

struct PowerFlowSolution {
  StateVector state;
  int iterations = 0;
  double mismatch = 0.0;
};

/// Newton-Raphson with all non-slack buses treated as PQ. `injections` holds
/// net (generation - load) setpoints per bus; the slack entry is ignored.
/// Throws ConvergenceError / DivergenceError.
PowerFlowSolution solve_power_flow(const grid::GridModel& grid, const std::vector<PowerPair>& injections,
                                   const PowerFlowOptions& options = {});

/// Net injections taken straight from the bus data.
std::vector<PowerPair> scheduled_injections(const grid::GridModel& grid);

}  // namespace powerfd::powerflow

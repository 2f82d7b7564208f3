#pragma once

#include <Eigen/Dense>

#include "powerfd/grid.hpp"
#include "powerfd/powerflow.hpp"

namespace powerfd::estimation {

using powerflow::MeasurementModel;
using powerflow::StateVector;

struct EstimationOptions {
  int max_iterations = 50;
  double tolerance = 1e-8;  // infinity-norm of the state update
};

struct EstimationResult {
  StateVector x_hat;
  double objective = 0.0;  // weighted residual sum of squares at x_hat
  int iterations = 0;
  bool converged = false;
};

/// Gauss-Newton minimisation of the weighted residual sum of squares with
/// weights 1/sigma^2. Throws RankDeficiencyError when the plan does not
/// determine the state, ConvergenceError after max_iterations.
EstimationResult wls_estimate(const Eigen::VectorXd& z, const MeasurementModel& model, const StateVector& init,
                              const EstimationOptions& options = {});
EstimationResult wls_estimate(const Eigen::VectorXd& z, const grid::GridModel& grid, const StateVector& init,
                              const EstimationOptions& options = {});

Eigen::VectorXd residual(const Eigen::VectorXd& z, const StateVector& x_hat, const MeasurementModel& model);
Eigen::VectorXd residual(const Eigen::VectorXd& z, const StateVector& x_hat, const grid::GridModel& grid);

double chi_square_statistic(const Eigen::VectorXd& r, const grid::MeasurementPlan& plan);

/// Regularized upper incomplete gamma Q(a, x).
double regularized_gamma_q(double a, double x);

/// Upper-tail chi-square quantile: P(chi2_dof >= t) = alpha, found by bisection.
/// Throws DomainError for dof < 1 or alpha outside (0, 1).
double chi_square_threshold(int dof, double alpha);

struct BddVerdict {
  double statistic = 0.0;
  int dof = 0;
  double alpha = 0.0;
  double threshold = 0.0;
  bool flagged = false;
};

/// Everything produced by one detection pass.
struct BddOutcome {
  BddVerdict verdict;
  EstimationResult estimate;
  Eigen::VectorXd residual;
};

BddOutcome run_bdd(const Eigen::VectorXd& z, const MeasurementModel& model, double alpha,
                   const EstimationOptions& options = {});

/// Estimation from flat start, residual, chi-square statistic and threshold test.
BddVerdict bdd_test(const Eigen::VectorXd& z, const grid::GridModel& grid, double alpha);

}  // namespace powerfd::estimation

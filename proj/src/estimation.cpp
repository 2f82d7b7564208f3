#include "powerfd/estimation.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "powerfd/error.hpp"

namespace powerfd::estimation {

namespace {

Eigen::VectorXd inverse_variances(const grid::MeasurementPlan& plan) {
  Eigen::VectorXd w(static_cast<Eigen::Index>(plan.size()));
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const double s = plan.entries[i].sigma;
    w[static_cast<Eigen::Index>(i)] = 1.0 / (s * s);
  }
  return w;
}

// Series expansion of P(a, x), valid for x < a + 1.
double gamma_p_series(double a, double x) {
  double ap = a;
  double sum = 1.0 / a;
  double del = sum;
  for (int n = 0; n < 1000; ++n) {
    ap += 1.0;
    del *= x / ap;
    sum += del;
    if (std::abs(del) < std::abs(sum) * 1e-16) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

// Lentz continued fraction for Q(a, x), valid for x >= a + 1.
double gamma_q_fraction(double a, double x) {
  constexpr double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < 1000; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < 1e-16) break;
  }
  return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

}  // namespace

double regularized_gamma_q(double a, double x) {
  if (!(a > 0.0) || x < 0.0) throw DomainError("regularized_gamma_q requires a > 0 and x >= 0");
  if (x == 0.0) return 1.0;
  if (x < a + 1.0) return 1.0 - gamma_p_series(a, x);
  return gamma_q_fraction(a, x);
}

double chi_square_threshold(int dof, double alpha) {
  if (dof < 1) throw DomainError("chi-square threshold needs dof >= 1, got " + std::to_string(dof));
  if (!(alpha > 0.0 && alpha < 1.0)) throw DomainError("chi-square significance level must lie in (0, 1)");
  const double k = 0.5 * dof;
  auto tail = [&](double t) { return regularized_gamma_q(k, 0.5 * t); };

  double lo = 0.0;
  double hi = std::max(1.0, static_cast<double>(dof));
  while (tail(hi) > alpha) hi *= 2.0;
  // tail() is decreasing in t.
  while (hi - lo > 1e-10 * std::max(1.0, hi)) {
    const double mid = 0.5 * (lo + hi);
    if (tail(mid) > alpha) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

EstimationResult wls_estimate(const Eigen::VectorXd& z, const MeasurementModel& model, const StateVector& init,
                              const EstimationOptions& options) {
  const auto& grid = model.grid();
  const std::size_t m = model.size();
  const std::size_t dim = model.state_dim();
  if (static_cast<std::size_t>(z.size()) != m) throw DomainError("measurement vector length does not match plan");
  if (m < dim) {
    throw RankDeficiencyError("plan has " + std::to_string(m) + " measurements for " + std::to_string(dim) +
                              " state variables");
  }
  const Eigen::VectorXd w = inverse_variances(grid.plan);
  const Eigen::VectorXd sqrt_w = w.cwiseSqrt();
  const std::size_t slack = model.slack();

  EstimationResult result;
  Eigen::VectorXd x = init.pack(slack);
  StateVector state = StateVector::unpack(x, slack);

  while (true) {
    if (result.iterations >= options.max_iterations) {
      throw ConvergenceError("state estimation did not converge in " + std::to_string(options.max_iterations) +
                             " iterations");
    }
    const Eigen::VectorXd r = z - model.evaluate(state);
    const Eigen::MatrixXd Jw = sqrt_w.asDiagonal() * model.jacobian(state);
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Jw);
    qr.setThreshold(1e-10);
    if (static_cast<std::size_t>(qr.rank()) < dim) {
      throw RankDeficiencyError("measurement Jacobian has rank " + std::to_string(qr.rank()) + " < " +
                                std::to_string(dim));
    }
    const Eigen::VectorXd dx = qr.solve(Eigen::VectorXd(sqrt_w.cwiseProduct(r)));
    x += dx;
    ++result.iterations;
    state = StateVector::unpack(x, slack);
    if (!x.allFinite() || (state.v.array() <= 0.0).any()) {
      throw ConvergenceError("state estimation left the feasible region");
    }
    if (dx.lpNorm<Eigen::Infinity>() <= options.tolerance) break;
  }

  const Eigen::VectorXd r = z - model.evaluate(state);
  result.objective = r.cwiseProduct(r).dot(w);
  result.x_hat = std::move(state);
  result.converged = true;
  return result;
}

EstimationResult wls_estimate(const Eigen::VectorXd& z, const grid::GridModel& grid, const StateVector& init,
                              const EstimationOptions& options) {
  return wls_estimate(z, MeasurementModel(grid), init, options);
}

Eigen::VectorXd residual(const Eigen::VectorXd& z, const StateVector& x_hat, const MeasurementModel& model) {
  return z - model.evaluate(x_hat);
}

Eigen::VectorXd residual(const Eigen::VectorXd& z, const StateVector& x_hat, const grid::GridModel& grid) {
  return residual(z, x_hat, MeasurementModel(grid));
}

double chi_square_statistic(const Eigen::VectorXd& r, const grid::MeasurementPlan& plan) {
  if (static_cast<std::size_t>(r.size()) != plan.size()) throw DomainError("residual length does not match plan");
  double sum = 0.0;
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const double q = r[static_cast<Eigen::Index>(i)] / plan.entries[i].sigma;
    sum += q * q;
  }
  return sum;
}

BddOutcome run_bdd(const Eigen::VectorXd& z, const MeasurementModel& model, double alpha,
                   const EstimationOptions& options) {
  const int dof = static_cast<int>(model.size()) - static_cast<int>(model.state_dim());
  BddOutcome out;
  out.estimate = wls_estimate(z, model, StateVector::flat(model.grid().bus_count()), options);
  out.residual = residual(z, out.estimate.x_hat, model);
  out.verdict.statistic = chi_square_statistic(out.residual, model.grid().plan);
  out.verdict.dof = dof;
  out.verdict.alpha = alpha;
  out.verdict.threshold = chi_square_threshold(dof, alpha);
  out.verdict.flagged = out.verdict.statistic >= out.verdict.threshold;
  return out;
}

BddVerdict bdd_test(const Eigen::VectorXd& z, const grid::GridModel& grid, double alpha) {
  return run_bdd(z, MeasurementModel(grid), alpha).verdict;
}

}  // namespace powerfd::estimation

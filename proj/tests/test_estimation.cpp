#include <doctest.h>

#include <random>

#include <boost/math/distributions/chi_squared.hpp>

#include "fixtures.hpp"
#include "powerfd/error.hpp"
#include "powerfd/estimation.hpp"

using namespace powerfd;
using namespace powerfd::estimation;

namespace {

Eigen::VectorXd add_noise(const Eigen::VectorXd& h, const grid::MeasurementPlan& plan, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Eigen::VectorXd z = h;
  for (std::size_t i = 0; i < plan.size(); ++i) z[static_cast<Eigen::Index>(i)] += plan.entries[i].sigma * n01(rng);
  return z;
}

StateVector operating_point(const grid::GridModel& g) {
  return powerflow::solve_power_flow(g, powerflow::scheduled_injections(g)).state;
}

double boost_threshold(int dof, double alpha) {
  return boost::math::quantile(boost::math::complement(boost::math::chi_squared(dof), alpha));
}

}  // namespace

TEST_CASE("noise-free data is a fixed point of the estimator") {
  for (const auto& g : {fixtures::four_bus(), fixtures::ieee14()}) {
    const MeasurementModel model(g);
    std::mt19937_64 rng(99);
    double worst = 0.0;
    double worst_obj = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const auto truth = fixtures::random_state(g, rng);
      const auto z = model.evaluate(truth);
      const auto est = wls_estimate(z, model, StateVector::flat(g.bus_count()));
      CHECK(est.converged);
      worst = std::max(worst, (est.x_hat.pack(model.slack()) - truth.pack(model.slack())).lpNorm<Eigen::Infinity>());
      worst_obj = std::max(worst_obj, est.objective);
    }
    CHECK(worst <= 1e-8);
    CHECK(worst_obj <= 1e-12);
  }
}

TEST_CASE("noisy objective stays below the 1% chi-square threshold") {
  const auto g = fixtures::four_bus();
  const MeasurementModel model(g);
  const auto truth = operating_point(g);
  const auto h = model.evaluate(truth);
  const int dof = static_cast<int>(g.plan.size() - g.state_dim());
  const double tau = chi_square_threshold(dof, 0.01);
  std::mt19937_64 rng(5);
  int below = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto est = wls_estimate(add_noise(h, g.plan, rng), model, StateVector::flat(g.bus_count()));
    below += est.objective < tau;
  }
  CHECK(below >= 98);
}

TEST_CASE("plans below 2n-1 entries are rank deficient") {
  auto g = fixtures::four_bus();
  g.plan.entries.resize(g.state_dim() - 1);
  const MeasurementModel model(g);
  CHECK_THROWS_AS(wls_estimate(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(g.plan.size())), model,
                               StateVector::flat(4)),
                  RankDeficiencyError);
  // Enough entries, but only voltage magnitudes: angles are unobservable.
  auto v_only = fixtures::four_bus();
  v_only.plan.entries.clear();
  for (std::size_t b = 0; b < 4; ++b) {
    for (double s : {0.01, 0.02}) {
      v_only.plan.entries.push_back({grid::MeasurementKind::BusV, b, s});
    }
  }
  const MeasurementModel vm(v_only);
  CHECK_THROWS_AS(wls_estimate(Eigen::VectorXd::Ones(8), vm, StateVector::flat(4)), RankDeficiencyError);
}

TEST_CASE("residual") {
  const auto g = fixtures::four_bus();
  const MeasurementModel model(g);
  const auto x = operating_point(g);
  const auto h = model.evaluate(x);
  CHECK(residual(h, x, model).isZero());
  Eigen::VectorXd z = h;
  z[4] += 0.125;
  Eigen::VectorXd r = residual(z, x, model);
  CHECK(r[4] == doctest::Approx(0.125));
  r[4] = 0.0;
  CHECK(r.isZero(1e-15));

  std::mt19937_64 rng(17);
  const auto noisy = add_noise(h, g.plan, rng);
  const auto est = wls_estimate(noisy, model, StateVector::flat(4));
  const Eigen::VectorXd recomputed = noisy - powerflow::measurement_function(est.x_hat, g);
  CHECK((residual(noisy, est.x_hat, g) - recomputed).cwiseAbs().maxCoeff() == 0.0);
  CHECK(chi_square_statistic(recomputed, g.plan) == doctest::Approx(est.objective).epsilon(1e-12));
}

TEST_CASE("chi-square statistic") {
  grid::MeasurementPlan plan;
  plan.entries = {{grid::MeasurementKind::BusP, 0, 0.01}, {grid::MeasurementKind::BusQ, 0, 0.01}};
  CHECK(chi_square_statistic(Eigen::Vector2d(0.0, 0.0), plan) == 0.0);
  CHECK(chi_square_statistic(Eigen::Vector2d(0.01, 0.01), plan) == doctest::Approx(2.0));
  CHECK(chi_square_statistic(Eigen::Vector2d(0.01, 0.02), plan) == doctest::Approx(5.0));
}

TEST_CASE("chi-square threshold") {
  CHECK(std::abs(chi_square_threshold(10, 0.05) - 18.307) <= 1e-3);
  CHECK(std::abs(chi_square_threshold(5, 0.05) - 11.0705) <= 1e-3);
  for (int dof : {1, 2, 3, 7, 30, 135, 400}) {
    for (double alpha : {0.001, 0.01, 0.05, 0.5, 0.9}) {
      CHECK(chi_square_threshold(dof, alpha) == doctest::Approx(boost_threshold(dof, alpha)).epsilon(1e-8));
    }
  }
  CHECK(chi_square_threshold(10, 0.999) < chi_square_threshold(10, 0.5));
  for (int dof = 1; dof < 60; ++dof) {
    CHECK(chi_square_threshold(dof, 0.05) < chi_square_threshold(dof + 1, 0.05));
    CHECK(chi_square_threshold(dof, 0.05) > chi_square_threshold(dof, 0.06));
  }
  CHECK_THROWS_AS(chi_square_threshold(0, 0.05), DomainError);
  CHECK_THROWS_AS(chi_square_threshold(5, 0.0), DomainError);
  CHECK_THROWS_AS(chi_square_threshold(5, 1.0), DomainError);
}

TEST_CASE("bad data detection") {
  const auto g = fixtures::four_bus();
  const MeasurementModel model(g);
  const auto truth = operating_point(g);
  const auto h = model.evaluate(truth);
  SUBCASE("noise-free data passes") {
    const auto v = bdd_test(h, g, 0.05);
    CHECK_FALSE(v.flagged);
    CHECK(v.dof == static_cast<int>(g.plan.size() - g.state_dim()));
    CHECK(v.threshold == doctest::Approx(chi_square_threshold(v.dof, 0.05)));
  }
  SUBCASE("20-sigma gross errors are flagged") {
    std::mt19937_64 rng(23);
    std::uniform_int_distribution<std::size_t> pick(0, g.plan.size() - 1);
    std::bernoulli_distribution sign(0.5);
    int flagged = 0;
    for (int trial = 0; trial < 100; ++trial) {
      auto z = add_noise(h, g.plan, rng);
      const auto i = pick(rng);
      z[static_cast<Eigen::Index>(i)] += (sign(rng) ? 20.0 : -20.0) * g.plan.entries[i].sigma;
      flagged += run_bdd(z, model, 0.05).verdict.flagged;
    }
    CHECK(flagged >= 99);
  }
  SUBCASE("false-alarm rate tracks alpha") {
    for (double alpha : {0.01, 0.05}) {
      std::mt19937_64 rng(alpha == 0.01 ? 101 : 202);
      const int trials = 600;
      int flagged = 0;
      for (int trial = 0; trial < trials; ++trial) {
        flagged += run_bdd(add_noise(h, g.plan, rng), model, alpha).verdict.flagged;
      }
      CHECK(std::abs(static_cast<double>(flagged) / trials - alpha) <= 0.02);
    }
  }
}

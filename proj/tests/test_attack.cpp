#include <doctest.h>

#include <random>
#include <set>

#include "fixtures.hpp"
#include "powerfd/attack.hpp"
#include "powerfd/error.hpp"

using namespace powerfd;
using namespace powerfd::attack;

namespace {

Eigen::VectorXd noisy(const MeasurementModel& model, const StateVector& truth, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Eigen::VectorXd z = model.evaluate(truth);
  for (std::size_t i = 0; i < model.size(); ++i) {
    z[static_cast<Eigen::Index>(i)] += model.grid().plan.entries[i].sigma * n01(rng);
  }
  return z;
}

StateVector operating_point(const grid::GridModel& g) {
  return powerflow::solve_power_flow(g, powerflow::scheduled_injections(g)).state;
}

// Entries of h that move when either state variable of `bus` is nudged.
std::set<std::size_t> dependency_oracle(const MeasurementModel& model, const StateVector& x, std::size_t bus) {
  std::set<std::size_t> out;
  const auto h0 = model.evaluate(x);
  for (auto var : {StateVariable::Vm, StateVariable::Va}) {
    if (var == StateVariable::Va && bus == model.slack()) continue;
    const auto h1 = model.evaluate(shifted_state(x, {bus, var, AttackType::A, 1}, 1e-4));
    for (Eigen::Index i = 0; i < h0.size(); ++i) {
      if (std::abs(h1[i] - h0[i]) > 0.0) out.insert(static_cast<std::size_t>(i));
    }
  }
  return out;
}

}  // namespace

TEST_CASE("affected set of a voltage-only plan") {
  auto g = fixtures::four_bus();
  for (auto& d : g.plan.entries) {
    if (d.kind == grid::MeasurementKind::BusV && d.location == 2) {
      const auto keep = d;
      g.plan.entries = {keep};
      break;
    }
  }
  CHECK(affected_measurements(g, 2) == std::vector<std::size_t>{0});
  CHECK(affected_measurements(g, 1).empty());
}

TEST_CASE("affected set on the 4-bus fixture matches the dependency oracle") {
  const auto g = fixtures::four_bus();
  const MeasurementModel model(g);
  // Bus index 3 (id 4) has two incident lines and two neighbours.
  REQUIRE(g.incident_branches(3).size() == 2);
  REQUIRE(g.neighbours(3).size() == 2);
  const auto aff = affected_measurements(g, 3);
  std::size_t expected = 3 + 2 * 2;  // own P,Q,V and neighbour P,Q
  for (auto k : g.incident_branches(3)) {
    for (const auto& d : g.plan.entries) expected += !grid::is_bus_kind(d.kind) && d.location == k;
  }
  CHECK(aff.size() == expected);

  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 25; ++trial) {
    const auto x = fixtures::random_state(g, rng);
    for (std::size_t bus = 0; bus < g.bus_count(); ++bus) {
      const auto a = affected_measurements(g, bus);
      CHECK(std::set<std::size_t>(a.begin(), a.end()) == dependency_oracle(model, x, bus));
    }
  }
}

TEST_CASE("zero perturbation yields a zero attack") {
  const auto g = fixtures::four_bus();
  const MeasurementModel model(g);
  const auto x = operating_point(g);
  const auto rec = craft_attack(model, x, {2, StateVariable::Vm, AttackType::A, 1}, 0.0);
  CHECK(rec.a.isZero(0.0));
}

TEST_CASE("Va attack on the 2-bus fixture matches hand-evaluated deltas") {
  const auto g = fixtures::two_bus();
  const MeasurementModel model(g);
  auto x = StateVector::flat(2);
  x.v << 1.0, 0.98;
  x.theta << 0.0, -0.04;
  const auto rec = craft_attack(model, x, {1, StateVariable::Va, AttackType::C, 1}, 0.03);
  // Branch g=1, b=-5. From-end (slack) flow: P = V0^2 g - V0 V1 (b sin t + g cos t), t = theta0 - theta1.
  auto p_in = [](double v0, double v1, double t) { return v0 * v0 - v0 * v1 * (-5.0 * std::sin(t) + std::cos(t)); };
  auto q_in = [](double v0, double v1, double t) { return 5.0 * v0 * v0 - v0 * v1 * (std::sin(t) + 5.0 * std::cos(t)); };
  const double t0 = 0.04;
  const double t1 = 0.04 - 0.03;
  for (std::size_t i = 0; i < g.plan.size(); ++i) {
    const auto& d = g.plan.entries[i];
    const double a = rec.a[static_cast<Eigen::Index>(i)];
    if (d.kind == grid::MeasurementKind::LinePIn) CHECK(std::abs(a - (p_in(1, 0.98, t1) - p_in(1, 0.98, t0))) < 1e-12);
    if (d.kind == grid::MeasurementKind::LineQIn) CHECK(std::abs(a - (q_in(1, 0.98, t1) - q_in(1, 0.98, t0))) < 1e-12);
    if (d.kind == grid::MeasurementKind::BusP && d.location == 0) {
      CHECK(std::abs(a - (p_in(1, 0.98, t1) - p_in(1, 0.98, t0))) < 1e-12);
    }
    if (d.kind == grid::MeasurementKind::BusV) CHECK(a == 0.0);
  }
}

TEST_CASE("Vm attack shifts the target voltage entry by exactly c2") {
  const auto g = fixtures::four_bus();
  const MeasurementModel model(g);
  const auto x = operating_point(g);
  const auto rec = craft_attack(model, x, {2, StateVariable::Vm, AttackType::A, 1}, 0.02);
  for (std::size_t i = 0; i < g.plan.size(); ++i) {
    const auto& d = g.plan.entries[i];
    if (d.kind == grid::MeasurementKind::BusV && d.location == 2) {
      CHECK(rec.a[static_cast<Eigen::Index>(i)] == doctest::Approx(0.02).epsilon(1e-14));
    }
  }
}

TEST_CASE("support of the attack vector") {
  const auto g = fixtures::ieee14();
  const MeasurementModel model(g);
  const auto x = operating_point(g);
  for (std::size_t bus = 1; bus < g.bus_count(); ++bus) {
    const auto rec = craft_attack(model, x, {bus, StateVariable::Va, AttackType::A, -1}, 0.05);
    const std::set<std::size_t> aff(rec.affected.begin(), rec.affected.end());
    for (std::size_t i = 0; i < g.plan.size(); ++i) {
      if (!aff.count(i)) CHECK(rec.a[static_cast<Eigen::Index>(i)] == 0.0);
    }
  }
}

TEST_CASE("calibration lands in the type range") {
  const auto g = fixtures::ieee14();
  const MeasurementModel model(g);
  std::mt19937_64 rng(31);
  const auto z = noisy(model, operating_point(g), rng);
  const auto x_hat = estimation::wls_estimate(z, model, StateVector::flat(g.bus_count())).x_hat;
  int made = 0;
  for (auto type : {AttackType::A, AttackType::B, AttackType::C}) {
    for (auto var : {StateVariable::Vm, StateVariable::Va}) {
      for (int sign : {1, -1}) {
        for (std::size_t bus : {2, 3, 4, 8, 12}) {
          CalibrationTrace trace;
          try {
            const auto rec = calibrate_attack(model, x_hat, {bus, var, type, sign}, {}, &trace);
            CHECK(rate_range(type).contains(rec.achieved_rate));
            CHECK(std::abs(rec.achieved_rate - injection_change_rate(model, x_hat, rec.spec, std::abs(rec.c2))) < 1e-12);
            CHECK(rec.c2 * sign > 0.0);
            ++made;
          } catch (const CalibrationError&) {
          }
          // Rates along the bracket are monotone in |c2|.
          std::vector<std::pair<double, double>> sorted(trace.begin(), trace.end());
          std::sort(sorted.begin(), sorted.end());
          for (std::size_t k = 1; k < sorted.size(); ++k) CHECK(sorted[k].second >= sorted[k - 1].second);
        }
      }
    }
  }
  CHECK(made >= 40);
}

TEST_CASE("near-zero injection cannot be calibrated") {
  auto g = fixtures::four_bus();
  const MeasurementModel model(g);
  // Bus index 1 has p_gen 0.2 against p_load 0.4; move it to zero net injection.
  g.buses[1].p_gen = g.buses[1].p_load;
  g.buses[1].q_gen = g.buses[1].q_load;
  const auto x = powerflow::solve_power_flow(g, powerflow::scheduled_injections(g)).state;
  CHECK_THROWS_AS(calibrate_attack(MeasurementModel(g), x, {1, StateVariable::Vm, AttackType::A, 1}),
                  NearZeroInjectionError);
}

TEST_CASE("stealth on the 4-bus fixture") {
  const auto g = fixtures::four_bus();
  const MeasurementModel model(g);
  std::mt19937_64 rng(41);
  const auto truth = operating_point(g);
  SUBCASE("zero attack") {
    const auto z = noisy(model, truth, rng);
    const auto x_hat = estimation::wls_estimate(z, model, StateVector::flat(4)).x_hat;
    const auto rec = craft_attack(model, x_hat, {2, StateVariable::Vm, AttackType::A, 1}, 0.0);
    const auto check = verify_stealth(z, rec, model, 0.05);
    CHECK(check.residual_gap == 0.0);
    CHECK(check.reestimated_gap <= 1e-9);
  }
  SUBCASE("crafted attacks") {
    double worst = 0.0;
    double worst_re = 0.0;
    for (int trial = 0; trial < 60; ++trial) {
      const auto z = noisy(model, truth, rng);
      const auto x_hat = estimation::wls_estimate(z, model, StateVector::flat(4)).x_hat;
      const AttackSpec spec{1 + static_cast<std::size_t>(trial % 3), trial % 2 ? StateVariable::Va : StateVariable::Vm,
                            AttackType::A, trial % 4 < 2 ? 1 : -1};
      const double c2 = spec.sign * (spec.variable == StateVariable::Vm ? 0.02 : 0.05);
      const auto rec = craft_attack(model, x_hat, spec, c2);
      const auto check = verify_stealth(z, rec, model, 0.05);
      worst = std::max(worst, check.residual_gap);
      worst_re = std::max(worst_re, check.reestimated_gap);
    }
    MESSAGE("worst gap " << worst << " worst re-estimated gap " << worst_re);
    CHECK(worst <= 1e-6);
  }
}

TEST_CASE("re-estimation after a crafted attack differs from the clean residual at second order") {
  const auto g = fixtures::four_bus();
  const MeasurementModel model(g);
  std::mt19937_64 rng(43);
  const auto truth = operating_point(g);
  const auto z = noisy(model, truth, rng);
  const auto x_hat = estimation::wls_estimate(z, model, StateVector::flat(4)).x_hat;
  const AttackSpec spec{2, StateVariable::Vm, AttackType::A, 1};
  const auto small = verify_stealth(z, craft_attack(model, x_hat, spec, 0.005), model, 0.05);
  const auto large = verify_stealth(z, craft_attack(model, x_hat, spec, 0.02), model, 0.05);
  CHECK(small.residual_gap <= 1e-12);
  CHECK(large.residual_gap <= 1e-12);
  // The fresh estimate can only lower the objective below the value at x_hat + c.
  CHECK(large.attacked.statistic <= large.clean.statistic + 1e-9);
  CHECK(small.reestimated_gap > 1e-6);
  CHECK(large.reestimated_gap > 2.0 * small.reestimated_gap);
}

TEST_CASE("random injection of equal norm is not stealthy") {
  const auto g = fixtures::four_bus();
  const MeasurementModel model(g);
  std::mt19937_64 rng(47);
  std::normal_distribution<double> n01(0.0, 1.0);
  const auto truth = operating_point(g);
  int flagged = 0;
  int large_gap = 0;
  constexpr int kTrials = 100;
  for (int trial = 0; trial < kTrials; ++trial) {
    const auto z = noisy(model, truth, rng);
    const auto x_hat = estimation::wls_estimate(z, model, StateVector::flat(4)).x_hat;
    auto rec = craft_attack(model, x_hat, {3, StateVariable::Vm, AttackType::A, 1}, 0.02);
    Eigen::VectorXd random(rec.a.size());
    for (Eigen::Index i = 0; i < random.size(); ++i) random[i] = n01(rng);
    rec.a = random * (rec.a.norm() / random.norm());
    // A gross error that stalls the estimator counts as detected.
    try {
      const auto check = verify_stealth(z, rec, model, 0.05);
      flagged += check.attacked.flagged;
      large_gap += check.reestimated_gap > 1e-3;
    } catch (const ConvergenceError&) {
      ++flagged;
      ++large_gap;
    }
  }
  CHECK(flagged >= 95);
  CHECK(large_gap >= 95);
}

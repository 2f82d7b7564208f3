#include "powerfd/attack.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

#include "powerfd/error.hpp"

namespace powerfd::attack {

using grid::MeasurementKind;

std::string_view to_string(StateVariable v) { return v == StateVariable::Vm ? "Vm" : "Va"; }

std::string_view to_string(AttackType t) {
  switch (t) {
    case AttackType::A: return "A";
    case AttackType::B: return "B";
    default: return "C";
  }
}

std::optional<AttackType> attack_type_from_string(std::string_view s) {
  if (s == "A") return AttackType::A;
  if (s == "B") return AttackType::B;
  if (s == "C") return AttackType::C;
  return std::nullopt;
}

std::optional<StateVariable> variable_from_string(std::string_view s) {
  if (s == "Vm") return StateVariable::Vm;
  if (s == "Va") return StateVariable::Va;
  return std::nullopt;
}

RateRange rate_range(AttackType type) {
  switch (type) {
    case AttackType::A: return {0.50, 1.00};
    case AttackType::B: return {0.25, 0.50};
    default: return {0.05, 0.25};
  }
}

std::vector<std::size_t> affected_measurements(const grid::GridModel& grid, std::size_t target_bus) {
  const auto neighbours = grid.neighbours(target_bus);
  const std::set<std::size_t> nb(neighbours.begin(), neighbours.end());
  const auto incident = grid.incident_branches(target_bus);
  const std::set<std::size_t> lines(incident.begin(), incident.end());

  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < grid.plan.size(); ++i) {
    const auto& d = grid.plan.entries[i];
    bool hit = false;
    switch (d.kind) {
      case MeasurementKind::BusV:
        hit = d.location == target_bus;
        break;
      case MeasurementKind::BusP:
      case MeasurementKind::BusQ:
        hit = d.location == target_bus || nb.count(d.location) > 0;
        break;
      default:
        hit = lines.count(d.location) > 0;
        break;
    }
    if (hit) out.push_back(i);
  }
  return out;
}

StateVector shifted_state(const StateVector& x_hat, const AttackSpec& spec, double c2) {
  StateVector s = x_hat;
  const auto t = static_cast<Eigen::Index>(spec.target_bus);
  if (spec.variable == StateVariable::Vm) {
    s.v[t] += c2;
  } else {
    s.theta[t] += c2;
  }
  return s;
}

AttackRecord craft_attack(const MeasurementModel& model, const StateVector& x_hat, const AttackSpec& spec,
                          double c2) {
  if (spec.target_bus >= model.grid().bus_count()) throw DomainError("attack target bus out of range");
  if (spec.variable == StateVariable::Va && spec.target_bus == model.slack()) {
    throw DomainError("the slack angle is the reference and cannot be attacked");
  }
  AttackRecord rec;
  rec.spec = spec;
  rec.c2 = c2;
  rec.affected = affected_measurements(model.grid(), spec.target_bus);
  rec.a = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(model.size()));
  const StateVector shifted = shifted_state(x_hat, spec, c2);
  for (auto i : rec.affected) {
    rec.a[static_cast<Eigen::Index>(i)] = model.evaluate_entry(shifted, i) - model.evaluate_entry(x_hat, i);
  }
  const double p0 = powerflow::bus_injection(x_hat, model.admittance(), spec.target_bus).p;
  const double p1 = powerflow::bus_injection(shifted, model.admittance(), spec.target_bus).p;
  rec.achieved_rate = std::abs(p0) > 0.0 ? std::abs(p1 - p0) / std::abs(p0) : 0.0;
  return rec;
}

double injection_change_rate(const MeasurementModel& model, const StateVector& x_hat, const AttackSpec& spec,
                             double magnitude) {
  const double p0 = powerflow::bus_injection(x_hat, model.admittance(), spec.target_bus).p;
  const auto shifted = shifted_state(x_hat, spec, spec.sign * magnitude);
  const double p1 = powerflow::bus_injection(shifted, model.admittance(), spec.target_bus).p;
  return std::abs(p1 - p0) / std::abs(p0);
}

AttackRecord calibrate_attack(const MeasurementModel& model, const StateVector& x_hat, const AttackSpec& spec,
                              const CalibrationOptions& options, CalibrationTrace* trace) {
  if (spec.sign != 1 && spec.sign != -1) throw DomainError("attack sign must be +1 or -1");
  if (spec.variable == StateVariable::Va && spec.target_bus == model.slack()) {
    throw DomainError("the slack angle is the reference and cannot be attacked");
  }
  const double p0 = powerflow::bus_injection(x_hat, model.admittance(), spec.target_bus).p;
  if (!(std::abs(p0) > options.min_injection)) {
    throw NearZeroInjectionError("estimated active injection at bus " + std::to_string(spec.target_bus) +
                                 " is too small for a relative change rate");
  }
  const auto range = rate_range(spec.type);
  const double c_max = spec.variable == StateVariable::Vm ? options.c_max_vm : options.c_max_va;
  auto rate = [&](double c) {
    const double r = injection_change_rate(model, x_hat, spec, c);
    if (trace) trace->emplace_back(c, r);
    return r;
  };

  double lo = 0.0;
  double hi = c_max;
  double rate_lo = 0.0;
  double rate_hi = rate(hi);
  if (rate_hi <= range.lo) {
    throw CalibrationError("attack type " + std::string(to_string(spec.type)) + " unreachable at bus " +
                           std::to_string(spec.target_bus) + " within |c2| <= " + std::to_string(c_max));
  }
  if (range.contains(rate_hi)) return craft_attack(model, x_hat, spec, spec.sign * hi);

  for (int it = 0; it < options.max_iterations; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double r = rate(mid);
    if (r < rate_lo || r > rate_hi) {
      throw CalibrationError("injection-change rate is not monotone in |c2| at bus " +
                             std::to_string(spec.target_bus));
    }
    if (range.contains(r)) {
      auto rec = craft_attack(model, x_hat, spec, spec.sign * mid);
      rec.achieved_rate = r;
      return rec;
    }
    if (r <= range.lo) {
      lo = mid;
      rate_lo = r;
    } else {
      hi = mid;
      rate_hi = r;
    }
  }
  throw CalibrationError("bisection did not land in the type range at bus " + std::to_string(spec.target_bus));
}

StealthCheck verify_stealth(const Eigen::VectorXd& z, const AttackRecord& record, const MeasurementModel& model,
                            double alpha) {
  return verify_stealth(estimation::run_bdd(z, model, alpha), z, record, model);
}

StealthCheck verify_stealth(const estimation::BddOutcome& clean, const Eigen::VectorXd& z, const AttackRecord& record,
                            const MeasurementModel& model) {
  StealthCheck out;
  const Eigen::VectorXd z_bad = z + record.a;
  const auto attacked = estimation::run_bdd(z_bad, model, clean.verdict.alpha);
  out.clean = clean.verdict;
  out.attacked = attacked.verdict;

  out.clean_norm = clean.residual.norm();
  const StateVector predicted = shifted_state(clean.estimate.x_hat, record.spec, record.c2);
  out.attacked_norm = estimation::residual(z_bad, predicted, model).norm();
  const double denom = std::max(out.clean_norm, 1e-12);
  out.residual_gap = std::abs(out.attacked_norm - out.clean_norm) / denom;
  out.reestimated_gap = std::abs(attacked.residual.norm() - out.clean_norm) / denom;
  return out;
}

}  // namespace powerfd::attack

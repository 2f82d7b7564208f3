#include "powerfd/powerflow.hpp"

#include <cmath>
#include <string>

#include "powerfd/error.hpp"

namespace powerfd::powerflow {

using grid::MeasurementKind;

namespace {

struct LineEnds {
  std::size_t i;  // measuring end
  std::size_t k;  // far end
  double g_sh;
  double b_sh;
};

LineEnds ends(const grid::Branch& br, FlowDirection dir) {
  if (dir == FlowDirection::In) return {br.from_bus, br.to_bus, br.g_shunt_from, br.b_shunt_from};
  return {br.to_bus, br.from_bus, br.g_shunt_to, br.b_shunt_to};
}

FlowDirection direction_of(MeasurementKind kind) {
  switch (kind) {
    case MeasurementKind::LinePOut:
    case MeasurementKind::LineQOut:
    case MeasurementKind::LineIOut:
      return FlowDirection::Out;
    default:
      return FlowDirection::In;
  }
}

// Partials of a line quantity with respect to (theta_i, theta_k, v_i, v_k).
struct LocalGrad {
  double dti = 0, dtk = 0, dvi = 0, dvk = 0;
};

struct FlowWithGrad {
  PowerPair flow;
  LocalGrad dp;
  LocalGrad dq;
};

FlowWithGrad flow_with_grad(const StateVector& s, const grid::Branch& br, FlowDirection dir) {
  const auto e = ends(br, dir);
  const double g = br.g_series;
  const double b = br.b_series;
  const double vi = s.v[static_cast<Eigen::Index>(e.i)];
  const double vk = s.v[static_cast<Eigen::Index>(e.k)];
  const double t = s.theta[static_cast<Eigen::Index>(e.i)] - s.theta[static_cast<Eigen::Index>(e.k)];
  const double sn = std::sin(t);
  const double cs = std::cos(t);

  FlowWithGrad out;
  out.flow.p = vi * vi * (g + e.g_sh) - vi * vk * (b * sn + g * cs);
  out.flow.q = -vi * vi * (b - e.b_sh) - vi * vk * (g * sn - b * cs);

  out.dp.dti = -vi * vk * (b * cs - g * sn);
  out.dp.dtk = -out.dp.dti;
  out.dp.dvi = 2.0 * vi * (g + e.g_sh) - vk * (b * sn + g * cs);
  out.dp.dvk = -vi * (b * sn + g * cs);

  out.dq.dti = -vi * vk * (g * cs + b * sn);
  out.dq.dtk = -out.dq.dti;
  out.dq.dvi = -2.0 * vi * (b - e.b_sh) - vk * (g * sn - b * cs);
  out.dq.dvk = -vi * (g * sn - b * cs);
  return out;
}

// Injection at `bus` and its partials with respect to every theta and v.
struct InjectionGrad {
  PowerPair pq;
  Eigen::VectorXd dp_dtheta, dp_dv, dq_dtheta, dq_dv;
};

InjectionGrad injection_with_grad(const StateVector& s, const grid::AdmittanceMatrix& y, std::size_t bus) {
  const auto n = s.v.size();
  const auto i = static_cast<Eigen::Index>(bus);
  InjectionGrad out;
  out.dp_dtheta = Eigen::VectorXd::Zero(n);
  out.dp_dv = Eigen::VectorXd::Zero(n);
  out.dq_dtheta = Eigen::VectorXd::Zero(n);
  out.dq_dv = Eigen::VectorXd::Zero(n);
  out.pq = bus_injection(s, y, bus);

  const double vi = s.v[i];
  for (Eigen::Index k = 0; k < n; ++k) {
    if (k == i) continue;
    const double gik = y.G(i, k);
    const double bik = y.B(i, k);
    if (gik == 0.0 && bik == 0.0) continue;
    const double t = s.theta[i] - s.theta[k];
    const double sn = std::sin(t);
    const double cs = std::cos(t);
    const double vk = s.v[k];
    out.dp_dtheta[k] = vi * vk * (gik * sn - bik * cs);
    out.dp_dv[k] = vi * (gik * cs + bik * sn);
    out.dq_dtheta[k] = -vi * vk * (gik * cs + bik * sn);
    out.dq_dv[k] = vi * (gik * sn - bik * cs);
  }
  const double gii = y.G(i, i);
  const double bii = y.B(i, i);
  out.dp_dtheta[i] = -out.pq.q - bii * vi * vi;
  out.dp_dv[i] = out.pq.p / vi + gii * vi;
  out.dq_dtheta[i] = out.pq.p - gii * vi * vi;
  out.dq_dv[i] = out.pq.q / vi - bii * vi;
  return out;
}

}  // namespace

StateVector StateVector::flat(std::size_t bus_count) {
  const auto n = static_cast<Eigen::Index>(bus_count);
  return {Eigen::VectorXd::Zero(n), Eigen::VectorXd::Ones(n)};
}

Eigen::VectorXd StateVector::pack(std::size_t slack) const {
  const auto n = v.size();
  Eigen::VectorXd x(2 * n - 1);
  Eigen::Index c = 0;
  for (Eigen::Index k = 0; k < n; ++k) {
    if (static_cast<std::size_t>(k) != slack) x[c++] = theta[k];
  }
  x.tail(n) = v;
  return x;
}

StateVector StateVector::unpack(const Eigen::VectorXd& x, std::size_t slack) {
  const auto n = (x.size() + 1) / 2;
  StateVector s{Eigen::VectorXd::Zero(n), x.tail(n)};
  Eigen::Index c = 0;
  for (Eigen::Index k = 0; k < n; ++k) {
    if (static_cast<std::size_t>(k) != slack) s.theta[k] = x[c++];
  }
  return s;
}

PowerPair line_flow(const StateVector& state, const grid::Branch& branch, FlowDirection direction) {
  return flow_with_grad(state, branch, direction).flow;
}

double line_current_magnitude(const StateVector& state, const grid::Branch& branch, FlowDirection direction) {
  const auto e = ends(branch, direction);
  const double vi = state.v[static_cast<Eigen::Index>(e.i)];
  if (!(vi > 0.0)) throw DomainError("line current undefined for non-positive terminal voltage");
  const auto f = line_flow(state, branch, direction);
  return std::hypot(f.p, f.q) / vi;
}

PowerPair bus_injection(const StateVector& state, const grid::AdmittanceMatrix& y, std::size_t bus) {
  const auto i = static_cast<Eigen::Index>(bus);
  const double vi = state.v[i];
  PowerPair out;
  for (Eigen::Index k = 0; k < state.v.size(); ++k) {
    const double gik = y.G(i, k);
    const double bik = y.B(i, k);
    if (gik == 0.0 && bik == 0.0) continue;
    const double t = state.theta[i] - state.theta[k];
    const double sn = std::sin(t);
    const double cs = std::cos(t);
    out.p += state.v[k] * (bik * sn + gik * cs);
    out.q += state.v[k] * (gik * sn - bik * cs);
  }
  out.p *= vi;
  out.q *= vi;
  return out;
}

MeasurementModel::MeasurementModel(const grid::GridModel& grid)
    : grid_(grid), y_(grid::build_admittance(grid)), slack_(grid.slack_bus()) {}

double MeasurementModel::evaluate_entry(const StateVector& state, std::size_t entry) const {
  const auto& d = grid_.plan.entries[entry];
  switch (d.kind) {
    case MeasurementKind::BusP: return bus_injection(state, y_, d.location).p;
    case MeasurementKind::BusQ: return bus_injection(state, y_, d.location).q;
    case MeasurementKind::BusV: return state.v[static_cast<Eigen::Index>(d.location)];
    default: break;
  }
  const auto& br = grid_.branches[d.location];
  if (!br.in_service) return 0.0;
  const auto dir = direction_of(d.kind);
  switch (d.kind) {
    case MeasurementKind::LinePIn:
    case MeasurementKind::LinePOut:
      return line_flow(state, br, dir).p;
    case MeasurementKind::LineQIn:
    case MeasurementKind::LineQOut:
      return line_flow(state, br, dir).q;
    default:
      return line_current_magnitude(state, br, dir);
  }
}

Eigen::VectorXd MeasurementModel::evaluate(const StateVector& state) const {
  const auto m = static_cast<Eigen::Index>(size());
  Eigen::VectorXd h(m);
  for (Eigen::Index r = 0; r < m; ++r) h[r] = evaluate_entry(state, static_cast<std::size_t>(r));
  return h;
}

Eigen::MatrixXd MeasurementModel::jacobian(const StateVector& state) const {
  const auto n = static_cast<Eigen::Index>(grid_.bus_count());
  const auto m = static_cast<Eigen::Index>(size());
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(m, 2 * n - 1);
  const auto slack = static_cast<Eigen::Index>(slack_);
  auto theta_col = [&](Eigen::Index k) { return k < slack ? k : k - 1; };
  auto v_col = [&](Eigen::Index k) { return n - 1 + k; };
  auto put_theta = [&](Eigen::Index row, Eigen::Index k, double value) {
    if (k != slack) J(row, theta_col(k)) += value;
  };

  for (Eigen::Index r = 0; r < m; ++r) {
    const auto& d = grid_.plan.entries[static_cast<std::size_t>(r)];
    if (d.kind == MeasurementKind::BusV) {
      J(r, v_col(static_cast<Eigen::Index>(d.location))) = 1.0;
      continue;
    }
    if (d.kind == MeasurementKind::BusP || d.kind == MeasurementKind::BusQ) {
      const auto g = injection_with_grad(state, y_, d.location);
      const bool is_p = d.kind == MeasurementKind::BusP;
      const auto& dth = is_p ? g.dp_dtheta : g.dq_dtheta;
      const auto& dv = is_p ? g.dp_dv : g.dq_dv;
      for (Eigen::Index k = 0; k < n; ++k) {
        put_theta(r, k, dth[k]);
        J(r, v_col(k)) = dv[k];
      }
      continue;
    }

    const auto& br = grid_.branches[d.location];
    if (!br.in_service) continue;
    const auto dir = direction_of(d.kind);
    const auto e = ends(br, dir);
    const auto fg = flow_with_grad(state, br, dir);
    LocalGrad lg;
    switch (d.kind) {
      case MeasurementKind::LinePIn:
      case MeasurementKind::LinePOut:
        lg = fg.dp;
        break;
      case MeasurementKind::LineQIn:
      case MeasurementKind::LineQOut:
        lg = fg.dq;
        break;
      default: {
        const double vi = state.v[static_cast<Eigen::Index>(e.i)];
        const double s = std::hypot(fg.flow.p, fg.flow.q);
        if (s < 1e-14) break;  // |S| is not differentiable at zero flow
        const double a = fg.flow.p / (s * vi);
        const double c = fg.flow.q / (s * vi);
        lg.dti = a * fg.dp.dti + c * fg.dq.dti;
        lg.dtk = a * fg.dp.dtk + c * fg.dq.dtk;
        lg.dvi = a * fg.dp.dvi + c * fg.dq.dvi - s / (vi * vi);
        lg.dvk = a * fg.dp.dvk + c * fg.dq.dvk;
        break;
      }
    }
    const auto ei = static_cast<Eigen::Index>(e.i);
    const auto ek = static_cast<Eigen::Index>(e.k);
    put_theta(r, ei, lg.dti);
    put_theta(r, ek, lg.dtk);
    J(r, v_col(ei)) += lg.dvi;
    J(r, v_col(ek)) += lg.dvk;
  }
  return J;
}

Eigen::VectorXd measurement_function(const StateVector& state, const grid::GridModel& grid) {
  return MeasurementModel(grid).evaluate(state);
}

Eigen::MatrixXd measurement_jacobian(const StateVector& state, const grid::GridModel& grid) {
  return MeasurementModel(grid).jacobian(state);
}

std::vector<PowerPair> scheduled_injections(const grid::GridModel& grid) {
  std::vector<PowerPair> out;
  out.reserve(grid.buses.size());
  for (const auto& b : grid.buses) out.push_back({b.p_net(), b.q_net()});
  return out;
}

PowerFlowSolution solve_power_flow(const grid::GridModel& grid, const std::vector<PowerPair>& injections,
                                   const PowerFlowOptions& options) {
  const std::size_t n = grid.bus_count();
  if (injections.size() != n) throw DomainError("injection setpoints must cover every bus");
  const std::size_t slack = grid.slack_bus();
  const auto y = grid::build_admittance(grid);

  // Unknowns: theta and v of every non-slack bus; equations: P and Q there.
  std::vector<std::size_t> pq;
  for (std::size_t i = 0; i < n; ++i) {
    if (i != slack) pq.push_back(i);
  }
  const auto u = static_cast<Eigen::Index>(pq.size());

  PowerFlowSolution sol;
  sol.state = StateVector::flat(n);
  sol.state.v[static_cast<Eigen::Index>(slack)] = grid.buses[slack].v_set;

  auto mismatch = [&](const StateVector& s) {
    Eigen::VectorXd f(2 * u);
    for (Eigen::Index r = 0; r < u; ++r) {
      const auto inj = bus_injection(s, y, pq[static_cast<std::size_t>(r)]);
      f[r] = injections[pq[static_cast<std::size_t>(r)]].p - inj.p;
      f[u + r] = injections[pq[static_cast<std::size_t>(r)]].q - inj.q;
    }
    return f;
  };

  if (u == 0) return sol;

  Eigen::VectorXd f = mismatch(sol.state);
  double norm = f.lpNorm<Eigen::Infinity>();
  int growth = 0;
  while (norm > options.tolerance) {
    if (sol.iterations >= options.max_iterations) {
      throw ConvergenceError("power flow did not converge in " + std::to_string(options.max_iterations) +
                             " iterations (mismatch " + std::to_string(norm) + ")");
    }
    Eigen::MatrixXd J(2 * u, 2 * u);
    for (Eigen::Index r = 0; r < u; ++r) {
      const auto g = injection_with_grad(sol.state, y, pq[static_cast<std::size_t>(r)]);
      for (Eigen::Index c = 0; c < u; ++c) {
        const auto k = static_cast<Eigen::Index>(pq[static_cast<std::size_t>(c)]);
        J(r, c) = g.dp_dtheta[k];
        J(r, u + c) = g.dp_dv[k];
        J(u + r, c) = g.dq_dtheta[k];
        J(u + r, u + c) = g.dq_dv[k];
      }
    }
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(J);
    const Eigen::VectorXd dx = lu.solve(f);
    if (!dx.allFinite()) throw ConvergenceError("power flow Jacobian became singular");
    for (Eigen::Index c = 0; c < u; ++c) {
      const auto k = static_cast<Eigen::Index>(pq[static_cast<std::size_t>(c)]);
      sol.state.theta[k] += dx[c];
      sol.state.v[k] += dx[u + c];
    }
    ++sol.iterations;
    if ((sol.state.v.array() <= 0.0).any()) throw ConvergenceError("power flow produced a non-positive voltage");

    f = mismatch(sol.state);
    const double next = f.lpNorm<Eigen::Infinity>();
    if (!std::isfinite(next)) throw ConvergenceError("power flow mismatch is not finite");
    growth = next > norm ? growth + 1 : 0;
    norm = next;
    if (growth >= options.divergence_window) {
      throw DivergenceError("power flow mismatch grew for " + std::to_string(growth) + " consecutive iterations");
    }
  }
  sol.mismatch = norm;
  return sol;
}

}  // namespace powerfd::powerflow

#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "powerfd/grid.hpp"
#include "powerfd/powerflow.hpp"

namespace fixtures {

inline std::filesystem::path data(const std::string& rel) { return std::filesystem::path(POWERFD_DATA_DIR) / rel; }

inline powerfd::grid::GridModel two_bus() { return powerfd::grid::load_grid(data("grids/two_bus.json")); }
inline powerfd::grid::GridModel four_bus() { return powerfd::grid::load_grid(data("grids/four_bus.json")); }
inline powerfd::grid::GridModel ieee14() { return powerfd::grid::load_grid(data("grids/ieee14.json")); }

/// Random state near nominal: angles within +-0.2 rad, magnitudes in [0.9, 1.1].
inline powerfd::powerflow::StateVector random_state(const powerfd::grid::GridModel& g, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> ang(-0.2, 0.2);
  std::uniform_real_distribution<double> mag(0.9, 1.1);
  auto s = powerfd::powerflow::StateVector::flat(g.bus_count());
  const auto slack = g.slack_bus();
  for (Eigen::Index k = 0; k < s.v.size(); ++k) {
    s.theta[k] = static_cast<std::size_t>(k) == slack ? 0.0 : ang(rng);
    s.v[k] = mag(rng);
  }
  return s;
}

}  // namespace fixtures

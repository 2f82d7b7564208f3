#include "powerfd/metrics.hpp"

#include <string>

#include "powerfd/error.hpp"

namespace powerfd::eval {

ConfusionCounts confusion(std::span<const double> probabilities, std::span<const std::uint8_t> labels,
                          double threshold) {
  if (probabilities.size() != labels.size()) {
    throw ShapeError("confusion: " + std::to_string(probabilities.size()) + " predictions for " +
                     std::to_string(labels.size()) + " labels");
  }
  ConfusionCounts c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool predicted = probabilities[i] >= threshold;
    const bool actual = labels[i] != 0;
    if (predicted && actual) ++c.tp;
    else if (predicted) ++c.fp;
    else if (actual) ++c.fn;
    else ++c.tn;
  }
  return c;
}

double f1_score(double precision, double recall) {
  const double s = precision + recall;
  return s > 0.0 ? 2.0 * precision * recall / s : 0.0;
}

Metrics metrics(const ConfusionCounts& c) {
  Metrics m;
  m.precision_defined = c.tp + c.fp > 0;
  m.recall_defined = c.tp + c.fn > 0;
  if (m.precision_defined) m.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  if (m.recall_defined) m.recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  m.f1_defined = m.precision_defined && m.recall_defined && c.tp > 0;
  m.f1 = f1_score(m.precision, m.recall);
  return m;
}

}  // namespace powerfd::eval

#pragma once

#include <cstdint>
#include <span>

namespace powerfd::eval {

/// Attacked windows are positive.
struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;

  std::uint64_t positives() const { return tp + fn; }
  std::uint64_t negatives() const { return fp + tn; }
  std::uint64_t total() const { return tp + fp + fn + tn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

inline constexpr double kDefaultThreshold = 0.5;

/// A prediction p >= threshold is positive, so ties count as attacked.
/// Throws ShapeError on a length mismatch.
ConfusionCounts confusion(std::span<const double> probabilities, std::span<const std::uint8_t> labels,
                          double threshold = kDefaultThreshold);

/// Fractions in [0, 1]. A ratio with an empty denominator is 0 and flagged
/// undefined.
struct Metrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  bool precision_defined = false;
  bool recall_defined = false;
  bool f1_defined = false;
};

Metrics metrics(const ConfusionCounts& counts);

/// Harmonic mean; 0 when both inputs are 0.
double f1_score(double precision, double recall);

}  // namespace powerfd::eval

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "powerfd/dataset.hpp"
#include "powerfd/grid.hpp"
#include "powerfd/metrics.hpp"
#include "powerfd/nncore.hpp"

namespace powerfd::detector {

using nn::Mode;
using nn::Shape;
using nn::Tensor;

/// Architecture dimensions. Everything except the row counts and the window
/// length is fixed by the architecture.
struct PowerFdConfig {
  std::size_t m_b = 0;  // monitored buses
  std::size_t m_l = 0;  // monitored lines
  std::size_t T = 7;    // a window holds T + 1 frames

  static constexpr std::size_t c_b = grid::kBusColumns;
  static constexpr std::size_t c_l = grid::kLineColumns;
  static constexpr std::size_t repr_width = 4;
  static constexpr std::size_t residual_width = 12;  // per-row channels of the third conv
  static constexpr std::array<std::size_t, 3> spatial_widths{256, 256, 128};
  static constexpr std::array<std::size_t, 5> lstm_widths{128, 256, 256, 256, 128};

  std::size_t frames() const { return T + 1; }
  /// Throws ShapeError on a zero dimension.
  void validate() const;
  friend bool operator==(const PowerFdConfig&, const PowerFdConfig&) = default;
};

PowerFdConfig config_for(const grid::MeasurementLayout& layout, std::size_t T);

/// Named intermediate shapes recorded by a forward pass.
struct ShapeLedger {
  std::vector<std::pair<std::string, Shape>> entries;
  void record(std::string name, const Shape& shape) { entries.emplace_back(std::move(name), shape); }
  /// Throws std::out_of_range for an unknown name.
  const Shape& at(const std::string& name) const;
};

/// Convolution followed by batch norm and ELU.
template <class S>
struct ConvBlock {
  struct Cache {
    Tensor<S> x;
    typename nn::BatchNorm<S>::Cache bn;
    Tensor<S> y;
  };

  ConvBlock() = default;
  ConvBlock(const std::string& name, nn::ConvSpec spec) : conv(name, spec), bn(name + ".bn", spec.out_channels) {}

  Tensor<S> forward(const Tensor<S>& x, Mode mode, Cache& cache);
  Tensor<S> backward(const Tensor<S>& dy, const Cache& cache);
  void collect(nn::ParamList<S>& out);

  nn::Conv2d<S> conv;
  nn::BatchNorm<S> bn;
};

/// Per-row representation network over [N, rows, 1, width] blocks, one
/// frame per batch entry. Every conv is grouped by row, so rows never mix.
/// The first two convs keep the width; each of their outputs is stacked
/// under the original rows (feature at height 0, original at height 1).
template <class S>
class RepresentationPath {
 public:
  struct Cache {
    std::array<typename ConvBlock<S>::Cache, 5> blocks;
  };

  RepresentationPath() = default;
  RepresentationPath(const std::string& name, std::size_t rows, std::size_t width);

  /// [N, rows, 1, width] -> [N, rows, 1, 4].
  Tensor<S> forward(const Tensor<S>& x, Mode mode, Cache& cache, ShapeLedger* ledger = nullptr);
  Tensor<S> backward(const Tensor<S>& dy, const Cache& cache);
  void init(std::mt19937_64& rng);
  void collect(nn::ParamList<S>& out);
  void collect_blocks(std::vector<ConvBlock<S>*>& out);

  std::size_t rows() const { return rows_; }
  std::size_t width() const { return width_; }
  std::array<ConvBlock<S>, 5> blocks;

 private:
  std::string name_;
  std::size_t rows_ = 0;
  std::size_t width_ = 0;
};

/// Joins bus and line representations (buses first along the height) and
/// reduces each frame to a 128-vector.
template <class S>
class SpatialPath {
 public:
  struct Cache {
    std::array<typename ConvBlock<S>::Cache, 3> blocks;
  };

  SpatialPath() = default;
  SpatialPath(std::size_t m_b, std::size_t m_l);

  /// bus [N, m_b, 1, 4], line [N, m_l, 1, 4] -> [N, 128].
  Tensor<S> forward(const Tensor<S>& bus, const Tensor<S>& line, Mode mode, Cache& cache,
                    ShapeLedger* ledger = nullptr);
  /// Returns the gradients w.r.t. the bus and line inputs.
  std::pair<Tensor<S>, Tensor<S>> backward(const Tensor<S>& dy, const Cache& cache);
  void init(std::mt19937_64& rng);
  void collect(nn::ParamList<S>& out);
  void collect_blocks(std::vector<ConvBlock<S>*>& out);

  std::array<ConvBlock<S>, 3> blocks;

 private:
  std::size_t m_b_ = 0;
  std::size_t m_l_ = 0;
};

/// Four stacked LSTM layers and the sigmoid head on the final time step.
template <class S>
class TemporalPath {
 public:
  struct Cache {
    std::array<typename nn::LstmLayer<S>::Cache, 4> layers;
    Tensor<S> last;  // [B, 128]
    Tensor<S> prob;  // [B, 1]
  };

  TemporalPath();

  /// Time-major features [T + 1, B, 128] -> probabilities [B].
  std::vector<S> forward(const Tensor<S>& seq, Cache& cache, ShapeLedger* ledger = nullptr) const;
  /// dprob [B] -> dseq [T + 1, B, 128].
  Tensor<S> backward(std::span<const S> dprob, const Cache& cache);
  void init(std::mt19937_64& rng);
  void collect(nn::ParamList<S>& out);

  std::array<nn::LstmLayer<S>, 4> layers;
  nn::Linear<S> head;
};

/// Frame-major inputs of B windows: frame t of window b is entry b * (T+1) + t.
template <class S>
struct WindowBatch {
  Tensor<S> bus;   // [B * (T+1), m_b, 1, c_b]
  Tensor<S> line;  // [B * (T+1), m_l, 1, c_l]
  std::vector<S> labels;
  std::size_t windows() const { return labels.size(); }
};

template <class S>
class PowerFdModel {
 public:
  struct Cache {
    typename RepresentationPath<S>::Cache bus;
    typename RepresentationPath<S>::Cache line;
    typename SpatialPath<S>::Cache spatial;
    typename TemporalPath<S>::Cache temporal;
    std::size_t windows = 0;
  };

  struct InputGrad {
    Tensor<S> bus;
    Tensor<S> line;
  };

  PowerFdModel() = default;
  explicit PowerFdModel(const PowerFdConfig& config);

  const PowerFdConfig& config() const { return config_; }

  /// Kaiming-uniform convs and head, uniform +-1/sqrt(h) LSTM, BN scale 1
  /// shift 0, all drawn from one generator seeded by `seed`.
  void init(std::uint64_t seed);

  /// Probabilities in (0, 1), one per window.
  std::vector<S> forward(const WindowBatch<S>& batch, Mode mode, Cache& cache, ShapeLedger* ledger = nullptr);
  /// Accumulates parameter gradients from dloss/dprob; returns input gradients.
  InputGrad backward(std::span<const S> dprob, const Cache& cache);

  /// Eval-mode probabilities.
  std::vector<S> predict(const WindowBatch<S>& batch);

  nn::ParamList<S> parameters();
  /// BN running statistics, in checkpoint order.
  std::vector<std::pair<std::string, Tensor<S>*>> buffers();
  void zero_grad();

  template <class U>
  PowerFdModel<U> cast() const;

  RepresentationPath<S> bus_path;
  RepresentationPath<S> line_path;
  SpatialPath<S> spatial;
  TemporalPath<S> temporal;

 private:
  PowerFdConfig config_;
};

/// Converts time-major [T+1, B, d] and frame-major [B*(T+1), d] layouts.
template <class S>
Tensor<S> frames_to_time_major(const Tensor<S>& x, std::size_t windows, std::size_t frames);
template <class S>
Tensor<S> time_major_to_frames(const Tensor<S>& x);

// ---------------------------------------------------------------------------
// Inputs

/// Per-cell affine scaling of measurement frames, fitted on clean training
/// frames. Cells with (near) zero spread keep scale 1.
struct Standardizer {
  std::vector<float> mean;  // plan order
  std::vector<float> scale;

  static Standardizer fit(const std::vector<const dataset::Frame*>& frames, std::size_t plan_size);
  static Standardizer identity(std::size_t plan_size);
  friend bool operator==(const Standardizer&, const Standardizer&) = default;
};

/// Writes one standardized frame (plan order) into its bus and line blocks.
/// Padding cells are left untouched. Throws ShapeError on a length mismatch.
template <class S>
void place_frame(std::span<const float> values, const grid::MeasurementLayout& layout,
                 const Standardizer& standardizer, S* bus, S* line);

/// Batch holding the single window made of `frames` (oldest first), label 0.
template <class S>
WindowBatch<S> window_batch(const std::vector<std::vector<float>>& frames, const grid::MeasurementLayout& layout,
                            const Standardizer& standardizer);

/// Windows of one dataset plus what is needed to turn them into tensors.
class WindowSource {
 public:
  WindowSource(const dataset::Dataset& data, std::vector<dataset::MeasurementWindow> windows, std::size_t T,
               const Standardizer& standardizer);

  std::size_t size() const { return windows_.size(); }
  const std::vector<dataset::MeasurementWindow>& windows() const { return windows_; }
  std::vector<std::uint8_t> labels() const;
  const grid::MeasurementLayout& layout() const { return layout_; }
  const dataset::Dataset& data() const { return *data_; }
  std::size_t T() const { return T_; }

  /// Batch of the windows at `indices`. `labels` overrides the stored labels
  /// when non-empty (indexed like the source).
  template <class S>
  WindowBatch<S> batch(std::span<const std::size_t> indices, std::span<const std::uint8_t> labels = {}) const;

 private:
  const dataset::Dataset* data_;
  std::vector<dataset::MeasurementWindow> windows_;
  std::size_t T_;
  Standardizer standardizer_;
  grid::MeasurementLayout layout_;
};

/// Batched eval-mode probabilities for every window of the source.
std::vector<double> predict_all(PowerFdModel<float>& model, const WindowSource& source, std::size_t batch = 256);

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  double lr = 1e-4;
  std::size_t batch = 64;
  std::size_t epochs = 50;
  std::uint64_t seed = 1;
  nn::Reduction reduction = nn::Reduction::Mean;
  double threshold = eval::kDefaultThreshold;
  int patience = 5;
  double lr_factor = 0.5;
  double min_lr = 1e-6;
  /// Replaces the training labels when non-empty (label-shuffled control).
  std::vector<std::uint8_t> train_labels;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  eval::ConfusionCounts val_counts;
  double val_f1 = 0.0;
  double lr = 0.0;  // rate used during the epoch
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_f1 = -1.0;
};

/// JSON-lines text of one epoch record.
std::string epoch_json(const EpochRecord& record);

/// Mini-batch Adam with the plateau scheduler on the validation loss. The
/// model ends with the parameters of the epoch with the best validation F1
/// (earliest on ties). Shuffling depends only on the seed and the epoch.
/// `on_epoch` sees every record as it completes. Throws
/// DivergedTrainingError if the training loss becomes non-finite.
TrainReport train(PowerFdModel<float>& model, const WindowSource& train_set, const WindowSource& val_set,
                  const TrainOptions& options, const std::function<void(const EpochRecord&)>& on_epoch = {});

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::array<char, 8> kCheckpointMagic{'P', 'F', 'D', 'N', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  PowerFdModel<float> model;
  Standardizer standardizer;
  std::uint64_t init_seed = 0;
  std::uint64_t dataset_hash = 0;  // FNV-1a of the dataset file the model was trained on
  std::size_t epoch = 0;
};

/// FNV-1a over every parameter and buffer, in checkpoint order.
std::uint64_t parameter_hash(PowerFdModel<float>& model);

std::vector<std::uint8_t> encode_checkpoint(Checkpoint& checkpoint);
/// Throws ParseError on truncation or corruption, VersionMismatchError on an
/// unknown version, and ConfigMismatchError if `expected` is given and differs.
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes,
                             const std::optional<PowerFdConfig>& expected = std::nullopt);
void save_checkpoint(Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const std::optional<PowerFdConfig>& expected = std::nullopt);

}  // namespace powerfd::detector

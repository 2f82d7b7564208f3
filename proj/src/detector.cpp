#include "powerfd/detector.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "powerfd/bytes.hpp"
#include "powerfd/error.hpp"
#include "powerfd/hash.hpp"
#include "powerfd/random.hpp"

namespace powerfd::detector {

using nn::ConvSpec;

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <class S>
Tensor<S> add(Tensor<S> a, const Tensor<S>& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

}  // namespace

void PowerFdConfig::validate() const {
  require(m_b > 0 && m_l > 0 && T > 0, "model dimensions must be positive (m_b=" + std::to_string(m_b) +
                                           ", m_l=" + std::to_string(m_l) + ", T=" + std::to_string(T) + ")");
}

PowerFdConfig config_for(const grid::MeasurementLayout& layout, std::size_t T) {
  PowerFdConfig c{layout.monitored_buses(), layout.monitored_lines(), T};
  c.validate();
  return c;
}

const Shape& ShapeLedger::at(const std::string& name) const {
  for (const auto& [n, s] : entries) {
    if (n == name) return s;
  }
  throw std::out_of_range("no shape recorded for " + name);
}

// ---------------------------------------------------------------------------
// Blocks

template <class S>
Tensor<S> ConvBlock<S>::forward(const Tensor<S>& x, Mode mode, Cache& cache) {
  cache.x = x;
  cache.y = nn::elu(bn.forward(conv.forward(x), mode, cache.bn));
  return cache.y;
}

template <class S>
Tensor<S> ConvBlock<S>::backward(const Tensor<S>& dy, const Cache& cache) {
  return conv.backward(cache.x, bn.backward(nn::elu_backward(cache.y, dy), cache.bn));
}

template <class S>
void ConvBlock<S>::collect(nn::ParamList<S>& out) {
  conv.collect(out);
  bn.collect(out);
}

template <class S>
RepresentationPath<S>::RepresentationPath(const std::string& name, std::size_t rows, std::size_t width)
    : name_(name), rows_(rows), width_(width) {
  const std::size_t m = rows;
  const std::size_t r = PowerFdConfig::residual_width;
  blocks[0] = ConvBlock<S>(name + ".conv1", {.in_channels = m, .out_channels = m, .kernel_h = 1, .kernel_w = 3,
                                             .groups = m, .pad_w = 1});
  blocks[1] = ConvBlock<S>(name + ".conv2", {.in_channels = m, .out_channels = m, .kernel_h = 2, .kernel_w = 3,
                                             .groups = m, .pad_w = 1});
  blocks[2] = ConvBlock<S>(name + ".conv3", {.in_channels = m, .out_channels = r * m, .kernel_h = 2,
                                             .kernel_w = width, .groups = m});
  blocks[3] = ConvBlock<S>(name + ".conv4", {.in_channels = m, .out_channels = m, .kernel_h = 1, .kernel_w = 3,
                                             .groups = m, .stride = 2, .pad_w = 1});
  blocks[4] = ConvBlock<S>(name + ".conv5", {.in_channels = m, .out_channels = m, .kernel_h = 1, .kernel_w = 3,
                                             .groups = m});
}

template <class S>
Tensor<S> RepresentationPath<S>::forward(const Tensor<S>& x, Mode mode, Cache& cache, ShapeLedger* ledger) {
  require(x.rank() == 4 && x.dim(1) == rows_ && x.dim(2) == 1 && x.dim(3) == width_,
          name_ + " expects [N, " + std::to_string(rows_) + ", 1, " + std::to_string(width_) + "], got " +
              nn::shape_string(x.shape()));
  const std::size_t n = x.dim(0);
  auto note = [&](const char* what, const Tensor<S>& t) {
    if (ledger) ledger->record(name_ + "." + what, t.shape());
  };
  note("input", x);
  const auto a1 = blocks[0].forward(x, mode, cache.blocks[0]);
  note("conv1", a1);
  const auto s1 = nn::concat(a1, x, 2);
  note("stack1", s1);
  const auto a2 = blocks[1].forward(s1, mode, cache.blocks[1]);
  note("conv2", a2);
  const auto s2 = nn::concat(a2, x, 2);
  note("stack2", s2);
  auto a3 = blocks[2].forward(s2, mode, cache.blocks[2]);
  note("conv3", a3);
  a3 = std::move(a3).reshaped({n, rows_, 1, PowerFdConfig::residual_width});
  note("reshape3", a3);
  const auto a4 = blocks[3].forward(a3, mode, cache.blocks[3]);
  note("conv4", a4);
  auto a5 = blocks[4].forward(a4, mode, cache.blocks[4]);
  note("conv5", a5);
  return a5;
}

template <class S>
Tensor<S> RepresentationPath<S>::backward(const Tensor<S>& dy, const Cache& cache) {
  const std::size_t n = dy.dim(0);
  const auto d4 = blocks[4].backward(dy, cache.blocks[4]);
  auto d3 = blocks[3].backward(d4, cache.blocks[3]);
  d3 = std::move(d3).reshaped({n, PowerFdConfig::residual_width * rows_, 1, 1});
  const auto ds2 = blocks[2].backward(d3, cache.blocks[2]);
  auto [da2, dx2] = nn::split(ds2, 2, 1);
  const auto ds1 = blocks[1].backward(da2, cache.blocks[1]);
  auto [da1, dx1] = nn::split(ds1, 2, 1);
  return add(add(blocks[0].backward(da1, cache.blocks[0]), dx1), dx2);
}

template <class S>
void RepresentationPath<S>::init(std::mt19937_64& rng) {
  for (auto& b : blocks) b.conv.init(rng);
}

template <class S>
void RepresentationPath<S>::collect(nn::ParamList<S>& out) {
  for (auto& b : blocks) b.collect(out);
}

template <class S>
void RepresentationPath<S>::collect_blocks(std::vector<ConvBlock<S>*>& out) {
  for (auto& b : blocks) out.push_back(&b);
}

template <class S>
SpatialPath<S>::SpatialPath(std::size_t m_b, std::size_t m_l) : m_b_(m_b), m_l_(m_l) {
  const auto [w1, w2, w3] = PowerFdConfig::spatial_widths;
  blocks[0] = ConvBlock<S>("spatial.conv1", {.in_channels = 1, .out_channels = w1, .kernel_h = m_b + m_l,
                                             .kernel_w = 1});
  blocks[1] = ConvBlock<S>("spatial.conv2", {.in_channels = w1, .out_channels = w2, .kernel_h = 1,
                                             .kernel_w = PowerFdConfig::repr_width, .groups = w1});
  blocks[2] = ConvBlock<S>("spatial.conv3", {.in_channels = 1, .out_channels = w3, .kernel_h = w2, .kernel_w = 1});
}

template <class S>
Tensor<S> SpatialPath<S>::forward(const Tensor<S>& bus, const Tensor<S>& line, Mode mode, Cache& cache,
                                  ShapeLedger* ledger) {
  constexpr std::size_t w = PowerFdConfig::repr_width;
  require(bus.shape() == Shape({bus.dim(0), m_b_, 1, w}) && line.shape() == Shape({bus.dim(0), m_l_, 1, w}),
          "spatial path got " + nn::shape_string(bus.shape()) + " and " + nn::shape_string(line.shape()));
  const std::size_t n = bus.dim(0);
  auto note = [&](const char* what, const Shape& s) {
    if (ledger) ledger->record(std::string("spatial.") + what, s);
  };
  const auto h = nn::concat(bus.reshaped({n, 1, m_b_, w}), line.reshaped({n, 1, m_l_, w}), 2);
  note("input", h.shape());
  const auto a1 = blocks[0].forward(h, mode, cache.blocks[0]);
  note("conv1", a1.shape());
  auto a2 = blocks[1].forward(a1, mode, cache.blocks[1]);
  note("conv2", a2.shape());
  a2 = std::move(a2).reshaped({n, 1, PowerFdConfig::spatial_widths[1], 1});
  note("reshape2", a2.shape());
  auto a3 = blocks[2].forward(a2, mode, cache.blocks[2]);
  note("conv3", a3.shape());
  a3 = std::move(a3).reshaped({n, PowerFdConfig::spatial_widths[2]});
  note("output", a3.shape());
  return a3;
}

template <class S>
std::pair<Tensor<S>, Tensor<S>> SpatialPath<S>::backward(const Tensor<S>& dy, const Cache& cache) {
  constexpr std::size_t w = PowerFdConfig::repr_width;
  const std::size_t n = dy.dim(0);
  auto d2 = blocks[2].backward(dy.reshaped({n, PowerFdConfig::spatial_widths[2], 1, 1}), cache.blocks[2]);
  d2 = std::move(d2).reshaped({n, PowerFdConfig::spatial_widths[1], 1, 1});
  const auto d1 = blocks[1].backward(d2, cache.blocks[1]);
  const auto dh = blocks[0].backward(d1, cache.blocks[0]);
  auto [db, dl] = nn::split(dh, 2, m_b_);
  return {std::move(db).reshaped({n, m_b_, 1, w}), std::move(dl).reshaped({n, m_l_, 1, w})};
}

template <class S>
void SpatialPath<S>::init(std::mt19937_64& rng) {
  for (auto& b : blocks) b.conv.init(rng);
}

template <class S>
void SpatialPath<S>::collect(nn::ParamList<S>& out) {
  for (auto& b : blocks) b.collect(out);
}

template <class S>
void SpatialPath<S>::collect_blocks(std::vector<ConvBlock<S>*>& out) {
  for (auto& b : blocks) out.push_back(&b);
}

template <class S>
TemporalPath<S>::TemporalPath() : head("temporal.head", PowerFdConfig::lstm_widths.back(), 1) {
  const auto& w = PowerFdConfig::lstm_widths;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    layers[k] = nn::LstmLayer<S>("temporal.lstm" + std::to_string(k + 1), w[k], w[k + 1]);
  }
}

template <class S>
std::vector<S> TemporalPath<S>::forward(const Tensor<S>& seq, Cache& cache, ShapeLedger* ledger) const {
  require(seq.rank() == 3 && seq.dim(2) == PowerFdConfig::lstm_widths[0],
          "temporal path expects [T+1, B, 128], got " + nn::shape_string(seq.shape()));
  if (ledger) ledger->record("temporal.input", seq.shape());
  Tensor<S> h = seq;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    h = layers[k].forward(h, cache.layers[k]);
    if (ledger) ledger->record("temporal.lstm" + std::to_string(k + 1), h.shape());
  }
  const std::size_t steps = h.dim(0);
  const std::size_t b = h.dim(1);
  const std::size_t d = h.dim(2);
  cache.last = Tensor<S>({b, d}, std::vector<S>(h.data() + (steps - 1) * b * d, h.data() + steps * b * d));
  cache.prob = nn::sigmoid(head.forward(cache.last));
  if (ledger) ledger->record("temporal.head", cache.prob.shape());
  return cache.prob.values();
}

template <class S>
Tensor<S> TemporalPath<S>::backward(std::span<const S> dprob, const Cache& cache) {
  const std::size_t b = cache.last.dim(0);
  const std::size_t d = cache.last.dim(1);
  require(dprob.size() == b, "temporal backward expects one gradient per window");
  const Tensor<S> dp({b, 1}, std::vector<S>(dprob.begin(), dprob.end()));
  const auto dlast = head.backward(cache.last, nn::sigmoid_backward(cache.prob, dp));
  const std::size_t steps = cache.layers.back().steps.size();
  Tensor<S> dh({steps, b, d});
  std::copy_n(dlast.data(), b * d, dh.data() + (steps - 1) * b * d);
  for (std::size_t k = layers.size(); k-- > 0;) dh = layers[k].backward(dh, cache.layers[k]);
  return dh;
}

template <class S>
void TemporalPath<S>::init(std::mt19937_64& rng) {
  for (auto& l : layers) l.params.init(rng);
  head.init(rng);
}

template <class S>
void TemporalPath<S>::collect(nn::ParamList<S>& out) {
  for (auto& l : layers) l.params.collect(out);
  head.collect(out);
}

// ---------------------------------------------------------------------------
// Model

template <class S>
Tensor<S> frames_to_time_major(const Tensor<S>& x, std::size_t windows, std::size_t frames) {
  require(x.rank() == 2 && x.dim(0) == windows * frames, "frame-major tensor has shape " + nn::shape_string(x.shape()));
  const std::size_t d = x.dim(1);
  Tensor<S> out({frames, windows, d});
  for (std::size_t b = 0; b < windows; ++b) {
    for (std::size_t t = 0; t < frames; ++t) {
      std::copy_n(x.data() + (b * frames + t) * d, d, out.data() + (t * windows + b) * d);
    }
  }
  return out;
}

template <class S>
Tensor<S> time_major_to_frames(const Tensor<S>& x) {
  require(x.rank() == 3, "time-major tensor has shape " + nn::shape_string(x.shape()));
  const std::size_t frames = x.dim(0);
  const std::size_t windows = x.dim(1);
  const std::size_t d = x.dim(2);
  Tensor<S> out({windows * frames, d});
  for (std::size_t b = 0; b < windows; ++b) {
    for (std::size_t t = 0; t < frames; ++t) {
      std::copy_n(x.data() + (t * windows + b) * d, d, out.data() + (b * frames + t) * d);
    }
  }
  return out;
}

template <class S>
PowerFdModel<S>::PowerFdModel(const PowerFdConfig& config)
    : bus_path("bus", (config.validate(), config.m_b), PowerFdConfig::c_b),
      line_path("line", config.m_l, PowerFdConfig::c_l),
      spatial(config.m_b, config.m_l),
      config_(config) {}

template <class S>
void PowerFdModel<S>::init(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  bus_path.init(rng);
  line_path.init(rng);
  spatial.init(rng);
  temporal.init(rng);
  std::vector<ConvBlock<S>*> blocks;
  bus_path.collect_blocks(blocks);
  line_path.collect_blocks(blocks);
  spatial.collect_blocks(blocks);
  for (auto* b : blocks) {
    b->bn.gamma.value.fill(S{1});
    b->bn.beta.value.fill(S{0});
    b->bn.running_mean.fill(S{0});
    b->bn.running_var.fill(S{1});
  }
}

template <class S>
std::vector<S> PowerFdModel<S>::forward(const WindowBatch<S>& batch, Mode mode, Cache& cache, ShapeLedger* ledger) {
  const std::size_t frames = config_.frames();
  const std::size_t n = batch.bus.rank() == 4 ? batch.bus.dim(0) : 0;
  require(n > 0 && n % frames == 0, "batch of " + std::to_string(n) + " frames is not a whole number of " +
                                        std::to_string(frames) + "-frame windows");
  require(batch.line.rank() == 4 && batch.line.dim(0) == n, "bus and line blocks disagree on the frame count");
  const std::size_t windows = n / frames;
  cache.windows = windows;
  const auto b = bus_path.forward(batch.bus, mode, cache.bus, ledger);
  const auto l = line_path.forward(batch.line, mode, cache.line, ledger);
  const auto s = spatial.forward(b, l, mode, cache.spatial, ledger);
  return temporal.forward(frames_to_time_major(s, windows, frames), cache.temporal, ledger);
}

template <class S>
typename PowerFdModel<S>::InputGrad PowerFdModel<S>::backward(std::span<const S> dprob, const Cache& cache) {
  const auto ds = time_major_to_frames(temporal.backward(dprob, cache.temporal));
  auto [db, dl] = spatial.backward(ds, cache.spatial);
  return {bus_path.backward(db, cache.bus), line_path.backward(dl, cache.line)};
}

template <class S>
std::vector<S> PowerFdModel<S>::predict(const WindowBatch<S>& batch) {
  Cache cache;
  return forward(batch, Mode::Eval, cache);
}

template <class S>
nn::ParamList<S> PowerFdModel<S>::parameters() {
  nn::ParamList<S> out;
  bus_path.collect(out);
  line_path.collect(out);
  spatial.collect(out);
  temporal.collect(out);
  return out;
}

template <class S>
std::vector<std::pair<std::string, Tensor<S>*>> PowerFdModel<S>::buffers() {
  std::vector<ConvBlock<S>*> blocks;
  bus_path.collect_blocks(blocks);
  line_path.collect_blocks(blocks);
  spatial.collect_blocks(blocks);
  std::vector<std::pair<std::string, Tensor<S>*>> out;
  for (auto* b : blocks) {
    const std::string base = b->bn.gamma.name.substr(0, b->bn.gamma.name.size() - std::string(".gamma").size());
    out.emplace_back(base + ".running_mean", &b->bn.running_mean);
    out.emplace_back(base + ".running_var", &b->bn.running_var);
  }
  return out;
}

template <class S>
void PowerFdModel<S>::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

template <class S>
template <class U>
PowerFdModel<U> PowerFdModel<S>::cast() const {
  auto& self = const_cast<PowerFdModel<S>&>(*this);
  PowerFdModel<U> out(config_);
  const auto src = self.parameters();
  const auto dst = out.parameters();
  for (std::size_t k = 0; k < src.size(); ++k) dst[k]->value = src[k]->value.template cast<U>();
  const auto sb = self.buffers();
  const auto db = out.buffers();
  for (std::size_t k = 0; k < sb.size(); ++k) *db[k].second = sb[k].second->template cast<U>();
  return out;
}

// ---------------------------------------------------------------------------
// Inputs

Standardizer Standardizer::fit(const std::vector<const dataset::Frame*>& frames, std::size_t plan_size) {
  if (frames.empty()) throw DomainError("cannot fit a standardizer on zero frames");
  std::vector<double> mean(plan_size, 0.0);
  std::vector<double> var(plan_size, 0.0);
  for (const auto* f : frames) {
    if (f->values.size() != plan_size) throw ShapeError("frame length does not match the measurement plan");
    for (std::size_t i = 0; i < plan_size; ++i) mean[i] += f->values[i];
  }
  for (auto& m : mean) m /= static_cast<double>(frames.size());
  for (const auto* f : frames) {
    for (std::size_t i = 0; i < plan_size; ++i) var[i] += (f->values[i] - mean[i]) * (f->values[i] - mean[i]);
  }
  Standardizer s;
  s.mean.resize(plan_size);
  s.scale.resize(plan_size);
  for (std::size_t i = 0; i < plan_size; ++i) {
    const double sd = std::sqrt(var[i] / static_cast<double>(frames.size()));
    s.mean[i] = static_cast<float>(mean[i]);
    s.scale[i] = sd > 1e-6 ? static_cast<float>(sd) : 1.0f;
  }
  return s;
}

Standardizer Standardizer::identity(std::size_t plan_size) {
  return {std::vector<float>(plan_size, 0.0f), std::vector<float>(plan_size, 1.0f)};
}

WindowSource::WindowSource(const dataset::Dataset& data, std::vector<dataset::MeasurementWindow> windows,
                           std::size_t T, const Standardizer& standardizer)
    : data_(&data), windows_(std::move(windows)), T_(T), standardizer_(standardizer), layout_(data.plan) {
  if (standardizer_.mean.size() != layout_.plan_size() || standardizer_.scale.size() != layout_.plan_size()) {
    throw ShapeError("standardizer covers " + std::to_string(standardizer_.mean.size()) +
                     " cells, the plan has " + std::to_string(layout_.plan_size()));
  }
}

std::vector<std::uint8_t> WindowSource::labels() const {
  std::vector<std::uint8_t> out;
  out.reserve(windows_.size());
  for (const auto& w : windows_) out.push_back(w.label);
  return out;
}

template <class S>
void place_frame(std::span<const float> values, const grid::MeasurementLayout& layout,
                 const Standardizer& standardizer, S* bus, S* line) {
  const auto& slots = layout.slots();
  if (values.size() != slots.size()) {
    throw ShapeError("frame has " + std::to_string(values.size()) + " values, the plan has " +
                     std::to_string(slots.size()));
  }
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const S v = static_cast<S>((values[i] - standardizer.mean[i]) / standardizer.scale[i]);
    (slots[i].bus_block ? bus : line)[layout.cell(i)] = v;
  }
}

template <class S>
WindowBatch<S> window_batch(const std::vector<std::vector<float>>& frames, const grid::MeasurementLayout& layout,
                            const Standardizer& standardizer) {
  if (standardizer.mean.size() != layout.plan_size()) throw ShapeError("standardizer does not match the plan");
  const std::size_t n = frames.size();
  WindowBatch<S> b;
  b.bus = Tensor<S>({n, layout.monitored_buses(), 1, grid::kBusColumns});
  b.line = Tensor<S>({n, layout.monitored_lines(), 1, grid::kLineColumns});
  b.labels.push_back(S{0});
  for (std::size_t j = 0; j < n; ++j) {
    place_frame<S>(frames[j], layout, standardizer, b.bus.data() + j * layout.bus_cells(),
                   b.line.data() + j * layout.line_cells());
  }
  return b;
}

template <class S>
WindowBatch<S> WindowSource::batch(std::span<const std::size_t> indices, std::span<const std::uint8_t> labels) const {
  if (!labels.empty() && labels.size() != windows_.size()) {
    throw ShapeError("label override covers " + std::to_string(labels.size()) + " of " +
                     std::to_string(windows_.size()) + " windows");
  }
  const std::size_t frames = T_ + 1;
  const std::size_t n = indices.size() * frames;
  const std::size_t bus_cells = layout_.bus_cells();
  const std::size_t line_cells = layout_.line_cells();
  WindowBatch<S> b;
  b.bus = Tensor<S>({n, layout_.monitored_buses(), 1, grid::kBusColumns});
  b.line = Tensor<S>({n, layout_.monitored_lines(), 1, grid::kLineColumns});
  b.labels.reserve(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& w = windows_.at(indices[k]);
    b.labels.push_back(static_cast<S>(labels.empty() ? w.label : labels[indices[k]]));
    const auto fs = dataset::window_frames(*data_, w, T_);
    for (std::size_t j = 0; j < frames; ++j) {
      place_frame<S>(fs[j]->values, layout_, standardizer_, b.bus.data() + (k * frames + j) * bus_cells,
                     b.line.data() + (k * frames + j) * line_cells);
    }
  }
  return b;
}

std::vector<double> predict_all(PowerFdModel<float>& model, const WindowSource& source, std::size_t batch) {
  std::vector<double> out;
  out.reserve(source.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < source.size(); start += batch) {
    idx.resize(std::min(batch, source.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    for (float p : model.predict(source.batch<float>(idx))) out.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

std::string epoch_json(const EpochRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["train_loss"] = r.train_loss;
  j["val_loss"] = r.val_loss;
  j["val_f1"] = r.val_f1;
  j["val_tp"] = r.val_counts.tp;
  j["val_fp"] = r.val_counts.fp;
  j["val_fn"] = r.val_counts.fn;
  j["val_tn"] = r.val_counts.tn;
  j["lr"] = r.lr;
  return j.dump();
}

TrainReport train(PowerFdModel<float>& model, const WindowSource& train_set, const WindowSource& val_set,
                  const TrainOptions& options, const std::function<void(const EpochRecord&)>& on_epoch) {
  if (train_set.size() == 0 || val_set.size() == 0) throw DomainError("training needs non-empty train and val sets");
  if (options.batch == 0) throw DomainError("batch size must be positive");
  const std::vector<std::uint8_t> labels = options.train_labels.empty() ? train_set.labels() : options.train_labels;
  if (labels.size() != train_set.size()) throw ShapeError("train label override has the wrong length");
  const auto val_labels = val_set.labels();

  auto params = model.parameters();
  auto buffers = model.buffers();
  nn::Adam<float> adam;
  nn::PlateauScheduler scheduler(options.lr, options.patience, options.lr_factor, options.min_lr);
  std::vector<Tensor<float>> best;
  TrainReport report;

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    auto rng = make_rng(options.seed, 3, epoch);
    std::shuffle(order.begin(), order.end(), rng);
    const double lr = scheduler.lr();
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += options.batch) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(options.batch, order.size() - start));
      const auto batch = train_set.batch<float>(idx, labels);
      model.zero_grad();
      typename PowerFdModel<float>::Cache cache;
      const auto probs = model.forward(batch, Mode::Train, cache);
      const auto [loss, grad] = nn::bce_loss<float>(probs, batch.labels, options.reduction);
      if (!std::isfinite(loss)) {
        throw DivergedTrainingError("training loss became non-finite in epoch " + std::to_string(epoch));
      }
      model.backward(grad, cache);
      adam.step(params, lr);
      loss_sum += options.reduction == nn::Reduction::Mean ? loss * static_cast<double>(idx.size()) : loss;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    const auto probs = predict_all(model, val_set);
    std::vector<double> y(val_labels.begin(), val_labels.end());
    rec.val_loss = nn::bce_loss<double>(probs, y, nn::Reduction::Mean).first;
    rec.val_counts = eval::confusion(probs, val_labels, options.threshold);
    rec.val_f1 = eval::metrics(rec.val_counts).f1;
    scheduler.step(rec.val_loss);

    if (rec.val_f1 > report.best_val_f1) {
      report.best_val_f1 = rec.val_f1;
      report.best_epoch = epoch;
      best.clear();
      for (auto* p : params) best.push_back(p->value);
      for (auto& [name, t] : buffers) best.push_back(*t);
    }
    report.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  if (!best.empty()) {
    std::size_t k = 0;
    for (auto* p : params) p->value = best[k++];
    for (auto& [name, t] : buffers) *t = best[k++];
  }
  return report;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

template <class F>
void for_each_tensor(PowerFdModel<float>& model, F&& f) {
  for (auto* p : model.parameters()) f(p->name, p->value);
  for (auto& [name, t] : model.buffers()) f(name, *t);
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

std::uint64_t parameter_hash(PowerFdModel<float>& model) {
  std::uint64_t h = kFnvOffset;
  for_each_tensor(model, [&](const std::string& name, const Tensor<float>& t) {
    h = fnv1a64(name, h);
    h = fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(t.data()), t.size() * sizeof(float)), h);
  });
  return h;
}

std::vector<std::uint8_t> encode_checkpoint(Checkpoint& c) {
  const auto& cfg = c.model.config();
  nlohmann::ordered_json meta;
  meta["format"] = "powerfd-checkpoint";
  meta["config"] = {{"m_b", cfg.m_b}, {"m_l", cfg.m_l}, {"T", cfg.T}};
  meta["init_seed"] = c.init_seed;
  meta["dataset_hash"] = hex64(c.dataset_hash);
  meta["epoch"] = c.epoch;
  meta["parameter_hash"] = hex64(parameter_hash(c.model));
  const std::string text = meta.dump();

  ByteWriter w;
  w.put_bytes(kCheckpointMagic.data(), kCheckpointMagic.size());
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint64_t>(text.size());
  w.put_bytes(text.data(), text.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.standardizer.mean.size()));
  w.put_bytes(c.standardizer.mean.data(), c.standardizer.mean.size() * sizeof(float));
  w.put_bytes(c.standardizer.scale.data(), c.standardizer.scale.size() * sizeof(float));
  std::uint32_t count = 0;
  for_each_tensor(c.model, [&](const std::string&, const Tensor<float>&) { ++count; });
  w.put<std::uint32_t>(count);
  for_each_tensor(c.model, [&](const std::string& name, const Tensor<float>& t) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.put_bytes(name.data(), name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    w.put_bytes(t.data(), t.size() * sizeof(float));
  });
  w.put<std::uint64_t>(fnv1a64(w.bytes));
  return std::move(w.bytes);
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::optional<PowerFdConfig>& expected) {
  if (bytes.size() < kCheckpointMagic.size() + sizeof(std::uint32_t) + sizeof(std::uint64_t)) {
    throw ParseError("checkpoint file is truncated");
  }
  if (!std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin())) {
    throw ParseError("not a checkpoint file (bad magic)");
  }
  ByteReader r(bytes, "checkpoint file");
  std::array<char, 8> magic{};
  r.get_bytes(magic.data(), magic.size());
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw VersionMismatchError("checkpoint format version " + std::to_string(version) +
                               " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const std::span<const std::uint8_t> body(bytes.data(), bytes.size() - sizeof(std::uint64_t));
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + body.size(), sizeof stored);
  if (fnv1a64(body) != stored) throw ParseError("checkpoint checksum mismatch (truncated or corrupted file)");

  const auto meta_len = r.get<std::uint64_t>();
  if (meta_len > r.remaining()) throw ParseError("checkpoint file is truncated");
  std::string text(meta_len, '\0');
  r.get_bytes(text.data(), text.size());
  Checkpoint c;
  PowerFdConfig cfg;
  std::uint64_t param_hash = 0;
  try {
    const auto meta = nlohmann::json::parse(text);
    cfg.m_b = meta.at("config").at("m_b").get<std::size_t>();
    cfg.m_l = meta.at("config").at("m_l").get<std::size_t>();
    cfg.T = meta.at("config").at("T").get<std::size_t>();
    c.init_seed = meta.at("init_seed").get<std::uint64_t>();
    c.dataset_hash = std::stoull(meta.at("dataset_hash").get<std::string>(), nullptr, 16);
    c.epoch = meta.at("epoch").get<std::size_t>();
    param_hash = std::stoull(meta.at("parameter_hash").get<std::string>(), nullptr, 16);
  } catch (const std::exception& e) {
    throw ParseError(std::string("checkpoint metadata: ") + e.what());
  }
  if (expected && !(*expected == cfg)) {
    throw ConfigMismatchError("checkpoint was trained for m_b=" + std::to_string(cfg.m_b) +
                              ", m_l=" + std::to_string(cfg.m_l) + ", T=" + std::to_string(cfg.T) +
                              " but m_b=" + std::to_string(expected->m_b) + ", m_l=" + std::to_string(expected->m_l) +
                              ", T=" + std::to_string(expected->T) + " is required");
  }
  try {
    cfg.validate();
  } catch (const ShapeError& e) {
    throw ParseError(std::string("checkpoint config: ") + e.what());
  }

  const auto plan = r.get<std::uint32_t>();
  if (std::uint64_t{plan} * 2 * sizeof(float) > r.remaining()) throw ParseError("checkpoint file is truncated");
  c.standardizer.mean.resize(plan);
  c.standardizer.scale.resize(plan);
  r.get_bytes(c.standardizer.mean.data(), plan * sizeof(float));
  r.get_bytes(c.standardizer.scale.data(), plan * sizeof(float));

  c.model = PowerFdModel<float>(cfg);
  const auto count = r.get<std::uint32_t>();
  std::uint32_t seen = 0;
  for_each_tensor(c.model, [&](const std::string& name, Tensor<float>& t) {
    ++seen;
    if (seen > count) throw ParseError("checkpoint holds fewer tensors than the model");
    std::string stored_name(r.get<std::uint16_t>(), '\0');
    r.get_bytes(stored_name.data(), stored_name.size());
    Shape shape(r.get<std::uint8_t>());
    for (auto& d : shape) d = r.get<std::uint32_t>();
    if (stored_name != name || shape != t.shape()) {
      throw ParseError("checkpoint tensor " + stored_name + nn::shape_string(shape) + " does not match " + name +
                       nn::shape_string(t.shape()));
    }
    r.get_bytes(t.data(), t.size() * sizeof(float));
  });
  if (seen != count) throw ParseError("checkpoint holds more tensors than the model");
  if (r.remaining() != sizeof(std::uint64_t)) throw ParseError("checkpoint has trailing bytes");
  if (parameter_hash(c.model) != param_hash) throw ParseError("checkpoint parameter hash mismatch");
  return c;
}

void save_checkpoint(Checkpoint& checkpoint, const std::filesystem::path& path) {
  write_binary_file(path, encode_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const std::optional<PowerFdConfig>& expected) {
  return decode_checkpoint(read_binary_file(path), expected);
}

// ---------------------------------------------------------------------------

template struct ConvBlock<float>;
template struct ConvBlock<double>;
template class RepresentationPath<float>;
template class RepresentationPath<double>;
template class SpatialPath<float>;
template class SpatialPath<double>;
template class TemporalPath<float>;
template class TemporalPath<double>;
template class PowerFdModel<float>;
template class PowerFdModel<double>;
template PowerFdModel<double> PowerFdModel<float>::cast<double>() const;
template PowerFdModel<float> PowerFdModel<double>::cast<float>() const;
template PowerFdModel<float> PowerFdModel<float>::cast<float>() const;
template Tensor<float> frames_to_time_major(const Tensor<float>&, std::size_t, std::size_t);
template Tensor<double> frames_to_time_major(const Tensor<double>&, std::size_t, std::size_t);
template Tensor<float> time_major_to_frames(const Tensor<float>&);
template Tensor<double> time_major_to_frames(const Tensor<double>&);
template void place_frame(std::span<const float>, const grid::MeasurementLayout&, const Standardizer&, float*, float*);
template void place_frame(std::span<const float>, const grid::MeasurementLayout&, const Standardizer&, double*,
                          double*);
template WindowBatch<float> window_batch(const std::vector<std::vector<float>>&, const grid::MeasurementLayout&,
                                         const Standardizer&);
template WindowBatch<double> window_batch(const std::vector<std::vector<float>>&, const grid::MeasurementLayout&,
                                          const Standardizer&);
template WindowBatch<float> WindowSource::batch<float>(std::span<const std::size_t>, std::span<const std::uint8_t>) const;
template WindowBatch<double> WindowSource::batch<double>(std::span<const std::size_t>,
                                                         std::span<const std::uint8_t>) const;

}  // namespace powerfd::detector

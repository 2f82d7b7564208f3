#pragma once

#include <algorithm>
#include <cstddef>
#include <new>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

namespace powerfd::nn {

using Shape = std::vector<std::size_t>;

/// Allocator with a fixed 64-byte alignment. Vectorised reductions peel
/// iterations based on the address, so a fixed base alignment keeps their
/// rounding independent of where the heap places the buffer.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator&) { return true; }
};

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major tensor.
template <class S>
class Tensor {
 public:
  using value_type = S;

  Tensor() = default;
  explicit Tensor(Shape shape, S fill = S{0});
  Tensor(Shape shape, std::vector<S> data);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  std::span<S> span() { return data_; }
  std::span<const S> span() const { return data_; }
  std::vector<S> values() const { return {data_.begin(), data_.end()}; }

  S& operator[](std::size_t i) { return data_[i]; }
  S operator[](std::size_t i) const { return data_[i]; }

  /// Element of a rank-4 tensor.
  S& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  S at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  /// Same data, new shape. Throws ShapeError if the element count differs.
  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;
  void fill(S v);

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::copy(data_.begin(), data_.end(), out.data());
    return out;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<S, AlignedAllocator<S>> data_;
};

/// Trainable tensor with its gradient accumulator.
template <class S>
struct Param {
  std::string name;
  Tensor<S> value;
  Tensor<S> grad;

  Param() = default;
  Param(std::string n, Shape shape) : name(std::move(n)), value(shape), grad(std::move(shape)) {}
  void zero_grad() { grad.fill(S{0}); }
};

template <class S>
using ParamList = std::vector<Param<S>*>;

// ---------------------------------------------------------------------------
// Initialisation

/// U(-sqrt(6 / fan_in), +sqrt(6 / fan_in)).
template <class S>
void kaiming_uniform(Tensor<S>& t, std::size_t fan_in, std::mt19937_64& rng);
/// U(-bound, +bound).
template <class S>
void uniform_fill(Tensor<S>& t, double bound, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Convolution

struct ConvSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t groups = 1;
  std::size_t stride = 1;  // both spatial axes
  std::size_t pad_h = 0;
  std::size_t pad_w = 0;
  bool bias = true;

  /// Throws ShapeError on divisibility or stride violations.
  void validate() const;
  /// Throws ShapeError when the padded input is smaller than the kernel.
  std::size_t out_h(std::size_t h) const;
  std::size_t out_w(std::size_t w) const;
  Shape weight_shape() const { return {out_channels, in_channels / groups, kernel_h, kernel_w}; }
  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

/// Grouped cross-correlation of x [N, C_in, H, W]. Every output element is
/// the sum over (c, ky, kx) in lexicographic order, then plus its bias.
template <class S>
Tensor<S> conv2d_grouped(const Tensor<S>& x, const ConvSpec& spec, const Tensor<S>& weight, const Tensor<S>* bias);

/// Accumulates into dweight (and dbias when non-null); returns dx.
template <class S>
Tensor<S> conv2d_grouped_backward(const Tensor<S>& x, const ConvSpec& spec, const Tensor<S>& weight,
                                  const Tensor<S>& dy, Tensor<S>& dweight, Tensor<S>* dbias);

template <class S>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, ConvSpec spec);

  Tensor<S> forward(const Tensor<S>& x) const;
  Tensor<S> backward(const Tensor<S>& x, const Tensor<S>& dy);
  void init(std::mt19937_64& rng);
  void collect(ParamList<S>& out);

  ConvSpec spec;
  Param<S> weight;
  Param<S> bias;
};

// ---------------------------------------------------------------------------
// Batch normalisation over every axis except 1.

enum class Mode : std::uint8_t { Train, Eval };

template <class S>
class BatchNorm {
 public:
  struct Cache {
    Tensor<S> x_hat;
    std::vector<S> inv_std;
    Mode mode = Mode::Train;
  };

  BatchNorm() = default;
  BatchNorm(const std::string& name, std::size_t channels);

  /// Train mode normalises with batch statistics and updates the running
  /// estimates (momentum 0.1, unbiased variance); eval mode uses the running
  /// estimates.
  Tensor<S> forward(const Tensor<S>& x, Mode mode, Cache& cache);
  Tensor<S> backward(const Tensor<S>& dy, const Cache& cache);
  void collect(ParamList<S>& out);

  std::size_t channels = 0;
  double momentum = 0.1;
  double eps = 1e-5;
  Param<S> gamma;
  Param<S> beta;
  Tensor<S> running_mean;
  Tensor<S> running_var;
};

// ---------------------------------------------------------------------------
// Pointwise activations. Backward functions take the forward output.

template <class S>
Tensor<S> elu(const Tensor<S>& x);
template <class S>
Tensor<S> elu_backward(const Tensor<S>& y, const Tensor<S>& dy);
template <class S>
Tensor<S> sigmoid(const Tensor<S>& x);
template <class S>
Tensor<S> sigmoid_backward(const Tensor<S>& y, const Tensor<S>& dy);
template <class S>
Tensor<S> tanh(const Tensor<S>& x);
template <class S>
Tensor<S> tanh_backward(const Tensor<S>& y, const Tensor<S>& dy);

// ---------------------------------------------------------------------------
// Structural ops

/// Concatenation of rank-equal tensors along `axis`; other dims must agree.
template <class S>
Tensor<S> concat(const Tensor<S>& a, const Tensor<S>& b, std::size_t axis);
/// Inverse of concat: splits `t` along `axis` after `first` entries.
template <class S>
std::pair<Tensor<S>, Tensor<S>> split(const Tensor<S>& t, std::size_t axis, std::size_t first);

// ---------------------------------------------------------------------------
// Linear layer: x [N, d] W [d, k] + a [k].

template <class S>
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out);

  Tensor<S> forward(const Tensor<S>& x) const;
  Tensor<S> backward(const Tensor<S>& x, const Tensor<S>& dy);
  void init(std::mt19937_64& rng);
  void collect(ParamList<S>& out);

  Param<S> weight;
  Param<S> bias;
};

// ---------------------------------------------------------------------------
// LSTM. Gate blocks inside the 4h axis are ordered f, i, c, o.

enum class Gate : std::size_t { F = 0, I = 1, C = 2, O = 3 };

template <class S>
struct LstmParams {
  std::size_t input = 0;
  std::size_t hidden = 0;
  Param<S> wx;    // [d, 4h]
  Param<S> wh;    // [h, 4h]
  Param<S> bias;  // [4h]

  LstmParams() = default;
  LstmParams(const std::string& name, std::size_t d, std::size_t h);
  void init(std::mt19937_64& rng);
  void collect(ParamList<S>& out);
};

/// Post-activation gates and new state of one cell step.
template <class S>
struct LstmStep {
  Tensor<S> f, i, g, o;  // g is the candidate memory
  Tensor<S> c, tanh_c, h;
};

template <class S>
LstmStep<S> lstm_cell(const Tensor<S>& x, const Tensor<S>& h_prev, const Tensor<S>& c_prev,
                      const LstmParams<S>& p);

/// Accumulates parameter gradients. Returns (dx, dh_prev, dc_prev).
template <class S>
std::tuple<Tensor<S>, Tensor<S>, Tensor<S>> lstm_cell_backward(const Tensor<S>& x, const Tensor<S>& h_prev,
                                                               const Tensor<S>& c_prev, const LstmStep<S>& step,
                                                               const Tensor<S>& dh, const Tensor<S>& dc,
                                                               LstmParams<S>& p);

/// One LSTM layer over a time-major sequence [T, N, d] from zero state.
template <class S>
class LstmLayer {
 public:
  struct Cache {
    Tensor<S> x;
    std::vector<LstmStep<S>> steps;
  };

  LstmLayer() = default;
  LstmLayer(const std::string& name, std::size_t d, std::size_t h) : params(name, d, h) {}

  /// Returns hidden states [T, N, h].
  Tensor<S> forward(const Tensor<S>& x, Cache& cache) const;
  /// dh [T, N, h] is the gradient w.r.t. every returned hidden state.
  Tensor<S> backward(const Tensor<S>& dh, const Cache& cache);

  LstmParams<S> params;
};

// ---------------------------------------------------------------------------
// Loss

enum class Reduction : std::uint8_t { Mean, Sum };

inline constexpr double kBceClamp = 1e-7;

/// Binary cross entropy with predictions clamped to [1e-7, 1 - 1e-7].
/// Returns the loss and dloss/dp (zero where the clamp is active).
template <class S>
std::pair<double, std::vector<S>> bce_loss(std::span<const S> p, std::span<const S> y,
                                           Reduction reduction = Reduction::Mean);

// ---------------------------------------------------------------------------
// Optimisation

template <class S>
class Adam {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1(beta1), beta2(beta2), eps(eps) {}

  /// One bias-corrected update of every parameter from its grad.
  void step(const ParamList<S>& params, double lr);

  double beta1;
  double beta2;
  double eps;
  std::uint64_t t = 0;
  std::vector<Tensor<S>> m;
  std::vector<Tensor<S>> v;
};

/// Halves the learning rate when the metric has not improved by at least
/// `threshold` for `patience` consecutive epochs.
class PlateauScheduler {
 public:
  explicit PlateauScheduler(double lr, int patience = 5, double factor = 0.5, double min_lr = 1e-6,
                            double threshold = 1e-4)
      : lr_(lr), patience_(patience), factor_(factor), min_lr_(min_lr), threshold_(threshold) {}

  /// Feeds one epoch metric (lower is better) and returns the new rate.
  double step(double metric);
  double lr() const { return lr_; }
  double best() const { return best_; }
  int bad_epochs() const { return bad_; }

 private:
  double lr_;
  int patience_;
  double factor_;
  double min_lr_;
  double threshold_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_ = 0;
};

// ---------------------------------------------------------------------------
// Gradient checking

/// One differentiable variable: its storage and the analytic gradient.
struct GradProbe {
  std::string name;
  std::span<double> value;
  std::span<const double> analytic;
};

/// A sampled case. `loss` re-evaluates the scalar objective from the
/// current probe values; analytic gradients must already be filled in.
struct GradCase {
  std::function<double()> loss;
  std::vector<GradProbe> probes;
};

struct GradCheckReport {
  std::size_t cases = 0;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::vector<std::string> failures;

  bool passed() const { return failures.empty() && checked > 0; }
};

/// Denominator floor of the relative error. Central differences at step 1e-6
/// carry about eps * |loss| / step ~ 1e-10 absolute rounding noise, so
/// sub-unit gradients are compared in absolute terms.
inline constexpr double kGradCheckFloor = 1.0;

/// Relative error |a - n| / max(|a|, |n|, kGradCheckFloor) between analytic
/// and central differences (step `step`) at every element of every probe,
/// over `cases` sampled cases.
GradCheckReport grad_check(const std::function<GradCase(std::mt19937_64&)>& sampler, std::size_t cases,
                           double tolerance, std::uint64_t seed = 0, double step = 1e-6);

}  // namespace powerfd::nn

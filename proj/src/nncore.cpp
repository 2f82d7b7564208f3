#include "powerfd/nncore.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <Eigen/Dense>

#include "powerfd/error.hpp"

namespace powerfd::nn {

namespace {

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class S>
Eigen::Map<RowMat<S>> as_matrix(S* data, std::size_t rows, std::size_t cols) {
  return Eigen::Map<RowMat<S>>(data, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <class S>
Eigen::Map<const RowMat<S>> as_matrix(const S* data, std::size_t rows, std::size_t cols) {
  return Eigen::Map<const RowMat<S>>(data, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <class S>
Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>> as_row(const S* data, std::size_t n) {
  return Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(data, static_cast<Eigen::Index>(n));
}

template <class S>
void require_rank(const Tensor<S>& t, std::size_t rank, const char* op) {
  require(t.rank() == rank, std::string(op) + " expects rank " + std::to_string(rank) + ", got " +
                                shape_string(t.shape()));
}

// C[M, Q] += A[M, K] B[K, Q] with every C element accumulated over k in order.
template <class S>
void ordered_gemm(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t q) {
  for (std::size_t i = 0; i < m; ++i) {
    S* ci = c + i * q;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const S aik = a[i * k + kk];
      const S* bk = b + kk * q;
      for (std::size_t j = 0; j < q; ++j) ci[j] += aik * bk[j];
    }
  }
}

struct ConvGeometry {
  std::size_t n, c, h, w, ho, wo, groups, cig, cog, k, p, q;
};

ConvGeometry geometry(const Shape& x, const ConvSpec& spec) {
  ConvGeometry g{};
  g.n = x[0];
  g.c = x[1];
  g.h = x[2];
  g.w = x[3];
  g.ho = spec.out_h(g.h);
  g.wo = spec.out_w(g.w);
  g.groups = spec.groups;
  g.cig = spec.in_channels / spec.groups;
  g.cog = spec.out_channels / spec.groups;
  g.k = g.cig * spec.kernel_h * spec.kernel_w;
  g.p = g.ho * g.wo;
  g.q = g.n * g.p;
  return g;
}

// col[k, n * P + p] for one group; padding contributes zeros.
template <class S>
void im2col(const Tensor<S>& x, const ConvSpec& spec, const ConvGeometry& g, std::size_t group, std::vector<S>& col) {
  col.assign(g.k * g.q, S{0});
  for (std::size_t ci = 0; ci < g.cig; ++ci) {
    const std::size_t channel = group * g.cig + ci;
    for (std::size_t ky = 0; ky < spec.kernel_h; ++ky) {
      for (std::size_t kx = 0; kx < spec.kernel_w; ++kx) {
        S* row = col.data() + ((ci * spec.kernel_h + ky) * spec.kernel_w + kx) * g.q;
        for (std::size_t n = 0; n < g.n; ++n) {
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * spec.stride + ky) - static_cast<std::ptrdiff_t>(spec.pad_h);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const auto ix =
                  static_cast<std::ptrdiff_t>(ox * spec.stride + kx) - static_cast<std::ptrdiff_t>(spec.pad_w);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
              row[n * g.p + oy * g.wo + ox] =
                  x.at(n, channel, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
            }
          }
        }
      }
    }
  }
}

template <class S>
void col2im_add(const std::vector<S>& col, const ConvSpec& spec, const ConvGeometry& g, std::size_t group,
                Tensor<S>& dx) {
  for (std::size_t ci = 0; ci < g.cig; ++ci) {
    const std::size_t channel = group * g.cig + ci;
    for (std::size_t ky = 0; ky < spec.kernel_h; ++ky) {
      for (std::size_t kx = 0; kx < spec.kernel_w; ++kx) {
        const S* row = col.data() + ((ci * spec.kernel_h + ky) * spec.kernel_w + kx) * g.q;
        for (std::size_t n = 0; n < g.n; ++n) {
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * spec.stride + ky) - static_cast<std::ptrdiff_t>(spec.pad_h);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const auto ix =
                  static_cast<std::ptrdiff_t>(ox * spec.stride + kx) - static_cast<std::ptrdiff_t>(spec.pad_w);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
              dx.at(n, channel, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) +=
                  row[n * g.p + oy * g.wo + ox];
            }
          }
        }
      }
    }
  }
}

template <class S>
void check_conv_inputs(const Tensor<S>& x, const ConvSpec& spec, const Tensor<S>& weight) {
  spec.validate();
  require_rank(x, 4, "conv2d");
  require(x.dim(1) == spec.in_channels, "conv2d input has " + std::to_string(x.dim(1)) + " channels, spec expects " +
                                            std::to_string(spec.in_channels));
  require(weight.shape() == spec.weight_shape(), "conv2d weight shape " + shape_string(weight.shape()) +
                                                     " does not match " + shape_string(spec.weight_shape()));
}

template <class S>
S sigmoid_scalar(S x) {
  if (x >= S{0}) return S{1} / (S{1} + std::exp(-x));
  const S e = std::exp(x);
  return e / (S{1} + e);
}

// (outer, extent, inner) around `axis`.
std::tuple<std::size_t, std::size_t, std::size_t> axis_split(const Shape& s, std::size_t axis) {
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, s[axis], inner};
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

template <class S>
Tensor<S>::Tensor(Shape shape, S fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

template <class S>
Tensor<S>::Tensor(Shape shape, std::vector<S> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  require(data_.size() == shape_size(shape_), "tensor data length " + std::to_string(data_.size()) +
                                                  " does not match shape " + shape_string(shape_));
}

template <class S>
Tensor<S> Tensor<S>::reshaped(Shape shape) const& {
  Tensor copy = *this;
  return std::move(copy).reshaped(std::move(shape));
}

template <class S>
Tensor<S> Tensor<S>::reshaped(Shape shape) && {
  require(shape_size(shape) == data_.size(),
          "cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  Tensor out;
  out.shape_ = std::move(shape);
  out.data_ = std::move(data_);
  return out;
}

template <class S>
void Tensor<S>::fill(S v) {
  std::fill(data_.begin(), data_.end(), v);
}

template <class S>
void kaiming_uniform(Tensor<S>& t, std::size_t fan_in, std::mt19937_64& rng) {
  uniform_fill(t, std::sqrt(6.0 / static_cast<double>(fan_in)), rng);
}

template <class S>
void uniform_fill(Tensor<S>& t, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<S>(u(rng));
}

// ---------------------------------------------------------------------------
// Convolution

void ConvSpec::validate() const {
  require(in_channels >= 1 && out_channels >= 1, "conv channels must be positive");
  require(groups >= 1 && in_channels % groups == 0 && out_channels % groups == 0,
          "conv channels " + std::to_string(in_channels) + "->" + std::to_string(out_channels) +
              " are not divisible by groups " + std::to_string(groups));
  require(stride >= 1, "conv stride must be at least 1");
  require(kernel_h >= 1 && kernel_w >= 1, "conv kernel must be non-empty");
}

std::size_t ConvSpec::out_h(std::size_t h) const {
  require(h + 2 * pad_h >= kernel_h, "conv input height " + std::to_string(h) + " is smaller than the kernel");
  return (h + 2 * pad_h - kernel_h) / stride + 1;
}

std::size_t ConvSpec::out_w(std::size_t w) const {
  require(w + 2 * pad_w >= kernel_w, "conv input width " + std::to_string(w) + " is smaller than the kernel");
  return (w + 2 * pad_w - kernel_w) / stride + 1;
}

template <class S>
Tensor<S> conv2d_grouped(const Tensor<S>& x, const ConvSpec& spec, const Tensor<S>& weight, const Tensor<S>* bias) {
  check_conv_inputs(x, spec, weight);
  if (bias) require(bias->size() == spec.out_channels, "conv2d bias length does not match out_channels");
  const auto g = geometry(x.shape(), spec);
  Tensor<S> y({g.n, spec.out_channels, g.ho, g.wo});
  std::vector<S> col;
  std::vector<S> out(g.cog * g.q);
  for (std::size_t group = 0; group < g.groups; ++group) {
    im2col(x, spec, g, group, col);
    std::fill(out.begin(), out.end(), S{0});
    ordered_gemm(weight.data() + group * g.cog * g.k, col.data(), out.data(), g.cog, g.k, g.q);
    for (std::size_t co = 0; co < g.cog; ++co) {
      const std::size_t channel = group * g.cog + co;
      const S b = bias ? (*bias)[channel] : S{0};
      for (std::size_t n = 0; n < g.n; ++n) {
        S* dst = y.data() + (n * spec.out_channels + channel) * g.p;
        const S* src = out.data() + co * g.q + n * g.p;
        for (std::size_t p = 0; p < g.p; ++p) dst[p] = src[p] + b;
      }
    }
  }
  return y;
}

template <class S>
Tensor<S> conv2d_grouped_backward(const Tensor<S>& x, const ConvSpec& spec, const Tensor<S>& weight,
                                  const Tensor<S>& dy, Tensor<S>& dweight, Tensor<S>* dbias) {
  check_conv_inputs(x, spec, weight);
  const auto g = geometry(x.shape(), spec);
  require(dy.shape() == Shape({g.n, spec.out_channels, g.ho, g.wo}), "conv2d upstream gradient has shape " +
                                                                         shape_string(dy.shape()));
  require(dweight.shape() == weight.shape(), "conv2d weight gradient shape mismatch");
  Tensor<S> dx(x.shape());
  std::vector<S> col;
  std::vector<S> dcol(g.k * g.q);
  RowMat<S> dyg(static_cast<Eigen::Index>(g.cog), static_cast<Eigen::Index>(g.q));
  for (std::size_t group = 0; group < g.groups; ++group) {
    for (std::size_t co = 0; co < g.cog; ++co) {
      const std::size_t channel = group * g.cog + co;
      for (std::size_t n = 0; n < g.n; ++n) {
        const S* src = dy.data() + (n * spec.out_channels + channel) * g.p;
        for (std::size_t p = 0; p < g.p; ++p) dyg(static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(n * g.p + p)) = src[p];
      }
      if (dbias) (*dbias)[channel] += dyg.row(static_cast<Eigen::Index>(co)).sum();
    }
    im2col(x, spec, g, group, col);
    const auto colm = as_matrix<S>(col.data(), g.k, g.q);
    auto dw = as_matrix<S>(dweight.data() + group * g.cog * g.k, g.cog, g.k);
    dw.noalias() += dyg * colm.transpose();
    const auto w = as_matrix<S>(weight.data() + group * g.cog * g.k, g.cog, g.k);
    as_matrix<S>(dcol.data(), g.k, g.q).noalias() = w.transpose() * dyg;
    col2im_add(dcol, spec, g, group, dx);
  }
  return dx;
}

template <class S>
Conv2d<S>::Conv2d(const std::string& name, ConvSpec s)
    : spec((s.validate(), s)),
      weight(name + ".weight", s.weight_shape()),
      bias(name + ".bias", {s.bias ? s.out_channels : 0}) {}

template <class S>
Tensor<S> Conv2d<S>::forward(const Tensor<S>& x) const {
  return conv2d_grouped(x, spec, weight.value, spec.bias ? &bias.value : nullptr);
}

template <class S>
Tensor<S> Conv2d<S>::backward(const Tensor<S>& x, const Tensor<S>& dy) {
  return conv2d_grouped_backward(x, spec, weight.value, dy, weight.grad, spec.bias ? &bias.grad : nullptr);
}

template <class S>
void Conv2d<S>::init(std::mt19937_64& rng) {
  const std::size_t fan_in = spec.in_channels / spec.groups * spec.kernel_h * spec.kernel_w;
  kaiming_uniform(weight.value, fan_in, rng);
  if (spec.bias) uniform_fill(bias.value, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

template <class S>
void Conv2d<S>::collect(ParamList<S>& out) {
  out.push_back(&weight);
  if (spec.bias) out.push_back(&bias);
}

// ---------------------------------------------------------------------------
// Batch normalisation

template <class S>
BatchNorm<S>::BatchNorm(const std::string& name, std::size_t c)
    : channels(c),
      gamma(name + ".gamma", {c}),
      beta(name + ".beta", {c}),
      running_mean({c}, S{0}),
      running_var({c}, S{1}) {
  gamma.value.fill(S{1});
}

template <class S>
Tensor<S> BatchNorm<S>::forward(const Tensor<S>& x, Mode mode, Cache& cache) {
  require(x.rank() >= 2 && x.dim(1) == channels,
          "batch norm over " + std::to_string(channels) + " channels got " + shape_string(x.shape()));
  const auto [outer, c, inner] = axis_split(x.shape(), 1);
  const std::size_t count = outer * inner;
  cache.mode = mode;
  cache.x_hat = Tensor<S>(x.shape());
  cache.inv_std.assign(c, S{0});
  Tensor<S> y(x.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mean = 0.0;
    double var = 0.0;
    if (mode == Mode::Train) {
      for (std::size_t o = 0; o < outer; ++o) {
        const S* p = x.data() + (o * c + ch) * inner;
        for (std::size_t i = 0; i < inner; ++i) mean += p[i];
      }
      mean /= static_cast<double>(count);
      for (std::size_t o = 0; o < outer; ++o) {
        const S* p = x.data() + (o * c + ch) * inner;
        for (std::size_t i = 0; i < inner; ++i) var += (p[i] - mean) * (p[i] - mean);
      }
      var /= static_cast<double>(count);
      const double unbiased = count > 1 ? var * static_cast<double>(count) / static_cast<double>(count - 1) : var;
      running_mean[ch] = static_cast<S>((1.0 - momentum) * running_mean[ch] + momentum * mean);
      running_var[ch] = static_cast<S>((1.0 - momentum) * running_var[ch] + momentum * unbiased);
    } else {
      mean = running_mean[ch];
      var = running_var[ch];
    }
    const S inv = static_cast<S>(1.0 / std::sqrt(var + eps));
    const S m = static_cast<S>(mean);
    cache.inv_std[ch] = inv;
    const S gm = gamma.value[ch];
    const S bt = beta.value[ch];
    for (std::size_t o = 0; o < outer; ++o) {
      const std::size_t base = (o * c + ch) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        const S xh = (x[base + i] - m) * inv;
        cache.x_hat[base + i] = xh;
        y[base + i] = gm * xh + bt;
      }
    }
  }
  return y;
}

template <class S>
Tensor<S> BatchNorm<S>::backward(const Tensor<S>& dy, const Cache& cache) {
  require(dy.shape() == cache.x_hat.shape(), "batch norm upstream gradient shape mismatch");
  const auto [outer, c, inner] = axis_split(dy.shape(), 1);
  const auto count = static_cast<S>(outer * inner);
  Tensor<S> dx(dy.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    S sum_dy = 0;
    S sum_dy_xh = 0;
    for (std::size_t o = 0; o < outer; ++o) {
      const std::size_t base = (o * c + ch) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        sum_dy += dy[base + i];
        sum_dy_xh += dy[base + i] * cache.x_hat[base + i];
      }
    }
    gamma.grad[ch] += sum_dy_xh;
    beta.grad[ch] += sum_dy;
    const S gm = gamma.value[ch];
    const S inv = cache.inv_std[ch];
    for (std::size_t o = 0; o < outer; ++o) {
      const std::size_t base = (o * c + ch) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        if (cache.mode == Mode::Train) {
          dx[base + i] = gm * inv / count * (count * dy[base + i] - sum_dy - cache.x_hat[base + i] * sum_dy_xh);
        } else {
          dx[base + i] = gm * inv * dy[base + i];
        }
      }
    }
  }
  return dx;
}

template <class S>
void BatchNorm<S>::collect(ParamList<S>& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
}

// ---------------------------------------------------------------------------
// Activations

template <class S>
Tensor<S> elu(const Tensor<S>& x) {
  Tensor<S> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > S{0} ? x[i] : std::expm1(x[i]);
  return y;
}

template <class S>
Tensor<S> elu_backward(const Tensor<S>& y, const Tensor<S>& dy) {
  require(y.shape() == dy.shape(), "elu gradient shape mismatch");
  Tensor<S> dx(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) dx[i] = y[i] > S{0} ? dy[i] : dy[i] * (y[i] + S{1});
  return dx;
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  Tensor<S> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = sigmoid_scalar(x[i]);
  return y;
}

template <class S>
Tensor<S> sigmoid_backward(const Tensor<S>& y, const Tensor<S>& dy) {
  require(y.shape() == dy.shape(), "sigmoid gradient shape mismatch");
  Tensor<S> dx(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) dx[i] = dy[i] * y[i] * (S{1} - y[i]);
  return dx;
}

template <class S>
Tensor<S> tanh(const Tensor<S>& x) {
  Tensor<S> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::tanh(x[i]);
  return y;
}

template <class S>
Tensor<S> tanh_backward(const Tensor<S>& y, const Tensor<S>& dy) {
  require(y.shape() == dy.shape(), "tanh gradient shape mismatch");
  Tensor<S> dx(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) dx[i] = dy[i] * (S{1} - y[i] * y[i]);
  return dx;
}

// ---------------------------------------------------------------------------
// Structural ops

template <class S>
Tensor<S> concat(const Tensor<S>& a, const Tensor<S>& b, std::size_t axis) {
  require(a.rank() == b.rank() && axis < a.rank(), "concat rank mismatch");
  for (std::size_t i = 0; i < a.rank(); ++i) {
    require(i == axis || a.dim(i) == b.dim(i),
            "concat of " + shape_string(a.shape()) + " and " + shape_string(b.shape()) + " along axis " +
                std::to_string(axis));
  }
  Shape shape = a.shape();
  shape[axis] += b.dim(axis);
  Tensor<S> out(shape);
  const auto [outer, ea, inner] = axis_split(a.shape(), axis);
  const std::size_t la = ea * inner;
  const std::size_t lb = b.dim(axis) * inner;
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(a.data() + o * la, la, out.data() + o * (la + lb));
    std::copy_n(b.data() + o * lb, lb, out.data() + o * (la + lb) + la);
  }
  return out;
}

template <class S>
std::pair<Tensor<S>, Tensor<S>> split(const Tensor<S>& t, std::size_t axis, std::size_t first) {
  require(axis < t.rank() && first <= t.dim(axis), "split point outside the axis");
  Shape sa = t.shape();
  Shape sb = t.shape();
  sa[axis] = first;
  sb[axis] = t.dim(axis) - first;
  Tensor<S> a(sa);
  Tensor<S> b(sb);
  const auto [outer, e, inner] = axis_split(t.shape(), axis);
  const std::size_t la = first * inner;
  const std::size_t lb = (e - first) * inner;
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(t.data() + o * (la + lb), la, a.data() + o * la);
    std::copy_n(t.data() + o * (la + lb) + la, lb, b.data() + o * lb);
  }
  return {std::move(a), std::move(b)};
}

// ---------------------------------------------------------------------------
// Linear

template <class S>
Linear<S>::Linear(const std::string& name, std::size_t in, std::size_t out)
    : weight(name + ".weight", {in, out}), bias(name + ".bias", {out}) {}

template <class S>
Tensor<S> Linear<S>::forward(const Tensor<S>& x) const {
  require_rank(x, 2, "linear");
  const std::size_t d = weight.value.dim(0);
  const std::size_t k = weight.value.dim(1);
  require(x.dim(1) == d, "linear input width " + std::to_string(x.dim(1)) + " != " + std::to_string(d));
  Tensor<S> y({x.dim(0), k});
  auto ym = as_matrix<S>(y.data(), x.dim(0), k);
  ym.noalias() = as_matrix<S>(x.data(), x.dim(0), d) * as_matrix<S>(weight.value.data(), d, k);
  ym.rowwise() += as_row<S>(bias.value.data(), k);
  return y;
}

template <class S>
Tensor<S> Linear<S>::backward(const Tensor<S>& x, const Tensor<S>& dy) {
  const std::size_t n = x.dim(0);
  const std::size_t d = weight.value.dim(0);
  const std::size_t k = weight.value.dim(1);
  require(dy.shape() == Shape({n, k}), "linear upstream gradient shape mismatch");
  const auto dym = as_matrix<S>(dy.data(), n, k);
  as_matrix<S>(weight.grad.data(), d, k).noalias() += as_matrix<S>(x.data(), n, d).transpose() * dym;
  as_matrix<S>(bias.grad.data(), 1, k) += dym.colwise().sum();
  Tensor<S> dx({n, d});
  as_matrix<S>(dx.data(), n, d).noalias() = dym * as_matrix<S>(weight.value.data(), d, k).transpose();
  return dx;
}

template <class S>
void Linear<S>::init(std::mt19937_64& rng) {
  const std::size_t fan_in = weight.value.dim(0);
  kaiming_uniform(weight.value, fan_in, rng);
  uniform_fill(bias.value, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

template <class S>
void Linear<S>::collect(ParamList<S>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

// ---------------------------------------------------------------------------
// LSTM

template <class S>
LstmParams<S>::LstmParams(const std::string& name, std::size_t d, std::size_t h)
    : input(d), hidden(h), wx(name + ".wx", {d, 4 * h}), wh(name + ".wh", {h, 4 * h}), bias(name + ".bias", {4 * h}) {}

template <class S>
void LstmParams<S>::init(std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  uniform_fill(wx.value, bound, rng);
  uniform_fill(wh.value, bound, rng);
  uniform_fill(bias.value, bound, rng);
}

template <class S>
void LstmParams<S>::collect(ParamList<S>& out) {
  out.push_back(&wx);
  out.push_back(&wh);
  out.push_back(&bias);
}

namespace {

// Gates and state from pre-activations [N, 4h].
template <class S>
LstmStep<S> cell_from_preact(const RowMat<S>& pre, const Tensor<S>& c_prev, std::size_t h) {
  const std::size_t n = static_cast<std::size_t>(pre.rows());
  LstmStep<S> s;
  for (auto* t : {&s.f, &s.i, &s.g, &s.o, &s.c, &s.tanh_c, &s.h}) *t = Tensor<S>({n, h});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < h; ++j) {
      const auto row = static_cast<Eigen::Index>(r);
      const std::size_t k = r * h + j;
      s.f[k] = sigmoid_scalar(pre(row, static_cast<Eigen::Index>(j)));
      s.i[k] = sigmoid_scalar(pre(row, static_cast<Eigen::Index>(h + j)));
      s.g[k] = std::tanh(pre(row, static_cast<Eigen::Index>(2 * h + j)));
      s.o[k] = sigmoid_scalar(pre(row, static_cast<Eigen::Index>(3 * h + j)));
      s.c[k] = s.f[k] * c_prev[k] + s.i[k] * s.g[k];
      s.tanh_c[k] = std::tanh(s.c[k]);
      s.h[k] = s.o[k] * s.tanh_c[k];
    }
  }
  return s;
}

// Pre-activation gradient [N, 4h] and dc_prev from (dh, dc) at the cell output.
template <class S>
std::pair<RowMat<S>, Tensor<S>> cell_backward_preact(const LstmStep<S>& s, const Tensor<S>& c_prev,
                                                     const Tensor<S>& dh, const Tensor<S>* dc) {
  const std::size_t n = s.h.dim(0);
  const std::size_t h = s.h.dim(1);
  RowMat<S> dpre(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(4 * h));
  Tensor<S> dc_prev({n, h});
  for (std::size_t r = 0; r < n; ++r) {
    const auto row = static_cast<Eigen::Index>(r);
    for (std::size_t j = 0; j < h; ++j) {
      const std::size_t k = r * h + j;
      const S dct = (dc ? (*dc)[k] : S{0}) + dh[k] * s.o[k] * (S{1} - s.tanh_c[k] * s.tanh_c[k]);
      dpre(row, static_cast<Eigen::Index>(j)) = dct * c_prev[k] * s.f[k] * (S{1} - s.f[k]);
      dpre(row, static_cast<Eigen::Index>(h + j)) = dct * s.g[k] * s.i[k] * (S{1} - s.i[k]);
      dpre(row, static_cast<Eigen::Index>(2 * h + j)) = dct * s.i[k] * (S{1} - s.g[k] * s.g[k]);
      dpre(row, static_cast<Eigen::Index>(3 * h + j)) = dh[k] * s.tanh_c[k] * s.o[k] * (S{1} - s.o[k]);
      dc_prev[k] = dct * s.f[k];
    }
  }
  return {std::move(dpre), std::move(dc_prev)};
}

template <class S>
void check_lstm_shapes(const Tensor<S>& x, const Tensor<S>& h_prev, const Tensor<S>& c_prev, const LstmParams<S>& p) {
  require_rank(x, 2, "lstm_cell");
  const std::size_t n = x.dim(0);
  require(x.dim(1) == p.input, "lstm_cell input width " + std::to_string(x.dim(1)) + " != " + std::to_string(p.input));
  require(h_prev.shape() == Shape({n, p.hidden}) && c_prev.shape() == Shape({n, p.hidden}),
          "lstm_cell state shape mismatch");
}

}  // namespace

template <class S>
LstmStep<S> lstm_cell(const Tensor<S>& x, const Tensor<S>& h_prev, const Tensor<S>& c_prev, const LstmParams<S>& p) {
  check_lstm_shapes(x, h_prev, c_prev, p);
  const std::size_t n = x.dim(0);
  const std::size_t d = p.input;
  const std::size_t h = p.hidden;
  RowMat<S> pre = as_matrix<S>(x.data(), n, d) * as_matrix<S>(p.wx.value.data(), d, 4 * h);
  pre.noalias() += as_matrix<S>(h_prev.data(), n, h) * as_matrix<S>(p.wh.value.data(), h, 4 * h);
  pre.rowwise() += as_row<S>(p.bias.value.data(), 4 * h);
  return cell_from_preact(pre, c_prev, h);
}

template <class S>
std::tuple<Tensor<S>, Tensor<S>, Tensor<S>> lstm_cell_backward(const Tensor<S>& x, const Tensor<S>& h_prev,
                                                               const Tensor<S>& c_prev, const LstmStep<S>& step,
                                                               const Tensor<S>& dh, const Tensor<S>& dc,
                                                               LstmParams<S>& p) {
  check_lstm_shapes(x, h_prev, c_prev, p);
  const std::size_t n = x.dim(0);
  const std::size_t d = p.input;
  const std::size_t h = p.hidden;
  require(dh.shape() == Shape({n, h}) && dc.shape() == Shape({n, h}), "lstm_cell upstream gradient shape mismatch");
  auto [dpre, dc_prev] = cell_backward_preact(step, c_prev, dh, &dc);
  as_matrix<S>(p.wx.grad.data(), d, 4 * h).noalias() += as_matrix<S>(x.data(), n, d).transpose() * dpre;
  as_matrix<S>(p.wh.grad.data(), h, 4 * h).noalias() += as_matrix<S>(h_prev.data(), n, h).transpose() * dpre;
  as_matrix<S>(p.bias.grad.data(), 1, 4 * h) += dpre.colwise().sum();
  Tensor<S> dx({n, d});
  Tensor<S> dh_prev({n, h});
  as_matrix<S>(dx.data(), n, d).noalias() = dpre * as_matrix<S>(p.wx.value.data(), d, 4 * h).transpose();
  as_matrix<S>(dh_prev.data(), n, h).noalias() = dpre * as_matrix<S>(p.wh.value.data(), h, 4 * h).transpose();
  return {std::move(dx), std::move(dh_prev), std::move(dc_prev)};
}

template <class S>
Tensor<S> LstmLayer<S>::forward(const Tensor<S>& x, Cache& cache) const {
  require_rank(x, 3, "lstm layer");
  const std::size_t steps = x.dim(0);
  const std::size_t n = x.dim(1);
  const std::size_t d = params.input;
  const std::size_t h = params.hidden;
  require(x.dim(2) == d, "lstm layer input width " + std::to_string(x.dim(2)) + " != " + std::to_string(d));
  cache.x = x;
  cache.steps.clear();
  cache.steps.reserve(steps);

  RowMat<S> xw = as_matrix<S>(x.data(), steps * n, d) * as_matrix<S>(params.wx.value.data(), d, 4 * h);
  xw.rowwise() += as_row<S>(params.bias.value.data(), 4 * h);
  const auto wh = as_matrix<S>(params.wh.value.data(), h, 4 * h);

  Tensor<S> out({steps, n, h});
  Tensor<S> h_prev({n, h});
  Tensor<S> c_prev({n, h});
  for (std::size_t t = 0; t < steps; ++t) {
    RowMat<S> pre = xw.middleRows(static_cast<Eigen::Index>(t * n), static_cast<Eigen::Index>(n));
    pre.noalias() += as_matrix<S>(h_prev.data(), n, h) * wh;
    auto s = cell_from_preact(pre, c_prev, h);
    std::copy_n(s.h.data(), n * h, out.data() + t * n * h);
    h_prev = s.h;
    c_prev = s.c;
    cache.steps.push_back(std::move(s));
  }
  return out;
}

template <class S>
Tensor<S> LstmLayer<S>::backward(const Tensor<S>& dh, const Cache& cache) {
  const std::size_t steps = cache.steps.size();
  const std::size_t n = cache.x.dim(1);
  const std::size_t d = params.input;
  const std::size_t h = params.hidden;
  require(dh.shape() == Shape({steps, n, h}), "lstm layer upstream gradient shape mismatch");
  const auto wh = as_matrix<S>(params.wh.value.data(), h, 4 * h);
  auto dwh = as_matrix<S>(params.wh.grad.data(), h, 4 * h);

  RowMat<S> dpre_all(static_cast<Eigen::Index>(steps * n), static_cast<Eigen::Index>(4 * h));
  Tensor<S> dh_next({n, h});
  Tensor<S> dc_next({n, h});
  const Tensor<S> zero({n, h});
  for (std::size_t t = steps; t-- > 0;) {
    Tensor<S> dh_t({n, h});
    for (std::size_t k = 0; k < n * h; ++k) dh_t[k] = dh[t * n * h + k] + dh_next[k];
    const Tensor<S>& c_prev = t > 0 ? cache.steps[t - 1].c : zero;
    auto [dpre, dc_prev] = cell_backward_preact(cache.steps[t], c_prev, dh_t, &dc_next);
    if (t > 0) {
      dwh.noalias() += as_matrix<S>(cache.steps[t - 1].h.data(), n, h).transpose() * dpre;
      as_matrix<S>(dh_next.data(), n, h).noalias() = dpre * wh.transpose();
    }
    dc_next = std::move(dc_prev);
    dpre_all.middleRows(static_cast<Eigen::Index>(t * n), static_cast<Eigen::Index>(n)) = dpre;
  }
  as_matrix<S>(params.wx.grad.data(), d, 4 * h).noalias() +=
      as_matrix<S>(cache.x.data(), steps * n, d).transpose() * dpre_all;
  as_matrix<S>(params.bias.grad.data(), 1, 4 * h) += dpre_all.colwise().sum();
  Tensor<S> dx({steps, n, d});
  as_matrix<S>(dx.data(), steps * n, d).noalias() =
      dpre_all * as_matrix<S>(params.wx.value.data(), d, 4 * h).transpose();
  return dx;
}

// ---------------------------------------------------------------------------
// Loss

template <class S>
std::pair<double, std::vector<S>> bce_loss(std::span<const S> p, std::span<const S> y, Reduction reduction) {
  if (p.size() != y.size()) throw ShapeError("bce_loss: predictions and labels differ in length");
  const double scale = reduction == Reduction::Mean && !p.empty() ? 1.0 / static_cast<double>(p.size()) : 1.0;
  double loss = 0.0;
  std::vector<S> grad(p.size());
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double raw = p[k];
    const double q = std::clamp(raw, kBceClamp, 1.0 - kBceClamp);
    const double t = y[k];
    loss -= t * std::log(q) + (1.0 - t) * std::log(1.0 - q);
    const bool clamped = raw < kBceClamp || raw > 1.0 - kBceClamp;
    grad[k] = clamped ? S{0} : static_cast<S>(scale * (-(t / q) + (1.0 - t) / (1.0 - q)));
  }
  return {loss * scale, std::move(grad)};
}

// ---------------------------------------------------------------------------
// Optimisation

template <class S>
void Adam<S>::step(const ParamList<S>& params, double lr) {
  if (m.empty()) {
    for (const auto* p : params) {
      m.emplace_back(p->value.shape());
      v.emplace_back(p->value.shape());
    }
  }
  if (m.size() != params.size()) throw ShapeError("Adam state does not match the parameter list");
  ++t;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  const auto b1 = static_cast<S>(beta1);
  const auto b2 = static_cast<S>(beta2);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    if (m[k].shape() != p.value.shape()) throw ShapeError("Adam state shape mismatch for " + p.name);
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const S g = p.grad[i];
      m[k][i] = b1 * m[k][i] + (S{1} - b1) * g;
      v[k][i] = b2 * v[k][i] + (S{1} - b2) * g * g;
      const double mh = m[k][i] / c1;
      const double vh = v[k][i] / c2;
      p.value[i] -= static_cast<S>(lr * mh / (std::sqrt(vh) + eps));
    }
  }
}

double PlateauScheduler::step(double metric) {
  if (metric < best_ - threshold_) {
    best_ = metric;
    bad_ = 0;
  } else {
    ++bad_;
  }
  if (bad_ >= patience_) {
    lr_ = std::max(lr_ * factor_, min_lr_);
    bad_ = 0;
  }
  return lr_;
}

// ---------------------------------------------------------------------------
// Gradient checking

GradCheckReport grad_check(const std::function<GradCase(std::mt19937_64&)>& sampler, std::size_t cases,
                           double tolerance, std::uint64_t seed, double step) {
  GradCheckReport report;
  report.tolerance = tolerance;
  std::mt19937_64 rng(seed);
  for (std::size_t c = 0; c < cases; ++c) {
    GradCase gc = sampler(rng);
    ++report.cases;
    for (auto& probe : gc.probes) {
      if (probe.value.size() != probe.analytic.size()) {
        report.failures.push_back("probe " + probe.name + ": value and gradient lengths differ");
        continue;
      }
      for (std::size_t j = 0; j < probe.value.size(); ++j) {
        const double orig = probe.value[j];
        // Divide by the representable step actually taken.
        probe.value[j] = orig + step;
        const double up = probe.value[j] - orig;
        const double lp = gc.loss();
        probe.value[j] = orig - step;
        const double down = orig - probe.value[j];
        const double lm = gc.loss();
        probe.value[j] = orig;
        const double numeric = (lp - lm) / (up + down);
        const double analytic = probe.analytic[j];
        const double rel =
            std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kGradCheckFloor});
        ++report.checked;
        report.max_rel_error = std::max(report.max_rel_error, rel);
        if (!(rel <= tolerance)) {
          std::ostringstream os;
          os << "case " << c << " " << probe.name << "[" << j << "]: analytic " << analytic << " numeric " << numeric
             << " rel " << rel;
          report.failures.push_back(os.str());
        }
      }
    }
  }
  return report;
}

// ---------------------------------------------------------------------------

#define POWERFD_NN_INSTANTIATE(S)                                                                                  \
  template class Tensor<S>;                                                                                        \
  template void kaiming_uniform<S>(Tensor<S>&, std::size_t, std::mt19937_64&);                                     \
  template void uniform_fill<S>(Tensor<S>&, double, std::mt19937_64&);                                             \
  template Tensor<S> conv2d_grouped<S>(const Tensor<S>&, const ConvSpec&, const Tensor<S>&, const Tensor<S>*);     \
  template Tensor<S> conv2d_grouped_backward<S>(const Tensor<S>&, const ConvSpec&, const Tensor<S>&,               \
                                                const Tensor<S>&, Tensor<S>&, Tensor<S>*);                         \
  template class Conv2d<S>;                                                                                        \
  template class BatchNorm<S>;                                                                                     \
  template Tensor<S> elu<S>(const Tensor<S>&);                                                                     \
  template Tensor<S> elu_backward<S>(const Tensor<S>&, const Tensor<S>&);                                          \
  template Tensor<S> sigmoid<S>(const Tensor<S>&);                                                                 \
  template Tensor<S> sigmoid_backward<S>(const Tensor<S>&, const Tensor<S>&);                                      \
  template Tensor<S> tanh<S>(const Tensor<S>&);                                                                    \
  template Tensor<S> tanh_backward<S>(const Tensor<S>&, const Tensor<S>&);                                         \
  template Tensor<S> concat<S>(const Tensor<S>&, const Tensor<S>&, std::size_t);                                   \
  template std::pair<Tensor<S>, Tensor<S>> split<S>(const Tensor<S>&, std::size_t, std::size_t);                   \
  template class Linear<S>;                                                                                        \
  template struct LstmParams<S>;                                                                                   \
  template LstmStep<S> lstm_cell<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, const LstmParams<S>&);   \
  template std::tuple<Tensor<S>, Tensor<S>, Tensor<S>> lstm_cell_backward<S>(                                      \
      const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, const LstmStep<S>&, const Tensor<S>&, const Tensor<S>&, \
      LstmParams<S>&);                                                                                             \
  template class LstmLayer<S>;                                                                                     \
  template std::pair<double, std::vector<S>> bce_loss<S>(std::span<const S>, std::span<const S>, Reduction);       \
  template class Adam<S>;

POWERFD_NN_INSTANTIATE(float)
POWERFD_NN_INSTANTIATE(double)

#undef POWERFD_NN_INSTANTIATE

}  // namespace powerfd::nn

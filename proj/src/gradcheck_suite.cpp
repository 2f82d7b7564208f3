#include <memory>
#include <random>

#include "powerfd/detector.hpp"
#include "powerfd/evalcli.hpp"
#include "powerfd/nncore.hpp"

namespace powerfd::eval {

namespace {

using nn::GradCase;
using nn::GradProbe;
using nn::Mode;
using nn::Tensor;

Tensor<double> random_tensor(nn::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

GradProbe probe(std::string name, Tensor<double>& value, const Tensor<double>& grad) {
  return {std::move(name), value.span(), grad.span()};
}

// Every sampler projects the layer output on a random direction r so the
// scalar loss exercises all outputs.

GradCase conv_case(std::mt19937_64& rng) {
  struct St {
    nn::Conv2d<double> layer;
    Tensor<double> x, r, dx;
  };
  auto st = std::make_shared<St>();
  // Grouped, strided and padded, like the representation convs.
  st->layer = nn::Conv2d<double>(
      "conv", {.in_channels = 4, .out_channels = 6, .kernel_h = 2, .kernel_w = 3, .groups = 2, .stride = 2,
               .pad_h = 0, .pad_w = 1});
  st->layer.init(rng);
  st->x = random_tensor({2, 4, 3, 6}, rng);
  st->r = random_tensor({2, 6, st->layer.spec.out_h(3), st->layer.spec.out_w(6)}, rng);
  st->dx = st->layer.backward(st->x, st->r);
  return {[st] { return dot(st->layer.forward(st->x), st->r); },
          {probe("x", st->x, st->dx), probe("weight", st->layer.weight.value, st->layer.weight.grad),
           probe("bias", st->layer.bias.value, st->layer.bias.grad)}};
}

GradCase bn_case(std::mt19937_64& rng, Mode mode) {
  struct St {
    nn::BatchNorm<double> bn;
    Tensor<double> x, r, dx;
    Mode mode;
  };
  auto st = std::make_shared<St>();
  st->bn = nn::BatchNorm<double>("bn", 3);
  st->mode = mode;
  st->bn.gamma.value = random_tensor({3}, rng, 0.5, 1.5);
  st->bn.beta.value = random_tensor({3}, rng);
  st->bn.running_mean = random_tensor({3}, rng);
  st->bn.running_var = random_tensor({3}, rng, 0.5, 2.0);
  st->x = random_tensor({4, 3, 2, 3}, rng, -2.0, 2.0);
  st->r = random_tensor({4, 3, 2, 3}, rng);
  typename nn::BatchNorm<double>::Cache cache;
  st->bn.forward(st->x, mode, cache);
  st->dx = st->bn.backward(st->r, cache);
  return {[st] {
            typename nn::BatchNorm<double>::Cache c;
            return dot(st->bn.forward(st->x, st->mode, c), st->r);
          },
          {probe("x", st->x, st->dx), probe("gamma", st->bn.gamma.value, st->bn.gamma.grad),
           probe("beta", st->bn.beta.value, st->bn.beta.grad)}};
}

template <Tensor<double> (*F)(const Tensor<double>&), Tensor<double> (*B)(const Tensor<double>&, const Tensor<double>&)>
GradCase pointwise_case(std::mt19937_64& rng) {
  struct St {
    Tensor<double> x, r, dx;
  };
  auto st = std::make_shared<St>();
  st->x = random_tensor({3, 7}, rng, -3.0, 3.0);
  st->r = random_tensor({3, 7}, rng);
  st->dx = B(F(st->x), st->r);
  return {[st] { return dot(F(st->x), st->r); }, {probe("x", st->x, st->dx)}};
}

GradCase lstm_case(std::mt19937_64& rng) {
  struct St {
    nn::LstmParams<double> p;
    Tensor<double> x, h0, c0, rh, rc, dx, dh0, dc0;
  };
  auto st = std::make_shared<St>();
  st->p = nn::LstmParams<double>("cell", 3, 4);
  st->p.init(rng);
  st->x = random_tensor({2, 3}, rng);
  st->h0 = random_tensor({2, 4}, rng);
  st->c0 = random_tensor({2, 4}, rng);
  st->rh = random_tensor({2, 4}, rng);
  st->rc = random_tensor({2, 4}, rng);
  const auto s = nn::lstm_cell(st->x, st->h0, st->c0, st->p);
  std::tie(st->dx, st->dh0, st->dc0) = nn::lstm_cell_backward(st->x, st->h0, st->c0, s, st->rh, st->rc, st->p);
  return {[st] {
            const auto s2 = nn::lstm_cell(st->x, st->h0, st->c0, st->p);
            return dot(s2.h, st->rh) + dot(s2.c, st->rc);
          },
          {probe("x", st->x, st->dx), probe("h_prev", st->h0, st->dh0), probe("c_prev", st->c0, st->dc0),
           probe("wx", st->p.wx.value, st->p.wx.grad), probe("wh", st->p.wh.value, st->p.wh.grad),
           probe("bias", st->p.bias.value, st->p.bias.grad)}};
}

GradCase linear_case(std::mt19937_64& rng) {
  struct St {
    nn::Linear<double> layer;
    Tensor<double> x, r, dx;
  };
  auto st = std::make_shared<St>();
  st->layer = nn::Linear<double>("linear", 5, 3);
  st->layer.init(rng);
  st->x = random_tensor({4, 5}, rng);
  st->r = random_tensor({4, 3}, rng);
  st->dx = st->layer.backward(st->x, st->r);
  return {[st] { return dot(st->layer.forward(st->x), st->r); },
          {probe("x", st->x, st->dx), probe("weight", st->layer.weight.value, st->layer.weight.grad),
           probe("bias", st->layer.bias.value, st->layer.bias.grad)}};
}

GradCase bce_case(std::mt19937_64& rng) {
  struct St {
    Tensor<double> p, y, dp;
  };
  auto st = std::make_shared<St>();
  st->p = random_tensor({6}, rng, 0.05, 0.95);
  st->y = Tensor<double>({6});
  for (std::size_t i = 0; i < 6; ++i) st->y[i] = static_cast<double>(rng() % 2);
  st->dp = Tensor<double>({6}, nn::bce_loss<double>(st->p.span(), st->y.span()).second);
  return {[st] { return nn::bce_loss<double>(st->p.span(), st->y.span()).first; }, {probe("p", st->p, st->dp)}};
}

// Tiny full model in train mode; one random element per parameter tensor
// plus a few input elements.
GradCase model_case(std::mt19937_64& rng) {
  const detector::PowerFdConfig cfg{3, 4, 2};
  struct St {
    detector::PowerFdModel<double> model;
    detector::WindowBatch<double> batch;
    typename detector::PowerFdModel<double>::InputGrad g;
    double loss() {
      typename detector::PowerFdModel<double>::Cache cache;
      return nn::bce_loss<double>(model.forward(batch, Mode::Train, cache), batch.labels).first;
    }
  };
  auto st = std::make_shared<St>();
  st->model = detector::PowerFdModel<double>(cfg);
  st->model.init(rng());
  const std::size_t n = 2 * cfg.frames();
  st->batch.bus = random_tensor({n, cfg.m_b, 1, detector::PowerFdConfig::c_b}, rng);
  st->batch.line = random_tensor({n, cfg.m_l, 1, detector::PowerFdConfig::c_l}, rng);
  st->batch.labels = {0.0, 1.0};
  st->model.zero_grad();
  typename detector::PowerFdModel<double>::Cache cache;
  const auto p = st->model.forward(st->batch, Mode::Train, cache);
  st->g = st->model.backward(nn::bce_loss<double>(p, st->batch.labels).second, cache);

  GradCase gc{[st] { return st->loss(); }, {}};
  auto pick = [&](const std::string& name, Tensor<double>& v, const Tensor<double>& g) {
    const std::size_t i = rng() % v.size();
    gc.probes.push_back({name + "[" + std::to_string(i) + "]", std::span(v.data() + i, 1), std::span(g.data() + i, 1)});
  };
  for (auto* prm : st->model.parameters()) pick(prm->name, prm->value, prm->grad);
  for (int k = 0; k < 3; ++k) {
    pick("bus", st->batch.bus, st->g.bus);
    pick("line", st->batch.line, st->g.line);
  }
  return gc;
}

}  // namespace

std::vector<std::pair<std::string, nn::GradCheckReport>> gradcheck_suite(std::uint64_t seed, std::size_t cases) {
  constexpr double kLayerTolerance = 1e-5;
  constexpr double kModelTolerance = 1e-4;
  std::vector<std::pair<std::string, nn::GradCheckReport>> out;
  auto run = [&](std::string name, auto sampler, double tol, std::uint64_t stream) {
    out.emplace_back(std::move(name), nn::grad_check(sampler, cases, tol, seed * 1000 + stream));
  };
  run("grouped_conv", conv_case, kLayerTolerance, 1);
  run("batch_norm_train", [](std::mt19937_64& r) { return bn_case(r, Mode::Train); }, kLayerTolerance, 2);
  run("batch_norm_eval", [](std::mt19937_64& r) { return bn_case(r, Mode::Eval); }, kLayerTolerance, 3);
  run("elu", pointwise_case<nn::elu<double>, nn::elu_backward<double>>, kLayerTolerance, 4);
  run("sigmoid", pointwise_case<nn::sigmoid<double>, nn::sigmoid_backward<double>>, kLayerTolerance, 5);
  run("tanh", pointwise_case<nn::tanh<double>, nn::tanh_backward<double>>, kLayerTolerance, 6);
  run("lstm_cell", lstm_case, kLayerTolerance, 7);
  run("linear", linear_case, kLayerTolerance, 8);
  run("bce", bce_case, kLayerTolerance, 9);
  run("powerfdnet_tiny", model_case, kModelTolerance, 10);
  return out;
}

}  // namespace powerfd::eval

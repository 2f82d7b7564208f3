#include <doctest.h>

#include <cmath>
#include <memory>
#include <numeric>
#include <random>

#include "fixtures.hpp"
#include "gradcheck_util.hpp"
#include "powerfd/dataset.hpp"
#include "powerfd/detector.hpp"
#include "powerfd/error.hpp"

using namespace powerfd;
using namespace powerfd::detector;
using gradcheck::random_tensor;

namespace {

template <class S>
WindowBatch<S> random_batch(const PowerFdConfig& cfg, std::size_t windows, std::mt19937_64& rng) {
  const std::size_t n = windows * cfg.frames();
  WindowBatch<S> b;
  b.bus = random_tensor({n, cfg.m_b, 1, PowerFdConfig::c_b}, rng).template cast<S>();
  b.line = random_tensor({n, cfg.m_l, 1, PowerFdConfig::c_l}, rng).template cast<S>();
  for (std::size_t k = 0; k < windows; ++k) b.labels.push_back(static_cast<S>(rng() % 2));
  return b;
}

// Running statistics away from the defaults so eval mode is not an identity.
template <class S>
void randomize_buffers(PowerFdModel<S>& model, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> mean(-0.3, 0.3);
  std::uniform_real_distribution<double> var(0.5, 2.0);
  for (auto& [name, t] : model.buffers()) {
    const bool is_var = name.ends_with("running_var");
    for (std::size_t i = 0; i < t->size(); ++i) (*t)[i] = static_cast<S>(is_var ? var(rng) : mean(rng));
  }
}

const dataset::Dataset& smoke_dataset() {
  static const dataset::Dataset d = [] {
    dataset::GenerationConfig cfg;
    cfg.seed = 91;
    cfg.window = 3;
    return dataset::generate_dataset(fixtures::ieee14(), dataset::synth_profiles(fixtures::ieee14(), 1, 8), cfg);
  }();
  return d;
}

// 25 clean and 25 attacked windows with T = 3.
std::vector<dataset::MeasurementWindow> smoke_windows() {
  const auto all = dataset::window(smoke_dataset(), 3);
  std::vector<dataset::MeasurementWindow> out;
  std::size_t clean = 0, attacked = 0;
  for (const auto& w : all) {
    if (w.label == 0 && clean < 25) out.push_back(w), ++clean;
    if (w.label == 1 && attacked < 25 && w.end_step % 4 == 0) out.push_back(w), ++attacked;
  }
  return out;
}

}  // namespace

TEST_CASE("shape ledger") {
  for (const auto& cfg : {PowerFdConfig{3, 4, 2}, PowerFdConfig{16, 24, 7}}) {
    CAPTURE(cfg.m_b);
    std::mt19937_64 rng(1);
    PowerFdModel<float> model(cfg);
    model.init(5);
    const std::size_t windows = 2;
    const std::size_t n = windows * cfg.frames();
    const auto batch = random_batch<float>(cfg, windows, rng);
    ShapeLedger ledger;
    typename PowerFdModel<float>::Cache cache;
    const auto p = model.forward(batch, Mode::Train, cache, &ledger);

    const std::size_t mb = cfg.m_b, ml = cfg.m_l, h = cfg.m_b + cfg.m_l, f = cfg.frames();
    const std::vector<std::pair<std::string, Shape>> expected{
        {"bus.input", {n, mb, 1, 3}},          {"bus.conv1", {n, mb, 1, 3}},
        {"bus.stack1", {n, mb, 2, 3}},         {"bus.conv2", {n, mb, 1, 3}},
        {"bus.stack2", {n, mb, 2, 3}},         {"bus.conv3", {n, 12 * mb, 1, 1}},
        {"bus.reshape3", {n, mb, 1, 12}},      {"bus.conv4", {n, mb, 1, 6}},
        {"bus.conv5", {n, mb, 1, 4}},          {"line.input", {n, ml, 1, 6}},
        {"line.conv1", {n, ml, 1, 6}},         {"line.stack1", {n, ml, 2, 6}},
        {"line.conv2", {n, ml, 1, 6}},         {"line.stack2", {n, ml, 2, 6}},
        {"line.conv3", {n, 12 * ml, 1, 1}},    {"line.reshape3", {n, ml, 1, 12}},
        {"line.conv4", {n, ml, 1, 6}},         {"line.conv5", {n, ml, 1, 4}},
        {"spatial.input", {n, 1, h, 4}},       {"spatial.conv1", {n, 256, 1, 4}},
        {"spatial.conv2", {n, 256, 1, 1}},     {"spatial.reshape2", {n, 1, 256, 1}},
        {"spatial.conv3", {n, 128, 1, 1}},     {"spatial.output", {n, 128}},
        {"temporal.input", {f, windows, 128}}, {"temporal.lstm1", {f, windows, 256}},
        {"temporal.lstm2", {f, windows, 256}}, {"temporal.lstm3", {f, windows, 256}},
        {"temporal.lstm4", {f, windows, 128}}, {"temporal.head", {windows, 1}},
    };
    REQUIRE(ledger.entries.size() == expected.size());
    for (std::size_t k = 0; k < expected.size(); ++k) {
      CAPTURE(expected[k].first);
      CHECK(ledger.entries[k].first == expected[k].first);
      CHECK(ledger.entries[k].second == expected[k].second);
    }
    REQUIRE(p.size() == windows);
    for (float v : p) CHECK((v > 0.0f && v < 1.0f));
  }
  CHECK_THROWS_AS(PowerFdModel<float>(PowerFdConfig{0, 4, 2}), ShapeError);
}

TEST_CASE("shape errors") {
  PowerFdModel<float> model(PowerFdConfig{3, 4, 2});
  model.init(1);
  std::mt19937_64 rng(2);
  auto batch = random_batch<float>(PowerFdConfig{3, 4, 2}, 2, rng);
  typename PowerFdModel<float>::Cache cache;
  auto bad = batch;
  bad.bus = Tensor<float>({6, 4, 1, 3});
  CHECK_THROWS_AS(model.forward(bad, Mode::Eval, cache), ShapeError);
  bad = batch;
  bad.line = Tensor<float>({5, 4, 1, 6});
  CHECK_THROWS_AS(model.forward(bad, Mode::Eval, cache), ShapeError);
  bad = batch;
  bad.bus = Tensor<float>({5, 3, 1, 3});
  bad.line = Tensor<float>({5, 4, 1, 6});
  CHECK_THROWS_AS(model.forward(bad, Mode::Eval, cache), ShapeError);
}

TEST_CASE("representation paths") {
  std::mt19937_64 rng(3);
  SUBCASE("weights are shared across frames") {
    RepresentationPath<double> path("bus", 5, 3);
    path.init(rng);
    const auto frame = random_tensor({1, 5, 1, 3}, rng);
    const auto x = nn::concat(nn::concat(frame, random_tensor({1, 5, 1, 3}, rng), 0), frame, 0);
    for (Mode mode : {Mode::Train, Mode::Eval}) {
      typename RepresentationPath<double>::Cache cache;
      const auto y = path.forward(x, mode, cache);
      for (std::size_t i = 0; i < 20; ++i) CHECK(y[i] == y[40 + i]);
    }
  }
  SUBCASE("zero line input stays finite in train mode") {
    RepresentationPath<double> path("line", 4, 6);
    path.init(rng);
    typename RepresentationPath<double>::Cache cache;
    for (double v : path.forward(Tensor<double>({3, 4, 1, 6}), Mode::Train, cache).values()) CHECK(std::isfinite(v));
  }
  SUBCASE("lines never mix") {
    const std::size_t m = 5, a = 1, b = 3;
    RepresentationPath<double> path("line", m, 6);
    path.init(rng);
    const auto x = random_tensor({4, m, 1, 6}, rng);
    for (Mode mode : {Mode::Train, Mode::Eval}) {
      typename RepresentationPath<double>::Cache cache;
      const auto y = path.forward(x, mode, cache);

      // Perturbing line a moves output row a only.
      auto xp = x;
      for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t c = 0; c < 6; ++c) xp.at(n, a, 0, c) += 0.5;
      const auto yp = path.forward(xp, mode, cache);
      bool moved = false;
      for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < 4; ++c) {
            if (r == a) moved |= yp.at(n, r, 0, c) != y.at(n, r, 0, c);
            else CHECK(yp.at(n, r, 0, c) == y.at(n, r, 0, c));
          }
      CHECK(moved);

      // Swapping two lines together with their per-line parameters swaps the output rows.
      auto swapped = path;
      for (auto& blk : swapped.blocks) {
        const std::size_t per = blk.conv.spec.out_channels / m;
        const std::size_t wsize = blk.conv.weight.value.size() / blk.conv.spec.out_channels;
        auto swap_channels = [&](Tensor<double>& t, std::size_t stride) {
          for (std::size_t k = 0; k < per * stride; ++k) std::swap(t[a * per * stride + k], t[b * per * stride + k]);
        };
        swap_channels(blk.conv.weight.value, wsize);
        swap_channels(blk.conv.bias.value, 1);
        swap_channels(blk.bn.gamma.value, 1);
        swap_channels(blk.bn.beta.value, 1);
        swap_channels(blk.bn.running_mean, 1);
        swap_channels(blk.bn.running_var, 1);
      }
      auto xs = x;
      for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t c = 0; c < 6; ++c) std::swap(xs.at(n, a, 0, c), xs.at(n, b, 0, c));
      typename RepresentationPath<double>::Cache cs;
      const auto ys = swapped.forward(xs, mode, cs);
      for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t r = 0; r < m; ++r) {
          const std::size_t src = r == a ? b : r == b ? a : r;
          for (std::size_t c = 0; c < 4; ++c) CHECK(ys.at(n, r, 0, c) == doctest::Approx(y.at(n, src, 0, c)).epsilon(1e-12));
        }
    }
  }
}

TEST_CASE("spatial path stacks buses before lines") {
  const std::size_t mb = 3, ml = 4, n = 2;
  SpatialPath<double> sp(mb, ml);
  std::mt19937_64 rng(4);
  sp.init(rng);
  // Channel r of the first layer reads row r of the stacked input only.
  auto& w = sp.blocks[0].conv.weight.value;
  w.fill(0.0);
  for (std::size_t r = 0; r < mb + ml; ++r) w.at(r, 0, r, 0) = 1.0;
  sp.blocks[0].conv.bias.value.fill(0.0);
  Tensor<double> bus({n, mb, 1, 4});
  Tensor<double> line({n, ml, 1, 4});
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t r = 0; r < mb; ++r)
      for (std::size_t c = 0; c < 4; ++c) bus.at(k, r, 0, c) = 1.0 + static_cast<double>(r);
    for (std::size_t r = 0; r < ml; ++r)
      for (std::size_t c = 0; c < 4; ++c) line.at(k, r, 0, c) = 101.0 + static_cast<double>(r);
  }
  typename SpatialPath<double>::Cache cache;
  sp.forward(bus, line, Mode::Eval, cache);
  const auto& y = cache.blocks[0].y;  // BN eval with mean 0, var 1, then ELU on positive values
  const double s = 1.0 / std::sqrt(1.0 + 1e-5);
  for (std::size_t r = 0; r < mb + ml; ++r) {
    const double marker = r < mb ? 1.0 + static_cast<double>(r) : 101.0 + static_cast<double>(r - mb);
    CHECK(y.at(1, r, 0, 2) == doctest::Approx(marker * s).epsilon(1e-12));
  }
}

TEST_CASE("every input element receives gradient") {
  const PowerFdConfig cfg{3, 4, 2};
  PowerFdModel<double> model(cfg);
  model.init(6);
  std::mt19937_64 rng(7);
  const auto batch = random_batch<double>(cfg, 2, rng);
  typename PowerFdModel<double>::Cache cache;
  const auto p = model.forward(batch, Mode::Train, cache);
  const auto [loss, grad] = nn::bce_loss<double>(p, batch.labels);
  const auto g = model.backward(grad, cache);
  REQUIRE(g.bus.shape() == batch.bus.shape());
  REQUIRE(g.line.shape() == batch.line.shape());
  for (double v : g.bus.values()) CHECK(v != 0.0);
  for (double v : g.line.values()) CHECK(v != 0.0);
  for (auto* prm : model.parameters()) {
    double norm = 0.0;
    for (double v : prm->grad.values()) norm += v * v;
    CAPTURE(prm->name);
    CHECK(norm > 0.0);
  }
}

TEST_CASE("temporal path") {
  TemporalPath<double> ta;
  typename TemporalPath<double>::Cache cache;
  SUBCASE("zero input and zero parameters give one half") {
    const auto p = ta.forward(Tensor<double>({3, 2, 128}), cache);
    CHECK(p == std::vector<double>{0.5, 0.5});
  }
  SUBCASE("the first frame reaches the head") {
    std::mt19937_64 rng(8);
    ta.init(rng);
    auto s = random_tensor({4, 1, 128}, rng);
    const double before = ta.forward(s, cache)[0];
    CHECK((before > 0.0 && before < 1.0));
    for (std::size_t i = 0; i < 128; ++i) s[i] += 0.5 * (i % 2 ? 1.0 : -1.0);
    CHECK(ta.forward(s, cache)[0] != before);
  }
}

TEST_CASE("full model gradient check") {
  const PowerFdConfig cfg{3, 4, 2};
  struct State {
    PowerFdModel<double> model;
    WindowBatch<double> batch;
    PowerFdModel<double>::InputGrad g;
    double loss() {
      typename PowerFdModel<double>::Cache cache;
      const auto p = model.forward(batch, Mode::Train, cache);
      return nn::bce_loss<double>(p, batch.labels).first;
    }
    void analytic() {
      model.zero_grad();
      typename PowerFdModel<double>::Cache cache;
      const auto p = model.forward(batch, Mode::Train, cache);
      g = model.backward(nn::bce_loss<double>(p, batch.labels).second, cache);
    }
  };
  const auto report = nn::grad_check(
      [&](std::mt19937_64& rng) {
        auto st = std::make_shared<State>();
        st->model = PowerFdModel<double>(cfg);
        st->model.init(rng());
        st->batch = random_batch<double>(cfg, 2, rng);
        st->analytic();
        nn::GradCase gc;
        gc.loss = [st] { return st->loss(); };
        auto pick = [&](const std::string& name, Tensor<double>& v, Tensor<double>& g) {
          const std::size_t i = rng() % v.size();
          gc.probes.push_back({name + "[" + std::to_string(i) + "]", std::span(v.data() + i, 1),
                               std::span<const double>(g.data() + i, 1)});
        };
        for (auto* p : st->model.parameters()) pick(p->name, p->value, p->grad);
        for (int k = 0; k < 3; ++k) {
          pick("bus", st->batch.bus, st->g.bus);
          pick("line", st->batch.line, st->g.line);
        }
        return gc;
      },
      20, 1e-4, 99);
  INFO("checked " << report.checked << ", max rel error " << report.max_rel_error);
  if (!report.failures.empty()) INFO(report.failures.front());
  CHECK(report.checked >= 20 * 66);
  CHECK(report.max_rel_error <= 1e-4);
  CHECK(report.passed());
}

TEST_CASE("prediction is deterministic and per-window in eval mode") {
  const PowerFdConfig cfg{3, 4, 2};
  PowerFdModel<float> model(cfg);
  model.init(10);
  std::mt19937_64 rng(11);
  randomize_buffers(model, rng);
  const auto batch = random_batch<float>(cfg, 4, rng);
  const auto p1 = model.predict(batch);
  CHECK(p1 == model.predict(batch));

  // The same window alone and next to different companions.
  auto single = random_batch<float>(cfg, 1, rng);
  auto pair = random_batch<float>(cfg, 2, rng);
  std::copy_n(single.bus.data(), single.bus.size(), pair.bus.data() + single.bus.size());
  std::copy_n(single.line.data(), single.line.size(), pair.line.data() + single.line.size());
  CHECK(model.predict(pair)[1] == doctest::Approx(model.predict(single)[0]).epsilon(1e-6));
}

TEST_CASE("model cast preserves predictions") {
  const PowerFdConfig cfg{3, 4, 2};
  PowerFdModel<float> model(cfg);
  model.init(12);
  std::mt19937_64 rng(13);
  randomize_buffers(model, rng);
  const auto batch = random_batch<double>(cfg, 3, rng);
  auto md = model.cast<double>();
  const auto pd = md.predict(batch);
  const auto pf = model.predict(WindowBatch<float>{batch.bus.cast<float>(), batch.line.cast<float>(), {0, 0, 0}});
  for (std::size_t k = 0; k < 3; ++k) CHECK(pd[k] == doctest::Approx(pf[k]).epsilon(1e-4));
}

TEST_CASE("standardized window batches") {
  const auto& d = smoke_dataset();
  const grid::MeasurementLayout layout(d.plan);
  std::vector<const dataset::Frame*> clean;
  for (const auto& f : d.clean) clean.push_back(&f);
  const auto st = Standardizer::fit(clean, d.plan.entries.size());
  for (std::size_t i = 0; i < st.scale.size(); ++i) CHECK(st.scale[i] > 0.0f);

  const auto windows = dataset::window(d, 3);
  const WindowSource src(d, windows, 3, st);
  const std::size_t pick = src.size() - 1;  // an attacked window
  REQUIRE(src.windows()[pick].label == 1);
  const std::array<std::size_t, 1> idx{pick};
  const auto b = src.batch<double>(idx);
  CHECK(b.bus.shape() == Shape{4, layout.monitored_buses(), 1, 3});
  CHECK(b.labels == std::vector<double>{1.0});
  const auto frames = dataset::window_frames(d, windows[pick], 3);
  for (std::size_t j = 0; j < 4; ++j) {
    for (std::size_t i = 0; i < d.plan.entries.size(); ++i) {
      const auto& slot = layout.slots()[i];
      const auto& t = slot.bus_block ? b.bus : b.line;
      const std::size_t cells = slot.bus_block ? layout.bus_cells() : layout.line_cells();
      const double expect = static_cast<double>((frames[j]->values[i] - st.mean[i]) / st.scale[i]);
      CHECK(t[j * cells + layout.cell(i)] == doctest::Approx(expect).epsilon(1e-6));
    }
  }
  // Padding cells stay zero.
  for (std::size_t c = 0; c < layout.bus_cells(); ++c) {
    if (!layout.bus_mask()[c]) CHECK(b.bus[c] == 0.0);
  }
  CHECK_THROWS_AS(WindowSource(d, windows, 3, Standardizer::identity(3)), ShapeError);
}

TEST_CASE("training smoke run") {
  const auto& d = smoke_dataset();
  const auto windows = smoke_windows();
  REQUIRE(windows.size() == 50);
  std::vector<const dataset::Frame*> clean;
  for (const auto& f : d.clean) clean.push_back(&f);
  const auto st = Standardizer::fit(clean, d.plan.entries.size());
  const WindowSource train_set(d, windows, 3, st);
  const auto cfg = config_for(train_set.layout(), 3);

  auto run = [&] {
    PowerFdModel<float> model(cfg);
    model.init(21);
    TrainOptions opt;
    opt.epochs = 2;
    opt.batch = 10;
    opt.seed = 5;
    std::vector<std::string> log;
    const auto report = train(model, train_set, train_set, opt, [&](const EpochRecord& r) { log.push_back(epoch_json(r)); });
    return std::make_tuple(report, log, parameter_hash(model));
  };
  const auto [r1, log1, h1] = run();
  REQUIRE(r1.epochs.size() == 2);
  CHECK(r1.epochs[1].train_loss < r1.epochs[0].train_loss);
  CHECK(std::isfinite(r1.epochs[1].val_loss));
  CHECK(r1.best_epoch >= 1);
  CHECK(log1.front().starts_with("{\"epoch\":1,"));

  const auto [r2, log2, h2] = run();
  CHECK(log1 == log2);
  CHECK(h1 == h2);

  TrainOptions bad;
  bad.train_labels = {1, 0};
  PowerFdModel<float> model(cfg);
  CHECK_THROWS_AS(train(model, train_set, train_set, bad), ShapeError);
}

TEST_CASE("checkpoint round trip") {
  const PowerFdConfig cfg{3, 4, 2};
  Checkpoint c;
  c.model = PowerFdModel<float>(cfg);
  c.model.init(30);
  std::mt19937_64 rng(31);
  randomize_buffers(c.model, rng);
  c.standardizer = Standardizer{{0.5f, -1.0f}, {2.0f, 0.25f}};
  c.init_seed = 30;
  c.dataset_hash = 0x1234abcdULL;
  c.epoch = 7;
  const auto bytes = encode_checkpoint(c);
  CHECK(bytes == encode_checkpoint(c));

  const auto back = decode_checkpoint(bytes, cfg);
  auto restored = back.model;
  CHECK(back.standardizer == c.standardizer);
  CHECK(back.init_seed == 30);
  CHECK(back.dataset_hash == 0x1234abcdULL);
  CHECK(back.epoch == 7);
  CHECK(parameter_hash(restored) == parameter_hash(c.model));
  const auto batch = random_batch<float>(cfg, 3, rng);
  CHECK(restored.predict(batch) == c.model.predict(batch));

  CHECK_THROWS_AS(decode_checkpoint(bytes, PowerFdConfig{4, 4, 2}), ConfigMismatchError);
  CHECK_THROWS_AS(decode_checkpoint(bytes, PowerFdConfig{3, 4, 3}), ConfigMismatchError);
  auto cut = bytes;
  cut.resize(bytes.size() / 2);
  CHECK_THROWS_AS(decode_checkpoint(cut), ParseError);
  auto flip = bytes;
  flip[bytes.size() / 2] ^= 0x40;
  CHECK_THROWS_AS(decode_checkpoint(flip), ParseError);
  auto ver = bytes;
  ver[8] = 9;
  CHECK_THROWS_AS(decode_checkpoint(ver), VersionMismatchError);
  CHECK_THROWS_AS(decode_checkpoint({'x', 'y'}), ParseError);
}

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hsi/attribution.hpp"
#include "hsi/error.hpp"
#include "test_util.hpp"

using namespace hsi;

namespace {

// GAP -> dense -> softmax: every logit is affine in the input.
nn::Network linear_net(std::size_t side, std::size_t channels, std::uint64_t seed) {
  nn::NetworkSpec spec;
  spec.input = {side, side, channels};
  spec.layers = {{nn::LayerKind::global_avg_pool, 0, 0, 1},
                 {nn::LayerKind::dense, 2, 0, 1},
                 {nn::LayerKind::softmax, 0, 0, 1}};
  return nn::Network(spec, seed);
}

double logit(nn::Network& net, std::span<const double> x, int target) {
  nn::Tensor4 t(1, net.spec().input);
  std::copy(x.begin(), x.end(), t.v.begin());
  net.forward(t, nn::Mode::eval);
  return net.logits().at(0, 0, 0, static_cast<std::size_t>(target));
}

// Side x side patches; channel `signal` carries the class, the rest is noise.
std::vector<LabeledExample> signal_examples(Rng& rng, std::size_t n, std::size_t side, std::size_t channels,
                                            std::size_t signal) {
  std::vector<LabeledExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    LabeledExample e;
    e.label = i % 2 ? BinaryLabel::lgg : BinaryLabel::healthy;
    e.patch.side = side;
    e.patch.channels.resize(channels);
    std::iota(e.patch.channels.begin(), e.patch.channels.end(), std::size_t{0});
    e.patch.member.assign(side * side, 1);
    e.patch.values.resize(side * side * channels);
    for (std::size_t q = 0; q < e.patch.values.size(); ++q) {
      e.patch.values[q] = rng.normal();
      if (q % channels == signal) e.patch.values[q] = (i % 2 ? 1.5 : -1.5) + 0.3 * rng.normal();
    }
    out.push_back(std::move(e));
  }
  return out;
}

ModelScores model(std::string id, double acc, std::vector<double> scores) {
  return {std::move(id), acc, std::move(scores)};
}

}  // namespace

TEST_CASE("a baseline equal to the input gives zero attribution") {
  Rng rng(1);
  const nn::Network net(nn::tissue_cnn_spec(4, 3, {4}, 4), 2);
  const auto x = testutil::random_spectrum(rng, 4 * 4 * 4, -1, 1);
  const BaselineSet same{{x}};
  for (const double v : expected_gradients(net, x, same, 1, 20, 3)) CHECK(v == 0.0);
}

TEST_CASE("expected gradients are exact for an affine network") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t side = 1 + rng.below(4), c = 1 + rng.below(8);
    auto net = linear_net(side, c, trial);
    const auto x = testutil::random_spectrum(rng, side * side * c, -2, 2);
    const auto b = testutil::random_spectrum(rng, side * side * c, -2, 2);
    const int target = static_cast<int>(rng.below(2));
    const auto attr = expected_gradients(net, x, BaselineSet{{b}}, target, 7, trial);
    // Oracle: moving only channel k from baseline to input changes the logit by
    // exactly that channel's share.
    const double base = logit(net, b, target);
    double sum = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      auto partial = b;
      for (std::size_t p = 0; p < side * side; ++p) partial[p * c + k] = x[p * c + k];
      const double expect = logit(net, partial, target) - base;
      CHECK(std::abs(attr[k] - expect) <= 1e-9 * (1.0 + std::abs(expect)));
      sum += attr[k];
    }
    CHECK(std::abs(sum - (logit(net, x, target) - base)) <= 1e-9 * (1.0 + std::abs(sum)));
  }
}

TEST_CASE("expected gradients approach completeness on a nonlinear network") {
  Rng rng(3);
  auto net = nn::Network(nn::tissue_cnn_spec(3, std::nullopt, {4}, 4), 5);
  const auto x = testutil::random_spectrum(rng, 4 * 4 * 3, 0, 1);
  const std::vector<double> zero(x.size(), 0.0);
  const auto attr = expected_gradients(net, x, BaselineSet{{zero}}, 0, 8192, 9);
  const double gap = logit(net, x, 0) - logit(net, zero, 0);
  const double sum = std::accumulate(attr.begin(), attr.end(), 0.0);
  CHECK(std::abs(sum - gap) <= 0.05 * std::abs(gap) + 1e-3);
}

TEST_CASE("expected gradients argument checks") {
  const nn::Network net(nn::tissue_cnn_spec(2, std::nullopt, {2}, 2), 1);
  const std::vector<double> x(8, 0.5);
  CHECK_THROWS_AS(expected_gradients(net, x, BaselineSet{}, 0, 4, 1), DomainError);
  CHECK_THROWS_AS(expected_gradients(net, x, BaselineSet{{x}}, 0, 0, 1), DomainError);
  CHECK_THROWS_AS(expected_gradients(net, x, BaselineSet{{x}}, 2, 4, 1), DomainError);
  CHECK_THROWS_AS(expected_gradients(net, std::vector<double>(7), BaselineSet{{x}}, 0, 4, 1), ShapeError);
  CHECK_THROWS_AS(expected_gradients(net, x, BaselineSet{{std::vector<double>(9)}}, 0, 4, 1), ShapeError);
}

TEST_CASE("baselines sample each class without replacement") {
  Rng rng(4);
  const auto examples = signal_examples(rng, 9, 2, 3, 0);  // 5 healthy, 4 lgg
  const auto set = make_baselines(examples, 3, true, 7);
  REQUIRE(set.inputs.size() == 7);
  CHECK(std::all_of(set.inputs.back().begin(), set.inputs.back().end(), [](double v) { return v == 0.0; }));
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = i + 1; j < 6; ++j) CHECK(set.inputs[i] != set.inputs[j]);
  }
  CHECK(make_baselines(examples, 10, false, 7).inputs.size() == 9);
  CHECK(make_baselines(examples, 3, true, 7).inputs == set.inputs);
}

TEST_CASE("a trained network attributes the class-carrying channel") {
  Rng rng(5);
  const auto train = signal_examples(rng, 64, 4, 6, 4);
  nn::TrainConfig cfg;
  cfg.epochs = 15;
  cfg.batch_size = 16;
  cfg.learning_rate = 0.01;
  cfg.validation_fraction = 0.0;
  const auto views = as_views(train);
  const auto trained = nn::train(nn::tissue_cnn_spec(6, std::nullopt, {6}, 4), views, cfg);
  const auto test = signal_examples(rng, 16, 4, 6, 4);
  REQUIRE(evaluate_network(trained.network, test).accuracy >= 0.9);

  AttributionParams params;
  params.samples = 32;
  params.baselines_per_class = 8;
  params.seed = 3;
  const auto baselines = make_baselines(train, 8, true, 1);
  const auto serial = channel_importance(trained.network, test, baselines, params, Exec::serial);
  const auto parallel = channel_importance(trained.network, test, baselines, params, Exec::parallel);
  CHECK(serial == parallel);
  CHECK(std::max_element(serial.begin(), serial.end()) - serial.begin() == 4);
  for (const double v : serial) CHECK(v >= 0.0);
}

TEST_CASE("aggregation normalizes, filters and reduces over models") {
  const std::vector<std::size_t> channels{3, 7, 9};
  const std::vector<double> wl{500, 600, 700};
  const std::vector<ModelScores> models{model("a", 0.9, {1, 2, 1}), model("b", 0.95, {-3, 0, 1}),
                                        model("c", 0.8, {100, 0, 0})};
  const auto r = aggregate_importance(models, channels, wl, 0.8);
  CHECK(r.model_ids == std::vector<std::string>{"a", "b"});  // 0.8 is not above the threshold
  const double m0 = (0.25 + 0.75) / 2, m1 = (0.5 + 0.0) / 2, m2 = (0.25 + 0.25) / 2;
  CHECK(r.mean[0] == doctest::Approx(m0).epsilon(1e-15));
  CHECK(r.mean[1] == doctest::Approx(m1).epsilon(1e-15));
  CHECK(r.mean[2] == doctest::Approx(m2).epsilon(1e-15));
  CHECK(r.stddev[0] == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(r.stddev[1] == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(r.stddev[2] == 0.0);

  CHECK_THROWS_AS(aggregate_importance(std::vector<ModelScores>{model("c", 0.5, {1, 1, 1})}, channels, wl),
                  DomainError);
  CHECK_THROWS_AS(aggregate_importance(std::vector<ModelScores>{model("a", 0.9, {1, 1})}, channels, wl),
                  ShapeError);
  CHECK_THROWS_AS(aggregate_importance(models, channels, std::vector<double>{1.0}), ShapeError);
}

TEST_CASE("aggregation properties on random scores") {
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t c = 2 + rng.below(20), n = 1 + rng.below(6);
    std::vector<std::size_t> channels(c);
    std::iota(channels.begin(), channels.end(), std::size_t{0});
    const std::vector<double> wl(c, 0.0);
    std::vector<ModelScores> models, scaled;
    for (std::size_t m = 0; m < n; ++m) {
      auto s = testutil::random_spectrum(rng, c, -1, 1);
      models.push_back(model(std::to_string(m), 0.9, s));
      const double factor = std::exp(rng.uniform() * 6 - 3);
      for (auto& v : s) v *= factor;
      scaled.push_back(model(std::to_string(m), 0.9, s));
    }
    const auto r = aggregate_importance(models, channels, wl);
    const auto rs = aggregate_importance(scaled, channels, wl);
    auto perm = models;
    rng.shuffle(std::span<ModelScores>(perm));
    const auto rp = aggregate_importance(perm, channels, wl);
    CHECK(std::accumulate(r.mean.begin(), r.mean.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
    for (std::size_t k = 0; k < c; ++k) {
      CHECK(rs.mean[k] == doctest::Approx(r.mean[k]).epsilon(1e-12));
      CHECK(rp.mean[k] == doctest::Approx(r.mean[k]).epsilon(1e-12));
      CHECK(rp.stddev[k] == doctest::Approx(r.stddev[k]).epsilon(1e-9));
      CHECK(r.stddev[k] >= 0.0);
    }
  }
}

TEST_CASE("top-k selection orders by importance with index tie-break") {
  AttributionReport r;
  r.channels = {10, 4, 7, 2, 9};
  r.wavelengths.assign(5, 0.0);
  r.mean = {0.1, 0.3, 0.3, 0.2, 0.1};
  r.stddev.assign(5, 0.0);
  r.model_ids = {"m1", "m2"};
  const auto s = select_top_k(r, 4);
  CHECK(s.bands == std::vector<std::size_t>{4, 7, 2, 9});
  CHECK(s.source == "top4:m1,m2");
  CHECK_THROWS_AS(select_top_k(r, 0), DomainError);
  CHECK_THROWS_AS(select_top_k(r, 6), DomainError);

  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    AttributionReport q;
    const std::size_t c = 1 + rng.below(30);
    for (std::size_t k = 0; k < c; ++k) {
      q.channels.push_back(k * 3);
      q.mean.push_back(static_cast<double>(rng.below(5)));  // many ties
    }
    const std::size_t k = 1 + rng.below(c);
    const auto top = select_top_k(q, k);
    // Oracle: brute force rank of every channel.
    for (std::size_t i = 0; i < c; ++i) {
      std::size_t better = 0;
      for (std::size_t j = 0; j < c; ++j) {
        better += q.mean[j] > q.mean[i] || (q.mean[j] == q.mean[i] && q.channels[j] < q.channels[i]);
      }
      const bool chosen = std::find(top.bands.begin(), top.bands.end(), q.channels[i]) != top.bands.end();
      CHECK(chosen == (better < k));
      if (chosen) CHECK(top.bands[better] == q.channels[i]);
    }
  }
}

TEST_CASE("retraining on the informative channel keeps accuracy, on a noise channel loses it") {
  Rng rng(8);
  const auto train = signal_examples(rng, 64, 4, 5, 2);
  const auto test = signal_examples(rng, 40, 4, 5, 2);
  nn::TrainConfig cfg;
  cfg.epochs = 15;
  cfg.batch_size = 16;
  cfg.learning_rate = 0.01;
  cfg.validation_fraction = 0.0;
  const auto good = retrain_on_subset({{2}, "t"}, train, test, cfg, 1.0, {4});
  CHECK(good.network.spec().input.c == 1);
  CHECK_FALSE(good.network.spec().compress_to().has_value());
  CHECK(good.metrics.accuracy >= 0.9);
  CHECK(good.accuracy_delta == doctest::Approx(good.metrics.accuracy - 1.0));
  const auto bad = retrain_on_subset({{0}, "t"}, train, test, cfg, 1.0, {4});
  CHECK(bad.metrics.accuracy < good.metrics.accuracy);
  CHECK_THROWS_AS(retrain_on_subset({{}, "t"}, train, test, cfg, 1.0), DomainError);
}

TEST_CASE("report and subset files round-trip") {
  testutil::TempDir dir("attr");
  AttributionReport r;
  r.channels = {1, 5};
  r.wavelengths = {412.5, 503.25};
  r.mean = {0.123456789012345, 0.876543210987655};
  r.stddev = {0.01, 0.02};
  r.model_ids = {"cnn_k12_s1"};
  save_report(r, dir / "r.json");
  const auto back = load_report(dir / "r.json");
  CHECK(back.channels == r.channels);
  CHECK(back.wavelengths == r.wavelengths);
  CHECK(back.mean == r.mean);
  CHECK(back.stddev == r.stddev);
  CHECK(back.model_ids == r.model_ids);

  const ChannelSubset s{{75, 3, 40}, "top3:a,b"};
  std::vector<double> wl(104);
  for (std::size_t i = 0; i < wl.size(); ++i) wl[i] = 400.0 + 4.0 * i;
  save_subset(s, wl, dir / "s.txt");
  const auto sb = load_subset(dir / "s.txt");
  CHECK(sb.bands == s.bands);
  CHECK(sb.source == s.source);

  testutil::write_text(dir / "dup.txt", "3\n3\n");
  CHECK_THROWS_AS(load_subset(dir / "dup.txt"), FormatError);
  testutil::write_text(dir / "neg.txt", "-1\n");
  CHECK_THROWS_AS(load_subset(dir / "neg.txt"), FormatError);
  testutil::write_text(dir / "bad.json", "{\"channels\": 3}");
  CHECK_THROWS_AS(load_report(dir / "bad.json"), FormatError);
  CHECK_THROWS_AS(load_report(dir / "missing.json"), IoError);
}

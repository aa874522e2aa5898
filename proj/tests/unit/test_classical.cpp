#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "hsi/classical.hpp"
#include "hsi/error.hpp"
#include "test_util.hpp"

using namespace hsi;

namespace {

struct TableRow {
  std::size_t k;
  double accuracy, precision, recall;  // published, percent
  ConfusionCounts counts;
};

// Confusion counts and rounded metrics of the nine CNN rows of the reference table.
const std::vector<TableRow> kTableRows = {
    {3, 76, 92, 74, {1137, 428, 95, 391}},  {3, 81, 93, 81, {1238, 426, 97, 290}},
    {3, 78, 93, 77, {1178, 430, 93, 350}},  {6, 87, 94, 87, {1334, 444, 79, 194}},
    {6, 82, 95, 80, {1221, 460, 63, 307}},  {6, 85, 95, 85, {1298, 450, 73, 230}},
    {12, 89, 94, 90, {1378, 443, 80, 150}}, {12, 86, 96, 85, {1297, 446, 57, 231}},
    {12, 89, 94, 90, {1373, 445, 78, 155}},
};

FeatureTable two_blob_table(Rng& rng, std::size_t n, std::size_t features, double gap) {
  FeatureTable t;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % 2);
    std::vector<double> row(features);
    for (auto& v : row) v = rng.normal() * 0.2;
    row[0] += y ? gap : -gap;
    t.rows.push_back(row);
    t.labels.push_back(y);
  }
  return t;
}

double accuracy_of(const std::vector<int>& pred, const std::vector<int>& labels) {
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == labels[i];
  return static_cast<double>(ok) / static_cast<double>(pred.size());
}

std::vector<int> forest_labels(const RandomForest& forest, const FeatureTable& t) {
  std::vector<int> out;
  for (const auto& p : forest.predict(t.rows)) out.push_back(p.label);
  return out;
}

DecisionTree leaf(int label) {
  DecisionTree t;
  TreeNode n;
  n.label = static_cast<std::uint8_t>(label);
  t.nodes.push_back(n);
  return t;
}

}  // namespace

TEST_CASE("metrics reproduce the reference table within one point") {
  for (const auto& row : kTableRows) {
    CAPTURE(row.k);
    const auto m = metrics_from_counts(row.counts);
    CHECK(std::abs(100 * m.accuracy - row.accuracy) <= 1.0);
    CHECK(std::abs(100 * m.precision - row.precision) <= 1.0);
    CHECK(std::abs(100 * m.recall - row.recall) <= 1.0);
  }
}

TEST_CASE("metric examples to three decimals") {
  const auto a = metrics_from_counts({1378, 443, 80, 150});
  CHECK(std::abs(a.accuracy - 0.888) < 5e-4);
  CHECK(std::abs(a.precision - 0.945) < 5e-4);
  CHECK(std::abs(a.recall - 0.902) < 5e-4);
  const auto b = metrics_from_counts({1137, 428, 95, 391});
  CHECK(std::abs(b.accuracy - 0.763) < 5e-4);
  CHECK(std::abs(b.precision - 0.923) < 5e-4);
  CHECK(std::abs(b.recall - 0.744) < 5e-4);
  const auto perfect = metrics_from_counts({10, 5, 0, 0});
  CHECK(perfect.accuracy == 1.0);
  CHECK(perfect.precision == 1.0);
  CHECK(perfect.recall == 1.0);
}

TEST_CASE("metric identities on random counts") {
  Rng rng(1);
  for (int trial = 0; trial < 5000; ++trial) {
    ConfusionCounts c{rng.below(50), rng.below(50), rng.below(50), rng.below(50)};
    if (c.total() == 0) continue;
    const auto m = metrics_from_counts(c);
    const double total = static_cast<double>(c.tp + c.tn + c.fp + c.fn);
    CHECK(m.accuracy == doctest::Approx((c.tp + c.tn) / total).epsilon(1e-15));
    if (c.tp + c.fp == 0) {
      CHECK(std::isnan(m.precision));
    } else {
      CHECK(m.precision == doctest::Approx(static_cast<double>(c.tp) / (c.tp + c.fp)).epsilon(1e-15));
    }
    if (c.tp + c.fn == 0) {
      CHECK(std::isnan(m.recall));
    } else {
      CHECK(m.recall == doctest::Approx(static_cast<double>(c.tp) / (c.tp + c.fn)).epsilon(1e-15));
    }
  }
  CHECK_THROWS_AS(metrics_from_counts({}), DomainError);
}

TEST_CASE("evaluate counts predictions against labels") {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(100);
    std::vector<int> pred(n), labels(n);
    ConfusionCounts expect;
    for (std::size_t i = 0; i < n; ++i) {
      pred[i] = static_cast<int>(rng.below(2));
      labels[i] = static_cast<int>(rng.below(2));
      if (pred[i] == 1 && labels[i] == 1) ++expect.tp;
      if (pred[i] == 0 && labels[i] == 0) ++expect.tn;
      if (pred[i] == 1 && labels[i] == 0) ++expect.fp;
      if (pred[i] == 0 && labels[i] == 1) ++expect.fn;
    }
    CHECK(evaluate(pred, labels).counts == expect);
  }
  CHECK_THROWS_AS(evaluate(std::vector<int>{}, std::vector<int>{}), DomainError);
  CHECK_THROWS_AS(evaluate(std::vector<int>{1}, std::vector<int>{1, 0}), ShapeError);
}

TEST_CASE("constant lgg prediction on a table-sized test set") {
  std::vector<int> labels(1528, 1);
  labels.resize(2051, 0);
  const std::vector<int> pred(2051, 1);
  const auto m = evaluate(pred, labels);
  CHECK(m.recall == 1.0);
  CHECK(m.precision == doctest::Approx(1528.0 / 2051.0).epsilon(1e-15));
  CHECK(std::abs(m.precision - 0.745) < 5e-4);
}

TEST_CASE("tile features average member pixels only") {
  PaddedPatch p;
  p.side = 2;
  p.channels = {0, 1};
  p.values = {1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 5.0, 6.0};
  p.member = {1, 1, 0, 1};
  CHECK(tile_features(p) == std::vector<double>{3.0, 4.0});
  p.member = {0, 0, 0, 0};
  CHECK_THROWS_AS(tile_features(p), DomainError);
}

TEST_CASE("random forest on a separable toy set") {
  Rng rng(3);
  const auto train = two_blob_table(rng, 200, 2, 2.0);
  ForestParams params;
  params.seed = 4;
  const auto forest = rf_train(train, params);
  CHECK(forest.trees().size() == 100);
  CHECK(accuracy_of(forest_labels(forest, train), train.labels) == 1.0);
  const auto test = two_blob_table(rng, 200, 2, 2.0);
  CHECK(accuracy_of(forest_labels(forest, test), test.labels) >= 0.99);
}

TEST_CASE("random forest with one example per class recovers both") {
  FeatureTable t;
  t.rows = {{0.0, 1.0, 2.0}, {1.0, 0.0, 2.0}};
  t.labels = {0, 1};
  ForestParams params;
  params.trees = 25;
  params.seed = 7;
  const auto forest = rf_train(t, params);
  CHECK(forest_labels(forest, t) == t.labels);
}

TEST_CASE("forest probabilities equal the recount of tree votes") {
  Rng rng(5);
  const auto train = two_blob_table(rng, 120, 6, 0.3);  // overlapping: trees disagree
  ForestParams params;
  params.trees = 31;
  params.seed = 9;
  const auto forest = rf_train(train, params);
  const auto test = two_blob_table(rng, 100, 6, 0.3);
  bool saw_split_vote = false;
  for (const auto& row : test.rows) {
    std::size_t votes = 0;
    for (const auto& tree : forest.trees()) votes += tree.predict(row) == 1;
    const auto p = forest.predict(row);
    CHECK(p.probability == static_cast<double>(votes) / 31.0);
    CHECK(p.label == (2 * votes >= 31 ? 1 : 0));
    saw_split_vote |= votes > 0 && votes < 31;
  }
  CHECK(saw_split_vote);

  // Tree order does not matter.
  auto trees = forest.trees();
  rng.shuffle(std::span<DecisionTree>(trees));
  const RandomForest shuffled(6, trees);
  const auto a = forest.predict(test.rows), b = shuffled.predict(test.rows);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].label == b[i].label);
    CHECK(a[i].probability == b[i].probability);
  }
}

TEST_CASE("forest vote rules") {
  const std::vector<double> x{0.0};
  const RandomForest unanimous(1, {leaf(1), leaf(1), leaf(1)});
  CHECK(unanimous.predict(x).probability == 1.0);
  const RandomForest tie(1, {leaf(0), leaf(1), leaf(1), leaf(0)});
  CHECK(tie.predict(x).probability == 0.5);
  CHECK(tie.predict(x).label == 1);
  CHECK_THROWS_AS(tie.predict(std::vector<double>{0.0, 1.0}), ShapeError);
}

TEST_CASE("forest training is deterministic and worker-count independent") {
  Rng rng(6);
  const auto train = two_blob_table(rng, 150, 5, 0.5);
  ForestParams params;
  params.trees = 20;
  params.seed = 11;
  const auto a = rf_train(train, params, Exec::parallel);
  const auto b = rf_train(train, params, Exec::serial);
  REQUIRE(a.trees().size() == b.trees().size());
  for (std::size_t t = 0; t < a.trees().size(); ++t) {
    REQUIRE(a.trees()[t].nodes.size() == b.trees()[t].nodes.size());
    for (std::size_t i = 0; i < a.trees()[t].nodes.size(); ++i) {
      CHECK(a.trees()[t].nodes[i].feature == b.trees()[t].nodes[i].feature);
      CHECK(a.trees()[t].nodes[i].threshold == b.trees()[t].nodes[i].threshold);
    }
  }
  const auto pa = a.predict(train.rows, Exec::parallel), pb = a.predict(train.rows, Exec::serial);
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].probability == pb[i].probability);
}

TEST_CASE("forest errors and file round-trip") {
  FeatureTable single;
  single.rows = {{1.0}, {2.0}};
  single.labels = {1, 1};
  CHECK_THROWS_AS(rf_train(single, {}), DomainError);
  CHECK_THROWS_AS(rf_train(FeatureTable{}, {}), DomainError);

  testutil::TempDir dir("forest");
  Rng rng(7);
  const auto train = two_blob_table(rng, 60, 3, 0.8);
  ForestParams params;
  params.trees = 12;
  const auto forest = rf_train(train, params);
  save_forest(forest, dir / "f.hsrf");
  const auto back = load_forest(dir / "f.hsrf");
  CHECK(back.feature_count() == 3);
  const auto a = forest.predict(train.rows), b = back.predict(train.rows);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].probability == b[i].probability);
  CHECK_THROWS_AS(load_forest(dir / "none.hsrf"), IoError);
}

TEST_CASE("MLP fits XOR with eight hidden units") {
  FeatureTable xor_table;
  for (int rep = 0; rep < 4; ++rep) {
    for (int a = 0; a < 2; ++a) {
      for (int b = 0; b < 2; ++b) {
        xor_table.rows.push_back({static_cast<double>(a), static_cast<double>(b)});
        xor_table.labels.push_back(a ^ b);
      }
    }
  }
  MlpParams params;
  params.hidden = 8;
  params.train.epochs = 2000;
  params.train.batch_size = 16;
  params.train.learning_rate = 0.01;
  params.train.validation_fraction = 0.0;
  params.train.seed = 1;
  const auto result = mlp_train(xor_table, params);
  CHECK(accuracy_of(mlp_predict(result.network, xor_table), xor_table.labels) == 1.0);
}

TEST_CASE("MLP contracts") {
  Rng rng(8);
  const auto table = two_blob_table(rng, 64, 4, 1.5);
  MlpParams params;
  params.hidden = 6;
  params.train.epochs = 30;
  params.train.validation_fraction = 0.0;

  SUBCASE("zero learning rate keeps the initialization") {
    params.train.learning_rate = 0.0;
    const auto result = mlp_train(table, params);
    CHECK(result.network.flat_params() == nn::Network(nn::mlp_spec(4, 6), params.train.seed).flat_params());
  }
  SUBCASE("full-batch gradient descent with a small step never raises the loss") {
    params.train.optimizer = nn::Optimizer::sgd_momentum;
    params.train.momentum = 0.0;
    params.train.learning_rate = 1e-3;
    params.train.batch_size = table.rows.size();
    const auto result = mlp_train(table, params);
    for (std::size_t e = 1; e < result.history.size(); ++e) {
      CHECK(result.history[e].train_loss <= result.history[e - 1].train_loss);
    }
  }
  SUBCASE("single-class set is rejected") {
    auto one = table;
    std::fill(one.labels.begin(), one.labels.end(), 0);
    CHECK_THROWS_AS(mlp_train(one, params), DomainError);
  }
}

TEST_CASE("network evaluation agrees with evaluate on argmax predictions") {
  Rng rng(9);
  std::vector<LabeledExample> examples;
  for (int i = 0; i < 30; ++i) {
    LabeledExample e;
    e.patch.side = 1;
    e.patch.channels = {0, 1, 2};
    e.patch.values = testutil::random_spectrum(rng, 3, -1, 1);
    e.patch.member = {1};
    e.label = i % 3 ? BinaryLabel::lgg : BinaryLabel::healthy;
    examples.push_back(e);
  }
  const nn::Network net(nn::mlp_spec(3, 5), 3);
  const auto views = as_views(examples);
  const auto pred = argmax_labels(nn::predict_proba(net, views));
  std::vector<int> labels;
  for (const auto& e : examples) labels.push_back(static_cast<int>(e.label));
  CHECK(evaluate_network(net, examples).counts == evaluate(pred, labels).counts);
  CHECK_THROWS_AS(evaluate_network(net, std::span<const LabeledExample>{}), DomainError);
}

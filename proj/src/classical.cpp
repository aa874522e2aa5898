#include "hsi/classical.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "hsi/binary_io.hpp"
#include "hsi/error.hpp"
#include "hsi/random.hpp"

namespace hsi {

Metrics metrics_from_counts(const ConfusionCounts& c) {
  if (c.total() == 0) throw DomainError("cannot evaluate an empty prediction set");
  const double nan = std::numeric_limits<double>::quiet_NaN();
  Metrics m;
  m.counts = c;
  m.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
  m.precision = c.tp + c.fp == 0 ? nan : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  m.recall = c.tp + c.fn == 0 ? nan : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  return m;
}

Metrics evaluate(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size()) throw ShapeError("prediction and label counts differ");
  if (labels.empty()) throw DomainError("cannot evaluate an empty prediction set");
  ConfusionCounts c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool pos_pred = predictions[i] == 1, pos_true = labels[i] == 1;
    if (pos_pred && pos_true) ++c.tp;
    else if (!pos_pred && !pos_true) ++c.tn;
    else if (pos_pred) ++c.fp;
    else ++c.fn;
  }
  return metrics_from_counts(c);
}

std::vector<double> tile_features(const PaddedPatch& patch) {
  const std::size_t c = patch.channels.size();
  std::vector<double> f(c, 0.0);
  std::size_t n = 0;
  for (std::size_t q = 0; q < patch.side * patch.side; ++q) {
    if (!patch.member[q]) continue;
    for (std::size_t k = 0; k < c; ++k) f[k] += patch.values[q * c + k];
    ++n;
  }
  if (n == 0) throw DomainError("patch has no member pixels");
  for (auto& v : f) v /= static_cast<double>(n);
  return f;
}

FeatureTable feature_table(std::span<const LabeledExample> examples) {
  FeatureTable t;
  t.rows.reserve(examples.size());
  for (const auto& e : examples) {
    t.rows.push_back(tile_features(e.patch));
    t.labels.push_back(static_cast<int>(e.label));
  }
  return t;
}

// --- random forest ---------------------------------------------------------

int DecisionTree::predict(std::span<const double> x) const {
  std::uint32_t i = 0;
  while (nodes[i].feature >= 0) {
    i = x[static_cast<std::size_t>(nodes[i].feature)] <= nodes[i].threshold ? nodes[i].left : nodes[i].right;
  }
  return nodes[i].label;
}

namespace {

struct Split {
  std::int32_t feature = -1;
  double threshold = 0.0;
  double impurity = std::numeric_limits<double>::infinity();
};

double gini(double pos, double n) {
  if (n <= 0.0) return 0.0;
  const double p = pos / n;
  return 2.0 * p * (1.0 - p);
}

/// Best Gini split of `samples` on feature `f` (ties keep the lowest threshold).
void scan_feature(const FeatureTable& data, std::vector<std::uint32_t>& samples, std::size_t f, Split& best) {
  std::sort(samples.begin(), samples.end(), [&](std::uint32_t a, std::uint32_t b) {
    const double xa = data.rows[a][f], xb = data.rows[b][f];
    return xa < xb || (xa == xb && a < b);
  });
  const double n = static_cast<double>(samples.size());
  double total_pos = 0.0;
  for (const auto s : samples) total_pos += data.labels[s];
  double left_pos = 0.0;
  for (std::size_t i = 0; i + 1 < samples.size(); ++i) {
    left_pos += data.labels[samples[i]];
    const double xl = data.rows[samples[i]][f], xr = data.rows[samples[i + 1]][f];
    if (xl == xr) continue;
    const double nl = static_cast<double>(i + 1), nr = n - nl;
    const double imp = (nl * gini(left_pos, nl) + nr * gini(total_pos - left_pos, nr)) / n;
    if (imp < best.impurity) {
      best.impurity = imp;
      best.feature = static_cast<std::int32_t>(f);
      best.threshold = xl + (xr - xl) / 2.0;
      if (!(best.threshold < xr)) best.threshold = xl;
    }
  }
}

DecisionTree grow_tree(const FeatureTable& data, std::vector<std::uint32_t> boot, std::size_t mtry,
                       std::size_t min_split, Rng& rng) {
  const std::size_t nf = data.rows.front().size();
  DecisionTree tree;
  struct Pending {
    std::uint32_t node;
    std::vector<std::uint32_t> samples;
  };
  std::vector<Pending> stack;
  tree.nodes.push_back({});
  stack.push_back({0, std::move(boot)});
  std::vector<std::size_t> feats(nf);
  while (!stack.empty()) {
    Pending cur = std::move(stack.back());
    stack.pop_back();
    std::size_t pos = 0;
    for (const auto s : cur.samples) pos += static_cast<std::size_t>(data.labels[s]);
    const std::size_t n = cur.samples.size();
    TreeNode& leaf = tree.nodes[cur.node];
    leaf.label = 2 * pos >= n ? 1 : 0;  // ties to lgg
    if (pos == 0 || pos == n || n < min_split) continue;

    // Sample features without replacement; keep drawing past mtry until a
    // usable split appears or every feature has been tried.
    std::iota(feats.begin(), feats.end(), std::size_t{0});
    Split best;
    for (std::size_t k = 0; k < nf; ++k) {
      const std::size_t j = k + static_cast<std::size_t>(rng.below(nf - k));
      std::swap(feats[k], feats[j]);
      scan_feature(data, cur.samples, feats[k], best);
      if (k + 1 >= mtry && best.feature >= 0) break;
    }
    if (best.feature < 0) continue;  // all features constant here

    std::vector<std::uint32_t> left, right;
    for (const auto s : cur.samples) {
      (data.rows[s][static_cast<std::size_t>(best.feature)] <= best.threshold ? left : right).push_back(s);
    }
    const auto li = static_cast<std::uint32_t>(tree.nodes.size());
    tree.nodes.push_back({});
    tree.nodes.push_back({});
    TreeNode& node = tree.nodes[cur.node];
    node.feature = best.feature;
    node.threshold = best.threshold;
    node.left = li;
    node.right = li + 1;
    stack.push_back({li + 1, std::move(right)});
    stack.push_back({li, std::move(left)});
  }
  return tree;
}

}  // namespace

RandomForest::RandomForest(std::size_t features, std::vector<DecisionTree> trees)
    : features_(features), trees_(std::move(trees)) {}

ForestPrediction RandomForest::predict(std::span<const double> x) const {
  if (x.size() != features_) {
    throw ShapeError("forest expects " + std::to_string(features_) + " features, got " + std::to_string(x.size()));
  }
  if (trees_.empty()) throw DomainError("forest has no trees");
  std::size_t votes = 0;
  for (const auto& t : trees_) votes += static_cast<std::size_t>(t.predict(x));
  ForestPrediction p;
  p.probability = static_cast<double>(votes) / static_cast<double>(trees_.size());
  p.label = 2 * votes >= trees_.size() ? 1 : 0;
  return p;
}

std::vector<ForestPrediction> RandomForest::predict(const std::vector<std::vector<double>>& rows, Exec exec) const {
  std::vector<ForestPrediction> out(rows.size());
#pragma omp parallel for schedule(static) if (exec == Exec::parallel)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(rows.size()); ++i) {
    out[static_cast<std::size_t>(i)] = predict(rows[static_cast<std::size_t>(i)]);
  }
  return out;
}

RandomForest rf_train(const FeatureTable& train, const ForestParams& params, Exec exec) {
  if (train.rows.empty() || train.rows.size() != train.labels.size()) throw DomainError("invalid training table");
  const std::size_t nf = train.rows.front().size();
  if (nf == 0) throw DomainError("features are empty");
  for (const auto& r : train.rows) {
    if (r.size() != nf) throw ShapeError("feature rows differ in length");
  }
  std::size_t pos = 0;
  for (const int y : train.labels) {
    if (y != 0 && y != 1) throw DomainError("forest labels must be 0 or 1");
    pos += static_cast<std::size_t>(y);
  }
  if (pos == 0 || pos == train.labels.size()) throw DomainError("random forest needs both classes in training");
  if (params.trees == 0) throw DomainError("forest needs at least one tree");
  const std::size_t mtry = params.max_features == 0
                               ? std::max<std::size_t>(1, static_cast<std::size_t>(std::sqrt(static_cast<double>(nf))))
                               : std::min(params.max_features, nf);
  const std::size_t min_split = std::max<std::size_t>(params.min_samples_split, 2);
  const std::size_t n = train.rows.size();
  std::vector<DecisionTree> trees(params.trees);
#pragma omp parallel for schedule(dynamic, 1) if (exec == Exec::parallel)
  for (std::ptrdiff_t t = 0; t < static_cast<std::ptrdiff_t>(params.trees); ++t) {
    Rng rng(derive_seed(params.seed, static_cast<std::uint64_t>(t)));
    std::vector<std::uint32_t> boot(n);
    for (auto& b : boot) b = static_cast<std::uint32_t>(rng.below(n));
    trees[static_cast<std::size_t>(t)] = grow_tree(train, std::move(boot), mtry, min_split, rng);
  }
  return RandomForest(nf, std::move(trees));
}

namespace {
constexpr std::uint16_t kForestVersion = 1;
}

void save_forest(const RandomForest& forest, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  io::put_magic(out, "HSRF");
  io::put<std::uint16_t>(out, kForestVersion);
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(forest.feature_count()));
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(forest.trees().size()));
  for (const auto& t : forest.trees()) {
    io::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.nodes.size()));
    for (const auto& nd : t.nodes) {
      io::put<std::int32_t>(out, nd.feature);
      io::put<double>(out, nd.threshold);
      io::put<std::uint32_t>(out, nd.left);
      io::put<std::uint32_t>(out, nd.right);
      io::put<std::uint8_t>(out, nd.label);
    }
  }
  if (!out) throw IoError("write failed: " + path.string());
}

RandomForest load_forest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  io::expect_magic(in, "HSRF");
  if (io::get<std::uint16_t>(in, "version") != kForestVersion) throw FormatError("unsupported forest version");
  const auto nf = io::get<std::uint32_t>(in, "feature count");
  const auto nt = io::get<std::uint32_t>(in, "tree count");
  std::vector<DecisionTree> trees(nt);
  for (auto& t : trees) {
    const auto nn = io::get<std::uint32_t>(in, "node count");
    if (nn == 0) throw FormatError("empty tree");
    t.nodes.resize(nn);
    for (auto& nd : t.nodes) {
      nd.feature = io::get<std::int32_t>(in, "feature");
      nd.threshold = io::get<double>(in, "threshold");
      nd.left = io::get<std::uint32_t>(in, "left");
      nd.right = io::get<std::uint32_t>(in, "right");
      nd.label = io::get<std::uint8_t>(in, "label");
      if (nd.feature >= static_cast<std::int32_t>(nf) || (nd.feature >= 0 && (nd.left >= nn || nd.right >= nn))) {
        throw FormatError("corrupt tree node");
      }
    }
  }
  if (!io::at_end(in)) throw ShapeError("trailing bytes after the last tree");
  return RandomForest(nf, std::move(trees));
}

// --- MLP -------------------------------------------------------------------

namespace {

std::vector<nn::ExampleView> table_views(const FeatureTable& t) {
  std::vector<nn::ExampleView> v;
  v.reserve(t.rows.size());
  for (std::size_t i = 0; i < t.rows.size(); ++i) v.push_back({t.rows[i], t.labels[i]});
  return v;
}

}  // namespace

nn::TrainResult mlp_train(const FeatureTable& train, const MlpParams& params) {
  if (train.rows.empty()) throw DomainError("training table is empty");
  bool has0 = false, has1 = false;
  for (const int y : train.labels) (y == 1 ? has1 : has0) = true;
  if (!has0 || !has1) throw DomainError("MLP needs both classes in training");
  const auto views = table_views(train);
  return nn::train(nn::mlp_spec(train.rows.front().size(), params.hidden, 2), views, params.train);
}

std::vector<int> argmax_labels(const std::vector<std::vector<double>>& probabilities) {
  std::vector<int> out(probabilities.size());
  for (std::size_t i = 0; i < probabilities.size(); ++i) {
    const auto& p = probabilities[i];
    out[i] = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
  }
  return out;
}

std::vector<int> mlp_predict(const nn::Network& net, const FeatureTable& table, Exec exec) {
  const auto views = table_views(table);
  return argmax_labels(nn::predict_proba(net, views, 256, exec));
}

Metrics evaluate_network(const nn::Network& net, std::span<const LabeledExample> examples, Exec exec) {
  if (examples.empty()) throw DomainError("cannot evaluate an empty test set");
  const auto views = as_views(examples);
  const auto pred = argmax_labels(nn::predict_proba(net, views, 64, exec));
  std::vector<int> labels(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) labels[i] = static_cast<int>(examples[i].label);
  return evaluate(pred, labels);
}

}  // namespace hsi

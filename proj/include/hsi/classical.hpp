#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "hsi/dataset.hpp"
#include "hsi/nn.hpp"
#include "hsi/parallel.hpp"

namespace hsi {

/// Positive class is lgg (label 1).
struct ConfusionCounts {
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
  std::size_t total() const { return tp + tn + fp + fn; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

struct Metrics {
  ConfusionCounts counts;
  double accuracy = 0.0;
  double precision = 0.0;  ///< NaN when tp + fp == 0
  double recall = 0.0;     ///< NaN when tp + fn == 0
};

/// Throws DomainError on zero total.
Metrics metrics_from_counts(const ConfusionCounts& counts);
/// Labels and predictions are class indices (0 healthy, 1 lgg). Throws on
/// empty or unequal inputs.
Metrics evaluate(std::span<const int> predictions, std::span<const int> labels);

/// Mean spectrum over the tile's member pixels.
std::vector<double> tile_features(const PaddedPatch& patch);

struct FeatureTable {
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
};

FeatureTable feature_table(std::span<const LabeledExample> examples);

// --- random forest ---------------------------------------------------------

struct ForestParams {
  std::size_t trees = 100;
  std::size_t max_features = 0;  ///< per split; 0 means floor(sqrt(features))
  std::size_t min_samples_split = 2;
  std::uint64_t seed = 0;
};

struct TreeNode {
  std::int32_t feature = -1;  ///< -1 for a leaf
  double threshold = 0.0;     ///< go left when x[feature] <= threshold
  std::uint32_t left = 0, right = 0;
  std::uint8_t label = 0;  ///< leaf class
};

class DecisionTree {
 public:
  std::vector<TreeNode> nodes;
  int predict(std::span<const double> x) const;
};

struct ForestPrediction {
  int label = 0;
  double probability = 0.0;  ///< fraction of trees voting lgg
};

class RandomForest {
 public:
  RandomForest() = default;
  RandomForest(std::size_t features, std::vector<DecisionTree> trees);

  std::size_t feature_count() const { return features_; }
  const std::vector<DecisionTree>& trees() const { return trees_; }

  /// Majority vote; a 0.5 vote fraction goes to lgg.
  ForestPrediction predict(std::span<const double> x) const;
  std::vector<ForestPrediction> predict(const std::vector<std::vector<double>>& rows, Exec exec = Exec::parallel) const;

 private:
  std::size_t features_ = 0;
  std::vector<DecisionTree> trees_;
};

/// Bagged CART trees with Gini splits, tree i bootstrapped and split-sampled
/// from derive_seed(seed, i). Throws DomainError on a single-class set.
RandomForest rf_train(const FeatureTable& train, const ForestParams& params, Exec exec = Exec::parallel);

/// "HSRF", u16 version, u32 features, u32 trees, then per tree u32 node count
/// and nodes (i32 feature, f64 threshold, u32 left, u32 right, u8 label).
void save_forest(const RandomForest& forest, const std::filesystem::path& path);
RandomForest load_forest(const std::filesystem::path& path);

// --- MLP -------------------------------------------------------------------

struct MlpParams {
  std::size_t hidden = 64;
  nn::TrainConfig train;
};

/// features -> hidden (ReLU) -> 2 softmax, trained with the network engine.
nn::TrainResult mlp_train(const FeatureTable& train, const MlpParams& params);
std::vector<int> mlp_predict(const nn::Network& net, const FeatureTable& table, Exec exec = Exec::parallel);

/// Argmax prediction of a patch network on examples, scored with evaluate().
Metrics evaluate_network(const nn::Network& net, std::span<const LabeledExample> examples,
                         Exec exec = Exec::parallel);

std::vector<int> argmax_labels(const std::vector<std::vector<double>>& probabilities);

}  // namespace hsi

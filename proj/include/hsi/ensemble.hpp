#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hsi/nn.hpp"
#include "hsi/parallel.hpp"

namespace hsi {

inline constexpr int kUnknownLabel = 2;
/// Ground-truth marker for tiles of a class the ensemble never saw.
inline constexpr int kOutOfDistribution = -1;

struct Ensemble {
  std::vector<nn::Network> members;
  std::vector<std::uint64_t> member_seeds;
  std::uint64_t master_seed = 0;
  std::string normalization_ref;

  std::size_t size() const { return members.size(); }
};

struct EnsembleConfig {
  std::size_t members = 10;
  std::uint64_t master_seed = 0;
  /// seed / shuffle_seed are overridden per member.
  nn::TrainConfig train;
  /// Initialization seed of member i; default derive_seed(master, i).
  std::function<std::uint64_t(std::uint64_t master, std::size_t member)> member_seed;
  bool parallel_members = false;
};

/// Members share the data order stream (shuffle seed = master seed) and differ
/// only in their initialization seed. A failing member aborts with its index.
Ensemble train_ensemble(const nn::NetworkSpec& spec, std::span<const nn::ExampleView> train,
                        const EnsembleConfig& config);

struct EnsembleProbabilities {
  /// [example][member][class]
  std::vector<std::vector<std::vector<double>>> members;
  /// [example][class]; each class mean sums the member values in ascending
  /// order, so member order never changes it.
  std::vector<std::vector<double>> mean;
};

EnsembleProbabilities ensemble_predict(const Ensemble& ensemble, std::span<const nn::ExampleView> inputs,
                                       Exec exec = Exec::parallel);

struct ThresholdedPrediction {
  int label = kUnknownLabel;  ///< argmax class, or kUnknownLabel below tau
  double confidence = 0.0;    ///< max of the mean probability vector
  std::vector<double> mean;
  std::vector<std::vector<double>> members;
};

/// Throws DomainError unless tau lies in (0.5, 1].
void check_threshold(double tau);
ThresholdedPrediction apply_threshold(std::vector<double> mean, std::vector<std::vector<double>> members, double tau);
std::vector<ThresholdedPrediction> predict_thresholded(const Ensemble& ensemble,
                                                       std::span<const nn::ExampleView> inputs, double tau,
                                                       Exec exec = Exec::parallel);

struct CoverageRow {
  double tau = 0.0;
  std::size_t tiles = 0, unknown = 0;
  double unknown_fraction = 0.0;
  std::size_t confident = 0, confident_correct = 0;  ///< in-distribution tiles only
  double confident_accuracy = 0.0;                   ///< NaN when nothing is confident
  std::size_t in_distribution = 0, in_distribution_unknown = 0;
  std::size_t out_of_distribution = 0, out_of_distribution_unknown = 0;
  double in_distribution_unknown_rate = 0.0;
  double out_of_distribution_unknown_rate = 0.0;  ///< NaN without OOD tiles
};

/// `inputs[i].label` is the ground truth: 0/1, or kOutOfDistribution.
std::vector<CoverageRow> coverage_report(const Ensemble& ensemble, std::span<const nn::ExampleView> inputs,
                                         std::span<const double> taus, Exec exec = Exec::parallel);
std::vector<CoverageRow> coverage_from_probabilities(const std::vector<std::vector<double>>& mean,
                                                     std::span<const int> truth, std::span<const double> taus);

void save_coverage(std::span<const CoverageRow> rows, const std::filesystem::path& path);

/// Directory with member_NN.hsin files and manifest.json.
void save_ensemble(const Ensemble& ensemble, const std::filesystem::path& dir);
Ensemble load_ensemble(const std::filesystem::path& dir);

}  // namespace hsi

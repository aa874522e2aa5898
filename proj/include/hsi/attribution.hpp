#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hsi/classical.hpp"
#include "hsi/dataset.hpp"
#include "hsi/nn.hpp"
#include "hsi/parallel.hpp"

namespace hsi {

/// Reference inputs for expected gradients, flattened like the network input.
struct BaselineSet {
  std::vector<std::vector<double>> inputs;
};

/// Up to `per_class` training patches of each class (sampled without
/// replacement) plus, optionally, the all-zero patch.
BaselineSet make_baselines(std::span<const LabeledExample> train, std::size_t per_class, bool include_zero,
                           std::uint64_t seed);

/// Signed per-channel attribution of one input: the mean over `samples` draws
/// of (x - b) * d logit_target / dx evaluated at b + alpha (x - b), with b drawn
/// from the baselines and alpha ~ U(0, 1), summed over the spatial positions.
std::vector<double> expected_gradients(const nn::Network& net, std::span<const double> input,
                                       const BaselineSet& baselines, int target, std::size_t samples,
                                       std::uint64_t seed);

struct AttributionParams {
  std::size_t samples = 64;
  std::size_t baselines_per_class = 32;
  bool zero_baseline = true;
  std::uint64_t seed = 0;
  std::optional<int> target;  ///< fixed class; default is the predicted class
};

/// Per-channel importance of one model: mean over examples of the absolute
/// signed per-channel attribution. Example i uses seed derive_seed(seed, i).
std::vector<double> channel_importance(const nn::Network& net, std::span<const LabeledExample> examples,
                                       const BaselineSet& baselines, const AttributionParams& params,
                                       Exec exec = Exec::parallel);

struct ModelScores {
  std::string model_id;
  double accuracy = 0.0;
  std::vector<double> scores;
};

struct AttributionReport {
  std::vector<std::size_t> channels;  ///< band indices
  std::vector<double> wavelengths;
  std::vector<double> mean, stddev;
  std::vector<std::string> model_ids;  ///< models that passed the accuracy filter
  double accuracy_threshold = 0.8;
};

/// Scores are normalized per model to unit L1 norm of their absolute values;
/// mean and population standard deviation are taken over models whose accuracy
/// exceeds the threshold. Throws DomainError if none pass.
AttributionReport aggregate_importance(std::span<const ModelScores> models, std::span<const std::size_t> channels,
                                       std::span<const double> wavelengths, double accuracy_threshold = 0.8);

struct ChannelSubset {
  std::vector<std::size_t> bands;  ///< by descending importance, then ascending index
  std::string source;
};

ChannelSubset select_top_k(const AttributionReport& report, std::size_t k);

struct RetrainResult {
  nn::Network network;
  Metrics metrics;
  double accuracy_delta = 0.0;  ///< subset accuracy minus reference accuracy
};

/// Rebuilds the patches from the subset bands only and trains a network on
/// them without a compress layer.
RetrainResult retrain_on_subset(const ChannelSubset& subset, std::span<const LabeledExample> train,
                                std::span<const LabeledExample> test, const nn::TrainConfig& config,
                                double reference_accuracy, std::vector<std::size_t> block_features = {16, 32, 64});

void save_report(const AttributionReport& report, const std::filesystem::path& path);
AttributionReport load_report(const std::filesystem::path& path);

/// Text file: "# source <id>" then one "band wavelength" pair per line.
void save_subset(const ChannelSubset& subset, std::span<const double> wavelengths, const std::filesystem::path& path);
ChannelSubset load_subset(const std::filesystem::path& path);

}  // namespace hsi

#include "hsi/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>

#include <json.hpp>

#include "hsi/error.hpp"
#include "hsi/log.hpp"
#include "hsi/random.hpp"

namespace hsi {

namespace {

std::string member_file(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "member_%02zu.hsin", i);
  return buf;
}

double nan_or(double num, std::size_t den) {
  return den == 0 ? std::numeric_limits<double>::quiet_NaN() : num / static_cast<double>(den);
}

nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

}  // namespace

Ensemble train_ensemble(const nn::NetworkSpec& spec, std::span<const nn::ExampleView> train,
                        const EnsembleConfig& config) {
  if (config.members < 2) throw DomainError("an ensemble needs at least two members");
  Ensemble e;
  e.master_seed = config.master_seed;
  e.member_seeds.resize(config.members);
  for (std::size_t i = 0; i < config.members; ++i) {
    e.member_seeds[i] = config.member_seed ? config.member_seed(config.master_seed, i) : derive_seed(config.master_seed, i);
  }
  std::vector<std::optional<nn::Network>> nets(config.members);
  std::vector<std::string> failures(config.members);
#pragma omp parallel for schedule(dynamic, 1) if (config.parallel_members)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(config.members); ++i) {
    const auto m = static_cast<std::size_t>(i);
    nn::TrainConfig tc = config.train;
    tc.seed = e.member_seeds[m];
    tc.shuffle_seed = config.master_seed;
    try {
      nets[m] = nn::train(spec, train, tc).network;
    } catch (const std::exception& ex) {
      failures[m] = ex.what();
    }
  }
  for (std::size_t m = 0; m < config.members; ++m) {
    if (!failures[m].empty()) throw Error("ensemble member " + std::to_string(m) + " failed: " + failures[m]);
    e.members.push_back(std::move(*nets[m]));
    log::info("ensemble member " + std::to_string(m) + " trained");
  }
  return e;
}

EnsembleProbabilities ensemble_predict(const Ensemble& ensemble, std::span<const nn::ExampleView> inputs, Exec exec) {
  if (ensemble.members.empty()) throw DomainError("ensemble has no members");
  const std::size_t k = ensemble.members.size(), n = inputs.size();
  std::vector<std::vector<std::vector<double>>> per_member(k);
  for (std::size_t m = 0; m < k; ++m) per_member[m] = nn::predict_proba(ensemble.members[m], inputs, 64, exec);
  EnsembleProbabilities out;
  out.members.resize(n);
  out.mean.resize(n);
  std::vector<double> column(k);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t classes = per_member[0][i].size();
    out.members[i].resize(k);
    for (std::size_t m = 0; m < k; ++m) out.members[i][m] = per_member[m][i];
    out.mean[i].assign(classes, 0.0);
    for (std::size_t c = 0; c < classes; ++c) {
      for (std::size_t m = 0; m < k; ++m) column[m] = per_member[m][i][c];
      std::sort(column.begin(), column.end());
      double s = 0.0;
      for (const double v : column) s += v;
      out.mean[i][c] = s / static_cast<double>(k);
    }
  }
  return out;
}

void check_threshold(double tau) {
  if (!(tau > 0.5 && tau <= 1.0)) throw DomainError("threshold must lie in (0.5, 1]");
}

ThresholdedPrediction apply_threshold(std::vector<double> mean, std::vector<std::vector<double>> members, double tau) {
  check_threshold(tau);
  if (mean.empty()) throw DomainError("empty probability vector");
  ThresholdedPrediction p;
  const auto it = std::max_element(mean.begin(), mean.end());
  p.confidence = *it;
  p.label = p.confidence >= tau ? static_cast<int>(it - mean.begin()) : kUnknownLabel;
  p.mean = std::move(mean);
  p.members = std::move(members);
  return p;
}

std::vector<ThresholdedPrediction> predict_thresholded(const Ensemble& ensemble,
                                                       std::span<const nn::ExampleView> inputs, double tau,
                                                       Exec exec) {
  check_threshold(tau);
  auto probs = ensemble_predict(ensemble, inputs, exec);
  std::vector<ThresholdedPrediction> out;
  out.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    out.push_back(apply_threshold(std::move(probs.mean[i]), std::move(probs.members[i]), tau));
  }
  return out;
}

std::vector<CoverageRow> coverage_from_probabilities(const std::vector<std::vector<double>>& mean,
                                                     std::span<const int> truth, std::span<const double> taus) {
  if (mean.empty()) throw DomainError("coverage needs at least one tile");
  if (truth.size() != mean.size()) throw ShapeError("truth count differs from prediction count");
  std::vector<CoverageRow> rows;
  for (const double tau : taus) {
    check_threshold(tau);
    CoverageRow r;
    r.tau = tau;
    r.tiles = mean.size();
    for (std::size_t i = 0; i < mean.size(); ++i) {
      const auto it = std::max_element(mean[i].begin(), mean[i].end());
      const bool unknown = !(*it >= tau);
      const bool ood = truth[i] == kOutOfDistribution;
      r.unknown += unknown ? 1 : 0;
      if (ood) {
        ++r.out_of_distribution;
        r.out_of_distribution_unknown += unknown ? 1 : 0;
      } else {
        ++r.in_distribution;
        r.in_distribution_unknown += unknown ? 1 : 0;
        if (!unknown) {
          ++r.confident;
          r.confident_correct += static_cast<int>(it - mean[i].begin()) == truth[i] ? 1 : 0;
        }
      }
    }
    r.unknown_fraction = nan_or(static_cast<double>(r.unknown), r.tiles);
    r.confident_accuracy = nan_or(static_cast<double>(r.confident_correct), r.confident);
    r.in_distribution_unknown_rate = nan_or(static_cast<double>(r.in_distribution_unknown), r.in_distribution);
    r.out_of_distribution_unknown_rate =
        nan_or(static_cast<double>(r.out_of_distribution_unknown), r.out_of_distribution);
    rows.push_back(r);
  }
  return rows;
}

std::vector<CoverageRow> coverage_report(const Ensemble& ensemble, std::span<const nn::ExampleView> inputs,
                                         std::span<const double> taus, Exec exec) {
  if (inputs.empty()) throw DomainError("coverage needs at least one tile");
  const auto probs = ensemble_predict(ensemble, inputs, exec);
  std::vector<int> truth(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) truth[i] = inputs[i].label;
  return coverage_from_probabilities(probs.mean, truth, taus);
}

void save_coverage(std::span<const CoverageRow> rows, const std::filesystem::path& path) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows) {
    j.push_back({{"tau", r.tau},
                 {"tiles", r.tiles},
                 {"unknown", r.unknown},
                 {"unknown_fraction", number_or_null(r.unknown_fraction)},
                 {"confident", r.confident},
                 {"confident_accuracy", number_or_null(r.confident_accuracy)},
                 {"in_distribution", r.in_distribution},
                 {"in_distribution_unknown_rate", number_or_null(r.in_distribution_unknown_rate)},
                 {"out_of_distribution", r.out_of_distribution},
                 {"out_of_distribution_unknown_rate", number_or_null(r.out_of_distribution_unknown_rate)}});
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << j.dump(2) << '\n';
}

void save_ensemble(const Ensemble& ensemble, const std::filesystem::path& dir) {
  if (ensemble.members.empty()) throw DomainError("ensemble has no members");
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["master_seed"] = ensemble.master_seed;
  manifest["normalization"] = ensemble.normalization_ref;
  manifest["spec"] = nlohmann::json::parse(nn::spec_to_json(ensemble.members.front().spec()));
  manifest["members"] = nlohmann::json::array();
  for (std::size_t i = 0; i < ensemble.members.size(); ++i) {
    const std::string file = member_file(i);
    nn::save_network(ensemble.members[i], dir / file, ensemble.normalization_ref);
    manifest["members"].push_back({{"file", file}, {"seed", ensemble.member_seeds.at(i)}});
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw IoError("cannot write ensemble manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
}

Ensemble load_ensemble(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("no ensemble manifest in " + dir.string());
  Ensemble e;
  try {
    const auto manifest = nlohmann::json::parse(in);
    e.master_seed = manifest.at("master_seed").get<std::uint64_t>();
    e.normalization_ref = manifest.at("normalization").get<std::string>();
    for (const auto& m : manifest.at("members")) {
      e.members.push_back(nn::load_network(dir / m.at("file").get<std::string>()));
      e.member_seeds.push_back(m.at("seed").get<std::uint64_t>());
    }
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("invalid ensemble manifest: ") + ex.what());
  }
  if (e.members.size() < 2) throw FormatError("ensemble manifest lists fewer than two members");
  for (const auto& m : e.members) {
    if (m.spec() != e.members.front().spec()) throw FormatError("ensemble members disagree on their spec");
  }
  return e;
}

}  // namespace hsi

#include "hsi/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "hsi/config.hpp"
#include "hsi/error.hpp"
#include "hsi/log.hpp"
#include "hsi/random.hpp"

namespace hsi {

namespace {
constexpr std::size_t kSampleChunk = 16;
}

BaselineSet make_baselines(std::span<const LabeledExample> train, std::size_t per_class, bool include_zero,
                           std::uint64_t seed) {
  BaselineSet set;
  for (const auto cls : {BinaryLabel::healthy, BinaryLabel::lgg}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < train.size(); ++i) {
      if (train[i].label == cls) idx.push_back(i);
    }
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(cls)));
    const std::size_t take = std::min(per_class, idx.size());
    for (std::size_t i = 0; i < take; ++i) {
      std::swap(idx[i], idx[i + static_cast<std::size_t>(rng.below(idx.size() - i))]);
      set.inputs.push_back(train[idx[i]].patch.values);
    }
  }
  if (include_zero) {
    const std::size_t n = train.empty() ? 0 : train.front().patch.values.size();
    set.inputs.emplace_back(n, 0.0);
  }
  return set;
}

std::vector<double> expected_gradients(const nn::Network& net, std::span<const double> input,
                                       const BaselineSet& baselines, int target, std::size_t samples,
                                       std::uint64_t seed) {
  if (baselines.inputs.empty()) throw DomainError("expected gradients needs at least one baseline");
  if (samples == 0) throw DomainError("expected gradients needs at least one sample");
  const nn::Shape3 shape = net.spec().input;
  if (input.size() != shape.size()) throw ShapeError("input does not match the network input shape");
  for (const auto& b : baselines.inputs) {
    if (b.size() != shape.size()) throw ShapeError("baseline does not match the network input shape");
  }
  if (target < 0 || static_cast<std::size_t>(target) >= net.classes()) throw DomainError("target class out of range");

  Rng rng(seed);
  std::vector<std::size_t> which(samples);
  std::vector<double> alpha(samples);
  for (std::size_t s = 0; s < samples; ++s) {
    which[s] = static_cast<std::size_t>(rng.below(baselines.inputs.size()));
    alpha[s] = rng.uniform();
  }

  nn::Network local(net);
  const std::size_t c = shape.c, area = shape.h * shape.w;
  std::vector<double> total(c, 0.0);
  for (std::size_t s0 = 0; s0 < samples; s0 += kSampleChunk) {
    const std::size_t m = std::min(kSampleChunk, samples - s0);
    nn::Tensor4 x(m, shape);
    for (std::size_t i = 0; i < m; ++i) {
      const auto& b = baselines.inputs[which[s0 + i]];
      auto dst = x.sample(i);
      for (std::size_t q = 0; q < dst.size(); ++q) dst[q] = b[q] + alpha[s0 + i] * (input[q] - b[q]);
    }
    const std::vector<int> targets(m, target);
    const nn::Tensor4 g = local.input_gradient(x, targets);
    for (std::size_t i = 0; i < m; ++i) {
      const auto& b = baselines.inputs[which[s0 + i]];
      const auto gs = g.sample(i);
      for (std::size_t p = 0; p < area; ++p) {
        for (std::size_t k = 0; k < c; ++k) {
          const std::size_t q = p * c + k;
          total[k] += (input[q] - b[q]) * gs[q];
        }
      }
    }
  }
  for (auto& v : total) v /= static_cast<double>(samples);
  return total;
}

std::vector<double> channel_importance(const nn::Network& net, std::span<const LabeledExample> examples,
                                       const BaselineSet& baselines, const AttributionParams& params, Exec exec) {
  if (examples.empty()) throw DomainError("no examples to attribute");
  const std::size_t c = net.spec().input.c;
  std::vector<std::vector<double>> per_example(examples.size());
#pragma omp parallel if (exec == Exec::parallel)
  {
    nn::Network local(net);
#pragma omp for schedule(dynamic, 1)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(examples.size()); ++i) {
      const auto& ex = examples[static_cast<std::size_t>(i)];
      int target = 0;
      if (params.target) {
        target = *params.target;
      } else {
        nn::Tensor4 x(1, local.spec().input);
        if (ex.patch.values.size() != x.v.size()) throw ShapeError("example does not match the network input");
        std::copy(ex.patch.values.begin(), ex.patch.values.end(), x.v.begin());
        const auto p = local.forward(x, nn::Mode::eval).sample(0);
        target = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
      }
      per_example[static_cast<std::size_t>(i)] =
          expected_gradients(local, ex.patch.values, baselines, target, params.samples,
                             derive_seed(params.seed, static_cast<std::uint64_t>(i)));
    }
  }
  std::vector<double> mean(c, 0.0);
  for (const auto& s : per_example) {
    for (std::size_t k = 0; k < c; ++k) mean[k] += std::abs(s[k]);
  }
  for (auto& v : mean) v /= static_cast<double>(examples.size());
  return mean;
}

AttributionReport aggregate_importance(std::span<const ModelScores> models, std::span<const std::size_t> channels,
                                       std::span<const double> wavelengths, double accuracy_threshold) {
  if (wavelengths.size() != channels.size()) throw ShapeError("wavelength list differs from channel list");
  AttributionReport r;
  r.channels.assign(channels.begin(), channels.end());
  r.wavelengths.assign(wavelengths.begin(), wavelengths.end());
  r.accuracy_threshold = accuracy_threshold;
  const std::size_t c = channels.size();
  std::vector<std::vector<double>> normalized;
  for (const auto& m : models) {
    if (m.scores.size() != c) throw ShapeError("model '" + m.model_id + "' has the wrong number of scores");
    if (!(m.accuracy > accuracy_threshold)) {
      log::info("model '" + m.model_id + "' excluded from aggregation (accuracy " + format_double(m.accuracy) + ")");
      continue;
    }
    double l1 = 0.0;
    for (const double v : m.scores) l1 += std::abs(v);
    std::vector<double> n(c, 0.0);
    if (l1 > 0.0) {
      for (std::size_t k = 0; k < c; ++k) n[k] = std::abs(m.scores[k]) / l1;
    }
    normalized.push_back(std::move(n));
    r.model_ids.push_back(m.model_id);
  }
  if (normalized.empty()) throw DomainError("no model passes the accuracy filter");
  const double n = static_cast<double>(normalized.size());
  r.mean.assign(c, 0.0);
  r.stddev.assign(c, 0.0);
  for (const auto& s : normalized) {
    for (std::size_t k = 0; k < c; ++k) r.mean[k] += s[k];
  }
  for (auto& v : r.mean) v /= n;
  for (const auto& s : normalized) {
    for (std::size_t k = 0; k < c; ++k) r.stddev[k] += (s[k] - r.mean[k]) * (s[k] - r.mean[k]);
  }
  for (auto& v : r.stddev) v = std::sqrt(v / n);
  return r;
}

ChannelSubset select_top_k(const AttributionReport& report, std::size_t k) {
  if (k == 0) throw DomainError("k must be positive");
  if (k > report.channels.size()) throw DomainError("k exceeds the channel count");
  std::vector<std::size_t> order(report.channels.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (report.mean[a] != report.mean[b]) return report.mean[a] > report.mean[b];
    return report.channels[a] < report.channels[b];
  });
  ChannelSubset s;
  for (std::size_t i = 0; i < k; ++i) s.bands.push_back(report.channels[order[i]]);
  std::string ids;
  for (const auto& id : report.model_ids) ids += (ids.empty() ? "" : ",") + id;
  s.source = "top" + std::to_string(k) + ":" + ids;
  return s;
}

RetrainResult retrain_on_subset(const ChannelSubset& subset, std::span<const LabeledExample> train,
                                std::span<const LabeledExample> test, const nn::TrainConfig& config,
                                double reference_accuracy, std::vector<std::size_t> block_features) {
  if (subset.bands.empty()) throw DomainError("channel subset is empty");
  if (train.empty() || test.empty()) throw DomainError("retraining needs train and test examples");
  const auto sub_train = select_channels(train, subset.bands);
  const auto sub_test = select_channels(test, subset.bands);
  const auto spec =
      nn::tissue_cnn_spec(subset.bands.size(), std::nullopt, std::move(block_features), train.front().patch.side, 2);
  const auto views = as_views(sub_train);
  auto trained = nn::train(spec, views, config);
  RetrainResult r{std::move(trained.network), {}, 0.0};
  r.metrics = evaluate_network(r.network, sub_test);
  r.accuracy_delta = r.metrics.accuracy - reference_accuracy;
  return r;
}

void save_report(const AttributionReport& report, const std::filesystem::path& path) {
  nlohmann::json j;
  j["accuracy_threshold"] = report.accuracy_threshold;
  j["models"] = report.model_ids;
  j["channels"] = nlohmann::json::array();
  for (std::size_t k = 0; k < report.channels.size(); ++k) {
    j["channels"].push_back({{"band", report.channels[k]},
                             {"wavelength_nm", report.wavelengths[k]},
                             {"mean", report.mean[k]},
                             {"std", report.stddev[k]}});
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << j.dump(2) << '\n';
}

AttributionReport load_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  try {
    const auto j = nlohmann::json::parse(in);
    AttributionReport r;
    r.accuracy_threshold = j.at("accuracy_threshold").get<double>();
    r.model_ids = j.at("models").get<std::vector<std::string>>();
    for (const auto& c : j.at("channels")) {
      r.channels.push_back(c.at("band").get<std::size_t>());
      r.wavelengths.push_back(c.at("wavelength_nm").get<double>());
      r.mean.push_back(c.at("mean").get<double>());
      r.stddev.push_back(c.at("std").get<double>());
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid attribution report: ") + e.what());
  }
}

void save_subset(const ChannelSubset& subset, std::span<const double> wavelengths, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << "# source " << subset.source << '\n';
  for (const auto b : subset.bands) {
    out << b;
    if (b < wavelengths.size()) out << ' ' << format_double(wavelengths[b]);
    out << '\n';
  }
}

ChannelSubset load_subset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  ChannelSubset s;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.rfind("# source ", 0) == 0) {
      s.source = line.substr(9);
      continue;
    }
    if (line[0] == '#') continue;
    std::istringstream ls(line);
    long long band = -1;
    if (!(ls >> band) || band < 0) throw FormatError("bad band entry in subset file: '" + line + "'");
    const auto b = static_cast<std::size_t>(band);
    if (std::find(s.bands.begin(), s.bands.end(), b) != s.bands.end()) throw FormatError("duplicate band in subset");
    s.bands.push_back(b);
  }
  if (s.bands.empty()) throw FormatError("subset file lists no bands");
  return s;
}

}  // namespace hsi

#include "hsi/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include <json.hpp>

#include "hsi/binary_io.hpp"
#include "hsi/error.hpp"
#include "hsi/log.hpp"
#include "hsi/random.hpp"

namespace hsi {

namespace {

constexpr std::uint16_t kPatchFileVersion = 1;
constexpr const char* kLabelMap = "0=healthy,1=lgg";

void check_fraction(double f) {
  if (!(f > 0.0 && f < 1.0)) throw DomainError("train fraction must lie strictly between 0 and 1");
}

void check_partitions(const Dataset& d) {
  const auto describe = [](const ClassBalance& b) {
    return std::to_string(b.healthy) + " healthy / " + std::to_string(b.lgg) + " lgg";
  };
  if (d.train_balance.healthy == 0 || d.train_balance.lgg == 0 || d.test_balance.healthy == 0 ||
      d.test_balance.lgg == 0) {
    throw DomainError("split leaves a class empty (train " + describe(d.train_balance) + ", test " +
                      describe(d.test_balance) + ")");
  }
}

std::size_t position_of(std::span<const std::size_t> channels, std::size_t band) {
  const auto it = std::find(channels.begin(), channels.end(), band);
  if (it == channels.end()) throw DomainError("band " + std::to_string(band) + " is not present in the patch");
  return static_cast<std::size_t>(it - channels.begin());
}

}  // namespace

const char* to_string(BinaryLabel label) { return label == BinaryLabel::healthy ? "healthy" : "lgg"; }

std::optional<BinaryLabel> binary_label(int class_id) {
  switch (class_id) {
    case static_cast<int>(TissueClass::healthy):
    case static_cast<int>(TissueClass::histo_healthy): return BinaryLabel::healthy;
    case static_cast<int>(TissueClass::lgg):
    case static_cast<int>(TissueClass::histo_lgg): return BinaryLabel::lgg;
    default: return std::nullopt;
  }
}

const char* to_string(SplitMode mode) { return mode == SplitMode::random_tile ? "random-tile" : "by-patient"; }

SplitMode split_mode_from_string(const std::string& name) {
  if (name == "random-tile") return SplitMode::random_tile;
  if (name == "by-patient") return SplitMode::by_patient;
  throw DomainError("unknown split mode '" + name + "'");
}

ClassBalance class_balance(std::span<const LabeledExample> examples) {
  ClassBalance b;
  for (const auto& e : examples) (e.label == BinaryLabel::healthy ? b.healthy : b.lgg) += 1;
  return b;
}

SceneTiles tile_scene(const Scene& scene, const TilingParams& params, Exec exec) {
  if (scene.mask.height() != scene.cube.height() || scene.mask.width() != scene.cube.width()) {
    throw ShapeError("annotation mask of scene '" + scene.id + "' does not match the cube");
  }
  SceneTiles out;
  TileMap map = slic_segment(scene.cube, params.slic, exec);
  label_tiles(map, scene.mask);
  out.map = filter_tiles(std::move(map), params.filter);
  const std::vector<std::size_t> channels =
      params.channels.empty() ? all_channels(scene.cube.bands()) : params.channels;
  const std::string patient = scene.patient_id.empty() ? scene.id : scene.patient_id;
  for (const auto& tile : out.map.tiles) {
    if (!tile.quality_pass) continue;
    const auto label = binary_label(tile.label);
    if (!label) {
      ++out.other_class_skipped;
      continue;
    }
    if (!tile.fits(params.side)) {
      ++out.oversize_skipped;
      continue;
    }
    LabeledExample ex;
    ex.patch = extract_patch(scene.cube, tile, channels, params.side);
    ex.label = *label;
    ex.scene_id = scene.id;
    ex.patient_id = patient;
    ex.tile_id = tile.id;
    out.examples.push_back(std::move(ex));
  }
  if (out.oversize_skipped > 0) {
    log::warn("scene '" + scene.id + "': skipped " + std::to_string(out.oversize_skipped) +
              " passing tiles whose bounding box exceeds " + std::to_string(params.side) + "x" +
              std::to_string(params.side));
  }
  return out;
}

std::size_t train_count(std::size_t n, double train_fraction) {
  check_fraction(train_fraction);
  return static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
}

Dataset split_examples(std::vector<LabeledExample> examples, const SplitSpec& split) {
  check_fraction(split.train_fraction);
  if (examples.empty()) throw DomainError("no examples to split");
  Dataset d;
  Rng rng(derive_seed(split.seed, 0x5B117));
  if (split.mode == SplitMode::random_tile) {
    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(order));
    const std::size_t n_train = train_count(examples.size(), split.train_fraction);
    std::vector<std::uint8_t> in_train(examples.size(), 0);
    for (std::size_t i = 0; i < n_train; ++i) in_train[order[i]] = 1;
    // Keep the original order inside each partition.
    for (std::size_t i = 0; i < examples.size(); ++i) {
      (in_train[i] ? d.train : d.test).push_back(std::move(examples[i]));
    }
  } else {
    std::vector<std::string> patients;
    {
      std::set<std::string> unique;
      for (const auto& e : examples) unique.insert(e.patient_id);
      patients.assign(unique.begin(), unique.end());
    }
    if (patients.size() < 2) throw DomainError("by-patient split needs at least two patients");
    rng.shuffle(std::span<std::string>(patients));
    const std::size_t n_train =
        std::clamp<std::size_t>(train_count(patients.size(), split.train_fraction), 1, patients.size() - 1);
    const std::set<std::string> train_patients(patients.begin(), patients.begin() + static_cast<std::ptrdiff_t>(n_train));
    for (auto& e : examples) (train_patients.count(e.patient_id) ? d.train : d.test).push_back(std::move(e));
  }
  d.train_balance = class_balance(d.train);
  d.test_balance = class_balance(d.test);
  check_partitions(d);
  log::info("split " + std::string(to_string(split.mode)) + ": train " + std::to_string(d.train.size()) + " (" +
            std::to_string(d.train_balance.healthy) + " healthy, " + std::to_string(d.train_balance.lgg) +
            " lgg), test " + std::to_string(d.test.size()) + " (" + std::to_string(d.test_balance.healthy) +
            " healthy, " + std::to_string(d.test_balance.lgg) + " lgg)");
  return d;
}

Dataset build_dataset(std::span<const Scene> scenes, const TilingParams& tiling, const SplitSpec& split, Exec exec) {
  if (scenes.empty()) throw DomainError("no scenes given");
  std::vector<SceneTiles> per_scene(scenes.size());
  // Scenes in parallel; SLIC inside each runs serially to avoid nested teams.
#pragma omp parallel for schedule(dynamic, 1) if (exec == Exec::parallel && scenes.size() > 1)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(scenes.size()); ++i) {
    per_scene[static_cast<std::size_t>(i)] =
        tile_scene(scenes[static_cast<std::size_t>(i)], tiling, scenes.size() > 1 ? Exec::serial : exec);
  }
  std::vector<LabeledExample> all;
  std::size_t oversize = 0;
  for (auto& s : per_scene) {
    oversize += s.oversize_skipped;
    for (auto& e : s.examples) all.push_back(std::move(e));
  }
  const auto balance = class_balance(all);
  if (balance.healthy == 0 || balance.lgg == 0) throw DomainError("scenes do not contain both classes after filtration");
  Dataset d = split_examples(std::move(all), split);
  d.oversize_skipped = oversize;
  return d;
}

NormalizationParams fit_normalization(std::span<const LabeledExample> train) {
  if (train.empty()) throw DomainError("cannot fit normalization on an empty training set");
  NormalizationParams p;
  p.channels = train.front().patch.channels;
  const std::size_t c = p.channels.size();
  std::vector<double> sum(c, 0.0);
  std::size_t count = 0;
  for (const auto& e : train) {
    if (e.patch.channels != p.channels) throw ShapeError("training patches disagree on their channel list");
    const std::size_t area = e.patch.side * e.patch.side;
    for (std::size_t q = 0; q < area; ++q) {
      if (!e.patch.member[q]) continue;
      const double* v = e.patch.values.data() + q * c;
      for (std::size_t k = 0; k < c; ++k) sum[k] += v[k];
      ++count;
    }
  }
  if (count == 0) throw DomainError("training patches contain no member pixels");
  p.mean.resize(c);
  for (std::size_t k = 0; k < c; ++k) p.mean[k] = sum[k] / static_cast<double>(count);
  std::vector<double> ss(c, 0.0);
  for (const auto& e : train) {
    const std::size_t area = e.patch.side * e.patch.side;
    for (std::size_t q = 0; q < area; ++q) {
      if (!e.patch.member[q]) continue;
      const double* v = e.patch.values.data() + q * c;
      for (std::size_t k = 0; k < c; ++k) ss[k] += (v[k] - p.mean[k]) * (v[k] - p.mean[k]);
    }
  }
  p.stddev.resize(c);
  for (std::size_t k = 0; k < c; ++k) {
    p.stddev[k] = std::sqrt(ss[k] / static_cast<double>(count));
    if (!(p.stddev[k] > 0.0)) {
      log::warn("channel " + std::to_string(p.channels[k]) + " has zero variance; using unit scale");
      p.stddev[k] = 1.0;
    }
  }
  return p;
}

void apply_normalization(const NormalizationParams& params, PaddedPatch& patch) {
  if (patch.channels != params.channels) throw ShapeError("patch channels differ from the normalization channels");
  const std::size_t c = params.channels.size();
  const std::size_t area = patch.side * patch.side;
  for (std::size_t q = 0; q < area; ++q) {
    if (!patch.member[q]) continue;
    double* v = patch.values.data() + q * c;
    for (std::size_t k = 0; k < c; ++k) v[k] = (v[k] - params.mean[k]) / params.stddev[k];
  }
}

void apply_normalization(const NormalizationParams& params, std::span<LabeledExample> examples) {
  for (auto& e : examples) apply_normalization(params, e.patch);
}

NormalizationParams standardize(std::vector<LabeledExample>& train, std::vector<LabeledExample>& test) {
  NormalizationParams p = fit_normalization(train);
  apply_normalization(p, train);
  apply_normalization(p, test);
  return p;
}

PaddedPatch select_channels(const PaddedPatch& patch, std::span<const std::size_t> bands) {
  if (bands.empty()) throw DomainError("channel subset is empty");
  std::vector<std::size_t> pos(bands.size());
  for (std::size_t i = 0; i < bands.size(); ++i) pos[i] = position_of(patch.channels, bands[i]);
  PaddedPatch out;
  out.side = patch.side;
  out.channels.assign(bands.begin(), bands.end());
  out.member = patch.member;
  out.tile_id = patch.tile_id;
  out.label = patch.label;
  const std::size_t area = patch.side * patch.side, c_in = patch.channels.size(), c_out = bands.size();
  out.values.assign(area * c_out, 0.0);
  for (std::size_t q = 0; q < area; ++q) {
    for (std::size_t k = 0; k < c_out; ++k) out.values[q * c_out + k] = patch.values[q * c_in + pos[k]];
  }
  return out;
}

std::vector<LabeledExample> select_channels(std::span<const LabeledExample> examples,
                                            std::span<const std::size_t> bands) {
  std::vector<LabeledExample> out;
  out.reserve(examples.size());
  for (const auto& e : examples) {
    LabeledExample s;
    s.patch = select_channels(e.patch, bands);
    s.label = e.label;
    s.scene_id = e.scene_id;
    s.patient_id = e.patient_id;
    s.tile_id = e.tile_id;
    out.push_back(std::move(s));
  }
  return out;
}

NormalizationParams select_channels(const NormalizationParams& params, std::span<const std::size_t> bands) {
  NormalizationParams out;
  for (const auto b : bands) {
    const std::size_t k = position_of(params.channels, b);
    out.channels.push_back(b);
    out.mean.push_back(params.mean[k]);
    out.stddev.push_back(params.stddev[k]);
  }
  return out;
}

std::vector<nn::ExampleView> as_views(std::span<const LabeledExample> examples) {
  std::vector<nn::ExampleView> v;
  v.reserve(examples.size());
  for (const auto& e : examples) v.push_back({e.patch.values, static_cast<int>(e.label)});
  return v;
}

void save_examples(std::span<const LabeledExample> examples, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  const std::size_t side = examples.empty() ? kPatchSide : examples.front().patch.side;
  const std::vector<std::size_t> channels = examples.empty() ? std::vector<std::size_t>{} : examples.front().patch.channels;
  io::put_magic(out, "HSIP");
  io::put<std::uint16_t>(out, kPatchFileVersion);
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(examples.size()));
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(side));
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(channels.size()));
  for (const auto c : channels) io::put<std::uint32_t>(out, static_cast<std::uint32_t>(c));
  io::put_string(out, kLabelMap);
  for (const auto& e : examples) {
    if (e.patch.side != side || e.patch.channels != channels) throw ShapeError("patches differ in shape");
    io::put<std::uint8_t>(out, static_cast<std::uint8_t>(e.label));
    io::put<std::uint32_t>(out, e.tile_id);
    io::put_string(out, e.scene_id);
    io::put_string(out, e.patient_id);
    io::put_array<std::uint8_t>(out, e.patch.member);
    io::put_array<double>(out, e.patch.values);
  }
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<LabeledExample> load_examples(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  io::expect_magic(in, "HSIP");
  if (io::get<std::uint16_t>(in, "version") != kPatchFileVersion) throw FormatError("unsupported patch file version");
  const auto count = io::get<std::uint32_t>(in, "count");
  const auto side = io::get<std::uint32_t>(in, "side");
  const auto nch = io::get<std::uint32_t>(in, "channel count");
  if (side == 0 || side > 4096 || nch > 65536) throw FormatError("implausible patch dimensions");
  std::vector<std::size_t> channels(nch);
  for (auto& c : channels) c = io::get<std::uint32_t>(in, "channel");
  if (io::get_string(in, "label map") != kLabelMap) throw FormatError("unexpected label map");
  std::vector<LabeledExample> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    LabeledExample e;
    const auto label = io::get<std::uint8_t>(in, "label");
    if (label > 1) throw FormatError("label outside the two-class map");
    e.label = static_cast<BinaryLabel>(label);
    e.tile_id = io::get<std::uint32_t>(in, "tile id");
    e.scene_id = io::get_string(in, "scene id");
    e.patient_id = io::get_string(in, "patient id");
    e.patch.side = side;
    e.patch.channels = channels;
    e.patch.tile_id = e.tile_id;
    e.patch.member.resize(static_cast<std::size_t>(side) * side);
    io::get_array<std::uint8_t>(in, e.patch.member, "member mask");
    e.patch.values.resize(static_cast<std::size_t>(side) * side * nch);
    io::get_array<double>(in, e.patch.values, "patch values");
    out.push_back(std::move(e));
  }
  if (!io::at_end(in)) throw ShapeError("trailing bytes after the last patch record");
  return out;
}

void save_normalization(const NormalizationParams& params, const std::filesystem::path& path) {
  nlohmann::json j;
  j["channels"] = params.channels;
  j["mean"] = params.mean;
  j["std"] = params.stddev;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << j.dump(2) << '\n';
}

NormalizationParams load_normalization(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  try {
    const auto j = nlohmann::json::parse(in);
    NormalizationParams p;
    p.channels = j.at("channels").get<std::vector<std::size_t>>();
    p.mean = j.at("mean").get<std::vector<double>>();
    p.stddev = j.at("std").get<std::vector<double>>();
    if (p.mean.size() != p.channels.size() || p.stddev.size() != p.channels.size()) {
      throw FormatError("normalization arrays differ in length");
    }
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid normalization file: ") + e.what());
  }
}

}  // namespace hsi

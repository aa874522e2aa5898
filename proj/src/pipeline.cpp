#include "hsi/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "hsi/binary_io.hpp"
#include "hsi/classical.hpp"
#include "hsi/error.hpp"
#include "hsi/log.hpp"
#include "hsi/random.hpp"

namespace hsi {

namespace fs = std::filesystem;
using nlohmann::json;

// --- inference and rendering ------------------------------------------------

namespace {

std::vector<double> patch_input(const HsiCube& cube, const Tile& tile, const NormalizationParams& norm,
                                std::size_t side) {
  PaddedPatch p = extract_patch(cube, tile, norm.channels, side);
  apply_normalization(norm, p);
  return std::move(p.values);
}

}  // namespace

void score_prediction(PredictionMap& map, const AnnotationMask& mask) {
  if (mask.height() != map.height || mask.width() != map.width) throw ShapeError("mask does not match the map");
  std::size_t annotated = 0, decided = 0, correct = 0;
  for (std::size_t i = 0; i < map.labels.size(); ++i) {
    const auto truth = binary_label(mask.at(i));
    if (!truth) continue;
    ++annotated;
    const int pred = map.labels[i];
    if (pred != 0 && pred != 1) continue;
    ++decided;
    correct += pred == static_cast<int>(*truth) ? 1 : 0;
  }
  map.annotated_pixels = annotated;
  map.decided_pixels = decided;
  map.accuracy = decided > 0 ? std::optional<double>(static_cast<double>(correct) / static_cast<double>(decided))
                             : std::nullopt;
}

PredictionMap infer_full_image(const Ensemble& model, const NormalizationParams& normalization, const HsiCube& cube,
                               const SlicParams& slic, std::optional<double> tau, const AnnotationMask* mask,
                               Exec exec) {
  if (model.members.empty()) throw DomainError("no model to infer with");
  const nn::Shape3 in = model.members.front().spec().input;
  if (in.c != normalization.channels.size()) throw ShapeError("model channels differ from the normalization channels");
  for (const auto c : normalization.channels) {
    if (c >= cube.bands()) throw ShapeError("model expects band " + std::to_string(c) + " beyond the cube's bands");
  }
  if (tau) check_threshold(*tau);
  if (cube.valid_count() == 0) throw DomainError("cube has no valid pixels; nothing to segment");

  PredictionMap out;
  out.height = cube.height();
  out.width = cube.width();
  out.tiles = slic_segment(cube, slic, exec);
  if (out.tiles.tiles.empty()) throw DomainError("segmentation produced no tiles");
  if (mask) label_tiles(out.tiles, *mask);

  std::vector<std::size_t> usable;
  for (std::size_t t = 0; t < out.tiles.tiles.size(); ++t) {
    if (out.tiles.tiles[t].fits(in.h)) usable.push_back(t);
  }
  out.oversize_tiles = out.tiles.tiles.size() - usable.size();
  if (out.oversize_tiles > 0) {
    log::info(std::to_string(out.oversize_tiles) + " oversize tiles left without prediction");
  }
  std::vector<std::vector<double>> inputs(usable.size());
#pragma omp parallel for schedule(dynamic, 4) if (exec == Exec::parallel)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(usable.size()); ++i) {
    inputs[static_cast<std::size_t>(i)] =
        patch_input(cube, out.tiles.tiles[usable[static_cast<std::size_t>(i)]], normalization, in.h);
  }
  std::vector<nn::ExampleView> views;
  for (const auto& x : inputs) views.push_back({x, 0});
  const auto probs = ensemble_predict(model, views, exec);

  out.predictions.resize(out.tiles.tiles.size());
  for (std::size_t t = 0; t < out.tiles.tiles.size(); ++t) out.predictions[t].tile_id = out.tiles.tiles[t].id;
  for (std::size_t i = 0; i < usable.size(); ++i) {
    auto& p = out.predictions[usable[i]];
    p.mean_probability = probs.mean[i];
    const auto it = std::max_element(p.mean_probability.begin(), p.mean_probability.end());
    p.label = (!tau || *it >= *tau) ? static_cast<int>(it - p.mean_probability.begin()) : kUnknownLabel;
  }
  out.labels.assign(cube.pixel_count(), kNoPrediction);
  for (std::size_t t = 0; t < out.tiles.tiles.size(); ++t) {
    for (const auto px : out.tiles.tiles[t].pixels) out.labels[px] = out.predictions[t].label;
  }
  if (mask) score_prediction(out, *mask);
  return out;
}

RgbImage render_overlay(const PredictionMap& map, const HsiCube& base, double band_nm) {
  if (base.height() != map.height || base.width() != map.width) throw ShapeError("base cube does not match the map");
  const std::size_t band = band_index(base.axis(), band_nm);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t i = 0; i < base.pixel_count(); ++i) {
    if (!base.valid(i)) continue;
    const double v = base.pixel(i)[band];
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  RgbImage img(map.width, map.height, 0);
  for (std::size_t i = 0; i < base.pixel_count(); ++i) {
    std::uint8_t* px = img.rgb.data() + i * 3;
    double gray = 0.0;
    if (base.valid(i)) gray = hi > lo ? (base.pixel(i)[band] - lo) / (hi - lo) * 255.0 : 128.0;
    const std::uint8_t* color = nullptr;
    switch (map.labels[i]) {
      case 0: color = kOverlayHealthy; break;
      case 1: color = kOverlayLgg; break;
      case kUnknownLabel: color = kOverlayUnknown; break;
      default: break;
    }
    for (int ch = 0; ch < 3; ++ch) {
      const double v = color ? 0.5 * gray + 0.5 * color[ch] : gray;
      px[ch] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
    }
  }
  return img;
}

std::vector<LabeledExample> evaluation_tiles(const Scene& scene, const SlicParams& slic,
                                             const NormalizationParams& normalization,
                                             const std::vector<int>& ood_classes, std::vector<int>* truth,
                                             Exec exec) {
  TileMap map = slic_segment(scene.cube, slic, exec);
  label_tiles(map, scene.mask);
  std::vector<LabeledExample> out;
  if (truth) truth->clear();
  for (const auto& tile : map.tiles) {
    if (tile.label < 0 || !tile.fits()) continue;
    const auto bl = binary_label(tile.label);
    const bool ood = std::find(ood_classes.begin(), ood_classes.end(), tile.label) != ood_classes.end();
    if (!bl && !ood) continue;
    LabeledExample e;
    e.patch = extract_patch(scene.cube, tile, normalization.channels);
    apply_normalization(normalization, e.patch);
    e.label = bl.value_or(BinaryLabel::healthy);
    e.scene_id = scene.id;
    e.patient_id = scene.patient_id;
    e.tile_id = tile.id;
    out.push_back(std::move(e));
    if (truth) truth->push_back(bl ? static_cast<int>(*bl) : kOutOfDistribution);
  }
  return out;
}

// --- configuration -----------------------------------------------------------

const char* to_string(Stage stage) {
  switch (stage) {
    case Stage::scenes: return "scenes";
    case Stage::dataset: return "dataset";
    case Stage::train: return "train";
    case Stage::classical: return "classical";
    case Stage::attribute: return "attribute";
    case Stage::retrain: return "retrain";
    case Stage::ensemble: return "ensemble";
    case Stage::infer: return "infer";
  }
  return "?";
}

namespace {

constexpr Stage kAllStages[] = {Stage::scenes,    Stage::dataset, Stage::train,    Stage::classical,
                                Stage::attribute, Stage::retrain, Stage::ensemble, Stage::infer};

Stage stage_from_string(const std::string& s) {
  for (const auto st : kAllStages) {
    if (s == to_string(st)) return st;
  }
  throw ConfigError("unknown stage '" + s + "'");
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

std::string join(const std::vector<std::string>& items) {
  std::string s;
  for (const auto& i : items) s += (s.empty() ? "" : ",") + i;
  return s;
}

std::vector<std::size_t> size_list(const std::string& text, const char* key) {
  std::vector<std::size_t> out;
  for (const double v : parse_number_list(text)) {
    if (!(v >= 0.0) || v != std::floor(v)) throw ConfigError(std::string(key) + " must list non-negative integers");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

std::string size_list_text(const std::vector<std::size_t>& v) {
  std::vector<double> d(v.begin(), v.end());
  return format_number_list(d);
}

template <typename T>
T get(const Ini& sec, const char* key, T fallback) {
  try {
    return value_or<T>(sec, key, fallback);
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  }
}

bool get_bool(const Ini& sec, const char* key, bool fallback) {
  const auto v = sec.get_optional<std::string>(key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1" || *v == "yes") return true;
  if (*v == "false" || *v == "0" || *v == "no") return false;
  throw ConfigError(std::string("invalid boolean for '") + key + "'");
}

}  // namespace

PipelineConfig pipeline_config_from_ini(const Ini& ini) {
  PipelineConfig c;
  try {
    const Ini& run = section(ini, "run");
    c.output_root = run.get<std::string>("output_root", "");
    c.run_name = run.get<std::string>("name", "");
    c.seed = get<std::uint64_t>(run, "seed", c.seed);
    for (const auto& s : split_list(run.get<std::string>("stages", ""))) c.stages.push_back(stage_from_string(s));

    const Ini& data = section(ini, "data");
    c.phantom_preset = data.get<std::string>("source", c.phantom_preset);
    c.phantom_scenes = get<std::size_t>(data, "scenes", c.phantom_scenes);
    c.ood_region = get_bool(data, "ood_region", c.ood_region);
    c.informative_bands = get<std::size_t>(data, "informative_bands", c.informative_bands);
    c.planted_nm = get<double>(data, "planted_nm", c.planted_nm);
    for (const auto& f : split_list(data.get<std::string>("cubes", ""))) c.cube_files.emplace_back(f);
    for (const auto& f : split_list(data.get<std::string>("masks", ""))) c.mask_files.emplace_back(f);
    if (c.phantom_preset == "custom" || (c.phantom_preset != "files" && ini.get_child_optional("phantom"))) {
      c.phantom = phantom_config_from_ini(ini);
    } else if (c.phantom_preset == "standard") {
      c.phantom = standard_phantom(0, c.informative_bands);
    } else if (c.phantom_preset == "planted") {
      c.phantom = planted_band_phantom(0, c.planted_nm);
    } else if (c.phantom_preset != "files") {
      throw ConfigError("unknown data source '" + c.phantom_preset + "'");
    }

    const Ini& slic = section(ini, "slic");
    c.tiling.slic.target_pixels = get<std::size_t>(slic, "target_pixels", c.tiling.slic.target_pixels);
    c.tiling.slic.compactness = get<double>(slic, "compactness", c.tiling.slic.compactness);
    c.tiling.slic.max_iters = get<std::size_t>(slic, "max_iters", c.tiling.slic.max_iters);
    c.tiling.slic.convergence_px = get<double>(slic, "convergence_px", c.tiling.slic.convergence_px);

    const Ini& filter = section(ini, "filter");
    c.tiling.filter.sam_pctl = get<double>(filter, "sam_pctl", c.tiling.filter.sam_pctl);
    c.tiling.filter.l2_pctl = get<double>(filter, "l2_pctl", c.tiling.filter.l2_pctl);
    c.tiling.filter.intensity_lo = get<double>(filter, "intensity_lo", c.tiling.filter.intensity_lo);
    c.tiling.filter.intensity_hi = get<double>(filter, "intensity_hi", c.tiling.filter.intensity_hi);

    const Ini& ds = section(ini, "dataset");
    c.split.mode = split_mode_from_string(ds.get<std::string>("split", "random-tile"));
    c.split.train_fraction = get<double>(ds, "train_fraction", c.split.train_fraction);
    c.tiling.side = get<std::size_t>(ds, "patch_side", c.tiling.side);
    c.tiling.channels = size_list(ds.get<std::string>("channels", ""), "channels");

    const Ini& net = section(ini, "network");
    if (const auto f = net.get_optional<std::string>("features")) c.block_features = size_list(*f, "features");
    if (const auto k = net.get_optional<std::string>("compress")) c.compress_levels = size_list(*k, "compress");

    const Ini& tr = section(ini, "train");
    c.train.epochs = get<std::size_t>(tr, "epochs", c.train.epochs);
    c.train.batch_size = get<std::size_t>(tr, "batch_size", c.train.batch_size);
    c.train.learning_rate = get<double>(tr, "learning_rate", c.train.learning_rate);
    const auto opt = tr.get<std::string>("optimizer", "adam");
    if (opt == "adam") c.train.optimizer = nn::Optimizer::adam;
    else if (opt == "sgd-momentum") c.train.optimizer = nn::Optimizer::sgd_momentum;
    else throw ConfigError("unknown optimizer '" + opt + "'");
    c.train.momentum = get<double>(tr, "momentum", c.train.momentum);
    c.train.validation_fraction = get<double>(tr, "validation_fraction", c.train.validation_fraction);

    const Ini& cl = section(ini, "classical");
    c.forest_trees = get<std::size_t>(cl, "trees", c.forest_trees);
    c.mlp_hidden = get<std::size_t>(cl, "hidden", c.mlp_hidden);
    c.mlp_epochs = get<std::size_t>(cl, "epochs", c.mlp_epochs);

    const Ini& at = section(ini, "attribution");
    c.attribution.samples = get<std::size_t>(at, "samples", c.attribution.samples);
    c.attribution.baselines_per_class = get<std::size_t>(at, "baselines_per_class", c.attribution.baselines_per_class);
    c.attribution.zero_baseline = get_bool(at, "zero_baseline", c.attribution.zero_baseline);
    c.top_k = get<std::size_t>(at, "top_k", c.top_k);
    c.accuracy_filter = get<double>(at, "accuracy_filter", c.accuracy_filter);

    const Ini& en = section(ini, "ensemble");
    c.ensemble_members = get<std::size_t>(en, "members", c.ensemble_members);
    c.ensemble_compress = get<std::size_t>(en, "compress", c.ensemble_compress);
    if (const auto t = en.get_optional<std::string>("taus")) c.taus = parse_number_list(*t);

    const Ini& rd = section(ini, "render");
    c.render_tau = get<double>(rd, "tau", c.render_tau);
    c.render_band_nm = get<double>(rd, "band_nm", c.render_band_nm);
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  } catch (const boost::property_tree::ptree_error& e) {
    throw ConfigError(e.what());
  }
  return c;
}

Ini pipeline_config_to_ini(const PipelineConfig& c) {
  Ini ini;
  Ini run;
  run.put("output_root", c.output_root.string());
  run.put("name", c.run_name);
  run.put("seed", c.seed);
  std::vector<std::string> stages;
  for (const auto s : c.stages) stages.emplace_back(to_string(s));
  run.put("stages", join(stages));
  ini.add_child("run", run);

  Ini data;
  data.put("source", c.phantom_preset);
  data.put("scenes", c.phantom_scenes);
  data.put("ood_region", c.ood_region ? "true" : "false");
  data.put("informative_bands", c.informative_bands);
  data.put("planted_nm", format_double(c.planted_nm));
  std::vector<std::string> cubes, masks;
  for (const auto& p : c.cube_files) cubes.push_back(p.string());
  for (const auto& p : c.mask_files) masks.push_back(p.string());
  data.put("cubes", join(cubes));
  data.put("masks", join(masks));
  ini.add_child("data", data);
  if (c.phantom_preset != "files") {
    for (const auto& [name, body] : phantom_config_to_ini(c.phantom)) ini.add_child(name, body);
  }

  Ini slic;
  slic.put("target_pixels", c.tiling.slic.target_pixels);
  slic.put("compactness", format_double(c.tiling.slic.compactness));
  slic.put("max_iters", c.tiling.slic.max_iters);
  slic.put("convergence_px", format_double(c.tiling.slic.convergence_px));
  ini.add_child("slic", slic);

  Ini filter;
  filter.put("sam_pctl", format_double(c.tiling.filter.sam_pctl));
  filter.put("l2_pctl", format_double(c.tiling.filter.l2_pctl));
  filter.put("intensity_lo", format_double(c.tiling.filter.intensity_lo));
  filter.put("intensity_hi", format_double(c.tiling.filter.intensity_hi));
  ini.add_child("filter", filter);

  Ini ds;
  ds.put("split", to_string(c.split.mode));
  ds.put("train_fraction", format_double(c.split.train_fraction));
  ds.put("patch_side", c.tiling.side);
  ds.put("channels", size_list_text(c.tiling.channels));
  ini.add_child("dataset", ds);

  Ini net;
  net.put("features", size_list_text(c.block_features));
  net.put("compress", size_list_text(c.compress_levels));
  ini.add_child("network", net);

  Ini tr;
  tr.put("epochs", c.train.epochs);
  tr.put("batch_size", c.train.batch_size);
  tr.put("learning_rate", format_double(c.train.learning_rate));
  tr.put("optimizer", c.train.optimizer == nn::Optimizer::adam ? "adam" : "sgd-momentum");
  tr.put("momentum", format_double(c.train.momentum));
  tr.put("validation_fraction", format_double(c.train.validation_fraction));
  ini.add_child("train", tr);

  Ini cl;
  cl.put("trees", c.forest_trees);
  cl.put("hidden", c.mlp_hidden);
  cl.put("epochs", c.mlp_epochs);
  ini.add_child("classical", cl);

  Ini at;
  at.put("samples", c.attribution.samples);
  at.put("baselines_per_class", c.attribution.baselines_per_class);
  at.put("zero_baseline", c.attribution.zero_baseline ? "true" : "false");
  at.put("top_k", c.top_k);
  at.put("accuracy_filter", format_double(c.accuracy_filter));
  ini.add_child("attribution", at);

  Ini en;
  en.put("members", c.ensemble_members);
  en.put("compress", c.ensemble_compress);
  en.put("taus", format_number_list(c.taus));
  ini.add_child("ensemble", en);

  Ini rd;
  rd.put("tau", format_double(c.render_tau));
  rd.put("band_nm", format_double(c.render_band_nm));
  ini.add_child("render", rd);
  return ini;
}

void validate_config(const PipelineConfig& c) {
  if (c.output_root.empty()) throw ConfigError("[run] output_root is required");
  if (c.phantom_preset == "files") {
    if (c.cube_files.empty()) throw ConfigError("[data] cubes is required when source = files");
    if (c.mask_files.size() != c.cube_files.size()) throw ConfigError("[data] masks must pair with cubes");
    for (const auto& f : c.cube_files) {
      if (!fs::exists(f)) throw ConfigError("cube file not found: " + f.string());
    }
    for (const auto& f : c.mask_files) {
      if (!fs::exists(f)) throw ConfigError("mask file not found: " + f.string());
    }
  } else if (c.phantom_scenes == 0) {
    throw ConfigError("[data] scenes must be positive");
  }
  if (!(c.split.train_fraction > 0.0 && c.split.train_fraction < 1.0)) {
    throw ConfigError("train_fraction must lie strictly between 0 and 1");
  }
  if (c.tiling.slic.target_pixels < 4) throw ConfigError("target_pixels too small");
  if (c.train.epochs == 0 || c.train.batch_size < 2) throw ConfigError("epochs must be positive and batch_size >= 2");
  if (!(c.train.learning_rate >= 0.0)) throw ConfigError("learning_rate must be non-negative");
  if (c.block_features.empty()) throw ConfigError("network needs at least one encoder block");
  for (const auto k : c.compress_levels) {
    if (k == 0) throw ConfigError("compress levels must be positive");
  }
  if (c.ensemble_members < 2) throw ConfigError("ensemble needs at least two members");
  if (c.ensemble_compress == 0) throw ConfigError("ensemble compress level must be positive");
  for (const double t : c.taus) {
    if (!(t > 0.5 && t <= 1.0)) throw ConfigError("every tau must lie in (0.5, 1]");
  }
  if (!(c.render_tau > 0.5 && c.render_tau <= 1.0)) throw ConfigError("render tau must lie in (0.5, 1]");
  if (c.top_k == 0) throw ConfigError("top_k must be positive");
  if (c.attribution.samples == 0) throw ConfigError("attribution samples must be positive");
}

std::vector<Scene> make_scenes(const PipelineConfig& c) {
  std::vector<Scene> scenes;
  if (c.phantom_preset == "files") {
    for (std::size_t i = 0; i < c.cube_files.size(); ++i) {
      Scene s;
      s.id = c.cube_files[i].stem().string();
      s.patient_id = s.id;
      s.cube = load_cube(c.cube_files[i]);
      s.mask = load_annotation(c.mask_files[i]);
      scenes.push_back(std::move(s));
    }
    return scenes;
  }
  for (std::size_t i = 0; i < c.phantom_scenes; ++i) {
    PhantomConfig pc = c.phantom;
    pc.seed = derive_seed(c.seed, i);
    if (c.ood_region) add_ood_region(pc);
    PhantomScene ps = generate_scene(pc);
    Scene s;
    s.id = "scene_" + std::to_string(i);
    s.patient_id = s.id;
    s.cube = std::move(ps.cube);
    s.mask = std::move(ps.mask);
    scenes.push_back(std::move(s));
  }
  return scenes;
}

void save_prediction_labels(const PredictionMap& map, const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  io::put_magic(out, "HSIL");
  io::put<std::uint16_t>(out, 1);
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(map.height));
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(map.width));
  for (const int l : map.labels) io::put<std::int8_t>(out, static_cast<std::int8_t>(l));
  if (!out) throw IoError("write failed: " + path.string());
}

PredictionMap load_prediction_labels(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  io::expect_magic(in, "HSIL");
  if (io::get<std::uint16_t>(in, "version") != 1) throw FormatError("unsupported label file version");
  PredictionMap m;
  m.height = io::get<std::uint32_t>(in, "height");
  m.width = io::get<std::uint32_t>(in, "width");
  std::vector<std::int8_t> raw(m.height * m.width);
  io::get_array<std::int8_t>(in, raw, "labels");
  if (!io::at_end(in)) throw ShapeError("trailing bytes after the label image");
  m.labels.assign(raw.begin(), raw.end());
  for (const int l : m.labels) {
    if (l < kNoPrediction || l > kUnknownLabel) throw FormatError("label value out of range");
  }
  return m;
}

StageError::StageError(Stage stage, const std::string& cause)
    : Error(std::string("stage '") + to_string(stage) + "' failed: " + cause), stage_(stage) {}

// --- run -----------------------------------------------------------------------

namespace {

constexpr int kOodClass = static_cast<int>(TissueClass::white_matter);

std::string timestamp_name() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "run-%Y%m%d-%H%M%S", &tm);
  return buf;
}

void write_json(const json& j, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << j.dump(2) << '\n';
}

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json metrics_json(const Metrics& m) {
  return {{"tp", m.counts.tp},
          {"tn", m.counts.tn},
          {"fp", m.counts.fp},
          {"fn", m.counts.fn},
          {"accuracy", number_or_null(m.accuracy)},
          {"precision", number_or_null(m.precision)},
          {"recall", number_or_null(m.recall)}};
}

json history_json(const std::vector<nn::EpochRecord>& h) {
  json a = json::array();
  for (const auto& r : h) {
    a.push_back({{"epoch", r.epoch},
                 {"train_loss", number_or_null(r.train_loss)},
                 {"train_accuracy", number_or_null(r.train_accuracy)},
                 {"validation_loss", number_or_null(r.validation_loss)},
                 {"validation_accuracy", number_or_null(r.validation_accuracy)}});
  }
  return a;
}

class Run {
 public:
  Run(const PipelineConfig& config, fs::path dir) : cfg_(config), dir_(std::move(dir)) {}

  void execute(Stage s) {
    switch (s) {
      case Stage::scenes: return stage_scenes();
      case Stage::dataset: return stage_dataset();
      case Stage::train: return stage_train();
      case Stage::classical: return stage_classical();
      case Stage::attribute: return stage_attribute();
      case Stage::retrain: return stage_retrain();
      case Stage::ensemble: return stage_ensemble();
      case Stage::infer: return stage_infer();
    }
  }

 private:
  fs::path data(const std::string& f) const { return dir_ / "data" / f; }
  fs::path models(const std::string& f) const { return dir_ / "models" / f; }
  fs::path reports(const std::string& f) const { return dir_ / "reports" / f; }

  std::uint64_t stream(std::uint64_t id) const { return derive_seed(cfg_.seed, 1000 + id); }

  nn::TrainConfig train_config(std::uint64_t seed) const {
    nn::TrainConfig tc = cfg_.train;
    tc.seed = seed;
    return tc;
  }

  const std::vector<Scene>& scenes() {
    if (scenes_.empty()) {
      if (fs::exists(data("scenes.json"))) {
        std::ifstream in(data("scenes.json"));
        const json listing = json::parse(in);
        for (const auto& id : listing.at("scenes")) {
          Scene s;
          s.id = id.get<std::string>();
          s.patient_id = s.id;
          s.cube = load_cube(data(s.id + ".hsic"));
          s.mask = load_annotation(data(s.id + ".hsia"));
          scenes_.push_back(std::move(s));
        }
      } else {
        scenes_ = make_scenes(cfg_);
      }
    }
    return scenes_;
  }

  void load_dataset() {
    if (dataset_) return;
    if (!fs::exists(data("train.hsip"))) stage_dataset();
    if (dataset_) return;
    Dataset d;
    d.train = load_examples(data("train.hsip"));
    d.test = load_examples(data("test.hsip"));
    d.train_balance = class_balance(d.train);
    d.test_balance = class_balance(d.test);
    dataset_ = std::move(d);
    norm_ = load_normalization(models("normalization.json"));
  }

  void stage_scenes() {
    json j;
    j["scenes"] = json::array();
    for (const auto& s : scenes()) {
      save_cube(s.cube, data(s.id + ".hsic"));
      save_annotation(s.mask, data(s.id + ".hsia"));
      j["scenes"].push_back(s.id);
    }
    write_json(j, data("scenes.json"));
  }

  void stage_dataset() {
    const auto& sc = scenes();
    SplitSpec split = cfg_.split;
    split.seed = stream(1);
    Dataset d = build_dataset(sc, cfg_.tiling, split);
    norm_ = standardize(d.train, d.test);
    save_examples(d.train, data("train.hsip"));
    save_examples(d.test, data("test.hsip"));
    save_normalization(norm_, models("normalization.json"));
    json j = {{"train", {{"healthy", d.train_balance.healthy}, {"lgg", d.train_balance.lgg}}},
              {"test", {{"healthy", d.test_balance.healthy}, {"lgg", d.test_balance.lgg}}},
              {"oversize_skipped", d.oversize_skipped},
              {"split", to_string(split.mode)},
              {"train_fraction", split.train_fraction}};
    write_json(j, reports("dataset.json"));
    dataset_ = std::move(d);
  }

  std::string cnn_name(std::size_t k) const { return "cnn_k" + std::to_string(k); }

  void stage_train() {
    load_dataset();
    const auto views = as_views(dataset_->train);
    const std::size_t c = dataset_->train.front().patch.channels.size();
    json summary = json::object();
    for (const auto k : cfg_.compress_levels) {
      const auto spec = nn::tissue_cnn_spec(c, k, cfg_.block_features, cfg_.tiling.side, 2);
      auto result = nn::train(spec, views, train_config(stream(100 + k)));
      const Metrics m = evaluate_network(result.network, dataset_->test);
      nn::save_network(result.network, models(cnn_name(k) + ".hsin"), "normalization.json");
      write_json({{"model", cnn_name(k)},
                  {"best_epoch", result.best_epoch},
                  {"test", metrics_json(m)},
                  {"history", history_json(result.history)}},
                 reports("train_" + cnn_name(k) + ".json"));
      summary[cnn_name(k)] = metrics_json(m);
      single_models_[k] = {std::move(result.network), m.accuracy};
      log::info(cnn_name(k) + " test accuracy " + format_double(m.accuracy));
    }
    write_json(summary, reports("metrics_cnn.json"));
  }

  void load_single_models() {
    if (!single_models_.empty()) return;
    bool all_present = true;
    for (const auto k : cfg_.compress_levels) all_present = all_present && fs::exists(models(cnn_name(k) + ".hsin"));
    if (!all_present) return stage_train();
    load_dataset();
    for (const auto k : cfg_.compress_levels) {
      auto net = nn::load_network(models(cnn_name(k) + ".hsin"));
      const double acc = evaluate_network(net, dataset_->test).accuracy;
      single_models_[k] = {std::move(net), acc};
    }
  }

  void stage_classical() {
    load_dataset();
    const auto train = feature_table(dataset_->train);
    const auto test = feature_table(dataset_->test);
    ForestParams fp;
    fp.trees = cfg_.forest_trees;
    fp.seed = stream(2);
    const RandomForest forest = rf_train(train, fp);
    save_forest(forest, models("forest.hsrf"));
    std::vector<int> rf_pred;
    for (const auto& p : forest.predict(test.rows)) rf_pred.push_back(p.label);
    MlpParams mp;
    mp.hidden = cfg_.mlp_hidden;
    mp.train = train_config(stream(3));
    mp.train.epochs = cfg_.mlp_epochs;
    const auto mlp = mlp_train(train, mp);
    nn::save_network(mlp.network, models("mlp.hsin"), "normalization.json");
    const Metrics rf_m = evaluate(rf_pred, test.labels);
    const Metrics mlp_m = evaluate(mlp_predict(mlp.network, test), test.labels);
    write_json({{"random_forest", metrics_json(rf_m)}, {"mlp", metrics_json(mlp_m)}}, reports("metrics_classical.json"));
  }

  void stage_attribute() {
    load_dataset();
    load_single_models();
    const auto baselines =
        make_baselines(dataset_->train, cfg_.attribution.baselines_per_class, cfg_.attribution.zero_baseline, stream(4));
    std::vector<ModelScores> scores;
    for (const auto& [k, entry] : single_models_) {
      AttributionParams ap = cfg_.attribution;
      ap.seed = derive_seed(stream(5), k);
      scores.push_back({cnn_name(k), entry.accuracy, channel_importance(entry.network, dataset_->test, baselines, ap)});
    }
    const auto& channels = norm_.channels;
    const auto axis = scenes().front().cube.axis();
    std::vector<double> wl;
    for (const auto c : channels) wl.push_back(axis[c]);
    report_ = aggregate_importance(scores, channels, wl, cfg_.accuracy_filter);
    save_report(*report_, reports("attribution.json"));
    write_png(render_bar_chart(report_->mean, report_->stddev), reports("attribution.png"));
    const auto subset = select_top_k(*report_, std::min(cfg_.top_k, channels.size()));
    const auto all_wl = axis.wavelengths();
    save_subset(subset, std::vector<double>(all_wl.begin(), all_wl.end()), reports("subset.txt"));
  }

  void stage_retrain() {
    load_dataset();
    load_single_models();
    if (!fs::exists(reports("subset.txt"))) stage_attribute();
    const ChannelSubset subset = load_subset(reports("subset.txt"));
    // Reference: the least compressed single model.
    const auto& ref = std::prev(single_models_.end());
    auto r = retrain_on_subset(subset, dataset_->train, dataset_->test, train_config(stream(6)), ref->second.accuracy,
                               cfg_.block_features);
    nn::save_network(r.network, models("retrain_subset.hsin"), "normalization.json");
    write_json({{"bands", subset.bands},
                {"reference_model", cnn_name(ref->first)},
                {"reference_accuracy", ref->second.accuracy},
                {"test", metrics_json(r.metrics)},
                {"accuracy_delta", r.accuracy_delta}},
               reports("retrain.json"));
  }

  void stage_ensemble() {
    load_dataset();
    const auto views = as_views(dataset_->train);
    const std::size_t c = dataset_->train.front().patch.channels.size();
    const auto spec = nn::tissue_cnn_spec(c, cfg_.ensemble_compress, cfg_.block_features, cfg_.tiling.side, 2);
    EnsembleConfig ec;
    ec.members = cfg_.ensemble_members;
    ec.master_seed = stream(7);
    ec.train = cfg_.train;
    Ensemble e = train_ensemble(spec, views, ec);
    e.normalization_ref = "normalization.json";
    save_ensemble(e, dir_ / "models" / "ensemble");

    json members = json::array();
    for (std::size_t i = 0; i < e.size(); ++i) {
      members.push_back({{"member", i}, {"test", metrics_json(evaluate_network(e.members[i], dataset_->test))}});
    }
    // Coverage over every pure two-class or OOD tile of every scene.
    std::vector<LabeledExample> tiles;
    std::vector<int> truth;
    for (const auto& s : scenes()) {
      std::vector<int> t;
      auto ex = evaluation_tiles(s, cfg_.tiling.slic, norm_, {kOodClass}, &t);
      for (auto& x : ex) tiles.push_back(std::move(x));
      truth.insert(truth.end(), t.begin(), t.end());
    }
    const auto tile_views = as_views(tiles);
    const auto probs = ensemble_predict(e, tile_views);
    const auto rows = coverage_from_probabilities(probs.mean, truth, cfg_.taus);
    save_coverage(rows, reports("coverage.json"));
    write_json({{"members", members}}, reports("ensemble_members.json"));
    ensemble_ = std::move(e);
  }

  void stage_infer() {
    load_dataset();
    if (!ensemble_) {
      if (fs::exists(dir_ / "models" / "ensemble" / "manifest.json")) {
        ensemble_ = load_ensemble(dir_ / "models" / "ensemble");
      } else {
        stage_ensemble();
      }
    }
    // Same segmentation as dataset building, so tile ids line up with the
    // held-out examples.
    std::map<std::string, std::set<std::uint32_t>> test_tiles;
    for (const auto& ex : dataset_->test) test_tiles[ex.scene_id].insert(ex.tile_id);
    json per_scene = json::array();
    for (const auto& s : scenes()) {
      auto map = infer_full_image(*ensemble_, norm_, s.cube, cfg_.tiling.slic, cfg_.render_tau, &s.mask);
      std::size_t test_decided = 0, test_correct = 0;
      const auto& held_out = test_tiles[s.id];
      for (std::size_t i = 0; i < map.labels.size(); ++i) {
        const auto truth = binary_label(s.mask.at(i));
        const int pred = map.labels[i];
        if (!truth || (pred != 0 && pred != 1) || !held_out.count(map.tiles.assignment[i])) continue;
        ++test_decided;
        test_correct += pred == static_cast<int>(*truth) ? 1 : 0;
      }
      write_png(render_overlay(map, s.cube, cfg_.render_band_nm), dir_ / "overlays" / (s.id + ".png"));
      std::size_t unknown = 0, none = 0;
      for (const auto& p : map.predictions) {
        unknown += p.label == kUnknownLabel ? 1 : 0;
        none += p.label == kNoPrediction ? 1 : 0;
      }
      per_scene.push_back({{"scene", s.id},
                           {"tau", cfg_.render_tau},
                           {"tiles", map.predictions.size()},
                           {"unknown_tiles", unknown},
                           {"oversize_tiles", none},
                           {"annotated_pixels", map.annotated_pixels},
                           {"decided_pixels", map.decided_pixels},
                           {"accuracy", map.accuracy ? json(*map.accuracy) : json(nullptr)},
                           {"test_tile_decided_pixels", test_decided},
                           {"test_tile_accuracy", test_decided > 0 ? json(static_cast<double>(test_correct) /
                                                                          static_cast<double>(test_decided))
                                                                   : json(nullptr)}});
    }
    write_json({{"scenes", per_scene}}, reports("inference.json"));
  }

  struct SingleModel {
    nn::Network network;
    double accuracy = 0.0;
  };

  const PipelineConfig& cfg_;
  fs::path dir_;
  std::vector<Scene> scenes_;
  std::optional<Dataset> dataset_;
  NormalizationParams norm_;
  std::map<std::size_t, SingleModel> single_models_;
  std::optional<AttributionReport> report_;
  std::optional<Ensemble> ensemble_;
};

}  // namespace

fs::path run_pipeline(const PipelineConfig& config) {
  validate_config(config);
  const fs::path dir = config.output_root / (config.run_name.empty() ? timestamp_name() : config.run_name);
  for (const char* sub : {"configs", "data", "models", "reports", "overlays", "logs"}) fs::create_directories(dir / sub);

  PipelineConfig resolved = config;
  resolved.run_name = dir.filename().string();
  save_ini(pipeline_config_to_ini(resolved), dir / "configs" / "resolved.ini");

  std::ofstream logfile(dir / "logs" / "pipeline.log", std::ios::app);
  auto previous = log::set_sink([&](log::Level level, const std::string& msg) {
    logfile << "[" << log::level_name(level) << "] " << msg << '\n';
    logfile.flush();
    if (level >= log::Level::warn) std::cerr << "[" << log::level_name(level) << "] " << msg << '\n';
  });
  log::set_min_level(log::Level::info);
  struct Restore {
    log::Sink sink;
    ~Restore() {
      log::set_sink(std::move(sink));
      log::set_min_level(log::Level::warn);
    }
  } restore{std::move(previous)};

  Run run(config, dir);
  const std::vector<Stage> stages =
      config.stages.empty() ? std::vector<Stage>(std::begin(kAllStages), std::end(kAllStages)) : config.stages;
  for (const auto s : stages) {
    const auto t0 = std::chrono::steady_clock::now();
    log::info(std::string("stage ") + to_string(s) + " started");
    try {
      run.execute(s);
    } catch (const std::exception& e) {
      log::error(std::string("stage ") + to_string(s) + ": " + e.what());
      throw StageError(s, e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log::info(std::string("stage ") + to_string(s) + " finished in " + format_double(std::round(secs * 10) / 10) + " s");
  }
  return dir;
}

}  // namespace hsi

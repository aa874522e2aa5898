#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "hsi/config.hpp"
#include "hsi/pipeline.hpp"
#include "test_util.hpp"

using namespace hsi;
namespace fs = std::filesystem;

namespace {

const std::vector<std::size_t> kChannels{10, 40, 75};

PipelineConfig tiny_config(const fs::path& root) {
  PipelineConfig c;
  c.output_root = root;
  c.run_name = "tiny";
  c.seed = 3;
  c.phantom_scenes = 3;
  c.phantom = standard_phantom(0, 4);
  c.phantom.height = c.phantom.width = 128;
  c.tiling.channels = kChannels;
  c.block_features = {4};
  c.compress_levels = {2, 3};
  c.train.epochs = 2;
  c.train.batch_size = 16;
  c.forest_trees = 10;
  c.mlp_hidden = 8;
  c.mlp_epochs = 5;
  c.attribution.samples = 4;
  c.attribution.baselines_per_class = 2;
  c.accuracy_filter = 0.0;
  c.top_k = 2;
  c.ensemble_members = 2;
  c.ensemble_compress = 2;
  return c;
}

Ensemble untrained_ensemble(std::size_t side) {
  Ensemble e;
  for (std::uint64_t s : {1u, 2u}) {
    e.members.emplace_back(nn::tissue_cnn_spec(kChannels.size(), std::nullopt, {2}, side), s);
    e.member_seeds.push_back(s);
  }
  return e;
}

NormalizationParams identity_normalization() {
  return {kChannels, std::vector<double>(kChannels.size(), 0.0), std::vector<double>(kChannels.size(), 1.0)};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST_CASE("pipeline config round-trips through its resolved ini") {
  auto c = tiny_config("/tmp/out");
  c.stages = {Stage::dataset, Stage::train};
  c.taus = {0.55, 0.75};
  c.train.optimizer = nn::Optimizer::sgd_momentum;
  c.split.mode = SplitMode::by_patient;
  const auto text = write_ini(pipeline_config_to_ini(c));
  const auto back = pipeline_config_from_ini(parse_ini(text));
  CHECK(write_ini(pipeline_config_to_ini(back)) == text);
  CHECK(back.stages == c.stages);
  CHECK(back.taus == c.taus);
  CHECK(back.tiling.channels == kChannels);
  CHECK(back.split.mode == SplitMode::by_patient);

  c.phantom_preset = "custom";
  const auto custom_text = write_ini(pipeline_config_to_ini(c));
  const auto custom = pipeline_config_from_ini(parse_ini(custom_text));
  CHECK(custom.phantom.height == 128);
  CHECK(write_ini(pipeline_config_to_ini(custom)) == custom_text);
}

TEST_CASE("pipeline config errors") {
  CHECK_THROWS_AS(pipeline_config_from_ini(parse_ini("[run]\nstages = train, bake\n")), ConfigError);
  CHECK_THROWS_AS(pipeline_config_from_ini(parse_ini("[data]\nsource = camera\n")), ConfigError);
  CHECK_THROWS_AS(pipeline_config_from_ini(parse_ini("[train]\noptimizer = rmsprop\n")), ConfigError);
  CHECK_THROWS_AS(pipeline_config_from_ini(parse_ini("[train]\nepochs = many\n")), ConfigError);
  CHECK_THROWS_AS(pipeline_config_from_ini(parse_ini("[network]\nfeatures = 4, -2\n")), ConfigError);

  const auto defaults = pipeline_config_from_ini(parse_ini(""));
  CHECK_THROWS_AS(validate_config(defaults), ConfigError);  // output_root missing
  auto c = tiny_config("/tmp/out");
  CHECK_NOTHROW(validate_config(c));
  auto bad = c;
  bad.taus = {0.5};
  CHECK_THROWS_AS(validate_config(bad), ConfigError);
  bad = c;
  bad.split.train_fraction = 1.0;
  CHECK_THROWS_AS(validate_config(bad), ConfigError);
  bad = c;
  bad.ensemble_members = 1;
  CHECK_THROWS_AS(validate_config(bad), ConfigError);
  bad = c;
  bad.phantom_preset = "files";
  CHECK_THROWS_AS(validate_config(bad), ConfigError);
  bad.cube_files = {"/nonexistent/a.hsic"};
  bad.mask_files = {"/nonexistent/a.hsia"};
  CHECK_THROWS_AS(validate_config(bad), ConfigError);
  CHECK_THROWS_AS(run_pipeline(defaults), ConfigError);
}

TEST_CASE("full-image inference labels tiles and recounts accuracy") {
  auto pc = standard_phantom(11, 4);
  pc.height = pc.width = 96;
  add_ood_region(pc);
  const auto scene = generate_scene(pc);
  const auto ens = untrained_ensemble(kPatchSide);
  SlicParams slic;
  const auto map = infer_full_image(ens, identity_normalization(), scene.cube, slic, 0.6, &scene.mask);
  REQUIRE(map.labels.size() == scene.cube.pixel_count());
  CHECK(map.oversize_tiles == 0);

  std::set<std::uint32_t> tile_ids;
  for (std::size_t t = 0; t < map.tiles.tiles.size(); ++t) {
    const auto& p = map.predictions[t];
    CHECK(p.tile_id == map.tiles.tiles[t].id);
    tile_ids.insert(p.tile_id);
    REQUIRE(p.mean_probability.size() == 2);
    const double conf = std::max(p.mean_probability[0], p.mean_probability[1]);
    CHECK(p.label == (conf >= 0.6 ? (p.mean_probability[1] > p.mean_probability[0] ? 1 : 0) : kUnknownLabel));
    for (const auto px : map.tiles.tiles[t].pixels) CHECK(map.labels[px] == p.label);
  }
  CHECK(tile_ids.size() == map.tiles.tiles.size());
  for (std::size_t i = 0; i < map.labels.size(); ++i) {
    if (!scene.cube.valid(i)) CHECK(map.labels[i] == kNoPrediction);
  }

  // Oracle recount over two-class annotated pixels with a decided label.
  std::size_t annotated = 0, decided = 0, correct = 0;
  for (std::size_t i = 0; i < map.labels.size(); ++i) {
    const int cls = scene.mask.at(i);
    const bool healthy = cls == static_cast<int>(TissueClass::healthy) || cls == static_cast<int>(TissueClass::histo_healthy);
    const bool lgg = cls == static_cast<int>(TissueClass::lgg) || cls == static_cast<int>(TissueClass::histo_lgg);
    if (!healthy && !lgg) continue;
    ++annotated;
    if (map.labels[i] != 0 && map.labels[i] != 1) continue;
    ++decided;
    correct += map.labels[i] == (lgg ? 1 : 0);
  }
  CHECK(map.annotated_pixels == annotated);
  CHECK(map.decided_pixels == decided);
  if (decided > 0) CHECK(*map.accuracy == static_cast<double>(correct) / static_cast<double>(decided));

  const auto argmax_map = infer_full_image(ens, identity_normalization(), scene.cube, slic);
  for (const auto& p : argmax_map.predictions) CHECK((p.label == 0 || p.label == 1));
  CHECK_FALSE(argmax_map.accuracy.has_value());
}

TEST_CASE("inference leaves tiles larger than the patch without prediction") {
  auto pc = standard_phantom(12, 4);
  pc.height = pc.width = 64;
  const auto scene = generate_scene(pc);
  const auto ens = untrained_ensemble(4);
  const auto map = infer_full_image(ens, identity_normalization(), scene.cube, SlicParams{});
  std::size_t oversize = 0;
  for (std::size_t t = 0; t < map.tiles.tiles.size(); ++t) {
    const bool fits = map.tiles.tiles[t].fits(4);
    oversize += !fits;
    if (!fits) {
      CHECK(map.predictions[t].label == kNoPrediction);
      CHECK(map.predictions[t].mean_probability.empty());
    }
  }
  CHECK(oversize > 0);
  CHECK(map.oversize_tiles == oversize);
}

TEST_CASE("inference errors") {
  auto pc = standard_phantom(13, 4);
  pc.height = pc.width = 48;
  auto scene = generate_scene(pc);
  const auto ens = untrained_ensemble(kPatchSide);
  CHECK_THROWS_AS(infer_full_image(Ensemble{}, identity_normalization(), scene.cube, {}), DomainError);
  CHECK_THROWS_AS(infer_full_image(ens, identity_normalization(), scene.cube, {}, 0.4), DomainError);
  auto wrong = identity_normalization();
  wrong.channels = {10, 40};
  CHECK_THROWS_AS(infer_full_image(ens, wrong, scene.cube, {}), ShapeError);
  wrong.channels = {10, 40, 200};
  CHECK_THROWS_AS(infer_full_image(ens, wrong, scene.cube, {}), ShapeError);
  for (std::size_t p = 0; p < scene.cube.pixel_count(); ++p) scene.cube.set_valid(p, false);
  CHECK_THROWS_AS(infer_full_image(ens, identity_normalization(), scene.cube, {}), DomainError);
}

TEST_CASE("overlay blends label colors over the stretched band") {
  Rng rng(4);
  const auto cube = testutil::random_cube(rng, 9, 11, 5, 0.7);
  PredictionMap map;
  map.height = 9;
  map.width = 11;
  for (std::size_t i = 0; i < 99; ++i) {
    map.labels.push_back(cube.valid(i) ? static_cast<int>(rng.below(3)) : kNoPrediction);
  }
  const std::size_t band = band_index(cube.axis(), 520.0);
  double lo = 1e300, hi = -1e300;
  for (std::size_t i = 0; i < 99; ++i) {
    if (!cube.valid(i)) continue;
    lo = std::min(lo, static_cast<double>(cube.pixel(i)[band]));
    hi = std::max(hi, static_cast<double>(cube.pixel(i)[band]));
  }
  const auto img = render_overlay(map, cube, 520.0);
  std::map<int, std::size_t> colored;
  for (std::size_t i = 0; i < 99; ++i) {
    const double gray = cube.valid(i) ? (cube.pixel(i)[band] - lo) / (hi - lo) * 255.0 : 0.0;
    const std::uint8_t* color = map.labels[i] == 0 ? kOverlayHealthy
                                : map.labels[i] == 1 ? kOverlayLgg
                                : map.labels[i] == kUnknownLabel ? kOverlayUnknown
                                                                 : nullptr;
    for (int ch = 0; ch < 3; ++ch) {
      const double expect = color ? (gray + color[ch]) / 2 : gray;
      CHECK(std::abs(img.rgb[i * 3 + ch] - expect) <= 0.5 + 1e-9);
    }
    ++colored[map.labels[i]];
  }
  CHECK(colored.size() >= 3);
  map.width = 10;
  CHECK_THROWS_AS(render_overlay(map, cube, 520.0), ShapeError);
}

TEST_CASE("png and label image round-trips") {
  testutil::TempDir dir("png");
  Rng rng(5);
  RgbImage img(13, 7);
  for (auto& v : img.rgb) v = static_cast<std::uint8_t>(rng.below(256));
  write_png(img, dir / "a.png");
  CHECK(read_png(dir / "a.png") == img);
  CHECK_THROWS_AS(read_png(dir / "missing.png"), IoError);
  testutil::write_text(dir / "fake.png", "not a png at all");
  CHECK_THROWS_AS(read_png(dir / "fake.png"), FormatError);

  const std::vector<double> values{0.1, 0.4, 0.2}, errors{0.01, 0.05, 0.0};
  const auto chart = render_bar_chart(values, errors, 6, 100);
  CHECK(chart.width >= 18);
  CHECK(chart.height == 100);

  PredictionMap map;
  map.height = 3;
  map.width = 4;
  map.labels = {-1, 0, 1, 2, 2, 1, 0, -1, 0, 0, 1, 1};
  save_prediction_labels(map, dir / "l.hsil");
  const auto back = load_prediction_labels(dir / "l.hsil");
  CHECK(back.height == 3);
  CHECK(back.width == 4);
  CHECK(back.labels == map.labels);
  std::ofstream(dir / "l.hsil", std::ios::app) << 'x';
  CHECK_THROWS_AS(load_prediction_labels(dir / "l.hsil"), ShapeError);
}

TEST_CASE("evaluation tiles mark the unseen class as out of distribution") {
  auto pc = standard_phantom(14, 4);
  pc.height = pc.width = 128;
  add_ood_region(pc);
  const auto ps = generate_scene(pc);
  Scene scene{"s", "s", ps.cube, ps.mask};
  std::vector<int> truth;
  const auto tiles = evaluation_tiles(scene, {}, identity_normalization(), {static_cast<int>(TissueClass::white_matter)},
                                      &truth);
  REQUIRE(tiles.size() == truth.size());
  std::map<int, std::size_t> counts;
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    ++counts[truth[i]];
    if (truth[i] != kOutOfDistribution) CHECK(truth[i] == static_cast<int>(tiles[i].label));
  }
  CHECK(counts[kOutOfDistribution] > 0);
  CHECK(counts[0] > 0);
  CHECK(counts[1] > 0);
}

TEST_CASE("a tiny run writes every artifact and reruns identically") {
  testutil::TempDir dir("run");
  const auto cfg = tiny_config(dir.path());
  const auto run = run_pipeline(cfg);
  CHECK(run == dir.path() / "tiny");
  for (const char* f : {"configs/resolved.ini", "data/scenes.json", "data/train.hsip", "data/test.hsip",
                        "models/normalization.json", "models/cnn_k2.hsin", "models/cnn_k3.hsin", "models/forest.hsrf",
                        "models/mlp.hsin", "models/retrain_subset.hsin", "models/ensemble/manifest.json",
                        "reports/dataset.json", "reports/metrics_cnn.json", "reports/metrics_classical.json",
                        "reports/attribution.json", "reports/attribution.png", "reports/subset.txt",
                        "reports/retrain.json", "reports/coverage.json", "reports/inference.json",
                        "overlays/scene_0.png", "logs/pipeline.log"}) {
    CAPTURE(f);
    CHECK(fs::exists(run / f));
  }
  CHECK(load_subset(run / "reports" / "subset.txt").bands.size() == 2);
  for (const auto& scene : nlohmann::json::parse(slurp(run / "reports" / "inference.json"))["scenes"]) {
    const std::size_t test_decided = scene["test_tile_decided_pixels"];
    CHECK(test_decided <= scene["decided_pixels"].get<std::size_t>());
    CHECK(scene["test_tile_accuracy"].is_null() == (test_decided == 0));
  }

  auto again = pipeline_config_from_ini(read_ini(run / "configs" / "resolved.ini"));
  again.run_name = "tiny2";
  const auto run2 = run_pipeline(again);
  for (const char* f : {"reports/dataset.json", "reports/metrics_cnn.json", "reports/metrics_classical.json",
                        "reports/attribution.json", "reports/retrain.json", "reports/coverage.json",
                        "reports/inference.json"}) {
    CAPTURE(f);
    CHECK(slurp(run / f) == slurp(run2 / f));
  }

  // A single later stage resumes from the saved artifacts.
  auto resume = cfg;
  resume.stages = {Stage::infer};
  const auto before = slurp(run / "reports" / "inference.json");
  fs::remove(run / "reports" / "inference.json");
  run_pipeline(resume);
  CHECK(slurp(run / "reports" / "inference.json") == before);

  // Failures carry the stage.
  auto failing = cfg;
  failing.stages = {Stage::attribute};
  failing.accuracy_filter = 1.0;
  try {
    run_pipeline(failing);
    FAIL("expected a stage failure");
  } catch (const StageError& e) {
    CHECK(e.stage() == Stage::attribute);
  }
}

// Command-line front end: one subcommand per pipeline stage plus `run`.
// Exit codes: 0 success, 1 invalid arguments or configuration, 2 stage failure.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hsi/attribution.hpp"
#include "hsi/classical.hpp"
#include "hsi/ensemble.hpp"
#include "hsi/error.hpp"
#include "hsi/log.hpp"
#include "hsi/pipeline.hpp"
#include "hsi/spectral.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace hsi;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitFailure = 2;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool verbose = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Sectioned key=value config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Master seed (overrides the config)");
  cmd->add_flag("-v,--verbose", c.verbose, "Log info messages");
}

PipelineConfig load_config(const Common& c) {
  PipelineConfig cfg = c.config.empty() ? pipeline_config_from_ini(Ini{}) : pipeline_config_from_ini(read_ini(c.config));
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

void write_json(const json& j, const std::string& path) {
  if (path.empty() || path == "-") {
    std::cout << j.dump(2) << '\n';
    return;
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << j.dump(2) << '\n';
}

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json metrics_json(const Metrics& m) {
  return {{"tp", m.counts.tp},          {"tn", m.counts.tn},
          {"fp", m.counts.fp},          {"fn", m.counts.fn},
          {"accuracy", number_or_null(m.accuracy)}, {"precision", number_or_null(m.precision)},
          {"recall", number_or_null(m.recall)}};
}

nn::TrainConfig train_config(const PipelineConfig& cfg, std::optional<std::size_t> epochs) {
  nn::TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  if (epochs) tc.epochs = *epochs;
  return tc;
}

std::vector<Scene> scenes_from_files(const std::vector<std::string>& cubes, const std::vector<std::string>& masks) {
  if (cubes.size() != masks.size()) throw ConfigError("every --cube needs a matching --mask");
  std::vector<Scene> scenes;
  for (std::size_t i = 0; i < cubes.size(); ++i) {
    Scene s;
    s.id = fs::path(cubes[i]).stem().string();
    s.patient_id = s.id;
    s.cube = load_cube(cubes[i]);
    s.mask = load_annotation(masks[i]);
    scenes.push_back(std::move(s));
  }
  return scenes;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hyperspectral tissue classification toolkit"};
  app.require_subcommand(1);

  // phantom
  Common phantom_c;
  std::string phantom_preset = "standard", phantom_cube, phantom_mask;
  bool phantom_ood = false;
  auto* phantom = app.add_subcommand("phantom", "Generate a synthetic annotated scene");
  add_common(phantom, phantom_c);
  phantom->add_option("--preset", phantom_preset, "standard | planted | custom (uses the config's phantom sections)");
  phantom->add_flag("--ood", phantom_ood, "Add an out-of-distribution region");
  phantom->add_option("--cube", phantom_cube, "Output cube file")->required();
  phantom->add_option("--mask", phantom_mask, "Output annotation file")->required();

  // tile
  Common tile_c;
  std::string tile_cube, tile_mask, tile_out, tile_table;
  auto* tile = app.add_subcommand("tile", "Segment a cube into SLIC tiles and filter them");
  add_common(tile, tile_c);
  tile->add_option("--cube", tile_cube)->required()->check(CLI::ExistingFile);
  tile->add_option("--mask", tile_mask)->check(CLI::ExistingFile);
  tile->add_option("--out", tile_out, "Tile-index image")->required();
  tile->add_option("--table", tile_table, "Per-tile statistics (TSV)");

  // stats
  Common stats_c;
  std::string stats_cube, stats_mask, stats_out;
  std::vector<int> stats_classes = {1, 6};
  auto* stats = app.add_subcommand("stats", "Spectral separability of annotated classes");
  add_common(stats, stats_c);
  stats->add_option("--cube", stats_cube)->required()->check(CLI::ExistingFile);
  stats->add_option("--mask", stats_mask)->required()->check(CLI::ExistingFile);
  stats->add_option("--classes", stats_classes, "Class ids")->delimiter(',');
  stats->add_option("--out", stats_out, "JSON report (default stdout)");

  // dataset
  Common ds_c;
  std::vector<std::string> ds_cubes, ds_masks;
  std::string ds_out;
  std::optional<double> ds_fraction;
  auto* dataset = app.add_subcommand("dataset", "Build standardized train/test patch sets");
  add_common(dataset, ds_c);
  dataset->add_option("--cube", ds_cubes)->required()->check(CLI::ExistingFile);
  dataset->add_option("--mask", ds_masks)->required()->check(CLI::ExistingFile);
  dataset->add_option("--train-fraction", ds_fraction);
  dataset->add_option("--out-dir", ds_out)->required();

  // train
  Common tr_c;
  std::string tr_train, tr_test, tr_out, tr_history;
  std::optional<std::size_t> tr_compress, tr_epochs;
  auto* train = app.add_subcommand("train", "Train the patch CNN");
  add_common(train, tr_c);
  train->add_option("--train", tr_train)->required()->check(CLI::ExistingFile);
  train->add_option("--test", tr_test)->check(CLI::ExistingFile);
  train->add_option("--compress", tr_compress, "Meta-channel count (omit for no compress layer)");
  train->add_option("--epochs", tr_epochs);
  train->add_option("--out", tr_out)->required();
  train->add_option("--history", tr_history, "Training history JSON");

  // train-classical
  Common tc_c;
  std::string tc_train, tc_test, tc_out, tc_kind = "rf", tc_metrics;
  auto* train_classical = app.add_subcommand("train-classical", "Train a random forest or MLP on mean tile spectra");
  add_common(train_classical, tc_c);
  train_classical->add_option("--train", tc_train)->required()->check(CLI::ExistingFile);
  train_classical->add_option("--test", tc_test)->check(CLI::ExistingFile);
  train_classical->add_option("--kind", tc_kind, "rf | mlp")->check(CLI::IsMember({"rf", "mlp"}));
  train_classical->add_option("--out", tc_out)->required();
  train_classical->add_option("--metrics", tc_metrics, "Test metrics JSON");

  // attribute
  Common at_c;
  std::vector<std::string> at_models;
  std::string at_train, at_test, at_out, at_chart, at_cube;
  auto* attribute = app.add_subcommand("attribute", "Channel importance by expected gradients");
  add_common(attribute, at_c);
  attribute->add_option("--model", at_models)->required()->check(CLI::ExistingFile);
  attribute->add_option("--train", at_train)->required()->check(CLI::ExistingFile);
  attribute->add_option("--test", at_test)->required()->check(CLI::ExistingFile);
  attribute->add_option("--wavelengths-from", at_cube, "Cube whose axis names the bands")->check(CLI::ExistingFile);
  attribute->add_option("--out", at_out)->required();
  attribute->add_option("--chart", at_chart, "Bar chart PNG");

  // select-channels
  Common sc_c;
  std::string sc_report, sc_out;
  std::size_t sc_k = 12;
  auto* select = app.add_subcommand("select-channels", "Top-k bands from an attribution report");
  add_common(select, sc_c);
  select->add_option("--report", sc_report)->required()->check(CLI::ExistingFile);
  select->add_option("-k,--top", sc_k);
  select->add_option("--out", sc_out)->required();

  // retrain
  Common rt_c;
  std::string rt_subset, rt_train, rt_test, rt_out, rt_metrics;
  double rt_reference = 0.0;
  std::optional<std::size_t> rt_epochs;
  auto* retrain = app.add_subcommand("retrain", "Retrain the CNN on a channel subset");
  add_common(retrain, rt_c);
  retrain->add_option("--subset", rt_subset)->required()->check(CLI::ExistingFile);
  retrain->add_option("--train", rt_train)->required()->check(CLI::ExistingFile);
  retrain->add_option("--test", rt_test)->required()->check(CLI::ExistingFile);
  retrain->add_option("--reference-accuracy", rt_reference);
  retrain->add_option("--epochs", rt_epochs);
  retrain->add_option("--out", rt_out)->required();
  retrain->add_option("--metrics", rt_metrics);

  // ensemble
  Common en_c;
  std::string en_train, en_test, en_out, en_coverage;
  std::optional<std::size_t> en_members, en_epochs;
  auto* ensemble = app.add_subcommand("ensemble", "Train a deep ensemble");
  add_common(ensemble, en_c);
  ensemble->add_option("--train", en_train)->required()->check(CLI::ExistingFile);
  ensemble->add_option("--test", en_test)->check(CLI::ExistingFile);
  ensemble->add_option("--members", en_members);
  ensemble->add_option("--epochs", en_epochs);
  ensemble->add_option("--out-dir", en_out)->required();
  ensemble->add_option("--coverage", en_coverage, "Coverage report on --test");

  // infer
  Common in_c;
  std::string in_model, in_norm, in_cube, in_mask, in_out, in_report;
  std::optional<double> in_tau;
  auto* infer = app.add_subcommand("infer", "Classify every tile of a full image");
  add_common(infer, in_c);
  infer->add_option("--model", in_model, "Ensemble directory or single network file")->required();
  infer->add_option("--normalization", in_norm)->required()->check(CLI::ExistingFile);
  infer->add_option("--cube", in_cube)->required()->check(CLI::ExistingFile);
  infer->add_option("--mask", in_mask)->check(CLI::ExistingFile);
  infer->add_option("--tau", in_tau);
  infer->add_option("--out", in_out, "Per-pixel label file")->required();
  infer->add_option("--report", in_report, "Summary JSON");

  // render
  Common rd_c;
  std::string rd_labels, rd_cube, rd_out;
  std::optional<double> rd_band;
  auto* render = app.add_subcommand("render", "Overlay predicted labels on a grayscale band");
  add_common(render, rd_c);
  render->add_option("--labels", rd_labels)->required()->check(CLI::ExistingFile);
  render->add_option("--cube", rd_cube)->required()->check(CLI::ExistingFile);
  render->add_option("--band-nm", rd_band);
  render->add_option("--out", rd_out)->required();

  // run
  Common run_c;
  std::string run_root, run_name;
  auto* run = app.add_subcommand("run", "Run the full pipeline from a config");
  add_common(run, run_c);
  run->add_option("--output-root", run_root);
  run->add_option("--name", run_name, "Run directory name (default: timestamp)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  const auto stage_of = [&]() -> Common& {
    for (const auto& [cmd, common] : std::initializer_list<std::pair<CLI::App*, Common*>>{
             {phantom, &phantom_c}, {tile, &tile_c}, {stats, &stats_c}, {dataset, &ds_c}, {train, &tr_c},
             {train_classical, &tc_c}, {attribute, &at_c}, {select, &sc_c}, {retrain, &rt_c},
             {ensemble, &en_c}, {infer, &in_c}, {render, &rd_c}, {run, &run_c}}) {
      if (cmd->parsed()) return *common;
    }
    return run_c;
  };

  PipelineConfig cfg;
  try {
    const Common& common = stage_of();
    if (common.verbose) log::set_min_level(log::Level::info);
    cfg = load_config(common);
    if (*run) {
      if (!run_root.empty()) cfg.output_root = run_root;
      if (!run_name.empty()) cfg.run_name = run_name;
      validate_config(cfg);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  }

  try {
    if (*phantom) {
      PhantomConfig pc;
      if (phantom_preset == "standard") pc = standard_phantom(cfg.seed, cfg.informative_bands);
      else if (phantom_preset == "planted") pc = planted_band_phantom(cfg.seed, cfg.planted_nm);
      else if (phantom_preset == "custom") {
        pc = cfg.phantom;
        pc.seed = cfg.seed;
      } else throw ConfigError("unknown preset '" + phantom_preset + "'");
      if (phantom_ood) add_ood_region(pc);
      const auto scene = generate_scene(pc);
      save_cube(scene.cube, phantom_cube);
      save_annotation(scene.mask, phantom_mask);
    } else if (*tile) {
      const HsiCube cube = load_cube(tile_cube);
      TileMap map = slic_segment(cube, cfg.tiling.slic);
      if (!tile_mask.empty()) {
        label_tiles(map, load_annotation(tile_mask));
        map = filter_tiles(std::move(map), cfg.tiling.filter);
      }
      save_tile_map(map, tile_out);
      if (!tile_table.empty()) write_tile_table(map, tile_table);
      std::cout << map.tiles.size() << " tiles after " << map.iterations << " iterations\n";
    } else if (*stats) {
      const HsiCube cube = load_cube(stats_cube);
      const AnnotationMask mask = load_annotation(stats_mask);
      SeparabilityOptions opt;
      opt.seed = cfg.seed;
      const auto rep = cluster_separability(cube, mask, stats_classes, opt);
      json j;
      for (const auto& c : rep.classes) {
        j["classes"].push_back(
            {{"class", c.class_id}, {"pixels", c.pixel_count}, {"sampled", c.sampled}, {"intra_sam", c.intra_sam}});
      }
      for (const auto& p : rep.pairs) {
        j["pairs"].push_back({{"a", p.class_a},
                              {"b", p.class_b},
                              {"inter_centroid_sam", p.inter_centroid_sam},
                              {"chi2", number_or_null(p.chi2)},
                              {"dof", p.dof},
                              {"p_value", p.p_value}});
      }
      write_json(j, stats_out);
    } else if (*dataset) {
      const auto scenes = scenes_from_files(ds_cubes, ds_masks);
      SplitSpec split = cfg.split;
      split.seed = cfg.seed;
      if (ds_fraction) split.train_fraction = *ds_fraction;
      Dataset d = build_dataset(scenes, cfg.tiling, split);
      const auto norm = standardize(d.train, d.test);
      fs::create_directories(ds_out);
      save_examples(d.train, fs::path(ds_out) / "train.hsip");
      save_examples(d.test, fs::path(ds_out) / "test.hsip");
      save_normalization(norm, fs::path(ds_out) / "normalization.json");
      std::cout << "train " << d.train.size() << " (" << d.train_balance.healthy << " healthy, " << d.train_balance.lgg
                << " lgg), test " << d.test.size() << " (" << d.test_balance.healthy << " healthy, "
                << d.test_balance.lgg << " lgg)\n";
    } else if (*train) {
      const auto examples = load_examples(tr_train);
      if (examples.empty()) throw DomainError("training set is empty");
      const auto spec = nn::tissue_cnn_spec(examples.front().patch.channels.size(), tr_compress, cfg.block_features,
                                            examples.front().patch.side, 2);
      const auto views = as_views(examples);
      const auto result = nn::train(spec, views, train_config(cfg, tr_epochs));
      nn::save_network(result.network, tr_out);
      json h = json::array();
      for (const auto& r : result.history) {
        h.push_back({{"epoch", r.epoch},
                     {"train_loss", r.train_loss},
                     {"validation_loss", number_or_null(r.validation_loss)}});
      }
      json j = {{"best_epoch", result.best_epoch}, {"history", h}};
      if (!tr_test.empty()) j["test"] = metrics_json(evaluate_network(result.network, load_examples(tr_test)));
      if (!tr_history.empty()) write_json(j, tr_history);
      if (j.contains("test")) std::cout << "test accuracy " << j["test"]["accuracy"] << '\n';
    } else if (*train_classical) {
      const auto table = feature_table(load_examples(tc_train));
      std::optional<FeatureTable> test;
      if (!tc_test.empty()) test = feature_table(load_examples(tc_test));
      std::optional<Metrics> m;
      if (tc_kind == "rf") {
        ForestParams fp;
        fp.trees = cfg.forest_trees;
        fp.seed = cfg.seed;
        const auto forest = rf_train(table, fp);
        save_forest(forest, tc_out);
        if (test) {
          std::vector<int> pred;
          for (const auto& p : forest.predict(test->rows)) pred.push_back(p.label);
          m = evaluate(pred, test->labels);
        }
      } else {
        MlpParams mp;
        mp.hidden = cfg.mlp_hidden;
        mp.train = train_config(cfg, cfg.mlp_epochs);
        const auto r = mlp_train(table, mp);
        nn::save_network(r.network, tc_out);
        if (test) m = evaluate(mlp_predict(r.network, *test), test->labels);
      }
      if (m) {
        if (!tc_metrics.empty()) write_json(metrics_json(*m), tc_metrics);
        std::cout << "test accuracy " << m->accuracy << '\n';
      }
    } else if (*attribute) {
      const auto tr = load_examples(at_train);
      const auto te = load_examples(at_test);
      if (tr.empty() || te.empty()) throw DomainError("attribution needs train and test examples");
      const auto baselines =
          make_baselines(tr, cfg.attribution.baselines_per_class, cfg.attribution.zero_baseline, cfg.seed);
      std::vector<ModelScores> scores;
      for (std::size_t i = 0; i < at_models.size(); ++i) {
        const auto net = nn::load_network(at_models[i]);
        AttributionParams ap = cfg.attribution;
        ap.seed = derive_seed(cfg.seed, i);
        scores.push_back({fs::path(at_models[i]).stem().string(), evaluate_network(net, te).accuracy,
                          channel_importance(net, te, baselines, ap)});
      }
      const auto& channels = te.front().patch.channels;
      std::vector<double> wl;
      const SpectralAxis axis = at_cube.empty() ? SpectralAxis::standard() : load_cube(at_cube).axis();
      for (const auto c : channels) wl.push_back(c < axis.band_count() ? axis[c] : 0.0);
      const auto report = aggregate_importance(scores, channels, wl, cfg.accuracy_filter);
      save_report(report, at_out);
      if (!at_chart.empty()) write_png(render_bar_chart(report.mean, report.stddev), at_chart);
    } else if (*select) {
      const auto report = load_report(sc_report);
      const auto subset = select_top_k(report, sc_k);
      std::vector<double> wl(report.channels.empty() ? 0 : *std::max_element(report.channels.begin(), report.channels.end()) + 1, 0.0);
      for (std::size_t i = 0; i < report.channels.size(); ++i) wl[report.channels[i]] = report.wavelengths[i];
      save_subset(subset, wl, sc_out);
    } else if (*retrain) {
      const auto subset = load_subset(rt_subset);
      const auto r = retrain_on_subset(subset, load_examples(rt_train), load_examples(rt_test),
                                       train_config(cfg, rt_epochs), rt_reference, cfg.block_features);
      nn::save_network(r.network, rt_out);
      json j = {{"test", metrics_json(r.metrics)}, {"accuracy_delta", r.accuracy_delta}};
      if (!rt_metrics.empty()) write_json(j, rt_metrics);
      std::cout << "subset accuracy " << r.metrics.accuracy << '\n';
    } else if (*ensemble) {
      const auto tr = load_examples(en_train);
      if (tr.empty()) throw DomainError("training set is empty");
      const auto spec = nn::tissue_cnn_spec(tr.front().patch.channels.size(), cfg.ensemble_compress,
                                            cfg.block_features, tr.front().patch.side, 2);
      EnsembleConfig ec;
      ec.members = en_members.value_or(cfg.ensemble_members);
      ec.master_seed = cfg.seed;
      ec.train = train_config(cfg, en_epochs);
      const auto views = as_views(tr);
      const Ensemble e = train_ensemble(spec, views, ec);
      save_ensemble(e, en_out);
      if (!en_test.empty() && !en_coverage.empty()) {
        const auto te = load_examples(en_test);
        const auto tv = as_views(te);
        save_coverage(coverage_report(e, tv, cfg.taus), en_coverage);
      }
    } else if (*infer) {
      Ensemble e;
      if (fs::is_directory(in_model)) {
        e = load_ensemble(in_model);
      } else {
        e.members.push_back(nn::load_network(in_model));
        e.member_seeds.push_back(0);
      }
      const auto norm = load_normalization(in_norm);
      const HsiCube cube = load_cube(in_cube);
      std::optional<AnnotationMask> mask;
      if (!in_mask.empty()) mask = load_annotation(in_mask);
      const auto map = infer_full_image(e, norm, cube, cfg.tiling.slic, in_tau, mask ? &*mask : nullptr);
      save_prediction_labels(map, in_out);
      json j = {{"tiles", map.predictions.size()},
                {"oversize_tiles", map.oversize_tiles},
                {"annotated_pixels", map.annotated_pixels},
                {"decided_pixels", map.decided_pixels},
                {"accuracy", map.accuracy ? json(*map.accuracy) : json(nullptr)}};
      write_json(j, in_report);
    } else if (*render) {
      const auto map = load_prediction_labels(rd_labels);
      const HsiCube cube = load_cube(rd_cube);
      write_png(render_overlay(map, cube, rd_band.value_or(cfg.render_band_nm)), rd_out);
    } else if (*run) {
      const auto dir = run_pipeline(cfg);
      std::cout << dir.string() << '\n';
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return 0;
}

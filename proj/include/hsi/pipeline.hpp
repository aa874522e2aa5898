#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hsi/attribution.hpp"
#include "hsi/config.hpp"
#include "hsi/dataset.hpp"
#include "hsi/ensemble.hpp"
#include "hsi/error.hpp"
#include "hsi/image_io.hpp"
#include "hsi/phantom.hpp"

namespace hsi {

inline constexpr int kNoPrediction = -1;

struct TilePrediction {
  std::uint32_t tile_id = 0;
  int label = kNoPrediction;  ///< 0 healthy, 1 lgg, kUnknownLabel, or kNoPrediction (oversize)
  std::vector<double> mean_probability;
};

struct PredictionMap {
  std::string scene_id;
  std::size_t height = 0, width = 0;
  std::vector<int> labels;  ///< per pixel, tile-constant; kNoPrediction on invalid pixels
  TileMap tiles;
  std::vector<TilePrediction> predictions;  ///< one per tile, same order as tiles.tiles
  std::size_t oversize_tiles = 0;
  /// Over pixels annotated as one of the two classes that received a
  /// healthy/lgg prediction; nullopt without a mask or such pixels.
  std::optional<double> accuracy;
  std::size_t annotated_pixels = 0;  ///< two-class annotated pixels
  std::size_t decided_pixels = 0;    ///< of those, predicted healthy or lgg
};

/// Re-segments the cube without quality filtration, standardizes every tile
/// fitting the patch side and classifies it with the ensemble mean (argmax when
/// tau is unset, thresholded otherwise). Oversize tiles get kNoPrediction.
PredictionMap infer_full_image(const Ensemble& model, const NormalizationParams& normalization, const HsiCube& cube,
                               const SlicParams& slic, std::optional<double> tau = std::nullopt,
                               const AnnotationMask* mask = nullptr, Exec exec = Exec::parallel);

/// Per-image accuracy recount from labels and mask (see PredictionMap::accuracy).
void score_prediction(PredictionMap& map, const AnnotationMask& mask);

inline constexpr std::uint8_t kOverlayHealthy[3] = {255, 0, 0};
inline constexpr std::uint8_t kOverlayLgg[3] = {0, 0, 255};
inline constexpr std::uint8_t kOverlayUnknown[3] = {255, 165, 0};

/// Grayscale of the band nearest `band_nm`, min-max stretched over valid
/// pixels (invalid pixels black), with label colors blended at 50% alpha.
RgbImage render_overlay(const PredictionMap& map, const HsiCube& base, double band_nm);

/// Patches of every pure-labeled, quality-independent tile of a scene:
/// two-class tiles keep their label, tiles of `ood_classes` get
/// kOutOfDistribution, others are skipped. Patches are normalized.
std::vector<LabeledExample> evaluation_tiles(const Scene& scene, const SlicParams& slic,
                                             const NormalizationParams& normalization,
                                             const std::vector<int>& ood_classes, std::vector<int>* truth,
                                             Exec exec = Exec::parallel);

enum class Stage { scenes, dataset, train, classical, attribute, retrain, ensemble, infer };

const char* to_string(Stage stage);

struct PipelineConfig {
  std::filesystem::path output_root;  ///< required by run_pipeline
  std::string run_name;  ///< empty: timestamped
  std::uint64_t seed = 1;
  std::vector<Stage> stages;  ///< empty: all, in order

  // data
  std::string phantom_preset = "standard";  ///< standard | planted | custom | files
  std::size_t phantom_scenes = 4;
  bool ood_region = true;
  PhantomConfig phantom;  ///< resolved template; scene i reseeded with derive_seed(seed, i)
  std::vector<std::filesystem::path> cube_files, mask_files;
  std::size_t informative_bands = 4;
  double planted_nm = 700.0;

  TilingParams tiling;
  SplitSpec split;

  // networks
  std::vector<std::size_t> block_features = {16, 32, 64};
  std::vector<std::size_t> compress_levels = {3, 6, 12};
  nn::TrainConfig train;

  // classical
  std::size_t forest_trees = 100;
  std::size_t mlp_hidden = 64;
  std::size_t mlp_epochs = 200;

  // attribution
  AttributionParams attribution;
  std::size_t top_k = 12;
  double accuracy_filter = 0.8;

  // ensemble and inference
  std::size_t ensemble_members = 10;
  std::size_t ensemble_compress = 12;
  std::vector<double> taus = {0.6, 0.7, 0.8, 0.9};
  double render_tau = 0.7;
  double render_band_nm = 660.0;
};

/// Throws ConfigError on unknown values or missing required entries. A
/// [phantom] section, when present, overrides the preset's template.
PipelineConfig pipeline_config_from_ini(const Ini& ini);
/// Fully resolved form, including the phantom template of every generated
/// source; reading it back and writing again gives the same text.
Ini pipeline_config_to_ini(const PipelineConfig& config);

/// Throws ConfigError for inconsistent settings (before any stage runs).
void validate_config(const PipelineConfig& config);

std::vector<Scene> make_scenes(const PipelineConfig& config);

/// Per-pixel labels: "HSIL", u16 version, u32 height, u32 width, i8 per pixel.
void save_prediction_labels(const PredictionMap& map, const std::filesystem::path& path);
PredictionMap load_prediction_labels(const std::filesystem::path& path);

/// Error raised by a stage; carries the stage name.
class StageError : public Error {
 public:
  StageError(Stage stage, const std::string& cause);
  Stage stage() const { return stage_; }

 private:
  Stage stage_;
};

/// Runs the configured stages into <output_root>/<run_name> with configs/,
/// data/, models/, reports/, overlays/ and logs/. Returns the run directory.
std::filesystem::path run_pipeline(const PipelineConfig& config);

}  // namespace hsi

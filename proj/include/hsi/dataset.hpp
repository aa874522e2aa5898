#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hsi/core.hpp"
#include "hsi/nn.hpp"
#include "hsi/superpixel.hpp"

namespace hsi {

/// Two-class task label; the integer value is the network's class index.
enum class BinaryLabel : int { healthy = 0, lgg = 1 };

const char* to_string(BinaryLabel label);

/// {Healthy, Histo Healthy} -> healthy, {LGG, Histo LGG} -> lgg, anything else
/// nullopt.
std::optional<BinaryLabel> binary_label(int class_id);

struct LabeledExample {
  PaddedPatch patch;
  BinaryLabel label = BinaryLabel::healthy;
  std::string scene_id;
  std::string patient_id;
  std::uint32_t tile_id = 0;
};

/// One annotated acquisition. `patient_id` defaults to the scene id.
struct Scene {
  std::string id;
  std::string patient_id;
  HsiCube cube;
  AnnotationMask mask;
};

struct TilingParams {
  SlicParams slic;
  FilterParams filter;
  std::size_t side = kPatchSide;
  std::vector<std::size_t> channels;  ///< empty: all bands
};

struct SceneTiles {
  TileMap map;  ///< segmented, labeled and filtered
  std::vector<LabeledExample> examples;
  std::size_t oversize_skipped = 0;
  std::size_t other_class_skipped = 0;
};

/// Segments, labels and filters one scene, then extracts a patch for every
/// passing tile of a two-class label. Oversize tiles are skipped with a warning.
SceneTiles tile_scene(const Scene& scene, const TilingParams& params, Exec exec = Exec::parallel);

enum class SplitMode { random_tile, by_patient };

const char* to_string(SplitMode mode);
SplitMode split_mode_from_string(const std::string& name);

struct SplitSpec {
  SplitMode mode = SplitMode::random_tile;
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
};

struct ClassBalance {
  std::size_t healthy = 0, lgg = 0;
  std::size_t total() const { return healthy + lgg; }
};

ClassBalance class_balance(std::span<const LabeledExample> examples);

struct Dataset {
  std::vector<LabeledExample> train, test;
  ClassBalance train_balance, test_balance;
  std::size_t oversize_skipped = 0;
};

/// Train partition size for random-tile mode: round(fraction * n).
std::size_t train_count(std::size_t n, double train_fraction);

/// Uniform random (unstratified) or whole-patient split. Deterministic in the
/// seed. Throws DomainError if the fraction is outside (0, 1) or if either
/// partition lacks a class.
Dataset split_examples(std::vector<LabeledExample> examples, const SplitSpec& split);

/// tile_scene over all scenes (parallel over scenes) followed by split_examples.
Dataset build_dataset(std::span<const Scene> scenes, const TilingParams& tiling, const SplitSpec& split,
                      Exec exec = Exec::parallel);

struct NormalizationParams {
  std::vector<std::size_t> channels;  ///< band indices the statistics refer to
  std::vector<double> mean, stddev;

  friend bool operator==(const NormalizationParams&, const NormalizationParams&) = default;
};

/// Per-channel mean and (population) standard deviation over member pixels of
/// the training patches. Zero-variance channels get unit scale and a warning.
NormalizationParams fit_normalization(std::span<const LabeledExample> train);

/// (x - mean) / std on member pixels; padding stays zero.
void apply_normalization(const NormalizationParams& params, PaddedPatch& patch);
void apply_normalization(const NormalizationParams& params, std::span<LabeledExample> examples);

/// Fits on `train` and transforms both sets in place.
NormalizationParams standardize(std::vector<LabeledExample>& train, std::vector<LabeledExample>& test);

/// Keeps only the given bands (which must be present in every patch), in the
/// order given.
PaddedPatch select_channels(const PaddedPatch& patch, std::span<const std::size_t> bands);
std::vector<LabeledExample> select_channels(std::span<const LabeledExample> examples,
                                            std::span<const std::size_t> bands);
NormalizationParams select_channels(const NormalizationParams& params, std::span<const std::size_t> bands);

/// Network-facing views; valid while `examples` is alive and unmodified.
std::vector<nn::ExampleView> as_views(std::span<const LabeledExample> examples);

/// Patch container: "HSIP", u16 version, u32 count, u32 side, u32 channel count,
/// u32 channels, label-map string, then per record u8 label, u32 tile id,
/// scene and patient strings, side*side member bytes and f64 values.
void save_examples(std::span<const LabeledExample> examples, const std::filesystem::path& path);
std::vector<LabeledExample> load_examples(const std::filesystem::path& path);

void save_normalization(const NormalizationParams& params, const std::filesystem::path& path);
NormalizationParams load_normalization(const std::filesystem::path& path);

}  // namespace hsi

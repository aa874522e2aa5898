#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <vector>

#include "hsi/core.hpp"
#include "hsi/parallel.hpp"

namespace hsi {

inline constexpr std::uint32_t kNoTile = std::numeric_limits<std::uint32_t>::max();
inline constexpr int kMixedLabel = -1;
inline constexpr int kUnlabeled = -2;
inline constexpr std::size_t kPatchSide = 40;

struct BoundingBox {
  std::size_t row0 = 0, col0 = 0, row1 = 0, col1 = 0;  // half-open
  std::size_t height() const { return row1 - row0; }
  std::size_t width() const { return col1 - col0; }
};

struct Tile {
  std::uint32_t id = 0;
  std::vector<std::uint32_t> pixels;  ///< flat pixel indices, ascending
  BoundingBox bbox;
  std::vector<double> mean_spectrum;
  double mean_sam_uniformity = 0.0;  ///< mean SAM of member pixels to the tile mean
  double mean_l2_uniformity = 0.0;
  double mean_intensity = 0.0;  ///< mean over member pixels and bands
  int label = kUnlabeled;       ///< unique annotation class, kMixedLabel, or kUnlabeled
  bool quality_pass = false;

  bool fits(std::size_t side = kPatchSide) const { return bbox.height() <= side && bbox.width() <= side; }
};

/// Thresholds used by the last filtration (valid when `applied`).
struct FilterCuts {
  bool applied = false;
  std::size_t candidates = 0;
  double sam_max = 0.0, l2_max = 0.0, intensity_lo = 0.0, intensity_hi = 0.0;
};

struct TileMap {
  std::size_t height = 0, width = 0;
  std::vector<std::uint32_t> assignment;  ///< per pixel tile id, kNoTile for invalid pixels
  std::vector<Tile> tiles;
  std::vector<double> objective_history;  ///< total joint distance after each assignment step
  std::size_t iterations = 0;
  FilterCuts cuts;
};

struct SlicParams {
  std::size_t target_pixels = 200;
  double compactness = 0.5;
  std::size_t max_iters = 10;
  double convergence_px = 0.5;
};

/// SLIC under the joint distance D = SAM(pixel, center) + compactness * d_xy / S
/// with grid spacing S = sqrt(target_pixels). Each pixel considers the centers
/// within an S-window plus its current center; a center update is accepted only
/// if it does not raise that tile's summed distance, so the objective never
/// increases. Orphan fragments are merged into their largest adjacent tile.
TileMap slic_segment(const HsiCube& cube, const SlicParams& params = {}, Exec exec = Exec::parallel);

/// Serial, center-centric form of the same iteration (classic SLIC loop order).
/// Produces the same TileMap as slic_segment.
TileMap slic_segment_reference(const HsiCube& cube, const SlicParams& params = {});

/// Recomputes per-tile statistics from the cube (pixels, bbox, means, uniformity).
void compute_tile_statistics(TileMap& map, const HsiCube& cube, Exec exec = Exec::parallel);

/// Sets each tile's label to its unique annotation class or kMixedLabel.
void label_tiles(TileMap& map, const AnnotationMask& mask);

struct FilterParams {
  double sam_pctl = 50.0;
  double l2_pctl = 50.0;
  double intensity_lo = 10.0;
  double intensity_hi = 90.0;
};

/// Quality filtration. Mixed-label tiles are discarded first; the three
/// percentile cuts are evaluated jointly over the remaining candidates of this
/// image, inclusive at the thresholds.
TileMap filter_tiles(TileMap map, const FilterParams& params = {});

/// Nearest-rank percentile (p in [0, 100]) of a non-empty sample.
double percentile(std::vector<double> values, double p);

struct PaddedPatch {
  std::size_t side = kPatchSide;
  std::vector<std::size_t> channels;
  std::vector<double> values;       ///< side x side x channels, row-major, channel fastest
  std::vector<std::uint8_t> member;  ///< side x side, 1 where the pixel belongs to the tile
  std::uint32_t tile_id = 0;
  int label = kUnlabeled;

  std::size_t channel_count() const { return channels.size(); }
  double at(std::size_t row, std::size_t col, std::size_t ch) const {
    return values[(row * side + col) * channels.size() + ch];
  }
};

/// Copies the selected channels of the tile's pixels into a zero patch, the
/// tile's bounding box centered. Throws ShapeError if the box exceeds the patch.
PaddedPatch extract_patch(const HsiCube& cube, const Tile& tile, std::span<const std::size_t> channels,
                          std::size_t side = kPatchSide);

std::vector<std::size_t> all_channels(std::size_t bands);

/// Tile-index image: "HSIT", u16 version, u32 height, u32 width, u32 tile count,
/// u32 per pixel (kNoTile for invalid pixels).
void save_tile_map(const TileMap& map, const std::filesystem::path& path);
/// Reads the index image and recomputes statistics from `cube`.
TileMap load_tile_map(const std::filesystem::path& path, const HsiCube& cube);
/// Tab-separated per-tile statistics.
void write_tile_table(const TileMap& map, const std::filesystem::path& path);

}  // namespace hsi

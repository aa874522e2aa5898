#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <queue>

#include "hsi/error.hpp"
#include "hsi/phantom.hpp"
#include "hsi/spectral.hpp"
#include "hsi/superpixel.hpp"
#include "test_util.hpp"

using namespace hsi;

namespace {

PhantomScene small_scene(std::uint64_t seed, std::size_t side = 72) {
  auto cfg = standard_phantom(seed);
  cfg.height = cfg.width = side;
  return generate_scene(cfg);
}

// Number of 4-connected components of each tile.
std::vector<std::size_t> component_counts(const TileMap& map) {
  std::vector<std::size_t> counts(map.tiles.size(), 0);
  std::vector<std::uint8_t> seen(map.assignment.size(), 0);
  for (std::size_t start = 0; start < map.assignment.size(); ++start) {
    const auto id = map.assignment[start];
    if (id == kNoTile || seen[start]) continue;
    ++counts[id];
    std::queue<std::size_t> q;
    q.push(start);
    seen[start] = 1;
    while (!q.empty()) {
      const auto p = q.front();
      q.pop();
      const std::size_t r = p / map.width, c = p % map.width;
      const std::size_t nbrs[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
      for (const auto& n : nbrs) {
        if (n[0] >= map.height || n[1] >= map.width) continue;  // wraps for r = 0 / c = 0
        const std::size_t q2 = n[0] * map.width + n[1];
        if (!seen[q2] && map.assignment[q2] == id) {
          seen[q2] = 1;
          q.push(q2);
        }
      }
    }
  }
  return counts;
}

void check_partition(const TileMap& map, const HsiCube& cube) {
  REQUIRE(map.assignment.size() == cube.pixel_count());
  std::size_t total = 0;
  for (const auto& t : map.tiles) {
    CHECK_FALSE(t.pixels.empty());
    total += t.pixels.size();
    for (const auto p : t.pixels) CHECK(map.assignment[p] == t.id);
  }
  CHECK(total == cube.valid_count());
  for (std::size_t p = 0; p < cube.pixel_count(); ++p) {
    CHECK((map.assignment[p] == kNoTile) == !cube.valid(p));
  }
  for (std::size_t i = 0; i < map.tiles.size(); ++i) CHECK(map.tiles[i].id == i);
}

void check_connected(const TileMap& map) {
  for (const auto n : component_counts(map)) CHECK(n == 1);
}

void check_objective_monotone(const TileMap& map) {
  REQUIRE_FALSE(map.objective_history.empty());
  for (std::size_t i = 1; i < map.objective_history.size(); ++i) {
    CHECK(map.objective_history[i] <= map.objective_history[i - 1]);
  }
}

HsiCube uniform_cube(std::size_t h, std::size_t w, std::size_t bands) {
  HsiCube cube(h, w, SpectralAxis::linear(500.0, 700.0, bands));
  for (std::size_t p = 0; p < cube.pixel_count(); ++p) {
    cube.set_valid(p, true);
    for (std::size_t b = 0; b < bands; ++b) cube.pixel(p)[b] = 0.3f + 0.01f * static_cast<float>(b);
  }
  return cube;
}

Tile tile_with_stats(std::uint32_t id, double sam, double l2, double intensity, int label = 1) {
  Tile t;
  t.id = id;
  t.pixels = {id};
  t.mean_sam_uniformity = sam;
  t.mean_l2_uniformity = l2;
  t.mean_intensity = intensity;
  t.label = label;
  return t;
}

}  // namespace

TEST_CASE("SLIC on a phantom: partition, connectivity, objective") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto scene = small_scene(seed);
    const auto map = slic_segment(scene.cube);
    check_partition(map, scene.cube);
    check_connected(map);
    check_objective_monotone(map);
    CHECK(map.iterations >= 1);
    CHECK(map.iterations <= SlicParams{}.max_iters);
  }
}

TEST_CASE("SLIC serial, parallel and center-centric reference agree") {
  const auto scene = small_scene(9, 64);
  SlicParams params;
  params.target_pixels = 120;
  const auto par = slic_segment(scene.cube, params, Exec::parallel);
  const auto ser = slic_segment(scene.cube, params, Exec::serial);
  const auto ref = slic_segment_reference(scene.cube, params);
  CHECK(par.assignment == ser.assignment);
  CHECK(par.assignment == ref.assignment);
  CHECK(par.objective_history == ser.objective_history);
  REQUIRE(par.objective_history.size() == ref.objective_history.size());
  for (std::size_t i = 0; i < par.objective_history.size(); ++i) {
    CHECK(par.objective_history[i] == doctest::Approx(ref.objective_history[i]).epsilon(1e-9));
  }
}

TEST_CASE("SLIC on a uniform image tiles near the target size") {
  const auto cube = uniform_cube(80, 80, 6);
  SlicParams params;
  params.target_pixels = 100;
  params.compactness = 5.0;
  const auto map = slic_segment(cube, params);
  check_partition(map, cube);
  check_connected(map);
  const double mean_size = static_cast<double>(cube.valid_count()) / static_cast<double>(map.tiles.size());
  CHECK(mean_size >= 0.7 * 100);
  CHECK(mean_size <= 1.3 * 100);
}

TEST_CASE("SLIC respects a sharp spectral boundary at low compactness") {
  HsiCube cube(60, 60, SpectralAxis::linear(500.0, 700.0, 8));
  AnnotationMask mask(60, 60);
  Rng rng(4);
  for (std::size_t r = 0; r < 60; ++r) {
    for (std::size_t c = 0; c < 60; ++c) {
      const bool left = c < 27;  // off the seeding grid on purpose
      cube.set_valid(r, c, true);
      mask.set(r, c, left ? 1 : 6);
      for (std::size_t b = 0; b < 8; ++b) {
        const double base = left ? (b < 4 ? 0.8 : 0.2) : (b < 4 ? 0.2 : 0.8);
        cube.at(r, c, b) = static_cast<float>(base + 0.005 * rng.normal());
      }
    }
  }
  SlicParams params;
  params.compactness = 0.05;
  auto map = slic_segment(cube, params);
  label_tiles(map, mask);
  for (const auto& t : map.tiles) CHECK(t.label != kMixedLabel);
}

TEST_CASE("SLIC errors") {
  const auto cube = uniform_cube(10, 10, 3);
  SlicParams params;
  params.target_pixels = 15;
  CHECK_THROWS_AS(slic_segment(cube, params), DomainError);
  HsiCube dark(10, 10, SpectralAxis({500.0, 510.0}));
  for (std::size_t p = 0; p < dark.pixel_count(); ++p) dark.set_valid(p, false);
  CHECK_THROWS_AS(slic_segment(dark), DomainError);
}

TEST_CASE("tile statistics are recomputable from pixels and cube") {
  const auto scene = small_scene(12, 56);
  const auto map = slic_segment(scene.cube);
  const std::size_t bands = scene.cube.bands();
  for (const auto& t : map.tiles) {
    std::vector<std::vector<double>> px;
    for (const auto p : t.pixels) {
      const auto s = scene.cube.pixel(p);
      px.emplace_back(s.begin(), s.end());
    }
    const auto mean = mean_spectrum(px);
    double sam = 0.0, l2 = 0.0, intensity = 0.0;
    for (const auto& s : px) {
      sam += sam_distance(std::span<const double>(s), std::span<const double>(mean));
      l2 += l2_distance(std::span<const double>(s), std::span<const double>(mean));
      for (double v : s) intensity += v;
    }
    const double n = static_cast<double>(px.size());
    CHECK(t.mean_sam_uniformity == doctest::Approx(sam / n).epsilon(1e-9));
    CHECK(t.mean_l2_uniformity == doctest::Approx(l2 / n).epsilon(1e-9));
    CHECK(t.mean_intensity == doctest::Approx(intensity / (n * bands)).epsilon(1e-9));
    for (std::size_t b = 0; b < bands; ++b) CHECK(t.mean_spectrum[b] == doctest::Approx(mean[b]).epsilon(1e-12));
    for (const auto p : t.pixels) {
      const std::size_t r = p / map.width, c = p % map.width;
      CHECK(r >= t.bbox.row0);
      CHECK(r < t.bbox.row1);
      CHECK(c >= t.bbox.col0);
      CHECK(c < t.bbox.col1);
    }
  }
}

TEST_CASE("nearest-rank percentile") {
  Rng rng(2);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> v(1 + rng.below(40));
    for (auto& x : v) x = std::floor(rng.uniform(0, 10));
    const double p = rng.uniform(0, 100);
    auto sorted = v;
    std::sort(sorted.begin(), sorted.end());
    // Smallest value with at least p% of the sample at or below it.
    double expect = sorted.back();
    for (double x : sorted) {
      const auto at_or_below = std::count_if(v.begin(), v.end(), [&](double y) { return y <= x; });
      if (100.0 * at_or_below >= p * v.size()) {
        expect = x;
        break;
      }
    }
    CHECK(percentile(v, p) == expect);
  }
  CHECK_THROWS_AS(percentile({}, 50), DomainError);
  CHECK_THROWS_AS(percentile({1.0}, 101), DomainError);
}

TEST_CASE("filter: identical statistics all pass") {
  TileMap map;
  for (std::uint32_t i = 0; i < 20; ++i) map.tiles.push_back(tile_with_stats(i, 0.1, 0.2, 0.5));
  const auto out = filter_tiles(map);
  for (const auto& t : out.tiles) CHECK(t.quality_pass);
  CHECK(out.cuts.applied);
  CHECK(out.cuts.candidates == 20);
}

TEST_CASE("filter: mixed tiles never pass and are not candidates") {
  TileMap map;
  for (std::uint32_t i = 0; i < 10; ++i) map.tiles.push_back(tile_with_stats(i, 0.1, 0.1, 0.5, i % 3 ? 1 : kMixedLabel));
  const auto out = filter_tiles(map);
  for (const auto& t : out.tiles) {
    if (t.label == kMixedLabel) CHECK_FALSE(t.quality_pass);
  }
  CHECK(out.cuts.candidates == 6);
}

TEST_CASE("filter: tightening any cut shrinks the pass set") {
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    TileMap map;
    const auto n = 5 + rng.below(60);
    for (std::uint32_t i = 0; i < n; ++i) {
      map.tiles.push_back(tile_with_stats(i, rng.uniform(), rng.uniform(), rng.uniform(),
                                          rng.uniform() < 0.1 ? kMixedLabel : 6));
    }
    FilterParams loose{rng.uniform(0, 100), rng.uniform(0, 100), rng.uniform(0, 50), rng.uniform(50, 100)};
    FilterParams tight = loose;
    switch (rng.below(4)) {
      case 0: tight.sam_pctl = rng.uniform(0, loose.sam_pctl); break;
      case 1: tight.l2_pctl = rng.uniform(0, loose.l2_pctl); break;
      case 2: tight.intensity_lo = rng.uniform(loose.intensity_lo, loose.intensity_hi); break;
      default: tight.intensity_hi = rng.uniform(loose.intensity_lo, loose.intensity_hi); break;
    }
    const auto a = filter_tiles(map, loose);
    const auto b = filter_tiles(map, tight);
    for (std::size_t i = 0; i < n; ++i) {
      if (b.tiles[i].quality_pass) CHECK(a.tiles[i].quality_pass);
      if (a.tiles[i].quality_pass) CHECK(a.tiles[i].label != kMixedLabel);
    }
  }
}

TEST_CASE("filter: default cuts keep at most half of the candidates") {
  Rng rng(7);
  TileMap map;
  for (std::uint32_t i = 0; i < 400; ++i) map.tiles.push_back(tile_with_stats(i, rng.uniform(), rng.uniform(), rng.uniform()));
  const auto out = filter_tiles(map);
  const auto passed = std::count_if(out.tiles.begin(), out.tiles.end(), [](const Tile& t) { return t.quality_pass; });
  CHECK(passed <= 200);
  CHECK(passed > 0);
}

TEST_CASE("filter: tiles covering a saturated patch fail") {
  auto cfg = standard_phantom(21);
  cfg.height = cfg.width = 128;
  cfg.saturation_patches = 1;
  cfg.saturation_patch_size = 14;
  const auto scene = generate_scene(cfg);
  auto map = slic_segment(scene.cube);
  label_tiles(map, scene.mask);
  map = filter_tiles(map);
  const auto& box = scene.saturation_boxes.at(0);
  std::size_t heavy = 0;
  for (const auto& t : map.tiles) {
    const auto inside = std::count_if(t.pixels.begin(), t.pixels.end(), [&](auto p) {
      return box.contains(p / map.width, p % map.width);
    });
    if (2 * static_cast<std::size_t>(inside) >= t.pixels.size()) {
      ++heavy;
      CHECK_FALSE(t.quality_pass);
      CHECK(t.mean_intensity > map.cuts.intensity_hi);
    }
  }
  CHECK(heavy >= 1);
}

TEST_CASE("filter errors") {
  CHECK_THROWS_AS(filter_tiles(TileMap{}), DomainError);
  TileMap map;
  map.tiles.push_back(tile_with_stats(0, 0.1, 0.1, 0.1));
  CHECK_THROWS_AS(filter_tiles(map, FilterParams{50, 50, 90, 10}), DomainError);
  CHECK_THROWS_AS(filter_tiles(map, FilterParams{150, 50, 10, 90}), DomainError);
}

TEST_CASE("patch extraction") {
  const auto scene = small_scene(15, 64);
  const auto map = slic_segment(scene.cube);
  const auto all = all_channels(scene.cube.bands());

  SUBCASE("single-pixel tile lands at the center") {
    Tile t;
    t.id = 3;
    t.pixels = {static_cast<std::uint32_t>(32 * 64 + 30)};
    t.bbox = {32, 30, 33, 31};
    const auto patch = extract_patch(scene.cube, t, all);
    std::size_t nonzero_columns = 0;
    for (std::size_t r = 0; r < kPatchSide; ++r) {
      for (std::size_t c = 0; c < kPatchSide; ++c) {
        bool any = false;
        for (std::size_t k = 0; k < all.size(); ++k) any |= patch.at(r, c, k) != 0.0;
        if (any) {
          ++nonzero_columns;
          CHECK(r == 19);
          CHECK(c == 19);
        }
      }
    }
    CHECK(nonzero_columns == 1);
  }

  SUBCASE("sums, zeros outside the tile, identity subset") {
    const std::vector<std::size_t> subset{3, 50, 75, 100};
    for (const auto& t : map.tiles) {
      if (!t.fits()) continue;
      const auto full = extract_patch(scene.cube, t, all);
      const auto ident = extract_patch(scene.cube, t, std::span<const std::size_t>(all));
      CHECK(full.values == ident.values);
      const auto sub = extract_patch(scene.cube, t, subset);
      double tile_sum = 0.0, patch_sum = 0.0;
      for (const auto p : t.pixels) {
        for (const auto ch : subset) tile_sum += scene.cube.pixel(p)[ch];
      }
      for (double v : sub.values) patch_sum += v;
      CHECK(patch_sum == doctest::Approx(tile_sum).epsilon(1e-12));
      std::size_t members = 0;
      for (std::size_t q = 0; q < kPatchSide * kPatchSide; ++q) {
        if (sub.member[q]) {
          ++members;
        } else {
          for (std::size_t k = 0; k < subset.size(); ++k) CHECK(sub.values[q * subset.size() + k] == 0.0);
        }
      }
      CHECK(members == t.pixels.size());
      CHECK(sub.tile_id == t.id);
    }
  }

  SUBCASE("errors") {
    Tile wide;
    wide.pixels = {0, 41};
    wide.bbox = {0, 0, 1, 42};
    CHECK_THROWS_AS(extract_patch(scene.cube, wide, all), ShapeError);
    CHECK_THROWS_AS(extract_patch(scene.cube, map.tiles.front(), std::vector<std::size_t>{}), DomainError);
    CHECK_THROWS_AS(extract_patch(scene.cube, map.tiles.front(), std::vector<std::size_t>{104}), DomainError);
  }
}

TEST_CASE("tile map files round-trip") {
  testutil::TempDir dir("tiles");
  const auto scene = small_scene(30, 48);
  const auto map = slic_segment(scene.cube);
  save_tile_map(map, dir / "t.hsit");
  const auto back = load_tile_map(dir / "t.hsit", scene.cube);
  CHECK(back.assignment == map.assignment);
  REQUIRE(back.tiles.size() == map.tiles.size());
  for (std::size_t i = 0; i < map.tiles.size(); ++i) {
    CHECK(back.tiles[i].pixels == map.tiles[i].pixels);
    CHECK(back.tiles[i].mean_spectrum == map.tiles[i].mean_spectrum);
  }
  write_tile_table(map, dir / "t.tsv");
  CHECK(std::filesystem::file_size(dir / "t.tsv") > 0);
  const auto other = small_scene(30, 40);
  CHECK_THROWS_AS(load_tile_map(dir / "t.hsit", other.cube), ShapeError);
}

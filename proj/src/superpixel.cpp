#include "hsi/superpixel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <string>

#include "hsi/binary_io.hpp"
#include "hsi/error.hpp"
#include "hsi/spectral.hpp"

namespace hsi {

namespace {

constexpr std::uint16_t kTileMapVersion = 1;

/// Cluster centers: position plus spectrum with cached squared norm.
struct Centers {
  std::size_t bands = 0;
  std::vector<double> y, x, spec, norm2;

  std::size_t size() const { return y.size(); }
  std::span<const double> spectrum(std::size_t k) const { return {spec.data() + k * bands, bands}; }
};

struct SlicContext {
  const HsiCube& cube;
  const SlicParams& params;
  double spacing = 0.0;
  std::vector<double> pixel_norm2;
  std::vector<std::uint32_t> valid_pixels;
};

double joint_distance(const SlicContext& ctx, std::size_t pixel, const Centers& centers, std::size_t k) {
  const auto px = ctx.cube.pixel(pixel);
  const auto cs = centers.spectrum(k);
  double dot = 0.0;
  for (std::size_t b = 0; b < px.size(); ++b) dot += static_cast<double>(px[b]) * cs[b];
  const double n2 = ctx.pixel_norm2[pixel] * centers.norm2[k];
  const double spectral = n2 > 0.0 ? std::acos(std::clamp(dot / std::sqrt(n2), -1.0, 1.0)) : 0.5 * std::numbers::pi;
  const double row = static_cast<double>(pixel / ctx.cube.width());
  const double col = static_cast<double>(pixel % ctx.cube.width());
  const double dy = row - centers.y[k], dx = col - centers.x[k];
  return spectral + ctx.params.compactness * std::sqrt(dy * dy + dx * dx) / ctx.spacing;
}

bool in_window(const SlicContext& ctx, std::size_t pixel, const Centers& centers, std::size_t k) {
  const double row = static_cast<double>(pixel / ctx.cube.width());
  const double col = static_cast<double>(pixel % ctx.cube.width());
  return std::abs(row - centers.y[k]) <= ctx.spacing && std::abs(col - centers.x[k]) <= ctx.spacing;
}

/// Keeps (d, k) if it beats (best, best_k); ties go to the lower center index.
inline void consider(double d, std::uint32_t k, double& best, std::uint32_t& best_k) {
  if (d < best || (d == best && k < best_k)) {
    best = d;
    best_k = k;
  }
}

SlicContext make_context(const HsiCube& cube, const SlicParams& params) {
  if (params.target_pixels < 16) throw DomainError("SLIC target must be at least 16 pixels per tile");
  if (!(params.compactness >= 0.0)) throw DomainError("SLIC compactness must be non-negative");
  SlicContext ctx{cube, params, 0.0, {}, {}};
  ctx.spacing = std::sqrt(static_cast<double>(params.target_pixels));
  ctx.pixel_norm2.assign(cube.pixel_count(), 0.0);
  for (std::size_t p = 0; p < cube.pixel_count(); ++p) {
    if (!cube.valid(p)) continue;
    ctx.valid_pixels.push_back(static_cast<std::uint32_t>(p));
    double n = 0.0;
    for (const float v : cube.pixel(p)) n += static_cast<double>(v) * v;
    ctx.pixel_norm2[p] = n;
  }
  if (ctx.valid_pixels.empty()) throw DomainError("SLIC needs at least one valid pixel");
  return ctx;
}

void set_center_spectrum(Centers& c, std::size_t k, std::span<const double> s) {
  double n = 0.0;
  for (std::size_t b = 0; b < c.bands; ++b) {
    c.spec[k * c.bands + b] = s[b];
    n += s[b] * s[b];
  }
  c.norm2[k] = n;
}

/// One center per grid cell that contains a valid pixel: the valid pixel of the
/// cell closest to the cell middle.
Centers seed_centers(const SlicContext& ctx) {
  const auto& cube = ctx.cube;
  const double s = ctx.spacing;
  const auto rows = static_cast<std::size_t>(std::ceil(static_cast<double>(cube.height()) / s));
  const auto cols = static_cast<std::size_t>(std::ceil(static_cast<double>(cube.width()) / s));
  Centers c;
  c.bands = cube.bands();
  std::vector<double> spectrum(c.bands);
  for (std::size_t gr = 0; gr < rows; ++gr) {
    for (std::size_t gc = 0; gc < cols; ++gc) {
      const double r0 = static_cast<double>(gr) * s, c0 = static_cast<double>(gc) * s;
      const double mid_r = r0 + 0.5 * s, mid_c = c0 + 0.5 * s;
      const auto rb = static_cast<std::size_t>(std::ceil(r0));
      const auto re = std::min(cube.height(), static_cast<std::size_t>(std::ceil(r0 + s)));
      const auto cb = static_cast<std::size_t>(std::ceil(c0));
      const auto ce = std::min(cube.width(), static_cast<std::size_t>(std::ceil(c0 + s)));
      double best = std::numeric_limits<double>::infinity();
      std::size_t pick = 0;
      bool found = false;
      for (std::size_t r = rb; r < re; ++r) {
        for (std::size_t col = cb; col < ce; ++col) {
          if (!cube.valid(r, col)) continue;
          const double d = (static_cast<double>(r) - mid_r) * (static_cast<double>(r) - mid_r) +
                           (static_cast<double>(col) - mid_c) * (static_cast<double>(col) - mid_c);
          if (d < best) {
            best = d;
            pick = r * cube.width() + col;
            found = true;
          }
        }
      }
      if (!found) continue;
      const auto px = cube.pixel(pick);
      std::copy(px.begin(), px.end(), spectrum.begin());
      c.y.push_back(static_cast<double>(pick / cube.width()));
      c.x.push_back(static_cast<double>(pick % cube.width()));
      c.spec.resize(c.y.size() * c.bands);
      c.norm2.push_back(0.0);
      set_center_spectrum(c, c.y.size() - 1, spectrum);
    }
  }
  return c;
}

/// Pixel-centric assignment over a bucket grid of centers; parallel over pixels.
void assign_pixel_centric(const SlicContext& ctx, const Centers& centers, std::vector<std::uint32_t>& label,
                          Exec exec) {
  const auto& cube = ctx.cube;
  const double s = ctx.spacing;
  const auto brows = static_cast<std::ptrdiff_t>(std::ceil(static_cast<double>(cube.height()) / s)) + 1;
  const auto bcols = static_cast<std::ptrdiff_t>(std::ceil(static_cast<double>(cube.width()) / s)) + 1;
  std::vector<std::vector<std::uint32_t>> buckets(static_cast<std::size_t>(brows * bcols));
  auto bucket_of = [&](double v, std::ptrdiff_t limit) {
    return std::clamp(static_cast<std::ptrdiff_t>(std::floor(v / s)), std::ptrdiff_t{0}, limit - 1);
  };
  for (std::size_t k = 0; k < centers.size(); ++k) {
    const auto br = bucket_of(centers.y[k], brows), bc = bucket_of(centers.x[k], bcols);
    buckets[static_cast<std::size_t>(br * bcols + bc)].push_back(static_cast<std::uint32_t>(k));
  }
  const auto n = static_cast<std::ptrdiff_t>(ctx.valid_pixels.size());
#pragma omp parallel for schedule(static) if (exec == Exec::parallel)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const std::size_t p = ctx.valid_pixels[static_cast<std::size_t>(i)];
    double best = std::numeric_limits<double>::infinity();
    std::uint32_t best_k = kNoTile;
    if (label[p] != kNoTile) consider(joint_distance(ctx, p, centers, label[p]), label[p], best, best_k);
    const double row = static_cast<double>(p / cube.width()), col = static_cast<double>(p % cube.width());
    const auto br0 = bucket_of(row - s, brows), br1 = bucket_of(row + s, brows);
    const auto bc0 = bucket_of(col - s, bcols), bc1 = bucket_of(col + s, bcols);
    for (auto br = br0; br <= br1; ++br) {
      for (auto bc = bc0; bc <= bc1; ++bc) {
        for (const auto k : buckets[static_cast<std::size_t>(br * bcols + bc)]) {
          if (k == label[p] || !in_window(ctx, p, centers, k)) continue;
          consider(joint_distance(ctx, p, centers, k), k, best, best_k);
        }
      }
    }
    label[p] = best_k;
  }
}

/// Classic center-centric assignment: each center scans its window.
void assign_center_centric(const SlicContext& ctx, const Centers& centers, std::vector<std::uint32_t>& label) {
  const auto& cube = ctx.cube;
  std::vector<double> best(cube.pixel_count(), std::numeric_limits<double>::infinity());
  std::vector<std::uint32_t> best_k(cube.pixel_count(), kNoTile);
  for (const auto p : ctx.valid_pixels) {
    if (label[p] != kNoTile) consider(joint_distance(ctx, p, centers, label[p]), label[p], best[p], best_k[p]);
  }
  const double s = ctx.spacing;
  for (std::size_t k = 0; k < centers.size(); ++k) {
    const auto r0 = static_cast<std::ptrdiff_t>(std::ceil(centers.y[k] - s));
    const auto r1 = static_cast<std::ptrdiff_t>(std::floor(centers.y[k] + s));
    const auto c0 = static_cast<std::ptrdiff_t>(std::ceil(centers.x[k] - s));
    const auto c1 = static_cast<std::ptrdiff_t>(std::floor(centers.x[k] + s));
    for (auto r = std::max<std::ptrdiff_t>(r0, 0); r <= std::min<std::ptrdiff_t>(r1, cube.height() - 1); ++r) {
      for (auto c = std::max<std::ptrdiff_t>(c0, 0); c <= std::min<std::ptrdiff_t>(c1, cube.width() - 1); ++c) {
        const auto p = static_cast<std::size_t>(r) * cube.width() + static_cast<std::size_t>(c);
        if (!cube.valid(p) || k == label[p] || !in_window(ctx, p, centers, k)) continue;
        consider(joint_distance(ctx, p, centers, k), static_cast<std::uint32_t>(k), best[p], best_k[p]);
      }
    }
  }
  for (const auto p : ctx.valid_pixels) label[p] = best_k[p];
}

double total_objective(const SlicContext& ctx, const Centers& centers, const std::vector<std::uint32_t>& label) {
  double total = 0.0;
  for (const auto p : ctx.valid_pixels) total += joint_distance(ctx, p, centers, label[p]);
  return total;
}

/// Members of each center in ascending pixel order (counting sort).
std::vector<std::vector<std::uint32_t>> group_members(const SlicContext& ctx, std::size_t k_count,
                                                      const std::vector<std::uint32_t>& label) {
  std::vector<std::vector<std::uint32_t>> members(k_count);
  for (const auto p : ctx.valid_pixels) members[label[p]].push_back(p);
  return members;
}

/// Moves each center to its members' mean unless that raises the tile's summed
/// joint distance. Returns the largest accepted center displacement.
double update_centers(const SlicContext& ctx, Centers& centers, const std::vector<std::vector<std::uint32_t>>& members,
                      Exec exec) {
  const std::size_t bands = centers.bands;
  const auto k_count = static_cast<std::ptrdiff_t>(centers.size());
  std::vector<double> moved(centers.size(), 0.0);
#pragma omp parallel for schedule(dynamic, 4) if (exec == Exec::parallel)
  for (std::ptrdiff_t ki = 0; ki < k_count; ++ki) {
    const auto k = static_cast<std::size_t>(ki);
    const auto& m = members[k];
    if (m.empty()) continue;
    std::vector<double> sum(bands, 0.0);
    double sy = 0.0, sx = 0.0;
    for (const auto p : m) {
      const auto px = ctx.cube.pixel(p);
      for (std::size_t b = 0; b < bands; ++b) sum[b] += px[b];
      sy += static_cast<double>(p / ctx.cube.width());
      sx += static_cast<double>(p % ctx.cube.width());
    }
    const double inv = 1.0 / static_cast<double>(m.size());
    for (auto& v : sum) v *= inv;

    Centers candidate;
    candidate.bands = bands;
    candidate.y = {sy * inv};
    candidate.x = {sx * inv};
    candidate.spec.resize(bands);
    candidate.norm2 = {0.0};
    set_center_spectrum(candidate, 0, sum);

    double old_cost = 0.0, new_cost = 0.0;
    for (const auto p : m) {
      old_cost += joint_distance(ctx, p, centers, k);
      new_cost += joint_distance(ctx, p, candidate, 0);
    }
    if (new_cost <= old_cost) {
      const double dy = candidate.y[0] - centers.y[k], dx = candidate.x[0] - centers.x[k];
      moved[k] = std::sqrt(dy * dy + dx * dx);
      // Each iteration writes only its own center slot.
      centers.y[k] = candidate.y[0];
      centers.x[k] = candidate.x[0];
      std::copy(sum.begin(), sum.end(), centers.spec.begin() + static_cast<std::ptrdiff_t>(k * bands));
      centers.norm2[k] = candidate.norm2[0];
    }
  }
  return moved.empty() ? 0.0 : *std::max_element(moved.begin(), moved.end());
}

/// Splits every tile into 4-connected components; the largest component keeps
/// the tile, other fragments join the largest adjacent tile. Returns dense ids
/// numbered in raster order of first appearance.
std::vector<std::uint32_t> enforce_connectivity(const HsiCube& cube, const std::vector<std::uint32_t>& label) {
  const std::size_t h = cube.height(), w = cube.width(), n = h * w;
  std::vector<std::uint32_t> comp(n, kNoTile);
  std::vector<std::uint32_t> comp_label;
  std::vector<std::size_t> comp_size;
  std::vector<std::uint32_t> stack;
  for (std::size_t start = 0; start < n; ++start) {
    if (label[start] == kNoTile || comp[start] != kNoTile) continue;
    const auto id = static_cast<std::uint32_t>(comp_label.size());
    comp_label.push_back(label[start]);
    comp_size.push_back(0);
    stack.assign(1, static_cast<std::uint32_t>(start));
    comp[start] = id;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      ++comp_size[id];
      const std::size_t r = p / w, c = p % w;
      const std::size_t nb[4] = {r > 0 ? p - w : n, r + 1 < h ? p + w : n, c > 0 ? p - 1 : n, c + 1 < w ? p + 1 : n};
      for (const auto q : nb) {
        if (q < n && comp[q] == kNoTile && label[q] == label[start]) {
          comp[q] = id;
          stack.push_back(static_cast<std::uint32_t>(q));
        }
      }
    }
  }
  const std::size_t comps = comp_label.size();

  // Primary component per original label: the largest, ties to the first found.
  std::vector<std::uint32_t> primary_of_label;
  for (std::size_t i = 0; i < comps; ++i) {
    const auto l = comp_label[i];
    if (l >= primary_of_label.size()) primary_of_label.resize(l + 1, kNoTile);
    auto& prim = primary_of_label[l];
    if (prim == kNoTile || comp_size[i] > comp_size[prim]) prim = static_cast<std::uint32_t>(i);
  }
  // owner[i]: resolved component that absorbs component i.
  std::vector<std::uint32_t> owner(comps, kNoTile);
  std::vector<std::size_t> owner_size(comps, 0);
  for (std::size_t i = 0; i < comps; ++i) {
    if (primary_of_label[comp_label[i]] == i) {
      owner[i] = static_cast<std::uint32_t>(i);
      owner_size[i] = comp_size[i];
    }
  }

  // Adjacency between components.
  std::vector<std::vector<std::uint32_t>> adjacent(comps);
  for (std::size_t p = 0; p < n; ++p) {
    if (comp[p] == kNoTile) continue;
    const std::size_t r = p / w, c = p % w;
    const std::size_t nb[2] = {r + 1 < h ? p + w : n, c + 1 < w ? p + 1 : n};
    for (const auto q : nb) {
      if (q < n && comp[q] != kNoTile && comp[q] != comp[p]) {
        adjacent[comp[p]].push_back(comp[q]);
        adjacent[comp[q]].push_back(comp[p]);
      }
    }
  }
  for (auto& a : adjacent) {
    std::sort(a.begin(), a.end());
    a.erase(std::unique(a.begin(), a.end()), a.end());
  }

  bool pending = true;
  while (pending) {
    pending = false;
    bool progressed = false;
    for (std::size_t i = 0; i < comps; ++i) {
      if (owner[i] != kNoTile) continue;
      std::uint32_t target = kNoTile;
      for (const auto j : adjacent[i]) {
        const auto o = owner[j];
        if (o == kNoTile) continue;
        if (target == kNoTile || owner_size[o] > owner_size[target] || (owner_size[o] == owner_size[target] && o < target)) {
          target = o;
        }
      }
      if (target == kNoTile) {
        pending = true;
        continue;
      }
      owner[i] = target;
      owner_size[target] += comp_size[i];
      progressed = true;
    }
    if (pending && !progressed) {
      // Islands with no resolved neighbour become tiles of their own.
      for (std::size_t i = 0; i < comps; ++i) {
        if (owner[i] == kNoTile) {
          owner[i] = static_cast<std::uint32_t>(i);
          owner_size[i] = comp_size[i];
          break;
        }
      }
    }
  }

  std::vector<std::uint32_t> dense(comps, kNoTile);
  std::uint32_t next = 0;
  std::vector<std::uint32_t> out(n, kNoTile);
  for (std::size_t p = 0; p < n; ++p) {
    if (comp[p] == kNoTile) continue;
    const auto o = owner[comp[p]];
    if (dense[o] == kNoTile) dense[o] = next++;
    out[p] = dense[o];
  }
  return out;
}

TileMap finish(const HsiCube& cube, const std::vector<std::uint32_t>& label, std::vector<double> history,
               std::size_t iterations, Exec exec) {
  TileMap map;
  map.height = cube.height();
  map.width = cube.width();
  map.assignment = enforce_connectivity(cube, label);
  map.objective_history = std::move(history);
  map.iterations = iterations;
  compute_tile_statistics(map, cube, exec);
  return map;
}

template <typename Assign>
TileMap run_slic(const HsiCube& cube, const SlicParams& params, Exec exec, Assign assign) {
  const SlicContext ctx = make_context(cube, params);
  Centers centers = seed_centers(ctx);
  std::vector<std::uint32_t> label(cube.pixel_count(), kNoTile);
  std::vector<double> history;
  const std::size_t max_iters = std::max<std::size_t>(params.max_iters, 1);
  std::size_t iter = 0;
  while (iter < max_iters) {
    assign(ctx, centers, label);
    history.push_back(total_objective(ctx, centers, label));
    ++iter;
    if (iter == max_iters) break;
    const auto members = group_members(ctx, centers.size(), label);
    if (update_centers(ctx, centers, members, exec) < params.convergence_px) break;
  }
  return finish(cube, label, std::move(history), iter, exec);
}

}  // namespace

TileMap slic_segment(const HsiCube& cube, const SlicParams& params, Exec exec) {
  return run_slic(cube, params, exec, [exec](const SlicContext& ctx, const Centers& c, std::vector<std::uint32_t>& l) {
    assign_pixel_centric(ctx, c, l, exec);
  });
}

TileMap slic_segment_reference(const HsiCube& cube, const SlicParams& params) {
  return run_slic(cube, params, Exec::serial,
                  [](const SlicContext& ctx, const Centers& c, std::vector<std::uint32_t>& l) {
                    assign_center_centric(ctx, c, l);
                  });
}

void compute_tile_statistics(TileMap& map, const HsiCube& cube, Exec exec) {
  if (map.assignment.size() != cube.pixel_count()) throw ShapeError("tile map does not match cube");
  std::uint32_t count = 0;
  for (const auto t : map.assignment) {
    if (t != kNoTile) count = std::max(count, t + 1);
  }
  std::vector<Tile> tiles(count);
  for (std::uint32_t i = 0; i < count; ++i) tiles[i].id = i;
  for (std::size_t p = 0; p < map.assignment.size(); ++p) {
    if (map.assignment[p] != kNoTile) tiles[map.assignment[p]].pixels.push_back(static_cast<std::uint32_t>(p));
  }
  const std::size_t bands = cube.bands(), w = cube.width();
#pragma omp parallel for schedule(dynamic, 4) if (exec == Exec::parallel)
  for (std::ptrdiff_t ti = 0; ti < static_cast<std::ptrdiff_t>(count); ++ti) {
    Tile& t = tiles[static_cast<std::size_t>(ti)];
    if (t.pixels.empty()) continue;
    BoundingBox box{cube.height(), w, 0, 0};
    t.mean_spectrum.assign(bands, 0.0);
    for (const auto p : t.pixels) {
      const std::size_t r = p / w, c = p % w;
      box.row0 = std::min(box.row0, r);
      box.col0 = std::min(box.col0, c);
      box.row1 = std::max(box.row1, r + 1);
      box.col1 = std::max(box.col1, c + 1);
      const auto px = cube.pixel(p);
      for (std::size_t b = 0; b < bands; ++b) t.mean_spectrum[b] += px[b];
    }
    t.bbox = box;
    const double inv = 1.0 / static_cast<double>(t.pixels.size());
    double intensity = 0.0;
    for (auto& v : t.mean_spectrum) {
      v *= inv;
      intensity += v;
    }
    t.mean_intensity = intensity / static_cast<double>(bands);
    double mean_norm2 = 0.0;
    for (const auto v : t.mean_spectrum) mean_norm2 += v * v;
    double sam_sum = 0.0, l2_sum = 0.0;
    for (const auto p : t.pixels) {
      const auto px = cube.pixel(p);
      double dot = 0.0, n2 = 0.0, d2 = 0.0;
      for (std::size_t b = 0; b < bands; ++b) {
        const double v = px[b];
        dot += v * t.mean_spectrum[b];
        n2 += v * v;
        const double d = v - t.mean_spectrum[b];
        d2 += d * d;
      }
      const double denom = n2 * mean_norm2;
      sam_sum += denom > 0.0 ? std::acos(std::clamp(dot / std::sqrt(denom), -1.0, 1.0)) : 0.5 * std::numbers::pi;
      l2_sum += std::sqrt(d2);
    }
    t.mean_sam_uniformity = sam_sum * inv;
    t.mean_l2_uniformity = l2_sum * inv;
  }
  // Keep labels if the map was labelled before.
  for (std::size_t i = 0; i < std::min(tiles.size(), map.tiles.size()); ++i) {
    tiles[i].label = map.tiles[i].label;
    tiles[i].quality_pass = map.tiles[i].quality_pass;
  }
  map.tiles = std::move(tiles);
}

void label_tiles(TileMap& map, const AnnotationMask& mask) {
  if (mask.height() != map.height || mask.width() != map.width) throw ShapeError("mask shape differs from tile map");
  for (auto& t : map.tiles) {
    if (t.pixels.empty()) {
      t.label = kUnlabeled;
      continue;
    }
    const int first = mask.at(t.pixels.front());
    const bool pure = std::all_of(t.pixels.begin(), t.pixels.end(), [&](auto p) { return mask.at(p) == first; });
    t.label = pure ? first : kMixedLabel;
  }
}

double percentile(std::vector<double> values, double p) {
  if (values.empty()) throw DomainError("percentile of an empty sample");
  if (!(p >= 0.0 && p <= 100.0)) throw DomainError("percentile outside [0, 100]");
  std::sort(values.begin(), values.end());
  const auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(values.size())));
  return values[rank == 0 ? 0 : rank - 1];
}

TileMap filter_tiles(TileMap map, const FilterParams& params) {
  if (map.tiles.empty()) throw DomainError("no tiles to filter");
  if (params.intensity_lo > params.intensity_hi) throw DomainError("intensity percentile bounds inverted");
  for (const double p : {params.sam_pctl, params.l2_pctl, params.intensity_lo, params.intensity_hi}) {
    if (!(p >= 0.0 && p <= 100.0)) throw DomainError("percentile outside [0, 100]");
  }
  map.cuts = {};
  std::vector<double> sam, l2, intensity;
  for (auto& t : map.tiles) {
    t.quality_pass = false;
    if (t.label == kMixedLabel || t.pixels.empty()) continue;
    sam.push_back(t.mean_sam_uniformity);
    l2.push_back(t.mean_l2_uniformity);
    intensity.push_back(t.mean_intensity);
  }
  if (sam.empty()) return map;
  const double sam_cut = percentile(sam, params.sam_pctl);
  const double l2_cut = percentile(l2, params.l2_pctl);
  const double lo = percentile(intensity, params.intensity_lo);
  const double hi = percentile(intensity, params.intensity_hi);
  map.cuts = {true, sam.size(), sam_cut, l2_cut, lo, hi};
  for (auto& t : map.tiles) {
    if (t.label == kMixedLabel || t.pixels.empty()) continue;
    t.quality_pass = t.mean_sam_uniformity <= sam_cut && t.mean_l2_uniformity <= l2_cut && t.mean_intensity >= lo &&
                     t.mean_intensity <= hi;
  }
  return map;
}

std::vector<std::size_t> all_channels(std::size_t bands) {
  std::vector<std::size_t> c(bands);
  std::iota(c.begin(), c.end(), std::size_t{0});
  return c;
}

PaddedPatch extract_patch(const HsiCube& cube, const Tile& tile, std::span<const std::size_t> channels,
                          std::size_t side) {
  if (channels.empty()) throw DomainError("patch needs at least one channel");
  for (const auto c : channels) {
    if (c >= cube.bands()) throw DomainError("channel index " + std::to_string(c) + " outside cube bands");
  }
  if (tile.pixels.empty()) throw DomainError("cannot extract an empty tile");
  if (!tile.fits(side)) {
    throw ShapeError("tile " + std::to_string(tile.id) + " bounding box " + std::to_string(tile.bbox.height()) + "x" +
                     std::to_string(tile.bbox.width()) + " exceeds patch side " + std::to_string(side));
  }
  PaddedPatch patch;
  patch.side = side;
  patch.channels.assign(channels.begin(), channels.end());
  patch.values.assign(side * side * channels.size(), 0.0);
  patch.member.assign(side * side, 0);
  patch.tile_id = tile.id;
  patch.label = tile.label;
  const std::size_t off_r = (side - tile.bbox.height()) / 2, off_c = (side - tile.bbox.width()) / 2;
  const std::size_t w = cube.width();
  for (const auto p : tile.pixels) {
    const std::size_t r = p / w - tile.bbox.row0 + off_r, c = p % w - tile.bbox.col0 + off_c;
    const auto px = cube.pixel(p);
    double* dst = patch.values.data() + (r * side + c) * channels.size();
    for (std::size_t k = 0; k < channels.size(); ++k) dst[k] = px[channels[k]];
    patch.member[r * side + c] = 1;
  }
  return patch;
}

void save_tile_map(const TileMap& map, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  io::put_magic(out, "HSIT");
  io::put<std::uint16_t>(out, kTileMapVersion);
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(map.height));
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(map.width));
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(map.tiles.size()));
  io::put_array<std::uint32_t>(out, map.assignment);
  if (!out) throw IoError("write failed: " + path.string());
}

TileMap load_tile_map(const std::filesystem::path& path, const HsiCube& cube) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  io::expect_magic(in, "HSIT");
  if (io::get<std::uint16_t>(in, "version") != kTileMapVersion) throw FormatError("unsupported tile map version");
  TileMap map;
  map.height = io::get<std::uint32_t>(in, "height");
  map.width = io::get<std::uint32_t>(in, "width");
  const auto count = io::get<std::uint32_t>(in, "tile count");
  if (map.height != cube.height() || map.width != cube.width()) throw ShapeError("tile map shape differs from cube");
  map.assignment.resize(map.height * map.width);
  io::get_array<std::uint32_t>(in, map.assignment, "tile index image");
  for (const auto t : map.assignment) {
    if (t != kNoTile && t >= count) throw FormatError("tile id exceeds declared tile count");
  }
  compute_tile_statistics(map, cube);
  return map;
}

void write_tile_table(const TileMap& map, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << "id\tpixels\trow0\tcol0\trow1\tcol1\tlabel\tmean_sam\tmean_l2\tmean_intensity\tquality\n";
  out.precision(17);
  for (const auto& t : map.tiles) {
    out << t.id << '\t' << t.pixels.size() << '\t' << t.bbox.row0 << '\t' << t.bbox.col0 << '\t' << t.bbox.row1 << '\t'
        << t.bbox.col1 << '\t' << t.label << '\t' << t.mean_sam_uniformity << '\t' << t.mean_l2_uniformity << '\t'
        << t.mean_intensity << '\t' << (t.quality_pass ? "pass" : "fail") << '\n';
  }
}

}  // namespace hsi

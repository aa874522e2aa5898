#include "hsi/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include <boost/math/special_functions/gamma.hpp>

#include "hsi/error.hpp"
#include "hsi/random.hpp"

namespace hsi {

namespace {

template <typename A, typename B>
double sam_impl(std::span<const A> a, std::span<const B> b) {
  if (a.size() != b.size()) {
    throw ShapeError("spectrum length mismatch: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i];
    const double y = b[i];
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  if (na == 0.0 || nb == 0.0) throw DomainError("SAM of a zero-norm spectrum is undefined");
  const double c = std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
  return std::acos(c);
}

template <typename A>
double l2_impl(std::span<const A> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ShapeError("spectrum length mismatch: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

}  // namespace

double sam_distance(std::span<const double> a, std::span<const double> b) { return sam_impl(a, b); }
double sam_distance(std::span<const float> a, std::span<const double> b) { return sam_impl(a, b); }
double sam_distance(std::span<const float> a, std::span<const float> b) { return sam_impl(a, b); }

double l2_distance(std::span<const double> a, std::span<const double> b) { return l2_impl(a, b); }
double l2_distance(std::span<const float> a, std::span<const double> b) { return l2_impl(a, b); }

std::vector<double> mean_spectrum(std::span<const std::vector<double>> spectra) {
  if (spectra.empty()) throw DomainError("mean of an empty spectrum set");
  std::vector<double> mean(spectra.front().size(), 0.0);
  for (const auto& s : spectra) {
    if (s.size() != mean.size()) throw ShapeError("spectrum length mismatch in mean_spectrum");
    for (std::size_t b = 0; b < s.size(); ++b) mean[b] += s[b];
  }
  const double inv = 1.0 / static_cast<double>(spectra.size());
  for (auto& m : mean) m *= inv;
  return mean;
}

std::vector<double> sam_map(const HsiCube& cube, std::span<const double> reference, Exec exec) {
  if (reference.size() != cube.bands()) throw ShapeError("reference length does not match cube bands");
  std::vector<double> out(cube.pixel_count(), std::numeric_limits<double>::quiet_NaN());
  const auto n = static_cast<std::ptrdiff_t>(cube.pixel_count());
#pragma omp parallel for schedule(static) if (exec == Exec::parallel)
  for (std::ptrdiff_t p = 0; p < n; ++p) {
    const auto idx = static_cast<std::size_t>(p);
    if (!cube.valid(idx)) continue;
    const auto px = cube.pixel(idx);
    if (std::all_of(px.begin(), px.end(), [](float v) { return v == 0.0f; })) continue;
    out[idx] = sam_distance(px, reference);
  }
  return out;
}

double mean_pairwise_sam(std::span<const std::vector<double>> spectra, Exec exec) {
  const auto n = static_cast<std::ptrdiff_t>(spectra.size());
  if (n < 2) throw DomainError("pairwise SAM needs at least two spectra");
  // Row sums are combined in index order so the result does not depend on
  // the worker count.
  std::vector<double> row_sum(spectra.size(), 0.0);
#pragma omp parallel for schedule(dynamic, 16) if (exec == Exec::parallel)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::ptrdiff_t j = i + 1; j < n; ++j) {
      s += sam_distance(std::span<const double>(spectra[static_cast<std::size_t>(i)]),
                        std::span<const double>(spectra[static_cast<std::size_t>(j)]));
    }
    row_sum[static_cast<std::size_t>(i)] = s;
  }
  const double total = std::accumulate(row_sum.begin(), row_sum.end(), 0.0);
  const double pairs = 0.5 * static_cast<double>(n) * static_cast<double>(n - 1);
  return total / pairs;
}

double two_sample_chi2(std::span<const double> mean1, std::span<const double> var1, std::size_t n1,
                       std::span<const double> mean2, std::span<const double> var2, std::size_t n2) {
  const std::size_t bands = mean1.size();
  if (var1.size() != bands || mean2.size() != bands || var2.size() != bands) {
    throw ShapeError("chi2 inputs must share a band count");
  }
  if (n1 == 0 || n2 == 0) throw DomainError("chi2 needs non-empty samples");
  double chi2 = 0.0;
  for (std::size_t b = 0; b < bands; ++b) {
    const double d = mean1[b] - mean2[b];
    const double denom = var1[b] / static_cast<double>(n1) + var2[b] / static_cast<double>(n2);
    if (denom > 0.0) {
      chi2 += d * d / denom;
    } else if (d != 0.0) {
      return std::numeric_limits<double>::infinity();
    }
  }
  return chi2;
}

double chi2_survival(double statistic, std::size_t dof) {
  if (dof == 0) throw DomainError("chi2 needs at least one degree of freedom");
  if (std::isinf(statistic)) return 0.0;
  if (statistic <= 0.0) return 1.0;
  return boost::math::gamma_q(0.5 * static_cast<double>(dof), 0.5 * statistic);
}

const PairSeparation& SeparabilityReport::pair(int a, int b) const {
  if (a > b) std::swap(a, b);
  for (const auto& p : pairs) {
    if (p.class_a == a && p.class_b == b) return p;
  }
  throw DomainError("class pair not in report");
}

SeparabilityReport cluster_separability(const HsiCube& cube, const AnnotationMask& mask,
                                        std::span<const int> classes, const SeparabilityOptions& options) {
  if (mask.height() != cube.height() || mask.width() != cube.width()) {
    throw ShapeError("annotation mask shape differs from cube");
  }
  if (classes.size() < 2) throw DomainError("separability needs at least two classes");
  const std::size_t bands = cube.bands();

  struct Moments {
    std::vector<std::size_t> members;
    std::vector<double> mean, var;
  };
  std::vector<Moments> moments(classes.size());
  for (std::size_t p = 0; p < cube.pixel_count(); ++p) {
    if (!cube.valid(p)) continue;
    for (std::size_t k = 0; k < classes.size(); ++k) {
      if (mask.at(p) == classes[k]) moments[k].members.push_back(p);
    }
  }

  SeparabilityReport report;
  for (std::size_t k = 0; k < classes.size(); ++k) {
    auto& m = moments[k];
    if (m.members.empty()) throw DomainError("class " + std::to_string(classes[k]) + " has no valid pixels");
    if (m.members.size() < 2) {
      throw DomainError("class " + std::to_string(classes[k]) + " is degenerate (single pixel)");
    }
    m.mean.assign(bands, 0.0);
    m.var.assign(bands, 0.0);
    for (const auto p : m.members) {
      const auto px = cube.pixel(p);
      for (std::size_t b = 0; b < bands; ++b) m.mean[b] += px[b];
    }
    const double inv = 1.0 / static_cast<double>(m.members.size());
    for (auto& v : m.mean) v *= inv;
    for (const auto p : m.members) {
      const auto px = cube.pixel(p);
      for (std::size_t b = 0; b < bands; ++b) {
        const double d = px[b] - m.mean[b];
        m.var[b] += d * d;
      }
    }
    const double inv_unbiased = 1.0 / static_cast<double>(m.members.size() - 1);
    for (auto& v : m.var) v *= inv_unbiased;

    // Uniform subsample without replacement (partial Fisher-Yates).
    std::vector<std::size_t> pick = m.members;
    const std::size_t take = std::min(options.max_sampled_pixels, pick.size());
    if (take < pick.size()) {
      Rng rng(derive_seed(options.seed, static_cast<std::uint64_t>(classes[k])));
      for (std::size_t i = 0; i < take; ++i) {
        const std::size_t j = i + rng.below(pick.size() - i);
        std::swap(pick[i], pick[j]);
      }
      pick.resize(take);
    }
    std::vector<std::vector<double>> sample;
    sample.reserve(take);
    for (const auto p : pick) {
      const auto px = cube.pixel(p);
      sample.emplace_back(px.begin(), px.end());
    }
    ClassSpread spread;
    spread.class_id = classes[k];
    spread.pixel_count = m.members.size();
    spread.sampled = take;
    spread.intra_sam = mean_pairwise_sam(sample);
    spread.centroid = m.mean;
    report.classes.push_back(std::move(spread));
  }

  std::vector<std::size_t> order(classes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](auto x, auto y) { return classes[x] < classes[y]; });
  for (std::size_t ii = 0; ii < order.size(); ++ii) {
    for (std::size_t jj = ii + 1; jj < order.size(); ++jj) {
      const auto i = order[ii], j = order[jj];
      PairSeparation ps;
      ps.class_a = classes[i];
      ps.class_b = classes[j];
      ps.intra_a = report.classes[i].intra_sam;
      ps.intra_b = report.classes[j].intra_sam;
      ps.inter_centroid_sam = sam_distance(std::span<const double>(moments[i].mean),
                                           std::span<const double>(moments[j].mean));
      ps.chi2 = two_sample_chi2(moments[i].mean, moments[i].var, moments[i].members.size(), moments[j].mean,
                                moments[j].var, moments[j].members.size());
      ps.dof = bands;
      ps.p_value = chi2_survival(ps.chi2, bands);
      report.pairs.push_back(ps);
    }
  }
  return report;
}

}  // namespace hsi

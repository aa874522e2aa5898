#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "hsi/core.hpp"
#include "hsi/parallel.hpp"

namespace hsi {

/// Spectral angle in radians, in [0, pi]. The cosine is clamped to [-1, 1]
/// before arccos. Throws ShapeError on length mismatch, DomainError on a
/// zero-norm input.
double sam_distance(std::span<const double> a, std::span<const double> b);
double sam_distance(std::span<const float> a, std::span<const double> b);
double sam_distance(std::span<const float> a, std::span<const float> b);

double l2_distance(std::span<const double> a, std::span<const double> b);
double l2_distance(std::span<const float> a, std::span<const double> b);

/// Per-band mean of a non-empty set of equal-length spectra.
std::vector<double> mean_spectrum(std::span<const std::vector<double>> spectra);

/// SAM of every valid pixel of `cube` to `reference`; invalid pixels get NaN.
std::vector<double> sam_map(const HsiCube& cube, std::span<const double> reference, Exec exec = Exec::parallel);

struct ClassSpread {
  int class_id = 0;
  std::size_t pixel_count = 0;
  std::size_t sampled = 0;
  double intra_sam = 0.0;  ///< mean pairwise SAM over the (sub)sample
  std::vector<double> centroid;
};

struct PairSeparation {
  int class_a = 0;
  int class_b = 0;
  double intra_a = 0.0;
  double intra_b = 0.0;
  double inter_centroid_sam = 0.0;
  double chi2 = 0.0;
  std::size_t dof = 0;
  double p_value = 1.0;
};

struct SeparabilityReport {
  std::vector<ClassSpread> classes;
  std::vector<PairSeparation> pairs;  ///< a < b, ordered lexicographically

  const PairSeparation& pair(int a, int b) const;
};

struct SeparabilityOptions {
  std::size_t max_sampled_pixels = 2000;
  std::uint64_t seed = 0;
};

/// Intra-cluster mean pairwise SAM, inter-centroid SAM and a per-band
/// two-sample chi-square statistic for every class pair.
SeparabilityReport cluster_separability(const HsiCube& cube, const AnnotationMask& mask,
                                        std::span<const int> classes, const SeparabilityOptions& options = {});

/// Mean pairwise SAM over all unordered pairs (no sampling).
double mean_pairwise_sam(std::span<const std::vector<double>> spectra, Exec exec = Exec::parallel);

/// chi2 = sum_b (m1 - m2)^2 / (v1/n1 + v2/n2) with one degree of freedom per band.
/// Bands with a zero denominator contribute 0 if the means agree, +inf otherwise.
double two_sample_chi2(std::span<const double> mean1, std::span<const double> var1, std::size_t n1,
                       std::span<const double> mean2, std::span<const double> var2, std::size_t n2);

/// Upper-tail probability of the chi-square distribution.
double chi2_survival(double statistic, std::size_t dof);

}  // namespace hsi

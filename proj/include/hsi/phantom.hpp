#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "hsi/config.hpp"
#include "hsi/core.hpp"

namespace hsi {

struct BandBoost {
  double wavelength_nm = 0.0;
  double amplitude = 0.0;  ///< added to the band nearest wavelength_nm
};

struct ClassSpectralModel {
  double oxygenation = 0.5;  ///< blend between deoxygenated (0) and oxygenated (1) shapes
  double baseline = 0.5;     ///< reflectance scale of the hemoglobin-like curve
  std::vector<BandBoost> boosts;
};

/// Ellipse in fractional image coordinates (cx, rx relative to width; cy, ry to height).
struct Region {
  int class_id = 0;
  double cx = 0.5, cy = 0.5;
  double rx = 0.25, ry = 0.25;
};

struct PixelRect {
  std::size_t row = 0, col = 0, height = 0, width = 0;
  bool contains(std::size_t r, std::size_t c) const {
    return r >= row && r < row + height && c >= col && c < col + width;
  }
};

struct PhantomConfig {
  std::uint64_t seed = 0;
  std::size_t height = 256;
  std::size_t width = 256;
  SpectralAxis axis = SpectralAxis::standard();
  /// Pixels outside every region take class 0 (background).
  std::vector<Region> regions;
  std::map<int, ClassSpectralModel> models;
  double noise_sigma = 0.01;
  double vignette_strength = 0.3;
  std::size_t saturation_patches = 0;
  std::size_t saturation_patch_size = 10;
};

struct PhantomScene {
  HsiCube cube;
  AnnotationMask mask;
  std::map<int, std::vector<double>> truth;  ///< noise- and vignette-free class spectra
  std::vector<PixelRect> saturation_boxes;
};

/// Gaussian absorption dips (15 nm FWHM): one at 560 nm when deoxygenated,
/// two at 540/580 nm when oxygenated, blended linearly by `oxygenation`.
/// Values lie in (0, 1].
std::vector<double> hemoglobin_like_spectrum(const SpectralAxis& axis, double oxygenation);

std::vector<double> class_spectrum(const SpectralAxis& axis, const ClassSpectralModel& model);

/// Deterministic in the config. Noise is drawn per row from a stream derived
/// from (seed, row), so rows can be generated in parallel.
PhantomScene generate_scene(const PhantomConfig& config);

/// Healthy vs. LGG ellipses over a background. The classes differ in
/// oxygenation and LGG carries `informative_bands` planted boosts (600-760 nm).
PhantomConfig standard_phantom(std::uint64_t seed, std::size_t informative_bands = 4);

/// Healthy and LGG share one spectral model except for a single boost at
/// `wavelength_nm`.
PhantomConfig planted_band_phantom(std::uint64_t seed, double wavelength_nm = 700.0, double amplitude = 0.1);

/// Adds a white-matter region (class 10) between the two tissue ellipses whose
/// spectrum lies between the healthy and LGG models. Never part of the
/// healthy/LGG training set.
void add_ood_region(PhantomConfig& config);

/// Wavelengths used by standard_phantom for its planted boosts.
std::vector<double> standard_planted_wavelengths(std::size_t informative_bands);

PhantomConfig phantom_config_from_ini(const Ini& ini);
Ini phantom_config_to_ini(const PhantomConfig& config);

}  // namespace hsi

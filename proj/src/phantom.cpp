#include "hsi/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "hsi/error.hpp"
#include "hsi/random.hpp"

namespace hsi {

namespace {

constexpr double kDipFwhmNm = 15.0;
constexpr double kDipDepth = 0.4;

double gaussian(double x, double center, double sigma) {
  const double z = (x - center) / sigma;
  return std::exp(-0.5 * z * z);
}

void validate(const PhantomConfig& config) {
  if (config.height == 0 || config.width == 0) throw DomainError("phantom needs a non-empty image");
  if (!(config.noise_sigma >= 0.0)) throw DomainError("noise_sigma must be non-negative");
  if (!(config.vignette_strength >= 0.0 && config.vignette_strength < 1.0)) {
    throw DomainError("vignette_strength must lie in [0, 1)");
  }
  for (const auto& r : config.regions) {
    if (r.class_id < 0 || r.class_id >= kClassCount) throw DomainError("region label outside class schema");
    if (!(r.rx > 0.0 && r.ry > 0.0)) throw DomainError("zero-area region for class " + std::to_string(r.class_id));
  }
  for (const auto& [id, model] : config.models) {
    if (id < 0 || id >= kClassCount) throw DomainError("spectral model for class outside schema");
    if (!(model.oxygenation >= 0.0 && model.oxygenation <= 1.0)) throw DomainError("oxygenation outside [0, 1]");
  }
}

}  // namespace

std::vector<double> hemoglobin_like_spectrum(const SpectralAxis& axis, double oxygenation) {
  if (!(oxygenation >= 0.0 && oxygenation <= 1.0)) throw DomainError("oxygenation must lie in [0, 1]");
  const double sigma = kDipFwhmNm / (2.0 * std::sqrt(2.0 * std::log(2.0)));
  std::vector<double> out(axis.band_count());
  for (std::size_t b = 0; b < out.size(); ++b) {
    const double w = axis[b];
    const double deoxy = 1.0 - kDipDepth * gaussian(w, 560.0, sigma);
    const double oxy = 1.0 - kDipDepth * (gaussian(w, 540.0, sigma) + gaussian(w, 580.0, sigma));
    out[b] = (1.0 - oxygenation) * deoxy + oxygenation * oxy;
  }
  return out;
}

std::vector<double> class_spectrum(const SpectralAxis& axis, const ClassSpectralModel& model) {
  auto s = hemoglobin_like_spectrum(axis, model.oxygenation);
  for (auto& v : s) v *= model.baseline;
  for (const auto& boost : model.boosts) s[band_index(axis, boost.wavelength_nm)] += boost.amplitude;
  return s;
}

PhantomScene generate_scene(const PhantomConfig& config) {
  validate(config);
  const std::size_t h = config.height, w = config.width, bands = config.axis.band_count();

  PhantomScene scene;
  scene.mask = AnnotationMask(h, w, 0);
  std::vector<std::size_t> painted(config.regions.size(), 0);
  for (std::size_t r = 0; r < h; ++r) {
    const double y = (static_cast<double>(r) + 0.5) / static_cast<double>(h);
    for (std::size_t c = 0; c < w; ++c) {
      const double x = (static_cast<double>(c) + 0.5) / static_cast<double>(w);
      int label = -1;
      for (std::size_t k = 0; k < config.regions.size(); ++k) {
        const auto& reg = config.regions[k];
        const double dx = (x - reg.cx) / reg.rx, dy = (y - reg.cy) / reg.ry;
        if (dx * dx + dy * dy > 1.0) continue;
        if (label >= 0 && label != reg.class_id) {
          throw DomainError("regions overlap with conflicting labels at pixel (" + std::to_string(r) + ", " +
                            std::to_string(c) + ")");
        }
        label = reg.class_id;
        ++painted[k];
      }
      if (label >= 0) scene.mask.set(r, c, label);
    }
  }
  for (std::size_t k = 0; k < painted.size(); ++k) {
    if (painted[k] == 0) throw DomainError("region " + std::to_string(k) + " covers no pixel");
  }

  // Classes present need a spectral model; background falls back to a default.
  std::vector<int> present(kClassCount, 0);
  for (const auto l : scene.mask.labels()) present[l] = 1;
  std::vector<std::vector<double>> spectra(kClassCount);
  for (int id = 0; id < kClassCount; ++id) {
    if (!present[static_cast<std::size_t>(id)]) continue;
    const auto it = config.models.find(id);
    if (it == config.models.end() && id != 0) {
      throw DomainError("no spectral model for class " + std::to_string(id));
    }
    const ClassSpectralModel model = it == config.models.end() ? ClassSpectralModel{} : it->second;
    spectra[static_cast<std::size_t>(id)] = class_spectrum(config.axis, model);
    scene.truth[id] = spectra[static_cast<std::size_t>(id)];
  }

  scene.cube = HsiCube(h, w, config.axis);
  const double cy = 0.5 * static_cast<double>(h), cx = 0.5 * static_cast<double>(w);
  const double radius = 0.5 * static_cast<double>(std::min(h, w));
  auto radius2 = [&](std::size_t r, std::size_t c) {
    const double dy = (static_cast<double>(r) + 0.5 - cy) / radius;
    const double dx = (static_cast<double>(c) + 0.5 - cx) / radius;
    return dx * dx + dy * dy;
  };

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ri = 0; ri < static_cast<std::ptrdiff_t>(h); ++ri) {
    const auto r = static_cast<std::size_t>(ri);
    Rng rng(derive_seed(config.seed, r));
    for (std::size_t c = 0; c < w; ++c) {
      const double r2 = radius2(r, c);
      auto px = scene.cube.pixel(r, c);
      if (r2 > 1.0) {
        scene.cube.set_valid(r, c, false);
        continue;
      }
      const double gain = 1.0 - config.vignette_strength * r2;
      const auto& truth = spectra[scene.mask.at(r, c)];
      for (std::size_t b = 0; b < bands; ++b) {
        const double noise = config.noise_sigma > 0.0 ? config.noise_sigma * rng.normal() : 0.0;
        px[b] = static_cast<float>((truth[b] + noise) * gain);
      }
    }
  }

  // Saturated specular patches, fully inside the illuminated field.
  Rng rng(derive_seed(config.seed, 0xFFFF'FFFFULL));
  const std::size_t side = config.saturation_patch_size;
  for (std::size_t k = 0; k < config.saturation_patches; ++k) {
    if (side == 0 || side > h || side > w) throw DomainError("saturation patch does not fit the image");
    bool placed = false;
    for (int attempt = 0; attempt < 10000 && !placed; ++attempt) {
      const std::size_t r0 = rng.below(h - side + 1), c0 = rng.below(w - side + 1);
      if (radius2(r0, c0) > 1.0 || radius2(r0 + side - 1, c0) > 1.0 || radius2(r0, c0 + side - 1) > 1.0 ||
          radius2(r0 + side - 1, c0 + side - 1) > 1.0) {
        continue;
      }
      for (std::size_t r = r0; r < r0 + side; ++r) {
        for (std::size_t c = c0; c < c0 + side; ++c) {
          for (auto& v : scene.cube.pixel(r, c)) v = static_cast<float>(kSaturationCap);
        }
      }
      scene.saturation_boxes.push_back({r0, c0, side, side});
      placed = true;
    }
    if (!placed) throw DomainError("could not place saturation patch inside the illuminated field");
  }
  return scene;
}

std::vector<double> standard_planted_wavelengths(std::size_t informative_bands) {
  static const std::vector<double> all = {700.0, 650.0, 740.0, 610.0, 760.0, 675.0, 720.0, 630.0,
                                          590.0, 770.0, 690.0, 660.0};
  if (informative_bands > all.size()) throw DomainError("at most 12 planted bands supported");
  return {all.begin(), all.begin() + static_cast<std::ptrdiff_t>(informative_bands)};
}

PhantomConfig standard_phantom(std::uint64_t seed, std::size_t informative_bands) {
  PhantomConfig cfg;
  cfg.seed = seed;
  cfg.noise_sigma = 0.02;
  cfg.vignette_strength = 0.3;
  cfg.saturation_patches = 1;
  cfg.saturation_patch_size = 12;
  cfg.regions = {{1, 0.26, 0.5, 0.235, 0.48}, {6, 0.74, 0.5, 0.235, 0.48}};
  cfg.models[0] = {0.5, 0.45, {}};
  cfg.models[1] = {0.8, 0.55, {}};
  ClassSpectralModel lgg{0.4, 0.55, {}};
  for (const double wl : standard_planted_wavelengths(informative_bands)) lgg.boosts.push_back({wl, 0.06});
  cfg.models[6] = lgg;
  return cfg;
}

PhantomConfig planted_band_phantom(std::uint64_t seed, double wavelength_nm, double amplitude) {
  PhantomConfig cfg = standard_phantom(seed, 0);
  cfg.noise_sigma = 0.01;
  cfg.models[1] = {0.6, 0.55, {}};
  cfg.models[6] = {0.6, 0.55, {{wavelength_nm, amplitude}}};
  return cfg;
}

void add_ood_region(PhantomConfig& config) {
  // Shrink the tissue ellipses to open a central band for the OOD class.
  for (auto& r : config.regions) {
    if (r.class_id == 1) r = {1, 0.2, 0.5, 0.17, 0.45};
    if (r.class_id == 6) r = {6, 0.8, 0.5, 0.17, 0.45};
  }
  config.regions.push_back({10, 0.5, 0.5, 0.1, 0.4});
  const auto healthy = config.models.at(1);
  const auto lgg = config.models.at(6);
  ClassSpectralModel mid;
  mid.oxygenation = 0.5 * (healthy.oxygenation + lgg.oxygenation);
  mid.baseline = 0.5 * (healthy.baseline + lgg.baseline);
  for (auto b : lgg.boosts) {
    b.amplitude *= 0.5;
    mid.boosts.push_back(b);
  }
  for (auto b : healthy.boosts) {
    b.amplitude *= 0.5;
    mid.boosts.push_back(b);
  }
  config.models[10] = mid;
}

PhantomConfig phantom_config_from_ini(const Ini& ini) {
  PhantomConfig cfg;
  const Ini& scene = section(ini, "phantom");
  cfg.seed = value_or<std::uint64_t>(scene, "seed", cfg.seed);
  cfg.height = value_or<std::size_t>(scene, "height", cfg.height);
  cfg.width = value_or<std::size_t>(scene, "width", cfg.width);
  cfg.noise_sigma = value_or<double>(scene, "noise_sigma", cfg.noise_sigma);
  cfg.vignette_strength = value_or<double>(scene, "vignette_strength", cfg.vignette_strength);
  cfg.saturation_patches = value_or<std::size_t>(scene, "saturation_patches", cfg.saturation_patches);
  cfg.saturation_patch_size = value_or<std::size_t>(scene, "saturation_patch_size", cfg.saturation_patch_size);
  if (const auto wl = scene.get_optional<std::string>("wavelengths")) {
    cfg.axis = SpectralAxis(parse_number_list(*wl));
  } else {
    const double first = value_or<double>(scene, "first_nm", 468.0);
    const double last = value_or<double>(scene, "last_nm", 787.0);
    cfg.axis = SpectralAxis::linear(first, last, value_or<std::size_t>(scene, "bands", 104));
  }

  // [class:<id>] and [region:<n>] sections; regions keep file order.
  for (const auto& [name, body] : ini) {
    if (name.rfind("class:", 0) == 0) {
      const int id = std::stoi(name.substr(6));
      ClassSpectralModel model;
      model.oxygenation = value_or<double>(body, "oxygenation", model.oxygenation);
      model.baseline = value_or<double>(body, "baseline", model.baseline);
      const auto boosts = parse_number_list(value_or<std::string>(body, "boosts", ""));
      if (boosts.size() % 2 != 0) throw FormatError("boosts must be wavelength, amplitude pairs");
      for (std::size_t i = 0; i < boosts.size(); i += 2) model.boosts.push_back({boosts[i], boosts[i + 1]});
      cfg.models[id] = model;
    } else if (name.rfind("region:", 0) == 0) {
      Region r;
      r.class_id = body.get<int>("class");
      const auto center = parse_number_list(body.get<std::string>("center"));
      const auto radii = parse_number_list(body.get<std::string>("radii"));
      if (center.size() != 2 || radii.size() != 2) throw FormatError("region center/radii need two numbers");
      r.cx = center[0];
      r.cy = center[1];
      r.rx = radii[0];
      r.ry = radii[1];
      cfg.regions.push_back(r);
    }
  }
  validate(cfg);
  return cfg;
}

Ini phantom_config_to_ini(const PhantomConfig& cfg) {
  Ini ini;
  Ini scene;
  scene.put("seed", cfg.seed);
  scene.put("height", cfg.height);
  scene.put("width", cfg.width);
  scene.put("noise_sigma", format_double(cfg.noise_sigma));
  scene.put("vignette_strength", format_double(cfg.vignette_strength));
  scene.put("saturation_patches", cfg.saturation_patches);
  scene.put("saturation_patch_size", cfg.saturation_patch_size);
  const auto wl = cfg.axis.wavelengths();
  scene.put("wavelengths", format_number_list({wl.begin(), wl.end()}));
  ini.add_child("phantom", scene);
  for (const auto& [id, model] : cfg.models) {
    Ini m;
    m.put("oxygenation", format_double(model.oxygenation));
    m.put("baseline", format_double(model.baseline));
    std::vector<double> flat;
    for (const auto& b : model.boosts) {
      flat.push_back(b.wavelength_nm);
      flat.push_back(b.amplitude);
    }
    m.put("boosts", format_number_list(flat));
    ini.push_back({"class:" + std::to_string(id), m});
  }
  for (std::size_t k = 0; k < cfg.regions.size(); ++k) {
    const auto& r = cfg.regions[k];
    Ini reg;
    reg.put("class", r.class_id);
    reg.put("center", format_number_list({r.cx, r.cy}));
    reg.put("radii", format_number_list({r.rx, r.ry}));
    ini.push_back({"region:" + std::to_string(k), reg});
  }
  return ini;
}

}  // namespace hsi

#include "hsi/core.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <string>

#include "hsi/binary_io.hpp"
#include "hsi/error.hpp"

namespace hsi {

namespace {

constexpr std::uint16_t kCubeVersion = 1;

std::ofstream open_for_write(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  return out;
}

std::ifstream open_for_read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  return in;
}

}  // namespace

std::string_view class_name(int class_id) {
  static constexpr std::array<std::string_view, kClassCount> names = {
      "Background", "Healthy", "Foreign object", "Blood",       "Coagulation",
      "HGG",        "LGG",     "Histo HGG",      "Histo LGG",   "Blood vessel",
      "White matter", "Deep cortex", "Pia",      "Histo Healthy"};
  if (class_id < 0 || class_id >= kClassCount) return "invalid";
  return names[static_cast<std::size_t>(class_id)];
}

SpectralAxis::SpectralAxis(std::vector<double> wavelengths_nm) : wavelengths_(std::move(wavelengths_nm)) {
  if (wavelengths_.empty()) throw DomainError("spectral axis needs at least one band");
  for (std::size_t i = 0; i < wavelengths_.size(); ++i) {
    if (!std::isfinite(wavelengths_[i])) throw DomainError("non-finite wavelength");
    // Centers are kept at the precision of the cube file's wavelength table.
    wavelengths_[i] = static_cast<double>(static_cast<float>(wavelengths_[i]));
    if (i > 0 && !(wavelengths_[i] > wavelengths_[i - 1])) {
      throw DomainError("wavelengths must be strictly increasing");
    }
  }
}

SpectralAxis SpectralAxis::linear(double first_nm, double last_nm, std::size_t bands) {
  if (bands == 0) throw DomainError("spectral axis needs at least one band");
  std::vector<double> w(bands);
  if (bands == 1) {
    w[0] = first_nm;
  } else {
    const double step = (last_nm - first_nm) / static_cast<double>(bands - 1);
    for (std::size_t i = 0; i < bands; ++i) w[i] = first_nm + step * static_cast<double>(i);
    w.back() = last_nm;
  }
  return SpectralAxis(std::move(w));
}

SpectralAxis SpectralAxis::standard() { return linear(468.0, 787.0, 104); }

std::size_t band_index(const SpectralAxis& axis, double wavelength_nm) {
  const auto w = axis.wavelengths();
  const std::size_t n = w.size();
  if (n == 0) throw DomainError("empty spectral axis");
  const double lo_half = n > 1 ? 0.5 * (w[1] - w[0]) : 0.5;
  const double hi_half = n > 1 ? 0.5 * (w[n - 1] - w[n - 2]) : 0.5;
  if (!std::isfinite(wavelength_nm) || wavelength_nm < w[0] - lo_half || wavelength_nm > w[n - 1] + hi_half) {
    throw DomainError("wavelength " + std::to_string(wavelength_nm) + " nm outside spectral axis");
  }
  const auto it = std::lower_bound(w.begin(), w.end(), wavelength_nm);
  if (it == w.begin()) return 0;
  if (it == w.end()) return n - 1;
  const auto hi = static_cast<std::size_t>(it - w.begin());
  const std::size_t lo = hi - 1;
  return (wavelength_nm - w[lo]) <= (w[hi] - wavelength_nm) ? lo : hi;
}

HsiCube::HsiCube(std::size_t height, std::size_t width, SpectralAxis axis)
    : height_(height),
      width_(width),
      axis_(std::move(axis)),
      data_(height * width * axis_.band_count(), 0.0f),
      valid_(height * width, 1) {}

std::size_t HsiCube::valid_count() const {
  return static_cast<std::size_t>(std::count(valid_.begin(), valid_.end(), std::uint8_t{1}));
}

std::size_t HsiCube::find_non_finite() const {
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (!std::isfinite(data_[i])) return i;
  }
  return static_cast<std::size_t>(-1);
}

AnnotationMask::AnnotationMask(std::size_t height, std::size_t width, std::uint8_t fill)
    : height_(height), width_(width), labels_(height * width, fill) {
  if (fill >= kClassCount) throw DomainError("class id outside schema");
}

void AnnotationMask::set(std::size_t row, std::size_t col, int class_id) {
  if (class_id < 0 || class_id >= kClassCount) {
    throw DomainError("class id " + std::to_string(class_id) + " outside schema");
  }
  labels_[row * width_ + col] = static_cast<std::uint8_t>(class_id);
}

HsiCube calibrate_reflectance(const HsiCube& raw, const WhiteReference& white) {
  const std::size_t bands = raw.bands();
  if (white.spectrum.size() != bands) {
    throw ShapeError("white reference has " + std::to_string(white.spectrum.size()) + " bands, cube has " +
                     std::to_string(bands));
  }
  std::vector<double> scale(bands);
  for (std::size_t b = 0; b < bands; ++b) {
    const double w = white.spectrum[b];
    if (!(w > 0.0) || !std::isfinite(w)) {
      throw DomainError("white reference entry " + std::to_string(b) + " is not strictly positive");
    }
    scale[b] = white.target_reflectance / w;
  }
  HsiCube out(raw.height(), raw.width(), raw.axis());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t p = 0; p < static_cast<std::ptrdiff_t>(raw.pixel_count()); ++p) {
    const auto idx = static_cast<std::size_t>(p);
    const auto in = raw.pixel(idx);
    auto dst = out.pixel(idx);
    bool saturated = false;
    for (std::size_t b = 0; b < bands; ++b) {
      const double v = static_cast<double>(in[b]) * scale[b];
      dst[b] = static_cast<float>(v);
      saturated = saturated || dst[b] > kSaturationCap;
    }
    out.set_valid(idx, raw.valid(idx) && !saturated);
  }
  return out;
}

std::vector<std::uint32_t> encode_runs(std::span<const std::uint8_t> bits) {
  std::vector<std::uint32_t> runs;
  std::uint8_t current = 0;
  std::uint32_t length = 0;
  for (const auto b : bits) {
    const std::uint8_t v = b ? 1 : 0;
    if (v != current) {
      runs.push_back(length);
      current = v;
      length = 0;
    }
    ++length;
  }
  runs.push_back(length);
  return runs;
}

std::vector<std::uint8_t> decode_runs(std::span<const std::uint32_t> runs, std::size_t length) {
  std::vector<std::uint8_t> bits;
  bits.reserve(length);
  std::uint8_t current = 0;
  for (const auto r : runs) {
    if (bits.size() + r > length) throw ShapeError("valid-mask runs exceed pixel count");
    bits.insert(bits.end(), r, current);
    current ^= 1;
  }
  if (bits.size() != length) throw ShapeError("valid-mask runs do not cover pixel count");
  return bits;
}

void save_cube(const HsiCube& cube, const std::filesystem::path& path) {
  if (cube.find_non_finite() != static_cast<std::size_t>(-1)) {
    throw NumericError("cube contains non-finite values; refusing to write " + path.string());
  }
  auto out = open_for_write(path);
  io::put_magic(out, "HSIC");
  io::put<std::uint16_t>(out, kCubeVersion);
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(cube.height()));
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(cube.width()));
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(cube.bands()));
  for (const double w : cube.axis().wavelengths()) io::put<float>(out, static_cast<float>(w));
  const auto runs = encode_runs(cube.valid_mask());
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(runs.size()));
  io::put_array<std::uint32_t>(out, runs);
  // Band-sequential: one full plane per band.
  std::vector<float> plane(cube.pixel_count());
  const auto data = cube.data();
  const std::size_t bands = cube.bands();
  for (std::size_t b = 0; b < bands; ++b) {
    for (std::size_t p = 0; p < plane.size(); ++p) plane[p] = data[p * bands + b];
    io::put_array<float>(out, plane);
  }
  out.flush();
  if (!out) throw IoError("write failed: " + path.string());
}

HsiCube load_cube(const std::filesystem::path& path) {
  auto in = open_for_read(path);
  io::expect_magic(in, "HSIC");
  const auto version = io::get<std::uint16_t>(in, "version");
  if (version != kCubeVersion) throw FormatError("unsupported cube version " + std::to_string(version));
  const auto height = io::get<std::uint32_t>(in, "height");
  const auto width = io::get<std::uint32_t>(in, "width");
  const auto bands = io::get<std::uint32_t>(in, "bands");
  if (height == 0 || width == 0 || bands == 0) throw FormatError("zero dimension in cube header");
  std::vector<float> wl(bands);
  io::get_array<float>(in, wl, "wavelength table");
  std::vector<double> wavelengths(wl.begin(), wl.end());
  SpectralAxis axis;
  try {
    axis = SpectralAxis(std::move(wavelengths));
  } catch (const DomainError& e) {
    throw FormatError(std::string("invalid wavelength table: ") + e.what());
  }
  const auto run_count = io::get<std::uint32_t>(in, "run count");
  const std::size_t pixels = static_cast<std::size_t>(height) * width;
  if (run_count > pixels + 1) throw FormatError("implausible valid-mask run count");
  std::vector<std::uint32_t> runs(run_count);
  io::get_array<std::uint32_t>(in, runs, "valid-mask runs");
  const auto valid = decode_runs(runs, pixels);

  HsiCube cube(height, width, std::move(axis));
  std::vector<float> plane(pixels);
  auto data = cube.data();
  for (std::size_t b = 0; b < bands; ++b) {
    io::get_array<float>(in, plane, "cube payload");
    for (std::size_t p = 0; p < pixels; ++p) data[p * bands + b] = plane[p];
  }
  if (!io::at_end(in)) throw ShapeError("trailing bytes after cube payload");
  for (std::size_t p = 0; p < pixels; ++p) cube.set_valid(p, valid[p] != 0);
  if (const auto bad = cube.find_non_finite(); bad != static_cast<std::size_t>(-1)) {
    throw NumericError("non-finite payload value at flat index " + std::to_string(bad));
  }
  return cube;
}

void save_annotation(const AnnotationMask& mask, const std::filesystem::path& path) {
  auto out = open_for_write(path);
  io::put_magic(out, "HSIA");
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(mask.height()));
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(mask.width()));
  io::put_array<std::uint8_t>(out, mask.labels());
  out.flush();
  if (!out) throw IoError("write failed: " + path.string());
}

AnnotationMask load_annotation(const std::filesystem::path& path) {
  auto in = open_for_read(path);
  io::expect_magic(in, "HSIA");
  const auto height = io::get<std::uint32_t>(in, "height");
  const auto width = io::get<std::uint32_t>(in, "width");
  std::vector<std::uint8_t> labels(static_cast<std::size_t>(height) * width);
  io::get_array<std::uint8_t>(in, labels, "annotation payload");
  if (!io::at_end(in)) throw ShapeError("trailing bytes after annotation payload");
  AnnotationMask mask(height, width);
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) mask.set(r, c, labels[r * width + c]);
  }
  return mask;
}

}  // namespace hsi

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

namespace hsi {

/// Reflectance above this value marks a pixel as saturated.
inline constexpr double kSaturationCap = 1.2;
/// Reflectance of the white calibration target.
inline constexpr double kWhiteTargetReflectance = 0.95;

/// Annotation schema used by the surgeon-labelled masks.
enum class TissueClass : std::uint8_t {
  background = 0,
  healthy = 1,
  foreign_object = 2,
  blood = 3,
  coagulation = 4,
  hgg = 5,
  lgg = 6,
  histo_hgg = 7,
  histo_lgg = 8,
  blood_vessel = 9,
  white_matter = 10,
  deep_cortex = 11,
  pia = 12,
  histo_healthy = 13,
};
inline constexpr int kClassCount = 14;

std::string_view class_name(int class_id);

class SpectralAxis {
 public:
  SpectralAxis() = default;
  /// Throws DomainError unless wavelengths are non-empty and strictly increasing.
  /// Values are rounded to single precision, the precision of the cube file.
  explicit SpectralAxis(std::vector<double> wavelengths_nm);

  /// `bands` centers evenly spaced over [first_nm, last_nm].
  static SpectralAxis linear(double first_nm, double last_nm, std::size_t bands);
  /// 104 bands over 468-787 nm.
  static SpectralAxis standard();

  std::size_t band_count() const { return wavelengths_.size(); }
  std::span<const double> wavelengths() const { return wavelengths_; }
  double operator[](std::size_t band) const { return wavelengths_[band]; }

  friend bool operator==(const SpectralAxis&, const SpectralAxis&) = default;

 private:
  std::vector<double> wavelengths_;
};

/// Index of the band center nearest to `wavelength_nm`; ties go to the lower
/// index. Throws DomainError if the query lies more than half a band spacing
/// outside the axis.
std::size_t band_index(const SpectralAxis& axis, double wavelength_nm);

/// Reflectance cube in band-interleaved-by-pixel memory order, 32-bit storage.
class HsiCube {
 public:
  HsiCube() = default;
  HsiCube(std::size_t height, std::size_t width, SpectralAxis axis);

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t bands() const { return axis_.band_count(); }
  std::size_t pixel_count() const { return height_ * width_; }
  const SpectralAxis& axis() const { return axis_; }

  std::span<const float> pixel(std::size_t row, std::size_t col) const {
    return {data_.data() + (row * width_ + col) * bands(), bands()};
  }
  std::span<float> pixel(std::size_t row, std::size_t col) {
    return {data_.data() + (row * width_ + col) * bands(), bands()};
  }
  std::span<const float> pixel(std::size_t index) const {
    return {data_.data() + index * bands(), bands()};
  }
  std::span<float> pixel(std::size_t index) { return {data_.data() + index * bands(), bands()}; }

  float at(std::size_t row, std::size_t col, std::size_t band) const {
    return data_[(row * width_ + col) * bands() + band];
  }
  float& at(std::size_t row, std::size_t col, std::size_t band) {
    return data_[(row * width_ + col) * bands() + band];
  }

  bool valid(std::size_t row, std::size_t col) const { return valid_[row * width_ + col] != 0; }
  bool valid(std::size_t index) const { return valid_[index] != 0; }
  void set_valid(std::size_t row, std::size_t col, bool v) { valid_[row * width_ + col] = v ? 1 : 0; }
  void set_valid(std::size_t index, bool v) { valid_[index] = v ? 1 : 0; }
  std::size_t valid_count() const;

  std::span<const float> data() const { return data_; }
  std::span<float> data() { return data_; }
  std::span<const std::uint8_t> valid_mask() const { return valid_; }

  /// First non-finite value, if any, as a flat index; npos otherwise.
  std::size_t find_non_finite() const;

  friend bool operator==(const HsiCube&, const HsiCube&) = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  SpectralAxis axis_;
  std::vector<float> data_;
  std::vector<std::uint8_t> valid_;
};

class AnnotationMask {
 public:
  AnnotationMask() = default;
  AnnotationMask(std::size_t height, std::size_t width, std::uint8_t fill = 0);

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::uint8_t at(std::size_t row, std::size_t col) const { return labels_[row * width_ + col]; }
  std::uint8_t at(std::size_t index) const { return labels_[index]; }
  /// Throws DomainError for ids outside the 14-class schema.
  void set(std::size_t row, std::size_t col, int class_id);
  std::span<const std::uint8_t> labels() const { return labels_; }

  friend bool operator==(const AnnotationMask&, const AnnotationMask&) = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<std::uint8_t> labels_;
};

struct WhiteReference {
  std::vector<double> spectrum;
  double target_reflectance = kWhiteTargetReflectance;
};

/// out = raw / white * target_reflectance, band-wise. Pixels exceeding
/// kSaturationCap in any band are flagged invalid; values are kept unclipped.
HsiCube calibrate_reflectance(const HsiCube& raw, const WhiteReference& white);

/// Cube container: "HSIC", u16 version, u32 height, u32 width, u32 bands,
/// f32[bands] wavelengths, RLE valid mask, band-sequential f32 payload.
void save_cube(const HsiCube& cube, const std::filesystem::path& path);
HsiCube load_cube(const std::filesystem::path& path);

/// Annotation container: "HSIA", u32 height, u32 width, u8 labels row-major.
void save_annotation(const AnnotationMask& mask, const std::filesystem::path& path);
AnnotationMask load_annotation(const std::filesystem::path& path);

/// Run-length encoding of a 0/1 bitmap: alternating run lengths, starting with
/// a (possibly empty) run of zeros.
std::vector<std::uint32_t> encode_runs(std::span<const std::uint8_t> bits);
std::vector<std::uint8_t> decode_runs(std::span<const std::uint32_t> runs, std::size_t length);

}  // namespace hsi

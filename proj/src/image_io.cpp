#include "hsi/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <memory>

#include "hsi/error.hpp"

namespace hsi {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

void png_warning_fn(png_structp, png_const_charp) {}

// libpng reports errors by longjmp; these helpers keep no C++ objects with
// destructors between setjmp and the libpng calls.
bool write_rows(std::FILE* f, const RgbImage& image) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, png_warning_fn);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_init_io(png, f);
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t r = 0; r < image.height; ++r) png_write_row(png, const_cast<png_bytep>(image.at(r, 0)));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

bool read_header(png_structp png, png_infop info, std::FILE* f, png_uint_32* w, png_uint_32* h, std::size_t* rowbytes) {
  if (setjmp(png_jmpbuf(png))) return false;
  png_init_io(png, f);
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_palette_to_rgb(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  *w = png_get_image_width(png, info);
  *h = png_get_image_height(png, info);
  *rowbytes = png_get_rowbytes(png, info);
  return true;
}

bool read_rows(png_structp png, std::uint8_t* data, std::size_t height, std::size_t stride) {
  if (setjmp(png_jmpbuf(png))) return false;
  for (std::size_t r = 0; r < height; ++r) png_read_row(png, data + r * stride, nullptr);
  png_read_end(png, nullptr);
  return true;
}

}  // namespace

void write_png(const RgbImage& image, const std::filesystem::path& path) {
  if (image.width == 0 || image.height == 0 || image.rgb.size() != image.width * image.height * 3) {
    throw ShapeError("image buffer does not match its dimensions");
  }
  File f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("cannot open for writing: " + path.string());
  if (!write_rows(f.get(), image)) throw IoError("png encoding failed: " + path.string());
}

RgbImage read_png(const std::filesystem::path& path) {
  File f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IoError("cannot open for reading: " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("png: out of memory");
  }
  png_uint_32 w = 0, h = 0;
  std::size_t rowbytes = 0;
  if (!read_header(png, info, f.get(), &w, &h, &rowbytes) || rowbytes != static_cast<std::size_t>(w) * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("not a readable 8-bit PNG: " + path.string());
  }
  RgbImage img(w, h);
  const bool ok = read_rows(png, img.rgb.data(), h, rowbytes);
  png_destroy_read_struct(&png, &info, nullptr);
  if (!ok) throw FormatError("corrupt PNG data: " + path.string());
  return img;
}

RgbImage render_bar_chart(std::span<const double> values, std::span<const double> errors, std::size_t bar_width,
                          std::size_t height) {
  if (values.empty()) throw DomainError("nothing to plot");
  if (!errors.empty() && errors.size() != values.size()) throw ShapeError("error bars differ in count from values");
  const std::size_t margin = 10;
  bar_width = std::max<std::size_t>(bar_width, 2);
  RgbImage img(values.size() * bar_width + 2 * margin, height, 255);
  double top = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    top = std::max(top, values[i] + (errors.empty() ? 0.0 : errors[i]));
  }
  if (!(top > 0.0)) top = 1.0;
  const std::size_t plot_h = height - 2 * margin;
  const auto to_row = [&](double v) {
    const double frac = std::clamp(v / top, 0.0, 1.0);
    return margin + plot_h - static_cast<std::size_t>(std::lround(frac * static_cast<double>(plot_h)));
  };
  const auto paint = [&](std::size_t r, std::size_t c, std::uint8_t R, std::uint8_t G, std::uint8_t B) {
    auto* p = img.at(r, c);
    p[0] = R;
    p[1] = G;
    p[2] = B;
  };
  for (std::size_t c = margin; c < img.width - margin; ++c) paint(margin + plot_h, c, 0, 0, 0);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::size_t c0 = margin + i * bar_width;
    for (std::size_t r = to_row(values[i]); r < margin + plot_h; ++r) {
      for (std::size_t c = c0; c + 1 < c0 + bar_width; ++c) paint(r, c, 70, 110, 170);
    }
    if (!errors.empty() && errors[i] > 0.0) {
      const std::size_t hi = to_row(values[i] + errors[i]), lo = to_row(std::max(0.0, values[i] - errors[i]));
      const std::size_t mid = c0 + (bar_width - 1) / 2;
      for (std::size_t r = hi; r <= lo && r < height; ++r) paint(r, mid, 220, 30, 30);
    }
  }
  return img;
}

}  // namespace hsi

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "fcbgan/data_io/data_io.hpp"

namespace fcbgan {

double byte_to_unit(std::uint8_t b) { return static_cast<double>(b) / 127.5 - 1.0; }

std::uint8_t unit_to_byte(double v) {
  const double b = std::round((v + 1.0) * 127.5);
  return static_cast<std::uint8_t>(std::clamp(b, 0.0, 255.0));
}

void write_png(const RgbImage& image, const std::string& path) {
  if (image.width < 1 || image.height < 1 ||
      static_cast<std::int64_t>(image.pixels.size()) != image.width * image.height * 3) {
    throw std::invalid_argument("write_png: pixel buffer does not match " + std::to_string(image.width) + "x" +
                                std::to_string(image.height));
  }
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, image.pixels.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw IoError("cannot write PNG '" + path + "': " + msg);
  }
}

RgbImage read_png(const std::string& path) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw IoError("cannot read PNG '" + path + "': " + png.message);
  }
  png.format = PNG_FORMAT_RGB;
  RgbImage out;
  out.width = png.width;
  out.height = png.height;
  out.pixels.resize(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, out.pixels.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw IoError("cannot decode PNG '" + path + "': " + msg);
  }
  return out;
}

RgbImage make_grid(const Tensor& images) {
  constexpr std::int64_t kColumns = 8, kMaxImages = 64;
  const auto& s = images.shape();
  if (s.size() != 4 || s[1] != 3) throw ShapeError("write_grid: expected [B, 3, H, W], got " + shape_str(s));
  if (s[0] > kMaxImages) {
    throw std::invalid_argument("write_grid: at most 64 images per grid, got " + std::to_string(s[0]));
  }
  const std::int64_t n = s[0], h = s[2], w = s[3];
  const std::int64_t rows = (n + kColumns - 1) / kColumns;
  RgbImage grid;
  grid.width = kColumns * w;
  grid.height = rows * h;
  grid.pixels.assign(static_cast<std::size_t>(grid.width * grid.height * 3), 0);
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t x0 = (i % kColumns) * w, y0 = (i / kColumns) * h;
    for (std::int64_t c = 0; c < 3; ++c)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
          const double v = images.at(((i * 3 + c) * h + y) * w + x);
          grid.pixels[static_cast<std::size_t>(((y0 + y) * grid.width + x0 + x) * 3 + c)] = unit_to_byte(v);
        }
  }
  return grid;
}

void write_grid(const Tensor& images, const std::string& path) { write_png(make_grid(images), path); }

}  // namespace fcbgan

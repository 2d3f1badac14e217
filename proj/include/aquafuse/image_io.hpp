#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace aquafuse {

/// Planar three-channel raster. Intensities live on the [0, 255] scale as
/// doubles; planes are stored channel-major, each row-major.
struct RgbImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::array<std::vector<double>, 3> planes;

  RgbImage() = default;
  RgbImage(std::size_t h, std::size_t w, double fill = 0.0);

  bool empty() const { return height == 0 || width == 0; }
  std::size_t pixel_count() const { return height * width; }

  double& at(std::size_t c, std::size_t y, std::size_t x) { return planes[c][y * width + x]; }
  double at(std::size_t c, std::size_t y, std::size_t x) const { return planes[c][y * width + x]; }

  bool operator==(const RgbImage&) const = default;
};

/// Reads an 8-bit PNG (gray, gray+alpha, RGB, RGBA) or binary PNM (P6, P5).
/// Gray is replicated to three planes and alpha is dropped.
RgbImage load_image(const std::filesystem::path& path);

/// Writes PNG or binary PPM, chosen by the file extension (.png, .ppm).
void save_image(const RgbImage& img, const std::filesystem::path& path);

/// Clamp to [0, 255] and round half away from zero. NaN maps to 0.
std::uint8_t to_byte(double v);

/// Interleaved RGB bytes, row-major.
std::vector<std::uint8_t> to_interleaved_bytes(const RgbImage& img);

}  // namespace aquafuse

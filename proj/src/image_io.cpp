#include "aquafuse/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include "aquafuse/errors.hpp"

namespace aquafuse {

RgbImage::RgbImage(std::size_t h, std::size_t w, double fill) : height(h), width(w) {
  for (auto& p : planes) p.assign(h * w, fill);
}

std::uint8_t to_byte(double v) {
  if (!(v > 0.0)) return 0;  // also catches NaN
  if (v >= 255.0) return 255;
  return static_cast<std::uint8_t>(std::round(v));
}

std::vector<std::uint8_t> to_interleaved_bytes(const RgbImage& img) {
  std::vector<std::uint8_t> out(img.pixel_count() * 3);
  for (std::size_t i = 0; i < img.pixel_count(); ++i)
    for (std::size_t c = 0; c < 3; ++c) out[i * 3 + c] = to_byte(img.planes[c][i]);
  return out;
}

namespace {

RgbImage from_interleaved(const std::uint8_t* data, std::size_t h, std::size_t w, std::size_t channels) {
  RgbImage img(h, w);
  for (std::size_t i = 0; i < h * w; ++i) {
    const std::uint8_t* px = data + i * channels;
    for (std::size_t c = 0; c < 3; ++c) img.planes[c][i] = px[channels >= 3 ? c : 0];
  }
  return img;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return bytes;
}

RgbImage decode_png(const std::vector<std::uint8_t>& bytes, const std::string& name) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
    throw FormatError(name + ": " + image.message);
  // RGBA output keeps the stored bytes verbatim (no background compositing);
  // alpha is discarded afterwards.
  image.format = PNG_FORMAT_RGBA;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw FormatError(name + ": " + msg);
  }
  return from_interleaved(buffer.data(), image.height, image.width, 4);
}

// Binary PNM header: magic, width, height, maxval separated by whitespace,
// '#' comments allowed between tokens, one whitespace byte before raster.
RgbImage decode_pnm(const std::vector<std::uint8_t>& bytes, const std::string& name) {
  std::size_t pos = 2;
  auto next_int = [&]() -> long {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    long v = 0;
    std::size_t digits = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (++digits > 9) throw FormatError(name + ": PNM header value too large");
    }
    if (digits == 0) throw FormatError(name + ": malformed PNM header");
    return v;
  };
  const bool color = bytes[1] == '6';
  const long w = next_int();
  const long h = next_int();
  const long maxval = next_int();
  if (w <= 0 || h <= 0) throw FormatError(name + ": empty PNM raster");
  if (maxval <= 0 || maxval > 255) throw FormatError(name + ": only 8-bit PNM is supported");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError(name + ": malformed PNM header");
  ++pos;
  const std::size_t channels = color ? 3 : 1;
  const std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * channels;
  if (bytes.size() - pos < need) throw FormatError(name + ": truncated PNM raster");
  return from_interleaved(bytes.data() + pos, static_cast<std::size_t>(h), static_cast<std::size_t>(w), channels);
}

std::string lower_extension(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

}  // namespace

RgbImage load_image(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  const std::string name = path.string();
  static constexpr std::uint8_t kPngMagic[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (bytes.size() >= 8 && std::equal(std::begin(kPngMagic), std::end(kPngMagic), bytes.begin()))
    return decode_png(bytes, name);
  if (bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '6' || bytes[1] == '5')) return decode_pnm(bytes, name);
  throw FormatError(name + ": unsupported image format (expected 8-bit PNG or binary PPM)");
}

void save_image(const RgbImage& img, const std::filesystem::path& path) {
  if (img.empty()) throw DomainError("cannot save an empty image");
  const auto bytes = to_interleaved_bytes(img);
  const std::string ext = lower_extension(path);
  if (ext == ".ppm") {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + path.string());
    return;
  }
  if (ext != ".png") throw FormatError(path.string() + ": output extension must be .png or .ppm");
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw IoError(path.string() + ": " + msg);
  }
}

}  // namespace aquafuse

#pragma once

// 8-bit PNG export/import for visual inspection (libpng simplified API).

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "fame/errors.hpp"
#include "fame/image.hpp"

namespace fame {

/// Writes one band as grayscale, or three bands (the given triplet) as RGB. Values are clamped to
/// [0, 1] and quantized to 8 bits.
template <class T>
void write_png(const std::filesystem::path& path, const ImageT<T>& img, std::array<std::size_t, 3> rgb = {0, 1, 2}) {
  const bool gray = img.bands == 1;
  if (!gray) {
    for (auto b : rgb)
      if (b >= img.bands) {
        throw ContractError("band " + std::to_string(b) + " not present in a " + std::to_string(img.bands) + "-band image");
      }
  }
  const std::size_t channels = gray ? 1 : 3;
  std::vector<std::uint8_t> pixels(img.h * img.w * channels);
  auto q = [](double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); };
  for (std::size_t i = 0; i < img.h * img.w; ++i)
    for (std::size_t c = 0; c < channels; ++c)
      pixels[i * channels + c] = q(static_cast<double>(img.data[(gray ? 0 : rgb[c]) * img.h * img.w + i]));

  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.w);
  image.height = static_cast<png_uint_32>(img.h);
  image.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, pixels.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw IoError("cannot write PNG " + path.string() + ": " + msg);
  }
}

/// Reads a PNG as 1 band (grayscale sources) or 3 bands, scaled to [0, 1].
inline Image read_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str())) {
    throw IoError("cannot read PNG " + path.string() + ": " + image.message);
  }
  const bool gray = (image.format & PNG_FORMAT_FLAG_COLOR) == 0;
  image.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<std::uint8_t> pixels(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, pixels.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw IoError("cannot decode PNG " + path.string() + ": " + msg);
  }
  const std::size_t channels = gray ? 1 : 3, n = std::size_t{image.width} * image.height;
  Image out(channels, image.height, image.width);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < channels; ++c) out.data[c * n + i] = static_cast<float>(pixels[i * channels + c]) / 255.0f;
  return out;
}

/// Per-image min-max rescale to [0, 1]; a constant image maps to 0.
template <class T>
ImageT<T> minmax_normalize(const ImageT<T>& img) {
  ImageT<T> out = img;
  if (img.data.empty()) return out;
  const auto [lo, hi] = std::minmax_element(img.data.begin(), img.data.end());
  const double range = static_cast<double>(*hi) - static_cast<double>(*lo);
  for (auto& v : out.data) v = range > 0 ? static_cast<T>((static_cast<double>(v) - *lo) / range) : T(0);
  return out;
}

}  // namespace fame

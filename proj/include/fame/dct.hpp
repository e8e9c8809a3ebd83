#pragma once

// 2-D DCT-II in its unnormalized form, its inverse, and frequency-mask labels derived from it.
//
//   D(u, v) = sum_h sum_w x[h, w] cos(pi u (h + 1/2) / H) cos(pi v (w + 1/2) / W)
//
// The inverse applies the weights 1/H (u = 0) and 2/H (u > 0) per axis.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <vector>

#include "fame/errors.hpp"
#include "fame/image.hpp"

namespace fame {

struct Spectrum {
  std::size_t channels = 0;
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<double> coeffs;  // channel-major, (c * h + u) * w + v

  double& at(std::size_t c, std::size_t u, std::size_t v) { return coeffs[(c * h + u) * w + v]; }
  double at(std::size_t c, std::size_t u, std::size_t v) const { return coeffs[(c * h + u) * w + v]; }
};

namespace detail {

// table[k * n + i] = cos(pi k (i + 1/2) / n)
inline std::vector<double> cosine_table(std::size_t n) {
  std::vector<double> t(n * n);
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < n; ++i)
      t[k * n + i] = std::cos(std::numbers::pi * static_cast<double>(k) * (static_cast<double>(i) + 0.5) /
                              static_cast<double>(n));
  return t;
}

}  // namespace detail

/// Separable forward transform: rows first, then columns.
template <class T>
Spectrum dct2(const ImageT<T>& image) {
  if (image.h == 0 || image.w == 0) throw ShapeError("dct2: image must be at least 1x1");
  const std::size_t H = image.h, W = image.w;
  const auto ch = detail::cosine_table(H);
  const auto cw = detail::cosine_table(W);
  Spectrum s{image.bands, H, W, std::vector<double>(image.bands * H * W)};
  std::vector<double> rows(H * W);
  for (std::size_t c = 0; c < image.bands; ++c) {
    const auto x = image.plane(c);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t v = 0; v < W; ++v) {
        double acc = 0.0;
        for (std::size_t i = 0; i < W; ++i) acc += static_cast<double>(x[y * W + i]) * cw[v * W + i];
        rows[y * W + v] = acc;
      }
    for (std::size_t u = 0; u < H; ++u)
      for (std::size_t v = 0; v < W; ++v) {
        double acc = 0.0;
        for (std::size_t y = 0; y < H; ++y) acc += rows[y * W + v] * ch[u * H + y];
        s.at(c, u, v) = acc;
      }
  }
  return s;
}

/// Exact inverse of dct2.
inline ImageT<double> idct2(const Spectrum& s) {
  if (s.h == 0 || s.w == 0) throw ShapeError("idct2: spectrum must be at least 1x1");
  const std::size_t H = s.h, W = s.w;
  const auto ch = detail::cosine_table(H);
  const auto cw = detail::cosine_table(W);
  auto weight = [](std::size_t k, std::size_t n) { return (k == 0 ? 1.0 : 2.0) / static_cast<double>(n); };
  ImageT<double> out(s.channels, H, W);
  std::vector<double> cols(H * W);
  for (std::size_t c = 0; c < s.channels; ++c) {
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t v = 0; v < W; ++v) {
        double acc = 0.0;
        for (std::size_t u = 0; u < H; ++u) acc += weight(u, H) * s.at(c, u, v) * ch[u * H + y];
        cols[y * W + v] = acc;
      }
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        double acc = 0.0;
        for (std::size_t v = 0; v < W; ++v) acc += weight(v, W) * cols[y * W + v] * cw[v * W + x];
        out.at(c, y, x) = acc;
      }
  }
  return out;
}

/// True for coefficients inside the low-frequency triangle u + v < radius_fraction * (H + W).
inline bool in_low_band(std::size_t u, std::size_t v, std::size_t H, std::size_t W, double radius_fraction) {
  return static_cast<double>(u + v) < radius_fraction * static_cast<double>(H + W);
}

struct FrequencySplit {
  Spectrum spectrum;
  ImageT<double> high;  // reconstruction with the low-frequency triangle zeroed
  ImageT<double> low;   // reconstruction of the low-frequency triangle alone
};

template <class T>
FrequencySplit split_frequencies(const ImageT<T>& image, double radius_fraction) {
  FrequencySplit out;
  out.spectrum = dct2(image);
  Spectrum hi = out.spectrum, lo = out.spectrum;
  for (std::size_t c = 0; c < hi.channels; ++c)
    for (std::size_t u = 0; u < hi.h; ++u)
      for (std::size_t v = 0; v < hi.w; ++v) {
        if (in_low_band(u, v, hi.h, hi.w, radius_fraction))
          hi.at(c, u, v) = 0.0;
        else
          lo.at(c, u, v) = 0.0;
      }
  out.high = idct2(hi);
  out.low = idct2(lo);
  return out;
}

/// Binary high/low frequency label at image resolution; high[i] + low[i] == 1 everywhere.
struct MaskLabel {
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<std::uint8_t> high;
  std::vector<std::uint8_t> low;
  double low_freq_radius_fraction = 0.1;
  double magnitude_quantile = 0.5;

  double coverage() const {
    if (high.empty()) return 0.0;
    std::size_t n = 0;
    for (auto v : high) n += v;
    return static_cast<double>(n) / static_cast<double>(high.size());
  }
};

struct MaskLabelParams {
  double low_freq_radius_fraction = 0.1;
  double magnitude_quantile = 0.5;
  // Responses at or below this absolute level never count as high frequency, so images with
  // essentially no detail get an (almost) empty label instead of a quantile-sized one.
  double response_floor = 0.02;
};

/// Mean absolute high-frequency response across channels.
inline std::vector<double> high_frequency_response(const ImageT<double>& high) {
  std::vector<double> r(high.plane_size(), 0.0);
  for (std::size_t c = 0; c < high.bands; ++c) {
    const auto p = high.plane(c);
    for (std::size_t i = 0; i < r.size(); ++i) r[i] += std::abs(p[i]);
  }
  for (auto& v : r) v /= static_cast<double>(high.bands);
  return r;
}

/// Labels a pixel high when its response exceeds both the magnitude quantile of all responses
/// (the value at sorted index ceil(q n) - 1) and the absolute floor.
inline MaskLabel threshold_response(const std::vector<double>& response, std::size_t h, std::size_t w,
                                    const MaskLabelParams& p) {
  MaskLabel label;
  label.h = h;
  label.w = w;
  label.low_freq_radius_fraction = p.low_freq_radius_fraction;
  label.magnitude_quantile = p.magnitude_quantile;
  label.high.assign(h * w, 0);
  label.low.assign(h * w, 1);
  if (h * w <= 1) return label;
  std::vector<double> sorted = response;
  std::sort(sorted.begin(), sorted.end());
  const auto rank = static_cast<std::size_t>(std::ceil(p.magnitude_quantile * static_cast<double>(sorted.size())));
  const double threshold = std::max(sorted[std::clamp<std::size_t>(rank, 1, sorted.size()) - 1], p.response_floor);
  for (std::size_t i = 0; i < response.size(); ++i) {
    const bool hi = response[i] > threshold;
    label.high[i] = hi ? 1 : 0;
    label.low[i] = hi ? 0 : 1;
  }
  return label;
}

template <class T>
MaskLabel make_mask_label(const ImageT<T>& image, const MaskLabelParams& p = {}) {
  if (!(p.low_freq_radius_fraction > 0.0 && p.low_freq_radius_fraction < 1.0) ||
      !(p.magnitude_quantile > 0.0 && p.magnitude_quantile < 1.0)) {
    throw ContractError("make_mask_label: radius fraction and quantile must lie in (0, 1)");
  }
  if (image.h * image.w <= 1) return threshold_response({0.0}, image.h, image.w, p);
  const auto split = split_frequencies(image, p.low_freq_radius_fraction);
  return threshold_response(high_frequency_response(split.high), image.h, image.w, p);
}

}  // namespace fame

#pragma once

// Synthetic scenes, Wald-protocol degradation, patch extraction and reference upsamplers.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "fame/dct.hpp"
#include "fame/errors.hpp"
#include "fame/image.hpp"
#include "fame/ops.hpp"

namespace fame {

enum class Recipe { gradients, textures, edges, mixed };

inline std::string_view to_string(Recipe r) {
  switch (r) {
    case Recipe::gradients: return "gradients";
    case Recipe::textures: return "textures";
    case Recipe::edges: return "edges";
    case Recipe::mixed: return "mixed";
  }
  return "mixed";
}

inline Recipe parse_recipe(std::string_view s) {
  if (s == "gradients") return Recipe::gradients;
  if (s == "textures") return Recipe::textures;
  if (s == "edges") return Recipe::edges;
  if (s == "mixed") return Recipe::mixed;
  throw ConfigError("unknown recipe '" + std::string(s) + "' (accepted: gradients, textures, edges, mixed)");
}

struct Scene {
  Image hrms;
  Image pan;
  std::uint64_t seed = 0;
  Recipe recipe = Recipe::mixed;
};

struct SamplePair {
  Image lrms;  // bands x H/f x W/f
  Image pan;   // 1 x H x W
  Image gt;    // bands x H x W
  MaskLabel mask;
  std::size_t factor = 4;
};

namespace detail {

using Rng = std::mt19937_64;

inline double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

inline std::vector<double> gaussian_kernel(double sigma, std::size_t radius) {
  std::vector<double> k(2 * radius + 1);
  double s = 0.0;
  for (std::size_t i = 0; i < k.size(); ++i) {
    const double d = static_cast<double>(i) - static_cast<double>(radius);
    k[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    s += k[i];
  }
  for (auto& v : k) v /= s;
  return k;
}

/// Reflect-101 index: -1 -> 1, n -> n - 2.
inline std::size_t reflect101(long i, std::size_t n) {
  if (n == 1) return 0;
  const long period = 2 * (static_cast<long>(n) - 1);
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < static_cast<long>(n) ? i : period - i);
}

/// Separable Gaussian blur of one plane with reflect-101 borders.
inline std::vector<double> blur_plane(const std::vector<double>& in, std::size_t h, std::size_t w, double sigma) {
  const auto radius = static_cast<std::size_t>(std::ceil(3.0 * sigma));
  const auto k = gaussian_kernel(sigma, radius);
  std::vector<double> tmp(h * w), out(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (std::size_t t = 0; t < k.size(); ++t)
        acc += k[t] * in[y * w + reflect101(static_cast<long>(x + t) - static_cast<long>(radius), w)];
      tmp[y * w + x] = acc;
    }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (std::size_t t = 0; t < k.size(); ++t)
        acc += k[t] * tmp[reflect101(static_cast<long>(y + t) - static_cast<long>(radius), h) * w + x];
      out[y * w + x] = acc;
    }
  return out;
}

/// White noise low-passed at `sigma` pixels, rescaled to zero mean and unit standard deviation.
inline std::vector<double> texture_field(Rng& rng, std::size_t n, double sigma) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> noise(n * n);
  for (auto& v : noise) v = normal(rng);
  auto f = blur_plane(noise, n, n, sigma);
  double m = 0.0, var = 0.0;
  for (double v : f) m += v;
  m /= static_cast<double>(f.size());
  for (double v : f) var += (v - m) * (v - m);
  const double sd = std::sqrt(var / static_cast<double>(f.size()));
  for (auto& v : f) v = (v - m) / sd;
  return f;
}

/// Band-correlated reflectance: a shared brightness plus small per-band deviations.
inline std::vector<double> spectral_signature(Rng& rng, std::size_t bands) {
  const double brightness = uniform(rng, 0.1, 0.85);
  std::vector<double> s(bands);
  for (auto& v : s) v = std::clamp(brightness + uniform(rng, -0.15, 0.15), 0.02, 0.98);
  return s;
}

/// Smooth background: per-band offset, linear ramp and a few broad Gaussian blobs.
inline void paint_gradients(Rng& rng, ImageT<double>& img) {
  const std::size_t n = img.h;
  const auto base = spectral_signature(rng, img.bands);
  const double gx = uniform(rng, -0.3, 0.3), gy = uniform(rng, -0.3, 0.3);
  for (std::size_t b = 0; b < img.bands; ++b) {
    const double tilt = uniform(rng, 0.7, 1.3);
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        const double u = static_cast<double>(x) / static_cast<double>(n) - 0.5;
        const double v = static_cast<double>(y) / static_cast<double>(n) - 0.5;
        img.at(b, y, x) = base[b] + tilt * (gx * u + gy * v);
      }
  }
  const int blobs = std::uniform_int_distribution<int>(1, 3)(rng);
  for (int i = 0; i < blobs; ++i) {
    const double cx = uniform(rng, 0.0, 1.0) * static_cast<double>(n);
    const double cy = uniform(rng, 0.0, 1.0) * static_cast<double>(n);
    const double r = uniform(rng, 0.2, 0.5) * static_cast<double>(n);
    const auto gain = spectral_signature(rng, img.bands);
    const double amp = uniform(rng, -0.25, 0.25);
    for (std::size_t b = 0; b < img.bands; ++b)
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
          const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
          img.at(b, y, x) += amp * gain[b] * std::exp(-(dx * dx + dy * dy) / (2.0 * r * r));
        }
  }
}

/// Filtered-noise texture confined to a smooth random region covering roughly `extent` of the image.
inline void paint_textures(Rng& rng, ImageT<double>& img, double extent, double max_amplitude) {
  const std::size_t n = img.h;
  const int layers = std::uniform_int_distribution<int>(1, 2)(rng);
  for (int l = 0; l < layers; ++l) {
    const double sigma = uniform(rng, 0.7, 2.5);
    const double amp = uniform(rng, 0.4, 1.0) * max_amplitude;
    const auto field = texture_field(rng, n, sigma);
    // Region: threshold a very smooth field at the quantile giving the requested extent, with a
    // soft transition of a few pixels.
    auto region = texture_field(rng, n, static_cast<double>(n) / 8.0);
    std::vector<double> sorted = region;
    std::sort(sorted.begin(), sorted.end());
    const double cut = sorted[static_cast<std::size_t>(std::clamp(1.0 - extent, 0.0, 0.999) * (sorted.size() - 1))];
    for (auto& v : region) v = 1.0 / (1.0 + std::exp(-(v - cut) * 12.0));
    std::vector<double> gain(img.bands);
    for (auto& g : gain) g = uniform(rng, 0.6, 1.0);
    for (std::size_t b = 0; b < img.bands; ++b)
      for (std::size_t i = 0; i < n * n; ++i) img.data[b * n * n + i] += amp * gain[b] * field[i] * region[i];
  }
}

/// Opaque geometric objects (rotated rectangles, disks, triangles) with their own signatures.
inline void paint_edges(Rng& rng, ImageT<double>& img, int count) {
  const std::size_t n = img.h;
  const double N = static_cast<double>(n);
  for (int i = 0; i < count; ++i) {
    const int kind = std::uniform_int_distribution<int>(0, 2)(rng);
    const double cx = uniform(rng, 0.05, 0.95) * N, cy = uniform(rng, 0.05, 0.95) * N;
    const double size = uniform(rng, 0.06, 0.3) * N;
    const double aspect = uniform(rng, 0.4, 1.0), angle = uniform(rng, 0.0, std::numbers::pi);
    const auto sig = spectral_signature(rng, img.bands);
    std::array<double, 6> tri{};
    for (auto& t : tri) t = uniform(rng, -1.0, 1.0) * size;
    const double ca = std::cos(angle), sa = std::sin(angle);
    auto inside = [&](double x, double y) {
      const double dx = x - cx, dy = y - cy;
      switch (kind) {
        case 0: {
          const double u = ca * dx + sa * dy, v = -sa * dx + ca * dy;
          return std::abs(u) <= size && std::abs(v) <= size * aspect;
        }
        case 1: return dx * dx + dy * dy <= size * size;
        default: {
          auto edge = [&](double ax, double ay, double bx, double by) {
            return (bx - ax) * (dy - ay) - (by - ay) * (dx - ax);
          };
          const double e0 = edge(tri[0], tri[1], tri[2], tri[3]);
          const double e1 = edge(tri[2], tri[3], tri[4], tri[5]);
          const double e2 = edge(tri[4], tri[5], tri[0], tri[1]);
          return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
        }
      }
    };
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x)
        if (inside(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5))
          for (std::size_t b = 0; b < img.bands; ++b) img.at(b, y, x) = sig[b];
  }
}

/// Relative band contributions to the panchromatic channel.
inline std::vector<double> pan_weights(std::size_t bands) {
  std::vector<double> w(bands);
  double s = 0.0;
  for (std::size_t b = 0; b < bands; ++b) {
    w[b] = 1.0 + 0.5 * std::sin(1.3 * static_cast<double>(b) + 0.4);
    s += w[b];
  }
  for (auto& v : w) v /= s;
  return w;
}

}  // namespace detail

/// Amplitude of the pan-only fine detail that is absent from every MS band.
inline constexpr double kPanDetailAmplitude = 0.01;

/// Deterministic procedural scene. size >= 128 and a multiple of 4.
inline Scene generate_synthetic_scene(std::uint64_t seed, std::size_t size, Recipe recipe, std::size_t bands = 4) {
  if (size < 128 || size % 4 != 0) {
    throw ContractError("scene size must be >= 128 and a multiple of 4, got " + std::to_string(size));
  }
  if (bands == 0) throw ContractError("scene needs at least one band");
  detail::Rng rng(seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(recipe) + 1);
  ImageT<double> img(bands, size, size);
  detail::paint_gradients(rng, img);
  switch (recipe) {
    case Recipe::gradients: break;
    case Recipe::textures: detail::paint_textures(rng, img, detail::uniform(rng, 0.4, 1.0), 0.1); break;
    case Recipe::edges: detail::paint_edges(rng, img, std::uniform_int_distribution<int>(4, 14)(rng)); break;
    case Recipe::mixed: {
      // Detail density varies strongly between seeds so mask supervision ranges from sparse to dense.
      const double density = detail::uniform(rng, 0.0, 1.0);
      detail::paint_edges(rng, img, static_cast<int>(std::lround(density * 16.0)));
      if (detail::uniform(rng, 0.0, 1.0) < 0.85) detail::paint_textures(rng, img, density, 0.12);
      break;
    }
  }
  Scene scene;
  scene.seed = seed;
  scene.recipe = recipe;
  scene.hrms = Image(bands, size, size);
  for (std::size_t i = 0; i < img.data.size(); ++i)
    scene.hrms.data[i] = static_cast<float>(std::clamp(img.data[i], 0.0, 1.0));

  const auto w = detail::pan_weights(bands);
  const auto fine = detail::texture_field(rng, size, 0.6);
  scene.pan = Image(1, size, size);
  for (std::size_t i = 0; i < size * size; ++i) {
    double p = 0.0;
    for (std::size_t b = 0; b < bands; ++b) p += w[b] * static_cast<double>(scene.hrms.data[b * size * size + i]);
    scene.pan.data[i] = static_cast<float>(std::clamp(p + kPanDetailAmplitude * fine[i], 0.0, 1.0));
  }
  return scene;
}

/// Gaussian blur (sigma = factor / 2, width 2 factor + 1, reflect-101 borders) followed by
/// decimation at positions y * factor + factor / 2.
template <class T>
ImageT<T> degrade(const ImageT<T>& img, std::size_t factor) {
  if (factor == 0 || img.h % factor != 0 || img.w % factor != 0) {
    throw ContractError("degradation factor " + std::to_string(factor) + " does not divide image size " +
                        std::to_string(img.h) + "x" + std::to_string(img.w));
  }
  const auto k = detail::gaussian_kernel(static_cast<double>(factor) / 2.0, factor);
  const long radius = static_cast<long>(factor);
  const std::size_t ho = img.h / factor, wo = img.w / factor, phase = sample_phase(factor);
  ImageT<T> out(img.bands, ho, wo);
  std::vector<double> rows(img.h * wo);
  for (std::size_t b = 0; b < img.bands; ++b) {
    const auto p = img.plane(b);
    for (std::size_t y = 0; y < img.h; ++y)
      for (std::size_t x = 0; x < wo; ++x) {
        const long cx = static_cast<long>(x * factor + phase);
        double acc = 0.0;
        for (long t = -radius; t <= radius; ++t)
          acc += k[static_cast<std::size_t>(t + radius)] * static_cast<double>(p[y * img.w + detail::reflect101(cx + t, img.w)]);
        rows[y * wo + x] = acc;
      }
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t x = 0; x < wo; ++x) {
        const long cy = static_cast<long>(y * factor + phase);
        double acc = 0.0;
        for (long t = -radius; t <= radius; ++t)
          acc += k[static_cast<std::size_t>(t + radius)] * rows[detail::reflect101(cy + t, img.h) * wo + x];
        out.at(b, y, x) = static_cast<T>(acc);
      }
  }
  return out;
}

inline SamplePair wald_degrade(const Scene& scene, std::size_t factor, const MaskLabelParams& mask_params = {}) {
  if (scene.pan.h != scene.hrms.h || scene.pan.w != scene.hrms.w) {
    throw ShapeError("pan and hrms spatial sizes differ");
  }
  SamplePair pair;
  pair.factor = factor;
  pair.lrms = degrade(scene.hrms, factor);
  pair.gt = scene.hrms;
  pair.pan = scene.pan;
  pair.mask = make_mask_label(pair.gt, mask_params);
  return pair;
}

/// Crops `src` to the window (y0, x0, size, size).
template <class T>
ImageT<T> crop(const ImageT<T>& src, std::size_t y0, std::size_t x0, std::size_t size) {
  ImageT<T> out(src.bands, size, size);
  for (std::size_t b = 0; b < src.bands; ++b)
    for (std::size_t y = 0; y < size; ++y)
      std::copy_n(&src.at(b, y0 + y, x0), size, &out.at(b, y, 0));
  return out;
}

inline MaskLabel crop(const MaskLabel& m, std::size_t y0, std::size_t x0, std::size_t size) {
  MaskLabel out = m;
  out.h = out.w = size;
  out.high.assign(size * size, 0);
  out.low.assign(size * size, 1);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      out.high[y * size + x] = m.high[(y0 + y) * m.w + x0 + x];
      out.low[y * size + x] = m.low[(y0 + y) * m.w + x0 + x];
    }
  return out;
}

/// Aligned crops on the low-resolution grid. gt, pan and mask windows are the lrms window scaled by
/// the factor; each patch's lrms is re-derived from its gt crop so the degradation invariant holds
/// per patch.
inline std::vector<SamplePair> extract_patches(const SamplePair& pair, std::size_t lrms_patch, std::size_t stride) {
  if (lrms_patch == 0 || stride == 0 || lrms_patch > pair.lrms.h || lrms_patch > pair.lrms.w) {
    throw ContractError("patch size " + std::to_string(lrms_patch) + " does not fit lrms " +
                        std::to_string(pair.lrms.h) + "x" + std::to_string(pair.lrms.w));
  }
  const std::size_t f = pair.factor;
  std::vector<SamplePair> out;
  for (std::size_t y = 0; y + lrms_patch <= pair.lrms.h; y += stride)
    for (std::size_t x = 0; x + lrms_patch <= pair.lrms.w; x += stride) {
      SamplePair p;
      p.factor = f;
      p.gt = crop(pair.gt, y * f, x * f, lrms_patch * f);
      p.pan = crop(pair.pan, y * f, x * f, lrms_patch * f);
      p.mask = crop(pair.mask, y * f, x * f, lrms_patch * f);
      p.lrms = degrade(p.gt, f);
      out.push_back(std::move(p));
    }
  return out;
}

/// Keys cubic convolution (a = -0.5) by an integer factor on the shared decimation grid,
/// edge-clamped. Reference upsampler for the bicubic baseline.
template <class T>
ImageT<T> bicubic_upsample(const ImageT<T>& img, std::size_t factor) {
  auto weight = [](double t) {
    constexpr double a = -0.5;
    t = std::abs(t);
    if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
    if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
    return 0.0;
  };
  struct Taps {
    std::array<std::size_t, 4> idx;
    std::array<double, 4> w;
  };
  auto taps = [&](std::size_t in, std::size_t out) {
    std::vector<Taps> t(out);
    const double phase = static_cast<double>(sample_phase(factor));
    for (std::size_t X = 0; X < out; ++X) {
      const double src = (static_cast<double>(X) - phase) / static_cast<double>(factor);
      const double fl = std::floor(src);
      for (int j = 0; j < 4; ++j) {
        const double pos = fl - 1.0 + j;
        t[X].idx[j] = static_cast<std::size_t>(std::clamp(pos, 0.0, static_cast<double>(in - 1)));
        t[X].w[j] = weight(src - pos);
      }
    }
    return t;
  };
  const std::size_t ho = img.h * factor, wo = img.w * factor;
  const auto ty = taps(img.h, ho), tx = taps(img.w, wo);
  ImageT<T> out(img.bands, ho, wo);
  for (std::size_t b = 0; b < img.bands; ++b)
    for (std::size_t Y = 0; Y < ho; ++Y)
      for (std::size_t X = 0; X < wo; ++X) {
        double acc = 0.0;
        for (int i = 0; i < 4; ++i) {
          double row = 0.0;
          for (int j = 0; j < 4; ++j) row += tx[X].w[j] * static_cast<double>(img.at(b, ty[Y].idx[i], tx[X].idx[j]));
          acc += ty[Y].w[i] * row;
        }
        out.at(b, Y, X) = static_cast<T>(acc);
      }
  return out;
}

}  // namespace fame

#pragma once

// Full-reference (PSNR, SSIM, SAM, ERGAS) and no-reference (D_lambda, D_s, QNR) quality metrics.
// Images are in [0, 1]; all arithmetic is in double.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "fame/data.hpp"
#include "fame/errors.hpp"
#include "fame/image.hpp"

namespace fame {

namespace detail {
template <class A, class B>
void require_same_geometry(const ImageT<A>& y, const ImageT<B>& g, const char* metric) {
  if (y.bands != g.bands || y.h != g.h || y.w != g.w) {
    throw ShapeError(std::string(metric) + ": image geometries differ");
  }
}
}  // namespace detail

inline constexpr double kPsnrCap = 100.0;

template <class T>
double psnr(const ImageT<T>& y, const ImageT<T>& g) {
  detail::require_same_geometry(y, g, "psnr");
  double se = 0.0;
  for (std::size_t i = 0; i < y.data.size(); ++i) {
    const double d = static_cast<double>(y.data[i]) - static_cast<double>(g.data[i]);
    se += d * d;
  }
  const double mse = se / static_cast<double>(y.data.size());
  return mse < 1e-10 ? kPsnrCap : std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

struct SsimParams {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

/// Mean SSIM over every window position fully inside the image, averaged over bands.
template <class T>
double ssim(const ImageT<T>& y, const ImageT<T>& g, const SsimParams& p = {}) {
  detail::require_same_geometry(y, g, "ssim");
  if (p.window % 2 == 0 || p.window > y.h || p.window > y.w) {
    throw ContractError("ssim: window must be odd and fit inside the image");
  }
  const auto k = detail::gaussian_kernel(p.sigma, p.window / 2);
  const double c1 = p.k1 * p.k1, c2 = p.k2 * p.k2;
  const std::size_t ho = y.h - p.window + 1, wo = y.w - p.window + 1, W = p.window;
  // Valid-region separable filtering of one product plane.
  auto filter = [&](auto value) {
    std::vector<double> rows(y.h * wo), out(ho * wo);
    for (std::size_t r = 0; r < y.h; ++r)
      for (std::size_t x = 0; x < wo; ++x) {
        double acc = 0.0;
        for (std::size_t t = 0; t < W; ++t) acc += k[t] * value(r * y.w + x + t);
        rows[r * wo + x] = acc;
      }
    for (std::size_t r = 0; r < ho; ++r)
      for (std::size_t x = 0; x < wo; ++x) {
        double acc = 0.0;
        for (std::size_t t = 0; t < W; ++t) acc += k[t] * rows[(r + t) * wo + x];
        out[r * wo + x] = acc;
      }
    return out;
  };
  double total = 0.0;
  for (std::size_t b = 0; b < y.bands; ++b) {
    const auto yp = y.plane(b), gp = g.plane(b);
    auto Y = [&](std::size_t i) { return static_cast<double>(yp[i]); };
    auto G = [&](std::size_t i) { return static_cast<double>(gp[i]); };
    const auto my = filter(Y), mg = filter(G);
    const auto myy = filter([&](std::size_t i) { return Y(i) * Y(i); });
    const auto mgg = filter([&](std::size_t i) { return G(i) * G(i); });
    const auto myg = filter([&](std::size_t i) { return Y(i) * G(i); });
    double band = 0.0;
    for (std::size_t i = 0; i < ho * wo; ++i) {
      const double vy = myy[i] - my[i] * my[i], vg = mgg[i] - mg[i] * mg[i], cov = myg[i] - my[i] * mg[i];
      band += ((2 * my[i] * mg[i] + c1) * (2 * cov + c2)) / ((my[i] * my[i] + mg[i] * mg[i] + c1) * (vy + vg + c2));
    }
    total += band / static_cast<double>(ho * wo);
  }
  return total / static_cast<double>(y.bands);
}

/// Mean spectral angle in radians over pixels where neither spectrum is the zero vector.
template <class T>
double sam(const ImageT<T>& y, const ImageT<T>& g) {
  detail::require_same_geometry(y, g, "sam");
  if (y.bands < 2) throw ContractError("sam: needs at least 2 bands");
  const std::size_t n = y.plane_size();
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double dot = 0.0, ny = 0.0, ng = 0.0;
    for (std::size_t b = 0; b < y.bands; ++b) {
      const double a = y.data[b * n + i], c = g.data[b * n + i];
      dot += a * c;
      ny += a * a;
      ng += c * c;
    }
    if (ny == 0.0 || ng == 0.0) continue;
    total += std::acos(std::clamp(dot / (std::sqrt(ny) * std::sqrt(ng)), -1.0, 1.0));
    ++counted;
  }
  if (counted == 0) throw NumericError("sam: every pixel is a zero vector; angle undefined");
  return total / static_cast<double>(counted);
}

/// 100 * ratio * sqrt(mean_b(RMSE_b^2 / mean(G_b)^2)); ratio is the lrms/hrms resolution ratio.
template <class T>
double ergas(const ImageT<T>& y, const ImageT<T>& g, double ratio) {
  detail::require_same_geometry(y, g, "ergas");
  const std::size_t n = y.plane_size();
  double acc = 0.0;
  for (std::size_t b = 0; b < y.bands; ++b) {
    double se = 0.0, m = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = static_cast<double>(y.data[b * n + i]) - static_cast<double>(g.data[b * n + i]);
      se += d * d;
      m += g.data[b * n + i];
    }
    m /= static_cast<double>(n);
    if (std::abs(m) < 1e-12) throw NumericError("ergas: band " + std::to_string(b) + " of the reference has zero mean");
    acc += (se / static_cast<double>(n)) / (m * m);
  }
  return 100.0 * ratio * std::sqrt(acc / static_cast<double>(y.bands));
}

// ---------------------------------------------------------------------------------------------
// Q-index and QNR

inline constexpr double kQDegenerate = 1e-12;

/// Universal image quality index of one window from its moments. Windows where both signals are
/// constant fall back to the luminance term 2 mx my / (mx^2 + my^2), and to 1 when both are zero.
inline double q_from_moments(double mx, double my, double vx, double vy, double cxy) {
  const double lum = mx * mx + my * my;
  const double con = vx + vy;
  if (con < kQDegenerate) return lum < kQDegenerate ? 1.0 : 2.0 * mx * my / lum;
  if (lum < kQDegenerate) return 2.0 * cxy / con;
  return 4.0 * cxy * mx * my / (con * lum);
}

/// Mean Q over all window x window blocks (stride 1) of two planes, via integral images.
inline double q_index(std::span<const double> x, std::span<const double> y, std::size_t h, std::size_t w,
                      std::size_t window = 8) {
  window = std::min({window, h, w});
  const std::size_t W = w + 1;
  std::vector<double> sx((h + 1) * W), sy(sx.size()), sxx(sx.size()), syy(sx.size()), sxy(sx.size());
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const double a = x[r * w + c], b = y[r * w + c];
      const std::size_t i = (r + 1) * W + c + 1, up = r * W + c + 1, left = (r + 1) * W + c, diag = r * W + c;
      sx[i] = a + sx[up] + sx[left] - sx[diag];
      sy[i] = b + sy[up] + sy[left] - sy[diag];
      sxx[i] = a * a + sxx[up] + sxx[left] - sxx[diag];
      syy[i] = b * b + syy[up] + syy[left] - syy[diag];
      sxy[i] = a * b + sxy[up] + sxy[left] - sxy[diag];
    }
  auto box = [&](const std::vector<double>& s, std::size_t r, std::size_t c) {
    return s[(r + window) * W + c + window] - s[r * W + c + window] - s[(r + window) * W + c] + s[r * W + c];
  };
  const double n = static_cast<double>(window * window);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r + window <= h; ++r)
    for (std::size_t c = 0; c + window <= w; ++c) {
      const double mx = box(sx, r, c) / n, my = box(sy, r, c) / n;
      const double vx = std::max(0.0, box(sxx, r, c) / n - mx * mx);
      const double vy = std::max(0.0, box(syy, r, c) / n - my * my);
      const double cxy = box(sxy, r, c) / n - mx * my;
      total += q_from_moments(mx, my, vx, vy, cxy);
      ++count;
    }
  return total / static_cast<double>(count);
}

struct QnrResult {
  double d_lambda = 0.0;
  double d_s = 0.0;
  double qnr = 1.0;
};

/// Spectral distortion from inter-band Q changes between fused and lrms, spatial distortion from
/// band-vs-pan Q changes between full and degraded resolution (exponents p = q = 1). `window` is
/// the Q block size on the low-resolution grid.
template <class T>
QnrResult qnr_suite(const ImageT<T>& fused, const ImageT<T>& lrms, const ImageT<T>& pan, std::size_t window = 8) {
  if (fused.h != pan.h || fused.w != pan.w || pan.bands != 1 || lrms.bands != fused.bands || lrms.h == 0 ||
      fused.h % lrms.h != 0 || fused.w % lrms.w != 0 || fused.h / lrms.h != fused.w / lrms.w) {
    throw ShapeError("qnr_suite: inconsistent fused/lrms/pan geometry");
  }
  const std::size_t factor = fused.h / lrms.h;
  const auto pan_lr = degrade(pan, factor);
  auto plane = [](const auto& im, std::size_t b) {
    std::vector<double> v(im.plane_size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(im.data[b * v.size() + i]);
    return v;
  };
  const std::size_t B = fused.bands;
  std::vector<std::vector<double>> F, L;
  for (std::size_t b = 0; b < B; ++b) {
    F.push_back(plane(fused, b));
    L.push_back(plane(lrms, b));
  }
  const auto P = plane(pan, 0), PL = plane(pan_lr, 0);
  // Full-resolution windows span the same ground area as the low-resolution ones.
  const std::size_t hr_window = window * factor;
  QnrResult r;
  if (B > 1) {
    double acc = 0.0;
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t j = 0; j < B; ++j)
        if (i != j)
          acc += std::abs(q_index(F[i], F[j], fused.h, fused.w, hr_window) - q_index(L[i], L[j], lrms.h, lrms.w, window));
    r.d_lambda = acc / static_cast<double>(B * (B - 1));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < B; ++i)
    acc += std::abs(q_index(F[i], P, fused.h, fused.w, hr_window) - q_index(L[i], PL, lrms.h, lrms.w, window));
  r.d_s = acc / static_cast<double>(B);
  r.qnr = (1.0 - r.d_lambda) * (1.0 - r.d_s);
  return r;
}

struct MetricReport {
  std::optional<double> psnr, ssim, sam, ergas, d_lambda, d_s, qnr;
};

/// Reduced-resolution report against ground truth.
template <class T>
MetricReport reference_metrics(const ImageT<T>& fused, const ImageT<T>& gt, std::size_t factor) {
  MetricReport r;
  r.psnr = psnr(fused, gt);
  r.ssim = ssim(fused, gt, SsimParams{std::min<std::size_t>(11, (std::min(gt.h, gt.w) - 1) | 1)});
  r.sam = sam(fused, gt);
  r.ergas = ergas(fused, gt, 1.0 / static_cast<double>(factor));
  return r;
}

template <class T>
MetricReport no_reference_metrics(const ImageT<T>& fused, const ImageT<T>& lrms, const ImageT<T>& pan) {
  const auto q = qnr_suite(fused, lrms, pan);
  MetricReport r;
  r.d_lambda = q.d_lambda;
  r.d_s = q.d_s;
  r.qnr = q.qnr;
  return r;
}

/// Field-wise mean over reports (fields absent from any report stay absent).
inline MetricReport mean_report(const std::vector<MetricReport>& reports) {
  MetricReport m;
  if (reports.empty()) return m;
  auto avg = [&](std::optional<double> MetricReport::*field) -> std::optional<double> {
    double s = 0.0;
    for (const auto& r : reports) {
      if (!(r.*field)) return std::nullopt;
      s += *(r.*field);
    }
    return s / static_cast<double>(reports.size());
  };
  m.psnr = avg(&MetricReport::psnr);
  m.ssim = avg(&MetricReport::ssim);
  m.sam = avg(&MetricReport::sam);
  m.ergas = avg(&MetricReport::ergas);
  m.d_lambda = avg(&MetricReport::d_lambda);
  m.d_s = avg(&MetricReport::d_s);
  m.qnr = avg(&MetricReport::qnr);
  return m;
}

}  // namespace fame

#pragma once

// Direct 2-D cross-correlation kernels.
//
// Every output element is accumulated as  bias, then (ci, kh, kw) in ascending order, one rounded
// multiply and one rounded add per tap. The vector paths below keep that order per lane, so they
// agree bit-for-bit with a naive six-loop reference (contraction is disabled at the build level).

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <vector>

namespace fame::detail {

template <class T>
struct simd;
template <>
struct simd<float> {
  typedef float type __attribute__((vector_size(64)));
  static constexpr std::size_t lanes = 16;
};
template <>
struct simd<double> {
  typedef double type __attribute__((vector_size(64)));
  static constexpr std::size_t lanes = 8;
};
template <class T>
using simd_t = typename simd<T>::type;

template <class T>
inline simd_t<T> vload(const T* p) {
  simd_t<T> v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}
template <class T>
inline void vstore(T* p, simd_t<T> v) {
  std::memcpy(p, &v, sizeof(v));
}
template <class T>
inline simd_t<T> vsplat(T x) {
  return simd_t<T>{} + x;
}

struct ConvGeometry {
  std::size_t cin, hin, win;  // unpadded input plane
  std::size_t cout, k, stride, pad;
  std::size_t hpad() const { return hin + 2 * pad; }
  std::size_t wpad() const { return win + 2 * pad; }
  std::size_t hout() const { return (hpad() - k) / stride + 1; }
  std::size_t wout() const { return (wpad() - k) / stride + 1; }
};

/// Zero-pads one sample (cin x hin x win) into `dst` (cin x hpad x wpad).
template <class T>
void pad_sample(const T* src, std::size_t c, std::size_t h, std::size_t w, std::size_t pad,
                std::vector<T>& dst) {
  const std::size_t hp = h + 2 * pad, wp = w + 2 * pad;
  dst.assign(c * hp * wp, T(0));
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t y = 0; y < h; ++y) {
      std::copy_n(src + (ci * h + y) * w, w, dst.data() + (ci * hp + y + pad) * wp + pad);
    }
  }
}

// Stride-1 forward over one padded sample. K == 0 means runtime kernel size.
template <class T, std::size_t K, std::size_t CB>
void conv_s1_block(const T* xpad, const ConvGeometry& g, const T* packed, const T* bias,
                   std::size_t co0, T* out) {
  constexpr std::size_t L = simd<T>::lanes;
  constexpr std::size_t NV = 2;
  const std::size_t k = K == 0 ? g.k : K;
  const std::size_t kk = k * k;
  const std::size_t hp = g.hpad(), wp = g.wpad();
  const std::size_t ho = g.hout(), wo = g.wout();
  const std::size_t plane_in = hp * wp, plane_out = ho * wo;

  for (std::size_t oh = 0; oh < ho; ++oh) {
    std::size_t ow = 0;
    for (; ow + NV * L <= wo; ow += NV * L) {
      simd_t<T> acc[CB][NV];
      for (std::size_t j = 0; j < CB; ++j) {
        const T b = bias ? bias[co0 + j] : T(0);
        for (std::size_t v = 0; v < NV; ++v) acc[j][v] = vsplat<T>(b);
      }
      for (std::size_t ci = 0; ci < g.cin; ++ci) {
        const T* xc = xpad + ci * plane_in + oh * wp + ow;
        const T* kc = packed + ci * kk * CB;
        for (std::size_t kh = 0; kh < k; ++kh) {
          for (std::size_t kw = 0; kw < k; ++kw) {
            const T* r = xc + kh * wp + kw;
            simd_t<T> xv[NV];
            for (std::size_t v = 0; v < NV; ++v) xv[v] = vload(r + v * L);
            const T* kt = kc + (kh * k + kw) * CB;
            for (std::size_t j = 0; j < CB; ++j) {
              const simd_t<T> kv = vsplat<T>(kt[j]);
              for (std::size_t v = 0; v < NV; ++v) acc[j][v] = acc[j][v] + kv * xv[v];
            }
          }
        }
      }
      for (std::size_t j = 0; j < CB; ++j) {
        T* o = out + (co0 + j) * plane_out + oh * wo + ow;
        for (std::size_t v = 0; v < NV; ++v) vstore(o + v * L, acc[j][v]);
      }
    }
    for (; ow < wo; ++ow) {
      T acc[CB];
      for (std::size_t j = 0; j < CB; ++j) acc[j] = bias ? bias[co0 + j] : T(0);
      for (std::size_t ci = 0; ci < g.cin; ++ci) {
        const T* xc = xpad + ci * plane_in + oh * wp + ow;
        const T* kc = packed + ci * kk * CB;
        for (std::size_t kh = 0; kh < k; ++kh) {
          for (std::size_t kw = 0; kw < k; ++kw) {
            const T x = xc[kh * wp + kw];
            const T* kt = kc + (kh * k + kw) * CB;
            for (std::size_t j = 0; j < CB; ++j) acc[j] = acc[j] + kt[j] * x;
          }
        }
      }
      for (std::size_t j = 0; j < CB; ++j) out[(co0 + j) * plane_out + oh * wo + ow] = acc[j];
    }
  }
}

// Packs weight[co0 .. co0+CB) into [ci][tap][j] order for the block kernel.
template <class T>
void pack_block(const T* weight, const ConvGeometry& g, std::size_t co0, std::size_t cb,
                std::vector<T>& packed) {
  const std::size_t kk = g.k * g.k;
  packed.resize(g.cin * kk * cb);
  for (std::size_t ci = 0; ci < g.cin; ++ci)
    for (std::size_t t = 0; t < kk; ++t)
      for (std::size_t j = 0; j < cb; ++j)
        packed[(ci * kk + t) * cb + j] = weight[((co0 + j) * g.cin + ci) * kk + t];
}

template <class T, std::size_t K>
void conv_s1_sample(const T* xpad, const ConvGeometry& g, const T* weight, const T* bias, T* out) {
  constexpr std::size_t CB = 4;
  std::vector<T> packed;
  std::size_t co0 = 0;
  for (; co0 + CB <= g.cout; co0 += CB) {
    pack_block(weight, g, co0, CB, packed);
    conv_s1_block<T, K, CB>(xpad, g, packed.data(), bias, co0, out);
  }
  for (; co0 < g.cout; ++co0) {
    pack_block(weight, g, co0, 1, packed);
    conv_s1_block<T, K, 1>(xpad, g, packed.data(), bias, co0, out);
  }
}

template <class T>
void conv_generic_sample(const T* xpad, const ConvGeometry& g, const T* weight, const T* bias,
                         T* out) {
  const std::size_t hp = g.hpad(), wp = g.wpad(), ho = g.hout(), wo = g.wout(), k = g.k;
  for (std::size_t co = 0; co < g.cout; ++co) {
    for (std::size_t oh = 0; oh < ho; ++oh) {
      for (std::size_t ow = 0; ow < wo; ++ow) {
        T acc = bias ? bias[co] : T(0);
        for (std::size_t ci = 0; ci < g.cin; ++ci) {
          const T* wk = weight + (co * g.cin + ci) * k * k;
          const T* xc = xpad + ci * hp * wp;
          for (std::size_t kh = 0; kh < k; ++kh)
            for (std::size_t kw = 0; kw < k; ++kw)
              acc = acc + wk[kh * k + kw] * xc[(oh * g.stride + kh) * wp + ow * g.stride + kw];
        }
        out[(co * ho + oh) * wo + ow] = acc;
      }
    }
  }
}

/// out = conv(xpad) for one padded sample.
template <class T>
void conv_forward_sample(const T* xpad, const ConvGeometry& g, const T* weight, const T* bias,
                         T* out) {
  if (g.stride != 1) {
    conv_generic_sample(xpad, g, weight, bias, out);
  } else if (g.k == 3) {
    conv_s1_sample<T, 3>(xpad, g, weight, bias, out);
  } else if (g.k == 1) {
    conv_s1_sample<T, 1>(xpad, g, weight, bias, out);
  } else {
    conv_s1_sample<T, 0>(xpad, g, weight, bias, out);
  }
}

// grad_weight[co][ci][t] += sum_{oh,ow} gout[co][oh][ow] * xpad[ci][oh+kh][ow+kw]  (stride 1)
template <class T, std::size_t K, std::size_t CB>
void conv_wgrad_s1_block(const T* xpad, const ConvGeometry& g, const T* gout, std::size_t co0,
                         T* gw) {
  constexpr std::size_t L = simd<T>::lanes;
  constexpr std::size_t KK = K * K;
  const std::size_t hp = g.hpad(), wp = g.wpad(), ho = g.hout(), wo = g.wout();
  const std::size_t plane_out = ho * wo;
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    const T* xc = xpad + ci * hp * wp;
    simd_t<T> acc[CB][KK];
    T tail[CB][KK];
    for (std::size_t j = 0; j < CB; ++j)
      for (std::size_t t = 0; t < KK; ++t) {
        acc[j][t] = simd_t<T>{};
        tail[j][t] = T(0);
      }
    for (std::size_t oh = 0; oh < ho; ++oh) {
      std::size_t ow = 0;
      for (; ow + L <= wo; ow += L) {
        simd_t<T> gv[CB];
        for (std::size_t j = 0; j < CB; ++j) gv[j] = vload(gout + (co0 + j) * plane_out + oh * wo + ow);
        for (std::size_t kh = 0; kh < K; ++kh)
          for (std::size_t kw = 0; kw < K; ++kw) {
            const simd_t<T> xv = vload(xc + (oh + kh) * wp + ow + kw);
            for (std::size_t j = 0; j < CB; ++j) acc[j][kh * K + kw] = acc[j][kh * K + kw] + gv[j] * xv;
          }
      }
      for (; ow < wo; ++ow) {
        for (std::size_t j = 0; j < CB; ++j) {
          const T gval = gout[(co0 + j) * plane_out + oh * wo + ow];
          for (std::size_t kh = 0; kh < K; ++kh)
            for (std::size_t kw = 0; kw < K; ++kw)
              tail[j][kh * K + kw] = tail[j][kh * K + kw] + gval * xc[(oh + kh) * wp + ow + kw];
        }
      }
    }
    for (std::size_t j = 0; j < CB; ++j)
      for (std::size_t t = 0; t < KK; ++t) {
        T s = T(0);
        for (std::size_t l = 0; l < L; ++l) s += acc[j][t][l];
        gw[((co0 + j) * g.cin + ci) * KK + t] += s + tail[j][t];
      }
  }
}

template <class T, std::size_t K>
void conv_wgrad_s1_sample(const T* xpad, const ConvGeometry& g, const T* gout, T* gw) {
  constexpr std::size_t CB = 2;
  std::size_t co0 = 0;
  for (; co0 + CB <= g.cout; co0 += CB) conv_wgrad_s1_block<T, K, CB>(xpad, g, gout, co0, gw);
  for (; co0 < g.cout; ++co0) conv_wgrad_s1_block<T, K, 1>(xpad, g, gout, co0, gw);
}

template <class T>
void conv_wgrad_generic_sample(const T* xpad, const ConvGeometry& g, const T* gout, T* gw) {
  const std::size_t hp = g.hpad(), wp = g.wpad(), ho = g.hout(), wo = g.wout(), k = g.k;
  for (std::size_t co = 0; co < g.cout; ++co)
    for (std::size_t ci = 0; ci < g.cin; ++ci)
      for (std::size_t kh = 0; kh < k; ++kh)
        for (std::size_t kw = 0; kw < k; ++kw) {
          T s = T(0);
          for (std::size_t oh = 0; oh < ho; ++oh)
            for (std::size_t ow = 0; ow < wo; ++ow)
              s += gout[(co * ho + oh) * wo + ow] *
                   xpad[(ci * hp + oh * g.stride + kh) * wp + ow * g.stride + kw];
          gw[((co * g.cin + ci) * k + kh) * k + kw] += s;
        }
}

/// Accumulates the weight gradient contribution of one sample.
template <class T>
void conv_wgrad_sample(const T* xpad, const ConvGeometry& g, const T* gout, T* gw) {
  if (g.stride == 1 && g.k == 3) {
    conv_wgrad_s1_sample<T, 3>(xpad, g, gout, gw);
  } else if (g.stride == 1 && g.k == 1) {
    conv_wgrad_s1_sample<T, 1>(xpad, g, gout, gw);
  } else {
    conv_wgrad_generic_sample(xpad, g, gout, gw);
  }
}

/// Accumulates d(input) for one sample into `gin` (cin x hin x win).
template <class T>
void conv_igrad_sample(const T* gout, const ConvGeometry& g, const T* weight, T* gin) {
  const std::size_t k = g.k, ho = g.hout(), wo = g.wout();
  if (g.stride == 1 && g.pad + 1 <= k) {
    // Correlation of the re-padded output gradient with the flipped, transposed kernel.
    const std::size_t repad = k - 1 - g.pad;
    std::vector<T> gpad;
    pad_sample(gout, g.cout, ho, wo, repad, gpad);
    std::vector<T> flipped(g.cin * g.cout * k * k);
    for (std::size_t co = 0; co < g.cout; ++co)
      for (std::size_t ci = 0; ci < g.cin; ++ci)
        for (std::size_t kh = 0; kh < k; ++kh)
          for (std::size_t kw = 0; kw < k; ++kw)
            flipped[((ci * g.cout + co) * k + (k - 1 - kh)) * k + (k - 1 - kw)] =
                weight[((co * g.cin + ci) * k + kh) * k + kw];
    const ConvGeometry t{g.cout, ho, wo, g.cin, k, 1, repad};
    std::vector<T> tmp(g.cin * g.hin * g.win);
    conv_forward_sample<T>(gpad.data(), t, flipped.data(), nullptr, tmp.data());
    for (std::size_t i = 0; i < tmp.size(); ++i) gin[i] += tmp[i];
    return;
  }
  for (std::size_t co = 0; co < g.cout; ++co)
    for (std::size_t oh = 0; oh < ho; ++oh)
      for (std::size_t ow = 0; ow < wo; ++ow) {
        const T gval = gout[(co * ho + oh) * wo + ow];
        for (std::size_t ci = 0; ci < g.cin; ++ci)
          for (std::size_t kh = 0; kh < k; ++kh)
            for (std::size_t kw = 0; kw < k; ++kw) {
              const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + kh) -
                                        static_cast<std::ptrdiff_t>(g.pad);
              const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + kw) -
                                        static_cast<std::ptrdiff_t>(g.pad);
              if (ih < 0 || iw < 0 || ih >= static_cast<std::ptrdiff_t>(g.hin) ||
                  iw >= static_cast<std::ptrdiff_t>(g.win))
                continue;
              gin[(ci * g.hin + ih) * g.win + iw] += weight[((co * g.cin + ci) * k + kh) * k + kw] * gval;
            }
      }
}

}  // namespace fame::detail

#pragma once

// Differentiable primitives. Every op computes its forward value eagerly and, when a tape is
// active and some input requires a gradient, records its backward rule on that tape.
//
// Broadcasting is limited to a scalar (single-element) operand; anything else is a ShapeError.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fame/detail/conv_kernels.hpp"
#include "fame/errors.hpp"
#include "fame/tensor.hpp"

namespace fame {

namespace detail {

enum class Broadcast { none, lhs_scalar, rhs_scalar };

template <class T>
Broadcast broadcast_mode(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() == b.shape()) return Broadcast::none;
  if (b.numel() == 1) return Broadcast::rhs_scalar;
  if (a.numel() == 1) return Broadcast::lhs_scalar;
  throw ShapeError(std::string(op) + ": shapes " + a.shape().str() + " and " + b.shape().str() +
                   " differ and neither operand is a scalar");
}

template <class T>
const Shape& broadcast_shape(Broadcast mode, const Tensor<T>& a, const Tensor<T>& b) {
  return mode == Broadcast::lhs_scalar ? b.shape() : a.shape();
}

inline std::size_t lhs_index(Broadcast mode, std::size_t i) { return mode == Broadcast::lhs_scalar ? 0 : i; }
inline std::size_t rhs_index(Broadcast mode, std::size_t i) { return mode == Broadcast::rhs_scalar ? 0 : i; }

}  // namespace detail

// ---------------------------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const auto mode = detail::broadcast_mode("add", a, b);
  auto out = Tensor<T>::zeros(detail::broadcast_shape(mode, a, b));
  auto o = out.mutable_values();
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[detail::lhs_index(mode, i)] + bv[detail::rhs_index(mode, i)];
  if (detail::needs_grad<T>({&a, &b})) {
    detail::record<T>("add", {a.id(), b.id()}, out, [a, b, mode](std::span<const T> g) {
      if (a.requires_grad()) {
        auto ga = detail::grad_of(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[detail::lhs_index(mode, i)] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = detail::grad_of(b);
        for (std::size_t i = 0; i < g.size(); ++i) gb[detail::rhs_index(mode, i)] += g[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  const auto mode = detail::broadcast_mode("sub", a, b);
  auto out = Tensor<T>::zeros(detail::broadcast_shape(mode, a, b));
  auto o = out.mutable_values();
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[detail::lhs_index(mode, i)] - bv[detail::rhs_index(mode, i)];
  if (detail::needs_grad<T>({&a, &b})) {
    detail::record<T>("sub", {a.id(), b.id()}, out, [a, b, mode](std::span<const T> g) {
      if (a.requires_grad()) {
        auto ga = detail::grad_of(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[detail::lhs_index(mode, i)] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = detail::grad_of(b);
        for (std::size_t i = 0; i < g.size(); ++i) gb[detail::rhs_index(mode, i)] -= g[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto mode = detail::broadcast_mode("mul", a, b);
  auto out = Tensor<T>::zeros(detail::broadcast_shape(mode, a, b));
  auto o = out.mutable_values();
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[detail::lhs_index(mode, i)] * bv[detail::rhs_index(mode, i)];
  if (detail::needs_grad<T>({&a, &b})) {
    detail::record<T>("mul", {a.id(), b.id()}, out, [a, b, mode](std::span<const T> g) {
      const auto av = a.values(), bv = b.values();
      if (a.requires_grad()) {
        auto ga = detail::grad_of(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[detail::lhs_index(mode, i)] += g[i] * bv[detail::rhs_index(mode, i)];
      }
      if (b.requires_grad()) {
        auto gb = detail::grad_of(b);
        for (std::size_t i = 0; i < g.size(); ++i) gb[detail::rhs_index(mode, i)] += g[i] * av[detail::lhs_index(mode, i)];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> scalar_mul(const Tensor<T>& a, T s) {
  auto out = Tensor<T>::zeros(a.shape());
  auto o = out.mutable_values();
  const auto av = a.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * s;
  if (detail::needs_grad<T>({&a})) {
    detail::record<T>("scalar_mul", {a.id()}, out, [a, s](std::span<const T> g) {
      auto ga = detail::grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
  }
  return out;
}

/// max(x, 0); the subgradient at 0 is 0.
template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  auto out = Tensor<T>::zeros(x.shape());
  auto o = out.mutable_values();
  const auto xv = x.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] > T(0) ? xv[i] : T(0);
  if (detail::needs_grad<T>({&x})) {
    detail::record<T>("relu", {x.id()}, out, [x](std::span<const T> g) {
      auto gx = detail::grad_of(x);
      const auto xv = x.values();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xv[i] > T(0)) gx[i] += g[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> softplus(const Tensor<T>& x) {
  auto out = Tensor<T>::zeros(x.shape());
  auto o = out.mutable_values();
  const auto xv = x.values();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const T v = xv[i];
    o[i] = std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v)));
  }
  detail::check_finite(out, "softplus");
  if (detail::needs_grad<T>({&x})) {
    detail::record<T>("softplus", {x.id()}, out, [x](std::span<const T> g) {
      auto gx = detail::grad_of(x);
      const auto xv = x.values();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / (T(1) + std::exp(-xv[i]));
    });
  }
  return out;
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  const auto xv = x.values();
  T s = T(0);
  for (T v : xv) s += v;
  auto out = Tensor<T>::scalar(s);
  if (detail::needs_grad<T>({&x})) {
    detail::record<T>("sum", {x.id()}, out, [x](std::span<const T> g) {
      auto gx = detail::grad_of(x);
      for (auto& v : gx) v += g[0];
    });
  }
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scalar_mul(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Mean absolute difference, returned as a scalar tensor. sign(0) is taken as 0.
template <class T>
Tensor<T> l1_distance(const Tensor<T>& a, const Tensor<T>& b) {
  const auto mode = detail::broadcast_mode("l1_distance", a, b);
  const std::size_t n = detail::broadcast_shape(mode, a, b).numel();
  const auto av = a.values(), bv = b.values();
  T s = T(0);
  for (std::size_t i = 0; i < n; ++i) s += std::abs(av[detail::lhs_index(mode, i)] - bv[detail::rhs_index(mode, i)]);
  auto out = Tensor<T>::scalar(s / static_cast<T>(n));
  if (detail::needs_grad<T>({&a, &b})) {
    detail::record<T>("l1_distance", {a.id(), b.id()}, out, [a, b, mode, n](std::span<const T> g) {
      const auto av = a.values(), bv = b.values();
      const T scale = g[0] / static_cast<T>(n);
      auto sign = [](T d) { return d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0)); };
      if (a.requires_grad()) {
        auto ga = detail::grad_of(a);
        for (std::size_t i = 0; i < n; ++i)
          ga[detail::lhs_index(mode, i)] += scale * sign(av[detail::lhs_index(mode, i)] - bv[detail::rhs_index(mode, i)]);
      }
      if (b.requires_grad()) {
        auto gb = detail::grad_of(b);
        for (std::size_t i = 0; i < n; ++i)
          gb[detail::rhs_index(mode, i)] -= scale * sign(av[detail::lhs_index(mode, i)] - bv[detail::rhs_index(mode, i)]);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Convolution and normalization

/// Cross-correlation. weight is (out_ch, in_ch, k, k); bias is optional with out_ch elements.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride = 1, std::size_t padding = 0) {
  const Shape& xs = input.shape();
  const Shape& ws = weight.shape();
  if (ws.h != ws.w) {
    throw ShapeError("conv2d: kernel height (weight axis 2) = " + std::to_string(ws.h) +
                     " differs from kernel width (weight axis 3) = " + std::to_string(ws.w));
  }
  if (xs.c != ws.c) {
    throw ShapeError("conv2d: input channels (input axis 1) = " + std::to_string(xs.c) +
                     " but weight in_ch (weight axis 1) = " + std::to_string(ws.c));
  }
  if (bias.defined() && bias.numel() != ws.n) {
    throw ShapeError("conv2d: bias has " + std::to_string(bias.numel()) +
                     " elements but weight out_ch (weight axis 0) = " + std::to_string(ws.n));
  }
  if (stride == 0) throw ContractError("conv2d: stride must be positive");
  if (xs.h + 2 * padding < ws.h || xs.w + 2 * padding < ws.w) {
    throw ShapeError("conv2d: padded input (axes 2,3) " + std::to_string(xs.h + 2 * padding) + "x" +
                     std::to_string(xs.w + 2 * padding) + " smaller than kernel " + std::to_string(ws.h));
  }
  const detail::ConvGeometry g{xs.c, xs.h, xs.w, ws.n, ws.h, stride, padding};
  auto out = Tensor<T>::zeros(Shape{xs.n, ws.n, g.hout(), g.wout()});
  {
    auto o = out.mutable_values();
    std::vector<T> xpad;
    const T* b = bias.defined() ? bias.data() : nullptr;
    for (std::size_t n = 0; n < xs.n; ++n) {
      detail::pad_sample(input.data() + n * xs.sample(), xs.c, xs.h, xs.w, padding, xpad);
      detail::conv_forward_sample(xpad.data(), g, weight.data(), b, o.data() + n * out.shape().sample());
    }
  }
  detail::check_finite(out, "conv2d");
  if (detail::needs_grad<T>({&input, &weight, &bias})) {
    const std::size_t out_sample = out.shape().sample();
    detail::record<T>("conv2d", {input.id(), weight.id(), bias.defined() ? bias.id() : 0}, out,
                      [input, weight, bias, g, out_sample](std::span<const T> gout) {
                        const Shape& xs = input.shape();
                        if (weight.requires_grad()) {
                          auto gw = detail::grad_of(weight);
                          std::vector<T> xpad;
                          for (std::size_t n = 0; n < xs.n; ++n) {
                            detail::pad_sample(input.data() + n * xs.sample(), xs.c, xs.h, xs.w, g.pad, xpad);
                            detail::conv_wgrad_sample(xpad.data(), g, gout.data() + n * out_sample, gw.data());
                          }
                        }
                        if (bias.defined() && bias.requires_grad()) {
                          auto gb = detail::grad_of(bias);
                          const std::size_t plane = out_sample / g.cout;
                          for (std::size_t n = 0; n < xs.n; ++n)
                            for (std::size_t co = 0; co < g.cout; ++co) {
                              T s = T(0);
                              const T* p = gout.data() + n * out_sample + co * plane;
                              for (std::size_t i = 0; i < plane; ++i) s += p[i];
                              gb[co] += s;
                            }
                        }
                        if (input.requires_grad()) {
                          auto gx = detail::grad_of(input);
                          for (std::size_t n = 0; n < xs.n; ++n)
                            detail::conv_igrad_sample(gout.data() + n * out_sample, g, weight.data(),
                                                      gx.data() + n * xs.sample());
                        }
                      });
  }
  return out;
}

/// Per-sample, per-channel normalization over H x W to zero mean and unit (population) variance.
template <class T>
Tensor<T> instance_norm(const Tensor<T>& x, T eps = T(1e-5)) {
  const Shape& s = x.shape();
  const std::size_t planes = s.n * s.c, hw = s.plane();
  if (hw == 0) throw ShapeError("instance_norm: empty spatial extent " + s.str());
  auto out = Tensor<T>::zeros(s);
  std::vector<T> inv_std(planes);
  auto o = out.mutable_values();
  const auto xv = x.values();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* xp = xv.data() + p * hw;
    T m = T(0);
    for (std::size_t i = 0; i < hw; ++i) m += xp[i];
    m /= static_cast<T>(hw);
    T var = T(0);
    for (std::size_t i = 0; i < hw; ++i) var += (xp[i] - m) * (xp[i] - m);
    var /= static_cast<T>(hw);
    const T inv = T(1) / std::sqrt(var + eps);
    inv_std[p] = inv;
    for (std::size_t i = 0; i < hw; ++i) o[p * hw + i] = (xp[i] - m) * inv;
  }
  detail::check_finite(out, "instance_norm");
  if (detail::needs_grad<T>({&x})) {
    auto y = out;  // normalized values are reused in the backward rule
    detail::record<T>("instance_norm", {x.id()}, out, [x, y_node = y.node_ptr(), inv_std, planes, hw](std::span<const T> g) {
      auto gx = detail::grad_of(x);
      const std::vector<T>& yv = y_node->value;
      for (std::size_t p = 0; p < planes; ++p) {
        const T* gp = g.data() + p * hw;
        const T* yp = yv.data() + p * hw;
        T gm = T(0), gym = T(0);
        for (std::size_t i = 0; i < hw; ++i) {
          gm += gp[i];
          gym += gp[i] * yp[i];
        }
        gm /= static_cast<T>(hw);
        gym /= static_cast<T>(hw);
        for (std::size_t i = 0; i < hw; ++i) gx[p * hw + i] += inv_std[p] * (gp[i] - gm - yp[i] * gym);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Pooling

template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const Shape& s = x.shape();
  const std::size_t hw = s.plane();
  auto out = Tensor<T>::zeros(Shape{s.n, s.c, 1, 1});
  auto o = out.mutable_values();
  const auto xv = x.values();
  for (std::size_t p = 0; p < s.n * s.c; ++p) {
    T acc = T(0);
    for (std::size_t i = 0; i < hw; ++i) acc += xv[p * hw + i];
    o[p] = acc / static_cast<T>(hw);
  }
  if (detail::needs_grad<T>({&x})) {
    detail::record<T>("global_avg_pool", {x.id()}, out, [x, hw](std::span<const T> g) {
      auto gx = detail::grad_of(x);
      for (std::size_t p = 0; p < g.size(); ++p) {
        const T v = g[p] / static_cast<T>(hw);
        for (std::size_t i = 0; i < hw; ++i) gx[p * hw + i] += v;
      }
    });
  }
  return out;
}

/// Max over H x W. Ties resolve to the first position in row-major order, which also receives
/// the whole gradient.
template <class T>
Tensor<T> global_max_pool(const Tensor<T>& x) {
  const Shape& s = x.shape();
  const std::size_t hw = s.plane();
  auto out = Tensor<T>::zeros(Shape{s.n, s.c, 1, 1});
  std::vector<std::size_t> argmax(s.n * s.c);
  auto o = out.mutable_values();
  const auto xv = x.values();
  for (std::size_t p = 0; p < s.n * s.c; ++p) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < hw; ++i)
      if (xv[p * hw + i] > xv[p * hw + best]) best = i;
    argmax[p] = best;
    o[p] = xv[p * hw + best];
  }
  if (detail::needs_grad<T>({&x})) {
    detail::record<T>("global_max_pool", {x.id()}, out, [x, hw, argmax](std::span<const T> g) {
      auto gx = detail::grad_of(x);
      for (std::size_t p = 0; p < g.size(); ++p) gx[p * hw + argmax[p]] += g[p];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Structure

template <class T>
Tensor<T> concat_channels(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape& s0 = parts[0].shape();
  std::size_t channels = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Shape& s = parts[i].shape();
    if (s.n != s0.n || s.h != s0.h || s.w != s0.w) {
      throw ShapeError("concat_channels: input " + std::to_string(i) + " has shape " + s.str() +
                       ", expected batch/height/width matching " + s0.str());
    }
    channels += s.c;
  }
  const std::size_t hw = s0.plane();
  auto out = Tensor<T>::zeros(Shape{s0.n, channels, s0.h, s0.w});
  auto o = out.mutable_values();
  for (std::size_t n = 0; n < s0.n; ++n) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const std::size_t len = p.shape().c * hw;
      std::copy_n(p.data() + n * len, len, o.data() + n * channels * hw + offset);
      offset += len;
    }
  }
  if (detail::needs_grad<T>(parts)) {
    std::vector<Tensor<T>> keep(parts.begin(), parts.end());
    std::vector<std::uint64_t> ids;
    for (const auto& p : parts) ids.push_back(p.id());
    detail::record<T>("concat_channels", std::move(ids), out, [keep, channels, hw](std::span<const T> g) {
      const std::size_t batch = keep[0].shape().n;
      std::size_t offset = 0;
      for (const auto& p : keep) {
        const std::size_t len = p.shape().c * hw;
        if (p.requires_grad()) {
          auto gp = detail::grad_of(p);
          for (std::size_t n = 0; n < batch; ++n)
            for (std::size_t i = 0; i < len; ++i) gp[n * len + i] += g[n * channels * hw + offset + i];
        }
        offset += len;
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> concat_channels(std::initializer_list<Tensor<T>> parts) {
  return concat_channels(std::span<const Tensor<T>>(parts.begin(), parts.size()));
}

template <class T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& x, std::span<const std::size_t> sizes) {
  const Shape& s = x.shape();
  const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  if (total != s.c) {
    throw ShapeError("split_channels: sizes sum to " + std::to_string(total) + " but input has " +
                     std::to_string(s.c) + " channels (axis 1)");
  }
  const std::size_t hw = s.plane();
  std::vector<Tensor<T>> parts;
  std::size_t offset = 0;
  const bool track = detail::needs_grad<T>({&x});
  for (std::size_t size : sizes) {
    auto part = Tensor<T>::zeros(Shape{s.n, size, s.h, s.w});
    auto pv = part.mutable_values();
    for (std::size_t n = 0; n < s.n; ++n)
      std::copy_n(x.data() + n * s.c * hw + offset * hw, size * hw, pv.data() + n * size * hw);
    if (track) {
      detail::record<T>("split_channels", {x.id()}, part, [x, offset, size, hw](std::span<const T> g) {
        auto gx = detail::grad_of(x);
        const Shape& s = x.shape();
        for (std::size_t n = 0; n < s.n; ++n)
          for (std::size_t i = 0; i < size * hw; ++i) gx[n * s.c * hw + offset * hw + i] += g[n * size * hw + i];
      });
    }
    parts.push_back(std::move(part));
    offset += size;
  }
  return parts;
}

template <class T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& x, std::initializer_list<std::size_t> sizes) {
  return split_channels(x, std::span<const std::size_t>(sizes.begin(), sizes.size()));
}

/// Dense layer over the flattened per-sample vector: (N, F...) x (out, F) -> (N, out, 1, 1).
template <class T>
Tensor<T> fully_connected(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
  const Shape& xs = x.shape();
  const std::size_t features = xs.sample();
  const std::size_t outputs = weight.shape().n;
  if (weight.shape().sample() != features) {
    throw ShapeError("fully_connected: input has " + std::to_string(features) +
                     " features per sample but weight expects " + std::to_string(weight.shape().sample()));
  }
  if (bias.defined() && bias.numel() != outputs) {
    throw ShapeError("fully_connected: bias has " + std::to_string(bias.numel()) + " elements, expected " +
                     std::to_string(outputs));
  }
  auto out = Tensor<T>::zeros(Shape{xs.n, outputs, 1, 1});
  auto o = out.mutable_values();
  const auto xv = x.values(), wv = weight.values();
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t j = 0; j < outputs; ++j) {
      T acc = bias.defined() ? bias.values()[j] : T(0);
      for (std::size_t f = 0; f < features; ++f) acc += wv[j * features + f] * xv[n * features + f];
      o[n * outputs + j] = acc;
    }
  if (detail::needs_grad<T>({&x, &weight, &bias})) {
    detail::record<T>("fully_connected", {x.id(), weight.id(), bias.defined() ? bias.id() : 0}, out,
                      [x, weight, bias, features, outputs](std::span<const T> g) {
                        const std::size_t batch = x.shape().n;
                        const auto xv = x.values(), wv = weight.values();
                        if (x.requires_grad()) {
                          auto gx = detail::grad_of(x);
                          for (std::size_t n = 0; n < batch; ++n)
                            for (std::size_t j = 0; j < outputs; ++j)
                              for (std::size_t f = 0; f < features; ++f)
                                gx[n * features + f] += g[n * outputs + j] * wv[j * features + f];
                        }
                        if (weight.requires_grad()) {
                          auto gw = detail::grad_of(weight);
                          for (std::size_t n = 0; n < batch; ++n)
                            for (std::size_t j = 0; j < outputs; ++j)
                              for (std::size_t f = 0; f < features; ++f)
                                gw[j * features + f] += g[n * outputs + j] * xv[n * features + f];
                        }
                        if (bias.defined() && bias.requires_grad()) {
                          auto gb = detail::grad_of(bias);
                          for (std::size_t n = 0; n < batch; ++n)
                            for (std::size_t j = 0; j < outputs; ++j) gb[j] += g[n * outputs + j];
                        }
                      });
  }
  return out;
}

/// Softmax over axis 1 (channels / experts) independently at every (n, h, w).
template <class T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
  const Shape& s = x.shape();
  const std::size_t hw = s.plane();
  auto out = Tensor<T>::zeros(s);
  auto o = out.mutable_values();
  const auto xv = x.values();
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t i = 0; i < hw; ++i) {
      const std::size_t base = n * s.c * hw + i;
      T m = xv[base];
      for (std::size_t c = 1; c < s.c; ++c) m = std::max(m, xv[base + c * hw]);
      T z = T(0);
      for (std::size_t c = 0; c < s.c; ++c) {
        const T e = std::exp(xv[base + c * hw] - m);
        o[base + c * hw] = e;
        z += e;
      }
      for (std::size_t c = 0; c < s.c; ++c) o[base + c * hw] /= z;
    }
  detail::check_finite(out, "softmax_channels");
  if (detail::needs_grad<T>({&x})) {
    detail::record<T>("softmax_channels", {x.id()}, out, [x, y_node = out.node_ptr()](std::span<const T> g) {
      const Shape& s = x.shape();
      const std::size_t hw = s.plane();
      const std::vector<T>& y = y_node->value;
      auto gx = detail::grad_of(x);
      for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t i = 0; i < hw; ++i) {
          const std::size_t base = n * s.c * hw + i;
          T dot = T(0);
          for (std::size_t c = 0; c < s.c; ++c) dot += g[base + c * hw] * y[base + c * hw];
          for (std::size_t c = 0; c < s.c; ++c) gx[base + c * hw] += y[base + c * hw] * (g[base + c * hw] - dot);
        }
    });
  }
  return out;
}

/// Sampling phase of the decimation grid: low-resolution pixel i sits at high-resolution
/// coordinate i * factor + sample_phase(factor). Upsamplers and the degradation operator share it.
constexpr std::size_t sample_phase(std::size_t factor) { return factor / 2; }

namespace detail {
struct LinearTaps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

inline LinearTaps linear_taps(std::size_t in, std::size_t factor) {
  const std::size_t out = in * factor;
  LinearTaps taps;
  taps.lo.resize(out);
  taps.hi.resize(out);
  taps.frac.resize(out);
  const double phase = static_cast<double>(sample_phase(factor));
  for (std::size_t X = 0; X < out; ++X) {
    double src = (static_cast<double>(X) - phase) / static_cast<double>(factor);
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    taps.lo[X] = i0;
    taps.hi[X] = std::min(i0 + 1, in - 1);
    taps.frac[X] = src - static_cast<double>(i0);
  }
  return taps;
}
}  // namespace detail

/// Bilinear interpolation by an integer factor on the shared decimation grid, edge-clamped.
template <class T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, std::size_t factor) {
  if (factor == 0) throw ContractError("bilinear_upsample: factor must be positive");
  const Shape& s = x.shape();
  const auto ty = detail::linear_taps(s.h, factor);
  const auto tx = detail::linear_taps(s.w, factor);
  const std::size_t ho = s.h * factor, wo = s.w * factor;
  auto out = Tensor<T>::zeros(Shape{s.n, s.c, ho, wo});
  auto o = out.mutable_values();
  const auto xv = x.values();
  for (std::size_t p = 0; p < s.n * s.c; ++p) {
    const T* src = xv.data() + p * s.plane();
    T* dst = o.data() + p * ho * wo;
    for (std::size_t Y = 0; Y < ho; ++Y) {
      const T fy = static_cast<T>(ty.frac[Y]);
      const T* r0 = src + ty.lo[Y] * s.w;
      const T* r1 = src + ty.hi[Y] * s.w;
      for (std::size_t X = 0; X < wo; ++X) {
        const T fx = static_cast<T>(tx.frac[X]);
        const T top = r0[tx.lo[X]] * (T(1) - fx) + r0[tx.hi[X]] * fx;
        const T bot = r1[tx.lo[X]] * (T(1) - fx) + r1[tx.hi[X]] * fx;
        dst[Y * wo + X] = top * (T(1) - fy) + bot * fy;
      }
    }
  }
  if (detail::needs_grad<T>({&x})) {
    detail::record<T>("bilinear_upsample", {x.id()}, out, [x, ty, tx, ho, wo](std::span<const T> g) {
      const Shape& s = x.shape();
      auto gx = detail::grad_of(x);
      for (std::size_t p = 0; p < s.n * s.c; ++p) {
        T* dst = gx.data() + p * s.plane();
        const T* gp = g.data() + p * ho * wo;
        for (std::size_t Y = 0; Y < ho; ++Y) {
          const T fy = static_cast<T>(ty.frac[Y]);
          for (std::size_t X = 0; X < wo; ++X) {
            const T fx = static_cast<T>(tx.frac[X]);
            const T v = gp[Y * wo + X];
            dst[ty.lo[Y] * s.w + tx.lo[X]] += v * (T(1) - fy) * (T(1) - fx);
            dst[ty.lo[Y] * s.w + tx.hi[X]] += v * (T(1) - fy) * fx;
            dst[ty.hi[Y] * s.w + tx.lo[X]] += v * fy * (T(1) - fx);
            dst[ty.hi[Y] * s.w + tx.hi[X]] += v * fy * fx;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Routing primitives

/// One-hot of the argmax over axis 1 (first index wins ties). The backward rule passes the
/// incoming gradient through unchanged, so the gradient of the soft input stands in for the
/// gradient of the hard output.
template <class T>
Tensor<T> straight_through_onehot(const Tensor<T>& z) {
  const Shape& s = z.shape();
  const std::size_t hw = s.plane();
  auto out = Tensor<T>::zeros(s);
  auto o = out.mutable_values();
  const auto zv = z.values();
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t i = 0; i < hw; ++i) {
      const std::size_t base = n * s.c * hw + i;
      std::size_t best = 0;
      for (std::size_t c = 1; c < s.c; ++c)
        if (zv[base + c * hw] > zv[base + best * hw]) best = c;
      o[base + best * hw] = T(1);
    }
  if (detail::needs_grad<T>({&z})) {
    detail::record<T>("straight_through_onehot", {z.id()}, out, [z](std::span<const T> g) {
      auto gz = detail::grad_of(z);
      for (std::size_t i = 0; i < g.size(); ++i) gz[i] += g[i];
    });
  }
  return out;
}

/// features (N, C, H, W) times mask channel `channel` of (N, M, H, W), broadcast over C.
template <class T>
Tensor<T> mask_multiply(const Tensor<T>& features, const Tensor<T>& mask, std::size_t channel) {
  const Shape& fs = features.shape();
  const Shape& ms = mask.shape();
  if (fs.n != ms.n || fs.h != ms.h || fs.w != ms.w || channel >= ms.c) {
    throw ShapeError("mask_multiply: features " + fs.str() + " incompatible with mask " + ms.str() +
                     " channel " + std::to_string(channel));
  }
  const std::size_t hw = fs.plane();
  auto out = Tensor<T>::zeros(fs);
  auto o = out.mutable_values();
  const auto fv = features.values(), mv = mask.values();
  for (std::size_t n = 0; n < fs.n; ++n) {
    const T* m = mv.data() + (n * ms.c + channel) * hw;
    for (std::size_t c = 0; c < fs.c; ++c) {
      const std::size_t base = (n * fs.c + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) o[base + i] = fv[base + i] * m[i];
    }
  }
  if (detail::needs_grad<T>({&features, &mask})) {
    detail::record<T>("mask_multiply", {features.id(), mask.id()}, out, [features, mask, channel](std::span<const T> g) {
      const Shape& fs = features.shape();
      const Shape& ms = mask.shape();
      const std::size_t hw = fs.plane();
      const auto fv = features.values(), mv = mask.values();
      if (features.requires_grad()) {
        auto gf = detail::grad_of(features);
        for (std::size_t n = 0; n < fs.n; ++n) {
          const T* m = mv.data() + (n * ms.c + channel) * hw;
          for (std::size_t c = 0; c < fs.c; ++c) {
            const std::size_t base = (n * fs.c + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) gf[base + i] += g[base + i] * m[i];
          }
        }
      }
      if (mask.requires_grad()) {
        auto gm = detail::grad_of(mask);
        for (std::size_t n = 0; n < fs.n; ++n) {
          T* dst = gm.data() + (n * ms.c + channel) * hw;
          for (std::size_t c = 0; c < fs.c; ++c) {
            const std::size_t base = (n * fs.c + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) dst[i] += g[base + i] * fv[base + i];
          }
        }
      }
    });
  }
  return out;
}

template <class T>
struct TopKResult {
  Tensor<T> weights;                               // (N, E, 1, 1); exactly k nonzeros per row
  std::vector<std::vector<std::size_t>> selected;  // per row, in descending logit order
};

/// Keeps the k largest logits of each row (lower index wins ties), softmax-normalizes them and
/// sets every other weight to exactly 0.
template <class T>
TopKResult<T> topk_softmax(const Tensor<T>& logits, std::size_t k) {
  const Shape& s = logits.shape();
  const std::size_t experts = s.sample();
  if (k == 0 || k > experts) {
    throw ContractError("topk_softmax: k = " + std::to_string(k) + " outside [1, " + std::to_string(experts) + "]");
  }
  const auto lv = logits.values();
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t e = 0; e < experts; ++e)
      if (!std::isfinite(lv[n * experts + e])) {
        std::ostringstream msg;
        msg << "gate logits are not finite for batch element " << n << ": [";
        for (std::size_t j = 0; j < experts; ++j) msg << (j ? ", " : "") << lv[n * experts + j];
        msg << "]";
        throw NumericError(msg.str());
      }
  TopKResult<T> result;
  result.weights = Tensor<T>::zeros(s);
  auto w = result.weights.mutable_values();
  result.selected.resize(s.n);
  for (std::size_t n = 0; n < s.n; ++n) {
    const T* row = lv.data() + n * experts;
    std::vector<std::size_t> order(experts);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [row](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    order.resize(k);
    const T m = row[order.front()];
    T z = T(0);
    for (std::size_t e : order) {
      w[n * experts + e] = std::exp(row[e] - m);
      z += w[n * experts + e];
    }
    for (std::size_t e : order) w[n * experts + e] /= z;
    result.selected[n] = std::move(order);
  }
  if (detail::needs_grad<T>({&logits})) {
    detail::record<T>("topk_softmax", {logits.id()}, result.weights,
                      [logits, y_node = result.weights.node_ptr(), sel = result.selected, experts](std::span<const T> g) {
                        auto gl = detail::grad_of(logits);
                        const std::vector<T>& y = y_node->value;
                        for (std::size_t n = 0; n < sel.size(); ++n) {
                          T dot = T(0);
                          for (std::size_t e : sel[n]) dot += g[n * experts + e] * y[n * experts + e];
                          for (std::size_t e : sel[n]) gl[n * experts + e] += y[n * experts + e] * (g[n * experts + e] - dot);
                        }
                      });
  }
  return result;
}

/// Rows `indices` of the batch axis, in the given order.
template <class T>
Tensor<T> gather_batch(const Tensor<T>& x, std::span<const std::size_t> indices) {
  const Shape& s = x.shape();
  const std::size_t len = s.sample();
  auto out = Tensor<T>::zeros(Shape{indices.size(), s.c, s.h, s.w});
  auto o = out.mutable_values();
  for (std::size_t j = 0; j < indices.size(); ++j) {
    if (indices[j] >= s.n) throw ShapeError("gather_batch: index " + std::to_string(indices[j]) + " out of range");
    std::copy_n(x.data() + indices[j] * len, len, o.data() + j * len);
  }
  if (detail::needs_grad<T>({&x})) {
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    detail::record<T>("gather_batch", {x.id()}, out, [x, idx, len](std::span<const T> g) {
      auto gx = detail::grad_of(x);
      for (std::size_t j = 0; j < idx.size(); ++j)
        for (std::size_t i = 0; i < len; ++i) gx[idx[j] * len + i] += g[j * len + i];
    });
  }
  return out;
}

/// Places row j of `x` at batch position indices[j] of a zero tensor with `batch` rows.
template <class T>
Tensor<T> scatter_batch(const Tensor<T>& x, std::span<const std::size_t> indices, std::size_t batch) {
  const Shape& s = x.shape();
  if (indices.size() != s.n) throw ShapeError("scatter_batch: index count does not match rows of " + s.str());
  const std::size_t len = s.sample();
  auto out = Tensor<T>::zeros(Shape{batch, s.c, s.h, s.w});
  auto o = out.mutable_values();
  for (std::size_t j = 0; j < indices.size(); ++j) {
    if (indices[j] >= batch) throw ShapeError("scatter_batch: index " + std::to_string(indices[j]) + " out of range");
    for (std::size_t i = 0; i < len; ++i) o[indices[j] * len + i] += x.values()[j * len + i];
  }
  if (detail::needs_grad<T>({&x})) {
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    detail::record<T>("scatter_batch", {x.id()}, out, [x, idx, len](std::span<const T> g) {
      auto gx = detail::grad_of(x);
      for (std::size_t j = 0; j < idx.size(); ++j)
        for (std::size_t i = 0; i < len; ++i) gx[j * len + i] += g[idx[j] * len + i];
    });
  }
  return out;
}

/// Row j of `x` scaled by gates[indices[j], expert], with gates of shape (N, E, 1, 1).
template <class T>
Tensor<T> scale_by_gate(const Tensor<T>& x, const Tensor<T>& gates, std::size_t expert,
                        std::span<const std::size_t> indices) {
  const Shape& s = x.shape();
  const std::size_t experts = gates.shape().sample();
  if (indices.size() != s.n || expert >= experts) throw ShapeError("scale_by_gate: inconsistent rows or expert index");
  const std::size_t len = s.sample();
  auto out = Tensor<T>::zeros(s);
  auto o = out.mutable_values();
  const auto xv = x.values(), gv = gates.values();
  for (std::size_t j = 0; j < s.n; ++j) {
    const T w = gv[indices[j] * experts + expert];
    for (std::size_t i = 0; i < len; ++i) o[j * len + i] = xv[j * len + i] * w;
  }
  if (detail::needs_grad<T>({&x, &gates})) {
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    detail::record<T>("scale_by_gate", {x.id(), gates.id()}, out, [x, gates, expert, idx, len, experts](std::span<const T> g) {
      const auto xv = x.values(), gv = gates.values();
      if (x.requires_grad()) {
        auto gx = detail::grad_of(x);
        for (std::size_t j = 0; j < idx.size(); ++j) {
          const T w = gv[idx[j] * experts + expert];
          for (std::size_t i = 0; i < len; ++i) gx[j * len + i] += g[j * len + i] * w;
        }
      }
      if (gates.requires_grad()) {
        auto gg = detail::grad_of(gates);
        for (std::size_t j = 0; j < idx.size(); ++j) {
          T acc = T(0);
          for (std::size_t i = 0; i < len; ++i) acc += g[j * len + i] * xv[j * len + i];
          gg[idx[j] * experts + expert] += acc;
        }
      }
    });
  }
  return out;
}

/// Sum over the batch axis: (N, C, H, W) -> (1, C, H, W).
template <class T>
Tensor<T> sum_batch(const Tensor<T>& x) {
  const Shape& s = x.shape();
  const std::size_t len = s.sample();
  auto out = Tensor<T>::zeros(Shape{1, s.c, s.h, s.w});
  auto o = out.mutable_values();
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t i = 0; i < len; ++i) o[i] += x.values()[n * len + i];
  if (detail::needs_grad<T>({&x})) {
    detail::record<T>("sum_batch", {x.id()}, out, [x, len](std::span<const T> g) {
      auto gx = detail::grad_of(x);
      for (std::size_t n = 0; n < x.shape().n; ++n)
        for (std::size_t i = 0; i < len; ++i) gx[n * len + i] += g[i];
    });
  }
  return out;
}

/// Squared coefficient of variation (population std / mean)^2 over all elements.
template <class T>
Tensor<T> scv(const Tensor<T>& w) {
  const std::size_t n = w.numel();
  if (n == 0) throw ContractError("scv: empty vector");
  const auto wv = w.values();
  // Moments of the values shifted by the first element, so a constant vector has variance exactly 0.
  const T shift = wv[0];
  T dm = T(0);
  for (T v : wv) dm += v - shift;
  dm /= static_cast<T>(n);
  const T m = shift + dm;
  if (!(std::abs(m) > T(1e-12))) {
    throw NumericError("scv: mean of the weight vector is " + std::to_string(static_cast<double>(m)) +
                       "; coefficient of variation undefined");
  }
  T var = T(0);
  for (T v : wv) var += (v - shift - dm) * (v - shift - dm);
  var /= static_cast<T>(n);
  auto out = Tensor<T>::scalar(var / (m * m));
  if (detail::needs_grad<T>({&w})) {
    detail::record<T>("scv", {w.id()}, out, [w, m, var, n](std::span<const T> g) {
      auto gw = detail::grad_of(w);
      const auto wv = w.values();
      const T nn = static_cast<T>(n);
      for (std::size_t i = 0; i < n; ++i) {
        const T d = T(2) * (wv[i] - m) / (nn * m * m) - T(2) * var / (m * m * m * nn);
        gw[i] += g[0] * d;
      }
    });
  }
  return out;
}

}  // namespace fame

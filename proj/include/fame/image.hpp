#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fame/errors.hpp"
#include "fame/tensor.hpp"

namespace fame {

/// Planar multi-band image, band-major: data[(b * h + y) * w + x].
template <class T>
struct ImageT {
  std::size_t bands = 0;
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<T> data;

  ImageT() = default;
  ImageT(std::size_t b, std::size_t height, std::size_t width, T fill = T(0))
      : bands(b), h(height), w(width), data(b * height * width, fill) {}

  std::size_t plane_size() const noexcept { return h * w; }
  bool empty() const noexcept { return data.empty(); }

  T& at(std::size_t b, std::size_t y, std::size_t x) { return data[(b * h + y) * w + x]; }
  const T& at(std::size_t b, std::size_t y, std::size_t x) const { return data[(b * h + y) * w + x]; }

  std::span<T> plane(std::size_t b) { return std::span<T>(data).subspan(b * h * w, h * w); }
  std::span<const T> plane(std::size_t b) const { return std::span<const T>(data).subspan(b * h * w, h * w); }

  friend bool operator==(const ImageT&, const ImageT&) = default;
};

using Image = ImageT<float>;

template <class U, class T>
ImageT<U> image_cast(const ImageT<T>& in) {
  ImageT<U> out(in.bands, in.h, in.w);
  for (std::size_t i = 0; i < in.data.size(); ++i) out.data[i] = static_cast<U>(in.data[i]);
  return out;
}

/// Stacks images of identical geometry into an (N, C, H, W) tensor.
template <class T, class U>
Tensor<T> to_tensor(std::span<const ImageT<U>> images) {
  if (images.empty()) throw ShapeError("to_tensor: no images");
  const auto& first = images[0];
  std::vector<T> v;
  v.reserve(images.size() * first.data.size());
  for (const auto& im : images) {
    if (im.bands != first.bands || im.h != first.h || im.w != first.w) {
      throw ShapeError("to_tensor: image geometry " + std::to_string(im.bands) + "x" + std::to_string(im.h) + "x" +
                       std::to_string(im.w) + " differs from the first image");
    }
    for (U x : im.data) v.push_back(static_cast<T>(x));
  }
  return Tensor<T>::from(Shape{images.size(), first.bands, first.h, first.w}, std::move(v));
}

template <class T, class U>
Tensor<T> to_tensor(const ImageT<U>& image) {
  return to_tensor<T, U>(std::span<const ImageT<U>>(&image, 1));
}

/// Batch element n of a tensor as an image.
template <class U, class T>
ImageT<U> to_image(const Tensor<T>& t, std::size_t n = 0) {
  const Shape& s = t.shape();
  ImageT<U> out(s.c, s.h, s.w);
  const auto v = t.values().subspan(n * s.sample(), s.sample());
  for (std::size_t i = 0; i < v.size(); ++i) out.data[i] = static_cast<U>(v[i]);
  return out;
}

}  // namespace fame

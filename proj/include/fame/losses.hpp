#pragma once

// Training objective: L1 reconstruction, annealed mask supervision and expert load balancing.

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fame/dct.hpp"
#include "fame/errors.hpp"
#include "fame/model.hpp"
#include "fame/ops.hpp"
#include "fame/tensor.hpp"

namespace fame {

struct LossWeights {
  double alpha_initial = 0.001;
  double beta = 0.1;
  double anneal_cutoff_fraction = 0.7;
  std::size_t total_epochs = 1000;

  void validate() const {
    if (!(alpha_initial >= 0.0)) throw ConfigError("alpha_initial must be >= 0");
    if (!(beta >= 0.0)) throw ConfigError("beta must be >= 0");
    if (!(anneal_cutoff_fraction > 0.0 && anneal_cutoff_fraction <= 1.0)) {
      throw ConfigError("anneal_cutoff_fraction must be in (0, 1]");
    }
    if (total_epochs == 0) throw ConfigError("total_epochs must be positive");
  }
};

/// alpha_initial * max(0, 1 - epoch / (cutoff * total_epochs)).
inline double alpha_effective(std::size_t epoch, const LossWeights& w) {
  const double span = w.anneal_cutoff_fraction * static_cast<double>(w.total_epochs);
  return w.alpha_initial * std::max(0.0, 1.0 - static_cast<double>(epoch) / span);
}

template <class T>
Tensor<T> reconstruction_loss(const Tensor<T>& y, const Tensor<T>& gt) {
  return l1_distance(y, gt);
}

template <class T>
Tensor<T> mask_loss(const Tensor<T>& mask, const Tensor<T>& label) {
  if (mask.shape() != label.shape()) {
    throw ShapeError("mask_loss: predicted mask " + mask.shape().str() + " vs label " + label.shape().str());
  }
  return l1_distance(mask, label);
}

/// Stacks mask labels into (N, 2, H, W): channel 0 high, channel 1 low.
template <class T>
Tensor<T> mask_label_tensor(std::span<const MaskLabel* const> labels) {
  if (labels.empty()) throw ContractError("mask_label_tensor: empty batch");
  const std::size_t h = labels[0]->h, w = labels[0]->w, plane = h * w;
  std::vector<T> v(labels.size() * 2 * plane);
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const MaskLabel& m = *labels[n];
    if (m.h != h || m.w != w) throw ShapeError("mask_label_tensor: labels differ in size within a batch");
    for (std::size_t i = 0; i < plane; ++i) {
      v[(2 * n) * plane + i] = static_cast<T>(m.high[i]);
      v[(2 * n + 1) * plane + i] = static_cast<T>(m.low[i]);
    }
  }
  return Tensor<T>::from(Shape{labels.size(), 2, h, w}, std::move(v));
}

/// Sum of SCVs of the given importance vectors.
template <class T>
Tensor<T> load_loss(std::initializer_list<Tensor<T>> importances) {
  Tensor<T> total;
  for (const auto& imp : importances) {
    if (!imp.defined()) continue;
    const Tensor<T> s = scv(imp);
    total = total.defined() ? add(total, s) : s;
  }
  if (!total.defined()) throw ContractError("load_loss: no importance vectors");
  return total;
}

struct LossBreakdown {
  double rec = 0, mask = 0, load = 0, alpha_effective = 0, total = 0;
};

template <class T>
struct LossResult {
  Tensor<T> total;
  LossBreakdown breakdown;
};

/// Builds rec + alpha_eff * mask + beta * load for one forward pass. `labels` may be undefined when the
/// mask predictor is ablated.
template <class T>
LossResult<T> total_loss(const ForwardResult<T>& fwd, const Tensor<T>& gt, const Tensor<T>& labels,
                         std::size_t epoch, const LossWeights& w) {
  LossResult<T> out;
  auto& b = out.breakdown;
  b.alpha_effective = alpha_effective(epoch, w);

  const Tensor<T> rec = reconstruction_loss(fwd.hrms, gt);
  b.rec = static_cast<double>(rec.item());
  out.total = rec;

  if (fwd.mask.defined() && labels.defined()) {
    const Tensor<T> m = mask_loss(fwd.mask, labels);
    b.mask = static_cast<double>(m.item());
    if (b.alpha_effective > 0) out.total = add(out.total, scalar_mul(m, static_cast<T>(b.alpha_effective)));
  }

  const Tensor<T> load = load_loss({fwd.hf_gate.importance(), fwd.lf_gate.importance(),
                                    fwd.fusion_gate.weights.defined() ? fwd.fusion_gate.importance() : Tensor<T>{}});
  b.load = static_cast<double>(load.item());
  if (w.beta > 0) out.total = add(out.total, scalar_mul(load, static_cast<T>(w.beta)));

  b.total = static_cast<double>(out.total.item());
  return out;
}

}  // namespace fame

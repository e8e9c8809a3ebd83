#pragma once

// FAME network: feature extraction, mask prediction, frequency experts and experts mixture.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fame/errors.hpp"
#include "fame/ops.hpp"
#include "fame/tensor.hpp"

namespace fame {

struct NetworkConfig {
  std::size_t num_experts = 4;
  std::size_t top_k = 2;
  std::size_t base_channels = 32;
  std::size_t num_resblocks = 2;
  double gumbel_tau = 1.0;
  std::size_t ms_bands = 4;
  std::size_t upsample_factor = 4;
  bool ablation_disable_mask = false;
  bool ablation_replace_mixture = false;
  bool eval_mode_noise_off = false;
  bool zero_init_output = true;  // start as the upsampled-LRMS identity
  bool detach_gate_input = true;  // gate statistics carry no gradient into the feature path

  void validate() const {
    if (num_experts == 0 || top_k == 0 || top_k > num_experts) {
      throw ConfigError("top_k must satisfy 1 <= top_k <= num_experts (got top_k=" + std::to_string(top_k) +
                        ", num_experts=" + std::to_string(num_experts) + ")");
    }
    if (base_channels == 0) throw ConfigError("base_channels must be positive");
    if (ms_bands == 0) throw ConfigError("ms_bands must be positive");
    if (upsample_factor != 2 && upsample_factor != 4) throw ConfigError("upsample_factor must be 2 or 4");
    if (!(gumbel_tau > 0.0)) throw ContractError("gumbel_tau must be positive");
  }
};

template <class T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
};

/// Parameters in registration order, initialized uniformly in +-1/sqrt(fan_in).
template <class T>
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed) : rng_(seed) {}

  Tensor<T> create(const std::string& name, Shape shape, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<T> v(shape.numel());
    for (auto& x : v) x = static_cast<T>(dist(rng_));
    auto t = Tensor<T>::from(shape, std::move(v), true);
    params_.push_back({name, t});
    return t;
  }

  std::vector<NamedParameter<T>>& all() { return params_; }
  const std::vector<NamedParameter<T>>& all() const { return params_; }

 private:
  std::mt19937_64 rng_;
  std::vector<NamedParameter<T>> params_;
};

namespace nn {

template <class T>
struct Conv {
  Tensor<T> weight, bias;
  std::size_t pad = 0;

  Conv() = default;
  Conv(ParameterStore<T>& store, const std::string& name, std::size_t in, std::size_t out, std::size_t k)
      : pad(k / 2) {
    weight = store.create(name + ".weight", Shape{out, in, k, k}, in * k * k);
    bias = store.create(name + ".bias", Shape{out, 1, 1, 1}, in * k * k);
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, 1, pad); }
};

/// conv3 - relu - conv3 plus identity.
template <class T>
struct ResBlock {
  Conv<T> conv1, conv2;
  ResBlock(ParameterStore<T>& s, const std::string& name, std::size_t c)
      : conv1(s, name + ".conv1", c, c, 3), conv2(s, name + ".conv2", c, c, 3) {}
  Tensor<T> operator()(const Tensor<T>& x) const { return add(x, conv2(relu(conv1(x)))); }
};

template <class T>
struct FeatureExtractor {
  Conv<T> head;
  std::vector<ResBlock<T>> blocks;
  FeatureExtractor(ParameterStore<T>& s, const std::string& name, std::size_t in, std::size_t c, std::size_t depth)
      : head(s, name + ".head", in, c, 3) {
    for (std::size_t i = 0; i < depth; ++i) blocks.emplace_back(s, name + ".block" + std::to_string(i), c);
  }
  Tensor<T> operator()(const Tensor<T>& x) const {
    Tensor<T> y = head(x);
    for (const auto& b : blocks) y = b(y);
    return y;
  }
};

/// Half-instance-normalization block: conv3, instance norm on the first half of the channels,
/// relu, conv3, plus identity.
template <class T>
struct HinExpert {
  Conv<T> conv1, conv2;
  std::size_t channels;
  HinExpert(ParameterStore<T>& s, const std::string& name, std::size_t c)
      : conv1(s, name + ".conv1", c, c, 3), conv2(s, name + ".conv2", c, c, 3), channels(c) {}
  Tensor<T> operator()(const Tensor<T>& x) const {
    Tensor<T> y = conv1(x);
    if (channels >= 2) {
      const std::size_t half = channels / 2;
      auto parts = split_channels(y, {half, channels - half});
      y = concat_channels({instance_norm(parts[0]), parts[1]});
    }
    return add(x, conv2(relu(y)));
  }
};

/// conv3 plus relu.
template <class T>
struct ConvExpert {
  Conv<T> conv;
  ConvExpert(ParameterStore<T>& s, const std::string& name, std::size_t c) : conv(s, name + ".conv", c, c, 3) {}
  Tensor<T> operator()(const Tensor<T>& x) const { return relu(conv(x)); }
};

/// Two-layer conv block in -> out.
template <class T>
struct FusionExpert {
  Conv<T> conv1, conv2;
  FusionExpert(ParameterStore<T>& s, const std::string& name, std::size_t in, std::size_t out)
      : conv1(s, name + ".conv1", in, out, 3), conv2(s, name + ".conv2", out, out, 3) {}
  Tensor<T> operator()(const Tensor<T>& x) const { return conv2(relu(conv1(x))); }
};

/// Noisy top-k gate: F_e = GAP(x) + GMP(x); V = A2 F_e + softplus(A1 F_e) * eta.
template <class T>
struct Gate {
  Tensor<T> a1, a2;
  bool detach_input = true;
  Gate(ParameterStore<T>& s, const std::string& name, std::size_t features, std::size_t experts, bool detach = true)
      : detach_input(detach) {
    a1 = s.create(name + ".a1", Shape{experts, features, 1, 1}, features);
    a2 = s.create(name + ".a2", Shape{experts, features, 1, 1}, features);
  }
  /// `eta` is (N, E, 1, 1) standard-normal noise, or undefined for the noise-free gate. With
  /// `detach_input` the gating losses train the gate only, not the features feeding it.
  Tensor<T> logits(const Tensor<T>& x, const Tensor<T>& eta) const {
    const Tensor<T> in = detach_input ? x.detach() : x;
    const Tensor<T> fe = add(global_avg_pool(in), global_max_pool(in));
    Tensor<T> v = fully_connected(fe, a2);
    if (eta.defined()) v = add(v, mul(softplus(fully_connected(fe, a1)), eta));
    return v;
  }
};

}  // namespace nn

template <class T>
struct GateOutput {
  Tensor<T> logits;   // V, (N, E, 1, 1)
  Tensor<T> weights;  // (N, E, 1, 1), exactly k nonzeros per row
  std::vector<std::vector<std::size_t>> selected;

  /// Per-expert weight mass summed over the batch, (1, E, 1, 1).
  Tensor<T> importance() const { return sum_batch(weights); }
};

template <class T>
struct MoeOutput {
  Tensor<T> output;
  GateOutput<T> gate;
};

/// Sparse mixture: each sample runs only its k selected experts; output is their gate-weighted sum.
template <class T, class Expert>
MoeOutput<T> moe_forward(const std::vector<Expert>& experts, const nn::Gate<T>& gate, const Tensor<T>& x,
                         std::size_t k, const Tensor<T>& eta) {
  if (experts.empty()) throw ContractError("moe_forward: empty expert bank");
  MoeOutput<T> out;
  out.gate.logits = gate.logits(x, eta);
  auto routed = topk_softmax(out.gate.logits, k);
  out.gate.weights = routed.weights;
  out.gate.selected = std::move(routed.selected);
  const std::size_t batch = x.shape().n;
  for (std::size_t e = 0; e < experts.size(); ++e) {
    std::vector<std::size_t> rows;
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t s : out.gate.selected[n])
        if (s == e) rows.push_back(n);
    if (rows.empty()) continue;
    const Tensor<T> y = experts[e](gather_batch(x, rows));
    const Tensor<T> contribution = scatter_batch(scale_by_gate(y, out.gate.weights, e, rows), rows, batch);
    out.output = out.output.defined() ? add(out.output, contribution) : contribution;
  }
  return out;
}

struct ForwardOptions {
  std::uint64_t seed = 0;
  bool stochastic = true;  // Gumbel noise in the mask and Gaussian noise in the gates
  bool hard_mask = true;   // false: use the soft mask Z directly (gradient checks of the full graph)
};

template <class T>
struct ForwardResult {
  Tensor<T> hrms;
  Tensor<T> up_lrms;
  Tensor<T> f_ms, f_pan, f_c;
  Tensor<T> mask_logits;  // P
  Tensor<T> mask_soft;    // Z
  Tensor<T> mask;         // M (one-hot unless hard_mask is off); undefined when the mask is ablated
  Tensor<T> f_h, f_l;
  Tensor<T> h_f, l_f;
  Tensor<T> mixture;  // pre-projection mixture output
  GateOutput<T> hf_gate, lf_gate, fusion_gate;
};

/// Uniform draw in the open interval (0, 1).
inline double open_uniform(std::mt19937_64& rng) {
  return (static_cast<double>(rng() >> 11) + 0.5) * (1.0 / 9007199254740992.0);
}

template <class T>
class FameNet {
 public:
  FameNet(const NetworkConfig& cfg, std::uint64_t init_seed) : cfg_(cfg), store_(init_seed) {
    cfg_.validate();
    const std::size_t C = cfg_.base_channels, E = cfg_.num_experts, B = cfg_.ms_bands;
    ms_extractor_.emplace_back(store_, "ms_extractor", B, C, cfg_.num_resblocks);
    pan_extractor_.emplace_back(store_, "pan_extractor", 1, C, cfg_.num_resblocks);
    if (!cfg_.ablation_disable_mask) {
      mask_conv3_ = nn::Conv<T>(store_, "mask_predictor.conv3", 2 * C, C, 3);
      mask_conv1_ = nn::Conv<T>(store_, "mask_predictor.conv1", C, 2, 1);
    }
    for (std::size_t e = 0; e < E; ++e) hf_experts_.emplace_back(store_, "hf_moe.expert" + std::to_string(e), 2 * C);
    hf_gate_.emplace_back(store_, "hf_moe.gate", 2 * C, E, cfg_.detach_gate_input);
    for (std::size_t e = 0; e < E; ++e) lf_experts_.emplace_back(store_, "lf_moe.expert" + std::to_string(e), 2 * C);
    lf_gate_.emplace_back(store_, "lf_moe.gate", 2 * C, E, cfg_.detach_gate_input);
    if (cfg_.ablation_replace_mixture) {
      // Parameter-matched stand-in for the experts mixture: one wide two-layer block plus a 1x1 skip.
      replacement_conv1_ = nn::Conv<T>(store_, "fusion_block.conv1", 6 * C, E * C, 3);
      replacement_conv2_ = nn::Conv<T>(store_, "fusion_block.conv2", E * C, C, 3);
      replacement_skip_ = nn::Conv<T>(store_, "fusion_block.skip", 6 * C, C, 1);
    } else {
      for (std::size_t e = 0; e < E; ++e)
        fusion_experts_.emplace_back(store_, "fusion_moe.expert" + std::to_string(e), 6 * C, C);
      fusion_gate_.emplace_back(store_, "fusion_moe.gate", 6 * C, E, cfg_.detach_gate_input);
    }
    output_ = nn::Conv<T>(store_, "output", C, B, 1);
    if (cfg_.zero_init_output) zero_output_layer();
  }

  const NetworkConfig& config() const { return cfg_; }
  std::vector<NamedParameter<T>>& parameters() { return store_.all(); }
  const std::vector<NamedParameter<T>>& parameters() const { return store_.all(); }

  /// Zeroes the output projection so the network starts as the upsampled-LRMS identity.
  void zero_output_layer() {
    for (auto t : {output_.weight, output_.bias})
      for (auto& v : t.mutable_values()) v = T(0);
  }

  ForwardResult<T> forward(const Tensor<T>& pan, const Tensor<T>& lrms, const ForwardOptions& opt) const {
    const std::size_t f = cfg_.upsample_factor;
    const Shape ps = pan.shape(), ls = lrms.shape();
    if (ps.c != 1 || ls.c != cfg_.ms_bands || ps.n != ls.n || ls.h * f != ps.h || ls.w * f != ps.w) {
      throw ShapeError("forward: pan " + ps.str() + " and lrms " + ls.str() + " are not (N,1,H,W) and (N," +
                       std::to_string(cfg_.ms_bands) + ",H/" + std::to_string(f) + ",W/" + std::to_string(f) + ")");
    }
    const bool noise = opt.stochastic && !cfg_.eval_mode_noise_off;
    std::mt19937_64 rng(opt.seed);
    const std::size_t N = ps.n, E = cfg_.num_experts;

    ForwardResult<T> r;
    r.up_lrms = bilinear_upsample(lrms, f);
    r.f_ms = ms_extractor_[0](r.up_lrms);
    r.f_pan = pan_extractor_[0](pan);
    r.f_c = concat_channels({r.f_ms, r.f_pan});

    if (cfg_.ablation_disable_mask) {
      r.f_h = r.f_c;
      r.f_l = r.f_c;
    } else {
      r.mask_logits = mask_conv1_(relu(mask_conv3_(r.f_c)));
      Tensor<T> perturbed = r.mask_logits;
      if (noise) {
        std::vector<T> g(r.mask_logits.numel());
        for (auto& v : g) v = static_cast<T>(-std::log(-std::log(open_uniform(rng))));
        perturbed = add(perturbed, Tensor<T>::from(r.mask_logits.shape(), std::move(g)));
      }
      r.mask_soft = softmax_channels(scalar_mul(perturbed, static_cast<T>(1.0 / cfg_.gumbel_tau)));
      r.mask = opt.hard_mask ? straight_through_onehot(r.mask_soft) : r.mask_soft;
      r.f_h = mask_multiply(r.f_c, r.mask, 0);
      r.f_l = mask_multiply(r.f_c, r.mask, 1);
    }

    auto gate_noise = [&]() {
      if (!noise) return Tensor<T>{};
      std::normal_distribution<double> normal(0.0, 1.0);
      std::vector<T> eta(N * E);
      for (auto& v : eta) v = static_cast<T>(normal(rng));
      return Tensor<T>::from(Shape{N, E, 1, 1}, std::move(eta));
    };

    auto hf = moe_forward(hf_experts_, hf_gate_[0], r.f_h, cfg_.top_k, gate_noise());
    auto lf = moe_forward(lf_experts_, lf_gate_[0], r.f_l, cfg_.top_k, gate_noise());
    r.h_f = hf.output;
    r.l_f = lf.output;
    r.hf_gate = std::move(hf.gate);
    r.lf_gate = std::move(lf.gate);

    const Tensor<T> f_f = concat_channels({r.f_ms, r.f_pan, r.h_f, r.l_f});
    if (cfg_.ablation_replace_mixture) {
      r.mixture = add(replacement_conv2_(relu(replacement_conv1_(f_f))), replacement_skip_(f_f));
    } else {
      auto fused = moe_forward(fusion_experts_, fusion_gate_[0], f_f, cfg_.top_k, gate_noise());
      r.mixture = fused.output;
      r.fusion_gate = std::move(fused.gate);
    }
    r.hrms = add(output_(r.mixture), r.up_lrms);
    return r;
  }

 private:
  NetworkConfig cfg_;
  ParameterStore<T> store_;
  // Sub-modules without default constructors live in single-element vectors.
  std::vector<nn::FeatureExtractor<T>> ms_extractor_, pan_extractor_;
  nn::Conv<T> mask_conv3_, mask_conv1_;
  std::vector<nn::HinExpert<T>> hf_experts_;
  std::vector<nn::Gate<T>> hf_gate_;
  std::vector<nn::ConvExpert<T>> lf_experts_;
  std::vector<nn::Gate<T>> lf_gate_;
  std::vector<nn::FusionExpert<T>> fusion_experts_;
  std::vector<nn::Gate<T>> fusion_gate_;
  nn::Conv<T> replacement_conv1_, replacement_conv2_, replacement_skip_;
  nn::Conv<T> output_;
};

}  // namespace fame

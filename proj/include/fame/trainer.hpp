#pragma once

// Adam training loop, checkpoints and evaluation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fame/config.hpp"
#include "fame/data.hpp"
#include "fame/errors.hpp"
#include "fame/image.hpp"
#include "fame/io.hpp"
#include "fame/losses.hpp"
#include "fame/metrics.hpp"
#include "fame/model.hpp"

namespace fame {

struct AdamHyper {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update of a parameter block; `step` is 1-based.
template <class T>
void adam_update(std::span<T> p, std::span<const T> g, std::span<T> m, std::span<T> v, std::uint64_t step,
                 const AdamHyper& h) {
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double gi = static_cast<double>(g[i]);
    const double mi = h.beta1 * static_cast<double>(m[i]) + (1.0 - h.beta1) * gi;
    const double vi = h.beta2 * static_cast<double>(v[i]) + (1.0 - h.beta2) * gi * gi;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double update = h.lr * (mi / bc1) / (std::sqrt(vi / bc2) + h.eps);
    p[i] = static_cast<T>(static_cast<double>(p[i]) - update);
  }
}

template <class T>
struct AdamState {
  std::vector<std::vector<T>> m, v;
  std::uint64_t step = 0;

  void init(const std::vector<NamedParameter<T>>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p.tensor.numel(), T(0));
      v.emplace_back(p.tensor.numel(), T(0));
    }
    step = 0;
  }
};

/// Applies Adam to every parameter using its accumulated gradient (missing gradients count as zero).
/// `clip` > 0 rescales the gradients to at most that global L2 norm.
template <class T>
void adam_step(std::vector<NamedParameter<T>>& params, AdamState<T>& state, const AdamHyper& h, double clip = 0.0) {
  if (state.m.size() != params.size()) state.init(params);
  double norm2 = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw NumericError("non-finite gradient in parameter '" + p.name + "'");
      }
      norm2 += static_cast<double>(g) * static_cast<double>(g);
    }
  }
  const double scale = (clip > 0.0 && std::sqrt(norm2) > clip) ? clip / std::sqrt(norm2) : 1.0;
  ++state.step;
  std::vector<T> g;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& t = params[i].tensor;
    g.assign(t.numel(), T(0));
    if (t.has_grad()) {
      const auto src = t.grad();
      for (std::size_t j = 0; j < g.size(); ++j) g[j] = static_cast<T>(static_cast<double>(src[j]) * scale);
    }
    adam_update<T>(t.mutable_values(), g, state.m[i], state.v[i], state.step, h);
  }
}

template <class T>
struct Batch {
  Tensor<T> pan, lrms, gt, labels;
};

template <class T>
Batch<T> make_batch(const std::vector<SamplePair>& data, std::span<const std::size_t> indices) {
  std::vector<Image> pan, lrms, gt;
  std::vector<const MaskLabel*> labels;
  for (std::size_t i : indices) {
    const SamplePair& s = data.at(i);
    pan.push_back(s.pan);
    lrms.push_back(s.lrms);
    gt.push_back(s.gt);
    labels.push_back(&s.mask);
  }
  return {to_tensor<T>(std::span<const Image>(pan)), to_tensor<T>(std::span<const Image>(lrms)),
          to_tensor<T>(std::span<const Image>(gt)), mask_label_tensor<T>(labels)};
}

struct StepLog {
  std::size_t epoch = 0, step = 0;
  LossBreakdown loss;
  std::vector<std::size_t> hf_hist, lf_hist, fusion_hist;
  double mask_coverage = std::numeric_limits<double>::quiet_NaN();
  // Batch-importance SCV per bank; NaN for an ablated bank.
  double scv_hf = 0, scv_lf = 0, scv_fusion = std::numeric_limits<double>::quiet_NaN();
};

inline std::string log_header(std::size_t experts) {
  std::string h = "epoch,step,rec,mask,load,alpha_effective,total";
  for (const char* bank : {"hf", "lf", "fusion"})
    for (std::size_t e = 0; e < experts; ++e) h += std::string(",") + bank + "_e" + std::to_string(e);
  return h + ",mask_coverage,scv_hf,scv_lf,scv_fusion";
}

inline std::string log_line(const StepLog& s) {
  std::string l = std::to_string(s.epoch) + "," + std::to_string(s.step);
  for (double v : {s.loss.rec, s.loss.mask, s.loss.load, s.loss.alpha_effective, s.loss.total})
    l += "," + format_number(v);
  for (const auto* hist : {&s.hf_hist, &s.lf_hist, &s.fusion_hist})
    for (std::size_t c : *hist) l += "," + std::to_string(c);
  for (double v : {s.mask_coverage, s.scv_hf, s.scv_lf, s.scv_fusion})
    l += "," + (std::isnan(v) ? std::string("nan") : format_number(v));
  return l;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

namespace detail {

template <class T>
std::vector<std::size_t> selection_histogram(const GateOutput<T>& g, std::size_t experts) {
  std::vector<std::size_t> h(experts, 0);
  for (const auto& sel : g.selected)
    for (std::size_t e : sel) ++h[e];
  return h;
}

inline Image param_image(const Shape& s) { return Image(s.n, s.c, s.h * s.w); }

}  // namespace detail

inline constexpr const char* kEmergencyCheckpoint = "emergency.fame";
inline constexpr const char* kTrainLog = "train_log.csv";

/// Single-context training run; owns the network, the optimizer and the shuffling stream.
class Trainer {
 public:
  explicit Trainer(const RunConfig& cfg)
      : cfg_(cfg), net_(cfg.network, splitmix64(cfg.train.seed)), shuffle_rng_(splitmix64(cfg.train.seed + 1)) {
    cfg_.validate();
    adam_.init(net_.parameters());
  }

  const RunConfig& config() const { return cfg_; }
  FameNet<float>& net() { return net_; }
  const FameNet<float>& net() const { return net_; }
  std::size_t epoch() const { return epoch_; }
  std::size_t step() const { return step_; }
  const std::vector<StepLog>& log() const { return log_; }
  const AdamState<float>& adam() const { return adam_; }

  /// Trains from the current epoch to cfg.epochs. With a non-empty `out_dir` the CSV log is streamed
  /// to train_log.csv, periodic checkpoints are written, and a non-finite loss leaves emergency.fame.
  void run(const std::vector<SamplePair>& data, const std::filesystem::path& out_dir = {},
           const std::function<void(const StepLog&)>& on_step = {}) {
    if (data.empty()) throw ContractError("train: empty dataset");
    std::ofstream csv;
    if (!out_dir.empty()) {
      std::filesystem::create_directories(out_dir);
      const bool fresh = step_ == 0;
      csv.open(out_dir / kTrainLog, fresh ? std::ios::trunc : std::ios::app);
      if (!csv) throw IoError("cannot open " + (out_dir / kTrainLog).string());
      if (fresh) csv << log_header(cfg_.network.num_experts) << "\n";
    }
    const AdamHyper hyper{cfg_.train.lr, cfg_.train.adam_beta1, cfg_.train.adam_beta2, cfg_.train.adam_eps};
    std::vector<std::size_t> order(data.size());
    for (; epoch_ < cfg_.train.epochs; ++epoch_) {
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      std::shuffle(order.begin(), order.end(), shuffle_rng_);
      for (std::size_t b = 0; b < order.size(); b += cfg_.train.batch_size) {
        const std::size_t end = std::min(order.size(), b + cfg_.train.batch_size);
        const auto batch = make_batch<float>(data, std::span<const std::size_t>(order.data() + b, end - b));
        StepLog rec;
        try {
          rec = train_step(batch);
          adam_step(net_.parameters(), adam_, hyper, cfg_.train.grad_clip);
        } catch (const NumericError& e) {
          emergency(out_dir, e.what());
        }
        ++step_;
        log_.push_back(rec);
        if (csv) csv << log_line(rec) << "\n" << std::flush;
        if (on_step) on_step(rec);
      }
      const std::size_t done = epoch_ + 1;
      if (!out_dir.empty() && cfg_.train.checkpoint_every > 0 && done % cfg_.train.checkpoint_every == 0 &&
          done < cfg_.train.epochs) {
        write_container(out_dir / ("checkpoint_epoch" + std::to_string(done) + ".fame"), checkpoint_at(done));
      }
    }
  }

  /// Parameters, Adam moments, progress counters, shuffle stream and the resolved configuration.
  Container checkpoint() const { return checkpoint_at(epoch_); }

  /// Resumes from a checkpoint written with the same network configuration.
  void restore(const Container& c) {
    load_parameters(c, net_);
    for (std::size_t i = 0; i < net_.parameters().size(); ++i) {
      const auto& name = net_.parameters()[i].name;
      const auto& m = c.array("adam_m/" + name).data;
      const auto& v = c.array("adam_v/" + name).data;
      if (m.size() != adam_.m[i].size() || v.size() != adam_.v[i].size()) {
        throw FormatError("optimizer state size mismatch for '" + name + "'", 0);
      }
      std::copy(m.begin(), m.end(), adam_.m[i].begin());
      std::copy(v.begin(), v.end(), adam_.v[i].begin());
    }
    epoch_ = std::stoull(c.meta("epoch"));
    step_ = std::stoull(c.meta("step"));
    adam_.step = std::stoull(c.meta("adam_step"));
    std::istringstream rng(c.meta("rng"));
    rng >> shuffle_rng_;
    if (!rng) throw FormatError("unreadable rng state in checkpoint", 0);
  }

  /// Checks a checkpoint's fingerprint and parameter-name table against a live network, then copies
  /// the parameters in.
  template <class T>
  static void load_parameters(const Container& c, FameNet<T>& net) {
    if (c.meta("kind") != "checkpoint") throw FormatError("container is not a checkpoint", 0);
    const std::string want = fingerprint(net.config());
    if (c.meta("fingerprint") != want) {
      throw ConfigError("checkpoint fingerprint " + c.meta("fingerprint") + " does not match network fingerprint " +
                        want);
    }
    std::size_t stored = 0;
    for (const auto& a : c.arrays) stored += a.name.rfind("param/", 0) == 0;
    if (stored != net.parameters().size()) {
      throw FormatError("checkpoint holds " + std::to_string(stored) + " parameters, network has " +
                            std::to_string(net.parameters().size()),
                        0);
    }
    for (auto& p : net.parameters()) {
      const Image* img = c.find("param/" + p.name);
      if (!img) throw FormatError("checkpoint lacks parameter '" + p.name + "'", 0);
      const Image want_shape = detail::param_image(p.tensor.shape());
      if (img->bands != want_shape.bands || img->h != want_shape.h || img->w != want_shape.w) {
        throw FormatError("parameter '" + p.name + "' has the wrong shape in the checkpoint", 0);
      }
      auto dst = p.tensor.mutable_values();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(img->data[i]);
    }
  }

 private:
  Container checkpoint_at(std::size_t next_epoch) const {
    Container c;
    c.set("kind", "checkpoint");
    c.set("fingerprint", fingerprint(cfg_.network));
    c.set("epoch", std::to_string(next_epoch));
    c.set("step", std::to_string(step_));
    c.set("adam_step", std::to_string(adam_.step));
    std::ostringstream rng;
    rng << shuffle_rng_;
    c.set("rng", rng.str());
    for (const auto& k : detail::config_keys()) c.set("config." + k.name, k.get(cfg_));
    const auto& params = net_.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& p = params[i];
      Image img = detail::param_image(p.tensor.shape());
      std::copy(p.tensor.values().begin(), p.tensor.values().end(), img.data.begin());
      c.arrays.push_back({"param/" + p.name, img});
      std::copy(adam_.m[i].begin(), adam_.m[i].end(), img.data.begin());
      c.arrays.push_back({"adam_m/" + p.name, img});
      std::copy(adam_.v[i].begin(), adam_.v[i].end(), img.data.begin());
      c.arrays.push_back({"adam_v/" + p.name, img});
    }
    return c;
  }

  StepLog train_step(const Batch<float>& batch) {
    for (auto& p : net_.parameters()) p.tensor.zero_grad();
    Tape<float> tape;
    auto scope = tape.activate();
    const ForwardOptions opt{splitmix64(cfg_.train.seed ^ (0xa0761d6478bd642full * (step_ + 1))), true, true};
    const auto fwd = net_.forward(batch.pan, batch.lrms, opt);
    const auto loss = total_loss(fwd, batch.gt, batch.labels, epoch_, cfg_.train.loss);
    if (!std::isfinite(loss.breakdown.total)) throw NumericError("non-finite training loss");
    tape.backward(loss.total);

    StepLog rec;
    rec.epoch = epoch_;
    rec.step = step_;
    rec.loss = loss.breakdown;
    const std::size_t E = cfg_.network.num_experts;
    rec.hf_hist = detail::selection_histogram(fwd.hf_gate, E);
    rec.lf_hist = detail::selection_histogram(fwd.lf_gate, E);
    rec.fusion_hist = fwd.fusion_gate.weights.defined() ? detail::selection_histogram(fwd.fusion_gate, E)
                                                        : std::vector<std::size_t>(E, 0);
    auto importance_scv = [](const GateOutput<float>& g) {
      return static_cast<double>(scv(g.importance().detach()).item());
    };
    rec.scv_hf = importance_scv(fwd.hf_gate);
    rec.scv_lf = importance_scv(fwd.lf_gate);
    if (fwd.fusion_gate.weights.defined()) rec.scv_fusion = importance_scv(fwd.fusion_gate);
    if (fwd.mask.defined()) {
      const std::size_t plane = fwd.mask.shape().plane();
      double high = 0;
      for (std::size_t n = 0; n < fwd.mask.shape().n; ++n)
        for (std::size_t i = 0; i < plane; ++i) high += fwd.mask.values()[(2 * n) * plane + i];
      rec.mask_coverage = high / static_cast<double>(fwd.mask.shape().n * plane);
    }
    return rec;
  }

  [[noreturn]] void emergency(const std::filesystem::path& out_dir, const std::string& why) {
    std::string where;
    if (!out_dir.empty()) {
      write_container(out_dir / kEmergencyCheckpoint, checkpoint());
      where = "; emergency checkpoint written to " + (out_dir / kEmergencyCheckpoint).string();
    }
    throw NumericError("training aborted at epoch " + std::to_string(epoch_) + " step " + std::to_string(step_) +
                       ": " + why + where);
  }

  RunConfig cfg_;
  FameNet<float> net_;
  AdamState<float> adam_;
  std::mt19937_64 shuffle_rng_;
  std::size_t epoch_ = 0, step_ = 0;
  std::vector<StepLog> log_;
};

/// Rebuilds the run configuration stored in a checkpoint.
inline RunConfig checkpoint_config(const Container& c) {
  RunConfig cfg;
  for (const auto& [key, value] : c.metadata)
    if (key.rfind("config.", 0) == 0) set_config_value(cfg, key.substr(7), value);
  cfg.train.loss.total_epochs = cfg.train.epochs;
  cfg.validate();
  return cfg;
}

struct EvalResult {
  std::vector<MetricReport> per_sample;
  MetricReport mean;
  // Batch-importance SCV over the whole evaluation set; NaN for an ablated bank.
  double scv_hf = 0, scv_lf = 0, scv_fusion = std::numeric_limits<double>::quiet_NaN();
};

/// Noise-free inference on one sample.
template <class T>
ForwardResult<T> infer(const FameNet<T>& net, const SamplePair& s) {
  return net.forward(to_tensor<T>(s.pan), to_tensor<T>(s.lrms), ForwardOptions{0, false, true});
}

/// Reduced-resolution metrics against gt, or with `full_resolution` the no-reference suite.
template <class T>
EvalResult evaluate(const FameNet<T>& net, const std::vector<SamplePair>& data, bool full_resolution = false) {
  if (data.empty()) throw ContractError("evaluate: empty dataset");
  EvalResult out;
  const std::size_t E = net.config().num_experts;
  std::vector<double> imp_hf(E, 0.0), imp_lf(E, 0.0), imp_fu(E, 0.0);
  auto accumulate = [E](std::vector<double>& acc, const GateOutput<T>& g) {
    for (std::size_t e = 0; e < E; ++e) acc[e] += static_cast<double>(g.weights.values()[e]);
  };
  for (const auto& s : data) {
    const auto fwd = infer(net, s);
    const Image fused = to_image<float>(fwd.hrms);
    out.per_sample.push_back(full_resolution ? no_reference_metrics(fused, s.lrms, s.pan)
                                             : reference_metrics(fused, s.gt, s.factor));
    accumulate(imp_hf, fwd.hf_gate);
    accumulate(imp_lf, fwd.lf_gate);
    if (fwd.fusion_gate.weights.defined()) accumulate(imp_fu, fwd.fusion_gate);
  }
  out.mean = mean_report(out.per_sample);
  auto scv_of = [E](const std::vector<double>& v) {
    return scv(Tensor<double>::from(Shape{1, E, 1, 1}, v)).item();
  };
  out.scv_hf = scv_of(imp_hf);
  out.scv_lf = scv_of(imp_lf);
  if (!net.config().ablation_replace_mixture) out.scv_fusion = scv_of(imp_fu);
  return out;
}

}  // namespace fame

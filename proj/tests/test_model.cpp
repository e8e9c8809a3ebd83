#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <set>

#include "fame/grad_check.hpp"
#include "fame/losses.hpp"
#include "fame/model.hpp"
#include "test_support.hpp"

using fame::ForwardOptions;
using fame::NetworkConfig;
using fame::Shape;
using fame::Tape;
using fame::Tensor;
using testing::random_tensor;

namespace {

NetworkConfig tiny_config(std::size_t channels = 4) {
  NetworkConfig cfg;
  cfg.base_channels = channels;
  cfg.num_resblocks = 1;
  cfg.zero_init_output = false;
  cfg.detach_gate_input = false;
  return cfg;
}

template <class T>
void require_gate_contract(const fame::GateOutput<T>& g, std::size_t k) {
  const Shape s = g.weights.shape();
  for (std::size_t n = 0; n < s.n; ++n) {
    std::size_t nonzero = 0;
    double total = 0;
    for (std::size_t e = 0; e < s.c; ++e) {
      const double w = g.weights.at(n, e, 0, 0);
      REQUIRE(w >= 0.0);
      if (w != 0.0) ++nonzero;
      total += w;
    }
    REQUIRE(nonzero == k);
    REQUIRE(std::abs(total - 1.0) <= 1e-6);
  }
}

}  // namespace

TEST_CASE("config validation rejects bad expert counts and factors") {
  NetworkConfig cfg;
  cfg.top_k = 5;
  REQUIRE_THROWS_AS(cfg.validate(), fame::ConfigError);
  cfg = {};
  cfg.upsample_factor = 3;
  REQUIRE_THROWS_AS(cfg.validate(), fame::ConfigError);
  cfg = {};
  cfg.gumbel_tau = 0.0;
  REQUIRE_THROWS_AS(cfg.validate(), fame::ContractError);
  REQUIRE_NOTHROW(NetworkConfig{}.validate());
}

TEST_CASE("patch geometry 32x32 LRMS and 128x128 PAN gives a 128x128 HRMS") {
  fame::FameNet<float> net(tiny_config(), 1);
  auto pan = random_tensor<float>(Shape{1, 1, 128, 128}, 2, 0, 1);
  auto lrms = random_tensor<float>(Shape{1, 4, 32, 32}, 3, 0, 1);
  auto r = net.forward(pan, lrms, ForwardOptions{7, true, true});
  REQUIRE(r.hrms.shape() == Shape{1, 4, 128, 128});
  REQUIRE(r.f_c.shape() == Shape{1, 8, 128, 128});
  REQUIRE(r.h_f.shape() == r.f_c.shape());
  REQUIRE(r.l_f.shape() == r.f_c.shape());
  REQUIRE(r.mask.shape() == Shape{1, 2, 128, 128});
}

TEST_CASE("forward rejects mismatched pan and lrms geometry") {
  fame::FameNet<float> net(tiny_config(), 1);
  auto pan = random_tensor<float>(Shape{1, 1, 16, 16}, 2);
  auto lrms = random_tensor<float>(Shape{1, 4, 3, 4}, 3);
  REQUIRE_THROWS_AS(net.forward(pan, lrms, {}), fame::ShapeError);
  auto wrong_bands = random_tensor<float>(Shape{1, 3, 4, 4}, 3);
  REQUIRE_THROWS_AS(net.forward(pan, wrong_bands, {}), fame::ShapeError);
}

TEST_CASE("zero-initialized output layer returns the upsampled LRMS exactly") {
  fame::FameNet<float> net(tiny_config(), 5);
  net.zero_output_layer();
  auto pan = random_tensor<float>(Shape{2, 1, 16, 16}, 2, 0, 1);
  auto lrms = random_tensor<float>(Shape{2, 4, 4, 4}, 3, 0, 1);
  auto r = net.forward(pan, lrms, ForwardOptions{1, true, true});
  const auto up = fame::bilinear_upsample(lrms, 4);
  REQUIRE(std::equal(r.hrms.values().begin(), r.hrms.values().end(), up.values().begin()));
}

TEST_CASE("routing invariants hold over random forwards") {
  fame::FameNet<double> net(tiny_config(3), 11);
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    auto pan = random_tensor<double>(Shape{3, 1, 8, 8}, 100 + trial, 0, 1);
    auto lrms = random_tensor<double>(Shape{3, 4, 2, 2}, 200 + trial, 0, 1);
    auto r = net.forward(pan, lrms, ForwardOptions{trial, true, true});
    for (std::size_t i = 0; i < r.mask.numel() / 2; ++i) {
      const std::size_t n = i / 64, p = i % 64;
      const double hi = r.mask.values()[(2 * n) * 64 + p], lo = r.mask.values()[(2 * n + 1) * 64 + p];
      REQUIRE(((hi == 1.0 && lo == 0.0) || (hi == 0.0 && lo == 1.0)));
    }
    auto fsum = fame::add(r.f_h, r.f_l);
    REQUIRE(std::equal(fsum.values().begin(), fsum.values().end(), r.f_c.values().begin()));
    require_gate_contract(r.hf_gate, 2);
    require_gate_contract(r.lf_gate, 2);
    require_gate_contract(r.fusion_gate, 2);
  }
}

TEST_CASE("noise-free forwards are bit-identical") {
  auto cfg = tiny_config();
  cfg.eval_mode_noise_off = true;
  fame::FameNet<float> net(cfg, 3);
  auto pan = random_tensor<float>(Shape{2, 1, 16, 16}, 2, 0, 1);
  auto lrms = random_tensor<float>(Shape{2, 4, 4, 4}, 3, 0, 1);
  auto a = net.forward(pan, lrms, ForwardOptions{9, true, true});
  auto b = net.forward(pan, lrms, ForwardOptions{9, true, true});
  REQUIRE(std::equal(a.hrms.values().begin(), a.hrms.values().end(), b.hrms.values().begin()));
  // Stochastic forwards with different seeds are allowed to differ; identical seeds must not.
  fame::FameNet<float> noisy(tiny_config(), 3);
  auto c = noisy.forward(pan, lrms, ForwardOptions{9, true, true});
  auto d = noisy.forward(pan, lrms, ForwardOptions{9, true, true});
  REQUIRE(std::equal(c.hrms.values().begin(), c.hrms.values().end(), d.hrms.values().begin()));
}

TEST_CASE("identical parameter seeds give identical parameters") {
  fame::FameNet<float> a(tiny_config(), 42), b(tiny_config(), 42), c(tiny_config(), 43);
  REQUIRE(a.parameters().size() == b.parameters().size());
  bool any_diff = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    auto va = a.parameters()[i].tensor.values(), vb = b.parameters()[i].tensor.values();
    auto vc = c.parameters()[i].tensor.values();
    REQUIRE(a.parameters()[i].name == b.parameters()[i].name);
    REQUIRE(std::equal(va.begin(), va.end(), vb.begin()));
    any_diff = any_diff || !std::equal(va.begin(), va.end(), vc.begin());
  }
  REQUIRE(any_diff);
}

TEST_CASE("parameter names are unique") {
  for (bool no_mask : {false, true})
    for (bool no_mix : {false, true}) {
      auto cfg = tiny_config();
      cfg.ablation_disable_mask = no_mask;
      cfg.ablation_replace_mixture = no_mix;
      fame::FameNet<float> net(cfg, 1);
      std::set<std::string> names;
      for (const auto& p : net.parameters()) names.insert(p.name);
      REQUIRE(names.size() == net.parameters().size());
      const bool has_mask = names.count("mask_predictor.conv3.weight") > 0;
      REQUIRE(has_mask == !no_mask);
      REQUIRE((names.count("fusion_moe.gate.a2") > 0) == !no_mix);
    }
}

TEST_CASE("replacement block is parameter-matched to the experts mixture within 10 percent") {
  auto count = [](const NetworkConfig& cfg) {
    fame::FameNet<float> net(cfg, 1);
    std::size_t mix = 0;
    for (const auto& p : net.parameters())
      if (p.name.rfind("fusion_", 0) == 0) mix += p.tensor.numel();
    return static_cast<double>(mix);
  };
  auto cfg = tiny_config(16);
  const double full = count(cfg);
  cfg.ablation_replace_mixture = true;
  const double replaced = count(cfg);
  REQUIRE(std::abs(replaced - full) / full < 0.1);
}

TEST_CASE("gate example: V = [3, 1, 2, 0] with noise off") {
  // Constant single-channel input: GAP + GMP = 2, so A2 = V / 2 reproduces the logits.
  fame::ParameterStore<double> store(1);
  fame::nn::Gate<double> gate(store, "g", 1, 4);
  auto a2 = gate.a2.mutable_values();
  const double v[] = {3, 1, 2, 0};
  for (int i = 0; i < 4; ++i) a2[i] = v[i] / 2;
  auto x = Tensor<double>::full(Shape{1, 1, 4, 4}, 1.0);
  std::vector<fame::nn::ConvExpert<double>> experts;
  for (int i = 0; i < 4; ++i) experts.emplace_back(store, "e" + std::to_string(i), 1);
  auto out = fame::moe_forward(experts, gate, x, 2, Tensor<double>{});
  const double e = std::exp(1.0);
  REQUIRE(out.gate.weights.values()[0] == Catch::Approx(e / (e + 1)).epsilon(1e-12));
  REQUIRE(out.gate.weights.values()[1] == 0.0);
  REQUIRE(out.gate.weights.values()[2] == Catch::Approx(1 / (e + 1)).epsilon(1e-12));
  REQUIRE(out.gate.weights.values()[3] == 0.0);
  REQUIRE(std::abs(out.gate.weights.values()[0] - 0.7311) < 1e-4);
}

TEST_CASE("k = N with equal logits averages the experts") {
  fame::ParameterStore<double> store(3);
  fame::nn::Gate<double> gate(store, "g", 2, 4);
  for (auto& v : gate.a2.mutable_values()) v = 0.0;
  std::vector<fame::nn::ConvExpert<double>> experts;
  for (int i = 0; i < 4; ++i) experts.emplace_back(store, "e" + std::to_string(i), 2);
  auto x = random_tensor<double>(Shape{3, 2, 5, 5}, 8);
  auto out = fame::moe_forward(experts, gate, x, 4, Tensor<double>{});
  std::vector<double> avg(out.output.numel(), 0.0);
  for (const auto& ex : experts) {
    auto y = ex(x);
    for (std::size_t i = 0; i < avg.size(); ++i) avg[i] += y.values()[i] / 4.0;
  }
  for (std::size_t i = 0; i < avg.size(); ++i) REQUIRE(std::abs(out.output.values()[i] - avg[i]) <= 1e-6);

  // Identical experts: the mixture equals the single-expert output.
  std::vector<fame::nn::ConvExpert<double>> same(4, experts[0]);
  auto out_same = fame::moe_forward(same, gate, x, 4, Tensor<double>{});
  auto single = same[0](x);
  for (std::size_t i = 0; i < avg.size(); ++i)
    REQUIRE(std::abs(out_same.output.values()[i] - single.values()[i]) <= 1e-12);
}

TEST_CASE("moe skips unselected experts and routes per sample") {
  fame::ParameterStore<double> store(3);
  fame::nn::Gate<double> gate(store, "g", 2, 4);
  std::vector<fame::nn::ConvExpert<double>> experts;
  for (int i = 0; i < 4; ++i) experts.emplace_back(store, "e" + std::to_string(i), 2);
  auto x = random_tensor<double>(Shape{4, 2, 5, 5}, 8);
  auto out = fame::moe_forward(experts, gate, x, 1, Tensor<double>{});
  for (std::size_t n = 0; n < 4; ++n) {
    auto one = fame::gather_batch(x, std::vector<std::size_t>{n});
    auto ref = experts[out.gate.selected[n][0]](one);
    for (std::size_t i = 0; i < ref.numel(); ++i)
      REQUIRE(std::abs(out.output.values()[n * ref.numel() + i] - ref.values()[i]) <= 1e-12);
  }
}

TEST_CASE("extreme mask logits with no noise pick the high channel") {
  auto p = Tensor<double>::from(Shape{1, 2, 1, 1}, {10.0, -10.0});
  auto m = fame::straight_through_onehot(fame::softmax_channels(p));
  REQUIRE(m.values()[0] == 1.0);
  REQUIRE(m.values()[1] == 0.0);
}

TEST_CASE("straight-through mask gradient equals the soft-path gradient") {
  // A loss linear in the mask has the same gradient w.r.t. P whether M is hard or soft.
  auto p = random_tensor<double>(Shape{2, 2, 3, 3}, 21);
  auto c = random_tensor<double>(Shape{2, 2, 3, 3}, 22);
  auto grad_through = [&](bool hard) {
    Tape<double> tape;
    auto scope = tape.activate();
    auto pp = Tensor<double>::from(p.shape(), std::vector<double>(p.values().begin(), p.values().end()), true);
    auto z = fame::softmax_channels(pp);
    auto m = hard ? fame::straight_through_onehot(z) : z;
    tape.backward(fame::sum(fame::mul(m, c)));
    return std::vector<double>(pp.grad().begin(), pp.grad().end());
  };
  REQUIRE(grad_through(true) == grad_through(false));
  auto soft = [&](const Tensor<double>& x) { return fame::sum(fame::mul(fame::softmax_channels(x), c)); };
  REQUIRE(fame::grad_check(soft, p, 1e-4).passed);
}

TEST_CASE("ablated mask feeds F_c to both expert banks") {
  auto cfg = tiny_config();
  cfg.ablation_disable_mask = true;
  fame::FameNet<float> net(cfg, 2);
  auto pan = random_tensor<float>(Shape{1, 1, 8, 8}, 2);
  auto lrms = random_tensor<float>(Shape{1, 4, 2, 2}, 3);
  auto r = net.forward(pan, lrms, {});
  REQUIRE_FALSE(r.mask.defined());
  REQUIRE(r.f_h.id() == r.f_c.id());
  REQUIRE(r.f_l.id() == r.f_c.id());
}

TEST_CASE("backward reaches every parameter of every routed expert") {
  fame::FameNet<float> net(tiny_config(), 17);
  auto pan = random_tensor<float>(Shape{4, 1, 16, 16}, 2, 0, 1);
  auto lrms = random_tensor<float>(Shape{4, 4, 4, 4}, 3, 0, 1);
  auto gt = random_tensor<float>(Shape{4, 4, 16, 16}, 4, 0, 1);
  auto labels = random_tensor<float>(Shape{4, 1, 16, 16}, 5, 0, 1);
  std::vector<float> lab(4 * 2 * 256);
  for (std::size_t n = 0; n < 4; ++n)
    for (std::size_t i = 0; i < 256; ++i) {
      const float hi = labels.values()[n * 256 + i] > 0.5f ? 1.0f : 0.0f;
      lab[(2 * n) * 256 + i] = hi;
      lab[(2 * n + 1) * 256 + i] = 1.0f - hi;
    }
  auto label_tensor = Tensor<float>::from(Shape{4, 2, 16, 16}, lab);
  fame::LossWeights w;
  w.total_epochs = 10;
  for (std::uint64_t step = 0; step < 5; ++step) {
    for (auto& p : net.parameters()) p.tensor.zero_grad();
    Tape<float> tape;
    auto scope = tape.activate();
    auto r = net.forward(pan, lrms, ForwardOptions{step, true, true});
    auto loss = fame::total_loss(r, gt, label_tensor, 0, w);
    tape.backward(loss.total);
    std::set<std::string> routed;
    auto mark = [&](const fame::GateOutput<float>& g, const std::string& bank) {
      for (const auto& sel : g.selected)
        for (auto e : sel) routed.insert(bank + ".expert" + std::to_string(e) + ".");
    };
    mark(r.hf_gate, "hf_moe");
    mark(r.lf_gate, "lf_moe");
    mark(r.fusion_gate, "fusion_moe");
    for (const auto& p : net.parameters()) {
      const bool is_expert = p.name.find(".expert") != std::string::npos;
      bool expected = !is_expert;
      for (const auto& prefix : routed) expected = expected || p.name.rfind(prefix, 0) == 0;
      INFO(p.name);
      const bool got = p.tensor.has_grad() && std::any_of(p.tensor.grad().begin(), p.tensor.grad().end(),
                                                          [](float g) { return g != 0.0f; });
      REQUIRE(got == expected);
    }
  }
}

TEST_CASE("full objective passes a finite-difference check on a tiny network") {
  auto cfg = tiny_config(2);
  fame::FameNet<double> net(cfg, 29);
  auto pan = random_tensor<double>(Shape{2, 1, 8, 8}, 31, 0, 1);
  auto lrms = random_tensor<double>(Shape{2, 4, 2, 2}, 32, 0, 1);
  auto gt = random_tensor<double>(Shape{2, 4, 8, 8}, 33, 0, 1);
  std::vector<double> lab(2 * 2 * 64);
  for (std::size_t i = 0; i < 2 * 64; ++i) {
    const double hi = (i % 3 == 0) ? 1.0 : 0.0;
    lab[(i / 64) * 128 + i % 64] = hi;
    lab[(i / 64) * 128 + 64 + i % 64] = 1.0 - hi;
  }
  auto labels = Tensor<double>::from(Shape{2, 2, 8, 8}, lab);
  fame::LossWeights w;
  w.alpha_initial = 0.5;  // large enough that the mask term is visible in the check
  w.total_epochs = 10;

  // Check gradients w.r.t. the inputs and a representative subset of parameters.
  std::vector<Tensor<double>> inputs{pan, lrms};
  for (auto& p : net.parameters())
    if (p.name == "mask_predictor.conv1.weight" || p.name == "hf_moe.gate.a2" || p.name == "lf_moe.gate.a1" ||
        p.name == "fusion_moe.expert0.conv2.bias" || p.name == "output.weight" ||
        p.name == "pan_extractor.head.weight")
      inputs.push_back(p.tensor);
  REQUIRE(inputs.size() == 8);

  auto f = [&](const std::vector<Tensor<double>>& xs) {
    auto r = net.forward(xs[0], xs[1], ForwardOptions{3, true, false});
    return fame::total_loss(r, gt, labels, 1, w).total;
  };
  const auto report = fame::grad_check(f, inputs, 1e-4);
  for (auto& p : net.parameters()) p.tensor.set_requires_grad(true);
  INFO("max relative error " << report.max_relative_error << " input " << report.worst_input << " index "
                             << report.worst_index);
  REQUIRE(report.deterministic);
  REQUIRE(report.passed);
}

TEST_CASE("detached gate input keeps the load loss off the feature extractors") {
  for (bool detach : {true, false}) {
    auto cfg = tiny_config();
    cfg.detach_gate_input = detach;
    fame::FameNet<float> net(cfg, 8);
    auto pan = random_tensor<float>(Shape{2, 1, 16, 16}, 2, 0, 1);
    auto lrms = random_tensor<float>(Shape{2, 4, 4, 4}, 3, 0, 1);
    Tape<float> tape;
    auto scope = tape.activate();
    auto r = net.forward(pan, lrms, ForwardOptions{1, true, true});
    tape.backward(fame::load_loss({r.hf_gate.importance(), r.lf_gate.importance(), r.fusion_gate.importance()}));
    bool extractor_grad = false;
    for (const auto& p : net.parameters())
      if (p.name.rfind("ms_extractor.", 0) == 0 && p.tensor.has_grad())
        for (float g : p.tensor.grad()) extractor_grad = extractor_grad || g != 0.0f;
    INFO("detach " << detach);
    REQUIRE(extractor_grad == !detach);
  }
}

#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "fame/grad_check.hpp"
#include "fame/losses.hpp"
#include "test_support.hpp"

using fame::Shape;
using fame::Tape;
using fame::Tensor;
using testing::random_tensor;

namespace {

// Brute-force (sigma / mean)^2 with population variance.
double scv_oracle(const std::vector<double>& w) {
  double mean = 0;
  for (double v : w) mean += v;
  mean /= static_cast<double>(w.size());
  double var = 0;
  for (double v : w) var += (v - mean) * (v - mean);
  var /= static_cast<double>(w.size());
  return var / (mean * mean);
}

Tensor<double> row(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor<double>::from(Shape{1, n, 1, 1}, std::move(v));
}

}  // namespace

TEST_CASE("reconstruction loss values and gradient") {
  auto g = random_tensor<double>(Shape{2, 3, 4, 4}, 1);
  REQUIRE(fame::reconstruction_loss(g, g).item() == 0.0);
  std::vector<double> shifted(g.values().begin(), g.values().end());
  for (auto& v : shifted) v += 1.0;
  auto y = Tensor<double>::from(g.shape(), shifted, true);
  REQUIRE(fame::reconstruction_loss(y, g).item() == Catch::Approx(1.0).epsilon(1e-12));

  auto x = random_tensor<double>(g.shape(), 2);
  auto xg = Tensor<double>::from(x.shape(), std::vector<double>(x.values().begin(), x.values().end()), true);
  Tape<double> tape;
  auto scope = tape.activate();
  tape.backward(fame::reconstruction_loss(xg, g));
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double d = x.values()[i] - g.values()[i];
    const double expect = (d > 0 ? 1.0 : -1.0) / static_cast<double>(x.numel());
    REQUIRE(xg.grad()[i] == Catch::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("mask loss examples") {
  std::vector<double> m{1, 0, 1, 0, 0, 1, 0, 1};  // 1x2x2x2: high then low plane
  auto mask = Tensor<double>::from(Shape{1, 2, 2, 2}, m);
  REQUIRE(fame::mask_loss(mask, mask).item() == 0.0);
  std::vector<double> inv(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) inv[i] = 1 - m[i];
  REQUIRE(fame::mask_loss(mask, Tensor<double>::from(mask.shape(), inv)).item() == 1.0);
  std::vector<double> half = m;  // flip pixels 0 and 1
  for (std::size_t p : {0u, 1u}) {
    half[p] = 1 - half[p];
    half[4 + p] = 1 - half[4 + p];
  }
  REQUIRE(fame::mask_loss(mask, Tensor<double>::from(mask.shape(), half)).item() == 0.5);
  REQUIRE_THROWS_AS(fame::mask_loss(mask, Tensor<double>::zeros(Shape{1, 2, 2, 3})), fame::ShapeError);
}

TEST_CASE("mask labels stack into high and low channels") {
  fame::MaskLabel a, b;
  a.h = b.h = 1;
  a.w = b.w = 2;
  a.high = {1, 0};
  a.low = {0, 1};
  b.high = {0, 0};
  b.low = {1, 1};
  const fame::MaskLabel* labels[] = {&a, &b};
  auto t = fame::mask_label_tensor<float>(labels);
  REQUIRE(t.shape() == Shape{2, 2, 1, 2});
  const std::vector<float> expect{1, 0, 0, 1, 0, 0, 1, 1};
  REQUIRE(std::vector<float>(t.values().begin(), t.values().end()) == expect);
}

TEST_CASE("scv examples") {
  REQUIRE(fame::scv(row({0.25, 0.25, 0.25, 0.25})).item() == 0.0);
  REQUIRE(fame::scv(row({0.7, 0.3})).item() == Catch::Approx(0.16).epsilon(1e-12));
  REQUIRE(fame::scv(row({1, 0, 0, 0})).item() == Catch::Approx(scv_oracle({1, 0, 0, 0})).epsilon(1e-12));
  REQUIRE(scv_oracle({1, 0, 0, 0}) == Catch::Approx(3.0));
  REQUIRE_THROWS_AS(fame::scv(row({1, -1})), fame::NumericError);
}

TEST_CASE("scv properties: non-negative, zero iff constant, scale invariant") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> d(0.01, 2.0);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> w(2 + t % 6);
    for (auto& v : w) v = d(rng);
    const double s = fame::scv(row(w)).item();
    REQUIRE(s >= 0.0);
    REQUIRE(s == Catch::Approx(scv_oracle(w)).epsilon(1e-10));
    std::vector<double> doubled = w;
    for (auto& v : doubled) v *= 2;
    REQUIRE(fame::scv(row(doubled)).item() == Catch::Approx(s).epsilon(1e-10).margin(1e-15));
    std::vector<double> flat(w.size(), w[0]);
    REQUIRE(fame::scv(row(flat)).item() == 0.0);
  }
}

TEST_CASE("load loss is the sum of the three scvs") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> d(0.0, 1.0);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> a(4), b(4), c(4);
    for (auto* v : {&a, &b, &c})
      for (auto& x : *v) x = d(rng) + 0.01;
    const double got = fame::load_loss({row(a), row(b), row(c)}).item();
    REQUIRE(got == Catch::Approx(scv_oracle(a) + scv_oracle(b) + scv_oracle(c)).epsilon(1e-10));
  }
  REQUIRE(fame::load_loss({row({1, 1, 1, 1}), row({2, 2, 2, 2}), row({.5, .5, .5, .5})}).item() == 0.0);
}

TEST_CASE("load loss gradient passes a finite-difference check") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto a = random_tensor<double>(Shape{1, 4, 1, 1}, seed, 0.1, 1.0);
    auto b = random_tensor<double>(Shape{1, 4, 1, 1}, seed + 100, 0.1, 1.0);
    auto c = random_tensor<double>(Shape{1, 4, 1, 1}, seed + 200, 0.1, 1.0);
    auto f = [](const std::vector<Tensor<double>>& xs) { return fame::load_loss({xs[0], xs[1], xs[2]}); };
    REQUIRE(fame::grad_check(f, {a, b, c}, 1e-4).passed);
  }
}

TEST_CASE("reconstruction and mask losses pass finite-difference checks") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto y = testing::away_from_zero(Shape{2, 2, 3, 3}, seed, 0.05);
    auto zero = Tensor<double>::zeros(y.shape());
    auto f = [&](const Tensor<double>& x) { return fame::reconstruction_loss(x, zero); };
    REQUIRE(fame::grad_check(f, y, 1e-4).passed);
    auto g = [&](const Tensor<double>& x) { return fame::mask_loss(x, zero); };
    REQUIRE(fame::grad_check(g, y, 1e-4).passed);
  }
}

TEST_CASE("alpha schedule") {
  fame::LossWeights w;
  w.total_epochs = 200;
  REQUIRE(fame::alpha_effective(0, w) == 0.001);
  REQUIRE(fame::alpha_effective(70, w) == Catch::Approx(0.0005).epsilon(1e-12));
  REQUIRE(fame::alpha_effective(140, w) == 0.0);
  REQUIRE(fame::alpha_effective(199, w) == 0.0);
  double prev = 1.0;
  for (std::size_t e = 0; e < 200; ++e) {
    const double a = fame::alpha_effective(e, w);
    REQUIRE(a <= prev);
    REQUIRE(a >= 0.0);
    prev = a;
  }
  w.anneal_cutoff_fraction = 0.0;
  REQUIRE_THROWS_AS(w.validate(), fame::ConfigError);
}

TEST_CASE("total loss breakdown arithmetic") {
  fame::NetworkConfig cfg;
  cfg.base_channels = 2;
  cfg.num_resblocks = 1;
  fame::FameNet<double> net(cfg, 1);
  auto pan = random_tensor<double>(Shape{2, 1, 8, 8}, 1, 0, 1);
  auto lrms = random_tensor<double>(Shape{2, 4, 2, 2}, 2, 0, 1);
  auto gt = random_tensor<double>(Shape{2, 4, 8, 8}, 3, 0, 1);
  auto labels = Tensor<double>::zeros(Shape{2, 2, 8, 8});
  fame::LossWeights w;
  w.total_epochs = 10;
  for (std::size_t epoch = 0; epoch < 10; ++epoch) {
    auto r = net.forward(pan, lrms, {epoch, true, true});
    auto l = fame::total_loss(r, gt, labels, epoch, w);
    const auto& b = l.breakdown;
    REQUIRE(std::abs(b.total - (b.rec + b.alpha_effective * b.mask + w.beta * b.load)) <= 1e-6);
    REQUIRE(b.alpha_effective == fame::alpha_effective(epoch, w));
  }
}

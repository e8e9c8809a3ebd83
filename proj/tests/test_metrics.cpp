#include <catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <random>

#include "fame/data.hpp"
#include "fame/metrics.hpp"
#include "oracles.hpp"

using fame::ImageT;
using Img = ImageT<double>;

using oracles::q_oracle;
using oracles::random_image;
using oracles::ssim_oracle;

namespace {

Img smooth_image(std::size_t b, std::size_t n, std::uint64_t seed) {
  const auto s = fame::generate_synthetic_scene(seed, 128, fame::Recipe::mixed, b);
  return fame::image_cast<double>(fame::crop(s.hrms, 10, 20, n));
}

}  // namespace

TEST_CASE("psnr") {
  const auto g = random_image(3, 16, 16, 1);
  CHECK(fame::psnr(g, g) == 100.0);
  Img y = g;
  for (auto& v : y.data) v += 0.1;
  CHECK(fame::psnr(y, g) == Catch::Approx(20.0));
  CHECK(fame::psnr(y, g) == fame::psnr(g, y));

  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> noise(g.data.size());
  for (auto& v : noise) v = n(rng);
  double previous = 101.0;
  for (double sigma : {0.001, 0.01, 0.03, 0.1, 0.3}) {
    Img noisy = g;
    for (std::size_t i = 0; i < noisy.data.size(); ++i) noisy.data[i] += sigma * noise[i];
    const double p = fame::psnr(noisy, g);
    CHECK(p < previous);
    previous = p;
  }
}

TEST_CASE("ssim") {
  const auto g = smooth_image(2, 32, 4);
  CHECK(fame::ssim(g, g) == Catch::Approx(1.0));
  Img inv = g;
  for (auto& v : inv.data) v = 1.0 - v;
  CHECK(fame::ssim(inv, g) < 1.0);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto a = random_image(2, 20 + seed, 17 + 2 * seed, seed), b = random_image(2, 20 + seed, 17 + 2 * seed, 100 + seed);
    CHECK(std::abs(fame::ssim(a, b) - ssim_oracle(a, b)) <= 1e-6);
    CHECK(std::abs(fame::ssim(a, b) - fame::ssim(b, a)) <= 1e-9);
    const auto s = smooth_image(3, 24, seed);
    CHECK(std::abs(fame::ssim(s, a.bands == 3 ? a : random_image(3, 24, 24, seed)) -
                   ssim_oracle(s, random_image(3, 24, 24, seed))) <= 1e-6);
  }
  CHECK_THROWS_AS(fame::ssim(g, g, fame::SsimParams{10}), fame::ContractError);
}

TEST_CASE("sam") {
  const auto g = random_image(4, 8, 8, 2, 0.1, 1.0);
  CHECK(fame::sam(g, g) == Catch::Approx(0.0).margin(1e-7));
  Img twice = g;
  for (auto& v : twice.data) v *= 2;
  CHECK(fame::sam(twice, g) == Catch::Approx(0.0).margin(1e-7));
  CHECK(fame::sam(twice, g) == fame::sam(g, twice));
  Img a(2, 2, 2), b(2, 2, 2);
  for (std::size_t i = 0; i < 4; ++i) {
    a.data[i] = 0.5;      // band 0
    b.data[4 + i] = 0.3;  // band 1
  }
  CHECK(fame::sam(a, b) == Catch::Approx(std::numbers::pi / 2));
  a.data[0] = 0.0;  // a zero-vector pixel is skipped
  CHECK(fame::sam(a, b) == Catch::Approx(std::numbers::pi / 2));
  CHECK_THROWS_AS(fame::sam(Img(2, 2, 2), b), fame::NumericError);
  CHECK(fame::sam(random_image(3, 5, 5, 7), random_image(3, 5, 5, 8)) ==
        fame::sam(random_image(3, 5, 5, 8), random_image(3, 5, 5, 7)));
}

TEST_CASE("ergas") {
  const auto g = random_image(3, 8, 8, 5, 0.2, 0.8);
  CHECK(fame::ergas(g, g, 0.25) == 0.0);
  Img one(1, 10, 10, 0.5), off = one;
  for (std::size_t i = 0; i < off.data.size(); ++i) off.data[i] += (i % 2 ? 0.1 : -0.1);
  CHECK(fame::ergas(off, one, 0.25) == Catch::Approx(5.0));
  CHECK(fame::ergas(off, one, 0.5) == Catch::Approx(10.0));
  CHECK_THROWS_AS(fame::ergas(one, Img(1, 10, 10), 0.25), fame::NumericError);
}

TEST_CASE("q-index matches the direct block computation") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const std::size_t h = 8 + seed % 3, w = 8 + seed % 5;
    const auto a = random_image(1, h, w, seed), b = random_image(1, h, w, 50 + seed);
    const double fast = fame::q_index(a.data, b.data, h, w);
    CHECK(std::abs(fast - q_oracle(a.data, b.data, h, w)) <= 1e-6);
  }
  const auto s = smooth_image(2, 16, 9);
  std::vector<double> p0(s.plane(0).begin(), s.plane(0).end()), p1(s.plane(1).begin(), s.plane(1).end());
  CHECK(std::abs(fame::q_index(p0, p1, 16, 16) - q_oracle(p0, p1, 16, 16)) <= 1e-6);
  CHECK(fame::q_index(p0, p0, 16, 16) == Catch::Approx(1.0));
  const std::vector<double> flat(64, 0.4);
  CHECK(fame::q_index(flat, flat, 8, 8) == 1.0);
}

TEST_CASE("qnr suite") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto scene = fame::generate_synthetic_scene(seed, 128, fame::Recipe::mixed);
    const auto lrms = fame::degrade(scene.hrms, 4);
    const auto up = fame::bicubic_upsample(lrms, 4);
    const auto r = fame::qnr_suite(up, lrms, scene.pan);
    CHECK(std::abs(r.qnr - (1 - r.d_lambda) * (1 - r.d_s)) <= 1e-9);
    CHECK(r.d_lambda < 0.05);
    CHECK(r.d_lambda >= 0.0);
    CHECK(r.d_s >= 0.0);
    const auto noisy = random_image(4, 128, 128, seed);
    const auto rn = fame::qnr_suite(fame::image_cast<float>(noisy), lrms, scene.pan);
    CHECK(std::abs(rn.qnr - (1 - rn.d_lambda) * (1 - rn.d_s)) <= 1e-9);
    CHECK(rn.qnr < r.qnr);
  }
  fame::Image flat_f(3, 32, 32, 0.3f), flat_l(3, 8, 8, 0.3f), flat_p(1, 32, 32, 0.3f);
  const auto r = fame::qnr_suite(flat_f, flat_l, flat_p);
  CHECK(r.d_lambda == 0.0);
  CHECK(r.d_s == 0.0);
  CHECK(r.qnr == 1.0);
}

#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "fame/data.hpp"
#include "fame/io.hpp"
#include "fame/png.hpp"

using fame::Image;
using fame::Recipe;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("fame_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// Full 2-D Gaussian (outer product of the 1-D taps) applied directly at each decimated position.
Image dense_degrade_oracle(const Image& img, std::size_t f) {
  const double sigma = static_cast<double>(f) / 2.0;
  const long r = static_cast<long>(f);
  std::vector<double> k1;
  double s = 0.0;
  for (long t = -r; t <= r; ++t) {
    k1.push_back(std::exp(-static_cast<double>(t * t) / (2 * sigma * sigma)));
    s += k1.back();
  }
  auto mirror = [](long i, long n) {
    while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
    return static_cast<std::size_t>(i);
  };
  Image out(img.bands, img.h / f, img.w / f);
  for (std::size_t b = 0; b < img.bands; ++b)
    for (std::size_t y = 0; y < out.h; ++y)
      for (std::size_t x = 0; x < out.w; ++x) {
        const long cy = static_cast<long>(y * f + f / 2), cx = static_cast<long>(x * f + f / 2);
        double acc = 0.0;
        for (long dy = -r; dy <= r; ++dy)
          for (long dx = -r; dx <= r; ++dx)
            acc += k1[dy + r] * k1[dx + r] / (s * s) *
                   img.at(b, mirror(cy + dy, static_cast<long>(img.h)), mirror(cx + dx, static_cast<long>(img.w)));
        out.at(b, y, x) = static_cast<float>(acc);
      }
  return out;
}

}  // namespace

TEST_CASE("scene generation is deterministic and bounded") {
  for (auto recipe : {Recipe::gradients, Recipe::textures, Recipe::edges, Recipe::mixed}) {
    const auto a = fame::generate_synthetic_scene(11, 128, recipe);
    const auto b = fame::generate_synthetic_scene(11, 128, recipe);
    CHECK(a.hrms == b.hrms);
    CHECK(a.pan == b.pan);
    CHECK(a.pan.h == a.hrms.h);
    CHECK(a.hrms.bands == 4);
    for (float v : a.hrms.data) REQUIRE((v >= 0.0f && v <= 1.0f));
    for (float v : a.pan.data) REQUIRE((v >= 0.0f && v <= 1.0f));
  }
  CHECK_FALSE(fame::generate_synthetic_scene(1, 128, Recipe::mixed).hrms ==
              fame::generate_synthetic_scene(2, 128, Recipe::mixed).hrms);
  CHECK_THROWS_AS(fame::generate_synthetic_scene(1, 130, Recipe::mixed), fame::ContractError);
  CHECK_THROWS_AS(fame::generate_synthetic_scene(1, 124, Recipe::mixed), fame::ContractError);
  CHECK_THROWS_AS(fame::parse_recipe("stripes"), fame::ConfigError);
}

TEST_CASE("gradient scenes have an almost empty high-frequency label") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto pair = fame::wald_degrade(fame::generate_synthetic_scene(seed, 128, Recipe::gradients), 4);
    CHECK(pair.mask.coverage() < 0.05);
  }
}

TEST_CASE("mixed scenes give varied label coverage") {
  // With the pure quantile rule coverage can never exceed 1 - q, so a 60 % upper end needs q < 0.4.
  fame::MaskLabelParams params;
  params.magnitude_quantile = 0.35;
  double lo = 1.0, hi = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto scene = fame::generate_synthetic_scene(seed, 128, Recipe::mixed);
    const double c = fame::make_mask_label(scene.hrms, params).coverage();
    lo = std::min(lo, c);
    hi = std::max(hi, c);
  }
  CHECK(lo <= 0.10);
  CHECK(hi >= 0.60);
}

TEST_CASE("wald degradation") {
  fame::Scene flat;
  flat.hrms = Image(3, 128, 128, 0.37f);
  flat.pan = Image(1, 128, 128, 0.5f);
  const auto p = fame::wald_degrade(flat, 4);
  REQUIRE(p.lrms.h == 32);
  REQUIRE(p.lrms.w == 32);
  for (float v : p.lrms.data) CHECK(v == Catch::Approx(0.37f).epsilon(1e-7));
  CHECK(p.pan == flat.pan);
  CHECK(p.gt == flat.hrms);

  for (std::size_t f : {2, 4}) {
    const auto scene = fame::generate_synthetic_scene(5, 128, Recipe::mixed);
    const auto fast = fame::degrade(scene.hrms, f);
    const auto oracle = dense_degrade_oracle(scene.hrms, f);
    double worst = 0.0;
    for (std::size_t i = 0; i < fast.data.size(); ++i) worst = std::max(worst, std::abs(double(fast.data[i]) - oracle.data[i]));
    CHECK(worst <= 1e-6);
  }
  CHECK_THROWS_AS(fame::degrade(Image(1, 130, 128), 4), fame::ContractError);
}

TEST_CASE("patch extraction") {
  const auto scene = fame::generate_synthetic_scene(3, 256, Recipe::edges);
  const auto pair = fame::wald_degrade(scene, 4);
  REQUIRE(pair.lrms.h == 64);
  const auto patches = fame::extract_patches(pair, 32, 32);
  REQUIRE(patches.size() == 4);
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const auto& p = patches[i];
    CHECK(p.lrms.h == 32);
    CHECK(p.gt.h == 128);
    CHECK(p.pan.h == 128);
    CHECK(p.mask.h == 128);
    CHECK(fame::degrade(p.gt, 4) == p.lrms);
    // Non-overlapping tiles: patch (i / 2, i % 2) is exactly that quadrant of the scene.
    const std::size_t y0 = (i / 2) * 128, x0 = (i % 2) * 128;
    CHECK(p.gt == fame::crop(pair.gt, y0, x0, 128));
    CHECK(p.pan == fame::crop(pair.pan, y0, x0, 128));
    CHECK(p.mask.high == fame::crop(pair.mask, y0, x0, 128).high);
  }
  CHECK(fame::extract_patches(pair, 32, 16).size() == 9);
}

TEST_CASE("upsampled lrms patches are registered with their gt") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto pair = fame::wald_degrade(fame::generate_synthetic_scene(seed, 128, Recipe::edges), 4);
    const auto p = fame::extract_patches(pair, 16, 16).at(1);
    const auto up = fame::bicubic_upsample(p.lrms, 4);
    double best = -2.0;
    int by = 99, bx = 99;
    for (int dy = -3; dy <= 3; ++dy)
      for (int dx = -3; dx <= 3; ++dx) {
        // Pearson correlation over a fixed interior window.
        double sa = 0, sg = 0, saa = 0, sgg = 0, sag = 0, n = 0;
        for (std::size_t y = 4; y + 4 < up.h; ++y)
          for (std::size_t x = 4; x + 4 < up.w; ++x) {
            const double a = up.at(0, y, x);
            const double g = p.gt.at(0, static_cast<std::size_t>(static_cast<int>(y) + dy),
                                     static_cast<std::size_t>(static_cast<int>(x) + dx));
            sa += a, sg += g, saa += a * a, sgg += g * g, sag += a * g, n += 1;
          }
        const double r = (sag - sa * sg / n) / std::sqrt((saa - sa * sa / n) * (sgg - sg * sg / n));
        if (r > best) {
          best = r;
          by = dy;
          bx = dx;
        }
      }
    CHECK(by == 0);
    CHECK(bx == 0);
  }
}

TEST_CASE("bicubic upsampling interpolates the samples and preserves constants") {
  Image flat(2, 8, 8, 0.25f);
  for (float v : fame::bicubic_upsample(flat, 4).data) CHECK(v == Catch::Approx(0.25f));
  const auto lr = fame::degrade(fame::generate_synthetic_scene(2, 128, Recipe::textures).hrms, 4);
  const auto up = fame::bicubic_upsample(lr, 4);
  for (std::size_t y = 0; y < lr.h; ++y)
    for (std::size_t x = 0; x < lr.w; ++x) CHECK(up.at(1, y * 4 + 2, x * 4 + 2) == lr.at(1, y, x));
}

TEST_CASE("container round trip and corruption") {
  const auto dir = scratch_dir("io");
  const auto pair = fame::extract_patches(fame::wald_degrade(fame::generate_synthetic_scene(9, 128, Recipe::mixed), 4), 8, 8).at(5);
  const auto path = dir / "p.fame";
  fame::save_pair(path, pair, {{"seed", "9"}});
  const auto back = fame::load_pair(path);
  CHECK(back.lrms == pair.lrms);
  CHECK(back.pan == pair.pan);
  CHECK(back.gt == pair.gt);
  CHECK(back.mask.high == pair.mask.high);
  CHECK(back.mask.low == pair.mask.low);
  CHECK(fame::read_container(path).meta("seed") == "9");

  auto bytes = fame::read_bytes(path);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "FAME");
  CHECK(bytes[4] == 1);  // version, little-endian
  CHECK(bytes[5] == 0);

  for (std::size_t cut : {std::size_t{3}, std::size_t{17}, bytes.size() / 2, bytes.size() - 1}) {
    std::vector<std::uint8_t> truncated(bytes.begin(), bytes.begin() + static_cast<long>(cut));
    fame::write_bytes(dir / "t.fame", truncated);
    try {
      (void)fame::load_pair(dir / "t.fame");
      FAIL("expected FormatError");
    } catch (const fame::FormatError& e) {
      CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
      CHECK(e.offset() <= cut);
    }
  }

  auto bad = bytes;
  bad[0] = 'X';
  fame::write_bytes(dir / "m.fame", bad);
  CHECK_THROWS_AS(fame::load_pair(dir / "m.fame"), fame::FormatError);

  // A tampered lrms is caught by the regeneration check.
  auto c = fame::read_container(path);
  for (auto& a : c.arrays)
    if (a.name == "lrms") a.image.data[7] += 0.01f;
  fame::write_container(dir / "x.fame", c);
  CHECK_THROWS_AS(fame::load_pair(dir / "x.fame"), fame::FormatError);
  CHECK_THROWS_AS(fame::load_pair(dir / "missing.fame"), fame::IoError);
}

TEST_CASE("shuffled iteration is deterministic per seed") {
  const auto dir = scratch_dir("iter");
  const auto pair = fame::wald_degrade(fame::generate_synthetic_scene(4, 128, Recipe::mixed), 4);
  const auto patches = fame::extract_patches(pair, 8, 8);
  for (std::size_t i = 0; i < 10; ++i) fame::save_pair(dir / ("p" + std::to_string(i) + ".fame"), patches[i]);
  auto order = [&](std::uint64_t seed) {
    std::vector<float> first;
    for (const auto& p : fame::iterate(dir, seed)) first.push_back(p.gt.data[0] + p.gt.data[100]);
    return first;
  };
  CHECK(order(1) == order(1));
  CHECK(order(1) != order(2));
  CHECK(fame::load_dataset(dir).size() == 10);
}

TEST_CASE("png round trip") {
  const auto dir = scratch_dir("png");
  const auto scene = fame::generate_synthetic_scene(1, 128, Recipe::edges);
  fame::write_png(dir / "rgb.png", scene.hrms, {2, 1, 0});
  fame::write_png(dir / "pan.png", scene.pan);
  const auto rgb = fame::read_png(dir / "rgb.png");
  const auto pan = fame::read_png(dir / "pan.png");
  REQUIRE(rgb.bands == 3);
  REQUIRE(pan.bands == 1);
  for (std::size_t i = 0; i < 128 * 128; i += 97) {
    CHECK(std::abs(rgb.data[i] - scene.hrms.data[2 * 128 * 128 + i]) <= 0.5f / 255.0f + 1e-6f);
    CHECK(std::abs(pan.data[i] - scene.pan.data[i]) <= 0.5f / 255.0f + 1e-6f);
  }
  CHECK_THROWS_AS(fame::write_png(dir / "bad.png", Image(2, 4, 4)), fame::ContractError);
  CHECK_THROWS_AS(fame::read_png(dir / "none.png"), fame::IoError);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "stcl/errors.hpp"
#include "stcl/phantom.hpp"
#include "test_support.hpp"

using stcl::Tensor;
namespace ph = stcl::phantom;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const char* name) {
  auto p = fs::temp_directory_path() / ("stcl_phantom_" + std::string(name));
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double masked_mean(const Tensor& image, const std::vector<std::uint8_t>& mask) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) {
      s += image[i];
      ++n;
    }
  return s / static_cast<double>(n);
}

}  // namespace

TEST_CASE("enhancement curve examples") {
  const ph::CurveParams c{3.0, 5.0, 20.0, 2.0, 0.0};
  CHECK(ph::enhancement_curve(c, 0.0) == 0.0);
  CHECK(ph::enhancement_curve(c, 5.0) == 0.0);
  CHECK(ph::enhancement_curve(c, 25.0) == 3.0);

  // Regression fixture: u = 14.75 past a 20 s rise, 275 s of washout.
  const ph::CurveParams artery{1.0, 5.0, 20.0, 2.0, 0.005};
  const double expected = 14.75 * 14.75 * std::exp(2.0 * (1.0 - 14.75)) * std::exp(-0.005 * 275.0);
  CHECK(ph::enhancement_curve(artery, 300.0) == doctest::Approx(expected).epsilon(1e-14));
  CHECK(ph::enhancement_curve(artery, 300.0) == doctest::Approx(6.270914444987446e-11).epsilon(1e-12));

  ph::TissueRegion bg;
  bg.curve = artery;
  for (double t : {0.0, 25.0, 300.0}) CHECK(ph::enhancement_curve(bg, t) == 0.0);
}

TEST_CASE("curves are continuous and phases are ordered") {
  std::mt19937_64 rng(11);
  const ph::PhantomConfig cfg;
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = ph::random_anatomy(cfg, rng);
    for (std::size_t k = 1; k < ph::kTissueCount; ++k) {
      const auto& c = a.regions[k].curve;
      CHECK(c.amplitude >= 0.0);
      CHECK(c.time_to_peak > 0.0);
      CHECK(c.shape > 0.0);
      double jump = 0.0, prev = ph::enhancement_curve(c, 0.0);
      for (int i = 1; i <= 30000; ++i) {
        const double v = ph::enhancement_curve(c, 0.01 * i);
        jump = std::max(jump, std::abs(v - prev));
        prev = v;
      }
      CHECK(jump < 1e-3 * c.amplitude);
    }

    // ROI means on noise-free renders, 1 s grid.
    auto peak_time = [&](ph::Tissue t) {
      double best = -1.0, when = 0.0;
      for (int s = 0; s <= 300; ++s) {
        const double m = masked_mean(ph::render(a, s, 0.0, 0), a.region(t).mask);
        if (m > best) best = m, when = s;
      }
      return when;
    };
    CHECK(peak_time(ph::Tissue::Artery) < peak_time(ph::Tissue::Parenchyma));
  }
}

TEST_CASE("anatomy masks partition the image") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = ph::random_anatomy({}, rng);
    REQUIRE(a.regions.size() == ph::kTissueCount);
    for (std::size_t p = 0; p < a.side * a.side; ++p) {
      int owners = 0;
      for (const auto& r : a.regions) owners += r.mask[p];
      CHECK(owners == 1);
    }
    for (const auto& r : a.regions)
      CHECK(std::count(r.mask.begin(), r.mask.end(), 1) > 0);
    for (double v : a.baseline) CHECK((v >= 0.0 && v <= a.intensity_range));
  }
}

TEST_CASE("acquisition schedule") {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto t = ph::acquisition_schedule(seed);
    REQUIRE(t.size() == 16);
    CHECK(t[0] == 0.0);
    for (std::size_t i = 1; i <= 6; ++i) CHECK((t[i] >= 15.0 && t[i] <= 37.0));
    for (std::size_t i = 7; i <= 12; ++i) CHECK((t[i] >= 50.0 && t[i] <= 72.0));
    CHECK(std::abs(t[13] - 90.0) <= 5.0);
    CHECK(std::abs(t[14] - 150.0) <= 5.0);
    CHECK(std::abs(t[15] - 300.0) <= 5.0);
    for (std::size_t i = 1; i < t.size(); ++i) CHECK(t[i] > t[i - 1]);
    for (std::size_t i = 2; i <= 12; ++i)
      if (i != 7) CHECK(t[i] - t[i - 1] >= ph::kMinSpacing - 2e-6);
    for (double v : t) CHECK(std::round(v * 1e6) / 1e6 == v);
  }
  // Earliest arterial frame: minimum of 6 uniforms over the 12 s of slack, mean 12/7.
  double first = 0.0;
  const int draws = 4000;
  for (int seed = 0; seed < draws; ++seed) first += ph::acquisition_schedule(1000 + seed)[1] - 15.0;
  CHECK(first / draws == doctest::Approx(12.0 / 7.0).epsilon(0.05));
  CHECK(ph::acquisition_schedule(42) == ph::acquisition_schedule(42));
  CHECK(ph::acquisition_schedule(42) != ph::acquisition_schedule(43));
}

TEST_CASE("render") {
  std::mt19937_64 rng(5);
  const auto a = ph::random_anatomy({}, rng);
  CHECK(ph::render(a, 0.0, 0.0, 99) == a.baseline);
  CHECK(ph::render(a, 30.0, 8.0, 7) == ph::render(a, 30.0, 8.0, 7));
  CHECK_FALSE(ph::render(a, 30.0, 8.0, 7) == ph::render(a, 30.0, 8.0, 8));
  const auto& artery = a.region(ph::Tissue::Artery).mask;
  CHECK(masked_mean(ph::render(a, 25.0, 8.0, 1), artery) > masked_mean(ph::render(a, 0.0, 8.0, 1), artery));
  const auto noisy = ph::render(a, 25.0, 500.0, 1);
  for (double v : noisy) CHECK((v >= 0.0 && v <= a.intensity_range));
  CHECK_THROWS_AS(ph::render(a, 0.0, -1.0, 0), stcl::ContractViolation);

  const auto m = ph::tissue_mask(a, ph::Tissue::Artery);
  CHECK(m.shape() == stcl::Shape{32, 32});
  for (std::size_t i = 0; i < m.size(); ++i) CHECK(m[i] == artery[i]);
}

TEST_CASE("normalization maps the intensity range to [-1, 1]") {
  const Tensor img({1, 3}, {0.0, 500.0, 1000.0});
  const auto n = ph::normalize(img, 1000.0);
  CHECK(n[0] == -1.0);
  CHECK(n[1] == 0.0);
  CHECK(n[2] == 1.0);
  CHECK(ph::denormalize(n, 1000.0) == img);
}

TEST_CASE("block Haar codec") {
  const auto codec = ph::LatentCodec::block_haar(32);
  CHECK(codec.latent_shape() == stcl::Shape{4, 8, 8});
  CHECK(codec.latent_size() == 256);
  const auto& m = codec.matrix();
  REQUIRE(m.shape() == stcl::Shape{256, 1024});

  SUBCASE("rows orthonormal") {
    const auto gram = stcl::matmul(m, m, false, true);
    double err = 0.0;
    for (std::size_t i = 0; i < 256; ++i)
      for (std::size_t j = 0; j < 256; ++j) err = std::max(err, std::abs(gram.at(i, j) - (i == j ? 1.0 : 0.0)));
    CHECK(err < 1e-9);
  }
  SUBCASE("zero image, identity on latents") {
    const auto z0 = codec.encode(Tensor::zeros({32, 32}));
    CHECK(stcl::max_abs(z0) == 0.0);
    CHECK(z0.shape() == stcl::Shape{4, 8, 8});
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 20; ++trial) {
      const auto z = stcl::test::random_normal({4, 8, 8}, rng);
      CHECK(stcl::test::max_abs_diff(codec.encode(codec.decode(z)), z) < 1e-9);
    }
  }
  SUBCASE("round trip error equals the complement norm") {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 20; ++trial) {
      const auto x = stcl::test::random_normal({32, 32}, rng);
      const double err = std::sqrt(stcl::squared_norm(stcl::sub(codec.decode(codec.encode(x)), x)));
      // Complement via Pythagoras: |x|² − Σ⟨r_i, x⟩² over rows r_i.
      double captured = 0.0;
      for (std::size_t r = 0; r < 256; ++r) {
        double dot = 0.0;
        for (std::size_t p = 0; p < 1024; ++p) dot += m.at(r, p) * x[p];
        captured += dot * dot;
      }
      const double complement = std::sqrt(stcl::squared_norm(x) - captured);
      CHECK(err == doctest::Approx(complement).epsilon(1e-9));
    }
  }
  SUBCASE("block means survive") {
    // A block-constant image lies in the DC span.
    std::vector<double> d(1024);
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x) d[y * 32 + x] = static_cast<double>((y / 4) * 8 + x / 4);
    const Tensor img({32, 32}, d);
    CHECK(stcl::test::max_abs_diff(codec.decode(codec.encode(img)), img) < 1e-12);
  }
  SUBCASE("shape errors") {
    CHECK_THROWS_AS(codec.encode(Tensor::zeros({16, 16})), stcl::ContractViolation);
    CHECK_THROWS_AS(codec.decode(Tensor::zeros({4, 4, 4})), stcl::ContractViolation);
    CHECK_THROWS_AS(ph::LatentCodec::block_haar(30), stcl::ContractViolation);
    CHECK_THROWS_AS(ph::LatentCodec::from_matrix(Tensor::zeros({10, 1024}), 32), stcl::DataError);
  }
}

TEST_CASE("dataset generation") {
  const auto d = ph::make_dataset(1, 17);
  REQUIRE(d.patients.size() == 1);
  const auto& p = d.patients[0];
  CHECK(p.id == "p000");
  CHECK(p.times.size() == 16);
  CHECK(p.acquired.shape() == stcl::Shape{16, 32, 32});
  CHECK(p.truth.shape() == stcl::Shape{16, 32, 32});
  CHECK(p.latents.shape() == stcl::Shape{16, 4, 8, 8});
  CHECK(p.dense.shape() == stcl::Shape{61, 32, 32});
  CHECK(d.dense_times.size() == 61);
  CHECK(d.dense_times.front() == 0.0);
  CHECK(d.dense_times.back() == 300.0);

  // Latents are the codec applied to normalized acquisitions.
  const auto frame = stcl::slice_leading(p.acquired, 3, 4).reshaped({32, 32});
  const auto lat = stcl::slice_leading(p.latents, 3, 4).reshaped({4, 8, 8});
  CHECK(stcl::test::max_abs_diff(d.codec.encode(ph::normalize(frame, 1000.0)), lat) < 1e-12);
  // Acquisition noise is present but modest.
  const double resid = std::sqrt(stcl::squared_norm(stcl::sub(p.acquired, p.truth)) / p.acquired.size());
  CHECK(resid == doctest::Approx(8.0).epsilon(0.1));

  CHECK_THROWS_AS(ph::make_dataset(0, 1), stcl::ConfigError);
}

TEST_CASE("dataset files") {
  const auto a = scratch("a"), b = scratch("b");
  const auto d = ph::make_dataset(3, 7);
  ph::write_dataset(d, a);
  ph::write_dataset(ph::make_dataset(3, 7), b);
  CHECK(slurp(a / "manifest.json") == slurp(b / "manifest.json"));
  CHECK(slurp(a / "p002" / "acquired.tsr") == slurp(b / "p002" / "acquired.tsr"));

  const auto back = ph::load_dataset(a);
  REQUIRE(back.patients.size() == 3);
  CHECK(back.seed == 7);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back.patients[i].id == d.patients[i].id);
    CHECK(back.patients[i].times == d.patients[i].times);
    CHECK(back.patients[i].latents == d.patients[i].latents);
    CHECK(back.patients[i].dense == d.patients[i].dense);
    for (std::size_t k = 1; k < back.patients[i].times.size(); ++k)
      CHECK(back.patients[i].times[k] > back.patients[i].times[k - 1]);
  }
  CHECK(back.codec.matrix() == d.codec.matrix());

  CHECK_THROWS_AS(ph::load_dataset(scratch("missing")), stcl::IoError);
  const auto broken = scratch("broken");
  fs::create_directories(broken);
  std::ofstream(broken / "manifest.json") << "{\"seed\": 1}";
  CHECK_THROWS_AS(ph::load_dataset(broken), stcl::DataError);
  for (const auto& p : {a, b, broken}) fs::remove_all(p);
}

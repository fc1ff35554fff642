#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "stcl/errors.hpp"
#include "stcl/gradcheck.hpp"
#include "stcl/ldl.hpp"
#include "test_support.hpp"

using stcl::Tensor;
namespace ad = stcl::ad;
namespace ldl = stcl::ldl;

namespace {

std::vector<double> times_of(const ldl::DenseTimeGrid& g) { return g.times; }

ldl::DenseTimeGrid grid_from(std::vector<double> times, double delta = ldl::kDefaultDelta) {
  ldl::DenseTimeGrid g;
  g.provenance.assign(times.size(), ldl::Provenance::Acquired);
  g.times = std::move(times);
  g.delta = delta;
  return g;
}

// Literal three-coefficient evaluation of the weighted stencil and the loss.
double reference_loss(const std::vector<Tensor>& y, const std::vector<double>& t, double delta) {
  double total = 0.0;
  for (std::size_t k = 1; k + 1 < t.size(); ++k) {
    const double h0 = t[k] - t[k - 1] + delta;
    const double h1 = t[k + 1] - t[k] + delta;
    const double w = 1.0 / (1.0 + h0 + h1);
    for (std::size_t i = 0; i < y[k].size(); ++i) {
      const double d2 = 2.0 * (y[k - 1][i] / (h0 * (h0 + h1)) - y[k][i] / (h0 * h1) + y[k + 1][i] / (h1 * (h0 + h1))) * w;
      total += std::abs(d2);
    }
  }
  return total / static_cast<double>(t.size() - 2);
}

}  // namespace

TEST_CASE("dense grid examples") {
  const std::vector<double> a{0, 30, 60};
  const auto g = ldl::build_dense_grid(a, 2);
  CHECK(times_of(g) == std::vector<double>{0, 10, 20, 30, 40, 50, 60});
  CHECK(g.intermediate_count() == 4);
  CHECK(g.provenance[3] == ldl::Provenance::Acquired);
  CHECK(g.provenance[4] == ldl::Provenance::Intermediate);

  const std::vector<double> b{0, 3};
  CHECK(times_of(ldl::build_dense_grid(b, 0)) == std::vector<double>{0, 3});

  const std::vector<double> c{0, 1, 100};
  CHECK(times_of(ldl::build_dense_grid(c, 1)) == std::vector<double>{0, 0.5, 1, 50.5, 100});
}

TEST_CASE("dense grid errors") {
  const std::vector<double> dup{0, 5, 5};
  const std::vector<double> unsorted{0, 7, 3};
  const std::vector<double> single{4};
  const std::vector<double> nan{0, std::nan("")};
  CHECK_THROWS_AS(ldl::build_dense_grid(dup, 1), stcl::InputError);
  CHECK_THROWS_AS(ldl::build_dense_grid(unsorted, 1), stcl::InputError);
  CHECK_THROWS_AS(ldl::build_dense_grid(single, 1), stcl::InputError);
  CHECK_THROWS_AS(ldl::build_dense_grid(nan, 1), stcl::InputError);
  const std::vector<double> ok{0, 1, 2};
  const std::vector<std::size_t> wrong_k{1};
  CHECK_THROWS_AS(ldl::build_dense_grid(ok, wrong_k), stcl::InputError);
}

TEST_CASE("dense grid invariants on random schedules") {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> gap(1e-3, 40.0);
  std::uniform_int_distribution<std::size_t> kdist(0, 4);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> acq{0.0};
    std::vector<std::size_t> ks;
    const int n = 2 + trial % 10;
    while (static_cast<int>(acq.size()) < n) {
      acq.push_back(acq.back() + gap(rng));
      ks.push_back(kdist(rng));
    }
    const auto g = ldl::build_dense_grid(acq, ks);
    for (std::size_t j = 1; j < g.size(); ++j) CHECK(g.times[j] > g.times[j - 1]);
    std::size_t expected = acq.size();
    for (auto k : ks) expected += k;
    CHECK(g.pre_dedup_size == expected);
    for (double t : acq) {
      const auto it = std::find(g.times.begin(), g.times.end(), t);
      REQUIRE(it != g.times.end());
      CHECK(g.provenance[static_cast<std::size_t>(it - g.times.begin())] == ldl::Provenance::Acquired);
    }
    // Each intermediate point sits strictly inside one source interval, and
    // per-interval counts match K_i.
    for (std::size_t i = 0; i + 1 < acq.size(); ++i) {
      std::size_t inside = 0;
      for (std::size_t j = 0; j < g.size(); ++j)
        if (g.times[j] > acq[i] && g.times[j] < acq[i + 1]) {
          CHECK(g.provenance[j] == ldl::Provenance::Intermediate);
          ++inside;
        }
      CHECK(inside == ks[i]);
    }
  }
}

TEST_CASE("near-duplicate times collapse with acquired provenance") {
  // K = 1 on [0, 2e-9] inserts 1e-9, within tolerance of 0.
  const std::vector<double> acq{0.0, 2e-9, 10.0};
  const std::vector<std::size_t> ks{1, 1};
  const auto g = ldl::build_dense_grid(acq, ks);
  CHECK(g.pre_dedup_size == 5);
  CHECK(g.size() < g.pre_dedup_size);
  for (std::size_t j = 1; j < g.size(); ++j) CHECK(g.times[j] - g.times[j - 1] > ldl::kDedupTolerance);
  for (double t : acq) CHECK(std::find(g.times.begin(), g.times.end(), t) != g.times.end());
}

TEST_CASE("stencil examples") {
  const Tensor zero = Tensor::filled({2}, 0.0);
  const Tensor c = Tensor::filled({2}, 7.25);
  const auto constant = ldl::central_diff_d2(c, c, c, 0.0, 0.3, 9.1, ldl::kDefaultDelta);
  CHECK(constant.d2 == Tensor::zeros({2}));

  const auto quad = ldl::central_diff_d2(Tensor::scalar(0), Tensor::scalar(1), Tensor::scalar(4), 0, 1, 2,
                                         ldl::kDefaultDelta);
  CHECK(std::abs(quad.d2.item() - 2.0 / 3.0) <= 1e-5);
  CHECK(quad.weight == doctest::Approx(1.0 / 3.0).epsilon(1e-5));

  const auto affine = ldl::central_diff_d2(Tensor::scalar(0), Tensor::scalar(1), Tensor::scalar(2), 0, 1, 2,
                                           ldl::kDefaultDelta);
  CHECK(std::abs(affine.d2.item()) <= 1e-5);

  CHECK_THROWS_AS(ldl::central_diff_d2(zero, zero, zero, 0, 0, 1, 1e-6), stcl::ContractViolation);
  CHECK_THROWS_AS(ldl::central_diff_d2(zero, zero, zero, 2, 1, 3, 1e-6), stcl::ContractViolation);
}

TEST_CASE("stencil matches the three-coefficient form") {
  std::mt19937_64 rng(22);
  std::uniform_real_distribution<double> gap(0.1, 50.0);
  for (int trial = 0; trial < 100; ++trial) {
    const double t0 = gap(rng), t1 = t0 + gap(rng), t2 = t1 + gap(rng);
    const Tensor a = stcl::test::random_normal({5}, rng), b = stcl::test::random_normal({5}, rng),
                 c = stcl::test::random_normal({5}, rng);
    const auto terms = ldl::central_diff_d2(a, b, c, t0, t1, t2, 1e-6);
    const double h0 = t1 - t0 + 1e-6, h1 = t2 - t1 + 1e-6;
    CHECK(terms.h0 == h0);
    CHECK(terms.h1 == h1);
    for (std::size_t i = 0; i < 5; ++i) {
      const double ref = 2.0 * (a[i] / (h0 * (h0 + h1)) - b[i] / (h0 * h1) + c[i] / (h1 * (h0 + h1))) * terms.weight;
      CHECK(std::abs(terms.d2[i] - ref) <= 1e-12 * std::max(1.0, std::abs(ref)));
    }
  }
}

TEST_CASE("stencil invariants") {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> gap(0.5, 50.0);
  for (int trial = 0; trial < 200; ++trial) {
    const double t0 = 10.0 * gap(rng), t1 = t0 + gap(rng), t2 = t1 + gap(rng);
    const Tensor c = stcl::test::random_normal({4}, rng, 100.0);
    CHECK(ldl::central_diff_d2(c, c, c, t0, t1, t2, 1e-6).d2 == Tensor::zeros({4}));

    auto lin = [](double t) { return Tensor::scalar(t); };
    CHECK(std::abs(ldl::central_diff_d2(lin(t0), lin(t1), lin(t2), t0, t1, t2, 1e-6).d2.item()) <= 1e-4);

    const auto base = ldl::stencil_coefficients(t0, t1, t2, 1e-6);
    CHECK(base.weight > 0.0);
    CHECK(base.weight < 1.0);
    CHECK(ldl::stencil_coefficients(t0 - 1.0, t1, t2, 1e-6).weight < base.weight);
    CHECK(ldl::stencil_coefficients(t0, t1, t2 + 1.0, 1e-6).weight < base.weight);
  }
}

TEST_CASE("unweighted stencil recovers the second derivative on uniform grids") {
  for (double h : {0.1, 1.0, 10.0}) {
    for (double start : {0.0, 3.0, 120.0}) {
      const double a = start, b = start + h, c = start + 2 * h;
      const Tensor d = ldl::second_difference(Tensor::scalar(a * a), Tensor::scalar(b * b), Tensor::scalar(c * c), a,
                                              b, c, 0.0);
      CHECK(std::abs(d.item() - 2.0) <= 1e-6);
    }
  }
}

TEST_CASE("temporal_loss examples") {
  // Uniform grid with D₂ = 0.5 everywhere on a single interior point.
  const auto grid = grid_from({0, 1, 2}, 0.0);
  const double w = 1.0 / 3.0;
  // With h = 1 and δ = 0, D₂ = w·(y₋ − 2y + y₊), so y₊ = 0.5/w gives D₂ = 0.5.
  const std::vector<Tensor> series{Tensor::zeros({2, 2}), Tensor::zeros({2, 2}), Tensor::filled({2, 2}, 0.5 / w)};
  CHECK(ldl::temporal_loss(series, grid) == doctest::Approx(2.0).epsilon(1e-12));

  const auto uniform = grid_from({0, 5, 10, 15, 20, 25});
  std::mt19937_64 rng(24);
  const Tensor slope = stcl::test::random_normal({3, 4, 4}, rng);
  const Tensor offset = stcl::test::random_normal({3, 4, 4}, rng);
  std::vector<Tensor> affine;
  for (double t : uniform.times) affine.push_back(stcl::axpby(1.0, offset, t, slope));
  CHECK(ldl::temporal_loss(affine, uniform) <= 1e-5);

  CHECK_THROWS_AS(ldl::temporal_loss(std::vector<Tensor>(2, Tensor::zeros({1})), grid_from({0, 1})),
                  stcl::ContractViolation);
  CHECK_THROWS_AS(ldl::temporal_loss(std::vector<Tensor>(2, Tensor::zeros({1})), grid), stcl::ContractViolation);
}

TEST_CASE("temporal_loss matches the literal formula") {
  std::mt19937_64 rng(25);
  std::uniform_real_distribution<double> gap(0.2, 30.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> t{0.0};
    const int n = 3 + trial % 8;
    while (static_cast<int>(t.size()) < n) t.push_back(t.back() + gap(rng));
    std::vector<Tensor> y;
    for (int k = 0; k < n; ++k) y.push_back(stcl::test::random_normal({2, 3, 3}, rng));
    const auto grid = grid_from(t);
    const double ref = reference_loss(y, t, grid.delta);
    CHECK(std::abs(ldl::temporal_loss(y, grid) - ref) <= 1e-10 * std::max(1.0, ref));

    const Tensor shift = stcl::test::random_normal({2, 3, 3}, rng, 50.0);
    std::vector<Tensor> shifted;
    for (const auto& v : y) shifted.push_back(stcl::add(v, shift));
    CHECK(ldl::temporal_loss(shifted, grid) == doctest::Approx(ldl::temporal_loss(y, grid)).epsilon(1e-9));
    CHECK(ldl::temporal_loss(y, grid) >= 0.0);
  }
}

TEST_CASE("temporal_loss gradient away from kinks") {
  std::mt19937_64 rng(26);
  for (int trial = 0; trial < 5; ++trial) {
    const std::vector<double> t{0.0, 0.7, 2.1, 2.6, 4.0};
    std::vector<Tensor> y;
    for (int k = 0; k < 5; ++k) y.push_back(stcl::test::random_normal({3, 4, 4}, rng));
    const auto grid = grid_from(t);
    auto f = [&](ad::Tape&, std::span<const ad::Var> p) {
      ldl::DenseLatentSeries s;
      s.latents.assign(p.begin(), p.end());
      return ldl::temporal_loss(s, grid);
    };
    CHECK(ad::gradient_check(f, y, 1e-5).worst() <= 1e-4);
  }
}

TEST_CASE("assemble_dense") {
  ad::Tape tape;
  const std::vector<double> acq{0, 20};
  std::map<double, ad::Var> anchored{{0.0, tape.constant(Tensor::filled({1}, 1.0))},
                                     {20.0, tape.constant(Tensor::filled({1}, 2.0))}};
  std::vector<double> calls;
  auto sampler = [&](double t) {
    calls.push_back(t);
    return tape.constant(Tensor::filled({1}, -t));
  };

  const auto plain = ldl::assemble_dense(ldl::build_dense_grid(acq, 0), anchored, sampler);
  REQUIRE(plain.latents.size() == 2);
  CHECK(plain.latents[0].id() == anchored.at(0.0).id());
  CHECK(plain.latents[1].id() == anchored.at(20.0).id());
  CHECK(calls.empty());

  const auto dense = ldl::assemble_dense(ldl::build_dense_grid(acq, 1), anchored, sampler);
  CHECK(calls == std::vector<double>{10.0});
  CHECK(dense.latents[1].value().item() == -10.0);

  std::map<double, ad::Var> partial{{0.0, anchored.at(0.0)}};
  CHECK_THROWS_AS(ldl::assemble_dense(ldl::build_dense_grid(acq, 0), partial, sampler), stcl::ContractViolation);
}

TEST_CASE("stencil diagnostics CSV") {
  const auto grid = grid_from({0, 1, 3});
  const std::vector<Tensor> y{Tensor::scalar(0), Tensor::scalar(1), Tensor::scalar(9)};
  const auto rows = ldl::stencil_diagnostics(y, grid);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].time == 1.0);
  CHECK(rows[0].l1 == doctest::Approx(ldl::temporal_loss(y, grid)).epsilon(1e-14));
  const auto path = std::filesystem::temp_directory_path() / "stcl_ldl_stencil.csv";
  ldl::write_stencil_csv(path, rows);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "time_s,d2_l1,weight");
  std::filesystem::remove(path);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "stcl/errors.hpp"
#include "stcl/gradcheck.hpp"
#include "stcl/lal.hpp"
#include "test_support.hpp"

using stcl::Tensor;
namespace ad = stcl::ad;
namespace lal = stcl::lal;

namespace {

// Plain-loop reference for the whole spatial chain, independent of the tape.
double reference_z_distance_loss(const std::vector<std::vector<Tensor>>& patients, const lal::ShrinkageConfig& cfg) {
  double outer = 0.0;
  for (const auto& xs : patients) {
    std::vector<std::vector<double>> zs;
    for (const auto& x : xs) {
      const std::size_t c = x.dim(0);
      const std::size_t s = x.size() / c;
      std::vector<double> centered(x.begin(), x.end());
      for (std::size_t i = 0; i < c; ++i) {
        double m = 0.0;
        for (std::size_t j = 0; j < s; ++j) m += centered[i * s + j];
        m /= static_cast<double>(s);
        for (std::size_t j = 0; j < s; ++j) centered[i * s + j] -= m;
      }
      std::vector<double> a(c * c, 0.0);
      for (std::size_t i = 0; i < c; ++i)
        for (std::size_t k = 0; k < c; ++k) {
          double acc = 0.0;
          for (std::size_t j = 0; j < s; ++j) acc += centered[i * s + j] * centered[k * s + j];
          a[i * c + k] = (1.0 - cfg.gamma) * acc / static_cast<double>(s - 1) + (i == k ? cfg.gamma + cfg.jitter : 0.0);
        }
      std::vector<double> l(c * c, 0.0);
      for (std::size_t j = 0; j < c; ++j) {
        double d = a[j * c + j];
        for (std::size_t k = 0; k < j; ++k) d -= l[j * c + k] * l[j * c + k];
        l[j * c + j] = std::sqrt(d);
        for (std::size_t i = j + 1; i < c; ++i) {
          double v = a[i * c + j];
          for (std::size_t k = 0; k < j; ++k) v -= l[i * c + k] * l[j * c + k];
          l[i * c + j] = v / l[j * c + j];
        }
      }
      std::vector<double> z;
      for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < i; ++j) z.push_back(l[i * c + j]);
      for (std::size_t i = 0; i < c; ++i) z.push_back(std::log(l[i * c + i]));
      zs.push_back(z);
    }
    std::vector<double> bar(zs.front().size(), 0.0);
    for (const auto& z : zs)
      for (std::size_t j = 0; j < z.size(); ++j) bar[j] += z[j] / static_cast<double>(zs.size());
    double inner = 0.0;
    for (const auto& z : zs)
      for (std::size_t j = 0; j < z.size(); ++j) inner += (z[j] - bar[j]) * (z[j] - bar[j]);
    outer += inner / static_cast<double>(zs.size());
  }
  return outer / static_cast<double>(patients.size());
}

double loss_of(const std::vector<std::vector<Tensor>>& patients, const lal::ShrinkageConfig& cfg = {}) {
  ad::Tape tape;
  lal::PatientLatents latents;
  for (std::size_t p = 0; p < patients.size(); ++p)
    for (const auto& x : patients[p]) latents["p" + std::to_string(p)].push_back(tape.constant(x));
  return lal::spatial_loss(latents, cfg).value().item();
}

}  // namespace

TEST_CASE("center_spatial") {
  CHECK(lal::center_spatial(Tensor({2, 3}, {5, 5, 5, -1, -1, -1})) == Tensor::zeros({2, 3}));
  CHECK(lal::center_spatial(Tensor({1, 3}, {1, 2, 3})) == Tensor({1, 3}, {-1, 0, 1}));
  std::mt19937_64 rng(1);
  const Tensor c = lal::center_spatial(stcl::test::random_normal({4, 64}, rng, 10.0));
  for (std::size_t i = 0; i < 4; ++i) {
    double m = 0.0;
    for (std::size_t j = 0; j < 64; ++j) m += c.at(i, j);
    CHECK(std::abs(m / 64.0) <= 1e-12);
  }
}

TEST_CASE("covariance") {
  CHECK(lal::covariance(Tensor::zeros({2, 5})) == Tensor::zeros({2, 2}));
  CHECK(lal::covariance(Tensor({2, 3}, {-1, 0, 1, -2, 0, 2})) == Tensor({2, 2}, {1, 2, 2, 4}));
  CHECK(lal::covariance(Tensor({1, 2}, {-1, 1})) == Tensor({1, 1}, {2}));
  CHECK_THROWS_AS(lal::covariance(Tensor({2, 1}, {0, 0})), stcl::ContractViolation);
}

TEST_CASE("shrink") {
  const Tensor sigma({2, 2}, {1, 2, 2, 4});
  const Tensor full = lal::shrink(sigma, {1.0, 1e-6});
  CHECK(full == stcl::scaled(Tensor::identity(2), 1.0 + 1e-6));
  const Tensor none = lal::shrink(sigma, {0.0, 1e-6});
  CHECK(none == Tensor({2, 2}, {1 + 1e-6, 2, 2, 4 + 1e-6}));
  const Tensor half = lal::shrink(sigma, {0.5, 1e-6});
  CHECK(half[0] == doctest::Approx(1.000001).epsilon(1e-14));
  CHECK(half[1] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(half[2] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(half[3] == doctest::Approx(2.500001).epsilon(1e-14));
  CHECK_THROWS_AS(lal::shrink(Tensor({2, 2}, {1, 0.5, 0.4, 1}), {}), stcl::ContractViolation);
  CHECK_THROWS_AS(lal::shrink(sigma, {1.5, 1e-6}), stcl::ConfigError);
  CHECK_THROWS_AS(lal::shrink(sigma, {0.1, 0.0}), stcl::ConfigError);
}

TEST_CASE("log_cholesky_vec") {
  CHECK(lal::log_cholesky_vec(Tensor::identity(3)) == Tensor::zeros({6}));
  const Tensor z = lal::log_cholesky_vec(Tensor({2, 2}, {4, 0, 0, 9}));
  CHECK(z[0] == 0.0);
  CHECK(z[1] == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK(z[2] == doctest::Approx(std::log(3.0)).epsilon(1e-14));
  const Tensor z2 = lal::log_cholesky_vec(Tensor({2, 2}, {4, 2, 2, 5}));
  CHECK(z2[0] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(z2[1] == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK(z2[2] == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK(lal::log_cholesky_vec(Tensor({1, 1}, {4})) == Tensor({1}, {std::log(2.0)}));
  CHECK_THROWS_AS(lal::log_cholesky_vec(Tensor({2, 2}, {1, 2, 2, 1})), stcl::FactorizationError);
}

TEST_CASE("strict-lower layout is row-major") {
  // L = [[1,0,0],[2,1,0],[3,4,1]] → strict lower (L21, L31, L32) = (2, 3, 4).
  const Tensor l({3, 3}, {1, 0, 0, 2, 1, 0, 3, 4, 1});
  const Tensor z = lal::log_cholesky_vec(stcl::matmul(l, l, false, true));
  CHECK(z[0] == doctest::Approx(2.0));
  CHECK(z[1] == doctest::Approx(3.0));
  CHECK(z[2] == doctest::Approx(4.0));
  for (std::size_t i = 3; i < 6; ++i) CHECK(std::abs(z[i]) <= 1e-12);
}

TEST_CASE("log-Cholesky round trip") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t c = 1 + static_cast<std::size_t>(trial % 5);
    const Tensor a = stcl::test::random_normal({c, c}, rng);
    const Tensor pd = stcl::add(stcl::matmul(a, a, false, true), Tensor::identity(c));
    const Tensor l = lal::unvec_log_cholesky(lal::log_cholesky_vec(pd), c);
    CHECK(stcl::test::max_abs_diff(stcl::matmul(l, l, false, true), pd) <= 1e-9 * stcl::max_abs(pd));
  }
}

TEST_CASE("covariance_stats fields agree") {
  std::mt19937_64 rng(2);
  const Tensor x = stcl::test::random_normal({4, 8, 8}, rng);
  const auto stats = lal::covariance_stats(x, {});
  CHECK(stats.z.size() == 10);
  const Tensor l = lal::unvec_log_cholesky(stats.z, 4);
  CHECK(stcl::test::max_abs_diff(l, stats.lower) <= 1e-12);
  CHECK(stcl::test::max_abs_diff(stcl::matmul(l, l, false, true), stats.sigma_tilde) <= 1e-9 * stcl::max_abs(stats.sigma_tilde));
  CHECK(stats.sigma == stcl::transpose(stats.sigma));
}

TEST_CASE("patient_template") {
  CHECK_THROWS_AS(lal::patient_template(std::vector<Tensor>{}), stcl::ContractViolation);
  const std::vector<Tensor> one{Tensor({2}, {1.5, -3})};
  CHECK(lal::patient_template(one).mean == one[0]);
  const std::vector<Tensor> two{Tensor({1}, {0}), Tensor({1}, {2})};
  const auto t = lal::patient_template(two);
  CHECK(t.mean == Tensor({1}, {1}));
  CHECK(t.count == 2);
  std::mt19937_64 rng(4);
  std::vector<Tensor> three;
  for (int i = 0; i < 3; ++i) three.push_back(stcl::test::random_normal({6}, rng));
  const Tensor m = lal::patient_template(three).mean;
  for (std::size_t j = 0; j < 6; ++j) CHECK(m[j] == doctest::Approx((three[0][j] + three[1][j] + three[2][j]) / 3.0).epsilon(1e-14));
}

TEST_CASE("spatial_loss examples") {
  std::mt19937_64 rng(5);
  const Tensor x = stcl::test::random_normal({3, 4, 4}, rng);
  CHECK(loss_of({{x, x, x}}) == 0.0);

  // Single-channel latents with z = log L11 = log sqrt(σ̃); pick σ̃ so z ∈ {0, 2}.
  // σ̃ = (1−γ)σ + γ + ε; with γ = 0, ε = 1e-6, σ = e^{2z} − ε.
  const lal::ShrinkageConfig cfg{0.0, 1e-6};
  // Samples {−a, 0, a} have unbiased variance a².
  auto latent_with_z = [&](double z) {
    const double a = std::sqrt(std::exp(2.0 * z) - 1e-6);
    return Tensor({1, 3}, {-a, 0.0, a});
  };
  const double one_patient = loss_of({{latent_with_z(0.0), latent_with_z(2.0)}}, cfg);
  CHECK(one_patient == doctest::Approx(1.0).epsilon(1e-12));

  const double sqrt3 = std::sqrt(3.0);
  // Second patient with z ∈ {1 − √3, 1 + √3} has per-patient loss 3.
  const double two_patients =
      loss_of({{latent_with_z(0.0), latent_with_z(2.0)}, {latent_with_z(1.0 - sqrt3), latent_with_z(1.0 + sqrt3)}}, cfg);
  CHECK(two_patients == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("spatial_loss contracts") {
  ad::Tape tape;
  lal::PatientLatents empty;
  CHECK_THROWS_AS(lal::spatial_loss(empty, {}), stcl::ContractViolation);
  lal::PatientLatents no_times;
  no_times["a"] = {};
  CHECK_THROWS_AS(lal::spatial_loss(no_times, {}), stcl::ContractViolation);
  lal::PatientLatents mismatched;
  mismatched["a"] = {tape.constant(Tensor::filled({2, 2, 2}, 1.0)), tape.constant(Tensor::filled({2, 4}, 1.0))};
  CHECK_THROWS_AS(lal::spatial_loss(mismatched, {}), stcl::ContractViolation);
}

TEST_CASE("spatial_loss matches a plain-loop reference") {
  std::mt19937_64 rng(6);
  const lal::ShrinkageConfig cfg{};
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::vector<Tensor>> patients(1 + trial % 3);
    for (auto& p : patients)
      for (int t = 0; t < 2 + trial % 4; ++t) p.push_back(stcl::test::random_normal({3, 4, 4}, rng));
    const double ref = reference_z_distance_loss(patients, cfg);
    CHECK(std::abs(loss_of(patients, cfg) - ref) <= 1e-10 * std::max(1.0, ref));
  }
}

TEST_CASE("spatial_loss invariants") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Tensor> xs;
    for (int t = 0; t < 5; ++t) xs.push_back(stcl::test::random_normal({3, 4, 4}, rng));
    const double base = loss_of({xs});
    CHECK(base > 0.0);

    std::vector<Tensor> shuffled = xs;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    CHECK(loss_of({shuffled}) == base);
  }
}

TEST_CASE("uniform scaling of one patient") {
  // Scaling by k multiplies L by k: the log-diagonal block shifts by log k
  // (cancelling in d²), the strict-lower block scales by k.
  std::mt19937_64 rng(12);
  const lal::ShrinkageConfig no_shrink{0.0, 1e-12};
  const double k = 3.7;
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = stcl::test::random_normal({3, 4, 4}, rng);
    const Tensor z = lal::covariance_stats(x, no_shrink).z;
    const Tensor zk = lal::covariance_stats(stcl::scaled(x, k), no_shrink).z;
    for (std::size_t i = 0; i < 3; ++i) CHECK(zk[i] == doctest::Approx(k * z[i]).epsilon(1e-9));
    for (std::size_t i = 3; i < 6; ++i) CHECK(zk[i] - z[i] == doctest::Approx(std::log(k)).epsilon(1e-9));

    // Single-channel latents have no strict-lower block, so the loss is invariant.
    std::vector<Tensor> xs, scaled_xs;
    for (int t = 0; t < 5; ++t) {
      xs.push_back(stcl::test::random_normal({1, 4, 4}, rng));
      scaled_xs.push_back(stcl::scaled(xs.back(), k));
    }
    const double a = loss_of({xs}, no_shrink);
    CHECK(std::abs(a - loss_of({scaled_xs}, no_shrink)) <= 1e-9 * std::max(1.0, a));
  }
}

TEST_CASE("spatial_loss gradient matches finite differences") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<Tensor> xs;
    for (int t = 0; t < 4; ++t) xs.push_back(stcl::test::random_normal({3, 4, 4}, rng));
    auto f = [](ad::Tape&, std::span<const ad::Var> p) {
      lal::PatientLatents latents;
      latents["p"] = std::vector<ad::Var>(p.begin(), p.end());
      return lal::spatial_loss(latents, {});
    };
    CHECK(ad::gradient_check(f, xs, 1e-5).worst() <= 1e-4);
  }
}

TEST_CASE("template is held constant") {
  // With one time point, z equals the template, so the loss and its gradient vanish.
  std::mt19937_64 rng(9);
  ad::Tape tape;
  const ad::Var x = tape.variable(stcl::test::random_normal({3, 4, 4}, rng));
  lal::PatientLatents latents;
  latents["p"] = {x};
  const ad::Var loss = lal::spatial_loss(latents, {});
  CHECK(loss.value().item() == 0.0);
  CHECK(stcl::max_abs(tape.backward(loss).wrt(x)) == 0.0);
}

TEST_CASE("template distances and CSV dump") {
  std::mt19937_64 rng(10);
  std::vector<Tensor> xs;
  for (int t = 0; t < 3; ++t) xs.push_back(stcl::test::random_normal({2, 4, 4}, rng));
  const auto d2 = lal::template_distances(xs, {});
  REQUIRE(d2.size() == 3);
  double mean = (d2[0] + d2[1] + d2[2]) / 3.0;
  CHECK(mean == doctest::Approx(loss_of({xs})).epsilon(1e-12));

  const auto path = std::filesystem::temp_directory_path() / "stcl_lal_distances.csv";
  const std::vector<double> times{0.0, 12.5, 30.25};
  lal::write_distance_csv(path, times, d2);
  std::ifstream in(path);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == "time_s,d2");
  CHECK(row.rfind("0.000000,", 0) == 0);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(lal::write_distance_csv(path, std::vector<double>{1.0}, d2), stcl::ContractViolation);
}

#pragma once

// Latent alignment: per-time channel covariance of a clean-latent estimate,
// shrunk to a positive definite matrix, mapped to a Euclidean vector through
// its log-Cholesky factor, and pulled toward the patient's mean vector.

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "stcl/autodiff.hpp"

namespace stcl::lal {

struct ShrinkageConfig {
  double gamma = 0.05;
  double jitter = 1e-6;

  void validate() const;
};

// c×h×w (or already c×s) → c×s.
ad::Var flatten_latent(const ad::Var& x0);
// Subtracts each channel's spatial mean.
ad::Var center_spatial(const ad::Var& x);
// Unbiased (1/(s-1)) channel covariance of a centered c×s matrix.
ad::Var covariance(const ad::Var& centered);
// (1-γ)Σ + γI + εI.
ad::Var shrink(const ad::Var& sigma, const ShrinkageConfig& cfg);
// [strict-lower entries of chol(Σ̃), row-major; log diag(chol(Σ̃))], length c(c+1)/2.
ad::Var log_cholesky_vec(const ad::Var& sigma_tilde);
// x̂₀ (c×h×w) → z_t through the whole chain above.
ad::Var latent_vector(const ad::Var& x0, const ShrinkageConfig& cfg);

Tensor center_spatial(const Tensor& x);
Tensor covariance(const Tensor& centered);
Tensor shrink(const Tensor& sigma, const ShrinkageConfig& cfg);
Tensor log_cholesky_vec(const Tensor& sigma_tilde);
// Inverse layout of log_cholesky_vec: z → lower-triangular L.
Tensor unvec_log_cholesky(const Tensor& z, std::size_t channels);

struct CovarianceStats {
  Tensor sigma;
  Tensor sigma_tilde;
  Tensor lower;
  Tensor z;
};

CovarianceStats covariance_stats(const Tensor& x0, const ShrinkageConfig& cfg);

struct PatientTemplate {
  Tensor mean;
  std::size_t count = 0;
};

// Coordinatewise mean. Each coordinate is summed in sorted order, so the
// result does not depend on the order of z_list.
PatientTemplate patient_template(std::span<const Tensor> z_list);

// Patient id → clean-latent predictions (c×h×w each) of that patient's time points.
using PatientLatents = std::map<std::string, std::vector<ad::Var>>;

// Mean over patients of the per-patient mean squared distance ‖z_t − z̄‖².
// z̄ is held constant (no gradient flows into the template).
ad::Var spatial_loss(const PatientLatents& latents, const ShrinkageConfig& cfg);

// Per-time d_t² for one patient (values only), in input order.
std::vector<double> template_distances(std::span<const Tensor> x0s, const ShrinkageConfig& cfg);

// CSV rows "time_s,d2".
void write_distance_csv(const std::filesystem::path& path, std::span<const double> times,
                        std::span<const double> d2);

}  // namespace stcl::lal

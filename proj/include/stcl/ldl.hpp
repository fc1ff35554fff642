#pragma once

// Latent difference learning: a dense time grid built by inserting uniformly
// spaced points between acquisitions, the weighted three-point second
// difference on that non-uniform grid, and its L1 temporal loss.

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <vector>

#include "stcl/autodiff.hpp"

namespace stcl::ldl {

inline constexpr double kDefaultDelta = 1e-6;
// Times closer than this collapse to one grid point.
inline constexpr double kDedupTolerance = 1e-9;

enum class Provenance { Acquired, Intermediate };

struct DenseTimeGrid {
  std::vector<double> times;
  std::vector<Provenance> provenance;
  std::vector<std::size_t> insertions;  // K_i per original interval
  double delta = kDefaultDelta;
  std::size_t pre_dedup_size = 0;

  std::size_t size() const { return times.size(); }
  std::size_t intermediate_count() const;
};

DenseTimeGrid build_dense_grid(std::span<const double> acquired, std::span<const std::size_t> insertions,
                               double delta = kDefaultDelta);
// Same K for every interval.
DenseTimeGrid build_dense_grid(std::span<const double> acquired, std::size_t insertions,
                               double delta = kDefaultDelta);

struct StencilCoefficients {
  double h0 = 0.0;
  double h1 = 0.0;
  double weight = 0.0;  // 1 / (1 + h0 + h1)
};

StencilCoefficients stencil_coefficients(double t_prev, double t_k, double t_next, double delta);

// Weighted second difference
//   D₂ = 2·w·( y₋/(h0(h0+h1)) − y/(h0·h1) + y₊/(h1(h0+h1)) ),
// evaluated as 2w/(h0·h1·(h0+h1)) · (h0·(y₊ − y) − h1·(y − y₋)), which is the
// same polynomial but vanishes exactly on constant input.
ad::Var central_diff_d2(const ad::Var& y_prev, const ad::Var& y_k, const ad::Var& y_next, double t_prev,
                        double t_k, double t_next, double delta);

struct StencilTerms {
  double h0 = 0.0;
  double h1 = 0.0;
  double weight = 0.0;
  Tensor d2;
};

StencilTerms central_diff_d2(const Tensor& y_prev, const Tensor& y_k, const Tensor& y_next, double t_prev,
                             double t_k, double t_next, double delta);

// Three-point second difference without the interval weight.
Tensor second_difference(const Tensor& y_prev, const Tensor& y_k, const Tensor& y_next, double t_prev,
                         double t_k, double t_next, double delta);

struct DenseLatentSeries {
  std::vector<ad::Var> latents;  // aligned with grid indices
};

using IntermediateSampler = std::function<ad::Var(double time)>;

// Acquired grid points take the anchored prediction, intermediate points call
// the sampler once each. Anchored keys are matched within kDedupTolerance.
DenseLatentSeries assemble_dense(const DenseTimeGrid& grid, const std::map<double, ad::Var>& anchored,
                                 const IntermediateSampler& sampler);

// Mean over interior indices k = 1..T-2 of ‖D₂ᵏ‖₁.
ad::Var temporal_loss(const DenseLatentSeries& series, const DenseTimeGrid& grid);
double temporal_loss(std::span<const Tensor> series, const DenseTimeGrid& grid);

struct StencilDiagnostic {
  double time = 0.0;
  double l1 = 0.0;
  double weight = 0.0;
};

std::vector<StencilDiagnostic> stencil_diagnostics(std::span<const Tensor> series, const DenseTimeGrid& grid);
// CSV rows "time_s,d2_l1,weight".
void write_stencil_csv(const std::filesystem::path& path, std::span<const StencilDiagnostic> rows);

}  // namespace stcl::ldl

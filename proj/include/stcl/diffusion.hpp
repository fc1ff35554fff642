#pragma once

// Toy latent diffusion: a linear β schedule, the forward noising process, an
// MLP noise predictor conditioned on diffusion step, acquisition time and the
// pre-contrast latent, x̂₀ recovery, and a deterministic sampling chain.
//
// Latents are handled as flat rows; a batch is a B×n matrix.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <vector>

#include "stcl/autodiff.hpp"

namespace stcl::diffusion {

struct ScheduleConfig {
  std::size_t steps = 100;
  double beta_start = 1e-4;
  double beta_end = 0.1;

  void validate() const;
};

struct NoiseSchedule {
  // Index τ−1 holds step τ ∈ [1, T].
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  std::size_t steps() const noexcept { return beta.size(); }
  double alpha_bar_at(std::size_t tau) const;
};

NoiseSchedule build_schedule(std::size_t steps, double beta_start, double beta_end);
NoiseSchedule build_schedule(const ScheduleConfig& cfg);
// Arbitrary nondecreasing β values in (0, 1).
NoiseSchedule schedule_from_betas(std::vector<double> betas);

// √ᾱ·x0 + √(1−ᾱ)·ε.
Tensor q_sample(const Tensor& x0, const Tensor& eps, double alpha_bar);
// (x_τ − √(1−ᾱ)·ε̂)/√ᾱ, differentiable through ε̂.
ad::Var recover_x0(const Tensor& x_tau, const ad::Var& eps_pred, double alpha_bar);
Tensor recover_x0(const Tensor& x_tau, const Tensor& eps_pred, double alpha_bar);
// Row b of the B×n batch uses alpha_bar[b].
ad::Var recover_x0_rows(const Tensor& x_tau, const ad::Var& eps_pred, std::span<const double> alpha_bar);

// [sin(2πx/P_i), cos(2πx/P_i)] for dim/2 periods spaced geometrically in [min_period, max_period].
std::vector<double> sinusoidal_embedding(double x, std::size_t dim, double min_period, double max_period);

struct DenoiserConfig {
  std::size_t latent_size = 256;
  std::vector<std::size_t> hidden{128, 128};
  std::size_t step_embed = 16;
  std::size_t time_embed = 16;
  double step_min_period = 4.0;
  double step_max_period = 400.0;
  double time_min_period = 20.0;
  double time_max_period = 2000.0;
  double residual_scale = 0.5;  // typical spread of x₀ − pre per latent entry

  std::size_t input_size() const { return 2 * latent_size + step_embed + time_embed; }
  // Layer widths from input to output.
  std::vector<std::size_t> widths() const;
  void validate() const;
};

struct ConditioningContext {
  double time = 0.0;  // seconds after injection
  Tensor pre_contrast;
};

struct DenoiserParams {
  DenoiserConfig config;
  // W0, b0, W1, b1, ...; W_l is in×out, b_l is 1×out.
  std::vector<Tensor> tensors;

  static DenoiserParams zeros(const DenoiserConfig& cfg);
  // Scaled normal weights (sd 1/√fan_in), zero biases.
  static DenoiserParams initialize(const DenoiserConfig& cfg, std::uint64_t seed);

  std::size_t layer_count() const { return tensors.size() / 2; }
  bool all_finite() const;
};

// Builds the B×input matrix [x_τ, step embedding, time embedding, pre-contrast].
Tensor denoiser_input(const DenoiserConfig& cfg, const Tensor& x_tau, std::span<const std::size_t> taus,
                      std::span<const double> times, const Tensor& pre_contrast);

// Forward pass on a tape. `weights` are the tape handles of params.tensors in order.
// Preconditioned on the enhancement residual y = x₀ − pre. With s = σ/√ᾱ and
// ỹ = x_τ/√ᾱ − pre, the MLP sees ỹ/√(s² + r²) in place of x_τ and its output F
// gives ŷ = r²/(s² + r²)·ỹ + s·r/√(s² + r²)·F, r being residual_scale. Neither
// the noise nor the anatomy has to pass through the narrower hidden layers.
// With F = 0 the prediction is the optimal linear shrinkage of ỹ.
ad::Var predict_noise(std::span<const ad::Var> weights, const DenoiserConfig& cfg, const Tensor& input,
                      std::span<const double> alpha_bar);

// Single-sample ε̂ for x_τ (any shape with latent_size elements).
Tensor denoise_predict(const DenoiserParams& params, const NoiseSchedule& schedule, const Tensor& x_tau,
                       std::size_t tau, const ConditioningContext& ctx);

ad::Var diffusion_loss(const Tensor& eps, const ad::Var& eps_pred);
double diffusion_loss(const Tensor& eps, const Tensor& eps_pred);

// Evenly strided steps from T down to 1 (length `steps`).
std::vector<std::size_t> sampling_steps(std::size_t total, std::size_t steps);

struct ChainRequest {
  std::vector<double> times;  // one per row
  Tensor pre_contrast;        // B×n
  Tensor noise;               // B×n start latent
  std::size_t steps = 10;
};

// Deterministic (variance-free) sampling. Every step but the last runs off the
// tape; the last step's ε̂ is taped through `weights`, so the returned x̂₀
// carries gradients into the denoiser only through the final step.
ad::Var sample_chain(std::span<const ad::Var> weights, const DenoiserParams& params, const NoiseSchedule& schedule,
                     const ChainRequest& request);
// Value-only chain.
Tensor sample_chain(const DenoiserParams& params, const NoiseSchedule& schedule, const ChainRequest& request);
// One sample with start noise drawn from `seed`.
Tensor sample_chain(const DenoiserParams& params, const NoiseSchedule& schedule, const ConditioningContext& ctx,
                    std::size_t steps, std::uint64_t seed);

Tensor standard_normal(Shape shape, std::mt19937_64& rng);

// Checkpoint: one tensor file per parameter plus checkpoint.json.
void save_checkpoint(const std::filesystem::path& dir, const DenoiserParams& params, const ScheduleConfig& schedule,
                     std::uint64_t seed);
struct Checkpoint {
  DenoiserParams params;
  ScheduleConfig schedule;
  std::uint64_t seed = 0;
};
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace stcl::diffusion

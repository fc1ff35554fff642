#pragma once

// Two-stage training of the latent denoiser on a phantom dataset, evaluation
// on held-out patients, the four-way ablation, hyperparameter sweeps and the
// latent PCA trace.
//
// Stage 1 optimizes L_diff, adding λ_spatial·L_spatial after the warm-up;
// stage 2 optimizes L_diff + λ_temporal·L_temporal over per-patient dense grids.
// Each step trains on one patient's acquisitions.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "stcl/diffusion.hpp"
#include "stcl/lal.hpp"
#include "stcl/metrics.hpp"
#include "stcl/phantom.hpp"

namespace stcl::experiment {

struct TrainConfig {
  double lambda_spatial = 6.0;
  double lambda_temporal = 1.0;
  std::size_t insertions = 2;  // K_i, same for every interval
  double gamma = 0.05;
  double jitter = 1e-6;
  double delta = 1e-6;

  std::size_t epochs = 14;
  std::size_t stage1_epochs = 9;
  std::size_t passes_per_epoch = 30;  // shuffled sweeps over the training patients
  std::size_t batch_size = 16;        // time points per step, all from one patient
  double learning_rate = 1e-3;
  double warmup_fraction = 0.2;       // of stage-1 steps, diffusion only
  std::size_t sample_steps = 10;      // chain length at evaluation
  // Chain length for training-time intermediates. Only the last step is taped,
  // and at small τ it barely depends on the weights, so a single step from pure
  // noise is what lets L_temporal reach the denoiser there.
  std::size_t intermediate_steps = 1;

  std::size_t holdout = 5;  // last patients of the dataset are held out
  std::uint64_t seed = 0;

  std::vector<std::size_t> hidden{128, 128};
  diffusion::ScheduleConfig schedule;

  void validate() const;
  lal::ShrinkageConfig shrinkage() const { return {gamma, jitter}; }
  bool lal_active() const { return lambda_spatial > 0.0; }
  bool ldl_active() const { return lambda_temporal > 0.0 && insertions > 0; }
};

nlohmann::json to_json(const TrainConfig& cfg);
// Unknown keys and out-of-range values raise ConfigError.
TrainConfig config_from_json(const nlohmann::json& j);
TrainConfig load_config(const std::filesystem::path& path);

struct LossRow {
  std::size_t step = 0;
  int stage = 1;
  double diffusion = 0.0;
  double spatial = 0.0;
  double temporal = 0.0;
  double total = 0.0;
};

struct RunRecord {
  TrainConfig config;
  std::vector<LossRow> losses;
  double seconds = 0.0;
};

struct TrainResult {
  diffusion::DenoiserParams params;
  RunRecord record;
};

// A loss turned NaN or infinite. The offending batch is written to dump_path when one was requested.
struct NonFiniteLoss : std::runtime_error {
  NonFiniteLoss(const std::string& what, std::filesystem::path dump)
      : std::runtime_error(what), dump_path(std::move(dump)) {}
  std::filesystem::path dump_path;
};

struct TrainOptions {
  std::filesystem::path dump_dir;  // empty: no diagnostic dump
  std::function<void(const LossRow&)> on_step;
};

// Patient indices used for training and for evaluation.
std::vector<std::size_t> train_indices(const phantom::Dataset& data, const TrainConfig& cfg);
std::vector<std::size_t> eval_indices(const phantom::Dataset& data, const TrainConfig& cfg);

diffusion::DenoiserConfig denoiser_config(const phantom::Dataset& data, const TrainConfig& cfg);

TrainResult train_stage1(const phantom::Dataset& data, const TrainConfig& cfg, const TrainOptions& opts = {});
TrainResult train_stage2(const diffusion::DenoiserParams& params, const phantom::Dataset& data,
                         const TrainConfig& cfg, const TrainOptions& opts = {});
// Both stages; the record holds the concatenated loss curve.
TrainResult train(const phantom::Dataset& data, const TrainConfig& cfg, const TrainOptions& opts = {});

// Produces denormalized images (N×side×side) of one patient at the given times.
using Generator = std::function<Tensor(const phantom::PatientRecord&, std::span<const double>)>;

// Sampling chains share one start latent per patient, drawn from `noise_seed`
// and the patient index, so every time point of a sequence starts from the same noise.
Generator model_generator(const diffusion::DenoiserParams& params, const diffusion::NoiseSchedule& schedule,
                          const phantom::Dataset& data, std::size_t sample_steps, std::uint64_t noise_seed);

// The generator evaluate() uses: cfg.sample_steps and the config's evaluation noise.
Generator evaluation_generator(const diffusion::DenoiserParams& params, const phantom::Dataset& data,
                               const TrainConfig& cfg);

// Clean-latent predictions (N×latent) behind model_generator.
Tensor generate_latents(const diffusion::DenoiserParams& params, const diffusion::NoiseSchedule& schedule,
                        const phantom::PatientRecord& patient, std::span<const double> times,
                        std::size_t sample_steps, const Tensor& start_noise);

struct FrameRow {
  std::string patient;
  double time = 0.0;
  double ssim = 0.0;
  double psnr = 0.0;
  double rmse = 0.0;
};

struct EvalSummary {
  double ssim = 0.0;  // acquisition times after t = 0, raw intensity scale
  double psnr = 0.0;
  double rmse = 0.0;
  double cssim = 0.0;        // generated dense sequence
  double dense_ssim = 0.0;   // generated vs ground truth over the dense grid
  std::size_t patients = 0;
};

struct EvalResult {
  std::vector<FrameRow> dense_rows;        // patients × dense grid
  std::vector<FrameRow> acquisition_rows;  // patients × acquisitions after t = 0
  std::vector<std::pair<std::string, double>> cssim;  // per patient
  EvalSummary summary;

  std::vector<metrics::MetricRow> metric_rows() const;
};

EvalResult evaluate(const Generator& generator, const phantom::Dataset& data, std::span<const std::size_t> patients);
EvalResult evaluate(const diffusion::DenoiserParams& params, const phantom::Dataset& data, const TrainConfig& cfg);

// Mean temporal loss of generated clean latents over each evaluation
// patient's dense grid (acquisitions plus K_i insertions).
double generated_roughness(const diffusion::DenoiserParams& params, const phantom::Dataset& data,
                           const TrainConfig& cfg);

struct AblationRow {
  std::string name;
  TrainConfig config;
  EvalSummary metrics;
  double delta_ssim = 0.0;  // vs baseline
  double delta_cssim = 0.0;
  double delta_psnr = 0.0;
  double delta_rmse = 0.0;
};

// Baseline, +LAL, +LDL and full, all with base.seed.
std::vector<TrainConfig> ablation_configs(const TrainConfig& base);
std::vector<AblationRow> run_ablation(const phantom::Dataset& data, const TrainConfig& base,
                                      const std::filesystem::path& out_dir = {});
void write_ablation_csv(const std::filesystem::path& path, std::span<const AblationRow> rows);

enum class SweepKnob { LambdaSpatial, Insertions };
SweepKnob knob_from_name(const std::string& name);
const char* knob_name(SweepKnob k);

struct SweepRow {
  double value = 0.0;
  EvalSummary metrics;
};

std::vector<SweepRow> run_sweep(const phantom::Dataset& data, const TrainConfig& base, SweepKnob knob,
                                std::span<const double> values, const std::filesystem::path& out_dir = {});
void write_sweep_csv(const std::filesystem::path& path, SweepKnob knob, std::span<const SweepRow> rows);

struct LatentTrace {
  std::vector<double> times;
  metrics::PcaResult pca;
  double rank_correlation = 0.0;  // Spearman of pc1 vs time
};

LatentTrace latent_trace(const diffusion::DenoiserParams& params, const phantom::Dataset& data,
                         std::size_t patient, std::span<const double> times, const TrainConfig& cfg);
// PCA of arbitrary latent rows (N×d) against their times.
LatentTrace trace_from_latents(const Tensor& latents, std::span<const double> times);

// Run directory: config.json, losses.csv, checkpoint/, and after evaluation
// metrics.csv, frames.csv and summary.json.
void write_losses_csv(const std::filesystem::path& path, std::span<const LossRow> rows);
void write_run(const std::filesystem::path& dir, const TrainResult& result);
void write_evaluation(const std::filesystem::path& dir, const EvalResult& eval);
nlohmann::json summary_json(const EvalSummary& s);

}  // namespace stcl::experiment

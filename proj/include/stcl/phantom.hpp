#pragma once

// Synthetic DCE phantom: gamma-variate enhancement per tissue region, random
// per-patient anatomy, the sparse acquisition schedule, a fixed orthonormal
// block-Haar codec, and dataset serialization.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "stcl/tensor.hpp"

namespace stcl::phantom {

enum class Tissue : std::uint8_t { Background = 0, Artery = 1, Parenchyma = 2, Delayed = 3 };
inline constexpr std::size_t kTissueCount = 4;

const char* tissue_name(Tissue t);

struct CurveParams {
  double amplitude = 0.0;     // intensity units
  double onset = 0.0;         // s
  double time_to_peak = 1.0;  // s
  double shape = 1.0;         // gamma-variate α
  double washout = 0.0;       // 1/s
};

struct TissueRegion {
  Tissue label = Tissue::Background;
  CurveParams curve;
  std::vector<std::uint8_t> mask;  // side×side, row-major
};

// A·(u^α)·e^{α(1−u)} with u = (t−t₀)/τ_p for t > t₀, times e^{−washout·max(0, t−t₀−τ_p)}.
double enhancement_curve(const CurveParams& c, double t);
// Background never enhances.
double enhancement_curve(const TissueRegion& region, double t);

struct PhantomConfig {
  std::size_t side = 32;
  double intensity_range = 1000.0;
  double noise_sd = 8.0;  // acquisitions only; ground truth is noise-free
  std::size_t dense_step = 5;
  double dense_end = 300.0;

  void validate() const;
};

struct Anatomy {
  std::size_t side = 0;
  double intensity_range = 0.0;
  std::vector<TissueRegion> regions;  // one per Tissue, indexed by label
  std::vector<std::uint8_t> labels;   // side×side
  Tensor baseline;                    // side×side

  const TissueRegion& region(Tissue t) const { return regions[static_cast<std::size_t>(t)]; }
};

Anatomy random_anatomy(const PhantomConfig& cfg, std::mt19937_64& rng);

// Shortest gap between frames of the arterial and portal blocks, in seconds.
inline constexpr double kMinSpacing = 2.0;

// t=0, 6 times in [15,37], 6 in [50,72] (each block uniform subject to
// kMinSpacing), then 90/150/300 each ±5 s; rounded to 6 decimals, strictly increasing.
std::vector<double> acquisition_schedule(std::uint64_t seed);

// Baseline + region curves at t + N(0, noise_sd²), clipped to [0, range].
Tensor render(const Anatomy& anatomy, double t, double noise_sd, std::uint64_t seed);

// ROI mask of one tissue as a side×side 0/1 tensor.
Tensor tissue_mask(const Anatomy& anatomy, Tissue t);

// Image intensities ↔ model scale [−1, 1].
Tensor normalize(const Tensor& image, double range);
Tensor denormalize(const Tensor& image, double range);

// Fixed linear codec: each 4×4 pixel block maps to 4 coefficients (mean,
// horizontal, vertical and diagonal Haar patterns, entries ±1/4). Rows are
// orthonormal, so decode = transpose.
class LatentCodec {
 public:
  static LatentCodec block_haar(std::size_t side);
  static LatentCodec from_matrix(Tensor matrix, std::size_t side);

  const Tensor& matrix() const noexcept { return matrix_; }
  std::size_t side() const noexcept { return side_; }
  Shape latent_shape() const { return {4, side_ / 4, side_ / 4}; }
  std::size_t latent_size() const { return matrix_.dim(0); }

  // side×side image → 4×(side/4)×(side/4).
  Tensor encode(const Tensor& image) const;
  Tensor decode(const Tensor& latent) const;
  // Row-batched versions on flat rows: B×side² ↔ B×latent_size.
  Tensor encode_rows(const Tensor& images) const;
  Tensor decode_rows(const Tensor& latents) const;

 private:
  Tensor matrix_;  // latent_size × side²
  std::size_t side_ = 0;
};

struct PatientRecord {
  std::string id;
  std::vector<double> times;  // acquisition schedule, times[0] = 0 is pre-contrast
  Tensor acquired;            // T×side×side, noisy
  Tensor truth;               // T×side×side, noise-free at the same times
  Tensor latents;             // T×4×h×w, codec(normalize(acquired))
  Tensor dense;               // D×side×side, noise-free on the dense grid
  Tensor labels;              // side×side tissue labels
};

struct Dataset {
  PhantomConfig config;
  std::uint64_t seed = 0;
  std::vector<double> dense_times;
  LatentCodec codec;
  std::vector<PatientRecord> patients;
};

std::vector<double> dense_times(const PhantomConfig& cfg);

// Generates in memory; write_dataset adds manifest.json plus tensor files.
Dataset make_dataset(std::size_t n_patients, std::uint64_t seed, const PhantomConfig& cfg = {});
void write_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace stcl::phantom

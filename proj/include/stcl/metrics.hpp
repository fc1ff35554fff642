#pragma once

// Image quality and temporal consistency metrics, ROI kinetics curves, and a
// PCA projection for latent trajectories.

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "stcl/tensor.hpp"

namespace stcl::metrics {

inline constexpr double kPsnrCap = 100.0;

struct SsimConfig {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double range = 1.0;  // L

  double c1() const { return (k1 * range) * (k1 * range); }
  double c2() const { return (k2 * range) * (k2 * range); }
  // Normalized 1-D Gaussian; the 2-D window is its outer product.
  std::vector<double> weights() const;
  void validate() const;
};

double psnr(const Tensor& a, const Tensor& b, double range);
double rmse(const Tensor& a, const Tensor& b);
// a, b are H×W; mean SSIM over every window position fully inside the image.
double ssim(const Tensor& a, const Tensor& b, const SsimConfig& cfg);
// Mean SSIM of adjacent frames. `frames` is N×H×W.
double cssim(const Tensor& frames, const SsimConfig& cfg);
double cssim(std::span<const Tensor> frames, const SsimConfig& cfg);

struct CurveSample {
  double time = 0.0;
  double mean = 0.0;
  double normalized = 0.0;
};

// Masked mean per frame of an N×H×W stack, min-max normalized over the series
// (a constant series maps to 0.5).
std::vector<CurveSample> extract_curve(const Tensor& frames, std::span<const double> times, const Tensor& mask);

struct PcaResult {
  Tensor coords;                     // N×dims
  Tensor components;                 // dims×d, unit rows
  std::vector<double> eigenvalues;   // descending, sample covariance
  std::vector<double> explained;     // eigenvalue / total variance
};

// Rows of `vectors` (N×d) are observations.
PcaResult pca_project(const Tensor& vectors, std::size_t dims = 2);

// Spearman rank correlation with average ranks for ties; 0 if either side is constant.
double spearman(std::span<const double> x, std::span<const double> y);

struct MetricRow {
  std::string patient;
  std::string key;  // time in seconds or adjacent-pair index
  std::string metric;
  double value = 0.0;
  std::string scale;  // "raw" intensities or "normalized"
};

void write_metric_csv(const std::filesystem::path& path, std::span<const MetricRow> rows);
void write_pca_csv(const std::filesystem::path& path, std::span<const double> times, const PcaResult& pca);
void write_curve_csv(const std::filesystem::path& path, const std::string& label, std::span<const CurveSample> curve,
                     bool append = false);

}  // namespace stcl::metrics

#include "stcl/lal.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "stcl/errors.hpp"

namespace stcl::lal {

namespace {

// Selects strict-lower entries (row-major) from a flattened c×c matrix.
Tensor strict_lower_selector(std::size_t c) {
  const std::size_t m = c * (c - 1) / 2;
  std::vector<double> s(c * c * m, 0.0);
  std::size_t col = 0;
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < i; ++j) s[(i * c + j) * m + col++] = 1.0;
  return Tensor({c * c, m}, std::move(s));
}

Tensor diagonal_selector(std::size_t c) {
  std::vector<double> s(c * c * c, 0.0);
  for (std::size_t i = 0; i < c; ++i) s[(i * c + i) * c + i] = 1.0;
  return Tensor({c * c, c}, std::move(s));
}

template <typename Fn>
Tensor on_tape(const Tensor& x, Fn fn) {
  ad::Tape tape;
  return fn(tape.constant(x)).value();
}

// Adds in ascending value order so the total is independent of input order.
ad::Var ordered_sum(std::vector<ad::Var> terms) {
  std::stable_sort(terms.begin(), terms.end(),
                   [](const ad::Var& a, const ad::Var& b) { return a.value().item() < b.value().item(); });
  ad::Var total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = ad::add(total, terms[i]);
  return total;
}

}  // namespace

void ShrinkageConfig::validate() const {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("shrinkage gamma must lie in [0,1]");
  if (!(jitter > 0.0)) throw ConfigError("shrinkage jitter must be positive");
}

ad::Var flatten_latent(const ad::Var& x0) {
  const Shape& s = x0.shape();
  if (s.size() < 2) throw ContractViolation("flatten_latent: need c×h×w or c×s, got " + shape_string(s));
  const std::size_t c = s[0];
  return ad::reshape(x0, {c, x0.value().size() / c});
}

ad::Var center_spatial(const ad::Var& x) {
  if (x.shape().size() != 2) throw ContractViolation("center_spatial: need c×s, got " + shape_string(x.shape()));
  const std::size_t s = x.shape()[1];
  if (s < 1) throw ContractViolation("center_spatial: empty spatial axis");
  ad::Tape& tape = *x.tape();
  const ad::Var averager = tape.constant(Tensor::filled({s, 1}, 1.0 / static_cast<double>(s)));
  const ad::Var spreader = tape.constant(Tensor::filled({1, s}, 1.0));
  return ad::sub(x, ad::matmul(ad::matmul(x, averager), spreader));
}

ad::Var covariance(const ad::Var& centered) {
  if (centered.shape().size() != 2) throw ContractViolation("covariance: need c×s");
  const std::size_t s = centered.shape()[1];
  if (s < 2) throw ContractViolation("covariance: need at least 2 spatial samples, got " + std::to_string(s));
  return ad::scale(ad::matmul(centered, ad::transpose(centered)), 1.0 / static_cast<double>(s - 1));
}

ad::Var shrink(const ad::Var& sigma, const ShrinkageConfig& cfg) {
  cfg.validate();
  const Tensor& v = sigma.value();
  if (v.rank() != 2 || v.dim(0) != v.dim(1)) throw ContractViolation("shrink: need a square matrix");
  const std::size_t c = v.dim(0);
  const double tol = 1e-9 * std::max(1.0, max_abs(v));
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (std::abs(v.at(i, j) - v.at(j, i)) > tol) throw ContractViolation("shrink: input not symmetric");
  const ad::Var ridge = sigma.tape()->constant(scaled(Tensor::identity(c), cfg.gamma + cfg.jitter));
  return ad::add(ad::scale(sigma, 1.0 - cfg.gamma), ridge);
}

ad::Var log_cholesky_vec(const ad::Var& sigma_tilde) {
  const ad::Var lower = ad::cholesky(sigma_tilde);
  const std::size_t c = lower.shape()[0];
  ad::Tape& tape = *lower.tape();
  const ad::Var flat = ad::reshape(lower, {1, c * c});
  const ad::Var diag = ad::matmul(flat, tape.constant(diagonal_selector(c)));
  const ad::Var logdiag = ad::log(diag);
  if (c == 1) return ad::reshape(logdiag, {1});
  const ad::Var strict = ad::matmul(flat, tape.constant(strict_lower_selector(c)));
  const std::vector<ad::Var> parts{strict, logdiag};
  return ad::reshape(ad::concat(parts, 1), {c * (c + 1) / 2});
}

ad::Var latent_vector(const ad::Var& x0, const ShrinkageConfig& cfg) {
  return log_cholesky_vec(shrink(covariance(center_spatial(flatten_latent(x0))), cfg));
}

Tensor center_spatial(const Tensor& x) {
  return on_tape(x, [](const ad::Var& v) { return center_spatial(v); });
}

Tensor covariance(const Tensor& centered) {
  return on_tape(centered, [](const ad::Var& v) { return covariance(v); });
}

Tensor shrink(const Tensor& sigma, const ShrinkageConfig& cfg) {
  return on_tape(sigma, [&](const ad::Var& v) { return shrink(v, cfg); });
}

Tensor log_cholesky_vec(const Tensor& sigma_tilde) {
  return on_tape(sigma_tilde, [](const ad::Var& v) { return log_cholesky_vec(v); });
}

Tensor unvec_log_cholesky(const Tensor& z, std::size_t channels) {
  const std::size_t c = channels;
  if (z.size() != c * (c + 1) / 2) throw ContractViolation("unvec_log_cholesky: length mismatch");
  std::vector<double> l(c * c, 0.0);
  std::size_t k = 0;
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < i; ++j) l[i * c + j] = z[k++];
  for (std::size_t i = 0; i < c; ++i) l[i * c + i] = std::exp(z[k++]);
  return Tensor({c, c}, std::move(l));
}

CovarianceStats covariance_stats(const Tensor& x0, const ShrinkageConfig& cfg) {
  ad::Tape tape;
  const ad::Var sigma = covariance(center_spatial(flatten_latent(tape.constant(x0))));
  const ad::Var tilde = shrink(sigma, cfg);
  const ad::Var z = log_cholesky_vec(tilde);
  return {sigma.value(), tilde.value(), ad::cholesky_factor(tilde.value()), z.value()};
}

PatientTemplate patient_template(std::span<const Tensor> z_list) {
  if (z_list.empty()) throw ContractViolation("patient_template: empty list");
  const std::size_t n = z_list.front().size();
  std::vector<double> mean(n);
  std::vector<double> column(z_list.size());
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t t = 0; t < z_list.size(); ++t) {
      if (z_list[t].size() != n) throw ContractViolation("patient_template: vectors differ in length");
      column[t] = z_list[t][j];
    }
    std::sort(column.begin(), column.end());
    // Offsets from the minimum make identical inputs average to themselves exactly.
    double offset = 0.0;
    for (double v : column) offset += v - column.front();
    mean[j] = column.front() + offset / static_cast<double>(z_list.size());
  }
  return {Tensor(z_list.front().shape(), std::move(mean)), z_list.size()};
}

ad::Var spatial_loss(const PatientLatents& latents, const ShrinkageConfig& cfg) {
  if (latents.empty()) throw ContractViolation("spatial_loss: no patients");
  std::vector<ad::Var> per_patient;
  for (const auto& [id, x0s] : latents) {
    if (x0s.empty()) throw ContractViolation("spatial_loss: patient " + id + " has no latents");
    std::vector<ad::Var> zs;
    std::vector<Tensor> z_values;
    for (const auto& x0 : x0s) {
      if (x0.shape() != x0s.front().shape()) {
        throw ContractViolation("spatial_loss: latent shapes differ within patient " + id);
      }
      zs.push_back(latent_vector(x0, cfg));
      z_values.push_back(zs.back().value());
    }
    const ad::Var anchor = zs.front().tape()->constant(patient_template(z_values).mean);
    std::vector<ad::Var> d2;
    for (const auto& z : zs) d2.push_back(ad::squared_norm(ad::sub(z, anchor)));
    per_patient.push_back(ad::scale(ordered_sum(std::move(d2)), 1.0 / static_cast<double>(zs.size())));
  }
  return ad::scale(ordered_sum(std::move(per_patient)), 1.0 / static_cast<double>(latents.size()));
}

std::vector<double> template_distances(std::span<const Tensor> x0s, const ShrinkageConfig& cfg) {
  std::vector<Tensor> zs;
  for (const auto& x : x0s) zs.push_back(covariance_stats(x, cfg).z);
  const Tensor bar = patient_template(zs).mean;
  std::vector<double> out;
  for (const auto& z : zs) out.push_back(squared_norm(sub(z, bar)));
  return out;
}

void write_distance_csv(const std::filesystem::path& path, std::span<const double> times,
                        std::span<const double> d2) {
  if (times.size() != d2.size()) throw ContractViolation("write_distance_csv: length mismatch");
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string());
  out << "time_s,d2\n";
  char buf[64];
  for (std::size_t i = 0; i < times.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.6f,%.17g\n", times[i], d2[i]);
    out << buf;
  }
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace stcl::lal

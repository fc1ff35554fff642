#include "stcl/ldl.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>

#include "stcl/errors.hpp"

namespace stcl::ldl {

namespace {

struct Candidate {
  double time;
  Provenance provenance;
};

void check_series(std::size_t series_size, const DenseTimeGrid& grid) {
  if (series_size != grid.size()) {
    throw ContractViolation("temporal_loss: series has " + std::to_string(series_size) +
                            " latents for a grid of " + std::to_string(grid.size()));
  }
  if (grid.size() < 3) throw ContractViolation("temporal_loss: need at least 3 grid points");
}

ad::Var stencil(const ad::Var& y_prev, const ad::Var& y_k, const ad::Var& y_next, const StencilCoefficients& c,
                double weight) {
  const double factor = 2.0 * weight / (c.h0 * c.h1 * (c.h0 + c.h1));
  const ad::Var forward = ad::sub(y_next, y_k);
  const ad::Var backward = ad::sub(y_k, y_prev);
  return ad::sub(ad::scale(forward, factor * c.h0), ad::scale(backward, factor * c.h1));
}

}  // namespace

std::size_t DenseTimeGrid::intermediate_count() const {
  return static_cast<std::size_t>(std::count(provenance.begin(), provenance.end(), Provenance::Intermediate));
}

DenseTimeGrid build_dense_grid(std::span<const double> acquired, std::span<const std::size_t> insertions,
                               double delta) {
  if (acquired.size() < 2) throw InputError("dense grid: need at least 2 acquisition times");
  if (insertions.size() != acquired.size() - 1) {
    throw InputError("dense grid: need one insertion count per interval");
  }
  for (std::size_t i = 0; i < acquired.size(); ++i) {
    if (!std::isfinite(acquired[i])) throw InputError("dense grid: non-finite acquisition time");
    if (i > 0 && !(acquired[i] > acquired[i - 1])) {
      throw InputError("dense grid: acquisition times must be strictly increasing");
    }
  }
  if (!(delta >= 0.0)) throw InputError("dense grid: delta must be nonnegative");

  std::vector<Candidate> all;
  for (std::size_t i = 0; i < acquired.size(); ++i) {
    all.push_back({acquired[i], Provenance::Acquired});
    if (i + 1 == acquired.size()) break;
    const double dt = acquired[i + 1] - acquired[i];
    const std::size_t k_count = insertions[i];
    for (std::size_t k = 1; k <= k_count; ++k) {
      all.push_back({acquired[i] + (static_cast<double>(k) / static_cast<double>(k_count + 1)) * dt,
                     Provenance::Intermediate});
    }
  }
  std::stable_sort(all.begin(), all.end(), [](const Candidate& a, const Candidate& b) { return a.time < b.time; });

  DenseTimeGrid grid;
  grid.insertions.assign(insertions.begin(), insertions.end());
  grid.delta = delta;
  grid.pre_dedup_size = all.size();
  for (const auto& c : all) {
    if (!grid.times.empty() && c.time - grid.times.back() <= kDedupTolerance) {
      if (c.provenance == Provenance::Acquired) {
        grid.times.back() = c.time;
        grid.provenance.back() = Provenance::Acquired;
      }
      continue;
    }
    grid.times.push_back(c.time);
    grid.provenance.push_back(c.provenance);
  }
  return grid;
}

DenseTimeGrid build_dense_grid(std::span<const double> acquired, std::size_t insertions, double delta) {
  if (acquired.size() < 2) throw InputError("dense grid: need at least 2 acquisition times");
  const std::vector<std::size_t> ks(acquired.size() - 1, insertions);
  return build_dense_grid(acquired, ks, delta);
}

StencilCoefficients stencil_coefficients(double t_prev, double t_k, double t_next, double delta) {
  if (!(t_prev < t_k && t_k < t_next)) {
    throw ContractViolation("central_diff_d2: times must be strictly increasing");
  }
  StencilCoefficients c;
  c.h0 = t_k - t_prev + delta;
  c.h1 = t_next - t_k + delta;
  c.weight = 1.0 / (1.0 + c.h0 + c.h1);
  return c;
}

ad::Var central_diff_d2(const ad::Var& y_prev, const ad::Var& y_k, const ad::Var& y_next, double t_prev,
                        double t_k, double t_next, double delta) {
  const auto c = stencil_coefficients(t_prev, t_k, t_next, delta);
  return stencil(y_prev, y_k, y_next, c, c.weight);
}

StencilTerms central_diff_d2(const Tensor& y_prev, const Tensor& y_k, const Tensor& y_next, double t_prev,
                             double t_k, double t_next, double delta) {
  const auto c = stencil_coefficients(t_prev, t_k, t_next, delta);
  ad::Tape tape;
  const ad::Var d2 = central_diff_d2(tape.constant(y_prev), tape.constant(y_k), tape.constant(y_next), t_prev,
                                     t_k, t_next, delta);
  return {c.h0, c.h1, c.weight, d2.value()};
}

Tensor second_difference(const Tensor& y_prev, const Tensor& y_k, const Tensor& y_next, double t_prev,
                         double t_k, double t_next, double delta) {
  const auto c = stencil_coefficients(t_prev, t_k, t_next, delta);
  ad::Tape tape;
  return stencil(tape.constant(y_prev), tape.constant(y_k), tape.constant(y_next), c, 1.0).value();
}

DenseLatentSeries assemble_dense(const DenseTimeGrid& grid, const std::map<double, ad::Var>& anchored,
                                 const IntermediateSampler& sampler) {
  DenseLatentSeries series;
  for (std::size_t j = 0; j < grid.size(); ++j) {
    const double t = grid.times[j];
    if (grid.provenance[j] == Provenance::Intermediate) {
      series.latents.push_back(sampler(t));
      continue;
    }
    auto it = anchored.lower_bound(t - kDedupTolerance);
    if (it == anchored.end() || std::abs(it->first - t) > kDedupTolerance) {
      throw ContractViolation("assemble_dense: no anchored latent for acquired time " + std::to_string(t));
    }
    series.latents.push_back(it->second);
  }
  return series;
}

ad::Var temporal_loss(const DenseLatentSeries& series, const DenseTimeGrid& grid) {
  check_series(series.latents.size(), grid);
  const auto& y = series.latents;
  const auto& t = grid.times;
  ad::Var total;
  for (std::size_t k = 1; k + 1 < grid.size(); ++k) {
    const ad::Var d2 = central_diff_d2(y[k - 1], y[k], y[k + 1], t[k - 1], t[k], t[k + 1], grid.delta);
    const ad::Var l1 = ad::sum(ad::abs(d2));
    total = total.valid() ? ad::add(total, l1) : l1;
  }
  return ad::scale(total, 1.0 / static_cast<double>(grid.size() - 2));
}

double temporal_loss(std::span<const Tensor> series, const DenseTimeGrid& grid) {
  check_series(series.size(), grid);
  ad::Tape tape;
  DenseLatentSeries s;
  for (const auto& y : series) s.latents.push_back(tape.constant(y));
  return temporal_loss(s, grid).value().item();
}

std::vector<StencilDiagnostic> stencil_diagnostics(std::span<const Tensor> series, const DenseTimeGrid& grid) {
  check_series(series.size(), grid);
  std::vector<StencilDiagnostic> rows;
  const auto& t = grid.times;
  for (std::size_t k = 1; k + 1 < grid.size(); ++k) {
    const auto terms = central_diff_d2(series[k - 1], series[k], series[k + 1], t[k - 1], t[k], t[k + 1], grid.delta);
    double l1 = 0.0;
    for (double v : terms.d2.data()) l1 += std::abs(v);
    rows.push_back({t[k], l1, terms.weight});
  }
  return rows;
}

void write_stencil_csv(const std::filesystem::path& path, std::span<const StencilDiagnostic> rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string());
  out << "time_s,d2_l1,weight\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.6f,%.17g,%.17g\n", r.time, r.l1, r.weight);
    out << buf;
  }
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace stcl::ldl

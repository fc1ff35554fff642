#include "stcl/diffusion.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <string>

#include <json.hpp>

#include "stcl/errors.hpp"

namespace stcl::diffusion {

namespace {

void check_alpha_bar(double a, const char* what) {
  if (!(a > 0.0 && a <= 1.0)) throw ContractViolation(std::string(what) + ": alpha_bar must lie in (0, 1]");
}

std::size_t rows_of(const Tensor& t, std::size_t n, const char* what) {
  if (t.rank() != 2 || t.dim(1) != n) {
    throw ContractViolation(std::string(what) + ": expected B×" + std::to_string(n) + ", got " +
                            shape_string(t.shape()));
  }
  return t.dim(0);
}

// Per-row coefficient broadcast to a B×n matrix.
Tensor row_coefficients(std::span<const double> per_row, std::size_t n) {
  std::vector<double> d(per_row.size() * n);
  for (std::size_t b = 0; b < per_row.size(); ++b)
    for (std::size_t j = 0; j < n; ++j) d[b * n + j] = per_row[b];
  return Tensor({per_row.size(), n}, std::move(d));
}

std::vector<ad::Var> constants(ad::Tape& tape, const DenoiserParams& params) {
  std::vector<ad::Var> w;
  for (const auto& t : params.tensors) w.push_back(tape.constant(t));
  return w;
}

Tensor predict_values(const DenoiserParams& params, const Tensor& input, std::span<const double> alpha_bar) {
  ad::Tape tape;
  const auto w = constants(tape, params);
  return predict_noise(w, params.config, input, alpha_bar).value();
}

}  // namespace

void ScheduleConfig::validate() const {
  if (steps < 1) throw ConfigError("schedule: need at least one diffusion step");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("schedule: need 0 < beta_start <= beta_end < 1");
  }
}

double NoiseSchedule::alpha_bar_at(std::size_t tau) const {
  if (tau < 1 || tau > steps()) {
    throw ContractViolation("schedule: step " + std::to_string(tau) + " outside [1, " + std::to_string(steps()) + "]");
  }
  return alpha_bar[tau - 1];
}

NoiseSchedule schedule_from_betas(std::vector<double> betas) {
  if (betas.empty()) throw ConfigError("schedule: need at least one diffusion step");
  for (std::size_t i = 0; i < betas.size(); ++i) {
    if (!(betas[i] > 0.0 && betas[i] < 1.0)) throw ConfigError("schedule: beta must lie in (0, 1)");
    if (i > 0 && betas[i] < betas[i - 1]) throw ConfigError("schedule: beta must be nondecreasing");
  }
  NoiseSchedule s;
  s.beta = std::move(betas);
  double prod = 1.0;
  for (double b : s.beta) {
    s.alpha.push_back(1.0 - b);
    prod *= 1.0 - b;
    s.alpha_bar.push_back(prod);
  }
  return s;
}

NoiseSchedule build_schedule(std::size_t steps, double beta_start, double beta_end) {
  ScheduleConfig{steps, beta_start, beta_end}.validate();
  std::vector<double> betas(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    const double f = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    betas[i] = beta_start + f * (beta_end - beta_start);
  }
  return schedule_from_betas(std::move(betas));
}

NoiseSchedule build_schedule(const ScheduleConfig& cfg) {
  return build_schedule(cfg.steps, cfg.beta_start, cfg.beta_end);
}

Tensor q_sample(const Tensor& x0, const Tensor& eps, double alpha_bar) {
  check_alpha_bar(alpha_bar, "q_sample");
  require_same_shape(x0, eps, "q_sample");
  return axpby(std::sqrt(alpha_bar), x0, std::sqrt(1.0 - alpha_bar), eps);
}

ad::Var recover_x0(const Tensor& x_tau, const ad::Var& eps_pred, double alpha_bar) {
  check_alpha_bar(alpha_bar, "recover_x0");
  require_same_shape(x_tau, eps_pred.value(), "recover_x0");
  const double inv = 1.0 / std::sqrt(alpha_bar);
  const ad::Var base = eps_pred.tape()->constant(scaled(x_tau, inv));
  return ad::sub(base, ad::scale(eps_pred, std::sqrt(1.0 - alpha_bar) * inv));
}

Tensor recover_x0(const Tensor& x_tau, const Tensor& eps_pred, double alpha_bar) {
  check_alpha_bar(alpha_bar, "recover_x0");
  require_same_shape(x_tau, eps_pred, "recover_x0");
  const double inv = 1.0 / std::sqrt(alpha_bar);
  return axpby(inv, x_tau, -std::sqrt(1.0 - alpha_bar) * inv, eps_pred);
}

ad::Var recover_x0_rows(const Tensor& x_tau, const ad::Var& eps_pred, std::span<const double> alpha_bar) {
  require_same_shape(x_tau, eps_pred.value(), "recover_x0_rows");
  const std::size_t rows = x_tau.rank() == 2 ? x_tau.dim(0) : 0;
  if (rows != alpha_bar.size()) throw ContractViolation("recover_x0_rows: one alpha_bar per row required");
  const std::size_t n = x_tau.dim(1);
  std::vector<double> inv(rows), noise_coef(rows);
  for (std::size_t b = 0; b < rows; ++b) {
    check_alpha_bar(alpha_bar[b], "recover_x0_rows");
    inv[b] = 1.0 / std::sqrt(alpha_bar[b]);
    noise_coef[b] = std::sqrt(1.0 - alpha_bar[b]) * inv[b];
  }
  ad::Tape& tape = *eps_pred.tape();
  const ad::Var base = tape.constant(hadamard(x_tau, row_coefficients(inv, n)));
  return ad::sub(base, ad::mul(eps_pred, tape.constant(row_coefficients(noise_coef, n))));
}

std::vector<double> sinusoidal_embedding(double x, std::size_t dim, double min_period, double max_period) {
  if (dim % 2 != 0) throw ContractViolation("sinusoidal_embedding: dimension must be even");
  const std::size_t half = dim / 2;
  std::vector<double> out(dim);
  for (std::size_t i = 0; i < half; ++i) {
    const double f = half == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(half - 1);
    const double period = min_period * std::pow(max_period / min_period, f);
    const double phase = 2.0 * std::numbers::pi * x / period;
    out[i] = std::sin(phase);
    out[half + i] = std::cos(phase);
  }
  return out;
}

std::vector<std::size_t> DenoiserConfig::widths() const {
  std::vector<std::size_t> w{input_size()};
  w.insert(w.end(), hidden.begin(), hidden.end());
  w.push_back(latent_size);
  return w;
}

void DenoiserConfig::validate() const {
  if (latent_size == 0) throw ConfigError("denoiser: latent size must be positive");
  for (auto h : hidden)
    if (h == 0) throw ConfigError("denoiser: hidden widths must be positive");
  if (step_embed % 2 != 0 || time_embed % 2 != 0) throw ConfigError("denoiser: embedding sizes must be even");
  if (!(step_min_period > 0.0 && step_max_period >= step_min_period && time_min_period > 0.0 &&
        time_max_period >= time_min_period)) {
    throw ConfigError("denoiser: embedding periods must be positive and ordered");
  }
  if (!(residual_scale > 0.0 && std::isfinite(residual_scale))) {
    throw ConfigError("denoiser: residual scale must be positive");
  }
}

DenoiserParams DenoiserParams::zeros(const DenoiserConfig& cfg) {
  cfg.validate();
  DenoiserParams p;
  p.config = cfg;
  const auto w = cfg.widths();
  for (std::size_t l = 0; l + 1 < w.size(); ++l) {
    p.tensors.push_back(Tensor::zeros({w[l], w[l + 1]}));
    p.tensors.push_back(Tensor::zeros({1, w[l + 1]}));
  }
  return p;
}

DenoiserParams DenoiserParams::initialize(const DenoiserConfig& cfg, std::uint64_t seed) {
  DenoiserParams p = zeros(cfg);
  std::mt19937_64 rng(seed);
  for (std::size_t l = 0; l < p.layer_count(); ++l) {
    const Shape shape = p.tensors[2 * l].shape();
    std::normal_distribution<double> n(0.0, 1.0 / std::sqrt(static_cast<double>(shape[0])));
    std::vector<double> d(shape_size(shape));
    for (auto& v : d) v = n(rng);
    p.tensors[2 * l] = Tensor(shape, std::move(d));
  }
  return p;
}

bool DenoiserParams::all_finite() const {
  for (const auto& t : tensors)
    if (!t.all_finite()) return false;
  return true;
}

Tensor denoiser_input(const DenoiserConfig& cfg, const Tensor& x_tau, std::span<const std::size_t> taus,
                      std::span<const double> times, const Tensor& pre_contrast) {
  const std::size_t n = cfg.latent_size;
  const std::size_t rows = rows_of(x_tau, n, "denoiser_input");
  if (rows_of(pre_contrast, n, "denoiser_input") != rows || taus.size() != rows || times.size() != rows) {
    throw ContractViolation("denoiser_input: batch sizes differ");
  }
  const std::size_t width = cfg.input_size();
  std::vector<double> d(rows * width);
  for (std::size_t b = 0; b < rows; ++b) {
    if (!(std::isfinite(times[b]) && times[b] >= 0.0)) {
      throw ContractViolation("denoiser_input: acquisition time must be finite and nonnegative");
    }
    double* row = d.data() + b * width;
    for (std::size_t j = 0; j < n; ++j) row[j] = x_tau[b * n + j];
    const auto se = sinusoidal_embedding(static_cast<double>(taus[b]), cfg.step_embed, cfg.step_min_period,
                                         cfg.step_max_period);
    const auto te = sinusoidal_embedding(times[b], cfg.time_embed, cfg.time_min_period, cfg.time_max_period);
    std::copy(se.begin(), se.end(), row + n);
    std::copy(te.begin(), te.end(), row + n + cfg.step_embed);
    for (std::size_t j = 0; j < n; ++j) row[n + cfg.step_embed + cfg.time_embed + j] = pre_contrast[b * n + j];
  }
  return Tensor({rows, width}, std::move(d));
}

ad::Var predict_noise(std::span<const ad::Var> weights, const DenoiserConfig& cfg, const Tensor& input,
                      std::span<const double> alpha_bar) {
  const auto widths = cfg.widths();
  if (weights.size() != 2 * (widths.size() - 1)) throw ContractViolation("predict_noise: wrong parameter count");
  const std::size_t rows = rows_of(input, cfg.input_size(), "predict_noise");
  if (alpha_bar.size() != rows) throw ContractViolation("predict_noise: one alpha_bar per row expected");
  for (double a : alpha_bar) check_alpha_bar(a, "predict_noise");
  // VP noise level s = σ/√ᾱ on the scaled residual ỹ = x_τ/√ᾱ − pre. The
  // net F sees c_in·ỹ; the clean residual is c_skip·ỹ + c_out·F, which in
  // noise space reads ε̂ = a·ỹ − g·F.
  const std::size_t n = cfg.latent_size;
  const std::size_t width = cfg.input_size();
  const double sd2 = cfg.residual_scale * cfg.residual_scale;
  std::vector<double> in = input.to_vector();
  std::vector<double> skip(rows * n), gain(rows * n);
  for (std::size_t b = 0; b < rows; ++b) {
    const double root = std::sqrt(alpha_bar[b]);
    const double s = std::sqrt(1.0 - alpha_bar[b]) / root;
    const double c_in = 1.0 / std::sqrt(s * s + sd2);
    const double a = s / (s * s + sd2), g = cfg.residual_scale * c_in;
    double* row = in.data() + b * width;
    const double* pre = row + n + cfg.step_embed + cfg.time_embed;
    for (std::size_t j = 0; j < n; ++j) {
      const double y = row[j] / root - pre[j];
      skip[b * n + j] = a * y;
      gain[b * n + j] = -g;
      row[j] = c_in * y;
    }
  }
  ad::Tape& tape = *weights.front().tape();
  const ad::Var ones = tape.constant(Tensor::filled({rows, 1}, 1.0));
  ad::Var h = tape.constant(Tensor({rows, width}, std::move(in)));
  const std::size_t layers = weights.size() / 2;
  for (std::size_t l = 0; l < layers; ++l) {
    h = ad::add(ad::matmul(h, weights[2 * l]), ad::matmul(ones, weights[2 * l + 1]));
    if (l + 1 < layers) h = ad::tanh(h);
  }
  return ad::add(ad::mul(tape.constant(Tensor({rows, n}, std::move(gain))), h),
                 tape.constant(Tensor({rows, n}, std::move(skip))));
}

Tensor denoise_predict(const DenoiserParams& params, const NoiseSchedule& schedule, const Tensor& x_tau,
                       std::size_t tau, const ConditioningContext& ctx) {
  const std::size_t n = params.config.latent_size;
  if (x_tau.size() != n || ctx.pre_contrast.size() != n) {
    throw ContractViolation("denoise_predict: latent must have " + std::to_string(n) + " elements");
  }
  const std::size_t taus[] = {tau};
  const double times[] = {ctx.time};
  const Tensor input =
      denoiser_input(params.config, x_tau.reshaped({1, n}), taus, times, ctx.pre_contrast.reshaped({1, n}));
  const double abar[] = {schedule.alpha_bar_at(tau)};
  return predict_values(params, input, abar).reshaped(x_tau.shape());
}

ad::Var diffusion_loss(const Tensor& eps, const ad::Var& eps_pred) {
  require_same_shape(eps, eps_pred.value(), "diffusion_loss");
  const ad::Var residual = ad::sub(eps_pred, eps_pred.tape()->constant(eps));
  return ad::scale(ad::squared_norm(residual), 1.0 / static_cast<double>(eps.size()));
}

double diffusion_loss(const Tensor& eps, const Tensor& eps_pred) {
  require_same_shape(eps, eps_pred, "diffusion_loss");
  return squared_norm(sub(eps_pred, eps)) / static_cast<double>(eps.size());
}

std::vector<std::size_t> sampling_steps(std::size_t total, std::size_t steps) {
  if (steps < 1 || steps > total) {
    throw ContractViolation("sample_chain: steps must lie in [1, " + std::to_string(total) + "]");
  }
  std::vector<std::size_t> taus(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    const double f = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    taus[i] = static_cast<std::size_t>(std::llround(static_cast<double>(total) - f * static_cast<double>(total - 1)));
  }
  return taus;
}

ad::Var sample_chain(std::span<const ad::Var> weights, const DenoiserParams& params,
                     const NoiseSchedule& schedule, const ChainRequest& request) {
  const std::size_t n = params.config.latent_size;
  const std::size_t rows = rows_of(request.noise, n, "sample_chain");
  if (rows_of(request.pre_contrast, n, "sample_chain") != rows || request.times.size() != rows) {
    throw ContractViolation("sample_chain: batch sizes differ");
  }
  const auto taus = sampling_steps(schedule.steps(), request.steps);
  Tensor x = request.noise;
  for (std::size_t i = 0; i + 1 < taus.size(); ++i) {
    const std::vector<std::size_t> tau_rows(rows, taus[i]);
    const double a = schedule.alpha_bar_at(taus[i]);
    const std::vector<double> a_rows(rows, a);
    const Tensor eps =
        predict_values(params, denoiser_input(params.config, x, tau_rows, request.times, request.pre_contrast), a_rows);
    const double a_next = schedule.alpha_bar_at(taus[i + 1]);
    const Tensor x0 = recover_x0(x, eps, a);
    x = axpby(std::sqrt(a_next), x0, std::sqrt(1.0 - a_next), eps);
  }
  const std::vector<std::size_t> last(rows, taus.back());
  const double a_last = schedule.alpha_bar_at(taus.back());
  const std::vector<double> a_rows(rows, a_last);
  const ad::Var eps = predict_noise(
      weights, params.config, denoiser_input(params.config, x, last, request.times, request.pre_contrast), a_rows);
  return recover_x0(x, eps, a_last);
}

Tensor sample_chain(const DenoiserParams& params, const NoiseSchedule& schedule, const ChainRequest& request) {
  ad::Tape tape;
  const auto w = constants(tape, params);
  return sample_chain(w, params, schedule, request).value();
}

Tensor sample_chain(const DenoiserParams& params, const NoiseSchedule& schedule, const ConditioningContext& ctx,
                    std::size_t steps, std::uint64_t seed) {
  const std::size_t n = params.config.latent_size;
  if (ctx.pre_contrast.size() != n) throw ContractViolation("sample_chain: pre-contrast latent size mismatch");
  std::mt19937_64 rng(seed);
  ChainRequest req;
  req.times = {ctx.time};
  req.pre_contrast = ctx.pre_contrast.reshaped({1, n});
  req.noise = standard_normal({1, n}, rng);
  req.steps = steps;
  return sample_chain(params, schedule, req).reshaped(ctx.pre_contrast.shape());
}

Tensor standard_normal(Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> d(shape_size(shape));
  for (auto& v : d) v = nd(rng);
  return Tensor(std::move(shape), std::move(d));
}

void save_checkpoint(const std::filesystem::path& dir, const DenoiserParams& params, const ScheduleConfig& schedule,
                     std::uint64_t seed) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json files = nlohmann::json::array();
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    const std::string name = (i % 2 == 0 ? "w" : "b") + std::to_string(i / 2) + ".tsr";
    write_tensor(dir / name, params.tensors[i]);
    files.push_back(name);
  }
  const auto& c = params.config;
  nlohmann::json j;
  j["widths"] = c.widths();
  j["latent_size"] = c.latent_size;
  j["hidden"] = c.hidden;
  j["step_embed"] = c.step_embed;
  j["time_embed"] = c.time_embed;
  j["step_periods"] = {c.step_min_period, c.step_max_period};
  j["time_periods"] = {c.time_min_period, c.time_max_period};
  j["residual_scale"] = c.residual_scale;
  j["schedule"] = {{"steps", schedule.steps}, {"beta_start", schedule.beta_start}, {"beta_end", schedule.beta_end}};
  j["seed"] = seed;
  j["files"] = files;
  std::ofstream out(dir / "checkpoint.json");
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write failed: " + (dir / "checkpoint.json").string());
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "checkpoint.json");
  if (!in) throw IoError("cannot open " + (dir / "checkpoint.json").string());
  nlohmann::json j;
  try {
    in >> j;
    Checkpoint ck;
    DenoiserConfig c;
    c.latent_size = j.at("latent_size").get<std::size_t>();
    c.hidden = j.at("hidden").get<std::vector<std::size_t>>();
    c.step_embed = j.at("step_embed").get<std::size_t>();
    c.time_embed = j.at("time_embed").get<std::size_t>();
    c.step_min_period = j.at("step_periods").at(0).get<double>();
    c.step_max_period = j.at("step_periods").at(1).get<double>();
    c.time_min_period = j.at("time_periods").at(0).get<double>();
    c.time_max_period = j.at("time_periods").at(1).get<double>();
    c.residual_scale = j.at("residual_scale").get<double>();
    c.validate();
    ck.schedule.steps = j.at("schedule").at("steps").get<std::size_t>();
    ck.schedule.beta_start = j.at("schedule").at("beta_start").get<double>();
    ck.schedule.beta_end = j.at("schedule").at("beta_end").get<double>();
    ck.schedule.validate();
    ck.seed = j.at("seed").get<std::uint64_t>();
    ck.params = DenoiserParams::zeros(c);
    const auto files = j.at("files").get<std::vector<std::string>>();
    if (files.size() != ck.params.tensors.size()) throw DataError("checkpoint: parameter count mismatch");
    for (std::size_t i = 0; i < files.size(); ++i) {
      Tensor t = read_tensor(dir / files[i]);
      if (t.shape() != ck.params.tensors[i].shape()) throw DataError("checkpoint: shape mismatch in " + files[i]);
      ck.params.tensors[i] = Tensor::from_external(t.shape(), t.to_vector());
    }
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint.json: ") + e.what());
  }
}

}  // namespace stcl::diffusion

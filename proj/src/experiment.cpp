#include "stcl/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

#include "stcl/errors.hpp"
#include "stcl/ldl.hpp"
#include "stcl/optim.hpp"

namespace stcl::experiment {

namespace {

namespace fs = std::filesystem;

// Independent random streams, so switching a loss term on or off never
// shifts the data order, the diffusion noise or the evaluation noise.
enum class Stream : std::uint32_t { Init = 1, Order = 2, Noise = 3, Chain = 4, Eval = 5 };

std::mt19937_64 stream(std::uint64_t seed, Stream s, std::uint32_t extra = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(s), extra};
  return std::mt19937_64(seq);
}

std::uint64_t eval_noise_seed(const TrainConfig& cfg) { return stream(cfg.seed, Stream::Eval)(); }

// Nonnegative integer field; nlohmann would silently wrap negatives.
std::uint64_t count_of(const nlohmann::json& v, const std::string& key) {
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer() && v.get<long long>() >= 0) return static_cast<std::uint64_t>(v.get<long long>());
  throw ConfigError("config: '" + key + "' must be a nonnegative integer");
}

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw ConfigError(std::string("config: ") + what + " must be finite");
}

Tensor row(const Tensor& m, std::size_t i) {
  const std::size_t n = m.size() / m.dim(0);
  return Tensor({1, n}, std::vector<double>(m.begin() + i * n, m.begin() + (i + 1) * n));
}

Tensor repeat_row(const Tensor& r, std::size_t count) {
  std::vector<double> d;
  d.reserve(count * r.size());
  for (std::size_t i = 0; i < count; ++i) d.insert(d.end(), r.begin(), r.end());
  return Tensor({count, r.size()}, std::move(d));
}

Tensor gather_rows(const Tensor& m, std::span<const std::size_t> rows) {
  const std::size_t n = m.size() / m.dim(0);
  std::vector<double> d;
  d.reserve(rows.size() * n);
  for (std::size_t r : rows) d.insert(d.end(), m.begin() + r * n, m.begin() + (r + 1) * n);
  return Tensor({rows.size(), n}, std::move(d));
}

// Row i of a B×n taped matrix, via a constant selector.
ad::Var row_of(const ad::Var& m, std::size_t i) {
  const std::size_t b = m.shape()[0];
  std::vector<double> sel(b, 0.0);
  sel[i] = 1.0;
  return ad::matmul(m.tape()->constant(Tensor({1, b}, std::move(sel))), m);
}

Tensor latent_rows(const phantom::PatientRecord& p) {
  return p.latents.reshaped({p.times.size(), p.latents.size() / p.times.size()});
}

std::size_t patient_index(const phantom::Dataset& data, const std::string& id) {
  for (std::size_t i = 0; i < data.patients.size(); ++i)
    if (data.patients[i].id == id) return i;
  throw DataError("unknown patient " + id);
}

Tensor frame(const Tensor& stack, std::size_t i) {
  return slice_leading(stack, i, i + 1).reshaped({stack.dim(1), stack.dim(2)});
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

void write_json_file(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write failed: " + path.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

struct Trainer {
  const phantom::Dataset& data;
  const TrainConfig& cfg;
  const TrainOptions& opts;
  diffusion::NoiseSchedule schedule;
  Shape latent_shape;
  std::vector<std::size_t> patients;

  Trainer(const phantom::Dataset& d, const TrainConfig& c, const TrainOptions& o)
      : data(d), cfg(c), opts(o), schedule(diffusion::build_schedule(c.schedule)),
        latent_shape(d.codec.latent_shape()), patients(train_indices(d, c)) {}

  [[noreturn]] void diverged(int stage, std::size_t step, const phantom::PatientRecord& p,
                             std::span<const double> times, std::span<const std::size_t> taus, const LossRow& row,
                             const Tensor& x_tau) const {
    fs::path dump;
    if (!opts.dump_dir.empty()) {
      ensure_dir(opts.dump_dir);
      dump = opts.dump_dir / "nonfinite_batch.json";
      nlohmann::json j;
      j["stage"] = stage;
      j["step"] = step;
      j["patient"] = p.id;
      j["times"] = std::vector<double>(times.begin(), times.end());
      j["taus"] = std::vector<std::size_t>(taus.begin(), taus.end());
      j["losses"] = {{"diffusion", row.diffusion}, {"spatial", row.spatial}, {"temporal", row.temporal}};
      j["x_tau"] = "nonfinite_x_tau.tsr";
      write_json_file(dump, j);
      write_tensor(opts.dump_dir / "nonfinite_x_tau.tsr", x_tau);
    }
    throw NonFiniteLoss("non-finite loss at stage " + std::to_string(stage) + " step " + std::to_string(step) +
                            " (patient " + p.id + ")" + (dump.empty() ? "" : ", batch written to " + dump.string()),
                        dump);
  }

  void run(diffusion::DenoiserParams& params, int stage, std::size_t epochs, std::size_t first_step,
           std::vector<LossRow>& log) const {
    if (epochs == 0) return;
    auto order_rng = stream(cfg.seed, Stream::Order, static_cast<std::uint32_t>(stage));
    auto noise_rng = stream(cfg.seed, Stream::Noise, static_cast<std::uint32_t>(stage));
    auto chain_rng = stream(cfg.seed, Stream::Chain, static_cast<std::uint32_t>(stage));
    Adam adam({cfg.learning_rate});
    const std::size_t total_steps = epochs * cfg.passes_per_epoch * patients.size();
    const auto warmup = stage == 1 ? static_cast<std::size_t>(cfg.warmup_fraction * static_cast<double>(total_steps)) : 0;
    const std::size_t n = params.config.latent_size;

    std::size_t local = 0;
    std::vector<std::size_t> order = patients;
    for (std::size_t e = 0; e < epochs; ++e)
      for (std::size_t pass = 0; pass < cfg.passes_per_epoch; ++pass) {
        std::shuffle(order.begin(), order.end(), order_rng);
        for (std::size_t pi : order) {
          const auto& p = data.patients[pi];
          const std::size_t t_count = p.times.size();
          std::vector<std::size_t> rows(t_count);
          std::iota(rows.begin(), rows.end(), 0);
          if (t_count > cfg.batch_size) {
            std::shuffle(rows.begin(), rows.end(), order_rng);
            rows.resize(cfg.batch_size);
            std::sort(rows.begin(), rows.end());
          }
          const std::size_t b = rows.size();
          const Tensor all = latent_rows(p);
          const Tensor x0 = gather_rows(all, rows);
          const Tensor pre = repeat_row(row(all, 0), b);
          std::vector<double> times(b);
          for (std::size_t i = 0; i < b; ++i) times[i] = p.times[rows[i]];

          std::uniform_int_distribution<std::size_t> pick(1, schedule.steps());
          std::vector<std::size_t> taus(b);
          std::vector<double> abar(b);
          for (std::size_t i = 0; i < b; ++i) {
            taus[i] = pick(noise_rng);
            abar[i] = schedule.alpha_bar_at(taus[i]);
          }
          const Tensor eps = diffusion::standard_normal({b, n}, noise_rng);
          std::vector<double> xt(b * n);
          for (std::size_t i = 0; i < b; ++i) {
            const double s = std::sqrt(abar[i]), c = std::sqrt(1.0 - abar[i]);
            for (std::size_t j = 0; j < n; ++j) xt[i * n + j] = s * x0[i * n + j] + c * eps[i * n + j];
          }
          const Tensor x_tau({b, n}, std::move(xt));

          ad::Tape tape;
          std::vector<ad::Var> weights;
          for (const auto& t : params.tensors) weights.push_back(tape.variable(t));
          const ad::Var eps_hat =
              diffusion::predict_noise(weights, params.config, diffusion::denoiser_input(params.config, x_tau, taus, times, pre),
                                   abar);
          const ad::Var l_diff = diffusion::diffusion_loss(eps, eps_hat);
          ad::Var total = l_diff;
          LossRow rec;
          rec.step = first_step + local;
          rec.stage = stage;
          rec.diffusion = l_diff.value().item();
          // Catch bad inputs before the regularizers trip over them.
          if (!std::isfinite(rec.diffusion)) {
            rec.total = rec.diffusion;
            diverged(stage, rec.step, p, times, taus, rec, x_tau);
          }

          const bool use_lal = stage == 1 && cfg.lal_active() && local >= warmup;
          const bool use_ldl = stage == 2 && cfg.ldl_active() && b >= 2;
          if (use_lal || use_ldl) {
            const ad::Var x0_hat = diffusion::recover_x0_rows(x_tau, eps_hat, abar);
            std::vector<ad::Var> per_time;
            for (std::size_t i = 0; i < b; ++i) per_time.push_back(ad::reshape(row_of(x0_hat, i), latent_shape));
            if (use_lal) {
              lal::PatientLatents latents{{p.id, per_time}};
              const ad::Var l_sp = lal::spatial_loss(latents, cfg.shrinkage());
              rec.spatial = l_sp.value().item();
              total = total + ad::scale(l_sp, cfg.lambda_spatial);
            } else {
              const auto grid = ldl::build_dense_grid(times, cfg.insertions, cfg.delta);
              std::vector<double> mid;
              for (std::size_t k = 0; k < grid.size(); ++k)
                if (grid.provenance[k] == ldl::Provenance::Intermediate) mid.push_back(grid.times[k]);
              ad::Var chain;
              if (!mid.empty()) {
                diffusion::ChainRequest req;
                req.times = mid;
                req.pre_contrast = repeat_row(row(all, 0), mid.size());
                // One start latent for the whole grid, as in evaluation.
                req.noise = repeat_row(diffusion::standard_normal({1, n}, chain_rng), mid.size());
                req.steps = cfg.intermediate_steps;
                chain = diffusion::sample_chain(weights, params, schedule, req);
              }
              std::map<double, ad::Var> anchored;
              for (std::size_t i = 0; i < b; ++i) anchored.emplace(times[i], per_time[i]);
              std::map<double, std::size_t> mid_row;
              for (std::size_t k = 0; k < mid.size(); ++k) mid_row.emplace(mid[k], k);
              const auto series = ldl::assemble_dense(grid, anchored, [&](double t) {
                return ad::reshape(row_of(chain, mid_row.at(t)), latent_shape);
              });
              const ad::Var l_t = ldl::temporal_loss(series, grid);
              rec.temporal = l_t.value().item();
              total = total + ad::scale(l_t, cfg.lambda_temporal);
            }
          }
          rec.total = total.value().item();
          if (!std::isfinite(rec.diffusion) || !std::isfinite(rec.spatial) || !std::isfinite(rec.temporal) ||
              !std::isfinite(rec.total)) {
            diverged(stage, rec.step, p, times, taus, rec, x_tau);
          }

          const auto grads = tape.backward(total);
          std::vector<Tensor> g;
          g.reserve(weights.size());
          for (const auto& w : weights) g.push_back(grads.wrt(w));
          adam.step(params.tensors, g);
          log.push_back(rec);
          if (opts.on_step) opts.on_step(rec);
          ++local;
        }
      }
  }
};

}  // namespace

void TrainConfig::validate() const {
  for (auto [v, name] : {std::pair{lambda_spatial, "lambda_spatial"}, {lambda_temporal, "lambda_temporal"},
                         {gamma, "gamma"}, {jitter, "jitter"}, {delta, "delta"}, {learning_rate, "learning_rate"},
                         {warmup_fraction, "warmup_fraction"}}) {
    require_finite(v, name);
  }
  if (lambda_spatial < 0.0 || lambda_temporal < 0.0) throw ConfigError("config: loss weights must be nonnegative");
  if (gamma < 0.0 || gamma > 1.0) throw ConfigError("config: gamma must lie in [0, 1]");
  if (!(jitter > 0.0)) throw ConfigError("config: jitter must be positive");
  if (delta < 0.0) throw ConfigError("config: delta must be nonnegative");
  if (epochs < 1) throw ConfigError("config: epochs must be at least 1");
  if (stage1_epochs > epochs) throw ConfigError("config: stage1_epochs exceeds epochs");
  if (passes_per_epoch < 1) throw ConfigError("config: passes_per_epoch must be at least 1");
  if (batch_size < 1) throw ConfigError("config: batch_size must be at least 1");
  if (!(learning_rate > 0.0)) throw ConfigError("config: learning_rate must be positive");
  if (warmup_fraction < 0.0 || warmup_fraction >= 1.0) throw ConfigError("config: warmup_fraction must lie in [0, 1)");
  if (hidden.empty() || std::find(hidden.begin(), hidden.end(), 0) != hidden.end()) {
    throw ConfigError("config: hidden layer widths must be positive");
  }
  try {
    schedule.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  if (sample_steps < 1 || sample_steps > schedule.steps) throw ConfigError("config: sample_steps must lie in [1, steps]");
  if (intermediate_steps < 1 || intermediate_steps > schedule.steps) {
    throw ConfigError("config: intermediate_steps must lie in [1, steps]");
  }
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"lambda_spatial", c.lambda_spatial},
          {"lambda_temporal", c.lambda_temporal},
          {"K_i", c.insertions},
          {"gamma", c.gamma},
          {"jitter", c.jitter},
          {"delta", c.delta},
          {"epochs", c.epochs},
          {"stage1_epochs", c.stage1_epochs},
          {"passes_per_epoch", c.passes_per_epoch},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"warmup_fraction", c.warmup_fraction},
          {"sample_steps", c.sample_steps},
          {"intermediate_steps", c.intermediate_steps},
          {"holdout", c.holdout},
          {"seed", c.seed},
          {"hidden", c.hidden},
          {"diffusion_steps", c.schedule.steps},
          {"beta_start", c.schedule.beta_start},
          {"beta_end", c.schedule.beta_end}};
}

TrainConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  TrainConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "lambda_spatial") c.lambda_spatial = v.get<double>();
      else if (key == "lambda_temporal") c.lambda_temporal = v.get<double>();
      else if (key == "K_i") c.insertions = count_of(v, key);
      else if (key == "gamma") c.gamma = v.get<double>();
      else if (key == "jitter") c.jitter = v.get<double>();
      else if (key == "delta") c.delta = v.get<double>();
      else if (key == "epochs") c.epochs = count_of(v, key);
      else if (key == "stage1_epochs") c.stage1_epochs = count_of(v, key);
      else if (key == "passes_per_epoch") c.passes_per_epoch = count_of(v, key);
      else if (key == "batch_size") c.batch_size = count_of(v, key);
      else if (key == "learning_rate") c.learning_rate = v.get<double>();
      else if (key == "warmup_fraction") c.warmup_fraction = v.get<double>();
      else if (key == "sample_steps") c.sample_steps = count_of(v, key);
      else if (key == "intermediate_steps") c.intermediate_steps = count_of(v, key);
      else if (key == "holdout") c.holdout = count_of(v, key);
      else if (key == "seed") c.seed = count_of(v, key);
      else if (key == "hidden") {
        c.hidden.clear();
        for (const auto& w : v) c.hidden.push_back(count_of(w, key));
      }
      else if (key == "diffusion_steps") c.schedule.steps = count_of(v, key);
      else if (key == "beta_start") c.schedule.beta_start = v.get<double>();
      else if (key == "beta_end") c.schedule.beta_end = v.get<double>();
      else throw ConfigError("config: unknown key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

std::vector<std::size_t> train_indices(const phantom::Dataset& data, const TrainConfig& cfg) {
  if (cfg.holdout >= data.patients.size()) {
    throw ConfigError("config: holdout of " + std::to_string(cfg.holdout) + " leaves no training patients among " +
                      std::to_string(data.patients.size()));
  }
  std::vector<std::size_t> idx(data.patients.size() - cfg.holdout);
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

std::vector<std::size_t> eval_indices(const phantom::Dataset& data, const TrainConfig& cfg) {
  const auto train = train_indices(data, cfg);
  std::vector<std::size_t> idx;
  for (std::size_t i = train.size(); i < data.patients.size(); ++i) idx.push_back(i);
  // Without a holdout, evaluate on the training patients.
  return idx.empty() ? train : idx;
}

diffusion::DenoiserConfig denoiser_config(const phantom::Dataset& data, const TrainConfig& cfg) {
  diffusion::DenoiserConfig d;
  d.latent_size = data.codec.latent_size();
  d.hidden = cfg.hidden;
  d.validate();
  return d;
}

TrainResult train_stage1(const phantom::Dataset& data, const TrainConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  const Trainer trainer(data, cfg, opts);
  TrainResult r;
  r.params = diffusion::DenoiserParams::initialize(denoiser_config(data, cfg), stream(cfg.seed, Stream::Init)());
  r.record.config = cfg;
  trainer.run(r.params, 1, cfg.stage1_epochs, 0, r.record.losses);
  r.record.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

TrainResult train_stage2(const diffusion::DenoiserParams& params, const phantom::Dataset& data,
                         const TrainConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  if (params.config.latent_size != data.codec.latent_size()) {
    throw ContractViolation("train_stage2: parameters do not match the dataset latent size");
  }
  const auto start = std::chrono::steady_clock::now();
  const Trainer trainer(data, cfg, opts);
  TrainResult r;
  r.params = params;
  r.record.config = cfg;
  // Step numbering continues after a full stage 1.
  const std::size_t offset = cfg.stage1_epochs * cfg.passes_per_epoch * trainer.patients.size();
  trainer.run(r.params, 2, cfg.epochs - cfg.stage1_epochs, offset, r.record.losses);
  r.record.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

TrainResult train(const phantom::Dataset& data, const TrainConfig& cfg, const TrainOptions& opts) {
  auto s1 = train_stage1(data, cfg, opts);
  auto s2 = train_stage2(s1.params, data, cfg, opts);
  s1.record.losses.insert(s1.record.losses.end(), s2.record.losses.begin(), s2.record.losses.end());
  s1.record.seconds += s2.record.seconds;
  s1.params = std::move(s2.params);
  return s1;
}

Tensor generate_latents(const diffusion::DenoiserParams& params, const diffusion::NoiseSchedule& schedule,
                        const phantom::PatientRecord& patient, std::span<const double> times,
                        std::size_t sample_steps, const Tensor& start_noise) {
  const Tensor all = latent_rows(patient);
  diffusion::ChainRequest req;
  req.times.assign(times.begin(), times.end());
  req.pre_contrast = repeat_row(row(all, 0), times.size());
  req.noise = repeat_row(start_noise.reshaped({1, start_noise.size()}), times.size());
  req.steps = sample_steps;
  return diffusion::sample_chain(params, schedule, req);
}

Generator model_generator(const diffusion::DenoiserParams& params, const diffusion::NoiseSchedule& schedule,
                          const phantom::Dataset& data, std::size_t sample_steps, std::uint64_t noise_seed) {
  return [params, schedule, &data, sample_steps, noise_seed](const phantom::PatientRecord& p,
                                                               std::span<const double> times) {
    std::mt19937_64 rng(stream(noise_seed, Stream::Eval, static_cast<std::uint32_t>(patient_index(data, p.id)))());
    const Tensor noise = diffusion::standard_normal({1, params.config.latent_size}, rng);
    const Tensor lat = generate_latents(params, schedule, p, times, sample_steps, noise);
    const std::size_t side = data.codec.side();
    const double range = data.config.intensity_range;
    Tensor img = phantom::denormalize(data.codec.decode_rows(lat), range);
    std::vector<double> v = img.to_vector();
    for (auto& x : v) x = std::clamp(x, 0.0, range);
    return Tensor({times.size(), side, side}, std::move(v));
  };
}

std::vector<metrics::MetricRow> EvalResult::metric_rows() const {
  std::vector<metrics::MetricRow> out;
  for (const auto& r : acquisition_rows) {
    const std::string key = fmt("%.6f", r.time);
    out.push_back({r.patient, key, "ssim", r.ssim, "raw"});
    out.push_back({r.patient, key, "psnr", r.psnr, "raw"});
    out.push_back({r.patient, key, "rmse", r.rmse, "raw"});
  }
  for (const auto& [id, v] : cssim) out.push_back({id, "sequence", "cssim", v, "raw"});
  return out;
}

EvalResult evaluate(const Generator& generator, const phantom::Dataset& data, std::span<const std::size_t> patients) {
  if (patients.empty()) throw ContractViolation("evaluate: no patients");
  metrics::SsimConfig sc;
  sc.range = data.config.intensity_range;
  const double range = data.config.intensity_range;
  EvalResult r;
  double cs = 0.0;
  for (std::size_t pi : patients) {
    const auto& p = data.patients.at(pi);
    if (p.dense.rank() != 3 || p.dense.dim(0) != data.dense_times.size() || p.truth.rank() != 3 ||
        p.truth.dim(0) != p.times.size()) {
      throw DataError("evaluate: ground truth missing for " + p.id);
    }
    const Tensor dense = generator(p, data.dense_times);
    for (std::size_t k = 0; k < data.dense_times.size(); ++k) {
      const Tensor g = frame(dense, k), t = frame(p.dense, k);
      r.dense_rows.push_back({p.id, data.dense_times[k], metrics::ssim(g, t, sc), metrics::psnr(g, t, range),
                              metrics::rmse(g, t)});
    }
    const double c = metrics::cssim(dense, sc);
    r.cssim.emplace_back(p.id, c);
    cs += c;

    const std::vector<double> acq(p.times.begin() + 1, p.times.end());
    if (!acq.empty()) {
      const Tensor gen = generator(p, acq);
      for (std::size_t k = 0; k < acq.size(); ++k) {
        const Tensor g = frame(gen, k), t = frame(p.truth, k + 1);
        r.acquisition_rows.push_back({p.id, acq[k], metrics::ssim(g, t, sc), metrics::psnr(g, t, range),
                                      metrics::rmse(g, t)});
      }
    }
  }
  auto& s = r.summary;
  s.patients = patients.size();
  s.cssim = cs / static_cast<double>(patients.size());
  for (const auto& f : r.acquisition_rows) {
    s.ssim += f.ssim;
    s.psnr += f.psnr;
    s.rmse += f.rmse;
  }
  if (!r.acquisition_rows.empty()) {
    const double n = static_cast<double>(r.acquisition_rows.size());
    s.ssim /= n;
    s.psnr /= n;
    s.rmse /= n;
  }
  for (const auto& f : r.dense_rows) s.dense_ssim += f.ssim;
  s.dense_ssim /= static_cast<double>(r.dense_rows.size());
  return r;
}

Generator evaluation_generator(const diffusion::DenoiserParams& params, const phantom::Dataset& data,
                               const TrainConfig& cfg) {
  return model_generator(params, diffusion::build_schedule(cfg.schedule), data, cfg.sample_steps,
                         eval_noise_seed(cfg));
}

EvalResult evaluate(const diffusion::DenoiserParams& params, const phantom::Dataset& data, const TrainConfig& cfg) {
  const auto ids = eval_indices(data, cfg);
  return evaluate(evaluation_generator(params, data, cfg), data, ids);
}

double generated_roughness(const diffusion::DenoiserParams& params, const phantom::Dataset& data,
                           const TrainConfig& cfg) {
  const auto schedule = diffusion::build_schedule(cfg.schedule);
  const auto ids = eval_indices(data, cfg);
  const std::uint64_t seed = eval_noise_seed(cfg);
  double total = 0.0;
  for (std::size_t pi : ids) {
    const auto& p = data.patients[pi];
    const auto grid = ldl::build_dense_grid(p.times, cfg.insertions, cfg.delta);
    std::mt19937_64 rng(stream(seed, Stream::Eval, static_cast<std::uint32_t>(pi))());
    const Tensor noise = diffusion::standard_normal({1, params.config.latent_size}, rng);
    const Tensor lat = generate_latents(params, schedule, p, grid.times, cfg.sample_steps, noise);
    std::vector<Tensor> series;
    for (std::size_t k = 0; k < grid.size(); ++k) series.push_back(row(lat, k));
    total += ldl::temporal_loss(series, grid);
  }
  return total / static_cast<double>(ids.size());
}

std::vector<TrainConfig> ablation_configs(const TrainConfig& base) {
  std::vector<TrainConfig> out(4, base);
  out[0].lambda_spatial = 0.0;
  out[0].lambda_temporal = 0.0;
  out[1].lambda_temporal = 0.0;
  out[2].lambda_spatial = 0.0;
  return out;
}

std::vector<AblationRow> run_ablation(const phantom::Dataset& data, const TrainConfig& base, const fs::path& out_dir) {
  static const char* names[] = {"baseline", "+LAL", "+LDL", "full"};
  static const char* dirs[] = {"baseline", "lal", "ldl", "full"};
  const auto configs = ablation_configs(base);
  std::vector<AblationRow> rows;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    const auto result = train(data, configs[i]);
    const auto eval = evaluate(result.params, data, configs[i]);
    if (!out_dir.empty()) {
      write_run(out_dir / dirs[i], result);
      write_evaluation(out_dir / dirs[i], eval);
    }
    AblationRow r{names[i], configs[i], eval.summary};
    r.delta_ssim = r.metrics.ssim - (rows.empty() ? r.metrics.ssim : rows[0].metrics.ssim);
    r.delta_cssim = r.metrics.cssim - (rows.empty() ? r.metrics.cssim : rows[0].metrics.cssim);
    r.delta_psnr = r.metrics.psnr - (rows.empty() ? r.metrics.psnr : rows[0].metrics.psnr);
    r.delta_rmse = r.metrics.rmse - (rows.empty() ? r.metrics.rmse : rows[0].metrics.rmse);
    rows.push_back(r);
  }
  if (!out_dir.empty()) write_ablation_csv(out_dir / "ablation.csv", rows);
  return rows;
}

void write_ablation_csv(const fs::path& path, std::span<const AblationRow> rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string());
  out << "config,lambda_spatial,lambda_temporal,K_i,ssim,psnr,rmse,cssim,dense_ssim,delta_ssim,delta_psnr,"
         "delta_rmse,delta_cssim\n";
  for (const auto& r : rows) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                  r.name.c_str(), r.config.lambda_spatial, r.config.lambda_temporal, r.config.insertions,
                  r.metrics.ssim, r.metrics.psnr, r.metrics.rmse, r.metrics.cssim, r.metrics.dense_ssim,
                  r.delta_ssim, r.delta_psnr, r.delta_rmse, r.delta_cssim);
    out << buf;
  }
  if (!out) throw IoError("write failed: " + path.string());
}

SweepKnob knob_from_name(const std::string& name) {
  if (name == "lambda_spatial") return SweepKnob::LambdaSpatial;
  if (name == "K_i") return SweepKnob::Insertions;
  throw ConfigError("sweep: unknown knob '" + name + "' (expected lambda_spatial or K_i)");
}

const char* knob_name(SweepKnob k) { return k == SweepKnob::LambdaSpatial ? "lambda_spatial" : "K_i"; }

std::vector<SweepRow> run_sweep(const phantom::Dataset& data, const TrainConfig& base, SweepKnob knob,
                                std::span<const double> values, const fs::path& out_dir) {
  if (values.empty()) throw ConfigError("sweep: no values");
  std::vector<TrainConfig> configs;
  for (double v : values) {
    TrainConfig c = base;
    if (knob == SweepKnob::LambdaSpatial) {
      c.lambda_spatial = v;
    } else {
      if (!(v >= 0.0) || v != std::floor(v) || v > 1e6) throw ConfigError("sweep: K_i values must be nonnegative integers");
      c.insertions = static_cast<std::size_t>(v);
    }
    c.validate();
    configs.push_back(c);
  }
  std::vector<SweepRow> rows;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    const auto result = train(data, configs[i]);
    const auto eval = evaluate(result.params, data, configs[i]);
    if (!out_dir.empty()) {
      const fs::path dir = out_dir / (std::string(knob_name(knob)) + "_" + fmt("%g", values[i]));
      write_run(dir, result);
      write_evaluation(dir, eval);
    }
    rows.push_back({values[i], eval.summary});
  }
  if (!out_dir.empty()) write_sweep_csv(out_dir / "sweep.csv", knob, rows);
  return rows;
}

void write_sweep_csv(const fs::path& path, SweepKnob knob, std::span<const SweepRow> rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string());
  out << knob_name(knob) << ",ssim,psnr,rmse,cssim,dense_ssim\n";
  for (const auto& r : rows) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.value, r.metrics.ssim, r.metrics.psnr,
                  r.metrics.rmse, r.metrics.cssim, r.metrics.dense_ssim);
    out << buf;
  }
  if (!out) throw IoError("write failed: " + path.string());
}

LatentTrace trace_from_latents(const Tensor& latents, std::span<const double> times) {
  if (latents.rank() != 2 || latents.dim(0) != times.size()) {
    throw ContractViolation("latent_trace: one latent row per time expected");
  }
  LatentTrace t;
  t.times.assign(times.begin(), times.end());
  t.pca = metrics::pca_project(latents, std::min<std::size_t>(2, latents.dim(1)));
  std::vector<double> pc1(times.size());
  for (std::size_t i = 0; i < times.size(); ++i) pc1[i] = t.pca.coords.at(i, 0);
  t.rank_correlation = metrics::spearman(pc1, times);
  return t;
}

LatentTrace latent_trace(const diffusion::DenoiserParams& params, const phantom::Dataset& data, std::size_t patient,
                         std::span<const double> times, const TrainConfig& cfg) {
  const auto& p = data.patients.at(patient);
  std::mt19937_64 rng(stream(eval_noise_seed(cfg), Stream::Eval, static_cast<std::uint32_t>(patient))());
  const Tensor noise = diffusion::standard_normal({1, params.config.latent_size}, rng);
  const auto schedule = diffusion::build_schedule(cfg.schedule);
  return trace_from_latents(generate_latents(params, schedule, p, times, cfg.sample_steps, noise), times);
}

void write_losses_csv(const fs::path& path, std::span<const LossRow> rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string());
  out << "step,stage,diffusion,spatial,temporal,total\n";
  for (const auto& r : rows) {
    char buf[192];
    std::snprintf(buf, sizeof buf, "%zu,%d,%.17g,%.17g,%.17g,%.17g\n", r.step, r.stage, r.diffusion, r.spatial,
                  r.temporal, r.total);
    out << buf;
  }
  if (!out) throw IoError("write failed: " + path.string());
}

void write_run(const fs::path& dir, const TrainResult& result) {
  ensure_dir(dir);
  write_json_file(dir / "config.json", to_json(result.record.config));
  write_losses_csv(dir / "losses.csv", result.record.losses);
  diffusion::save_checkpoint(dir / "checkpoint", result.params, result.record.config.schedule,
                             result.record.config.seed);
  write_json_file(dir / "run.json", {{"steps", result.record.losses.size()}, {"seconds", result.record.seconds}});
}

nlohmann::json summary_json(const EvalSummary& s) {
  return {{"ssim", s.ssim},   {"psnr", s.psnr},          {"rmse", s.rmse},
          {"cssim", s.cssim}, {"dense_ssim", s.dense_ssim}, {"patients", s.patients}};
}

void write_evaluation(const fs::path& dir, const EvalResult& eval) {
  ensure_dir(dir);
  const auto rows = eval.metric_rows();
  metrics::write_metric_csv(dir / "metrics.csv", rows);
  std::ofstream out(dir / "frames.csv");
  if (!out) throw IoError("cannot open " + (dir / "frames.csv").string());
  out << "patient,time_s,ssim,psnr,rmse\n";
  for (const auto& r : eval.dense_rows) {
    char buf[160];
    std::snprintf(buf, sizeof buf, ",%.6f,%.17g,%.17g,%.17g\n", r.time, r.ssim, r.psnr, r.rmse);
    out << r.patient << buf;
  }
  if (!out) throw IoError("write failed: " + (dir / "frames.csv").string());
  write_json_file(dir / "summary.json", summary_json(eval.summary));
}

}  // namespace stcl::experiment

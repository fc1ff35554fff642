#include "stcl/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "stcl/autodiff.hpp"
#include "stcl/errors.hpp"
#include "stcl/experiment.hpp"
#include "stcl/gradcheck_suite.hpp"
#include "stcl/metrics.hpp"
#include "stcl/phantom.hpp"

namespace stcl::cli {

namespace {

namespace fs = std::filesystem;
namespace ex = experiment;

// Thrown by the guards; carries an exit code straight to run_cli.
struct Refusal : std::runtime_error {
  Refusal(int code, const std::string& what) : std::runtime_error(what), code(code) {}
  int code;
};

fs::path default_out(const std::string& sub) {
  const char* root = std::getenv(kOutputRootEnv);
  return fs::path(root && *root ? root : "stcl_out") / sub;
}

void guard_overwrite(const fs::path& marker, bool force) {
  if (fs::exists(marker) && !force) {
    throw Refusal(kExitExists, marker.string() + " exists; pass --force to overwrite");
  }
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string());
  out << j.dump(2) << "\n";
}

std::string num(double v, int prec = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(prec) << v;
  return s.str();
}

struct TrainingArgs {
  std::string data;
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool force = false;
  int verbose = 0;
};

void add_training_flags(CLI::App* sub, TrainingArgs& a, bool needs_out = true) {
  sub->add_option("--data", a.data, "Dataset directory (holds manifest.json)")->required();
  sub->add_option("--config", a.config, "Training config JSON; omitted keys take their defaults");
  if (needs_out) sub->add_option("--out", a.out, "Output directory (default: $STCL_OUTPUT_ROOT/<subcommand>)");
  sub->add_option("--seed", a.seed, "Override the config seed");
  sub->add_flag("--force", a.force, "Overwrite existing outputs");
  sub->add_flag("-v,--verbose", a.verbose, "Print losses every 100 steps (repeat for every step)");
}

ex::TrainConfig resolve_config(const TrainingArgs& a) {
  ex::TrainConfig cfg = a.config.empty() ? ex::TrainConfig{} : ex::load_config(a.config);
  if (a.seed) cfg.seed = *a.seed;
  cfg.validate();
  return cfg;
}

ex::TrainOptions step_logger(int verbose, std::ostream& err, const fs::path& dump_dir) {
  ex::TrainOptions o;
  o.dump_dir = dump_dir;
  if (verbose > 0) {
    const std::size_t every = verbose > 1 ? 1 : 100;
    o.on_step = [&err, every](const ex::LossRow& r) {
      if (r.step % every != 0) return;
      err << "step " << r.step << " stage " << r.stage << " diffusion " << num(r.diffusion, 6) << " spatial "
          << num(r.spatial, 6) << " temporal " << num(r.temporal, 6) << "\n";
    };
  }
  return o;
}

void print_summary(std::ostream& out, const std::string& label, const ex::EvalSummary& s) {
  out << label << "ssim " << num(s.ssim) << "  psnr " << num(s.psnr, 2) << "  rmse " << num(s.rmse, 2) << "  cssim "
      << num(s.cssim, 5) << "  dense_ssim " << num(s.dense_ssim) << "  (" << s.patients << " patients)\n";
}

std::vector<double> parse_values(const std::string& text) {
  std::vector<double> v;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double x = 0.0;
    try {
      x = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw ConfigError("--values: cannot parse '" + item + "'");
    v.push_back(x);
  }
  if (v.empty()) throw ConfigError("--values: empty list");
  return v;
}

// A run directory remembers which dataset trained it.
fs::path run_dataset(const fs::path& run, const std::string& override_path) {
  if (!override_path.empty()) return override_path;
  const auto j = read_json(run / "source.json");
  return j.at("data").get<std::string>();
}

int cmd_phantom(std::size_t patients, std::uint64_t seed, std::size_t side, double noise, const std::string& out_arg,
                bool force, std::ostream& out) {
  if (patients < 1) throw ConfigError("--patients must be at least 1");
  const fs::path dir = out_arg.empty() ? default_out("phantom") : fs::path(out_arg);
  guard_overwrite(dir / "manifest.json", force);
  phantom::PhantomConfig cfg;
  cfg.side = side;
  cfg.noise_sd = noise;
  cfg.validate();
  const auto data = phantom::make_dataset(patients, seed, cfg);
  phantom::write_dataset(data, dir);
  out << (dir / "manifest.json").string() << "\n";
  return kExitOk;
}

int cmd_train(const TrainingArgs& a, std::ostream& out, std::ostream& err) {
  const auto cfg = resolve_config(a);
  const fs::path dir = a.out.empty() ? default_out("train") : fs::path(a.out);
  guard_overwrite(dir / "losses.csv", a.force);
  const auto data = phantom::load_dataset(a.data);
  const auto result = ex::train(data, cfg, step_logger(a.verbose, err, dir));
  ex::write_run(dir, result);
  write_json(dir / "source.json", {{"data", fs::absolute(a.data).string()}});
  const auto& last = result.record.losses.back();
  out << "trained " << result.record.losses.size() << " steps in " << num(result.record.seconds, 1)
      << " s; final diffusion loss " << num(last.diffusion, 5) << "\n"
      << (dir / "losses.csv").string() << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& run_arg, const std::string& data_arg, bool force, std::ostream& out) {
  const fs::path run = run_arg;
  guard_overwrite(run / "metrics.csv", force);
  const auto cfg = ex::load_config(run / "config.json");
  const auto ck = diffusion::load_checkpoint(run / "checkpoint");
  const auto data = phantom::load_dataset(run_dataset(run, data_arg));
  if (ck.params.config.latent_size != data.codec.latent_size()) {
    throw DataError("checkpoint latent size does not match the dataset");
  }
  const auto eval = ex::evaluate(ck.params, data, cfg);
  ex::write_evaluation(run, eval);
  print_summary(out, "", eval.summary);
  out << (run / "metrics.csv").string() << "\n";
  return kExitOk;
}

int cmd_ablate(const TrainingArgs& a, std::ostream& out) {
  const auto cfg = resolve_config(a);
  const fs::path dir = a.out.empty() ? default_out("ablate") : fs::path(a.out);
  guard_overwrite(dir / "ablation.csv", a.force);
  const auto data = phantom::load_dataset(a.data);
  const auto rows = ex::run_ablation(data, cfg, dir);
  out << std::left << std::setw(10) << "config" << std::right << std::setw(9) << "ssim" << std::setw(9) << "psnr"
      << std::setw(9) << "rmse" << std::setw(10) << "cssim" << std::setw(10) << "d_ssim" << std::setw(10)
      << "d_cssim" << "\n";
  for (const auto& r : rows) {
    out << std::left << std::setw(10) << r.name << std::right << std::setw(9) << num(r.metrics.ssim)
        << std::setw(9) << num(r.metrics.psnr, 2) << std::setw(9) << num(r.metrics.rmse, 2) << std::setw(10)
        << num(r.metrics.cssim, 5) << std::setw(10) << num(r.delta_ssim) << std::setw(10) << num(r.delta_cssim, 5)
        << "\n";
  }
  out << (dir / "ablation.csv").string() << "\n";
  return kExitOk;
}

int cmd_sweep(const TrainingArgs& a, const std::string& knob_name, const std::string& values_text,
              std::ostream& out) {
  const auto knob = ex::knob_from_name(knob_name);
  const auto values = parse_values(values_text);
  const auto cfg = resolve_config(a);
  const fs::path dir = a.out.empty() ? default_out("sweep") : fs::path(a.out);
  guard_overwrite(dir / "sweep.csv", a.force);
  const auto data = phantom::load_dataset(a.data);
  const auto rows = ex::run_sweep(data, cfg, knob, values, dir);
  for (const auto& r : rows) {
    out << ex::knob_name(knob) << "=" << r.value << "  ";
    print_summary(out, "", r.metrics);
  }
  out << (dir / "sweep.csv").string() << "\n";
  return kExitOk;
}

// PCA of generated latents over the dense grid plus per-tissue kinetics
// curves (generated and ground truth) for one patient.
int cmd_trace(const std::string& run_arg, const std::string& data_arg, const std::string& patient, bool force,
              std::ostream& out) {
  const fs::path run = run_arg;
  const auto cfg = ex::load_config(run / "config.json");
  const auto ck = diffusion::load_checkpoint(run / "checkpoint");
  const auto data = phantom::load_dataset(run_dataset(run, data_arg));
  std::size_t index = data.patients.size();
  for (std::size_t i = 0; i < data.patients.size(); ++i)
    if (data.patients[i].id == patient) index = i;
  if (index == data.patients.size()) {
    if (!patient.empty()) throw ConfigError("--patient: no patient '" + patient + "' in the dataset");
    index = ex::eval_indices(data, cfg).front();
  }
  const auto& p = data.patients[index];
  const fs::path pca_path = run / ("trace_" + p.id + ".csv");
  const fs::path curve_path = run / ("kinetics_" + p.id + ".csv");
  guard_overwrite(pca_path, force);

  const auto trace = ex::latent_trace(ck.params, data, index, data.dense_times, cfg);
  metrics::write_pca_csv(pca_path, trace.times, trace.pca);

  const Tensor generated = ex::evaluation_generator(ck.params, data, cfg)(p, data.dense_times);
  bool append = false;
  for (auto t : {phantom::Tissue::Artery, phantom::Tissue::Parenchyma, phantom::Tissue::Delayed}) {
    std::vector<double> m(p.labels.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = p.labels[i] == static_cast<double>(t) ? 1.0 : 0.0;
    const Tensor mask(p.labels.shape(), std::move(m));
    const std::string name = phantom::tissue_name(t);
    metrics::write_curve_csv(curve_path, name + ":generated", metrics::extract_curve(generated, data.dense_times, mask),
                             append);
    append = true;
    metrics::write_curve_csv(curve_path, name + ":truth", metrics::extract_curve(p.dense, data.dense_times, mask),
                             true);
  }
  out << "patient " << p.id << ": pc1 explains " << num(trace.pca.explained.at(0), 3)
      << " of the variance; spearman(pc1, time) = " << num(trace.rank_correlation, 3) << "\n"
      << pca_path.string() << "\n"
      << curve_path.string() << "\n";
  return kExitOk;
}

int cmd_gradcheck(double step, double tol, std::size_t trials, std::uint64_t seed, const std::string& fault,
                  std::ostream& out) {
  if (!(step > 0.0) || !(tol > 0.0) || trials < 1) throw ConfigError("gradcheck: step, tol and trials must be positive");
  std::optional<ad::OpKind> op;
  if (!fault.empty()) {
    op = ad::op_from_name(fault);
    if (!op) throw ConfigError("--inject-fault: unknown op '" + fault + "'");
  }
  struct Reset {
    ~Reset() { ad::testing::inject_backward_fault(std::nullopt); }
  } reset;
  ad::testing::inject_backward_fault(op);
  out << "gradcheck step=" << step << " tol=" << tol << " trials=" << trials << " seed=" << seed;
  if (op) out << " fault=" << ad::op_name(*op);
  out << "\n";
  const auto outcomes = ad::run_gradcheck_suite(step, tol, trials, seed);
  std::vector<std::string> failed;
  for (const auto& o : outcomes) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-4s %-28s worst rel. error %.3e over %zu trials\n", o.passed ? "PASS" : "FAIL",
                  o.name.c_str(), o.worst, o.trials);
    out << buf;
    if (!o.passed) failed.push_back(o.name);
  }
  if (failed.empty()) {
    out << "all " << outcomes.size() << " checks passed\n";
  } else {
    out << failed.size() << " of " << outcomes.size() << " checks failed:";
    for (const auto& f : failed) out << " " << f;
    out << "\n";
  }
  return failed.empty() ? kExitOk : kExitCheckFailed;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Spatio-temporal consistency learning on a synthetic DCE phantom", "stcl"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  auto* phantom_cmd = app.add_subcommand("phantom", "Generate a phantom dataset");
  std::size_t patients = 20, side = 32;
  std::uint64_t data_seed = 0;
  double noise = 8.0;
  std::string phantom_out;
  bool phantom_force = false;
  phantom_cmd->add_option("--patients", patients, "Number of patients")->capture_default_str();
  phantom_cmd->add_option("--seed", data_seed, "Dataset seed")->capture_default_str();
  phantom_cmd->add_option("--side", side, "Image side in pixels (multiple of 4, at least 16)")->capture_default_str();
  phantom_cmd->add_option("--noise-sd", noise, "Acquisition noise standard deviation")->capture_default_str();
  phantom_cmd->add_option("--out", phantom_out, "Output directory (default: $STCL_OUTPUT_ROOT/phantom)");
  phantom_cmd->add_flag("--force", phantom_force, "Overwrite an existing dataset");

  TrainingArgs train_args, ablate_args, sweep_args;
  auto* train_cmd = app.add_subcommand("train", "Train both stages and write a run directory");
  add_training_flags(train_cmd, train_args);

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a trained run on its held-out patients");
  std::string eval_run, eval_data;
  bool eval_force = false;
  eval_cmd->add_option("--run", eval_run, "Run directory written by train")->required();
  eval_cmd->add_option("--data", eval_data, "Dataset directory (default: the one the run was trained on)");
  eval_cmd->add_flag("--force", eval_force, "Overwrite existing evaluation files");

  auto* ablate_cmd = app.add_subcommand("ablate", "Baseline, +LAL, +LDL and full model with shared seeds");
  add_training_flags(ablate_cmd, ablate_args);

  auto* sweep_cmd = app.add_subcommand("sweep", "Retrain over values of one hyperparameter");
  add_training_flags(sweep_cmd, sweep_args);
  std::string knob, values;
  sweep_cmd->add_option("--knob", knob, "lambda_spatial or K_i")->required();
  sweep_cmd->add_option("--values", values, "Comma-separated values, e.g. 0,1,2,4")->required();

  auto* trace_cmd = app.add_subcommand("trace", "Latent PCA trace and kinetics curves for one patient");
  std::string trace_run, trace_data, trace_patient;
  bool trace_force = false;
  trace_cmd->add_option("--run", trace_run, "Run directory written by train")->required();
  trace_cmd->add_option("--data", trace_data, "Dataset directory (default: the one the run was trained on)");
  trace_cmd->add_option("--patient", trace_patient, "Patient id (default: first held-out patient)");
  trace_cmd->add_flag("--force", trace_force, "Overwrite existing trace files");

  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every op and both losses");
  double step = 1e-5, tol = 1e-4;
  std::size_t trials = 3;
  std::uint64_t grad_seed = 0;
  std::string fault;
  grad_cmd->add_option("--step", step, "Central-difference step")->capture_default_str();
  grad_cmd->add_option("--tol", tol, "Largest accepted relative error")->capture_default_str();
  grad_cmd->add_option("--trials", trials, "Random instances per check")->capture_default_str();
  grad_cmd->add_option("--seed", grad_seed, "Seed for the random instances")->capture_default_str();
  grad_cmd->add_option("--inject-fault", fault, "Corrupt the backward rule of one op (self-test)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitInvalid;
  }

  try {
    if (*phantom_cmd) return cmd_phantom(patients, data_seed, side, noise, phantom_out, phantom_force, out);
    if (*train_cmd) return cmd_train(train_args, out, err);
    if (*eval_cmd) return cmd_eval(eval_run, eval_data, eval_force, out);
    if (*ablate_cmd) return cmd_ablate(ablate_args, out);
    if (*sweep_cmd) return cmd_sweep(sweep_args, knob, values, out);
    if (*trace_cmd) return cmd_trace(trace_run, trace_data, trace_patient, trace_force, out);
    if (*grad_cmd) return cmd_gradcheck(step, tol, trials, grad_seed, fault, out);
  } catch (const Refusal& e) {
    err << "error: " << e.what() << "\n";
    return e.code;
  } catch (const ex::NonFiniteLoss& e) {
    err << "error: " << e.what() << "\n";
    return kExitNonFinite;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const InputError& e) {
    err << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const DataError& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitCheckFailed;
  }
  return kExitInvalid;
}

}  // namespace stcl::cli

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "stcl/cli.hpp"

namespace fs = std::filesystem;
namespace cli = stcl::cli;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
  std::string err;
};

Outcome run(std::vector<std::string> args) {
  args.insert(args.begin(), "stcl");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Outcome o;
  o.code = cli::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  o.out = out.str();
  o.err = err.str();
  return o;
}

// Runs the installed binary through the shell; stderr is folded into out.
Outcome spawn(const std::string& args, const std::string& env = {}) {
  const std::string cmd = env + (env.empty() ? "" : " ") + std::string(STCL_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  Outcome o;
  std::array<char, 512> buf{};
  while (std::fgets(buf.data(), buf.size(), pipe)) o.out += buf.data();
  const int status = pclose(pipe);
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t lines(const std::string& s) {
  std::size_t n = 0;
  for (char c : s) n += c == '\n';
  return n;
}

// Fresh scratch directory per test case, with a small dataset and a fast config.
struct Workspace {
  fs::path root;
  fs::path data;
  fs::path config;

  explicit Workspace(const std::string& name) {
    root = fs::temp_directory_path() / ("stcl_cli_" + name);
    fs::remove_all(root);
    fs::create_directories(root);
    data = root / "data";
    config = root / "cfg.json";
    std::ofstream(config) << R"({"epochs": 2, "stage1_epochs": 1, "passes_per_epoch": 1, "hidden": [8],
                                 "holdout": 1, "sample_steps": 2})";
  }
  ~Workspace() { fs::remove_all(root); }

  void make_data() const {
    REQUIRE(run({"phantom", "--patients", "3", "--seed", "5", "--side", "16", "--out", data.string()}).code ==
            cli::kExitOk);
  }
};

}  // namespace

TEST_CASE("help and usage errors") {
  CHECK(run({"--help"}).code == cli::kExitOk);
  const auto h = run({"train", "--help"});
  CHECK(h.code == cli::kExitOk);
  CHECK(h.out.find("--force") != std::string::npos);
  CHECK(run({}).code == cli::kExitInvalid);
  CHECK(run({"nonsense"}).code == cli::kExitInvalid);
  CHECK(run({"train"}).code == cli::kExitInvalid);  // --data is required
  CHECK(run({"phantom", "--patients", "abc"}).code == cli::kExitInvalid);
  CHECK(run({"gradcheck", "--tol", "-1"}).code == cli::kExitInvalid);
  CHECK(run({"gradcheck", "--inject-fault", "no_such_op"}).code == cli::kExitInvalid);
}

TEST_CASE("phantom writes a dataset and refuses to overwrite it") {
  Workspace w("phantom");
  w.make_data();
  CHECK(fs::exists(w.data / "manifest.json"));
  const auto again = run({"phantom", "--patients", "3", "--out", w.data.string()});
  CHECK(again.code == cli::kExitExists);
  CHECK(again.err.find("--force") != std::string::npos);
  CHECK(run({"phantom", "--patients", "3", "--side", "16", "--out", w.data.string(), "--force"}).code ==
        cli::kExitOk);
  CHECK(run({"phantom", "--patients", "0", "--out", (w.root / "z").string()}).code == cli::kExitInvalid);
  CHECK(run({"phantom", "--side", "18", "--out", (w.root / "z").string()}).code == cli::kExitInvalid);
}

TEST_CASE("bad inputs map to their exit codes") {
  Workspace w("inputs");
  CHECK(run({"train", "--data", (w.root / "missing").string(), "--out", (w.root / "r").string()}).code ==
        cli::kExitIo);
  w.make_data();
  std::ofstream(w.root / "bad.json") << R"({"epochs": 2, "no_such_key": 1})";
  CHECK(run({"train", "--data", w.data.string(), "--config", (w.root / "bad.json").string(), "--out",
             (w.root / "r").string()})
            .code == cli::kExitInvalid);
  std::ofstream(w.root / "broken.json") << "{ not json";
  CHECK(run({"train", "--data", w.data.string(), "--config", (w.root / "broken.json").string(), "--out",
             (w.root / "r").string()})
            .code != cli::kExitOk);
  CHECK(run({"sweep", "--data", w.data.string(), "--knob", "beta", "--values", "1"}).code == cli::kExitInvalid);
  CHECK(run({"sweep", "--data", w.data.string(), "--knob", "K_i", "--values", "1,x"}).code == cli::kExitInvalid);
  CHECK(run({"eval", "--run", (w.root / "nothing").string()}).code == cli::kExitIo);

  std::ofstream(w.root / "hot.json") << R"({"epochs": 1, "stage1_epochs": 1, "passes_per_epoch": 1, "hidden": [8],
                                            "holdout": 1, "learning_rate": 1e300})";
  const auto hot = run({"train", "--data", w.data.string(), "--config", (w.root / "hot.json").string(), "--out",
                        (w.root / "hot").string()});
  CHECK(hot.code == cli::kExitNonFinite);
  CHECK(fs::exists(w.root / "hot" / "nonfinite_batch.json"));
}

TEST_CASE("train, eval and trace form a pipeline") {
  Workspace w("pipeline");
  w.make_data();
  const auto run_dir = w.root / "run";
  const auto t = run({"train", "--data", w.data.string(), "--config", w.config.string(), "--out", run_dir.string()});
  REQUIRE(t.code == cli::kExitOk);
  for (const char* f : {"config.json", "losses.csv", "run.json", "source.json"}) CHECK(fs::exists(run_dir / f));
  CHECK(fs::is_directory(run_dir / "checkpoint"));
  CHECK(run({"train", "--data", w.data.string(), "--config", w.config.string(), "--out", run_dir.string()}).code ==
        cli::kExitExists);

  const auto e = run({"eval", "--run", run_dir.string()});
  REQUIRE(e.code == cli::kExitOk);
  CHECK(e.out.find("ssim") != std::string::npos);
  CHECK(fs::exists(run_dir / "metrics.csv"));
  CHECK(lines(slurp(run_dir / "frames.csv")) > 1);
  CHECK(run({"eval", "--run", run_dir.string()}).code == cli::kExitExists);
  CHECK(run({"eval", "--run", run_dir.string(), "--force"}).code == cli::kExitOk);

  const auto tr = run({"trace", "--run", run_dir.string()});
  REQUIRE(tr.code == cli::kExitOk);
  CHECK(tr.out.find("spearman") != std::string::npos);
  CHECK(lines(slurp(run_dir / "trace_p002.csv")) == 1 + 61);  // header + dense grid
  const auto kinetics = slurp(run_dir / "kinetics_p002.csv");
  CHECK(kinetics.find("artery:truth") != std::string::npos);
  CHECK(kinetics.find("delayed:generated") != std::string::npos);
  CHECK(run({"trace", "--run", run_dir.string(), "--patient", "p999"}).code == cli::kExitInvalid);
}

TEST_CASE("sweep writes one row per value and ablate prints four configurations") {
  Workspace w("sweep");
  w.make_data();
  const auto s = run({"sweep", "--data", w.data.string(), "--config", w.config.string(), "--knob", "K_i",
                      "--values", "0,1,2,4", "--out", (w.root / "s").string()});
  REQUIRE(s.code == cli::kExitOk);
  CHECK(lines(slurp(w.root / "s" / "sweep.csv")) == 5);
  for (const char* d : {"K_i_0", "K_i_1", "K_i_2", "K_i_4"}) CHECK(fs::exists(w.root / "s" / d / "losses.csv"));

  const auto a = run({"ablate", "--data", w.data.string(), "--config", w.config.string(), "--out",
                      (w.root / "a").string()});
  REQUIRE(a.code == cli::kExitOk);
  for (const char* name : {"baseline", "+LAL", "+LDL", "full"}) CHECK(a.out.find(name) != std::string::npos);
  CHECK(lines(slurp(w.root / "a" / "ablation.csv")) == 5);
}

TEST_CASE("gradcheck passes and a corrupted backward rule is named") {
  const auto ok = run({"gradcheck", "--trials", "1"});
  CHECK(ok.code == cli::kExitOk);
  CHECK(ok.out.find("step=1e-05 tol=0.0001") != std::string::npos);
  CHECK(ok.out.find("FAIL") == std::string::npos);

  const auto bad = run({"gradcheck", "--trials", "1", "--inject-fault", "tanh"});
  CHECK(bad.code == cli::kExitCheckFailed);
  CHECK(bad.out.find("FAIL tanh") != std::string::npos);
  CHECK(bad.out.find("checks failed: tanh") != std::string::npos);

  // The fault is cleared afterwards.
  CHECK(run({"gradcheck", "--trials", "1"}).code == cli::kExitOk);
}

TEST_CASE("identical invocations give byte-identical outputs") {
  Workspace w("determinism");
  w.make_data();
  for (const char* r : {"r1", "r2"}) {
    REQUIRE(run({"train", "--data", w.data.string(), "--config", w.config.string(), "--seed", "3", "--out",
                 (w.root / r).string()})
                .code == cli::kExitOk);
    REQUIRE(run({"eval", "--run", (w.root / r).string()}).code == cli::kExitOk);
  }
  CHECK(slurp(w.root / "r1" / "losses.csv") == slurp(w.root / "r2" / "losses.csv"));
  CHECK(slurp(w.root / "r1" / "metrics.csv") == slurp(w.root / "r2" / "metrics.csv"));
  CHECK(slurp(w.root / "r1" / "config.json").find("\"seed\": 3") != std::string::npos);
}

TEST_CASE("the binary honours the output root and reports exit codes") {
  Workspace w("binary");
  const std::string env = "STCL_OUTPUT_ROOT=" + w.root.string();
  const auto made = spawn("phantom --patients 2 --side 16", env);
  CHECK(made.code == cli::kExitOk);
  CHECK(fs::exists(w.root / "phantom" / "manifest.json"));
  CHECK(spawn("phantom --patients 2 --side 16", env).code == cli::kExitExists);
  CHECK(spawn("frobnicate").code == cli::kExitInvalid);
  CHECK(spawn("gradcheck --trials 1 --inject-fault mul").code == cli::kExitCheckFailed);
}

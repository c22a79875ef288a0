#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "grumpc/io.hpp"
#include "grumpc/stability.hpp"

using namespace grumpc;
using Catch::Matchers::ContainsSubstring;

namespace {

namespace fs = std::filesystem;

struct CliResult {
  int code = -1;
  std::string output;  // stdout followed by stderr
};

fs::path work_root() {
  static fs::path root = [] {
    fs::path p = fs::temp_directory_path() / "grumpc_cli_tests";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

void spit(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
}

CliResult run_cli(const std::string& args) {
  static int counter = 0;
  fs::path out_file = work_root() / ("stdout_" + std::to_string(counter) + ".txt");
  fs::path err_file = work_root() / ("stderr_" + std::to_string(counter) + ".txt");
  ++counter;
  std::string cmd = std::string(GRUMPC_CLI_PATH) + " " + args + " > " + out_file.string() +
                    " 2> " + err_file.string();
  int status = std::system(cmd.c_str());
  CliResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.output = slurp(out_file) + slurp(err_file);
  return r;
}

std::string replace(std::string text, const std::string& from, const std::string& to) {
  size_t at = text.find(from);
  REQUIRE(at != std::string::npos);
  return text.replace(at, from.size(), to);
}

const std::string kBaseConfig = R"(seed 3
plant {
  kind four_tank
  Ts 25.0
}
excitation {
  levels 3
  hold 8
  length 600
}
split {
  train 450
  validation 75
  test 75
  subsequence 150
}
training {
  hidden 4
  epochs 40
  batch 3
  learning_rate 0.05
  momentum 0.8
  clip 1.0
  washout 10
  penalty_weight 5
  penalty_margin 0.05
  init_scale 0.4
}
observer {
  mode open_loop
}
mpc {
  N 5
  Q 1.0
  R 0.01
  s auto
  e_o_0 0.005
  w_bar_y 0.02
  output_lo 0.1 0.1
  output_hi 1.9 1.9
}
simulation {
  steps 12
  reference 0 0.65 0.65
}
)";

/// Shared pipeline artifacts: dataset and trained weights under work_root()/ws.
struct Workspace {
  fs::path config = work_root() / "cli.cfg";
  fs::path dir = work_root() / "ws";
  fs::path weights = dir / "weights.txt";

  Workspace() {
    spit(config, kBaseConfig);
    CliResult gen = run_cli("gen-data --config " + config.string() + " --out " + dir.string());
    REQUIRE(gen.code == 0);
    CliResult train = run_cli("train --config " + config.string() + " --out " + dir.string());
    REQUIRE(train.code == 0);
  }
};

Workspace& workspace() {
  static Workspace ws;
  return ws;
}

long count_lines(const fs::path& path) {
  std::ifstream in(path);
  std::string line;
  long n = 0;
  while (std::getline(in, line))
    if (!line.empty()) ++n;
  return n;
}

}  // namespace

TEST_CASE("command line rejects usage errors") {
  CHECK(run_cli("").code == 3);
  CHECK(run_cli("frobnicate").code == 3);
  CHECK(run_cli("--help").code == 0);
  CHECK(run_cli("simulate").code == 3);  // missing required flags
}

TEST_CASE("data generation is deterministic and seed-sensitive") {
  Workspace& ws = workspace();
  fs::path again = work_root() / "ws_again";
  fs::path reseeded = work_root() / "ws_reseeded";

  CliResult rerun =
      run_cli("gen-data --config " + ws.config.string() + " --out " + again.string());
  REQUIRE(rerun.code == 0);
  CHECK(slurp(again / "dataset.csv") == slurp(ws.dir / "dataset.csv"));

  CliResult other = run_cli("gen-data --config " + ws.config.string() + " --out " +
                            reseeded.string() + " --seed 9");
  REQUIRE(other.code == 0);
  CHECK(slurp(reseeded / "dataset.csv") != slurp(ws.dir / "dataset.csv"));

  CHECK(count_lines(ws.dir / "dataset.csv") == 601);  // header + samples
}

TEST_CASE("training produces certified weights and a report") {
  Workspace& ws = workspace();
  REQUIRE(fs::exists(ws.weights));
  CHECK(fs::exists(ws.dir / "training_report.csv"));

  GruParams g = load_weights(ws.weights.string());
  CHECK(g.n == 4);
  CHECK(g.m == 2);
  CHECK(g.p == 2);
  CHECK(stability_metrics(g).delta_iss);

  CliResult certify = run_cli("certify --weights " + ws.weights.string());
  CHECK(certify.code == 0);
  CHECK_THAT(certify.output, ContainsSubstring("certified (nu < 1)"));
}

TEST_CASE("certification rejects an unstable model") {
  fs::path bad = work_root() / "unstable.txt";
  GruParams g = GruParams::zeros(2, 1, 1);
  g.U_z = MatrixXd::Constant(2, 2, 4.0);
  g.U_h = MatrixXd::Constant(2, 2, 4.0);
  g.U_o = MatrixXd::Constant(1, 2, 1.0);
  save_weights(bad.string(), g);

  CliResult certify = run_cli("certify --weights " + bad.string());
  CHECK(certify.code == 1);
  CHECK_THAT(certify.output, ContainsSubstring("NOT certified"));

  CliResult gains = run_cli("gains --weights " + bad.string() + " --out " +
                            (work_root() / "gains_bad").string());
  CHECK(gains.code == 1);

  CliResult verify = run_cli("verify --weights " + bad.string());
  CHECK(verify.code == 1);
  CHECK_THAT(verify.output, ContainsSubstring("FAIL"));
}

TEST_CASE("gain synthesis augments the weights file") {
  Workspace& ws = workspace();
  fs::path cfg = work_root() / "gains.cfg";
  spit(cfg, "observer {\n  mode min_nu_o\n}\n");
  fs::path out = work_root() / "gains_out";

  CliResult gains = run_cli("gains --config " + cfg.string() + " --weights " +
                            ws.weights.string() + " --out " + out.string());
  REQUIRE(gains.code == 0);

  ObserverGains synthesized;
  bool have_gains = false;
  load_weights((out / "weights.txt").string(), &synthesized, &have_gains);
  CHECK(have_gains);
  CHECK(synthesized.L_z.rows() == 4);
  CHECK(synthesized.L_z.cols() == 2);
}

TEST_CASE("simulation writes artifacts and reports completion") {
  Workspace& ws = workspace();
  fs::path out = work_root() / "sim";
  CliResult sim = run_cli("simulate --config " + ws.config.string() + " --weights " +
                          ws.weights.string() + " --out " + out.string());
  REQUIRE(sim.code == 0);
  CHECK_THAT(sim.output, ContainsSubstring("12 steps, completed"));
  CHECK(fs::exists(out / "schedule.csv"));
  CHECK(fs::exists(out / "closed_loop.csv"));
  CHECK(fs::exists(out / "summary.txt"));
  CHECK(count_lines(out / "closed_loop.csv") == 13);  // header + one row per step
  CHECK_THAT(slurp(out / "summary.txt"), ContainsSubstring("completed"));
}

TEST_CASE("simulation gate rejects an over-wide uncertainty budget") {
  Workspace& ws = workspace();
  fs::path cfg = work_root() / "wide.cfg";
  spit(cfg, replace(kBaseConfig, "w_bar_y 0.02", "w_bar_y 0.75"));
  CliResult sim = run_cli("simulate --config " + cfg.string() + " --weights " +
                          ws.weights.string() + " --out " + (work_root() / "sim_wide").string());
  CHECK(sim.code == 1);
  CHECK_THAT(sim.output, ContainsSubstring("pre-run check failed"));
}

TEST_CASE("simulation gate rejects an unreachable reference") {
  Workspace& ws = workspace();
  fs::path cfg = work_root() / "far.cfg";
  spit(cfg, replace(kBaseConfig, "reference 0 0.65 0.65", "reference 0 1.70 1.70"));
  CliResult sim = run_cli("simulate --config " + cfg.string() + " --weights " +
                          ws.weights.string() + " --out " + (work_root() / "sim_far").string());
  CHECK(sim.code == 1);
  CHECK_THAT(sim.output, ContainsSubstring("equilibrium solve failed"));
}

TEST_CASE("runtime infeasibility aborts with the dedicated exit code") {
  Workspace& ws = workspace();
  // Plant starts at levels whose estimate sits outside a narrow output box, so
  // the very first stage constraint cannot be repaired by any input plan.
  std::string cfg_text = kBaseConfig;
  cfg_text = replace(cfg_text, "kind four_tank",
                     "kind four_tank\n  initial_levels 1.0 1.0 1.0 1.0");
  cfg_text = replace(cfg_text, "output_lo 0.1 0.1", "output_lo 0.55 0.55");
  cfg_text = replace(cfg_text, "output_hi 1.9 1.9", "output_hi 0.75 0.75");
  fs::path cfg = work_root() / "narrow.cfg";
  spit(cfg, cfg_text);

  fs::path out = work_root() / "sim_narrow";
  CliResult sim = run_cli("simulate --config " + cfg.string() + " --weights " +
                          ws.weights.string() + " --out " + out.string());
  CHECK(sim.code == 2);
  CHECK_THAT(sim.output, ContainsSubstring("FHOCP infeasible at step 0"));
  CHECK(fs::exists(out / "closed_loop.csv"));  // artifacts survive the abort
  CHECK_THAT(slurp(out / "summary.txt"), ContainsSubstring("aborted"));
}

TEST_CASE("verification battery passes on the trained model") {
  Workspace& ws = workspace();
  CliResult verify = run_cli("verify --config " + ws.config.string() + " --weights " +
                             ws.weights.string() + " --seed 11");
  CHECK(verify.code == 0);
  CHECK_THAT(verify.output, ContainsSubstring("all checks passed"));
  CHECK_THAT(verify.output, ContainsSubstring("norm_square_lemma"));
  CHECK_THAT(verify.output, ContainsSubstring("loop_constraint_satisfaction"));
}

TEST_CASE("input and schema failures use the I/O exit code") {
  Workspace& ws = workspace();
  CHECK(run_cli("gen-data --config " + (work_root() / "missing.cfg").string() + " --out " +
                (work_root() / "x").string())
            .code == 3);
  CHECK(run_cli("certify --weights " + (work_root() / "missing.txt").string()).code == 3);

  fs::path cfg = work_root() / "typo.cfg";
  spit(cfg, replace(kBaseConfig, "  Ts 25.0", "  Ts 25.0\n  gamma_q 0.5"));
  CliResult gen = run_cli("gen-data --config " + cfg.string() + " --out " +
                          (work_root() / "typo_out").string());
  CHECK(gen.code == 3);
  CHECK_THAT(gen.output, ContainsSubstring("typo.cfg:5: unknown key 'plant.gamma_q'"));

  fs::path corrupt = work_root() / "corrupt.txt";
  spit(corrupt, slurp(ws.weights).substr(0, 120));
  CHECK(run_cli("certify --weights " + corrupt.string()).code == 3);
}

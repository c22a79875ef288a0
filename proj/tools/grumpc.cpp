// Command-line front end: data generation, training, certification, observer
// gain synthesis, closed-loop simulation, and the verification battery.
//
// Exit codes: 0 success, 1 precondition or certification failure, 2 runtime
// infeasibility, 3 I/O or schema error.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "grumpc/closed_loop.hpp"
#include "grumpc/io.hpp"
#include "grumpc/verify.hpp"

namespace {

using namespace grumpc;

constexpr int kExitOk = 0;
constexpr int kExitPrecondition = 1;
constexpr int kExitInfeasible = 2;
constexpr int kExitIo = 3;

// ---------------------------------------------------------------------------
// Experiment configuration: one schema shared by all subcommands. Sections
// are optional; each command checks for the ones it needs. Every key in the
// file must be recognized or loading fails with the offending line.
// ---------------------------------------------------------------------------

struct PlantConfig {
  std::string kind = "four_tank";  // four_tank | model
  double Ts = 25.0;
  FourTankParams tank;
  VectorXd initial_levels;   // four_tank; empty = steady state at mid-range inflows
  std::string weights_path;  // model
  double noise = 0.0;        // model: measurement noise amplitude, normalized
  VectorXd initial_state;    // model; empty = zero
};

struct ExcitationConfig {
  int levels = 5;
  int hold = 10;
  int length = 0;
  VectorXd lo, hi;  // physical; empty = the plant's input range
};

struct SplitConfig {
  SplitSpec split;
  int subsequence = 500;
};

struct MpcConfig {
  int N = 15;
  VectorXd Q_diag = VectorXd::Ones(1);             // broadcast when a single value
  VectorXd R_diag = VectorXd::Constant(1, 0.01);   // broadcast when a single value
  std::optional<double> s;                         // empty = auto
  double e_o_0 = 0.02;
  std::optional<double> w_bar_y;                   // empty = auto (from the test split)
  VectorXd output_lo, output_hi;                   // physical; empty = normalization range
  FhocpOptions solver;
};

struct SimulationConfig {
  long steps = 0;
  std::vector<std::vector<std::string>> reference_rows;  // start step, then p values
};

struct ExperimentConfig {
  std::string path;
  std::uint64_t seed = 1;
  std::string dataset_path;  // empty = <out>/dataset.csv
  std::optional<PlantConfig> plant;
  std::optional<ExcitationConfig> excitation;
  std::optional<SplitConfig> split;
  std::optional<TrainConfig> training;
  ObserverMode observer_mode = ObserverMode::min_nu_o;
  std::optional<MpcConfig> mpc;
  std::optional<SimulationConfig> simulation;
};

ObserverMode parse_observer_mode(const std::string& word, const std::string& where) {
  if (word == "open_loop") return ObserverMode::open_loop;
  if (word == "min_nu_o") return ObserverMode::min_nu_o;
  throw IoError(where + ": observer mode must be open_loop or min_nu_o, got '" + word + "'");
}

ExperimentConfig load_experiment(const std::string& path) {
  ConfigNode node = load_config(path);
  ConfigSection root(&node, path, "");
  ExperimentConfig cfg;
  cfg.path = path;
  cfg.seed = static_cast<std::uint64_t>(root.integer_or("seed", 1));
  cfg.dataset_path = root.word_or("dataset", "");

  if (auto sec = root.maybe_section("plant")) {
    PlantConfig p;
    p.kind = sec->word_or("kind", "four_tank");
    p.Ts = sec->number_or("Ts", 25.0);
    if (p.kind == "four_tank") {
      p.tank.a1 = sec->number_or("a1", p.tank.a1);
      p.tank.a2 = sec->number_or("a2", p.tank.a2);
      p.tank.a3 = sec->number_or("a3", p.tank.a3);
      p.tank.a4 = sec->number_or("a4", p.tank.a4);
      p.tank.S = sec->number_or("S", p.tank.S);
      p.tank.gamma_a = sec->number_or("gamma_a", p.tank.gamma_a);
      p.tank.gamma_b = sec->number_or("gamma_b", p.tank.gamma_b);
      p.tank.g = sec->number_or("g", p.tank.g);
      p.tank.q_a_max = sec->number_or("q_a_max", p.tank.q_a_max);
      p.tank.q_b_max = sec->number_or("q_b_max", p.tank.q_b_max);
      p.tank.level_max = sec->number_or("level_max", p.tank.level_max);
      if (sec->has("initial_levels")) p.initial_levels = sec->vector("initial_levels");
    } else if (p.kind == "model") {
      p.weights_path = sec->word("weights");
      p.noise = sec->number_or("noise", 0.0);
      if (sec->has("initial_state")) p.initial_state = sec->vector("initial_state");
    } else {
      throw IoError(path + ": plant.kind must be four_tank or model, got '" + p.kind + "'");
    }
    sec->finish();
    cfg.plant = std::move(p);
  }

  if (auto sec = root.maybe_section("excitation")) {
    ExcitationConfig e;
    e.levels = static_cast<int>(sec->integer_or("levels", 5));
    e.hold = static_cast<int>(sec->integer_or("hold", 10));
    e.length = static_cast<int>(sec->integer("length"));
    if (sec->has("lo")) e.lo = sec->vector("lo");
    if (sec->has("hi")) e.hi = sec->vector("hi");
    sec->finish();
    cfg.excitation = std::move(e);
  }

  if (auto sec = root.maybe_section("split")) {
    SplitConfig s;
    s.split.train = static_cast<int>(sec->integer("train"));
    s.split.validation = static_cast<int>(sec->integer("validation"));
    s.split.test = static_cast<int>(sec->integer("test"));
    s.subsequence = static_cast<int>(sec->integer_or("subsequence", 500));
    sec->finish();
    cfg.split = s;
  }

  if (auto sec = root.maybe_section("training")) {
    TrainConfig t;
    t.hidden = static_cast<int>(sec->integer_or("hidden", t.hidden));
    t.epochs = static_cast<int>(sec->integer_or("epochs", t.epochs));
    t.batch_size = static_cast<int>(sec->integer_or("batch", t.batch_size));
    t.learning_rate = sec->number_or("learning_rate", t.learning_rate);
    t.momentum = sec->number_or("momentum", t.momentum);
    t.clip_norm = sec->number_or("clip", t.clip_norm);
    t.washout = static_cast<int>(sec->integer_or("washout", t.washout));
    t.penalty_weight = sec->number_or("penalty_weight", t.penalty_weight);
    t.penalty_margin = sec->number_or("penalty_margin", t.penalty_margin);
    t.init_scale = sec->number_or("init_scale", t.init_scale);
    sec->finish();
    cfg.training = t;
  }

  if (auto sec = root.maybe_section("observer")) {
    cfg.observer_mode = parse_observer_mode(sec->word("mode"), path);
    sec->finish();
  }

  if (auto sec = root.maybe_section("mpc")) {
    MpcConfig m;
    m.N = static_cast<int>(sec->integer_or("N", m.N));
    if (sec->has("Q")) m.Q_diag = sec->vector("Q");
    if (sec->has("R")) m.R_diag = sec->vector("R");
    if (sec->has("s")) {
      std::string word = sec->word("s");
      if (word != "auto") m.s = grumpc::detail::parse_double(word, path + ": mpc.s");
    }
    m.e_o_0 = sec->number_or("e_o_0", m.e_o_0);
    if (sec->has("w_bar_y")) {
      std::string word = sec->word("w_bar_y");
      if (word != "auto") m.w_bar_y = grumpc::detail::parse_double(word, path + ": mpc.w_bar_y");
    }
    if (sec->has("output_lo")) m.output_lo = sec->vector("output_lo");
    if (sec->has("output_hi")) m.output_hi = sec->vector("output_hi");
    if (auto solver = sec->maybe_section("solver")) {
      m.solver.outer_iterations =
          static_cast<int>(solver->integer_or("outer_iterations", m.solver.outer_iterations));
      m.solver.inner_iterations =
          static_cast<int>(solver->integer_or("inner_iterations", m.solver.inner_iterations));
      m.solver.feasibility_tolerance =
          solver->number_or("feasibility_tolerance", m.solver.feasibility_tolerance);
      m.solver.gradient_tolerance =
          solver->number_or("gradient_tolerance", m.solver.gradient_tolerance);
      m.solver.initial_penalty = solver->number_or("initial_penalty", m.solver.initial_penalty);
      m.solver.penalty_growth = solver->number_or("penalty_growth", m.solver.penalty_growth);
      m.solver.initial_step = solver->number_or("initial_step", m.solver.initial_step);
      solver->finish();
    }
    sec->finish();
    cfg.mpc = std::move(m);
  }

  if (auto sec = root.maybe_section("simulation")) {
    SimulationConfig s;
    s.steps = sec->integer("steps");
    s.reference_rows = sec->rows("reference");
    sec->finish();
    cfg.simulation = std::move(s);
  }

  root.finish();
  return cfg;
}

// ---------------------------------------------------------------------------
// Shared helpers.
// ---------------------------------------------------------------------------

const PlantConfig& require_section(const std::optional<PlantConfig>& s, const char* cmd) {
  require(s.has_value(), std::string(cmd) + ": config needs a plant section");
  return *s;
}

template <typename T>
const T& require_section(const std::optional<T>& s, const char* cmd, const char* name) {
  require(s.has_value(), std::string(cmd) + ": config needs a " + name + " section");
  return *s;
}

std::string artifact_path(const std::string& out_dir, const std::string& name) {
  std::filesystem::create_directories(out_dir);
  return (std::filesystem::path(out_dir) / name).string();
}

std::string dataset_path(const ExperimentConfig& cfg, const std::string& out_dir) {
  return cfg.dataset_path.empty() ? (std::filesystem::path(out_dir) / "dataset.csv").string()
                                  : cfg.dataset_path;
}

struct PlantChannels {
  int m = 0, p = 0;
  Scaler input_scaler, output_scaler;
  std::vector<std::string> input_names, output_names;
};

// The normalization attached to a plant: physical ranges for a four-tank
// rig, the embedded scalers for a model plant.
PlantChannels plant_channels(const PlantConfig& plant) {
  PlantChannels ch;
  if (plant.kind == "four_tank") {
    ch.m = 2;
    ch.p = 2;
    ch.input_scaler = Scaler::from_bounds(
        VectorXd::Zero(2), (VectorXd(2) << plant.tank.q_a_max, plant.tank.q_b_max).finished());
    ch.output_scaler =
        Scaler::from_bounds(VectorXd::Zero(2), VectorXd::Constant(2, plant.tank.level_max));
    ch.input_names = {"q_a", "q_b"};
    ch.output_names = {"h1", "h2"};
  } else {
    GruParams g = load_weights(plant.weights_path);
    ch.m = g.m;
    ch.p = g.p;
    ch.input_scaler = g.input_scaler;
    ch.output_scaler = g.output_scaler;
    for (int j = 0; j < ch.m; ++j) ch.input_names.push_back("u" + std::to_string(j + 1));
    for (int j = 0; j < ch.p; ++j) ch.output_names.push_back("y" + std::to_string(j + 1));
  }
  return ch;
}

std::unique_ptr<Plant> make_plant(const PlantConfig& plant, std::uint64_t seed) {
  if (plant.kind == "four_tank") {
    VectorXd h0 = plant.initial_levels;
    if (h0.size() == 0) {
      // Default start: the steady levels under mid-range inflows.
      h0 = four_tank_steady_state(plant.tank.q_a_max / 2.0, plant.tank.q_b_max / 2.0, plant.tank);
    }
    return std::make_unique<FourTankPlant>(plant.tank, h0, plant.Ts);
  }
  GruParams g = load_weights(plant.weights_path);
  VectorXd x0 = plant.initial_state.size() > 0 ? plant.initial_state : VectorXd::Zero(g.n);
  return std::make_unique<GruPlant>(std::move(g), std::move(x0), plant.noise, seed);
}

MatrixXd diagonal_from(const VectorXd& entries, int size, const char* name) {
  if (entries.size() == 1) return entries(0) * MatrixXd::Identity(size, size);
  require(entries.size() == size,
          std::string(name) + " diagonal needs 1 or " + std::to_string(size) + " entries");
  return entries.asDiagonal();
}

double status_code(SolveStatus s) {
  switch (s) {
    case SolveStatus::optimal: return 0.0;
    case SolveStatus::feasible_suboptimal: return 1.0;
    case SolveStatus::infeasible: return 2.0;
  }
  return -1.0;
}

std::string fmt(double v) { return grumpc::detail::format_g17(v); }

std::string fmt_vec(const VectorXd& v) {
  std::string out;
  for (Eigen::Index j = 0; j < v.size(); ++j) {
    if (j > 0) out += ' ';
    out += fmt(v(j));
  }
  return out;
}

void print_observer_metrics(std::ostream& os, const std::string& label,
                            const ObserverCertificate& m) {
  os << label << ": nu_o " << fmt(m.nu_o) << ", rho_o " << fmt(m.rho_o) << ", kappa "
     << fmt(m.kappa) << ", injection_gain " << fmt(m.injection_gain)
     << (m.converging ? " (convergent)" : " (NOT convergent)") << "\n";
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

int cmd_gen_data(const ExperimentConfig& cfg, const std::string& out_dir) {
  const PlantConfig& plant = require_section(cfg.plant, "gen-data");
  const ExcitationConfig& exc = require_section(cfg.excitation, "gen-data", "excitation");
  PlantChannels ch = plant_channels(plant);

  ExcitationSpec spec;
  spec.levels = exc.levels;
  spec.hold = exc.hold;
  spec.length = exc.length;
  spec.seed = cfg.seed;
  spec.amplitude_lo = exc.lo.size() > 0 ? exc.lo
                                        : VectorXd(ch.input_scaler.offset - ch.input_scaler.half_range);
  spec.amplitude_hi = exc.hi.size() > 0 ? exc.hi
                                        : VectorXd(ch.input_scaler.offset + ch.input_scaler.half_range);
  std::vector<VectorXd> inputs = multilevel_prs(spec);

  std::unique_ptr<Plant> sim = make_plant(plant, cfg.seed + 1);
  std::vector<std::string> header{"t"};
  for (const std::string& name : ch.input_names) header.push_back(name);
  for (const std::string& name : ch.output_names) header.push_back(name);
  std::vector<VectorXd> rows;
  rows.reserve(inputs.size());
  for (size_t k = 0; k < inputs.size(); ++k) {
    VectorXd y = sim->measure();
    VectorXd row(1 + ch.m + ch.p);
    row(0) = static_cast<double>(k) * plant.Ts;
    row.segment(1, ch.m) = inputs[k];
    row.segment(1 + ch.m, ch.p) = y;
    rows.push_back(std::move(row));
    sim->apply(inputs[k]);
  }

  const std::string path = artifact_path(out_dir, "dataset.csv");
  write_series_csv(path, header, rows);
  std::cout << "wrote " << rows.size() << " samples to " << path << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int cmd_train(const ExperimentConfig& cfg, const std::string& out_dir) {
  const PlantConfig& plant = require_section(cfg.plant, "train");
  const SplitConfig& split = require_section(cfg.split, "train", "split");
  TrainConfig tc = cfg.training.value_or(TrainConfig{});
  tc.subsequence_length = split.subsequence;
  tc.seed = cfg.seed;

  PlantChannels ch = plant_channels(plant);
  const std::string data_path = dataset_path(cfg, out_dir);
  RawSeries raw = read_series_csv(data_path, ch.m, ch.p);
  Dataset d = prepare_dataset(raw, ch.input_scaler, ch.output_scaler, split.split,
                              split.subsequence);

  TrainReport report;
  GruParams g = train_gru(d, tc, &report);

  std::vector<VectorXd> curve;
  for (int e = 0; e < report.epochs_run; ++e) {
    VectorXd row(4);
    row << e + 1, report.train_loss[e], report.validation_loss[e], report.nu_history[e];
    curve.push_back(row);
  }
  write_series_csv(artifact_path(out_dir, "training_report.csv"),
                   {"epoch", "train_loss", "validation_loss", "nu"}, curve);
  const std::string weights_path = artifact_path(out_dir, "weights.txt");
  save_weights(weights_path, g);

  std::cout << "trained " << report.epochs_run << " epochs (hidden " << tc.hidden << ")\n";
  if (!report.train_loss.empty()) {
    std::cout << "final train loss " << fmt(report.train_loss.back()) << ", validation loss "
              << fmt(report.validation_loss.back()) << "\n";
  }
  std::cout << "nu " << fmt(report.final_certificate.nu) << ", rho_s "
            << fmt(report.final_certificate.rho_s) << " -> "
            << (report.certified ? "certified" : "NOT certified") << "\n";
  if (d.test_len >= 2) {
    SimulationError test = simulation_error(g, d, d.test_start(), d.test_len, tc.washout, true);
    std::cout << "test split: simulation mse " << fmt(test.mse) << ", max abs error "
              << fmt(test.max_abs) << " (use as w_bar_y)\n";
    std::cout << "test FIT per channel: " << fmt_vec(fit_index(test.reference, test.predicted))
              << " %\n";
  }
  std::cout << "wrote " << weights_path << "\n";

  if (report.diverged) {
    std::cerr << "training diverged; weights are the last finite checkpoint\n";
    return kExitPrecondition;
  }
  if (!report.certified) {
    std::cerr << "final model is not certified (nu >= 1); "
                 "raise penalty_weight or lower init_scale\n";
    return kExitPrecondition;
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// certify
// ---------------------------------------------------------------------------

int cmd_certify(const std::string& weights_path) {
  ObserverGains file_gains;
  bool have_gains = false;
  GruParams g = load_weights(weights_path, &file_gains, &have_gains);
  StabilityCertificate cert = stability_metrics(g);

  std::cout << "model: n " << g.n << ", m " << g.m << ", p " << g.p << "\n";
  std::cout << "sigma_bar_z " << fmt(cert.sigma_bar_z) << ", sigma_bar_r " << fmt(cert.sigma_bar_r)
            << ", phi_bar_h " << fmt(cert.phi_bar_h) << "\n";
  std::cout << "nu " << fmt(cert.nu) << ", rho_s " << fmt(cert.rho_s) << " -> "
            << (cert.delta_iss ? "certified (nu < 1)" : "NOT certified (nu >= 1)") << "\n";

  bool observers_ok = true;
  print_observer_metrics(std::cout, "observer open_loop",
                         observer_metrics(g, ObserverGains::zeros(g.n, g.p)));
  if (cert.delta_iss) {
    GainSynthesisResult synth = synthesize_gains(g, ObserverMode::min_nu_o);
    print_observer_metrics(std::cout, "observer min_nu_o", synth.certificate);
    observers_ok = observers_ok && synth.certificate.converging;
  }
  if (have_gains) {
    ObserverCertificate m = observer_metrics(g, file_gains);
    print_observer_metrics(std::cout, "observer from file", m);
    observers_ok = observers_ok && m.converging;
  }
  return cert.delta_iss && observers_ok ? kExitOk : kExitPrecondition;
}

// ---------------------------------------------------------------------------
// gains
// ---------------------------------------------------------------------------

int cmd_gains(const ExperimentConfig* cfg, const std::string& weights_path,
              const std::string& out_dir) {
  GruParams g = load_weights(weights_path);
  StabilityCertificate cert = stability_metrics(g);
  if (!cert.delta_iss) {
    std::cerr << "model is not certified (nu = " << fmt(cert.nu) << "); refusing to synthesize\n";
    return kExitPrecondition;
  }
  ObserverMode mode = cfg != nullptr ? cfg->observer_mode : ObserverMode::min_nu_o;
  GainSynthesisResult result = synthesize_gains(g, mode);
  if (!result.message.empty()) std::cout << result.message << "\n";
  std::cout << "mode " << to_string(result.mode) << "\n";
  print_observer_metrics(std::cout, "observer", result.certificate);

  const std::string path = artifact_path(out_dir, "weights.txt");
  save_weights(path, g, &result.gains);
  std::cout << "wrote " << path << "\n";
  return result.certificate.converging ? kExitOk : kExitPrecondition;
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

ReferenceSchedule parse_references(const SimulationConfig& sim, int p, const std::string& where) {
  ReferenceSchedule refs;
  for (const std::vector<std::string>& row : sim.reference_rows) {
    if (static_cast<int>(row.size()) != 1 + p)
      throw IoError(where + ": each reference needs a start step and " + std::to_string(p) +
                    " values");
    long start = grumpc::detail::parse_long(row[0], where + ": reference");
    VectorXd y(p);
    for (int j = 0; j < p; ++j)
      y(j) = grumpc::detail::parse_double(row[1 + j], where + ": reference");
    refs.points.push_back({start, y});
  }
  return refs;
}

double resolve_w_bar_y(const ExperimentConfig& cfg, const MpcConfig& mpc, const GruParams& g,
                       const std::string& out_dir) {
  if (mpc.w_bar_y.has_value()) return *mpc.w_bar_y;
  require(cfg.split.has_value(),
          "mpc.w_bar_y is auto: config needs a split section and a dataset to estimate it");
  const std::string data_path = dataset_path(cfg, out_dir);
  RawSeries raw = read_series_csv(data_path, g.m, g.p);
  Dataset d = prepare_dataset(raw, g.input_scaler, g.output_scaler, cfg.split->split,
                              cfg.split->subsequence);
  int washout = cfg.training.has_value() ? cfg.training->washout : TrainConfig{}.washout;
  double estimate = estimate_w_bar_y(g, d, washout);
  std::cout << "w_bar_y auto: estimated " << fmt(estimate) << " from " << data_path << "\n";
  return estimate;
}

void write_closed_loop_csv(const std::string& path, const ClosedLoopResult& run, double Ts,
                           int m, int p, int n) {
  std::vector<std::string> header{"k", "t"};
  for (int j = 0; j < m; ++j) header.push_back("u" + std::to_string(j + 1));
  for (int j = 0; j < p; ++j) header.push_back("y" + std::to_string(j + 1));
  for (int j = 0; j < p; ++j) header.push_back("y_norm" + std::to_string(j + 1));
  for (int j = 0; j < n; ++j) header.push_back("x_hat" + std::to_string(j + 1));
  for (const char* name : {"e_o", "cost", "max_violation", "alpha", "feasibility_lhs",
                           "feasibility_rhs", "feasibility_ok", "candidate_checked",
                           "candidate_violation", "epsilon_excess", "outputs_in_bounds",
                           "inputs_in_bounds", "iterations", "status"})
    header.push_back(name);

  std::vector<VectorXd> rows;
  rows.reserve(run.records.size());
  for (const ClosedLoopRecord& rec : run.records) {
    VectorXd row(static_cast<Eigen::Index>(header.size()));
    Eigen::Index c = 0;
    row(c++) = static_cast<double>(rec.k);
    row(c++) = static_cast<double>(rec.k) * Ts;
    row.segment(c, m) = rec.u_physical;
    c += m;
    row.segment(c, p) = rec.y_physical;
    c += p;
    row.segment(c, p) = rec.y_normalized;
    c += p;
    row.segment(c, n) = rec.x_hat;
    c += n;
    row(c++) = rec.e_o;
    row(c++) = rec.cost;
    row(c++) = rec.max_violation;
    row(c++) = rec.alpha;
    row(c++) = rec.feasibility_lhs;
    row(c++) = rec.feasibility_rhs;
    row(c++) = rec.feasibility_ok ? 1.0 : 0.0;
    row(c++) = rec.candidate_checked ? 1.0 : 0.0;
    row(c++) = rec.candidate_violation;
    row(c++) = rec.candidate_checked ? rec.epsilon_excess : 0.0;
    row(c++) = rec.outputs_in_bounds ? 1.0 : 0.0;
    row(c++) = rec.inputs_in_bounds ? 1.0 : 0.0;
    row(c++) = static_cast<double>(rec.solver_iterations);
    row(c++) = status_code(rec.status);
    rows.push_back(std::move(row));
  }
  write_series_csv(path, header, rows);
}

std::string summarize_run(const ClosedLoopResult& run, long steps) {
  std::ostringstream os;
  if (run.completed) {
    os << "run: " << steps << " steps, completed\n";
  } else {
    os << "run: aborted at step " << run.aborted_at << ": " << run.abort_reason << "\n";
  }
  os << "segments:\n";
  for (const SegmentSummary& seg : run.segments) {
    os << "  [" << seg.start << ", " << seg.end << ") reference " << fmt_vec(seg.reference_physical)
       << " | mean steady error " << fmt_vec(seg.steady_error_physical) << "\n";
  }
  os << "output violations: " << run.output_violations
     << ", input violations: " << run.input_violations << "\n";
  os << "feasibility condition failures: " << run.feasibility_condition_failures << "\n";
  os << "candidates checked: " << run.candidate_checks << ", worst violation "
     << fmt(run.worst_candidate_violation);
  if (run.candidate_checks > 0) os << ", worst epsilon excess " << fmt(run.worst_epsilon_excess);
  os << "\n";
  os << "plant clamp events: " << run.plant_clamp_events << "\n";
  return os.str();
}

int cmd_simulate(const ExperimentConfig& cfg, const std::string& weights_path,
                 const std::string& out_dir) {
  const PlantConfig& plant = require_section(cfg.plant, "simulate");
  const MpcConfig& mpc = require_section(cfg.mpc, "simulate", "mpc");
  const SimulationConfig& sim = require_section(cfg.simulation, "simulate", "simulation");

  ObserverGains gains;
  bool have_gains = false;
  GruParams g = load_weights(weights_path, &gains, &have_gains);

  VectorXd out_lo = mpc.output_lo.size() > 0
                        ? mpc.output_lo
                        : VectorXd(g.output_scaler.offset - g.output_scaler.half_range);
  VectorXd out_hi = mpc.output_hi.size() > 0
                        ? mpc.output_hi
                        : VectorXd(g.output_scaler.offset + g.output_scaler.half_range);
  OutputConstraints constraints = box_output_constraints(g.output_scaler, out_lo, out_hi);

  StabilityCertificate cert = stability_metrics(g, constraints.L);
  if (!cert.delta_iss) {
    std::cerr << "model is not certified (nu = " << fmt(cert.nu) << "); refusing to simulate\n";
    return kExitPrecondition;
  }
  if (!have_gains) {
    GainSynthesisResult synth = synthesize_gains(g, cfg.observer_mode);
    if (!synth.message.empty()) std::cout << synth.message << "\n";
    gains = synth.gains;
  }
  ObserverCertificate metrics = observer_metrics(g, gains, constraints.L);
  print_observer_metrics(std::cout, std::string("observer (") +
                                        (have_gains ? "from weights file" : to_string(cfg.observer_mode)) +
                                        ")",
                         metrics);
  if (!metrics.converging) {
    std::cerr << "observer is not convergent (nu_o >= 1); refusing to simulate\n";
    return kExitPrecondition;
  }

  const double w_bar_y = resolve_w_bar_y(cfg, mpc, g, out_dir);
  TighteningSchedule schedule = build_schedule(cert, metrics, constraints, g, w_bar_y, mpc.N);
  write_schedule_csv(artifact_path(out_dir, "schedule.csv"), schedule);

  ClosedLoopSetup setup;
  setup.params = g;
  setup.gains = gains;
  setup.constraints = constraints;
  setup.schedule = schedule;
  setup.Q = diagonal_from(mpc.Q_diag, g.n, "mpc.Q");
  setup.R = diagonal_from(mpc.R_diag, g.m, "mpc.R");
  setup.s = mpc.s.value_or(terminal_weight(setup.Q, cert.rho_s));
  setup.N = mpc.N;
  setup.options = mpc.solver;
  setup.e_o_0 = mpc.e_o_0;
  setup.steps = sim.steps;
  setup.references = parse_references(sim, g.p, cfg.path);
  setup.references.validate(setup.steps);
  std::cout << "terminal weight s " << fmt(setup.s) << ", w_bar " << fmt(schedule.w_bar)
            << ", e_inf " << fmt(schedule.e_inf) << "\n";

  // Every scheduled set-point must be admissible at the most conservative
  // uncertainty level before any plant interaction.
  std::string rejection =
      check_references(g, constraints, schedule, setup.references, setup.e_o_0);
  if (!rejection.empty()) {
    std::cerr << "pre-run check failed: " << rejection << "\n";
    return kExitPrecondition;
  }

  std::unique_ptr<Plant> target = make_plant(plant, cfg.seed + 11);
  ClosedLoopResult run = run_closed_loop(setup, *target);

  write_closed_loop_csv(artifact_path(out_dir, "closed_loop.csv"), run, plant.Ts, g.m, g.p, g.n);
  const std::string summary = summarize_run(run, setup.steps);
  std::ofstream(artifact_path(out_dir, "summary.txt")) << summary;
  std::cout << summary;
  std::cout << "wrote " << artifact_path(out_dir, "closed_loop.csv") << "\n";

  if (!run.completed) {
    std::cerr << run.abort_reason << "\n";
    return kExitInfeasible;
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

int cmd_verify(const ExperimentConfig* cfg, const std::string& weights_path,
               std::optional<std::uint64_t> seed_flag) {
  ObserverGains gains;
  bool have_gains = false;
  GruParams g = load_weights(weights_path, &gains, &have_gains);

  VerificationContext ctx;
  ctx.params = g;
  if (have_gains) {
    ctx.gains = gains;
  } else {
    ObserverMode mode = cfg != nullptr ? cfg->observer_mode : ObserverMode::min_nu_o;
    ctx.gains = stability_metrics(g).delta_iss ? synthesize_gains(g, mode).gains
                                               : ObserverGains::zeros(g.n, g.p);
  }
  if (cfg != nullptr && cfg->mpc.has_value()) {
    const MpcConfig& mpc = *cfg->mpc;
    ctx.N = mpc.N;
    ctx.e_o_0 = mpc.e_o_0;
    if (mpc.w_bar_y.has_value()) ctx.w_bar_y = *mpc.w_bar_y;
    if (mpc.output_lo.size() > 0 && mpc.output_hi.size() > 0) {
      ctx.constraints = box_output_constraints(g.output_scaler, mpc.output_lo, mpc.output_hi);
    }
  }
  if (ctx.constraints.L.size() == 0) {
    ctx.constraints = box_output_constraints(
        g.output_scaler, g.output_scaler.denormalize(VectorXd::Constant(g.p, -0.9)),
        g.output_scaler.denormalize(VectorXd::Constant(g.p, 0.9)));
  }
  if (cfg != nullptr) ctx.seed = cfg->seed;
  if (seed_flag.has_value()) ctx.seed = *seed_flag;

  std::cout << "context: N " << ctx.N << ", e_o_0 " << fmt(ctx.e_o_0) << ", w_bar_y "
            << fmt(ctx.w_bar_y) << ", seed " << ctx.seed << "\n";
  std::vector<CheckResult> results = run_verification(ctx);
  bool all_pass = true;
  for (const CheckResult& r : results) {
    all_pass = all_pass && r.pass;
    std::cout << (r.pass ? "PASS" : "FAIL") << "  " << r.name << "  worst " << fmt(r.worst);
    if (!r.detail.empty()) std::cout << "  (" << r.detail << ")";
    std::cout << "\n";
  }
  std::cout << (all_pass ? "all checks passed" : "CHECKS FAILED") << "\n";
  return all_pass ? kExitOk : kExitPrecondition;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Robust set-point tracking for recurrent network models: data generation,\n"
      "training with a contraction penalty, stability certification, observer gain\n"
      "synthesis, tightened-constraint predictive control, and a verification suite."};
  app.require_subcommand(1);

  std::string config_path, weights_path, out_dir = ".";
  std::optional<std::uint64_t> seed_flag;

  auto add_config = [&](CLI::App* sub, bool required) {
    auto* opt = sub->add_option("--config", config_path, "experiment configuration file");
    if (required) opt->required();
    return opt;
  };
  auto add_weights = [&](CLI::App* sub) {
    sub->add_option("--weights", weights_path, "model weights file")->required();
  };
  auto add_out = [&](CLI::App* sub) {
    sub->add_option("--out", out_dir, "artifact output directory (default: .)");
  };
  auto add_seed = [&](CLI::App* sub) {
    sub->add_option("--seed", seed_flag, "seed override (takes precedence over the config)");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "excite the plant and write dataset.csv");
  add_config(gen, true);
  add_out(gen);
  add_seed(gen);

  CLI::App* train = app.add_subcommand("train", "fit a certified model to dataset.csv");
  add_config(train, true);
  add_out(train);
  add_seed(train);

  CLI::App* certify = app.add_subcommand("certify", "print the stability certificate");
  add_weights(certify);

  CLI::App* gains = app.add_subcommand("gains", "synthesize observer gains into the weights file");
  add_config(gains, false);
  add_weights(gains);
  add_out(gains);

  CLI::App* simulate = app.add_subcommand("simulate", "run the closed loop and log it");
  add_config(simulate, true);
  add_weights(simulate);
  add_out(simulate);
  add_seed(simulate);

  CLI::App* verify = app.add_subcommand("verify", "run the property-check battery");
  add_config(verify, false);
  add_weights(verify);
  add_seed(verify);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kExitOk : kExitIo;
  }

  try {
    std::optional<ExperimentConfig> cfg;
    if (!config_path.empty()) {
      cfg = load_experiment(config_path);
      if (seed_flag.has_value()) cfg->seed = *seed_flag;
    }
    if (gen->parsed()) return cmd_gen_data(*cfg, out_dir);
    if (train->parsed()) return cmd_train(*cfg, out_dir);
    if (certify->parsed()) return cmd_certify(weights_path);
    if (gains->parsed()) return cmd_gains(cfg ? &*cfg : nullptr, weights_path, out_dir);
    if (simulate->parsed()) return cmd_simulate(*cfg, weights_path, out_dir);
    if (verify->parsed()) return cmd_verify(cfg ? &*cfg : nullptr, weights_path, seed_flag);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitPrecondition;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInfeasible;
  }
  return kExitOk;
}

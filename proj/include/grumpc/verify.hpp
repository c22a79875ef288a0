#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "grumpc/closed_loop.hpp"
#include "grumpc/fhocp.hpp"
#include "grumpc/gru.hpp"
#include "grumpc/observer.hpp"
#include "grumpc/stability.hpp"
#include "grumpc/tightening.hpp"
#include "grumpc/training.hpp"
#include "grumpc/util.hpp"

namespace grumpc {

struct CheckResult {
  std::string name;
  bool pass = false;
  double worst = 0.0;  // worst slack observed (negative = violation)
  std::string detail;
};

struct VerificationContext {
  GruParams params;
  ObserverGains gains;
  OutputConstraints constraints;
  double w_bar_y = 0.1;
  int N = 8;
  double e_o_0 = 0.02;
  std::uint64_t seed = 2024;
  long lemma_samples = 100000;
  long contraction_samples = 10000;
  long observer_samples = 10000;
  long iss_steps = 500;
  long loop_steps = 40;
  double rho_s_override = 0.0;  // fault-injection hook for tests; 0 = use the certificate
};

namespace detail {

inline VectorXd random_box_vector(Lcg64& rng, int size, double amplitude = 1.0) {
  VectorXd v(size);
  for (int i = 0; i < size; ++i) v(i) = rng.uniform(-amplitude, amplitude);
  return v;
}

}  // namespace detail

/// The square expansion of the infinity norm used throughout the proofs:
/// ||x+y||^2 <= ||x||^2 + ||y||^2 + 2 ||x o y||.
inline CheckResult check_norm_square_lemma(long samples, std::uint64_t seed) {
  Lcg64 rng(seed);
  double worst = std::numeric_limits<double>::infinity();
  for (long s = 0; s < samples; ++s) {
    const int n = 1 + static_cast<int>(rng.next_index(8));
    VectorXd x = detail::random_box_vector(rng, n, 10.0);
    VectorXd y = detail::random_box_vector(rng, n, 10.0);
    double lhs = inf_norm(x + y);
    double rhs = inf_norm(x) * inf_norm(x) + inf_norm(y) * inf_norm(y) +
                 2.0 * inf_norm(x.cwiseProduct(y));
    worst = std::min(worst, rhs - lhs * lhs);
  }
  CheckResult r{"norm_square_lemma", worst >= -1e-12, worst, ""};
  return r;
}

inline CheckResult check_contraction(const VerificationContext& ctx) {
  StabilityCertificate cert = stability_metrics(ctx.params);
  CheckResult r;
  r.name = "contraction_gap";
  if (!cert.delta_iss) {
    r.pass = false;
    r.detail = "model not certified (nu = " + std::to_string(cert.nu) + ")";
    return r;
  }
  if (ctx.rho_s_override > 0.0) cert.rho_s = ctx.rho_s_override;
  Lcg64 rng(ctx.seed + 1);
  double worst = std::numeric_limits<double>::infinity();
  for (long s = 0; s < ctx.contraction_samples; ++s) {
    VectorXd xa = detail::random_box_vector(rng, ctx.params.n);
    VectorXd xb = detail::random_box_vector(rng, ctx.params.n);
    VectorXd u = detail::random_box_vector(rng, ctx.params.m);
    worst = std::min(worst, incremental_contraction_gap(ctx.params, cert, xa, xb, u));
  }
  r.worst = worst;
  r.pass = worst >= -1e-12;
  return r;
}

inline CheckResult check_gate_bounds(const VerificationContext& ctx) {
  StabilityCertificate cert = stability_metrics(ctx.params);
  Lcg64 rng(ctx.seed + 2);
  double worst = std::numeric_limits<double>::infinity();
  for (long s = 0; s < ctx.observer_samples; ++s) {
    VectorXd x = detail::random_box_vector(rng, ctx.params.n);
    VectorXd u = detail::random_box_vector(rng, ctx.params.m);
    GruStepCache cache;
    gru_step(ctx.params, x, u, &cache);
    worst = std::min(worst, cert.sigma_bar_z - inf_norm(cache.z));
    worst = std::min(worst, cert.sigma_bar_r - inf_norm(cache.r));
    worst = std::min(worst, cert.phi_bar_h - inf_norm(cache.h));
    worst = std::min(worst, cache.z.minCoeff() - (1.0 - cert.sigma_bar_z));
  }
  CheckResult r{"gate_bounds", worst >= -1e-12, worst, ""};
  return r;
}

/// Error decrease (8a-role), constraint-row gain (8b-role), prediction
/// deviation (8c-role), zero-gain equivalence, and state-box invariance,
/// for both the zero-gain and the supplied observer.
inline std::vector<CheckResult> check_observer_bounds(const VerificationContext& ctx) {
  std::vector<CheckResult> results;
  const ObserverGains zero = ObserverGains::zeros(ctx.params.n, ctx.params.p);
  for (int pass = 0; pass < 2; ++pass) {
    const ObserverGains& gains = pass == 0 ? zero : ctx.gains;
    const std::string tag = pass == 0 ? "zero_gains" : "given_gains";
    ObserverCertificate metrics = observer_metrics(ctx.params, gains, ctx.constraints.L);
    Lcg64 rng(ctx.seed + 3 + pass);
    double worst_decrease = std::numeric_limits<double>::infinity();
    double worst_row = std::numeric_limits<double>::infinity();
    double worst_deviation = std::numeric_limits<double>::infinity();
    double worst_box = std::numeric_limits<double>::infinity();
    bool bitmatch = true;
    for (long s = 0; s < ctx.observer_samples; ++s) {
      VectorXd x = detail::random_box_vector(rng, ctx.params.n);
      VectorXd xh = detail::random_box_vector(rng, ctx.params.n);
      VectorXd u = detail::random_box_vector(rng, ctx.params.m);
      VectorXd w = detail::random_box_vector(rng, ctx.params.p, ctx.w_bar_y);
      worst_decrease = std::min(worst_decrease,
                                observer_decrease_gap(ctx.params, gains, metrics, x, xh, u, w));
      worst_deviation = std::min(
          worst_deviation, prediction_deviation_gap(ctx.params, gains, metrics, x, xh, u, w));
      VectorXd row_gap = metrics.c_o * inf_norm(x - xh) -
                         (ctx.constraints.L * (ctx.params.U_o * (x - xh))).cwiseAbs();
      worst_row = std::min(worst_row, row_gap.minCoeff());
      VectorXd y = ctx.params.U_o * x + ctx.params.b_o + w;
      VectorXd next = observer_step(ctx.params, gains, xh, u, y);
      worst_box = std::min(worst_box, 1.0 - inf_norm(next));
      if (pass == 0 && next != gru_step(ctx.params, xh, u)) {
        // Zero innovation gains must reproduce the model step bitwise.
        bitmatch = false;
      }
    }
    results.push_back({"observer_error_decrease_" + tag, worst_decrease >= -1e-12,
                       worst_decrease, "nu_o = " + std::to_string(metrics.nu_o)});
    results.push_back({"observer_row_gain_" + tag, worst_row >= -1e-12, worst_row, ""});
    results.push_back({"observer_prediction_deviation_" + tag, worst_deviation >= -1e-12,
                       worst_deviation, ""});
    results.push_back({"observer_state_box_" + tag, worst_box >= -1e-12, worst_box, ""});
    if (pass == 0) results.push_back({"observer_zero_gain_bitmatch", bitmatch, 0.0, ""});
  }
  return results;
}

/// Geometric decay of the estimation error to its noise-driven floor under
/// bounded measurement noise, with the model itself as the plant.
inline CheckResult check_iss_decay(const VerificationContext& ctx) {
  ObserverCertificate metrics = observer_metrics(ctx.params, ctx.gains);
  CheckResult r;
  r.name = "observer_iss_decay";
  if (!metrics.converging) {
    r.pass = false;
    r.detail = "observer not convergent (nu_o = " + std::to_string(metrics.nu_o) + ")";
    return r;
  }
  Lcg64 rng(ctx.seed + 5);
  VectorXd x = detail::random_box_vector(rng, ctx.params.n);
  VectorXd xh = detail::random_box_vector(rng, ctx.params.n);
  const double e0 = inf_norm(x - xh);
  const double gain = metrics.kappa * ctx.w_bar_y / (1.0 - metrics.rho_o);
  double rho_pow = 1.0;
  double worst = std::numeric_limits<double>::infinity();
  for (long k = 0; k < ctx.iss_steps; ++k) {
    VectorXd u = detail::random_box_vector(rng, ctx.params.m);
    VectorXd w = detail::random_box_vector(rng, ctx.params.p, ctx.w_bar_y);
    VectorXd y = ctx.params.U_o * x + ctx.params.b_o + w;
    x = gru_step(ctx.params, x, u);
    xh = observer_step(ctx.params, ctx.gains, xh, u, y);
    rho_pow *= metrics.rho_o;
    worst = std::min(worst, rho_pow * e0 + gain + 1e-9 - inf_norm(x - xh));
  }
  r.worst = worst;
  r.pass = worst >= 0.0;
  return r;
}

/// Gradient of the free-run loss and of the contraction penalty against
/// central finite differences on a small model.
inline std::vector<CheckResult> check_gradients(std::uint64_t seed) {
  std::vector<CheckResult> results;
  Lcg64 rng(seed + 6);

  GruParams g = GruParams::zeros(2, 1, 1);
  auto fill = [&](MatrixXd& M, double amp) {
    for (int i = 0; i < M.rows(); ++i)
      for (int j = 0; j < M.cols(); ++j) M(i, j) = rng.uniform(-amp, amp);
  };
  fill(g.W_z, 0.3);
  fill(g.U_z, 0.3);
  fill(g.W_r, 0.3);
  fill(g.U_r, 0.3);
  fill(g.W_h, 0.3);
  fill(g.U_h, 0.3);
  fill(g.U_o, 0.8);
  g.b_z = VectorXd::Constant(2, 0.05);
  g.b_o = VectorXd::Constant(1, 0.02);

  // A short dataset from a slightly different model keeps residuals nonzero.
  Dataset d;
  d.input_scaler = Scaler::identity(1);
  d.output_scaler = Scaler::identity(1);
  d.train_len = 40;
  d.subsequence_length = 40;
  GruParams teacher = g;
  teacher.U_o *= 1.3;
  VectorXd x = VectorXd::Zero(2);
  for (int k = 0; k < 40; ++k) {
    VectorXd u = detail::random_box_vector(rng, 1, 0.9);
    d.inputs.push_back(u);
    d.outputs.push_back(gru_output(teacher, x));
    x = gru_step(teacher, x, u);
  }

  auto loss_at = [&](const GruParams& model) {
    GruParamGrads scratch = GruParamGrads::zeros(model);
    return detail::subsequence_gradient(model, d, 0, 40, 5, 1.0, scratch);
  };
  GruParamGrads analytic = GruParamGrads::zeros(g);
  detail::subsequence_gradient(g, d, 0, 40, 5, 1.0, analytic);

  struct Block {
    MatrixXd GruParams::*weight;
    MatrixXd GruParamGrads::*grad;
    const char* name;
  };
  const Block blocks[] = {
      {&GruParams::W_z, &GruParamGrads::W_z, "W_z"}, {&GruParams::U_z, &GruParamGrads::U_z, "U_z"},
      {&GruParams::W_r, &GruParamGrads::W_r, "W_r"}, {&GruParams::U_r, &GruParamGrads::U_r, "U_r"},
      {&GruParams::W_h, &GruParamGrads::W_h, "W_h"}, {&GruParams::U_h, &GruParamGrads::U_h, "U_h"},
      {&GruParams::U_o, &GruParamGrads::U_o, "U_o"}};
  double worst_rel = 0.0;
  std::string worst_name;
  const double fd_step = 1e-6;
  for (const Block& blk : blocks) {
    const MatrixXd& W = g.*(blk.weight);
    for (int i = 0; i < W.rows(); ++i) {
      for (int j = 0; j < W.cols(); ++j) {
        GruParams plus = g, minus = g;
        (plus.*(blk.weight))(i, j) += fd_step;
        (minus.*(blk.weight))(i, j) -= fd_step;
        double fd = (loss_at(plus) - loss_at(minus)) / (2.0 * fd_step);
        double an = (analytic.*(blk.grad))(i, j);
        double rel = std::abs(fd - an) / std::max(1e-6, std::max(std::abs(fd), std::abs(an)));
        if (rel > worst_rel) {
          worst_rel = rel;
          worst_name = blk.name;
        }
      }
    }
  }
  results.push_back({"rollout_gradient_fd", worst_rel <= 1e-4, worst_rel,
                     worst_rel > 0 ? "worst block " + worst_name : ""});

  // Penalty subgradient, away from row-sum ties: scale one model up so the
  // hinge is active and maximal rows are unique.
  GruParams big = g;
  big.U_z *= 6.0;
  big.U_h *= 5.0;
  const double margin = 0.05;
  GruParamGrads pen = nu_penalty_gradient(big, margin);
  double worst_pen = 0.0;
  for (const Block& blk : blocks) {
    const MatrixXd& W = big.*(blk.weight);
    for (int i = 0; i < W.rows(); ++i) {
      for (int j = 0; j < W.cols(); ++j) {
        GruParams plus = big, minus = big;
        (plus.*(blk.weight))(i, j) += fd_step;
        (minus.*(blk.weight))(i, j) -= fd_step;
        double fd = (nu_penalty(plus, margin) - nu_penalty(minus, margin)) / (2.0 * fd_step);
        double an = (pen.*(blk.grad))(i, j);
        double rel = std::abs(fd - an) / std::max(1e-6, std::max(std::abs(fd), std::abs(an)));
        worst_pen = std::max(worst_pen, rel);
      }
    }
  }
  results.push_back({"penalty_gradient_fd", worst_pen <= 1e-4, worst_pen, ""});
  return results;
}

/// A short closed loop on the model-as-plant with bounded noise and exact
/// initial estimate: the recursive-feasibility construction executed
/// numerically — per-step candidate feasibility, prediction-drift bounds,
/// and true-output constraint satisfaction.
inline std::vector<CheckResult> check_closed_loop(const VerificationContext& ctx) {
  std::vector<CheckResult> results;
  StabilityCertificate cert = stability_metrics(ctx.params, ctx.constraints.L);
  ObserverCertificate metrics = observer_metrics(ctx.params, ctx.gains, ctx.constraints.L);
  auto fail_all = [&](const std::string& why) {
    for (const char* name : {"loop_candidate_feasibility", "loop_epsilon_bound",
                             "loop_constraint_satisfaction", "loop_feasibility_condition"})
      results.push_back({name, false, 0.0, why});
    return results;
  };
  if (!cert.delta_iss) return fail_all("model not certified");
  if (!metrics.converging) return fail_all("observer not convergent");

  TighteningSchedule schedule =
      build_schedule(cert, metrics, ctx.constraints, ctx.params, ctx.w_bar_y, ctx.N);

  // Reference: the model's own steady output at the normalized center input,
  // always reachable; admissibility is a context requirement.
  VectorXd u_center = VectorXd::Zero(ctx.params.m);
  VectorXd xs = VectorXd::Zero(ctx.params.n);
  for (int k = 0; k < 2000; ++k) xs = gru_step(ctx.params, xs, u_center);
  VectorXd y_ref_norm = gru_output(ctx.params, xs);
  if (!check_setpoint(y_ref_norm, ctx.constraints, schedule, ctx.e_o_0))
    return fail_all("self-chosen reference violates the tightened interior condition");
  double alpha = compute_alpha(y_ref_norm, ctx.constraints, schedule, ctx.e_o_0);
  if (!check_recursive_feasibility_always(ctx.e_o_0, alpha, schedule))
    return fail_all("feasibility condition fails for the self-chosen reference");

  MatrixXd Q = MatrixXd::Identity(ctx.params.n, ctx.params.n);
  MatrixXd R = 0.01 * MatrixXd::Identity(ctx.params.m, ctx.params.m);
  const double s = terminal_weight(Q, cert.rho_s);

  // Start near the set-point equilibrium. A spread below alpha keeps the
  // initial problem feasible by construction (the constant-input candidate
  // already lands the contracted state inside the terminal ball, and the
  // stage tightening absorbs the same deviation), so the check exercises the
  // loop machinery rather than the reachable set of an arbitrary state.
  Lcg64 rng(ctx.seed + 7);
  const double spread = 0.8 * std::min(0.5, alpha);
  VectorXd x0 = (xs + detail::random_box_vector(rng, ctx.params.n, spread))
                    .cwiseMax(-1.0)
                    .cwiseMin(1.0);

  ClosedLoopSetup setup;
  setup.params = ctx.params;
  setup.gains = ctx.gains;
  setup.constraints = ctx.constraints;
  setup.schedule = schedule;
  setup.Q = Q;
  setup.R = R;
  setup.s = s;
  setup.N = ctx.N;
  setup.e_o_0 = ctx.e_o_0;
  setup.steps = ctx.loop_steps;
  setup.references.points.push_back({0, ctx.params.output_scaler.denormalize(y_ref_norm)});
  setup.x_hat_0 = x0;  // exact initial estimate: the membership contract holds

  GruPlant plant(ctx.params, x0, ctx.w_bar_y, ctx.seed + 8);
  ClosedLoopResult run = run_closed_loop(setup, plant);
  if (!run.completed) return fail_all("loop aborted: " + run.abort_reason);

  double worst_candidate = 0.0;
  double worst_eps = -std::numeric_limits<double>::infinity();
  long condition_failures = 0;
  long output_violations = run.output_violations + run.input_violations;
  for (const ClosedLoopRecord& rec : run.records) {
    if (rec.candidate_checked) {
      worst_candidate = std::max(worst_candidate, rec.candidate_violation);
      worst_eps = std::max(worst_eps, rec.epsilon_excess);
    }
    if (!rec.feasibility_ok) ++condition_failures;
  }
  results.push_back({"loop_candidate_feasibility", worst_candidate <= 1e-6, worst_candidate,
                     std::to_string(run.candidate_checks) + " candidates checked"});
  results.push_back({"loop_epsilon_bound", worst_eps <= 1e-9, worst_eps, ""});
  results.push_back({"loop_constraint_satisfaction", output_violations == 0,
                     static_cast<double>(output_violations), ""});
  results.push_back({"loop_feasibility_condition", condition_failures == 0,
                     static_cast<double>(condition_failures), ""});
  return results;
}

inline std::vector<CheckResult> run_verification(const VerificationContext& ctx) {
  ctx.params.validate();
  ctx.constraints.validate();
  std::vector<CheckResult> results;
  results.push_back(check_norm_square_lemma(ctx.lemma_samples, ctx.seed));
  results.push_back(check_contraction(ctx));
  results.push_back(check_gate_bounds(ctx));
  for (CheckResult& r : check_observer_bounds(ctx)) results.push_back(std::move(r));
  results.push_back(check_iss_decay(ctx));
  for (CheckResult& r : check_gradients(ctx.seed)) results.push_back(std::move(r));
  for (CheckResult& r : check_closed_loop(ctx)) results.push_back(std::move(r));
  return results;
}

}  // namespace grumpc

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "grumpc/gru.hpp"
#include "grumpc/stability.hpp"
#include "grumpc/tightening.hpp"
#include "grumpc/util.hpp"

namespace grumpc {

/// Smallest admissible terminal weight: n * lambda_max(Q) / (1 - rho_s^2).
inline double terminal_weight(const MatrixXd& Q, double rho_s) {
  require(rho_s < 1.0, "terminal_weight: rho_s >= 1");
  require(Q.rows() == Q.cols() && Q.rows() >= 1, "terminal_weight: Q must be square");
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(Q);
  const double lambda_max = eig.eigenvalues().maxCoeff();
  return static_cast<double>(Q.rows()) * lambda_max / (1.0 - rho_s * rho_s);
}

struct FhocpOptions {
  int outer_iterations = 30;
  int inner_iterations = 200;
  double feasibility_tolerance = 1e-6;
  double gradient_tolerance = 1e-8;
  double initial_penalty = 10.0;
  double penalty_growth = 2.0;
  double initial_step = 1.0;
};

/// One instance of the finite-horizon problem at a given estimated state and
/// uncertainty level. Output constraints are tightened stage-wise by
/// a_i e_o + b_i (+ w_L); inputs live in the unit box; the terminal state
/// must enter the alpha-ball around x_bar.
struct FhocpProblem {
  GruParams params;
  int N = 0;
  MatrixXd Q;  // n x n
  MatrixXd R;  // m x m
  double s = 0.0;
  Equilibrium equilibrium;
  OutputConstraints constraints;
  TighteningSchedule schedule;
  double alpha = 0.0;
  VectorXd x0;
  double e_o = 0.0;
  FhocpOptions options;

  void validate() const {
    params.validate();
    constraints.validate();
    require(N >= 1, "FhocpProblem: horizon must be positive");
    require(schedule.N >= N, "FhocpProblem: schedule shorter than horizon");
    require(Q.rows() == params.n && Q.cols() == params.n, "FhocpProblem: Q must be n x n");
    require(R.rows() == params.m && R.cols() == params.m, "FhocpProblem: R must be m x m");
    require(Q.isApprox(Q.transpose(), 1e-12), "FhocpProblem: Q not symmetric");
    require(R.isApprox(R.transpose(), 1e-12), "FhocpProblem: R not symmetric");
    Eigen::SelfAdjointEigenSolver<MatrixXd> eq(Q), er(R);
    require(eq.eigenvalues().minCoeff() > 0.0, "FhocpProblem: Q not positive definite");
    require(er.eigenvalues().minCoeff() > 0.0, "FhocpProblem: R not positive definite");
    require(s >= terminal_weight(Q, schedule.rho_s) - 1e-12,
            "FhocpProblem: terminal weight below the stability lower bound");
    require(alpha > 0.0, "FhocpProblem: terminal radius must be positive");
    require(x0.size() == params.n && x0.allFinite(), "FhocpProblem: bad initial state");
    require(e_o >= 0.0, "FhocpProblem: negative e_o");
    require(equilibrium.x_bar.size() == params.n && equilibrium.u_bar.size() == params.m,
            "FhocpProblem: equilibrium dimension mismatch");
  }
};

enum class SolveStatus { optimal, feasible_suboptimal, infeasible };

inline const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::optimal: return "optimal";
    case SolveStatus::feasible_suboptimal: return "feasible_suboptimal";
    case SolveStatus::infeasible: return "infeasible";
  }
  return "unknown";
}

struct FhocpSolution {
  std::vector<VectorXd> u_opt;   // N inputs
  std::vector<VectorXd> x_pred;  // N+1 states, x_pred[0] = x0
  double cost = 0.0;
  double max_violation = 0.0;
  int iterations = 0;
  SolveStatus status = SolveStatus::infeasible;
};

struct ConstraintReport {
  std::vector<VectorXd> output_slack;  // stages 0..N-1, q-vectors
  std::vector<double> input_slack;     // stages 0..N-1, 1 - ||u_i||_inf
  double terminal_slack = 0.0;         // alpha - ||x_N - x_bar||_inf
  double max_violation = 0.0;          // magnitude of the worst violated slack
};

inline std::vector<VectorXd> rollout_states(const GruParams& g, const VectorXd& x0,
                                            const std::vector<VectorXd>& u_seq) {
  std::vector<VectorXd> x(u_seq.size() + 1);
  x[0] = x0;
  for (size_t i = 0; i < u_seq.size(); ++i) x[i + 1] = gru_step(g, x[i], u_seq[i]);
  return x;
}

inline double evaluate_cost(const FhocpProblem& pr, const std::vector<VectorXd>& u_seq) {
  require(static_cast<int>(u_seq.size()) == pr.N, "evaluate_cost: horizon mismatch");
  std::vector<VectorXd> x = rollout_states(pr.params, pr.x0, u_seq);
  double cost = 0.0;
  for (int i = 0; i < pr.N; ++i) {
    VectorXd dx = x[i] - pr.equilibrium.x_bar;
    VectorXd du = u_seq[i] - pr.equilibrium.u_bar;
    cost += dx.dot(pr.Q * dx) + du.dot(pr.R * du);
  }
  double dterm = inf_norm(x[pr.N] - pr.equilibrium.x_bar);
  return cost + pr.s * dterm * dterm;
}

inline ConstraintReport evaluate_constraints(const FhocpProblem& pr,
                                             const std::vector<VectorXd>& u_seq) {
  require(static_cast<int>(u_seq.size()) == pr.N, "evaluate_constraints: horizon mismatch");
  std::vector<VectorXd> x = rollout_states(pr.params, pr.x0, u_seq);
  ConstraintReport report;
  report.output_slack.resize(pr.N);
  report.input_slack.resize(pr.N);
  double worst = 0.0;
  for (int i = 0; i < pr.N; ++i) {
    VectorXd y = pr.params.U_o * x[i] + pr.params.b_o;
    report.output_slack[i] = pr.constraints.h - pr.e_o * pr.schedule.a[i] - pr.schedule.b[i] -
                             pr.constraints.L * y - pr.schedule.w_L;
    worst = std::min(worst, report.output_slack[i].minCoeff());
    report.input_slack[i] = 1.0 - inf_norm(u_seq[i]);
    worst = std::min(worst, report.input_slack[i]);
  }
  report.terminal_slack = pr.alpha - inf_norm(x[pr.N] - pr.equilibrium.x_bar);
  worst = std::min(worst, report.terminal_slack);
  report.max_violation = worst < 0.0 ? -worst : 0.0;
  return report;
}

/// Shift-and-append warm start used by the recursive-feasibility argument:
/// [u*_1, ..., u*_{N-1}, u_bar].
inline std::vector<VectorXd> build_candidate(const FhocpSolution& prev, const VectorXd& u_bar) {
  require(!prev.u_opt.empty(), "build_candidate: empty previous solution");
  std::vector<VectorXd> candidate(prev.u_opt.begin() + 1, prev.u_opt.end());
  candidate.push_back(u_bar);
  return candidate;
}

namespace detail {

/// Scratch for one augmented-Lagrangian evaluation: value of the AL
/// function (epigraph cost + penalty), the true cost/violation of the
/// iterate, and optionally the gradients.
struct AlEvaluation {
  double al_value = 0.0;
  double true_cost = 0.0;
  double true_violation = 0.0;
};

struct AlMultipliers {
  std::vector<VectorXd> output;  // per stage, q each
  VectorXd terminal;             // 2n epigraph rows
  double mu = 1.0;
};

inline AlEvaluation al_evaluate(const FhocpProblem& pr, const std::vector<VectorXd>& u_seq,
                                double t, const AlMultipliers& mult,
                                std::vector<VectorXd>* grad_u = nullptr,
                                double* grad_t = nullptr) {
  const int N = pr.N;
  const int n = pr.params.n;
  const int q = pr.constraints.rows();

  std::vector<GruStepCache> caches(N);
  std::vector<VectorXd> x(N + 1);
  x[0] = pr.x0;
  for (int i = 0; i < N; ++i) x[i + 1] = gru_step(pr.params, x[i], u_seq[i], &caches[i]);

  AlEvaluation ev;
  double stage_cost = 0.0;
  double worst = 0.0;
  std::vector<VectorXd> out_c(N);     // output constraint values (<= 0 feasible)
  std::vector<VectorXd> out_mul(N);   // active AL multipliers max(0, lambda + mu c)
  for (int i = 0; i < N; ++i) {
    VectorXd dx = x[i] - pr.equilibrium.x_bar;
    VectorXd du = u_seq[i] - pr.equilibrium.u_bar;
    stage_cost += dx.dot(pr.Q * dx) + du.dot(pr.R * du);
    VectorXd y = pr.params.U_o * x[i] + pr.params.b_o;
    out_c[i] = pr.constraints.L * y + pr.schedule.w_L + pr.e_o * pr.schedule.a[i] +
               pr.schedule.b[i] - pr.constraints.h;
    worst = std::max(worst, out_c[i].maxCoeff());
    worst = std::max(worst, inf_norm(u_seq[i]) - 1.0);
    out_mul[i] = (mult.output[i] + mult.mu * out_c[i]).cwiseMax(0.0);
  }
  VectorXd dterm = x[N] - pr.equilibrium.x_bar;
  const double term_norm = inf_norm(dterm);
  worst = std::max(worst, term_norm - pr.alpha);

  ev.true_cost = stage_cost + pr.s * term_norm * term_norm;
  ev.true_violation = worst;

  // Epigraph terminal rows: +/- (x_N - x_bar)_j - t <= 0, plus the terminal
  // ball alpha constraint expressed on t (t <= alpha keeps the ball row
  // smooth; combined with t >= ||dterm||_inf it is equivalent).
  VectorXd term_c(2 * n + 1);
  term_c.head(n) = dterm.array() - t;
  term_c.segment(n, n) = -dterm.array() - t;
  term_c(2 * n) = t - pr.alpha;
  VectorXd term_mul = (mult.terminal + mult.mu * term_c).cwiseMax(0.0);

  double penalty = 0.0;
  for (int i = 0; i < N; ++i)
    penalty += (out_mul[i].squaredNorm() - mult.output[i].squaredNorm()) / (2.0 * mult.mu);
  penalty += (term_mul.squaredNorm() - mult.terminal.squaredNorm()) / (2.0 * mult.mu);
  ev.al_value = stage_cost + pr.s * t * t + penalty;

  if (grad_u == nullptr) return ev;

  grad_u->assign(N, VectorXd::Zero(pr.params.m));
  VectorXd g_x = VectorXd::Zero(n);
  g_x += term_mul.head(n) - term_mul.segment(n, n);
  *grad_t = 2.0 * pr.s * t - term_mul.head(2 * n).sum() + term_mul(2 * n);

  MatrixXd LUo_T = (pr.constraints.L * pr.params.U_o).transpose();
  for (int i = N - 1; i >= 0; --i) {
    VectorXd g_x_prev = VectorXd::Zero(n);
    gru_step_backward(pr.params, caches[i], g_x, g_x_prev, (*grad_u)[i]);
    (*grad_u)[i] += 2.0 * (pr.R * (u_seq[i] - pr.equilibrium.u_bar));
    g_x_prev += 2.0 * (pr.Q * (x[i] - pr.equilibrium.x_bar));
    g_x_prev += LUo_T * out_mul[i];
    g_x = g_x_prev;
  }
  return ev;
}

}  // namespace detail

/// Single-shooting augmented-Lagrangian solve. The input box is enforced by
/// projection; tightened output rows and the epigraph terminal rows carry
/// multipliers. Deterministic for identical inputs. The returned iterate is
/// the best truly-feasible one encountered (so a feasible warm start is
/// never degraded); status reports whether the final inner loop also met the
/// gradient tolerance.
inline FhocpSolution solve_fhocp(const FhocpProblem& pr,
                                 const std::vector<VectorXd>* warm_start = nullptr) {
  pr.validate();
  const int N = pr.N;
  const int n = pr.params.n;
  const int m = pr.params.m;
  const FhocpOptions& opt = pr.options;

  std::vector<VectorXd> u(N);
  if (warm_start != nullptr) {
    require(static_cast<int>(warm_start->size()) == N, "solve_fhocp: warm start length != N");
    for (int i = 0; i < N; ++i) u[i] = (*warm_start)[i].cwiseMax(-1.0).cwiseMin(1.0);
  } else {
    for (int i = 0; i < N; ++i) u[i] = pr.equilibrium.u_bar.cwiseMax(-1.0).cwiseMin(1.0);
  }
  double t = inf_norm(rollout_states(pr.params, pr.x0, u).back() - pr.equilibrium.x_bar);

  detail::AlMultipliers mult;
  mult.output.assign(N, VectorXd::Zero(pr.constraints.rows()));
  mult.terminal = VectorXd::Zero(2 * n + 1);
  mult.mu = opt.initial_penalty;

  bool have_best = false;
  std::vector<VectorXd> best_u;
  double best_cost = 0.0;
  int total_iterations = 0;
  bool converged_inner = false;
  double previous_worst = std::numeric_limits<double>::infinity();

  auto consider = [&](const detail::AlEvaluation& ev, const std::vector<VectorXd>& cu) {
    if (ev.true_violation <= opt.feasibility_tolerance &&
        (!have_best || ev.true_cost < best_cost)) {
      have_best = true;
      best_cost = ev.true_cost;
      best_u = cu;
    }
  };

  for (int outer = 0; outer < opt.outer_iterations; ++outer) {
    double step = opt.initial_step;
    std::vector<VectorXd> grad_u;
    double grad_t = 0.0;
    detail::AlEvaluation ev = detail::al_evaluate(pr, u, t, mult, &grad_u, &grad_t);
    consider(ev, u);
    converged_inner = false;

    for (int inner = 0; inner < opt.inner_iterations; ++inner) {
      ++total_iterations;
      // Projected-gradient stationarity at unit reference step.
      double pg = std::abs(std::max(0.0, t - grad_t) - t);
      for (int i = 0; i < N; ++i) {
        VectorXd moved = (u[i] - grad_u[i]).cwiseMax(-1.0).cwiseMin(1.0);
        pg = std::max(pg, inf_norm(moved - u[i]));
      }
      if (pg <= opt.gradient_tolerance) {
        converged_inner = true;
        break;
      }

      bool accepted = false;
      std::vector<VectorXd> u_new(N);
      double t_new = t;
      detail::AlEvaluation ev_new;
      while (step >= 1e-14) {
        double move = 0.0;
        for (int i = 0; i < N; ++i) {
          u_new[i] = (u[i] - step * grad_u[i]).cwiseMax(-1.0).cwiseMin(1.0);
          move += (u_new[i] - u[i]).squaredNorm();
        }
        t_new = std::max(0.0, t - step * grad_t);
        move += (t_new - t) * (t_new - t);
        ev_new = detail::al_evaluate(pr, u_new, t_new, mult);
        if (ev_new.al_value <= ev.al_value - 1e-4 / step * move && move > 0.0) {
          accepted = true;
          break;
        }
        step *= 0.5;
      }
      if (!accepted) break;  // line search exhausted at this multiplier state
      u = u_new;
      t = t_new;
      ev = detail::al_evaluate(pr, u, t, mult, &grad_u, &grad_t);
      consider(ev, u);
      step = std::min(step * 2.0, 1e3);
    }

    // Multiplier update on the actual constraint values at the new iterate.
    std::vector<VectorXd> x = rollout_states(pr.params, pr.x0, u);
    double worst_c = 0.0;
    for (int i = 0; i < N; ++i) {
      VectorXd y = pr.params.U_o * x[i] + pr.params.b_o;
      VectorXd c = pr.constraints.L * y + pr.schedule.w_L + pr.e_o * pr.schedule.a[i] +
                   pr.schedule.b[i] - pr.constraints.h;
      mult.output[i] = (mult.output[i] + mult.mu * c).cwiseMax(0.0);
      worst_c = std::max(worst_c, c.maxCoeff());
    }
    VectorXd dterm = x[N] - pr.equilibrium.x_bar;
    VectorXd term_c(2 * n + 1);
    term_c.head(n) = dterm.array() - t;
    term_c.segment(n, n) = -dterm.array() - t;
    term_c(2 * n) = t - pr.alpha;
    mult.terminal = (mult.terminal + mult.mu * term_c).cwiseMax(0.0);
    worst_c = std::max(worst_c, term_c.maxCoeff());

    if (worst_c <= opt.feasibility_tolerance && converged_inner) break;
    if (worst_c > 0.25 * previous_worst) mult.mu *= opt.penalty_growth;
    previous_worst = worst_c;
  }

  FhocpSolution sol;
  sol.iterations = total_iterations;
  if (!have_best) {
    sol.status = SolveStatus::infeasible;
    sol.u_opt = u;
    sol.x_pred = rollout_states(pr.params, pr.x0, u);
    sol.cost = evaluate_cost(pr, u);
    sol.max_violation = evaluate_constraints(pr, u).max_violation;
    return sol;
  }
  sol.u_opt = best_u;
  sol.x_pred = rollout_states(pr.params, pr.x0, best_u);
  sol.cost = best_cost;
  sol.max_violation = evaluate_constraints(pr, best_u).max_violation;
  sol.status = converged_inner ? SolveStatus::optimal : SolveStatus::feasible_suboptimal;
  return sol;
}

/// Per-step diagnostics emitted by the receding-horizon law.
struct MpcStepResult {
  VectorXd u;  // first optimal input, normalized units
  FhocpSolution solution;
  bool candidate_checked = false;  // a same-reference previous solution existed
  double candidate_violation = 0.0;
  double epsilon_excess = 0.0;  // max_i ||eps_i|| - bound_i over the audit, <= slack expected
  bool feasibility_condition = false;  // shifted-candidate condition at current e_o
  double feasibility_lhs = 0.0;
  double feasibility_rhs = 0.0;
};

/// Receding-horizon controller: rebuilds and solves the FHOCP at each
/// estimated state, warm-started with the shifted candidate, and audits the
/// candidate's feasibility and prediction drift against their certified
/// bounds. One instance per control loop.
class MpcController {
 public:
  MpcController(GruParams params, MatrixXd Q, MatrixXd R, double s, int N,
                OutputConstraints constraints, TighteningSchedule schedule,
                FhocpOptions options = {})
      : params_(std::move(params)),
        Q_(std::move(Q)),
        R_(std::move(R)),
        s_(s),
        N_(N),
        constraints_(std::move(constraints)),
        schedule_(std::move(schedule)),
        options_(options) {}

  struct ReferenceStatus {
    bool ok = false;
    EquilibriumStatus equilibrium_status = EquilibriumStatus::no_convergence;
    bool setpoint_ok = false;
    bool feasibility_ok = false;
    double alpha = 0.0;
    std::string message;
  };

  /// Install a new normalized set-point: recompute the equilibrium, the
  /// terminal radius, and the standing feasibility conditions at the current
  /// uncertainty level. Clears the previous solution (candidate claims do
  /// not cross reference changes).
  ReferenceStatus set_reference(const VectorXd& y_bar, double e_o_now) {
    ReferenceStatus st;
    previous_.reset();
    EquilibriumResult eq = find_equilibrium(params_, y_bar, 1e-12, 400);
    st.equilibrium_status = eq.status;
    if (!eq.ok()) {
      st.message = std::string("equilibrium solve failed: ") + to_string(eq.status);
      have_reference_ = false;
      return st;
    }
    equilibrium_ = eq.value;
    alpha_ = compute_alpha(y_bar, constraints_, schedule_, e_o_now);
    st.alpha = alpha_;
    st.setpoint_ok = check_setpoint(y_bar, constraints_, schedule_, e_o_now);
    st.feasibility_ok = check_recursive_feasibility_always(e_o_now, alpha_, schedule_);
    st.ok = st.setpoint_ok && st.feasibility_ok && alpha_ > 0.0;
    if (!st.setpoint_ok) {
      st.message = "set-point violates the strict tightened-interior condition";
    } else if (!st.feasibility_ok) {
      st.message = "shifted-candidate feasibility condition fails at e_o or e_inf";
    }
    have_reference_ = st.ok;
    return st;
  }

  const Equilibrium& equilibrium() const { return equilibrium_; }
  double alpha() const { return alpha_; }
  bool has_previous() const { return previous_.has_value(); }
  const FhocpSolution& previous() const { return *previous_; }

  FhocpProblem assemble(const VectorXd& x_hat, double e_o) const {
    require(have_reference_, "MpcController: no admissible reference installed");
    FhocpProblem pr;
    pr.params = params_;
    pr.N = N_;
    pr.Q = Q_;
    pr.R = R_;
    pr.s = s_;
    pr.equilibrium = equilibrium_;
    pr.constraints = constraints_;
    pr.schedule = schedule_;
    pr.alpha = alpha_;
    pr.x0 = x_hat;
    pr.e_o = e_o;
    pr.options = options_;
    return pr;
  }

  MpcStepResult step(const VectorXd& x_hat, double e_o) {
    FhocpProblem pr = assemble(x_hat, e_o);
    MpcStepResult res;
    res.feasibility_condition = check_recursive_feasibility(e_o, alpha_, schedule_);
    res.feasibility_lhs = std::pow(schedule_.rho_s, static_cast<double>(schedule_.N)) *
                          (schedule_.injection_gain * e_o + schedule_.w_bar);
    res.feasibility_rhs = alpha_ * (1.0 - schedule_.rho_s);

    std::vector<VectorXd> candidate;
    const std::vector<VectorXd>* warm = nullptr;
    if (previous_.has_value()) {
      candidate = build_candidate(*previous_, equilibrium_.u_bar);
      res.candidate_checked = true;
      res.candidate_violation = evaluate_constraints(pr, candidate).max_violation;

      // Drift audit: the candidate's rollout from the new estimate against
      // the previous optimal prediction, stage by stage.
      std::vector<VectorXd> shifted = rollout_states(params_, x_hat, candidate);
      double worst_excess = -std::numeric_limits<double>::infinity();
      double bound = schedule_.injection_gain * previous_e_o_ + schedule_.w_bar;
      for (int i = 1; i <= N_; ++i) {
        double eps = inf_norm(shifted[i - 1] - previous_->x_pred[i]);
        worst_excess = std::max(worst_excess, eps - bound);
        bound *= schedule_.rho_s;
      }
      res.epsilon_excess = worst_excess;
      warm = &candidate;
    }

    res.solution = solve_fhocp(pr, warm);
    if (res.solution.status != SolveStatus::infeasible) {
      previous_ = res.solution;
      previous_e_o_ = e_o;
      res.u = res.solution.u_opt.front();
    } else {
      previous_.reset();
      res.u = equilibrium_.u_bar;
    }
    return res;
  }

 private:
  GruParams params_;
  MatrixXd Q_, R_;
  double s_ = 0.0;
  int N_ = 0;
  OutputConstraints constraints_;
  TighteningSchedule schedule_;
  FhocpOptions options_;
  Equilibrium equilibrium_;
  double alpha_ = 0.0;
  bool have_reference_ = false;
  std::optional<FhocpSolution> previous_;
  double previous_e_o_ = 0.0;
};

}  // namespace grumpc

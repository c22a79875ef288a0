#include <catch2/catch_amalgamated.hpp>

#include "grumpc/fhocp.hpp"
#include "grumpc/observer.hpp"
#include "grumpc/util.hpp"

using namespace grumpc;

namespace {

// One-unit plant x+ = 0.5 x + 0.5 tanh(0.8 u + 0.25 x), y = x. Certified with
// nu = 0.25, rho_s = 0.625.
GruParams desk_model() {
  GruParams g = GruParams::zeros(1, 1, 1);
  g.U_h(0, 0) = 0.5;
  g.W_h(0, 0) = 0.8;
  g.U_o(0, 0) = 1.0;
  return g;
}

// Untightened schedule for the desk model (exact state, no noise).
TighteningSchedule desk_schedule(const GruParams& g, const OutputConstraints& constraints,
                                 int N) {
  StabilityCertificate cert = stability_metrics(g, constraints.L);
  ObserverCertificate metrics = observer_metrics(g, ObserverGains::zeros(g.n, g.p));
  return build_schedule(cert, metrics, constraints, g, 0.0, N);
}

FhocpProblem desk_problem(int N, double x0_value, double y_ref) {
  GruParams g = desk_model();
  OutputConstraints constraints;
  constraints.L = MatrixXd(2, 1);
  constraints.L << 1.0, -1.0;
  constraints.h = VectorXd::Constant(2, 0.9);

  FhocpProblem pr;
  pr.params = g;
  pr.N = N;
  pr.Q = MatrixXd::Identity(1, 1);
  pr.R = MatrixXd::Identity(1, 1) * 0.1;
  pr.schedule = desk_schedule(g, constraints, N);
  pr.s = terminal_weight(pr.Q, pr.schedule.rho_s);
  EquilibriumResult eq = find_equilibrium(g, VectorXd::Constant(1, y_ref), 1e-12, 400);
  REQUIRE(eq.ok());
  pr.equilibrium = eq.value;
  pr.constraints = constraints;
  pr.alpha = compute_alpha(pr.equilibrium.y_bar, constraints, pr.schedule, 0.0);
  pr.x0 = VectorXd::Constant(1, x0_value);
  pr.e_o = 0.0;
  return pr;
}

}  // namespace

TEST_CASE("terminal weight lower bound") {
  CHECK(terminal_weight(MatrixXd::Identity(2, 2), 0.5) ==
        Catch::Approx(2.6666666666666665).epsilon(1e-15));
  MatrixXd Q(2, 2);
  Q << 3.0, 0.0, 0.0, 1.0;
  CHECK(terminal_weight(Q, 0.0) == Catch::Approx(6.0).epsilon(1e-14));
  CHECK_THROWS_AS(terminal_weight(MatrixXd::Identity(1, 1), 1.0), std::invalid_argument);
}

TEST_CASE("cost of a hand-rolled one-step problem") {
  GruParams g = GruParams::zeros(1, 1, 1);  // x+ = x/2
  g.U_o(0, 0) = 1.0;
  OutputConstraints constraints;
  constraints.L = MatrixXd(2, 1);
  constraints.L << 1.0, -1.0;
  constraints.h = VectorXd::Ones(2);

  FhocpProblem pr;
  pr.params = g;
  pr.N = 1;
  pr.Q = MatrixXd::Identity(1, 1);
  pr.R = MatrixXd::Identity(1, 1);
  pr.schedule = desk_schedule(g, constraints, 1);
  pr.s = 4.0 / 3.0;  // = 1 / (1 - 0.25)
  pr.equilibrium.x_bar = VectorXd::Zero(1);
  pr.equilibrium.u_bar = VectorXd::Zero(1);
  pr.equilibrium.y_bar = VectorXd::Zero(1);
  pr.constraints = constraints;
  pr.alpha = 0.5;
  pr.x0 = VectorXd::Constant(1, 0.4);
  pr.e_o = 0.0;
  pr.validate();

  std::vector<VectorXd> u = {VectorXd::Zero(1)};
  // stage 0.4^2, terminal (4/3) 0.2^2
  CHECK(evaluate_cost(pr, u) ==
        Catch::Approx(0.16 + (4.0 / 3.0) * 0.04).epsilon(1e-14));

  ConstraintReport report = evaluate_constraints(pr, u);
  REQUIRE(report.output_slack.size() == 1);
  CHECK(report.output_slack[0](0) == Catch::Approx(0.6).margin(1e-14));
  CHECK(report.output_slack[0](1) == Catch::Approx(1.4).margin(1e-14));
  CHECK(report.input_slack[0] == Catch::Approx(1.0).margin(1e-14));
  CHECK(report.terminal_slack == Catch::Approx(0.5 - 0.2).margin(1e-14));
  CHECK(report.max_violation == 0.0);

  // Saturated input and a terminal miss show up as violations.
  std::vector<VectorXd> bad = {VectorXd::Constant(1, 1.5)};
  ConstraintReport worse = evaluate_constraints(pr, bad);
  CHECK(worse.input_slack[0] == Catch::Approx(-0.5).margin(1e-14));
  CHECK(worse.max_violation >= 0.5);
}

TEST_CASE("candidate shifts and appends the steady input") {
  FhocpSolution prev;
  prev.u_opt = {VectorXd::Constant(1, 0.1), VectorXd::Constant(1, 0.2),
                VectorXd::Constant(1, 0.3)};
  VectorXd u_bar = VectorXd::Constant(1, 0.9);
  std::vector<VectorXd> cand = build_candidate(prev, u_bar);
  REQUIRE(cand.size() == 3);
  CHECK(cand[0](0) == 0.2);
  CHECK(cand[1](0) == 0.3);
  CHECK(cand[2](0) == 0.9);
}

TEST_CASE("problem validation rejects broken ingredients") {
  FhocpProblem pr = desk_problem(3, 0.8, 0.3);
  CHECK_NOTHROW(pr.validate());

  FhocpProblem low_s = pr;
  low_s.s = 0.5 * terminal_weight(pr.Q, pr.schedule.rho_s);
  CHECK_THROWS_AS(low_s.validate(), std::invalid_argument);

  FhocpProblem bad_alpha = pr;
  bad_alpha.alpha = 0.0;
  CHECK_THROWS_AS(bad_alpha.validate(), std::invalid_argument);

  FhocpProblem bad_q = pr;
  bad_q.Q = -MatrixXd::Identity(1, 1);
  CHECK_THROWS_AS(bad_q.validate(), std::invalid_argument);

  FhocpProblem short_schedule = pr;
  short_schedule.N = pr.schedule.N + 1;
  CHECK_THROWS_AS(short_schedule.validate(), std::invalid_argument);
}

TEST_CASE("augmented-Lagrangian gradients match central differences") {
  FhocpProblem pr = desk_problem(4, 0.7, 0.3);
  Lcg64 rng(411);
  std::vector<VectorXd> u(4);
  for (auto& ui : u) ui = VectorXd::Constant(1, rng.uniform(-0.8, 0.8));
  double t = 0.3;

  detail::AlMultipliers mult;
  mult.output.assign(4, VectorXd::Zero(2));
  for (auto& lam : mult.output)
    for (int j = 0; j < 2; ++j) lam(j) = rng.uniform(0.0, 0.5);
  mult.terminal = VectorXd::Zero(3);
  for (int j = 0; j < 3; ++j) mult.terminal(j) = rng.uniform(0.0, 0.5);
  mult.mu = 3.0;

  std::vector<VectorXd> grad_u;
  double grad_t = 0.0;
  detail::al_evaluate(pr, u, t, mult, &grad_u, &grad_t);

  const double fd_step = 1e-6;
  for (int i = 0; i < 4; ++i) {
    std::vector<VectorXd> up = u, um = u;
    up[i](0) += fd_step;
    um[i](0) -= fd_step;
    double fd = (detail::al_evaluate(pr, up, t, mult).al_value -
                 detail::al_evaluate(pr, um, t, mult).al_value) /
                (2 * fd_step);
    CHECK(grad_u[i](0) == Catch::Approx(fd).margin(1e-6));
  }
  double fd_t = (detail::al_evaluate(pr, u, t + fd_step, mult).al_value -
                 detail::al_evaluate(pr, u, t - fd_step, mult).al_value) /
                (2 * fd_step);
  CHECK(grad_t == Catch::Approx(fd_t).margin(1e-6));
}

TEST_CASE("desk-scale solve agrees with an exhaustive input grid") {
  FhocpProblem pr = desk_problem(2, 0.8, 0.3);
  FhocpSolution sol = solve_fhocp(pr);
  REQUIRE(sol.status != SolveStatus::infeasible);
  CHECK(sol.max_violation <= 1e-6);

  double best = std::numeric_limits<double>::infinity();
  for (int i = -100; i <= 100; ++i) {
    for (int j = -100; j <= 100; ++j) {
      std::vector<VectorXd> u = {VectorXd::Constant(1, i / 100.0),
                                 VectorXd::Constant(1, j / 100.0)};
      if (evaluate_constraints(pr, u).max_violation > 0.0) continue;
      best = std::min(best, evaluate_cost(pr, u));
    }
  }
  REQUIRE(std::isfinite(best));
  CHECK(sol.cost <= best + 1e-9);   // the grid is a subset of the feasible set
  CHECK(sol.cost >= best - 1e-3);   // and the solver cannot beat it by much
}

TEST_CASE("starting at the equilibrium returns the steady input at zero cost") {
  FhocpProblem pr = desk_problem(5, 0.0, 0.3);
  pr.x0 = pr.equilibrium.x_bar;
  FhocpSolution sol = solve_fhocp(pr);
  REQUIRE(sol.status != SolveStatus::infeasible);
  CHECK(sol.cost <= 1e-9);
  for (const VectorXd& ui : sol.u_opt) {
    CHECK(inf_norm(ui - pr.equilibrium.u_bar) <= 1e-6);
  }
}

TEST_CASE("solves are deterministic") {
  FhocpProblem pr = desk_problem(4, 0.8, 0.3);
  FhocpSolution a = solve_fhocp(pr);
  FhocpSolution b = solve_fhocp(pr);
  REQUIRE(a.u_opt.size() == b.u_opt.size());
  CHECK(a.cost == b.cost);
  CHECK(a.iterations == b.iterations);
  for (size_t i = 0; i < a.u_opt.size(); ++i) CHECK(a.u_opt[i] == b.u_opt[i]);
}

TEST_CASE("a feasible warm start is never degraded") {
  FhocpProblem pr = desk_problem(4, 0.8, 0.3);
  FhocpSolution first = solve_fhocp(pr);
  REQUIRE(first.status != SolveStatus::infeasible);

  // Step the plant by the first input and warm-start from the shifted tail.
  FhocpProblem next = pr;
  next.x0 = gru_step(pr.params, pr.x0, first.u_opt.front());
  std::vector<VectorXd> candidate = build_candidate(first, pr.equilibrium.u_bar);
  double candidate_cost = evaluate_cost(next, candidate);
  REQUIRE(evaluate_constraints(next, candidate).max_violation <= 1e-9);

  FhocpSolution warm = solve_fhocp(next, &candidate);
  REQUIRE(warm.status != SolveStatus::infeasible);
  CHECK(warm.cost <= candidate_cost + 1e-12);
}

TEST_CASE("impossible instances are reported infeasible") {
  // One step from -0.8 reaches at most -0.146; the ball around 0.3 is out of
  // range even with the input saturated.
  FhocpProblem pr = desk_problem(1, -0.8, 0.3);
  pr.alpha = 1e-6;
  FhocpSolution sol = solve_fhocp(pr);
  CHECK(sol.status == SolveStatus::infeasible);
  CHECK(sol.max_violation > 0.0);
}

TEST_CASE("terminal ball is invariant and output-safe") {
  FhocpProblem pr = desk_problem(5, 0.0, 0.3);
  const double alpha = pr.alpha;
  REQUIRE(alpha > 0.0);
  const double rho_s = pr.schedule.rho_s;
  const VectorXd x_bar = pr.equilibrium.x_bar;
  const VectorXd u_bar = pr.equilibrium.u_bar;
  const double e_tilde = 0.0;
  Lcg64 rng(421);
  for (int s = 0; s < 10000; ++s) {
    VectorXd x = x_bar + VectorXd::Constant(1, rng.uniform(-alpha, alpha));
    if (inf_norm(x) > 1.0) continue;  // sampling box intersected with the state set
    // Output constraint satisfied with the fully tightened margin.
    VectorXd y = pr.params.U_o * x + pr.params.b_o;
    VectorXd slack = pr.constraints.h - e_tilde * pr.schedule.a[pr.schedule.N] -
                     pr.schedule.b[pr.schedule.N] - pr.schedule.w_L - pr.constraints.L * y;
    CHECK(slack.minCoeff() >= -1e-9);
    // One steady-input step contracts back into the ball.
    VectorXd x_next = gru_step(pr.params, x, u_bar);
    CHECK(inf_norm(x_next - x_bar) <= rho_s * inf_norm(x - x_bar) + 1e-12);
    CHECK(inf_norm(x_next - x_bar) <= alpha + 1e-12);
  }
}

TEST_CASE("solver status names") {
  CHECK(std::string(to_string(SolveStatus::optimal)) == "optimal");
  CHECK(std::string(to_string(SolveStatus::feasible_suboptimal)) == "feasible_suboptimal");
  CHECK(std::string(to_string(SolveStatus::infeasible)) == "infeasible");
}

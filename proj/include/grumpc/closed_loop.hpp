#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "grumpc/fhocp.hpp"
#include "grumpc/gru.hpp"
#include "grumpc/observer.hpp"
#include "grumpc/plant.hpp"
#include "grumpc/stability.hpp"
#include "grumpc/tightening.hpp"
#include "grumpc/util.hpp"

namespace grumpc {

/// The controlled process as the loop sees it: physical-unit measurements
/// and inputs, advanced one sampling period per apply().
class Plant {
 public:
  virtual ~Plant() = default;
  virtual VectorXd measure() = 0;
  virtual void apply(const VectorXd& u_physical) = 0;
  virtual long clamp_events() const { return 0; }
};

class FourTankPlant : public Plant {
 public:
  FourTankPlant(FourTankParams params, VectorXd initial_levels, double Ts)
      : params_(params), h_(std::move(initial_levels)), Ts_(Ts) {
    params_.validate();
    require(h_.size() == 4 && (h_.array() >= 0.0).all(), "FourTankPlant: bad initial levels");
    require(Ts_ > 0.0, "FourTankPlant: sampling time must be positive");
  }

  VectorXd measure() override { return h_.head(2); }

  void apply(const VectorXd& u_physical) override {
    require(u_physical.size() == 2, "FourTankPlant: expected two flows");
    h_ = plant_step(h_, u_physical(0), u_physical(1), params_, Ts_, &clamps_);
  }

  long clamp_events() const override { return clamps_; }
  const VectorXd& levels() const { return h_; }

 private:
  FourTankParams params_;
  VectorXd h_;
  double Ts_ = 0.0;
  long clamps_ = 0;
};

/// The model itself acting as the true system, with optional bounded
/// uniform measurement noise — the exact setting of the robustness theory.
/// Each measure() draws the next noise sample (one draw per loop step).
class GruPlant : public Plant {
 public:
  GruPlant(GruParams params, VectorXd x0, double noise_amplitude = 0.0, std::uint64_t seed = 1)
      : g_(std::move(params)), x_(std::move(x0)), noise_amplitude_(noise_amplitude), rng_(seed) {
    g_.validate();
    require(x_.size() == g_.n, "GruPlant: bad initial state");
    require(noise_amplitude_ >= 0.0, "GruPlant: negative noise amplitude");
  }

  VectorXd measure() override {
    last_noise_ = VectorXd::Zero(g_.p);
    if (noise_amplitude_ > 0.0) {
      for (int j = 0; j < g_.p; ++j)
        last_noise_(j) = rng_.uniform(-noise_amplitude_, noise_amplitude_);
    }
    VectorXd y_norm = gru_output(g_, x_) + last_noise_;
    return g_.output_scaler.denormalize(y_norm);
  }

  void apply(const VectorXd& u_physical) override {
    x_ = gru_step(g_, x_, g_.input_scaler.normalize(u_physical));
  }

  const VectorXd& state() const { return x_; }
  const VectorXd& last_noise() const { return last_noise_; }

 private:
  GruParams g_;
  VectorXd x_;
  double noise_amplitude_ = 0.0;
  Lcg64 rng_;
  VectorXd last_noise_;
};

/// Step-indexed set-point schedule in physical units; the first entry must
/// start at step 0.
struct ReferenceSchedule {
  std::vector<std::pair<long, VectorXd>> points;

  void validate(long steps) const {
    require(!points.empty(), "ReferenceSchedule: at least one reference required");
    require(points.front().first == 0, "ReferenceSchedule: first reference must start at step 0");
    for (size_t i = 1; i < points.size(); ++i)
      require(points[i].first > points[i - 1].first, "ReferenceSchedule: steps must increase");
    require(points.back().first < steps, "ReferenceSchedule: reference beyond run length");
  }

  const VectorXd* change_at(long k) const {
    for (const auto& [start, y] : points)
      if (start == k) return &y;
    return nullptr;
  }
};

struct ClosedLoopRecord {
  long k = 0;
  VectorXd u_physical;
  VectorXd y_physical;
  VectorXd y_normalized;
  VectorXd x_hat;
  double e_o = 0.0;
  double cost = 0.0;
  double max_violation = 0.0;
  double alpha = 0.0;
  double feasibility_lhs = 0.0;
  double feasibility_rhs = 0.0;
  bool feasibility_ok = false;
  bool candidate_checked = false;
  double candidate_violation = 0.0;
  double epsilon_excess = 0.0;
  bool outputs_in_bounds = true;
  bool inputs_in_bounds = true;
  int solver_iterations = 0;
  SolveStatus status = SolveStatus::infeasible;
};

struct SegmentSummary {
  long start = 0;
  long end = 0;  // exclusive
  VectorXd reference_physical;
  VectorXd steady_error_physical;  // mean |y - y_ref| over the closing window
};

struct ClosedLoopResult {
  bool completed = false;
  std::string abort_reason;
  long aborted_at = -1;
  std::vector<ClosedLoopRecord> records;
  std::vector<SegmentSummary> segments;
  long output_violations = 0;
  long input_violations = 0;
  long feasibility_condition_failures = 0;
  long candidate_checks = 0;
  double worst_candidate_violation = 0.0;
  double worst_epsilon_excess = -std::numeric_limits<double>::infinity();
  long plant_clamp_events = 0;
};

struct ClosedLoopSetup {
  GruParams params;
  ObserverGains gains;
  OutputConstraints constraints;  // normalized units
  TighteningSchedule schedule;
  MatrixXd Q, R;
  double s = 0.0;
  int N = 0;
  FhocpOptions options;
  double e_o_0 = 0.0;
  ReferenceSchedule references;  // physical units
  long steps = 0;
  std::optional<VectorXd> x_hat_0;  // default: equilibrium of the first output
};

namespace detail {

inline SegmentSummary summarize_segment(const std::vector<ClosedLoopRecord>& records, long start,
                                        long end, const VectorXd& y_ref) {
  SegmentSummary seg;
  seg.start = start;
  seg.end = end;
  seg.reference_physical = y_ref;
  const long len = end - start;
  const long window = std::max<long>(1, std::min<long>(20, len / 4));
  VectorXd acc = VectorXd::Zero(y_ref.size());
  for (long k = end - window; k < end; ++k)
    acc += (records[k].y_physical - y_ref).cwiseAbs();
  seg.steady_error_physical = acc / static_cast<double>(window);
  return seg;
}

}  // namespace detail

/// The full control loop: measure, re-solve the FHOCP at the current
/// estimate, apply the first input, correct the estimate, propagate the
/// uncertainty bound. Reference changes re-derive the equilibrium and the
/// terminal set and re-check the standing assumptions before proceeding.
inline ClosedLoopResult run_closed_loop(const ClosedLoopSetup& setup, Plant& plant) {
  setup.params.validate();
  setup.gains.validate(setup.params.n, setup.params.p);
  setup.references.validate(setup.steps);
  require(setup.steps >= 1, "run_closed_loop: at least one step required");
  require(setup.e_o_0 >= 0.0, "run_closed_loop: negative initial e_o");

  ClosedLoopResult result;
  MpcController controller(setup.params, setup.Q, setup.R, setup.s, setup.N, setup.constraints,
                           setup.schedule, setup.options);

  // Initial estimate: the model equilibrium matching the first measurement,
  // zero state when that output is not attainable.
  VectorXd y0_physical = plant.measure();
  VectorXd x_hat;
  if (setup.x_hat_0.has_value()) {
    x_hat = *setup.x_hat_0;
    require(x_hat.size() == setup.params.n, "run_closed_loop: bad x_hat_0 size");
  } else {
    VectorXd y0_norm = setup.params.output_scaler.normalize(y0_physical);
    EquilibriumResult eq0 = find_equilibrium(setup.params, y0_norm, 1e-12, 400);
    x_hat = eq0.ok() ? eq0.value.x_bar : VectorXd::Zero(setup.params.n);
  }

  double e_o = setup.e_o_0;
  long segment_start = 0;
  VectorXd segment_reference;

  auto abort_run = [&](long k, std::string reason) {
    result.completed = false;
    result.aborted_at = k;
    result.abort_reason = std::move(reason);
    result.plant_clamp_events = plant.clamp_events();
    return result;
  };

  for (long k = 0; k < setup.steps; ++k) {
    VectorXd y_physical = k == 0 ? y0_physical : plant.measure();
    VectorXd y_norm = setup.params.output_scaler.normalize(y_physical);

    if (const VectorXd* y_ref = setup.references.change_at(k)) {
      if (k > 0) {
        result.segments.push_back(
            detail::summarize_segment(result.records, segment_start, k, segment_reference));
      }
      segment_start = k;
      segment_reference = *y_ref;
      VectorXd y_ref_norm = setup.params.output_scaler.normalize(*y_ref);
      MpcController::ReferenceStatus st = controller.set_reference(y_ref_norm, e_o);
      if (!st.ok) {
        return abort_run(k, "reference change at step " + std::to_string(k) +
                                " rejected: " + st.message);
      }
    }

    MpcStepResult step = controller.step(x_hat, e_o);
    if (step.solution.status == SolveStatus::infeasible) {
      return abort_run(k, "FHOCP infeasible at step " + std::to_string(k) +
                              " (violation " + std::to_string(step.solution.max_violation) + ")");
    }

    VectorXd u_physical = setup.params.input_scaler.denormalize(step.u);
    plant.apply(u_physical);

    ClosedLoopRecord rec;
    rec.k = k;
    rec.u_physical = u_physical;
    rec.y_physical = y_physical;
    rec.y_normalized = y_norm;
    rec.x_hat = x_hat;
    rec.e_o = e_o;
    rec.cost = step.solution.cost;
    rec.max_violation = step.solution.max_violation;
    rec.alpha = controller.alpha();
    rec.feasibility_lhs = step.feasibility_lhs;
    rec.feasibility_rhs = step.feasibility_rhs;
    rec.feasibility_ok = step.feasibility_condition;
    rec.candidate_checked = step.candidate_checked;
    rec.candidate_violation = step.candidate_violation;
    rec.epsilon_excess = step.candidate_checked
                             ? step.epsilon_excess
                             : -std::numeric_limits<double>::infinity();
    rec.outputs_in_bounds = setup.constraints.contains(y_norm, 1e-12);
    rec.inputs_in_bounds = inf_norm(step.u) <= 1.0 + 1e-12;
    rec.solver_iterations = step.solution.iterations;
    rec.status = step.solution.status;
    result.records.push_back(rec);

    if (!rec.outputs_in_bounds) ++result.output_violations;
    if (!rec.inputs_in_bounds) ++result.input_violations;
    if (!rec.feasibility_ok) ++result.feasibility_condition_failures;
    if (rec.candidate_checked) {
      ++result.candidate_checks;
      result.worst_candidate_violation =
          std::max(result.worst_candidate_violation, rec.candidate_violation);
      result.worst_epsilon_excess = std::max(result.worst_epsilon_excess, rec.epsilon_excess);
    }

    x_hat = observer_step(setup.params, setup.gains, x_hat, step.u, y_norm);
    e_o = setup.schedule.rho_o * e_o + setup.schedule.w_bar;
  }

  result.segments.push_back(detail::summarize_segment(result.records, segment_start, setup.steps,
                                                      segment_reference));
  result.completed = true;
  result.plant_clamp_events = plant.clamp_events();
  return result;
}

/// Pre-run admissibility of every scheduled reference at the most
/// conservative uncertainty level (max of the initial and asymptotic
/// bounds). Returns an empty string when all pass, else the reason.
inline std::string check_references(const GruParams& g, const OutputConstraints& constraints,
                                    const TighteningSchedule& schedule,
                                    const ReferenceSchedule& references, double e_o_0) {
  for (const auto& [start, y_ref] : references.points) {
    VectorXd y_norm = g.output_scaler.normalize(y_ref);
    EquilibriumResult eq = find_equilibrium(g, y_norm, 1e-12, 400);
    if (!eq.ok()) {
      return "reference at step " + std::to_string(start) +
             ": equilibrium solve failed (" + to_string(eq.status) + ")";
    }
    if (!check_setpoint(y_norm, constraints, schedule, e_o_0)) {
      VectorXd margin = constraints.h - constraints.L * y_norm -
                        std::max(e_o_0, schedule.e_inf) * schedule.a[schedule.N] -
                        schedule.b[schedule.N] - schedule.w_L;
      int worst_row = 0;
      margin.minCoeff(&worst_row);
      return "reference at step " + std::to_string(start) +
             " violates the tightened interior condition at constraint row " +
             std::to_string(worst_row + 1);
    }
    double alpha = compute_alpha(y_norm, constraints, schedule, e_o_0);
    if (!(alpha > 0.0)) {
      return "reference at step " + std::to_string(start) + ": terminal radius is " +
             std::to_string(alpha);
    }
    if (!check_recursive_feasibility_always(e_o_0, alpha, schedule)) {
      return "reference at step " + std::to_string(start) +
             ": shifted-candidate feasibility condition fails";
    }
  }
  return {};
}

}  // namespace grumpc

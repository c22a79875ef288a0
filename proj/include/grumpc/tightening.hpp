#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <vector>

#include "grumpc/lp.hpp"
#include "grumpc/observer.hpp"
#include "grumpc/stability.hpp"
#include "grumpc/util.hpp"

namespace grumpc {

/// Polytopic output constraints {y : L y <= h} in normalized units.
struct OutputConstraints {
  MatrixXd L;  // q x p
  VectorXd h;  // q

  int rows() const { return static_cast<int>(L.rows()); }

  void validate() const {
    require(L.rows() >= 1, "OutputConstraints: at least one row required");
    require(h.size() == L.rows(), "OutputConstraints: h size != L rows");
    require(L.allFinite() && h.allFinite(), "OutputConstraints: non-finite data");
  }

  /// Nonemptiness and compactness, established by linear programs.
  PolytopeCheck geometry() const {
    validate();
    return check_polytope(L, h);
  }

  bool contains(const VectorXd& y, double tol = 0.0) const {
    return ((L * y - h).array() <= tol).all();
  }
};

/// Physical box bounds lo <= y_phys <= hi expressed on the normalized
/// output: rows [I; -I] with the correspondingly scaled right-hand side.
inline OutputConstraints box_output_constraints(const Scaler& output_scaler, const VectorXd& lo,
                                                const VectorXd& hi) {
  output_scaler.validate();
  const Eigen::Index p = output_scaler.channels();
  require(lo.size() == p && hi.size() == p, "box_output_constraints: bound size mismatch");
  require((hi.array() > lo.array()).all(), "box_output_constraints: bounds not ordered");
  OutputConstraints c;
  c.L = MatrixXd::Zero(2 * p, p);
  c.L.topRows(p) = MatrixXd::Identity(p, p);
  c.L.bottomRows(p) = -MatrixXd::Identity(p, p);
  c.h = VectorXd(2 * p);
  c.h.head(p) = (hi - output_scaler.offset).cwiseQuotient(output_scaler.half_range);
  c.h.tail(p) = (output_scaler.offset - lo).cwiseQuotient(output_scaler.half_range);
  return c;
}

/// Horizon-indexed tightening margins: constraint row j at stage i is drawn
/// in by a_i(j) * e_o + b_i(j) (+ the measurement margin w_L(j) at stage 0
/// usage sites). Immutable once built.
struct TighteningSchedule {
  std::vector<VectorXd> a;  // N+1 entries of q-vectors
  std::vector<VectorXd> b;  // N+1 entries of q-vectors
  VectorXd c_row;           // row gains ||(L U_o)_(j*)||_inf (= c_s = c_o)
  VectorXd w_L;             // per-row measurement-noise margin
  double w_bar = 0.0;
  double w_bar_y = 0.0;
  double rho_o = 0.0;
  double rho_s = 0.0;
  double injection_gain = 0.0;
  double e_inf = 0.0;  // fixed point of the e_o recursion
  int N = 0;
};

/// Tightest disturbance bound compatible with the observer certificate:
/// one corrected update deviates from the model step by at most
/// kappa * ||w_y||_inf once the error has been absorbed into e_o.
inline double compute_w_bar(double kappa, double w_bar_y) {
  require(kappa >= 0.0, "compute_w_bar: negative kappa");
  require(w_bar_y >= 0.0, "compute_w_bar: negative w_bar_y");
  return kappa * w_bar_y;
}

/// Per-row margin absorbing measurement noise in the constraint rows:
/// w_L(j) = sum_k |L_jk| * w_bar_y.
inline VectorXd compute_w_L(const OutputConstraints& constraints, double w_bar_y) {
  constraints.validate();
  require(w_bar_y >= 0.0, "compute_w_L: negative w_bar_y");
  return constraints.L.cwiseAbs().rowwise().sum() * w_bar_y;
}

inline TighteningSchedule build_schedule(const StabilityCertificate& cert,
                                         const ObserverCertificate& metrics,
                                         const OutputConstraints& constraints,
                                         const GruParams& g, double w_bar_y, int N) {
  require(N >= 1, "build_schedule: horizon must be positive");
  require(cert.delta_iss, "build_schedule: model is not certified (nu >= 1)");
  require(metrics.converging, "build_schedule: observer is not convergent (nu_o >= 1)");
  constraints.validate();

  TighteningSchedule s;
  s.N = N;
  s.rho_o = metrics.rho_o;
  s.rho_s = cert.rho_s;
  s.injection_gain = metrics.injection_gain;
  s.w_bar_y = w_bar_y;
  s.w_bar = compute_w_bar(metrics.kappa, w_bar_y);
  s.w_L = compute_w_L(constraints, w_bar_y);
  s.c_row = constraint_gain(g, constraints.L);
  s.e_inf = s.w_bar / (1.0 - s.rho_o);

  s.a.resize(N + 1);
  s.b.resize(N + 1);
  s.a[0] = s.c_row;
  s.b[0] = VectorXd::Zero(constraints.rows());
  double rho_s_pow = 1.0;  // rho_s^i at stage i
  for (int i = 0; i < N; ++i) {
    s.a[i + 1] = s.rho_o * s.a[i] + rho_s_pow * s.injection_gain * s.c_row;
    s.b[i + 1] = s.b[i] + s.a[i] * s.w_bar + s.c_row * rho_s_pow * s.w_bar;
    rho_s_pow *= s.rho_s;
  }
  return s;
}

/// Worst-case bound on the observer-error Lyapunov function.
struct UncertaintyState {
  double e_o = 0.0;
  long k = 0;
};

inline UncertaintyState eo_step(const UncertaintyState& state, const TighteningSchedule& s) {
  require(state.e_o >= 0.0, "eo_step: negative e_o");
  return UncertaintyState{s.rho_o * state.e_o + s.w_bar, state.k + 1};
}

/// Closed form of the recursion after k steps.
inline double eo_closed_form(const TighteningSchedule& s, double e_o_0, long k) {
  return s.e_inf + std::pow(s.rho_o, static_cast<double>(k)) * (e_o_0 - s.e_inf);
}

/// Terminal-set radius: the largest alpha such that every output reachable
/// from the alpha-ball around x_bar stays inside the fully tightened
/// constraints. Rows with zero gain are vacuous when their margin holds and
/// poison alpha to -inf otherwise.
inline double compute_alpha(const VectorXd& y_bar, const OutputConstraints& constraints,
                            const TighteningSchedule& s, double e_o_0) {
  constraints.validate();
  require(y_bar.size() == constraints.L.cols(), "compute_alpha: set-point size mismatch");
  const double e_tilde = std::max(e_o_0, s.e_inf);
  const VectorXd margin =
      constraints.h - constraints.L * y_bar - e_tilde * s.a[s.N] - s.b[s.N] - s.w_L;
  double alpha = std::numeric_limits<double>::infinity();
  for (int j = 0; j < constraints.rows(); ++j) {
    if (s.c_row(j) == 0.0) {
      if (margin(j) < 0.0) return -std::numeric_limits<double>::infinity();
      continue;
    }
    alpha = std::min(alpha, margin(j) / s.c_row(j));
  }
  return alpha;
}

/// Strict interior condition on the set-point: L y_bar < h - e_tilde a_N -
/// b_N - w_L componentwise.
inline bool check_setpoint(const VectorXd& y_bar, const OutputConstraints& constraints,
                           const TighteningSchedule& s, double e_o_0) {
  constraints.validate();
  const double e_tilde = std::max(e_o_0, s.e_inf);
  const VectorXd margin =
      constraints.h - constraints.L * y_bar - e_tilde * s.a[s.N] - s.b[s.N] - s.w_L;
  return (margin.array() > 0.0).all();
}

/// Shifted-candidate admissibility at the current uncertainty level:
/// rho_s^N (injection_gain * e_o + w_bar) <= alpha (1 - rho_s).
inline bool check_recursive_feasibility(double e_o, double alpha, const TighteningSchedule& s) {
  const double lhs =
      std::pow(s.rho_s, static_cast<double>(s.N)) * (s.injection_gain * e_o + s.w_bar);
  return lhs <= alpha * (1.0 - s.rho_s);
}

/// Because e_o evolves monotonically between e_o_0 and e_inf, holding at
/// both endpoints implies holding at every step.
inline bool check_recursive_feasibility_always(double e_o_0, double alpha,
                                               const TighteningSchedule& s) {
  return check_recursive_feasibility(e_o_0, alpha, s) &&
         check_recursive_feasibility(s.e_inf, alpha, s);
}

}  // namespace grumpc

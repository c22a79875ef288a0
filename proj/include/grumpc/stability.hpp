#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <optional>

#include "grumpc/gru.hpp"
#include "grumpc/util.hpp"

namespace grumpc {

/// Contraction certificate of the GRU over the unit state/input boxes.
/// delta_iss holds when nu < 1; rho_s is then the one-step contraction rate
/// of ||x_a - x_b||_inf.
struct StabilityCertificate {
  double sigma_bar_z = 0.0;
  double sigma_bar_r = 0.0;
  double phi_bar_h = 0.0;
  double nu = 0.0;
  double rho_s = 0.0;
  VectorXd c_s;  // per constraint row, empty until a constraint matrix is given
  bool delta_iss = false;
};

/// Max absolute row sum of the horizontal stack [W U b].
inline double stacked_inf_norm(const MatrixXd& W, const MatrixXd& U, const VectorXd& b) {
  VectorXd row_sums =
      W.cwiseAbs().rowwise().sum() + U.cwiseAbs().rowwise().sum() + b.cwiseAbs();
  return row_sums.size() == 0 ? 0.0 : row_sums.maxCoeff();
}

inline StabilityCertificate stability_metrics(const GruParams& g) {
  g.validate();
  StabilityCertificate c;
  c.sigma_bar_z = logistic(stacked_inf_norm(g.W_z, g.U_z, g.b_z));
  c.sigma_bar_r = logistic(stacked_inf_norm(g.W_r, g.U_r, g.b_r));
  c.phi_bar_h = std::tanh(stacked_inf_norm(g.W_h, g.U_h, g.b_h));
  const double norm_Uh = induced_inf_norm(g.U_h);
  const double norm_Ur = induced_inf_norm(g.U_r);
  const double norm_Uz = induced_inf_norm(g.U_z);
  c.nu = norm_Uh * (0.25 * norm_Ur + c.sigma_bar_r) +
         0.25 * (1.0 + c.phi_bar_h) / (1.0 - c.sigma_bar_z) * norm_Uz;
  c.rho_s = c.sigma_bar_z + (1.0 - c.sigma_bar_z) * c.nu;
  c.delta_iss = c.nu < 1.0;
  return c;
}

/// Per output-constraint row j, the gain c_{s(j)} = ||(L U_o)_{(j*)}||_inf,
/// read as the induced norm of the 1 x n row, i.e. its absolute sum.
inline VectorXd constraint_gain(const GruParams& g, const MatrixXd& L) {
  require(L.cols() == g.p, "constraint_gain: L columns != p");
  require(L.allFinite(), "constraint_gain: non-finite L");
  MatrixXd LUo = L * g.U_o;
  return LUo.cwiseAbs().rowwise().sum();
}

/// Variant carrying the per-constraint-row gains c_s.
inline StabilityCertificate stability_metrics(const GruParams& g, const MatrixXd& L) {
  StabilityCertificate c = stability_metrics(g);
  c.c_s = constraint_gain(g, L);
  return c;
}

/// rho_s ||x_a - x_b||_inf - ||f(x_a,u) - f(x_b,u)||_inf. Nonnegative (up to
/// rounding) on any certified model.
inline double incremental_contraction_gap(const GruParams& g, const StabilityCertificate& cert,
                                          const VectorXd& x_a, const VectorXd& x_b,
                                          const VectorXd& u) {
  VectorXd fa = gru_step(g, x_a, u);
  VectorXd fb = gru_step(g, x_b, u);
  return cert.rho_s * inf_norm(x_a - x_b) - inf_norm(fa - fb);
}

struct Equilibrium {
  VectorXd x_bar;
  VectorXd u_bar;
  VectorXd y_bar;
  double residual = 0.0;
};

enum class EquilibriumStatus { converged, no_convergence, unreachable };

inline const char* to_string(EquilibriumStatus s) {
  switch (s) {
    case EquilibriumStatus::converged: return "converged";
    case EquilibriumStatus::no_convergence: return "no_convergence";
    case EquilibriumStatus::unreachable: return "unreachable";
  }
  return "unknown";
}

struct EquilibriumResult {
  EquilibriumStatus status = EquilibriumStatus::no_convergence;
  Equilibrium value;

  bool ok() const { return status == EquilibriumStatus::converged; }
};

/// Solves x = f(x,u), U_o x + b_o = y_bar by damped Newton on the joint
/// residual, starting from (0, 0). When m > p the Newton step is the
/// minimum-norm least-squares solution, which keeps the iterate closest to
/// the origin among consistent corrections.
inline EquilibriumResult find_equilibrium(const GruParams& g, const VectorXd& y_bar,
                                          double tolerance = 1e-9, int max_iterations = 200) {
  require(y_bar.size() == g.p, "find_equilibrium: set-point size != p");
  require(y_bar.allFinite(), "find_equilibrium: non-finite set-point");

  const int n = g.n, m = g.m, p = g.p;
  VectorXd x = VectorXd::Zero(n);
  VectorXd u = VectorXd::Zero(m);

  auto residual = [&](const VectorXd& xv, const VectorXd& uv) {
    VectorXd F(n + p);
    F.head(n) = gru_step(g, xv, uv) - xv;
    F.tail(p) = g.U_o * xv + g.b_o - y_bar;
    return F;
  };

  VectorXd F = residual(x, u);
  EquilibriumResult result;
  const double box_tol = 1e-9;

  for (int iter = 0; iter < max_iterations; ++iter) {
    if (inf_norm(F) <= tolerance) {
      if (inf_norm(x) <= 1.0 + box_tol && inf_norm(u) <= 1.0 + box_tol) {
        result.status = EquilibriumStatus::converged;
        result.value.x_bar = x.cwiseMax(-1.0).cwiseMin(1.0);
        result.value.u_bar = u.cwiseMax(-1.0).cwiseMin(1.0);
        result.value.y_bar = y_bar;
        result.value.residual = inf_norm(residual(result.value.x_bar, result.value.u_bar));
        return result;
      }
      result.status = EquilibriumStatus::unreachable;
      return result;
    }

    GruStepCache cache;
    gru_step(g, x, u, &cache);
    MatrixXd df_dx, df_du;
    gru_step_jacobians(g, cache, df_dx, df_du);

    MatrixXd J(n + p, n + m);
    J.topLeftCorner(n, n) = df_dx - MatrixXd::Identity(n, n);
    J.topRightCorner(n, m) = df_du;
    J.bottomLeftCorner(p, n) = g.U_o;
    J.bottomRightCorner(p, m).setZero();

    // Stationarity of ||F||_2^2 without a zero residual: the set-point is
    // not attainable.
    VectorXd grad = J.transpose() * F;
    if (inf_norm(grad) <= tolerance * 1e-3 * std::max(1.0, inf_norm(F))) {
      result.status = EquilibriumStatus::unreachable;
      return result;
    }

    VectorXd step = J.completeOrthogonalDecomposition().solve(-F);
    if (!step.allFinite()) {
      result.status = EquilibriumStatus::no_convergence;
      return result;
    }

    double t = 1.0;
    double f0 = F.squaredNorm();
    bool accepted = false;
    for (int back = 0; back < 60; ++back) {
      VectorXd x_new = x + t * step.head(n);
      VectorXd u_new = u + t * step.tail(m);
      VectorXd F_new = residual(x_new, u_new);
      if (F_new.squaredNorm() < f0 * (1.0 - 1e-4 * t)) {
        x = x_new;
        u = u_new;
        F = F_new;
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) {
      // Descent stalled; treat as stationary if the gradient is tiny.
      result.status = inf_norm(grad) < 1e-6 ? EquilibriumStatus::unreachable
                                            : EquilibriumStatus::no_convergence;
      return result;
    }
  }

  result.status = inf_norm(F) <= tolerance ? EquilibriumStatus::converged
                                           : EquilibriumStatus::no_convergence;
  if (result.status == EquilibriumStatus::converged &&
      (inf_norm(x) > 1.0 + box_tol || inf_norm(u) > 1.0 + box_tol)) {
    result.status = EquilibriumStatus::unreachable;
  }
  if (result.status == EquilibriumStatus::converged) {
    result.value.x_bar = x.cwiseMax(-1.0).cwiseMin(1.0);
    result.value.u_bar = u.cwiseMax(-1.0).cwiseMin(1.0);
    result.value.y_bar = y_bar;
    result.value.residual = inf_norm(residual(result.value.x_bar, result.value.u_bar));
  }
  return result;
}

}  // namespace grumpc

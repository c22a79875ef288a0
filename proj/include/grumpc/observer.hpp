#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <string>

#include "grumpc/gru.hpp"
#include "grumpc/lp.hpp"
#include "grumpc/stability.hpp"
#include "grumpc/util.hpp"

namespace grumpc {

/// Output-injection gains applied inside the update/reset gate preactivations.
struct ObserverGains {
  MatrixXd L_z;  // n x p
  MatrixXd L_r;  // n x p

  static ObserverGains zeros(int n, int p) {
    ObserverGains gains;
    gains.L_z = MatrixXd::Zero(n, p);
    gains.L_r = MatrixXd::Zero(n, p);
    return gains;
  }

  void validate(int n, int p) const {
    require(L_z.rows() == n && L_z.cols() == p, "ObserverGains: L_z must be n x p");
    require(L_r.rows() == n && L_r.cols() == p, "ObserverGains: L_r must be n x p");
    require(L_z.allFinite() && L_r.allFinite(), "ObserverGains: non-finite gains");
  }

  bool is_zero() const { return L_z.isZero(0.0) && L_r.isZero(0.0); }
};

/// Convergence certificate of the observer error dynamics. converging holds
/// when nu_o < 1; rho_o is then the error contraction rate, kappa the gain
/// from measurement noise to the error update, and injection_gain the gain
/// from the current error into the one-step prediction deviation.
struct ObserverCertificate {
  double sigma_bar_z = 0.0;
  double sigma_bar_r = 0.0;
  double phi_bar_h = 0.0;
  double nu_o = 0.0;
  double rho_o = 0.0;
  double kappa = 0.0;
  double injection_gain = 0.0;  // often written L_max
  VectorXd c_o;                 // per constraint row, empty until a constraint matrix is given
  bool converging = false;
};

inline ObserverCertificate observer_metrics(const GruParams& g, const ObserverGains& gains) {
  g.validate();
  gains.validate(g.n, g.p);
  ObserverCertificate c;
  c.sigma_bar_z = logistic(stacked_inf_norm(g.W_z, g.U_z, g.b_z));
  c.sigma_bar_r = logistic(stacked_inf_norm(g.W_r, g.U_r, g.b_r));
  c.phi_bar_h = std::tanh(stacked_inf_norm(g.W_h, g.U_h, g.b_h));
  const double norm_Uh = induced_inf_norm(g.U_h);
  c.nu_o = norm_Uh * (0.25 * induced_inf_norm(g.U_r - gains.L_r * g.U_o) + c.sigma_bar_r) +
           0.25 * (1.0 + c.phi_bar_h) / (1.0 - c.sigma_bar_z) *
               induced_inf_norm(g.U_z - gains.L_z * g.U_o);
  c.rho_o = c.sigma_bar_z + (1.0 - c.sigma_bar_z) * c.nu_o;
  c.kappa = 0.25 * (1.0 + c.phi_bar_h) * induced_inf_norm(gains.L_z) +
            0.25 * c.sigma_bar_z * norm_Uh * induced_inf_norm(gains.L_r);
  c.injection_gain = 0.25 * (1.0 + c.phi_bar_h) * induced_inf_norm(gains.L_z * g.U_o) +
                     0.25 * c.sigma_bar_z * norm_Uh * induced_inf_norm(gains.L_r * g.U_o);
  c.converging = c.nu_o < 1.0;
  return c;
}

/// Variant carrying the per-constraint-row gain c_o = rowwise |L U_o| sums
/// (the same convention as the model-side constraint gain).
inline ObserverCertificate observer_metrics(const GruParams& g, const ObserverGains& gains,
                                            const MatrixXd& L) {
  ObserverCertificate c = observer_metrics(g, gains);
  c.c_o = constraint_gain(g, L);
  return c;
}

/// One observer update from measurement y. The innovation enters the two
/// gate preactivations; the candidate state uses the corrected reset gate
/// with the current estimate.
inline VectorXd observer_step(const GruParams& g, const ObserverGains& gains,
                              const VectorXd& x_hat, const VectorXd& u, const VectorXd& y,
                              GruStepCache* cache = nullptr) {
  check_step_inputs(g, x_hat, u);
  require(y.size() == g.p, "observer_step: measurement size != p");
  require(y.allFinite(), "observer_step: non-finite measurement");

  VectorXd innovation = y - (g.U_o * x_hat + g.b_o);
  VectorXd z = logistic(g.W_z * u + g.U_z * x_hat + g.b_z + gains.L_z * innovation);
  VectorXd r = logistic(g.W_r * u + g.U_r * x_hat + g.b_r + gains.L_r * innovation);
  VectorXd rx = r.cwiseProduct(x_hat);
  VectorXd h = tanh_vec(g.W_h * u + g.U_h * rx + g.b_h);
  VectorXd x_next = z.cwiseProduct(x_hat) + (VectorXd::Ones(g.n) - z).cwiseProduct(h);
  if (cache != nullptr) {
    cache->x = x_hat;
    cache->u = u;
    cache->z = z;
    cache->r = r;
    cache->rx = rx;
    cache->h = h;
  }
  return x_next;
}

/// rho_o ||x - x_hat|| + kappa ||w_y|| - ||x+ - x_hat+||, nonnegative (up to
/// rounding) whenever the certificate holds: the plant here is the model
/// itself driven by the same input, measured with noise w_y.
inline double observer_decrease_gap(const GruParams& g, const ObserverGains& gains,
                                    const ObserverCertificate& cert, const VectorXd& x,
                                    const VectorXd& x_hat, const VectorXd& u,
                                    const VectorXd& w_y) {
  VectorXd y = g.U_o * x + g.b_o + w_y;
  VectorXd x_next = gru_step(g, x, u);
  VectorXd x_hat_next = observer_step(g, gains, x_hat, u, y);
  return cert.rho_o * inf_norm(x - x_hat) + cert.kappa * inf_norm(w_y) -
         inf_norm(x_next - x_hat_next);
}

/// injection_gain ||x - x_hat|| + kappa ||w_y|| - ||x_hat+ - f(x_hat, u)||:
/// how far one corrected update can drift from the open-loop model step.
inline double prediction_deviation_gap(const GruParams& g, const ObserverGains& gains,
                                       const ObserverCertificate& cert, const VectorXd& x,
                                       const VectorXd& x_hat, const VectorXd& u,
                                       const VectorXd& w_y) {
  VectorXd y = g.U_o * x + g.b_o + w_y;
  VectorXd corrected = observer_step(g, gains, x_hat, u, y);
  VectorXd open_loop = gru_step(g, x_hat, u);
  return cert.injection_gain * inf_norm(x - x_hat) + cert.kappa * inf_norm(w_y) -
         inf_norm(corrected - open_loop);
}

enum class ObserverMode { open_loop, min_nu_o };

inline const char* to_string(ObserverMode m) {
  switch (m) {
    case ObserverMode::open_loop: return "open_loop";
    case ObserverMode::min_nu_o: return "min_nu_o";
  }
  return "unknown";
}

struct GainSynthesisResult {
  bool ok = false;
  ObserverMode mode = ObserverMode::open_loop;
  ObserverGains gains;
  ObserverCertificate certificate;
  std::string message;
};

/// Gain selection. open_loop returns zero gains (the observer degenerates to
/// a model simulation). min_nu_o minimises nu_o by shrinking the two induced
/// norms ||U_z - L_z U_o||, ||U_r - L_r U_o|| independently; each row is a
/// separate L1 fit of the weight row onto the rows of U_o. Falls back to
/// open_loop if any LP fails.
inline GainSynthesisResult synthesize_gains(const GruParams& g, ObserverMode mode) {
  g.validate();
  GainSynthesisResult result;
  result.mode = mode;
  result.gains = ObserverGains::zeros(g.n, g.p);

  if (mode == ObserverMode::min_nu_o) {
    bool all_ok = true;
    for (int j = 0; j < g.n && all_ok; ++j) {
      L1FitResult fit_z = l1_row_fit(g.U_z.row(j).transpose(), g.U_o);
      L1FitResult fit_r = l1_row_fit(g.U_r.row(j).transpose(), g.U_o);
      if (!fit_z.ok || !fit_r.ok) {
        all_ok = false;
        break;
      }
      result.gains.L_z.row(j) = fit_z.coeffs.transpose();
      result.gains.L_r.row(j) = fit_r.coeffs.transpose();
    }
    if (!all_ok) {
      result.mode = ObserverMode::open_loop;
      result.gains = ObserverGains::zeros(g.n, g.p);
      result.message = "gain LP failed; fell back to open_loop (zero gains)";
    }
  }

  result.certificate = observer_metrics(g, result.gains);
  result.ok = result.certificate.converging;
  if (!result.ok && result.message.empty()) {
    result.message = "synthesized gains do not certify convergence (nu_o >= 1)";
  }
  return result;
}

}  // namespace grumpc

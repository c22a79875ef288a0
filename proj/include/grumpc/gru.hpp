#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "grumpc/util.hpp"

namespace grumpc {

/// Per-channel affine map between physical units and the normalized range
/// [-1, 1]: normalized = (physical - offset) / half_range.
struct Scaler {
  VectorXd offset;
  VectorXd half_range;

  static Scaler identity(Eigen::Index channels) {
    Scaler s;
    s.offset = VectorXd::Zero(channels);
    s.half_range = VectorXd::Ones(channels);
    return s;
  }

  /// Maps [lo, hi] per channel onto [-1, 1].
  static Scaler from_bounds(const VectorXd& lo, const VectorXd& hi) {
    require(lo.size() == hi.size(), "Scaler bounds size mismatch");
    Scaler s;
    s.offset = 0.5 * (lo + hi);
    s.half_range = 0.5 * (hi - lo);
    s.validate();
    return s;
  }

  Eigen::Index channels() const { return offset.size(); }

  void validate() const {
    require(offset.size() == half_range.size(), "Scaler field size mismatch");
    require(offset.allFinite() && half_range.allFinite(), "Scaler entries must be finite");
    require((half_range.array() > 0.0).all(), "Scaler half_range must be positive");
  }

  VectorXd normalize(const VectorXd& physical) const {
    require(physical.size() == channels(), "Scaler channel count mismatch");
    return (physical - offset).cwiseQuotient(half_range);
  }

  VectorXd denormalize(const VectorXd& normalized) const {
    require(normalized.size() == channels(), "Scaler channel count mismatch");
    return offset + half_range.cwiseProduct(normalized);
  }
};

/// Weights of a single-layer GRU state-space model
///   x+ = z.x + (1-z).h
///   z  = sigma(W_z u + U_z x + b_z)
///   r  = sigma(W_r u + U_r x + b_r)
///   h  = tanh(W_h u + U_h (r.x) + b_h)
///   xi = U_o x + b_o
/// together with the scalers that map plant units onto the normalized
/// ranges the model operates in.
struct GruParams {
  int n = 0;  // state units
  int m = 0;  // inputs
  int p = 0;  // outputs

  MatrixXd W_z, W_r, W_h;  // n x m
  MatrixXd U_z, U_r, U_h;  // n x n
  MatrixXd U_o;            // p x n
  VectorXd b_z, b_r, b_h;  // n
  VectorXd b_o;            // p

  Scaler input_scaler;
  Scaler output_scaler;

  static GruParams zeros(int n, int m, int p) {
    require(n >= 1 && m >= 1 && p >= 1, "GruParams dimensions must be >= 1");
    GruParams g;
    g.n = n;
    g.m = m;
    g.p = p;
    g.W_z = MatrixXd::Zero(n, m);
    g.W_r = MatrixXd::Zero(n, m);
    g.W_h = MatrixXd::Zero(n, m);
    g.U_z = MatrixXd::Zero(n, n);
    g.U_r = MatrixXd::Zero(n, n);
    g.U_h = MatrixXd::Zero(n, n);
    g.U_o = MatrixXd::Zero(p, n);
    g.b_z = VectorXd::Zero(n);
    g.b_r = VectorXd::Zero(n);
    g.b_h = VectorXd::Zero(n);
    g.b_o = VectorXd::Zero(p);
    g.input_scaler = Scaler::identity(m);
    g.output_scaler = Scaler::identity(p);
    return g;
  }

  void validate() const {
    require(n >= 1 && m >= 1 && p >= 1, "GruParams dimensions must be >= 1");
    auto check = [](const MatrixXd& M, int rows, int cols, const char* name) {
      require(M.rows() == rows && M.cols() == cols,
              std::string("GruParams: bad shape for ") + name);
      require(M.allFinite(), std::string("GruParams: non-finite entries in ") + name);
    };
    check(W_z, n, m, "W_z");
    check(W_r, n, m, "W_r");
    check(W_h, n, m, "W_h");
    check(U_z, n, n, "U_z");
    check(U_r, n, n, "U_r");
    check(U_h, n, n, "U_h");
    check(U_o, p, n, "U_o");
    require(b_z.size() == n && b_r.size() == n && b_h.size() == n && b_o.size() == p,
            "GruParams: bias size mismatch");
    require(b_z.allFinite() && b_r.allFinite() && b_h.allFinite() && b_o.allFinite(),
            "GruParams: non-finite bias");
    require(input_scaler.channels() == m, "GruParams: input scaler channels != m");
    require(output_scaler.channels() == p, "GruParams: output scaler channels != p");
    input_scaler.validate();
    output_scaler.validate();
  }

  /// In-place weight update theta += delta, used by the optimizer.
  template <typename Grads>
  void apply_update(const Grads& d) {
    W_z += d.W_z;
    W_r += d.W_r;
    W_h += d.W_h;
    U_z += d.U_z;
    U_r += d.U_r;
    U_h += d.U_h;
    U_o += d.U_o;
    b_z += d.b_z;
    b_r += d.b_r;
    b_h += d.b_h;
    b_o += d.b_o;
  }
};

/// Intermediate quantities of one forward step, kept for reverse-mode
/// accumulation and Jacobian assembly.
struct GruStepCache {
  VectorXd x, u;  // step inputs
  VectorXd z, r, h;
  VectorXd rx;  // r.x, the argument fed through U_h
};

inline void check_step_inputs(const GruParams& g, const VectorXd& x, const VectorXd& u) {
  require(x.size() == g.n, "gru_step: state size != n");
  require(u.size() == g.m, "gru_step: input size != m");
  require(x.allFinite(), "gru_step: non-finite state");
  require(u.allFinite(), "gru_step: non-finite input");
}

inline VectorXd gru_step(const GruParams& g, const VectorXd& x, const VectorXd& u,
                         GruStepCache* cache = nullptr) {
  check_step_inputs(g, x, u);
  VectorXd z = logistic(g.W_z * u + g.U_z * x + g.b_z);
  VectorXd r = logistic(g.W_r * u + g.U_r * x + g.b_r);
  VectorXd rx = r.cwiseProduct(x);
  VectorXd h = tanh_vec(g.W_h * u + g.U_h * rx + g.b_h);
  VectorXd x_next = z.cwiseProduct(x) + (VectorXd::Ones(g.n) - z).cwiseProduct(h);
  if (cache) {
    cache->x = x;
    cache->u = u;
    cache->z = std::move(z);
    cache->r = std::move(r);
    cache->h = std::move(h);
    cache->rx = std::move(rx);
  }
  return x_next;
}

inline VectorXd gru_output(const GruParams& g, const VectorXd& x) {
  require(x.size() == g.n, "gru_output: state size != n");
  return g.U_o * x + g.b_o;
}

struct GruTrajectory {
  std::vector<VectorXd> states;   // x_1 ... x_T (state after each applied input)
  std::vector<VectorXd> outputs;  // xi_1 ... xi_T
};

/// Iterates gru_step/gru_output over an input sequence. The returned pair at
/// index k is (x_{k+1}, xi_{k+1}) after applying u_seq[k].
inline GruTrajectory gru_simulate(const GruParams& g, const VectorXd& x0,
                                  const std::vector<VectorXd>& u_seq) {
  GruTrajectory traj;
  traj.states.reserve(u_seq.size());
  traj.outputs.reserve(u_seq.size());
  VectorXd x = x0;
  for (std::size_t k = 0; k < u_seq.size(); ++k) {
    try {
      x = gru_step(g, x, u_seq[k]);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("gru_simulate at step " + std::to_string(k) + ": " + e.what());
    }
    traj.states.push_back(x);
    traj.outputs.push_back(gru_output(g, x));
  }
  return traj;
}

/// Gradient accumulator with the same shapes as the trainable weights.
struct GruParamGrads {
  MatrixXd W_z, W_r, W_h, U_z, U_r, U_h, U_o;
  VectorXd b_z, b_r, b_h, b_o;

  static GruParamGrads zeros(int n, int m, int p) {
    GruParamGrads d;
    d.W_z = MatrixXd::Zero(n, m);
    d.W_r = MatrixXd::Zero(n, m);
    d.W_h = MatrixXd::Zero(n, m);
    d.U_z = MatrixXd::Zero(n, n);
    d.U_r = MatrixXd::Zero(n, n);
    d.U_h = MatrixXd::Zero(n, n);
    d.U_o = MatrixXd::Zero(p, n);
    d.b_z = VectorXd::Zero(n);
    d.b_r = VectorXd::Zero(n);
    d.b_h = VectorXd::Zero(n);
    d.b_o = VectorXd::Zero(p);
    return d;
  }

  static GruParamGrads zeros(const GruParams& g) { return zeros(g.n, g.m, g.p); }

  void add_scaled(const GruParamGrads& o, double a) {
    W_z += a * o.W_z;
    W_r += a * o.W_r;
    W_h += a * o.W_h;
    U_z += a * o.U_z;
    U_r += a * o.U_r;
    U_h += a * o.U_h;
    U_o += a * o.U_o;
    b_z += a * o.b_z;
    b_r += a * o.b_r;
    b_h += a * o.b_h;
    b_o += a * o.b_o;
  }

  void scale(double a) {
    W_z *= a;
    W_r *= a;
    W_h *= a;
    U_z *= a;
    U_r *= a;
    U_h *= a;
    U_o *= a;
    b_z *= a;
    b_r *= a;
    b_h *= a;
    b_o *= a;
  }

  double squared_norm() const {
    return W_z.squaredNorm() + W_r.squaredNorm() + W_h.squaredNorm() + U_z.squaredNorm() +
           U_r.squaredNorm() + U_h.squaredNorm() + U_o.squaredNorm() + b_z.squaredNorm() +
           b_r.squaredNorm() + b_h.squaredNorm() + b_o.squaredNorm();
  }
};

/// Reverse-mode step: given dL/dx+, accumulates dL/dx into g_x, dL/du into
/// g_u, and (when requested) the weight gradients. g_x and g_u must be
/// pre-sized; contributions are added, not assigned.
inline void gru_step_backward(const GruParams& g, const GruStepCache& c,
                              const VectorXd& grad_x_next, VectorXd& g_x, VectorXd& g_u,
                              GruParamGrads* g_params = nullptr) {
  const VectorXd one = VectorXd::Ones(g.n);
  VectorXd gz = grad_x_next.cwiseProduct(c.x - c.h);
  VectorXd gh = grad_x_next.cwiseProduct(one - c.z);
  g_x += grad_x_next.cwiseProduct(c.z);

  // h = tanh(W_h u + U_h (r.x) + b_h)
  VectorXd gah = gh.cwiseProduct(one - c.h.cwiseProduct(c.h));
  g_u += g.W_h.transpose() * gah;
  VectorXd gs = g.U_h.transpose() * gah;
  g_x += gs.cwiseProduct(c.r);
  VectorXd gr = gs.cwiseProduct(c.x);

  // r = sigma(W_r u + U_r x + b_r)
  VectorXd gar = gr.cwiseProduct(c.r.cwiseProduct(one - c.r));
  g_u += g.W_r.transpose() * gar;
  g_x += g.U_r.transpose() * gar;

  // z = sigma(W_z u + U_z x + b_z)
  VectorXd gaz = gz.cwiseProduct(c.z.cwiseProduct(one - c.z));
  g_u += g.W_z.transpose() * gaz;
  g_x += g.U_z.transpose() * gaz;

  if (g_params) {
    g_params->W_h += gah * c.u.transpose();
    g_params->U_h += gah * c.rx.transpose();
    g_params->b_h += gah;
    g_params->W_r += gar * c.u.transpose();
    g_params->U_r += gar * c.x.transpose();
    g_params->b_r += gar;
    g_params->W_z += gaz * c.u.transpose();
    g_params->U_z += gaz * c.x.transpose();
    g_params->b_z += gaz;
  }
}

/// Reverse-mode output map: xi = U_o x + b_o.
inline void gru_output_backward(const GruParams& g, const VectorXd& x, const VectorXd& grad_xi,
                                VectorXd& g_x, GruParamGrads* g_params = nullptr) {
  g_x += g.U_o.transpose() * grad_xi;
  if (g_params) {
    g_params->U_o += grad_xi * x.transpose();
    g_params->b_o += grad_xi;
  }
}

/// Dense Jacobians of the step map, evaluated from a forward cache.
inline void gru_step_jacobians(const GruParams& g, const GruStepCache& c, MatrixXd& d_dx,
                               MatrixXd& d_du) {
  const VectorXd one = VectorXd::Ones(g.n);
  const VectorXd dz = c.z.cwiseProduct(one - c.z);
  const VectorXd dr = c.r.cwiseProduct(one - c.r);
  const VectorXd dh = one - c.h.cwiseProduct(c.h);

  MatrixXd dz_dx = dz.asDiagonal() * g.U_z;
  MatrixXd dz_du = dz.asDiagonal() * g.W_z;
  MatrixXd dr_dx = dr.asDiagonal() * g.U_r;
  MatrixXd dr_du = dr.asDiagonal() * g.W_r;

  // s = r.x
  MatrixXd ds_dx = MatrixXd(c.r.asDiagonal()) + c.x.asDiagonal() * dr_dx;
  MatrixXd ds_du = c.x.asDiagonal() * dr_du;

  MatrixXd dh_dx = dh.asDiagonal() * (g.U_h * ds_dx);
  MatrixXd dh_du = dh.asDiagonal() * (g.W_h + g.U_h * ds_du);

  const VectorXd xmh = c.x - c.h;
  d_dx = MatrixXd(c.z.asDiagonal()) + xmh.asDiagonal() * dz_dx +
         (one - c.z).asDiagonal() * dh_dx;
  d_du = xmh.asDiagonal() * dz_du + (one - c.z).asDiagonal() * dh_du;
}

}  // namespace grumpc

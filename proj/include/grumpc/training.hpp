#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "grumpc/gru.hpp"
#include "grumpc/stability.hpp"
#include "grumpc/util.hpp"

namespace grumpc {

/// Time series in physical units, before normalization.
struct RawSeries {
  std::vector<VectorXd> inputs;
  std::vector<VectorXd> outputs;

  void validate() const {
    require(!inputs.empty() && inputs.size() == outputs.size(),
            "RawSeries: inputs and outputs must be nonempty and aligned");
  }
};

struct SplitSpec {
  int train = 0;
  int validation = 0;
  int test = 0;
};

/// Normalized, chronologically split series with the training span chunked
/// into equal-length subsequences (leftover samples at the end of the
/// training span are dropped).
struct Dataset {
  std::vector<VectorXd> inputs;   // normalized, full series
  std::vector<VectorXd> outputs;  // normalized, full series
  int train_len = 0;
  int validation_len = 0;
  int test_len = 0;
  int subsequence_length = 0;
  Scaler input_scaler;
  Scaler output_scaler;

  int subsequences() const { return train_len / subsequence_length; }
  int validation_start() const { return train_len; }
  int test_start() const { return train_len + validation_len; }
};

inline Dataset prepare_dataset(const RawSeries& raw, const Scaler& input_scaler,
                               const Scaler& output_scaler, const SplitSpec& split,
                               int subsequence_length) {
  raw.validate();
  input_scaler.validate();
  output_scaler.validate();
  require(split.train >= 1 && split.validation >= 0 && split.test >= 0,
          "prepare_dataset: bad split sizes");
  require(subsequence_length >= 2, "prepare_dataset: subsequence length too short");
  require(split.train >= subsequence_length,
          "prepare_dataset: training split shorter than one subsequence");
  const int total = split.train + split.validation + split.test;
  require(static_cast<int>(raw.inputs.size()) >= total, "prepare_dataset: insufficient data");

  Dataset d;
  d.train_len = split.train;
  d.validation_len = split.validation;
  d.test_len = split.test;
  d.subsequence_length = subsequence_length;
  d.input_scaler = input_scaler;
  d.output_scaler = output_scaler;
  d.inputs.reserve(total);
  d.outputs.reserve(total);
  for (int k = 0; k < total; ++k) {
    d.inputs.push_back(input_scaler.normalize(raw.inputs[k]));
    d.outputs.push_back(output_scaler.normalize(raw.outputs[k]));
  }
  return d;
}

/// Squared-hinge penalty enforcing the contraction condition with a margin:
/// max(0, nu - (1 - margin))^2.
inline double nu_penalty(const GruParams& g, double margin) {
  require(margin > 0.0 && margin < 1.0, "nu_penalty: margin must lie in (0,1)");
  const double nu = stability_metrics(g).nu;
  const double excess = std::max(0.0, nu - (1.0 - margin));
  return excess * excess;
}

namespace detail {

/// Subgradient of the max absolute row sum of [W U b] with respect to each
/// block, selecting the first maximal row. Adds scale * d(norm)/d(block).
inline void add_stacked_norm_subgradient(const MatrixXd& W, const MatrixXd& U, const VectorXd& b,
                                         double scale, MatrixXd& gW, MatrixXd& gU, VectorXd& gb) {
  VectorXd row_sums = W.cwiseAbs().rowwise().sum() + U.cwiseAbs().rowwise().sum() + b.cwiseAbs();
  int j = 0;
  row_sums.maxCoeff(&j);
  auto sign = [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); };
  for (int k = 0; k < W.cols(); ++k) gW(j, k) += scale * sign(W(j, k));
  for (int k = 0; k < U.cols(); ++k) gU(j, k) += scale * sign(U(j, k));
  gb(j) += scale * sign(b(j));
}

/// Subgradient of the induced infinity norm (max abs row sum), first-row
/// tie-break.
inline void add_inf_norm_subgradient(const MatrixXd& M, double scale, MatrixXd& gM) {
  VectorXd row_sums = M.cwiseAbs().rowwise().sum();
  int j = 0;
  row_sums.maxCoeff(&j);
  for (int k = 0; k < M.cols(); ++k) {
    double v = M(j, k);
    gM(j, k) += scale * (v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0));
  }
}

}  // namespace detail

/// Subgradient of nu_penalty with respect to every weight block, chained
/// through the infinity norms by max-row selection (first-index tie-break).
inline GruParamGrads nu_penalty_gradient(const GruParams& g, double margin) {
  require(margin > 0.0 && margin < 1.0, "nu_penalty_gradient: margin must lie in (0,1)");
  GruParamGrads grads = GruParamGrads::zeros(g.n, g.m, g.p);
  StabilityCertificate cert = stability_metrics(g);
  const double excess = std::max(0.0, cert.nu - (1.0 - margin));
  if (excess == 0.0) return grads;
  const double d_nu = 2.0 * excess;

  const double norm_Uh = induced_inf_norm(g.U_h);
  const double norm_Ur = induced_inf_norm(g.U_r);
  const double norm_Uz = induced_inf_norm(g.U_z);
  const double one_minus_sz = 1.0 - cert.sigma_bar_z;

  // nu = ||U_h|| (0.25 ||U_r|| + sigma_r) + 0.25 (1 + phi_h)/(1 - sigma_z) ||U_z||
  detail::add_inf_norm_subgradient(g.U_h, d_nu * (0.25 * norm_Ur + cert.sigma_bar_r), grads.U_h);
  detail::add_inf_norm_subgradient(g.U_r, d_nu * 0.25 * norm_Uh, grads.U_r);
  detail::add_inf_norm_subgradient(g.U_z, d_nu * 0.25 * (1.0 + cert.phi_bar_h) / one_minus_sz,
                                   grads.U_z);
  // sigma_r enters linearly with coefficient ||U_h||.
  const double d_sr = d_nu * norm_Uh * cert.sigma_bar_r * (1.0 - cert.sigma_bar_r);
  detail::add_stacked_norm_subgradient(g.W_r, g.U_r, g.b_r, d_sr, grads.W_r, grads.U_r, grads.b_r);
  // phi_h enters through the U_z coefficient.
  const double d_sh = d_nu * 0.25 * norm_Uz / one_minus_sz *
                      (1.0 - cert.phi_bar_h * cert.phi_bar_h);
  detail::add_stacked_norm_subgradient(g.W_h, g.U_h, g.b_h, d_sh, grads.W_h, grads.U_h, grads.b_h);
  // sigma_z enters through the denominator.
  const double d_sz = d_nu * 0.25 * (1.0 + cert.phi_bar_h) * norm_Uz /
                      (one_minus_sz * one_minus_sz) * cert.sigma_bar_z * one_minus_sz;
  detail::add_stacked_norm_subgradient(g.W_z, g.U_z, g.b_z, d_sz, grads.W_z, grads.U_z, grads.b_z);
  return grads;
}

/// Free-run (simulation) error of the model on a span of the dataset:
/// rollout from zero initial state, the first `washout` steps excluded.
struct SimulationError {
  double mse = 0.0;      // mean over counted steps and channels
  double max_abs = 0.0;  // max over counted steps and channels
  std::vector<VectorXd> predicted;  // counted span only (after washout)
  std::vector<VectorXd> reference;
};

inline SimulationError simulation_error(const GruParams& g, const Dataset& d, int start, int len,
                                        int washout, bool keep_series = false) {
  require(start >= 0 && len >= 2 && start + len <= static_cast<int>(d.inputs.size()),
          "simulation_error: span out of range");
  require(washout >= 0 && washout < len, "simulation_error: washout swallows the span");
  SimulationError err;
  VectorXd x = VectorXd::Zero(g.n);
  double sum_sq = 0.0;
  long count = 0;
  for (int k = 0; k < len; ++k) {
    VectorXd xi = gru_output(g, x);
    if (k >= washout) {
      VectorXd diff = xi - d.outputs[start + k];
      sum_sq += diff.squaredNorm();
      err.max_abs = std::max(err.max_abs, inf_norm(diff));
      count += diff.size();
      if (keep_series) {
        err.predicted.push_back(xi);
        err.reference.push_back(d.outputs[start + k]);
      }
    }
    x = gru_step(g, x, d.inputs[start + k]);
  }
  err.mse = sum_sq / static_cast<double>(count);
  return err;
}

/// Per-channel FIT percentage: 100 (1 - ||y - xi||_2 / ||y - y_avg||_2).
/// A constant reference channel has no defined FIT and reports NaN.
inline VectorXd fit_index(const std::vector<VectorXd>& y, const std::vector<VectorXd>& xi) {
  require(y.size() == xi.size() && y.size() >= 2, "fit_index: need aligned series of length >= 2");
  const int p = static_cast<int>(y.front().size());
  VectorXd mean = VectorXd::Zero(p);
  for (const VectorXd& v : y) mean += v;
  mean /= static_cast<double>(y.size());
  VectorXd err_sq = VectorXd::Zero(p), dev_sq = VectorXd::Zero(p);
  for (size_t k = 0; k < y.size(); ++k) {
    require(y[k].size() == p && xi[k].size() == p, "fit_index: channel count varies");
    err_sq += (y[k] - xi[k]).cwiseAbs2();
    dev_sq += (y[k] - mean).cwiseAbs2();
  }
  VectorXd fit(p);
  for (int c = 0; c < p; ++c) {
    fit(c) = dev_sq(c) == 0.0 ? std::numeric_limits<double>::quiet_NaN()
                              : 100.0 * (1.0 - std::sqrt(err_sq(c)) / std::sqrt(dev_sq(c)));
  }
  return fit;
}

/// Bound on the output discrepancy used by the tightening: the maximum
/// absolute free-run error on the test split, normalized units.
inline double estimate_w_bar_y(const GruParams& g, const Dataset& d, int washout) {
  require(d.test_len >= 2, "estimate_w_bar_y: empty test split");
  return simulation_error(g, d, d.test_start(), d.test_len, washout).max_abs;
}

struct TrainConfig {
  int hidden = 8;  // n
  int subsequence_length = 500;
  int batch_size = 5;
  double learning_rate = 0.05;
  int epochs = 100;
  int washout = 50;
  double penalty_weight = 1.0;
  double penalty_margin = 0.05;
  double momentum = 0.0;
  double clip_norm = 1.0;
  double init_scale = 0.4;  // stacked row sums start near this value
  std::uint64_t seed = 1;

  void validate() const {
    require(hidden >= 1, "TrainConfig: hidden size must be positive");
    require(subsequence_length >= 2, "TrainConfig: subsequence length too short");
    require(batch_size >= 1, "TrainConfig: batch size must be positive");
    require(learning_rate > 0.0, "TrainConfig: learning rate must be positive");
    require(epochs >= 1, "TrainConfig: epoch budget must be positive");
    require(washout >= 0 && washout < subsequence_length, "TrainConfig: washout too long");
    require(penalty_weight >= 0.0, "TrainConfig: negative penalty weight");
    require(penalty_margin > 0.0 && penalty_margin < 1.0, "TrainConfig: margin must lie in (0,1)");
    require(momentum >= 0.0 && momentum < 1.0, "TrainConfig: momentum must lie in [0,1)");
    require(clip_norm > 0.0, "TrainConfig: clip norm must be positive");
    require(init_scale > 0.0, "TrainConfig: init scale must be positive");
  }
};

struct TrainReport {
  std::vector<double> train_loss;       // per epoch, penalty included
  std::vector<double> validation_loss;  // per epoch, simulation MSE
  std::vector<double> nu_history;       // per epoch
  StabilityCertificate final_certificate;
  bool certified = false;
  bool diverged = false;
  int epochs_run = 0;
};

namespace detail {

/// BPTT gradient of the free-run MSE of one subsequence (zero initial
/// state, washout excluded); adds scale * d(mse)/d(params) into grads and
/// returns the subsequence's own MSE.
inline double subsequence_gradient(const GruParams& g, const Dataset& d, int start, int len,
                                   int washout, double scale, GruParamGrads& grads) {
  std::vector<GruStepCache> caches(len);
  std::vector<VectorXd> states(len);  // state entering step k
  VectorXd x = VectorXd::Zero(g.n);
  std::vector<VectorXd> residuals(len);
  const long count = static_cast<long>(len - washout) * g.p;
  double sum_sq = 0.0;
  for (int k = 0; k < len; ++k) {
    states[k] = x;
    if (k >= washout) {
      residuals[k] = gru_output(g, x) - d.outputs[start + k];
      sum_sq += residuals[k].squaredNorm();
    }
    x = gru_step(g, x, d.inputs[start + k], &caches[k]);
  }
  const double weight = scale * 2.0 / static_cast<double>(count);
  VectorXd g_x = VectorXd::Zero(g.n);
  for (int k = len - 1; k >= 0; --k) {
    VectorXd g_x_prev = VectorXd::Zero(g.n);
    VectorXd g_u = VectorXd::Zero(g.m);
    gru_step_backward(g, caches[k], g_x, g_x_prev, g_u, &grads);
    if (k >= washout) gru_output_backward(g, states[k], weight * residuals[k], g_x_prev, &grads);
    g_x = g_x_prev;
  }
  return sum_sq / static_cast<double>(count);
}

}  // namespace detail

/// Mini-batch gradient descent on free-run MSE + penalty_weight *
/// nu_penalty, deterministic per seed. On divergence (non-finite loss) the
/// last finite epoch's weights are returned and the report says so.
inline GruParams train_gru(const Dataset& d, const TrainConfig& cfg, TrainReport* report = nullptr) {
  cfg.validate();
  require(d.subsequence_length == cfg.subsequence_length,
          "train_gru: dataset prepared with a different subsequence length");
  const int n_sub = d.subsequences();
  require(n_sub >= 1, "train_gru: no training subsequences");
  const int m = static_cast<int>(d.inputs.front().size());
  const int p = static_cast<int>(d.outputs.front().size());
  const int n = cfg.hidden;

  Lcg64 rng(cfg.seed);
  GruParams g = GruParams::zeros(n, m, p);
  g.input_scaler = d.input_scaler;
  g.output_scaler = d.output_scaler;
  // Row sums of [W U b] start near init_scale, so the model is certified
  // from the first step and the penalty only needs to keep it that way.
  const double r = cfg.init_scale / static_cast<double>(m + n);
  auto fill = [&](MatrixXd& M) {
    for (int i = 0; i < M.rows(); ++i)
      for (int j = 0; j < M.cols(); ++j) M(i, j) = rng.uniform(-r, r);
  };
  fill(g.W_z);
  fill(g.U_z);
  fill(g.W_r);
  fill(g.U_r);
  fill(g.W_h);
  fill(g.U_h);
  const double r_out = 1.0 / std::sqrt(static_cast<double>(n));
  for (int i = 0; i < p; ++i)
    for (int j = 0; j < n; ++j) g.U_o(i, j) = rng.uniform(-r_out, r_out);

  GruParamGrads velocity = GruParamGrads::zeros(n, m, p);
  GruParams last_finite = g;
  TrainReport local_report;
  TrainReport& rep = report != nullptr ? *report : local_report;

  std::vector<int> order(n_sub);
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Deterministic Fisher-Yates reshuffle per epoch.
    for (int i = n_sub - 1; i > 0; --i) {
      int j = static_cast<int>(rng.next_index(static_cast<std::uint32_t>(i + 1)));
      std::swap(order[i], order[j]);
    }

    double epoch_loss = 0.0;
    int batches = 0;
    for (int b0 = 0; b0 < n_sub; b0 += cfg.batch_size) {
      const int batch = std::min(cfg.batch_size, n_sub - b0);
      GruParamGrads grads = GruParamGrads::zeros(n, m, p);
      double batch_mse = 0.0;
      for (int k = 0; k < batch; ++k) {
        const int start = order[b0 + k] * cfg.subsequence_length;
        batch_mse += detail::subsequence_gradient(g, d, start, cfg.subsequence_length,
                                                  cfg.washout, 1.0 / batch, grads);
      }
      batch_mse /= batch;
      const double penalty = nu_penalty(g, cfg.penalty_margin);
      if (cfg.penalty_weight > 0.0) {
        GruParamGrads pen = nu_penalty_gradient(g, cfg.penalty_margin);
        grads.add_scaled(pen, cfg.penalty_weight);
      }
      const double loss = batch_mse + cfg.penalty_weight * penalty;
      if (!std::isfinite(loss)) {
        rep.diverged = true;
        rep.epochs_run = epoch;
        rep.final_certificate = stability_metrics(last_finite);
        rep.certified = rep.final_certificate.delta_iss;
        return last_finite;
      }
      epoch_loss += loss;
      ++batches;

      const double grad_norm = std::sqrt(grads.squared_norm());
      if (grad_norm > cfg.clip_norm) grads.scale(cfg.clip_norm / grad_norm);
      velocity.scale(cfg.momentum);
      velocity.add_scaled(grads, -cfg.learning_rate);
      g.apply_update(velocity);
    }

    epoch_loss /= batches;
    rep.train_loss.push_back(epoch_loss);
    double val = d.validation_len >= 2
                     ? simulation_error(g, d, d.validation_start(), d.validation_len, cfg.washout).mse
                     : epoch_loss;
    rep.validation_loss.push_back(val);
    rep.nu_history.push_back(stability_metrics(g).nu);
    if (std::isfinite(epoch_loss) && std::isfinite(val)) last_finite = g;
    rep.epochs_run = epoch + 1;
  }

  rep.final_certificate = stability_metrics(g);
  rep.certified = rep.final_certificate.delta_iss;
  return g;
}

}  // namespace grumpc

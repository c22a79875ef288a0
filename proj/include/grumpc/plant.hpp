#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <vector>

#include "grumpc/util.hpp"

namespace grumpc {

/// Four-tank benchmark: two pumped inflows split among four coupled tanks;
/// the controlled outputs are the two lower-tank levels. Parameter values
/// are externally sourced defaults, configurable per experiment.
struct FourTankParams {
  double a1 = 1.310e-4;  // outlet cross-sections, m^2
  double a2 = 1.507e-4;
  double a3 = 9.267e-5;
  double a4 = 8.816e-5;
  double S = 0.06;  // tank cross-section, m^2
  double gamma_a = 0.3;
  double gamma_b = 0.4;
  double g = 9.81;
  double q_a_max = 9.05e-4;  // inlet flow bounds, m^3/s
  double q_b_max = 11.1e-4;
  double level_max = 2.0;  // controlled-level bound, m

  void validate() const {
    require(a1 > 0 && a2 > 0 && a3 > 0 && a4 > 0 && S > 0, "FourTankParams: areas must be positive");
    require(gamma_a > 0 && gamma_a < 1 && gamma_b > 0 && gamma_b < 1,
            "FourTankParams: valve splits must lie in (0,1)");
    require(g > 0, "FourTankParams: gravity must be positive");
    require(q_a_max > 0 && q_b_max > 0 && level_max > 0, "FourTankParams: bounds must be positive");
  }
};

inline VectorXd four_tank_derivative(const VectorXd& h, double q_a, double q_b,
                                     const FourTankParams& p) {
  require(h.size() == 4, "four_tank_derivative: state must have 4 levels");
  require((h.array() >= 0.0).all(), "four_tank_derivative: negative level");
  require(q_a >= 0.0 && q_b >= 0.0, "four_tank_derivative: negative flow");
  auto outflow = [&](double a, double level) { return a * std::sqrt(2.0 * p.g * level); };
  VectorXd dh(4);
  dh(0) = (-outflow(p.a1, h(0)) + outflow(p.a3, h(2)) + p.gamma_a * q_a) / p.S;
  dh(1) = (-outflow(p.a2, h(1)) + outflow(p.a4, h(3)) + p.gamma_b * q_b) / p.S;
  dh(2) = (-outflow(p.a3, h(2)) + (1.0 - p.gamma_b) * q_b) / p.S;
  dh(3) = (-outflow(p.a4, h(3)) + (1.0 - p.gamma_a) * q_a) / p.S;
  return dh;
}

/// Classical RK4 with a fixed substep of at most 1 s; levels are clamped at
/// zero after each substep (and inside the stage evaluations, where the
/// intermediate states may otherwise dip below the square root's domain).
/// clamp_events counts how often clamping actually changed a level.
inline VectorXd plant_step(const VectorXd& h0, double q_a, double q_b, const FourTankParams& p,
                           double Ts, long* clamp_events = nullptr) {
  require(Ts > 0.0, "plant_step: sampling time must be positive");
  require(h0.allFinite(), "plant_step: non-finite state");
  const int substeps = static_cast<int>(std::ceil(Ts / 1.0));
  const double dt = Ts / substeps;
  auto clamped_derivative = [&](const VectorXd& h) {
    return four_tank_derivative(h.cwiseMax(0.0), q_a, q_b, p);
  };
  VectorXd h = h0.cwiseMax(0.0);
  for (int step = 0; step < substeps; ++step) {
    VectorXd k1 = clamped_derivative(h);
    VectorXd k2 = clamped_derivative(h + 0.5 * dt * k1);
    VectorXd k3 = clamped_derivative(h + 0.5 * dt * k2);
    VectorXd k4 = clamped_derivative(h + dt * k3);
    VectorXd h_next = h + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (clamp_events != nullptr && (h_next.array() < 0.0).any()) ++(*clamp_events);
    h = h_next.cwiseMax(0.0);
  }
  return h;
}

/// Algebraic steady state for constant flows: each outlet balances its
/// inflows. Used as a test oracle and to seed experiments.
inline VectorXd four_tank_steady_state(double q_a, double q_b, const FourTankParams& p) {
  require(q_a >= 0.0 && q_b >= 0.0, "four_tank_steady_state: negative flow");
  auto level_for = [&](double inflow, double a) {
    double v = inflow / a;
    return v * v / (2.0 * p.g);
  };
  VectorXd h(4);
  h(2) = level_for((1.0 - p.gamma_b) * q_b, p.a3);
  h(3) = level_for((1.0 - p.gamma_a) * q_a, p.a4);
  h(0) = level_for((1.0 - p.gamma_b) * q_b + p.gamma_a * q_a, p.a1);
  h(1) = level_for((1.0 - p.gamma_a) * q_a + p.gamma_b * q_b, p.a2);
  return h;
}

/// Piecewise-constant multilevel pseudo-random excitation.
struct ExcitationSpec {
  int levels = 5;
  int hold = 10;        // samples per constant segment
  VectorXd amplitude_lo;  // per input channel
  VectorXd amplitude_hi;
  std::uint64_t seed = 1;
  int length = 0;  // total samples

  void validate() const {
    require(levels >= 2, "ExcitationSpec: at least 2 levels");
    require(hold >= 1, "ExcitationSpec: hold must be positive");
    require(length >= 1, "ExcitationSpec: length must be positive");
    require(amplitude_lo.size() >= 1 && amplitude_lo.size() == amplitude_hi.size(),
            "ExcitationSpec: amplitude bounds size mismatch");
    require((amplitude_hi.array() >= amplitude_lo.array()).all(),
            "ExcitationSpec: amplitude range inverted");
  }
};

/// Each hold period draws one level index per channel from the seeded LCG;
/// level values are evenly spaced over the amplitude range.
inline std::vector<VectorXd> multilevel_prs(const ExcitationSpec& spec) {
  spec.validate();
  const int channels = static_cast<int>(spec.amplitude_lo.size());
  Lcg64 rng(spec.seed);
  std::vector<VectorXd> signal;
  signal.reserve(spec.length);
  VectorXd current(channels);
  for (int k = 0; k < spec.length; ++k) {
    if (k % spec.hold == 0) {
      for (int c = 0; c < channels; ++c) {
        const std::uint32_t idx = rng.next_index(spec.levels);
        current(c) = std::lerp(spec.amplitude_lo(c), spec.amplitude_hi(c),
                               static_cast<double>(idx) / static_cast<double>(spec.levels - 1));
      }
    }
    signal.push_back(current);
  }
  return signal;
}

}  // namespace grumpc

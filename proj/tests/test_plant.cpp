#include <catch2/catch_amalgamated.hpp>

#include "grumpc/plant.hpp"
#include "grumpc/util.hpp"

using namespace grumpc;

TEST_CASE("derivative balances inflows and outflows") {
  FourTankParams p;
  p.validate();
  VectorXd h = VectorXd::Constant(4, 0.5);
  const double q_a = 4e-4, q_b = 5e-4;
  VectorXd dh = four_tank_derivative(h, q_a, q_b, p);
  auto out = [&](double a) { return a * std::sqrt(2.0 * p.g * 0.5); };
  CHECK(dh(0) == Catch::Approx((-out(p.a1) + out(p.a3) + p.gamma_a * q_a) / p.S).epsilon(1e-14));
  CHECK(dh(1) == Catch::Approx((-out(p.a2) + out(p.a4) + p.gamma_b * q_b) / p.S).epsilon(1e-14));
  CHECK(dh(2) == Catch::Approx((-out(p.a3) + (1.0 - p.gamma_b) * q_b) / p.S).epsilon(1e-14));
  CHECK(dh(3) == Catch::Approx((-out(p.a4) + (1.0 - p.gamma_a) * q_a) / p.S).epsilon(1e-14));

  CHECK_THROWS_AS(four_tank_derivative(VectorXd::Constant(4, -0.1), q_a, q_b, p),
                  std::invalid_argument);
  CHECK_THROWS_AS(four_tank_derivative(h, -1e-5, q_b, p), std::invalid_argument);
}

TEST_CASE("algebraic steady state matches the hand computation") {
  FourTankParams p;
  VectorXd h = four_tank_steady_state(4.525e-4, 5.55e-4, p);
  CHECK(h(0) == Catch::Approx(0.6525908302856538).epsilon(1e-13));
  CHECK(h(1) == Catch::Approx(0.651401956530913).epsilon(1e-13));
  CHECK(h(2) == Catch::Approx(0.6581291664185301).epsilon(1e-13));
  CHECK(h(3) == Catch::Approx(0.6579472575661978).epsilon(1e-13));
  // The steady derivative really is zero.
  VectorXd dh = four_tank_derivative(h, 4.525e-4, 5.55e-4, p);
  CHECK(dh.cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("integration converges under substep refinement") {
  FourTankParams p;
  VectorXd h0(4);
  h0 << 0.8, 0.4, 0.3, 0.7;
  const double q_a = 6e-4, q_b = 7e-4;
  VectorXd coarse = plant_step(h0, q_a, q_b, p, 25.0);  // 25 substeps of 1 s
  VectorXd fine = h0;
  for (int k = 0; k < 250; ++k) fine = plant_step(fine, q_a, q_b, p, 0.1);
  CHECK((coarse - fine).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("simulation settles onto the algebraic steady state") {
  FourTankParams p;
  const double q_a = 4.525e-4, q_b = 5.55e-4;
  VectorXd target = four_tank_steady_state(q_a, q_b, p);
  VectorXd h = VectorXd::Constant(4, 0.2);
  for (int k = 0; k < 400; ++k) h = plant_step(h, q_a, q_b, p, 25.0);
  CHECK((h - target).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("draining tanks clamp at empty without failing") {
  FourTankParams p;
  VectorXd h(4);
  h << 1e-3, 1e-3, 0.0, 0.0;
  long clamps = 0;
  for (int k = 0; k < 40; ++k) h = plant_step(h, 0.0, 0.0, p, 25.0, &clamps);
  CHECK((h.array() >= 0.0).all());
  CHECK(h.cwiseAbs().maxCoeff() < 1e-6);
  CHECK(clamps > 0);
}

TEST_CASE("excitation draws the fixed level sequence") {
  ExcitationSpec spec;
  spec.levels = 5;
  spec.hold = 3;
  spec.seed = 1;
  spec.length = 8;
  spec.amplitude_lo = VectorXd::Zero(2);
  spec.amplitude_hi = VectorXd::Constant(2, 4.0);
  std::vector<VectorXd> u = multilevel_prs(spec);
  REQUIRE(u.size() == 8);
  // Generator indices mod 5 for seed 1: 3, 2 | 3, 1 | 3, 0 per hold period;
  // level k maps to value k with this range (evenly spaced on 0..4).
  for (int k = 0; k < 3; ++k) {
    CHECK(u[k](0) == 3.0);
    CHECK(u[k](1) == 2.0);
  }
  for (int k = 3; k < 6; ++k) {
    CHECK(u[k](0) == 3.0);
    CHECK(u[k](1) == 1.0);
  }
  for (int k = 6; k < 8; ++k) {
    CHECK(u[k](0) == 3.0);
    CHECK(u[k](1) == 0.0);
  }
}

TEST_CASE("excitation is deterministic and respects its range") {
  ExcitationSpec spec;
  spec.levels = 7;
  spec.hold = 5;
  spec.seed = 99;
  spec.length = 200;
  spec.amplitude_lo = VectorXd::Constant(1, -0.4);
  spec.amplitude_hi = VectorXd::Constant(1, 1.2);
  std::vector<VectorXd> a = multilevel_prs(spec);
  std::vector<VectorXd> b = multilevel_prs(spec);
  int used_levels = 0;
  std::vector<bool> seen(7, false);
  for (size_t k = 0; k < a.size(); ++k) {
    CHECK(a[k] == b[k]);
    CHECK(a[k](0) >= -0.4);
    CHECK(a[k](0) <= 1.2);
    if (k % 5 != 0) CHECK(a[k] == a[k - 1]);  // constant within a hold period
    double pos = (a[k](0) + 0.4) / 1.6 * 6.0;
    int level = static_cast<int>(std::lround(pos));
    CHECK(std::abs(pos - level) < 1e-12);  // exactly on the grid
    if (!seen[level]) {
      seen[level] = true;
      ++used_levels;
    }
  }
  CHECK(used_levels >= 5);  // 40 draws over 7 levels reach most of them

  ExcitationSpec bad = spec;
  bad.levels = 1;
  CHECK_THROWS_AS(multilevel_prs(bad), std::invalid_argument);
}

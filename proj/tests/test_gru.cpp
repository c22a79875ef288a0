#include <catch2/catch_amalgamated.hpp>

#include "grumpc/gru.hpp"
#include "grumpc/util.hpp"

using namespace grumpc;

namespace {

GruParams random_params(int n, int m, int p, double amplitude, std::uint64_t seed) {
  Lcg64 rng(seed);
  GruParams g = GruParams::zeros(n, m, p);
  auto fill = [&](MatrixXd& M) {
    for (int i = 0; i < M.rows(); ++i)
      for (int j = 0; j < M.cols(); ++j) M(i, j) = rng.uniform(-amplitude, amplitude);
  };
  auto fillv = [&](VectorXd& v) {
    for (int i = 0; i < v.size(); ++i) v(i) = rng.uniform(-amplitude, amplitude);
  };
  fill(g.W_z);
  fill(g.W_r);
  fill(g.W_h);
  fill(g.U_z);
  fill(g.U_r);
  fill(g.U_h);
  fill(g.U_o);
  fillv(g.b_z);
  fillv(g.b_r);
  fillv(g.b_h);
  fillv(g.b_o);
  return g;
}

VectorXd random_box(Lcg64& rng, int size, double amplitude = 1.0) {
  VectorXd v(size);
  for (int i = 0; i < size; ++i) v(i) = rng.uniform(-amplitude, amplitude);
  return v;
}

}  // namespace

TEST_CASE("scaler maps bounds onto the unit interval and back") {
  VectorXd lo(2), hi(2);
  lo << 0.0, 0.0;
  hi << 2.0, 4.0;
  Scaler s = Scaler::from_bounds(lo, hi);
  CHECK(s.offset(0) == 1.0);
  CHECK(s.half_range(1) == 2.0);

  VectorXd phys(2);
  phys << 2.0, 4.0;
  VectorXd norm = s.normalize(phys);
  CHECK(norm(0) == 1.0);
  CHECK(norm(1) == 1.0);
  VectorXd back = s.denormalize(norm);
  CHECK(back.isApprox(phys, 1e-15));

  VectorXd bad_lo(2), bad_hi(2);
  bad_lo << 0.0, 1.0;
  bad_hi << 2.0, 1.0;  // empty range on channel 2
  CHECK_THROWS_AS(Scaler::from_bounds(bad_lo, bad_hi), std::invalid_argument);
}

TEST_CASE("step with all-zero weights halves the state") {
  GruParams g = GruParams::zeros(1, 1, 1);
  VectorXd x(1), u(1);
  x << 0.4;
  u << 0.7;  // ignored by zero weights
  GruStepCache cache;
  VectorXd next = gru_step(g, x, u, &cache);
  CHECK(next(0) == 0.2);  // z = 0.5, h = 0
  CHECK(cache.z(0) == 0.5);
  CHECK(cache.r(0) == 0.5);
  CHECK(cache.h(0) == 0.0);
  CHECK(cache.rx(0) == 0.2);
}

TEST_CASE("single-unit step with only recurrent candidate weight") {
  GruParams g = GruParams::zeros(1, 1, 1);
  g.U_h(0, 0) = 0.5;
  VectorXd x(1), u(1);
  x << 1.0;
  u << 0.0;
  GruStepCache cache;
  VectorXd next = gru_step(g, x, u, &cache);
  // z = r = 0.5, h = tanh(0.5 * 0.5), x+ = 0.5 + 0.5 tanh(0.25)
  CHECK(cache.h(0) == Catch::Approx(0.24491866240370913).epsilon(1e-15));
  CHECK(next(0) == Catch::Approx(0.6224593312018546).epsilon(1e-15));
}

TEST_CASE("output map is affine in the state") {
  GruParams g = GruParams::zeros(1, 1, 1);
  g.U_o(0, 0) = 2.0;
  g.b_o(0) = 0.1;
  VectorXd x(1);
  x << 0.3;
  CHECK(gru_output(g, x)(0) == Catch::Approx(0.7).epsilon(1e-15));
}

TEST_CASE("unit state box is invariant for arbitrary weights") {
  // x+ is a convex combination of x and tanh(.), both inside [-1, 1].
  Lcg64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    GruParams g = random_params(3, 2, 1, 3.0, 100 + trial);
    VectorXd x = random_box(rng, 3);
    VectorXd u = random_box(rng, 2);
    for (int k = 0; k < 5; ++k) {
      x = gru_step(g, x, u);
      CHECK(inf_norm(x) <= 1.0 + 1e-15);
    }
  }
}

TEST_CASE("simulation matches repeated stepping and reports the failing step") {
  GruParams g = random_params(3, 2, 2, 0.4, 5);
  Lcg64 rng(6);
  VectorXd x0 = random_box(rng, 3);
  std::vector<VectorXd> u_seq;
  for (int k = 0; k < 10; ++k) u_seq.push_back(random_box(rng, 2));

  GruTrajectory traj = gru_simulate(g, x0, u_seq);
  REQUIRE(traj.states.size() == 10);
  REQUIRE(traj.outputs.size() == 10);
  VectorXd x = x0;
  for (int k = 0; k < 10; ++k) {
    x = gru_step(g, x, u_seq[k]);
    CHECK(traj.states[k] == x);
    CHECK(traj.outputs[k] == gru_output(g, x));
  }

  u_seq[4] = VectorXd::Zero(3);  // wrong width
  CHECK_THROWS_WITH(gru_simulate(g, x0, u_seq),
                    Catch::Matchers::ContainsSubstring("step 4"));
}

TEST_CASE("shape and finiteness violations are rejected") {
  GruParams g = GruParams::zeros(2, 1, 1);
  VectorXd x = VectorXd::Zero(2), u = VectorXd::Zero(1);
  CHECK_NOTHROW(gru_step(g, x, u));
  CHECK_THROWS_AS(gru_step(g, VectorXd::Zero(3), u), std::invalid_argument);
  VectorXd bad = x;
  bad(0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(gru_step(g, bad, u), std::invalid_argument);
  g.U_z = MatrixXd::Zero(1, 2);
  CHECK_THROWS_AS(g.validate(), std::invalid_argument);
}

TEST_CASE("reverse-mode step gradients match central differences") {
  GruParams g = random_params(3, 2, 1, 0.6, 21);
  Lcg64 rng(22);
  VectorXd x = random_box(rng, 3, 0.8);
  VectorXd u = random_box(rng, 2, 0.8);
  VectorXd w = random_box(rng, 3);  // fixed co-vector: L = w . x+

  GruStepCache cache;
  gru_step(g, x, u, &cache);
  VectorXd g_x = VectorXd::Zero(3), g_u = VectorXd::Zero(2);
  GruParamGrads grads = GruParamGrads::zeros(g);
  gru_step_backward(g, cache, w, g_x, g_u, &grads);

  const double fd_step = 1e-6;
  auto loss = [&](const GruParams& model, const VectorXd& xs, const VectorXd& us) {
    return w.dot(gru_step(model, xs, us));
  };
  for (int i = 0; i < 3; ++i) {
    VectorXd xp = x, xm = x;
    xp(i) += fd_step;
    xm(i) -= fd_step;
    double fd = (loss(g, xp, u) - loss(g, xm, u)) / (2 * fd_step);
    CHECK(g_x(i) == Catch::Approx(fd).margin(1e-8));
  }
  for (int i = 0; i < 2; ++i) {
    VectorXd up = u, um = u;
    up(i) += fd_step;
    um(i) -= fd_step;
    double fd = (loss(g, x, up) - loss(g, x, um)) / (2 * fd_step);
    CHECK(g_u(i) == Catch::Approx(fd).margin(1e-8));
  }
  // Spot-check two weight blocks.
  {
    GruParams gp = g, gm = g;
    gp.U_h(1, 2) += fd_step;
    gm.U_h(1, 2) -= fd_step;
    double fd = (loss(gp, x, u) - loss(gm, x, u)) / (2 * fd_step);
    CHECK(grads.U_h(1, 2) == Catch::Approx(fd).margin(1e-8));
  }
  {
    GruParams gp = g, gm = g;
    gp.b_z(2) += fd_step;
    gm.b_z(2) -= fd_step;
    double fd = (loss(gp, x, u) - loss(gm, x, u)) / (2 * fd_step);
    CHECK(grads.b_z(2) == Catch::Approx(fd).margin(1e-8));
  }
}

TEST_CASE("output-map gradients match central differences") {
  GruParams g = random_params(3, 1, 2, 0.5, 31);
  Lcg64 rng(32);
  VectorXd x = random_box(rng, 3);
  VectorXd w = random_box(rng, 2);
  VectorXd g_x = VectorXd::Zero(3);
  GruParamGrads grads = GruParamGrads::zeros(g);
  gru_output_backward(g, x, w, g_x, &grads);
  CHECK((g.U_o.transpose() * w - g_x).norm() == 0.0);
  CHECK((grads.U_o - w * x.transpose()).norm() == 0.0);
  CHECK((grads.b_o - w).norm() == 0.0);
}

TEST_CASE("dense step Jacobians match central differences") {
  GruParams g = random_params(3, 2, 1, 0.7, 41);
  Lcg64 rng(42);
  VectorXd x = random_box(rng, 3, 0.8);
  VectorXd u = random_box(rng, 2, 0.8);
  GruStepCache cache;
  gru_step(g, x, u, &cache);
  MatrixXd d_dx, d_du;
  gru_step_jacobians(g, cache, d_dx, d_du);

  const double fd_step = 1e-6;
  for (int j = 0; j < 3; ++j) {
    VectorXd xp = x, xm = x;
    xp(j) += fd_step;
    xm(j) -= fd_step;
    VectorXd col = (gru_step(g, xp, u) - gru_step(g, xm, u)) / (2 * fd_step);
    CHECK((d_dx.col(j) - col).lpNorm<Eigen::Infinity>() < 1e-8);
  }
  for (int j = 0; j < 2; ++j) {
    VectorXd up = u, um = u;
    up(j) += fd_step;
    um(j) -= fd_step;
    VectorXd col = (gru_step(g, x, up) - gru_step(g, x, um)) / (2 * fd_step);
    CHECK((d_du.col(j) - col).lpNorm<Eigen::Infinity>() < 1e-8);
  }
}

TEST_CASE("gradient accumulator algebra") {
  GruParamGrads a = GruParamGrads::zeros(2, 1, 1);
  GruParamGrads b = GruParamGrads::zeros(2, 1, 1);
  a.U_z(0, 1) = 2.0;
  b.U_z(0, 1) = 3.0;
  b.b_o(0) = 4.0;
  a.add_scaled(b, 0.5);
  CHECK(a.U_z(0, 1) == 3.5);
  CHECK(a.b_o(0) == 2.0);
  a.scale(2.0);
  CHECK(a.U_z(0, 1) == 7.0);
  CHECK(a.squared_norm() == Catch::Approx(49.0 + 16.0).epsilon(1e-15));

  GruParams g = GruParams::zeros(2, 1, 1);
  g.apply_update(a);
  CHECK(g.U_z(0, 1) == 7.0);
  CHECK(g.b_o(0) == 4.0);
}

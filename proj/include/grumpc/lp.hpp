#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <vector>

#include "grumpc/util.hpp"

namespace grumpc {

enum class LpStatus { optimal, infeasible, unbounded, stalled };

inline const char* to_string(LpStatus s) {
  switch (s) {
    case LpStatus::optimal: return "optimal";
    case LpStatus::infeasible: return "infeasible";
    case LpStatus::unbounded: return "unbounded";
    case LpStatus::stalled: return "stalled";
  }
  return "unknown";
}

struct LpResult {
  LpStatus status = LpStatus::stalled;
  VectorXd x;
  double objective = 0.0;
};

namespace detail {

/// Tableau simplex over min c'v, E v = rhs, v >= 0 with Bland's rule.
/// `allowed` caps the columns eligible to enter (used to freeze artificials
/// in phase 2). Returns false on iteration exhaustion.
inline bool simplex_iterate(MatrixXd& T, std::vector<int>& basis, int allowed,
                            int max_iterations = 20000) {
  const long total_rows = T.rows();
  const long rows = total_rows - 1;
  const long rhs_col = T.cols() - 1;
  const double eps = 1e-9;

  for (long iter = 0; iter < max_iterations; ++iter) {
    int entering = -1;
    for (int j = 0; j < allowed; ++j) {
      if (T(rows, j) < -eps) {
        entering = j;
        break;
      }
    }
    if (entering < 0) return true;  // optimal

    long leaving = -1;
    double best_ratio = 0.0;
    for (long i = 0; i < rows; ++i) {
      if (T(i, entering) > eps) {
        double ratio = T(i, rhs_col) / T(i, entering);
        if (leaving < 0 || ratio < best_ratio - eps ||
            (ratio < best_ratio + eps && basis[i] < basis[leaving])) {
          leaving = i;
          best_ratio = ratio;
        }
      }
    }
    if (leaving < 0) return true;  // unbounded; caller detects via reduced costs

    double pivot = T(leaving, entering);
    T.row(leaving) /= pivot;
    for (long i = 0; i < total_rows; ++i) {
      if (i == leaving) continue;
      double factor = T(i, entering);
      if (factor != 0.0) T.row(i) -= factor * T.row(leaving);
    }
    basis[leaving] = entering;
  }
  return false;
}

}  // namespace detail

/// minimize c'x subject to A x <= b with x free, via a two-phase dense
/// simplex (free variables split, slack per row, artificial basis).
inline LpResult solve_lp(const VectorXd& c, const MatrixXd& A, const VectorXd& b) {
  const int n0 = static_cast<int>(c.size());
  const int m0 = static_cast<int>(A.rows());
  require(A.cols() == n0, "solve_lp: A columns != objective size");
  require(b.size() == m0, "solve_lp: b size != A rows");
  require(c.allFinite() && A.allFinite() && b.allFinite(), "solve_lp: non-finite data");

  // Standard-form columns: [x+ | x- | slack | artificial].
  const int n_core = 2 * n0 + m0;
  const int n_total = n_core + m0;
  const double eps = 1e-9;

  MatrixXd T = MatrixXd::Zero(m0 + 1, n_total + 1);
  std::vector<int> basis(m0);
  for (int i = 0; i < m0; ++i) {
    double sign = b(i) >= 0.0 ? 1.0 : -1.0;
    T.block(i, 0, 1, n0) = sign * A.row(i);
    T.block(i, n0, 1, n0) = -sign * A.row(i);
    T(i, 2 * n0 + i) = sign;           // slack
    T(i, n_core + i) = 1.0;            // artificial
    T(i, n_total) = sign * b(i);
    basis[i] = n_core + i;
  }

  // Phase 1: minimize the artificial sum; price out the artificial basis.
  for (int j = 0; j <= n_total; ++j) {
    double col_sum = 0.0;
    for (int i = 0; i < m0; ++i) col_sum += T(i, j);
    T(m0, j) = (j >= n_core && j < n_total ? 1.0 : 0.0) - col_sum;
  }
  LpResult result;
  if (!detail::simplex_iterate(T, basis, n_total)) {
    result.status = LpStatus::stalled;
    return result;
  }
  double phase1 = -T(m0, n_total);
  double scale = std::max(1.0, b.cwiseAbs().maxCoeff());
  if (phase1 > 1e-7 * scale) {
    result.status = LpStatus::infeasible;
    return result;
  }

  // Pivot any residual (degenerate) artificial out of the basis; a row with
  // no eligible pivot is redundant and can be neutralised in place.
  for (int i = 0; i < m0; ++i) {
    if (basis[i] < n_core) continue;
    int entering = -1;
    for (int j = 0; j < n_core; ++j) {
      if (std::abs(T(i, j)) > eps) {
        entering = j;
        break;
      }
    }
    if (entering < 0) {
      T.row(i).setZero();
      continue;
    }
    double pivot = T(i, entering);
    T.row(i) /= pivot;
    for (int k = 0; k <= m0; ++k) {
      if (k == i) continue;
      double factor = T(k, entering);
      if (factor != 0.0) T.row(k) -= factor * T.row(i);
    }
    basis[i] = entering;
  }

  // Phase 2: real objective over the core columns, priced out on the basis.
  T.row(m0).setZero();
  for (int j = 0; j < n0; ++j) {
    T(m0, j) = c(j);
    T(m0, n0 + j) = -c(j);
  }
  for (int i = 0; i < m0; ++i) {
    if (basis[i] >= n_core) continue;
    double cost = T(m0, basis[i]);
    if (cost != 0.0) T.row(m0) -= cost * T.row(i);
  }
  if (!detail::simplex_iterate(T, basis, n_core)) {
    result.status = LpStatus::stalled;
    return result;
  }

  // Reduced cost still negative means no pivot row existed: unbounded ray.
  for (int j = 0; j < n_core; ++j) {
    if (T(m0, j) < -eps) {
      bool has_pivot = false;
      for (int i = 0; i < m0; ++i) {
        if (T(i, j) > eps) {
          has_pivot = true;
          break;
        }
      }
      if (!has_pivot) {
        result.status = LpStatus::unbounded;
        return result;
      }
    }
  }

  VectorXd v = VectorXd::Zero(n_total);
  for (int i = 0; i < m0; ++i) {
    if (basis[i] >= 0 && basis[i] < n_total) v(basis[i]) = T(i, n_total);
  }
  result.x = v.head(n0) - v.segment(n0, n0);
  result.objective = c.dot(result.x);
  result.status = LpStatus::optimal;
  return result;
}

struct L1FitResult {
  bool ok = false;
  VectorXd coeffs;
  double l1_error = 0.0;
};

/// minimize over l: sum_k | target_k - (basis^T l)_k |, basis is p x n.
/// Always feasible and bounded below by zero.
inline L1FitResult l1_row_fit(const VectorXd& target, const MatrixXd& basis) {
  const int p = static_cast<int>(basis.rows());
  const int n = static_cast<int>(basis.cols());
  require(target.size() == n, "l1_row_fit: target size != basis columns");

  VectorXd c = VectorXd::Zero(p + n);
  c.tail(n).setOnes();
  MatrixXd A = MatrixXd::Zero(2 * n, p + n);
  VectorXd b(2 * n);
  for (int k = 0; k < n; ++k) {
    A.block(2 * k, 0, 1, p) = basis.col(k).transpose();
    A(2 * k, p + k) = -1.0;
    b(2 * k) = target(k);
    A.block(2 * k + 1, 0, 1, p) = -basis.col(k).transpose();
    A(2 * k + 1, p + k) = -1.0;
    b(2 * k + 1) = -target(k);
  }

  LpResult lp = solve_lp(c, A, b);
  L1FitResult fit;
  if (lp.status != LpStatus::optimal) return fit;
  fit.ok = true;
  fit.coeffs = lp.x.head(p);
  fit.l1_error = (target - basis.transpose() * fit.coeffs).cwiseAbs().sum();
  return fit;
}

struct PolytopeCheck {
  bool nonempty = false;
  bool bounded = false;
};

/// Checks {y : A y <= b} for nonemptiness (phase 1) and boundedness
/// (coordinate-wise extreme LPs; a box-bounded polyhedron is bounded).
inline PolytopeCheck check_polytope(const MatrixXd& A, const VectorXd& b) {
  PolytopeCheck check;
  const int dim = static_cast<int>(A.cols());
  VectorXd zero = VectorXd::Zero(dim);
  LpResult feas = solve_lp(zero, A, b);
  if (feas.status != LpStatus::optimal) return check;
  check.nonempty = true;
  check.bounded = true;
  for (int k = 0; k < dim && check.bounded; ++k) {
    for (double sign : {1.0, -1.0}) {
      VectorXd c = VectorXd::Zero(dim);
      c(k) = sign;
      LpResult extreme = solve_lp(c, A, b);
      if (extreme.status != LpStatus::optimal) {
        check.bounded = false;
        break;
      }
    }
  }
  return check;
}

}  // namespace grumpc

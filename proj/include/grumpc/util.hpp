#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace grumpc {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline double inf_norm(const VectorXd& v) {
  return v.size() == 0 ? 0.0 : v.cwiseAbs().maxCoeff();
}

/// Induced infinity norm: maximum absolute row sum.
inline double induced_inf_norm(const MatrixXd& M) {
  if (M.rows() == 0 || M.cols() == 0) return 0.0;
  return M.cwiseAbs().rowwise().sum().maxCoeff();
}

inline double logistic(double a) { return 1.0 / (1.0 + std::exp(-a)); }

inline VectorXd logistic(const VectorXd& a) {
  return a.unaryExpr([](double v) { return logistic(v); });
}

inline VectorXd tanh_vec(const VectorXd& a) {
  return a.unaryExpr([](double v) { return std::tanh(v); });
}

/// 64-bit linear congruential generator (Knuth's MMIX multiplier/increment),
/// values taken from the high 32 bits of the state. Used wherever the library
/// needs reproducible pseudo-random draws.
class Lcg64 {
 public:
  explicit Lcg64(std::uint64_t seed) : state_(seed) {}

  std::uint32_t next_u32() {
    state_ = state_ * 6364136223846793005ULL + 1442695040888963407ULL;
    return static_cast<std::uint32_t>(state_ >> 32);
  }

  /// Uniform draw in [0, 1) with 32 bits of resolution.
  double next_unit() {
    return static_cast<double>(next_u32()) * 0x1.0p-32;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

  /// Uniform index in {0, ..., count-1}.
  std::size_t next_index(std::size_t count) {
    return static_cast<std::size_t>(next_u32() % count);
  }

  VectorXd uniform_vector(Eigen::Index size, double lo, double hi) {
    VectorXd v(size);
    for (Eigen::Index i = 0; i < size; ++i) v[i] = uniform(lo, hi);
    return v;
  }

 private:
  std::uint64_t state_;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw std::invalid_argument(message);
}

}  // namespace grumpc

#pragma once

#include <Eigen/Dense>

#include "graphinf/rng.hpp"

namespace testutil {

inline Eigen::MatrixXd random_matrix(int rows, int cols, graphinf::RngStream& rng) {
  Eigen::MatrixXd m(rows, cols);
  for (int j = 0; j < cols; ++j)
    for (int i = 0; i < rows; ++i) m(i, j) = rng.normal();
  return m;
}

inline Eigen::MatrixXd random_symmetric(int p, graphinf::RngStream& rng) {
  Eigen::MatrixXd m = random_matrix(p, p, rng);
  return 0.5 * (m + m.transpose());
}

// Random symmetric positive definite matrix with eigenvalues bounded away
// from zero.
inline Eigen::MatrixXd random_spd(int p, graphinf::RngStream& rng,
                                  double ridge = 0.5) {
  Eigen::MatrixXd b = random_matrix(p, p, rng);
  return b * b.transpose() / static_cast<double>(p) +
         ridge * Eigen::MatrixXd::Identity(p, p);
}

// Derivative-free cyclic minimization: golden-section line search along each
// coordinate in turn. Slow but independent of any gradient code; used as an
// optimization oracle. The objective may return +inf outside its domain.
template <typename F>
inline Eigen::VectorXd cyclic_golden_min(const F& f, Eigen::VectorXd x,
                                         int cycles = 400, double span = 1.0,
                                         double tol = 1e-12) {
  const double gr = 0.6180339887498949;
  for (int c = 0; c < cycles; ++c) {
    double moved = 0.0;
    for (int k = 0; k < x.size(); ++k) {
      double lo = x[k] - span, hi = x[k] + span;
      auto eval = [&](double v) {
        Eigen::VectorXd y = x;
        y[k] = v;
        return f(y);
      };
      // Shrink the bracket by golden sections.
      double a = lo, b = hi;
      double m1 = b - gr * (b - a), m2 = a + gr * (b - a);
      double f1 = eval(m1), f2 = eval(m2);
      while (b - a > tol) {
        if (f1 > f2) {
          a = m1;
          m1 = m2;
          f1 = f2;
          m2 = a + gr * (b - a);
          f2 = eval(m2);
        } else {
          b = m2;
          m2 = m1;
          f2 = f1;
          m1 = b - gr * (b - a);
          f1 = eval(m1);
        }
      }
      const double v = 0.5 * (a + b);
      moved = std::max(moved, std::abs(v - x[k]));
      x[k] = v;
    }
    span = std::max(4.0 * moved, 1e-9);
    if (moved < 1e-13) break;
  }
  return x;
}

}  // namespace testutil

#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "graphinf/errors.hpp"
#include "graphinf/matcalc.hpp"
#include "graphinf/solver.hpp"

namespace graphinf {

/// Partition of vech positions into the selected set E and its complement.
/// Diagonal positions always belong to E: the diagonal of a positive
/// definite matrix is never zero.
struct ActiveSet {
  int p = 0;
  std::vector<int> active;     // E, ascending vech positions
  std::vector<int> inactive;   // E', ascending
  std::vector<int> position;   // vech index -> slot in active, or -1

  int dim() const { return vech_dim(p); }
  int size() const { return static_cast<int>(active.size()); }
  int size_complement() const { return static_cast<int>(inactive.size()); }

  int slot(int vech_index) const { return position[vech_index]; }
  bool contains(int vech_index) const { return position[vech_index] >= 0; }

  static ActiveSet from_vech(const Vector& theta, int p, double zero_tol) {
    const VechIndexer idx(p);
    if (theta.size() != idx.dim())
      throw DimensionError("ActiveSet: vector length does not match p");
    ActiveSet e;
    e.p = p;
    e.position.assign(idx.dim(), -1);
    for (int k = 0; k < idx.dim(); ++k) {
      if (idx.is_diagonal(k) || std::abs(theta[k]) > zero_tol) {
        e.position[k] = static_cast<int>(e.active.size());
        e.active.push_back(k);
      } else {
        e.inactive.push_back(k);
      }
    }
    return e;
  }
};

/// Selected pattern of a converged penalized solution. The solver produces
/// exact zeros, so the default zero_tol = 0 reads the pattern verbatim;
/// a positive tolerance supports externally produced solutions.
inline ActiveSet extract_active_set(const GlassoSolution& sol,
                                    double zero_tol = 0.0) {
  const int p = static_cast<int>(sol.theta_hat.rows());
  return ActiveSet::from_vech(vech(sol.theta_hat), p, zero_tol);
}

/// H(theta) = D_p^T (theta^{-1} kron theta^{-1}) D_p / 2, the per-observation
/// Hessian of the loss tr(S theta) - log det theta in vech coordinates
/// (the gradient convention is half_vec_adjoint(S - theta^{-1})).
inline Matrix compute_H(const Matrix& theta) {
  check_symmetric(theta, "compute_H");
  const int p = static_cast<int>(theta.rows());
  Eigen::LLT<Matrix> llt(symmetrize(theta));
  if (llt.info() != Eigen::Success)
    throw DecompositionError("compute_H: input is not positive definite");
  const Matrix sigma = llt.solve(Matrix::Identity(p, p));
  const VechIndexer idx(p);
  std::vector<int> all(idx.dim());
  for (int k = 0; k < idx.dim(); ++k) all[k] = k;
  return 0.5 * kron_sandwich_block(symmetrize(sigma), all, all, idx);
}

namespace detail {

/// Block of H at the given vech positions, from the inverse sigma directly.
inline Matrix h_block(const Matrix& sigma, const std::vector<int>& rows,
                      const std::vector<int>& cols, const VechIndexer& idx) {
  return 0.5 * kron_sandwich_block(sigma, rows, cols, idx);
}

/// Per-observation score rows: row h is half_vec_adjoint(X_h X_h^T - sigma).
inline Matrix score_matrix(const Matrix& sigma, const Matrix& x) {
  const int n = static_cast<int>(x.rows());
  const int p = static_cast<int>(x.cols());
  const VechIndexer idx(p);
  Matrix g(n, idx.dim());
  for (int h = 0; h < n; ++h) {
    const auto row = x.row(h);
    for (int j = 0, k = 0; j < p; ++j) {
      g(h, k++) = 0.5 * (row[j] * row[j] - sigma(j, j));
      for (int i = j + 1; i < p; ++i, ++k)
        g(h, k) = row[i] * row[j] - sigma(i, j);
    }
  }
  return g;
}

}  // namespace detail

/// J(theta) = average outer product of per-observation scores at theta.
/// Positive semidefinite; the EE block is positive definite once n >= |E|.
inline Matrix compute_J(const Matrix& theta, const Matrix& x) {
  check_symmetric(theta, "compute_J");
  const int p = static_cast<int>(theta.rows());
  if (x.cols() != p) throw DimensionError("compute_J: data width mismatch");
  if (x.rows() < 1) throw DimensionError("compute_J: empty data");
  Eigen::LLT<Matrix> llt(symmetrize(theta));
  if (llt.info() != Eigen::Success)
    throw DecompositionError("compute_J: input is not positive definite");
  const Matrix sigma = llt.solve(Matrix::Identity(p, p));
  const Matrix g = detail::score_matrix(symmetrize(sigma), x);
  return g.transpose() * g / static_cast<double>(x.rows());
}

struct RefitOptions {
  int max_iter = 200;
  double grad_tol = 1e-10;      // target on [D^T vec(S - sigma_bar)]_E
  double grad_accept = 1e-8;    // hard acceptance bound at exit
  bool with_sigma_perp = true;  // assemble the |E'| x |E'| residual covariance
  bool allow_h_fallback = true; // substitute J := H when n < |E|
};

/// Unpenalized Gaussian MLE constrained to the selected pattern:
/// minimize tr(S theta) - log det theta over positive definite theta with
/// vech(theta) zero off E. Newton on the free coordinates with a
/// positive-definiteness-preserving line search.
inline Matrix constrained_mle(const Matrix& s, const ActiveSet& e,
                              const Matrix& init = Matrix(),
                              const RefitOptions& opt = RefitOptions()) {
  check_symmetric(s, "constrained_mle", 1e-8);
  const int p = e.p;
  if (s.rows() != p) throw DimensionError("constrained_mle: dimension mismatch");
  const VechIndexer idx(p);

  Matrix theta;
  if (init.size() > 0) {
    theta = symmetrize(init);
    for (int k : e.inactive) {
      theta(idx.row(k), idx.col(k)) = 0.0;
      theta(idx.col(k), idx.row(k)) = 0.0;
    }
  } else {
    theta = Matrix::Zero(p, p);
    for (int j = 0; j < p; ++j) {
      if (s(j, j) <= 0.0)
        throw RefitError("constrained_mle: non-positive covariance diagonal");
      theta(j, j) = 1.0 / s(j, j);
    }
  }

  auto loss = [&](const Matrix& th) {
    Eigen::LLT<Matrix> llt(th);
    if (llt.info() != Eigen::Success)
      return std::numeric_limits<double>::infinity();
    double log_det = 0.0;
    for (int i = 0; i < p; ++i) log_det += 2.0 * std::log(llt.matrixLLT()(i, i));
    return s.cwiseProduct(th).sum() - log_det;
  };

  double f = loss(theta);
  if (!std::isfinite(f))
    throw RefitError("constrained_mle: initial point not positive definite");

  const int ne = e.size();
  for (int it = 0; it < opt.max_iter; ++it) {
    Eigen::LLT<Matrix> llt(theta);
    if (llt.info() != Eigen::Success)
      throw RefitError("constrained_mle: iterate lost positive definiteness");
    const Matrix sigma = llt.solve(Matrix::Identity(p, p));

    Vector grad(ne);
    for (int t = 0; t < ne; ++t) {
      const int k = e.active[t];
      grad[t] = idx.weight(k) *
                (s(idx.row(k), idx.col(k)) - sigma(idx.row(k), idx.col(k)));
    }
    if (grad.cwiseAbs().maxCoeff() <= opt.grad_tol) break;

    Matrix hess = kron_sandwich_block(sigma, e.active, e.active, idx);
    Eigen::LLT<Matrix> hllt(hess);
    if (hllt.info() != Eigen::Success) {
      hess.diagonal().array() += 1e-12 * hess.trace() / ne;
      hllt.compute(hess);
      if (hllt.info() != Eigen::Success)
        throw RefitError("constrained_mle: Newton system not positive definite");
    }
    const Vector step = hllt.solve(-grad);
    // Near stationarity the objective gain falls below double precision;
    // take such steps whole as long as they stay positive definite.
    const bool tiny_step =
        step.cwiseAbs().maxCoeff() <= 1e-6 * (1.0 + theta.cwiseAbs().maxCoeff());

    double scale = 1.0;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      Matrix cand = theta;
      for (int t = 0; t < ne; ++t) {
        const int k = e.active[t];
        cand(idx.row(k), idx.col(k)) += scale * step[t];
        cand(idx.col(k), idx.row(k)) = cand(idx.row(k), idx.col(k));
      }
      const double fc = loss(cand);
      if (fc < f || (tiny_step && std::isfinite(fc))) {
        theta = std::move(cand);
        f = fc;
        accepted = true;
        break;
      }
      scale *= 0.5;
    }
    if (!accepted) break;  // objective at its numerical floor; audit decides
    if (theta.cwiseAbs().maxCoeff() > 1e10)
      throw RefitError("constrained_mle: iterates diverged (restricted MLE may not exist)");
  }

  // Final stationarity audit.
  Eigen::LLT<Matrix> llt(theta);
  if (llt.info() != Eigen::Success)
    throw RefitError("constrained_mle: final iterate not positive definite");
  const Matrix sigma = llt.solve(Matrix::Identity(p, p));
  double worst = 0.0;
  for (int k : e.active)
    worst = std::max(worst, idx.weight(k) * std::abs(s(idx.row(k), idx.col(k)) -
                                                     sigma(idx.row(k), idx.col(k))));
  if (worst > opt.grad_accept)
    throw RefitError("constrained_mle: stationarity residual " +
                     std::to_string(worst) + " above acceptance bound");
  return theta;
}

/// Everything the downstream conditional analysis consumes about the
/// refitted model: the restricted MLE, the E-columns of H and J, the
/// sandwich covariance of sqrt(n) theta_bar_E, and the orthogonal nuisance
/// statistic with its coefficient matrix.
struct RefitState {
  ActiveSet active;
  int n = 0;
  Matrix theta_bar_mat;  // p x p restricted MLE
  Matrix sigma_bar;      // its inverse
  Vector theta_bar;      // full-d vech (zeros off E)
  Matrix h_cols;         // d x |E| columns of H at theta_bar
  Matrix j_cols;         // d x |E| columns of J (H columns under fallback)
  Matrix h_ee;           // |E| x |E|
  Matrix j_ee;           // |E| x |E|
  Matrix sigma_e;        // sandwich H_EE^{-1} J_EE H_EE^{-1}
  Matrix a_e;            // |E'| x |E| nuisance coefficient
  Vector theta_perp;     // |E'|
  Matrix sigma_e_perp;   // |E'| x |E'|; empty unless requested
  bool h_fallback = false;

  Vector theta_e() const {
    Vector v(active.size());
    for (int t = 0; t < active.size(); ++t) v[t] = theta_bar[active.active[t]];
    return v;
  }
};

/// Assemble the refit state at a given restricted MLE. The fallback J := H
/// engages when n < |E| (the score Gram cannot have full rank there); a
/// singular J_EE with n >= |E| is an error.
inline RefitState build_refit_state(const Matrix& s, const Matrix& x,
                                    const ActiveSet& e, const Matrix& theta_bar,
                                    const RefitOptions& opt = RefitOptions()) {
  const int p = e.p;
  const VechIndexer idx(p);
  const int ne = e.size();
  const int nc = e.size_complement();

  RefitState st;
  st.active = e;
  st.n = static_cast<int>(x.rows());
  st.theta_bar_mat = theta_bar;
  Eigen::LLT<Matrix> llt(theta_bar);
  if (llt.info() != Eigen::Success)
    throw DecompositionError("build_refit_state: restricted MLE not positive definite");
  st.sigma_bar = symmetrize(llt.solve(Matrix::Identity(p, p)));
  st.theta_bar = vech(theta_bar);

  std::vector<int> all(idx.dim());
  for (int k = 0; k < idx.dim(); ++k) all[k] = k;

  st.h_cols = detail::h_block(st.sigma_bar, all, e.active, idx);

  const Matrix g = detail::score_matrix(st.sigma_bar, x);
  Matrix g_e(st.n, ne);
  for (int t = 0; t < ne; ++t) g_e.col(t) = g.col(e.active[t]);

  st.h_fallback = st.n < ne;
  if (st.h_fallback && !opt.allow_h_fallback)
    throw ConditioningError("build_refit_state: n < |E| makes J_EE singular");

  st.h_ee = pick_rows(st.h_cols, e.active);

  if (st.h_fallback) {
    st.j_cols = st.h_cols;
    st.j_ee = st.h_ee;
  } else {
    st.j_cols = g.transpose() * g_e / static_cast<double>(st.n);
    st.j_ee = pick_rows(st.j_cols, e.active);
  }

  Eigen::LLT<Matrix> jll(st.j_ee);
  if (jll.info() != Eigen::Success)
    throw ConditioningError("build_refit_state: J_EE (or its H substitute) is numerically singular");

  Eigen::LLT<Matrix> hll(st.h_ee);
  if (hll.info() != Eigen::Success)
    throw ConditioningError("build_refit_state: H_EE is numerically singular");

  // Sandwich covariance of sqrt(n) theta_bar_E.
  const Matrix hinv_j = hll.solve(st.j_ee);
  st.sigma_e = symmetrize(hll.solve(hinv_j.transpose()).transpose());

  // Nuisance: theta_perp = score_complement(theta_bar) - A_E theta_bar_E,
  // A_E = H_{E'E} - J_{E'E} J_EE^{-1} H_EE.
  const Matrix h_ce_block = pick_rows(st.h_cols, e.inactive);
  const Matrix j_ce_block = pick_rows(st.j_cols, e.inactive);
  // Under the fallback J := H the coefficient cancels exactly.
  st.a_e = st.h_fallback ? Matrix::Zero(nc, ne)
                         : Matrix(h_ce_block - j_ce_block * jll.solve(st.h_ee));

  const Vector score_full = half_vec_adjoint(s - st.sigma_bar);
  Vector score_c(nc);
  for (int t = 0; t < nc; ++t) score_c[t] = score_full[e.inactive[t]];
  st.theta_perp = score_c - st.a_e * st.theta_e();

  if (opt.with_sigma_perp) {
    Matrix g_c(st.n, nc);
    for (int t = 0; t < nc; ++t) g_c.col(t) = g.col(e.inactive[t]);
    if (st.h_fallback) {
      const Matrix h_cc = detail::h_block(st.sigma_bar, e.inactive, e.inactive, idx);
      st.sigma_e_perp =
          symmetrize(h_cc - h_ce_block * hll.solve(h_ce_block.transpose()));
    } else {
      const Matrix j_cc = g_c.transpose() * g_c / static_cast<double>(st.n);
      st.sigma_e_perp =
          symmetrize(j_cc - j_ce_block * jll.solve(j_ce_block.transpose()));
    }
  }
  return st;
}

/// Orthogonal nuisance pieces alone (theta_perp, A_E, Sigma_E_perp).
struct NuisanceState {
  Vector theta_perp;
  Matrix a_e;
  Matrix sigma_e_perp;
};

inline NuisanceState compute_nuisance(const RefitState& st) {
  if (st.sigma_e_perp.size() == 0)
    throw ConfigError("compute_nuisance: refit state was built without Sigma_E_perp");
  return NuisanceState{st.theta_perp, st.a_e, st.sigma_e_perp};
}

}  // namespace graphinf

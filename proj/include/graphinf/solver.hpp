#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <utility>
#include <vector>

#include "graphinf/errors.hpp"
#include "graphinf/matcalc.hpp"
#include "graphinf/rng.hpp"

namespace graphinf {

/// Penalty level sqrt(2 log p / n); default for randomized fits.
inline double universal_lambda(int p, int n) {
  return std::sqrt(2.0 * std::log(static_cast<double>(p)) / n);
}

/// Penalty level sqrt(log p / n); default for non-randomized fits.
inline double half_universal_lambda(int p, int n) {
  return std::sqrt(std::log(static_cast<double>(p)) / n);
}

/// Penalty lambda * [gamma |x| + (1 - gamma)/2 x^2] applied entrywise.
/// gamma = 1 is the pure l1 penalty.
struct PenaltySpec {
  double lambda = 0.0;
  double gamma = 1.0;
  bool penalize_diagonal = true;

  PenaltySpec() = default;
  PenaltySpec(double lam, double gam = 1.0, bool pen_diag = true)
      : lambda(lam), gamma(gam), penalize_diagonal(pen_diag) {
    validate();
  }

  void validate() const {
    if (!(lambda > 0.0)) throw ConfigError("PenaltySpec: lambda must be > 0");
    if (gamma < 0.0 || gamma > 1.0)
      throw ConfigError("PenaltySpec: gamma must lie in [0, 1]");
  }

  double l1_scale() const { return lambda * gamma; }
  double l2_scale() const { return lambda * (1.0 - gamma); }
};

/// Covariance of the randomization vector in vech coordinates. Either
/// isotropic sd^2 I_d (the common case), a general dense PD matrix, or
/// exactly zero (degenerate; testing only).
class RandomizationCov {
 public:
  static RandomizationCov isotropic(int p, double sd) {
    if (sd < 0.0) throw ConfigError("RandomizationCov: sd must be >= 0");
    RandomizationCov c;
    c.dim_ = vech_dim(p);
    c.sd_ = sd;
    return c;
  }

  static RandomizationCov dense_cov(Matrix omega) {
    check_symmetric(omega, "RandomizationCov");
    RandomizationCov c;
    c.dim_ = static_cast<int>(omega.rows());
    c.dense_ = std::make_shared<Matrix>(symmetrize(omega));
    c.llt_ = std::make_shared<Eigen::LLT<Matrix>>(*c.dense_);
    if (c.llt_->info() != Eigen::Success)
      throw DecompositionError("RandomizationCov: matrix is not positive definite");
    return c;
  }

  int dim() const { return dim_; }
  bool is_isotropic() const { return !dense_; }
  bool is_zero() const { return !dense_ && sd_ == 0.0; }
  double sd() const { return sd_; }

  /// omega ~ N(0, Omega); the zero law yields an exact zero vector.
  Vector sample(RngStream& rng) const {
    Vector z(dim_);
    if (is_zero()) return Vector::Zero(dim_);
    for (int i = 0; i < dim_; ++i) z[i] = rng.normal();
    if (!dense_) return sd_ * z;
    return llt_->matrixL() * z;
  }

  /// Omega^{-1} B.
  Matrix solve(const Matrix& b) const {
    if (is_zero())
      throw DecompositionError("RandomizationCov: zero covariance is singular");
    if (!dense_) return b / (sd_ * sd_);
    return llt_->solve(b);
  }

  Matrix matrix() const {
    if (dense_) return *dense_;
    return sd_ * sd_ * Matrix::Identity(dim_, dim_);
  }

 private:
  RandomizationCov() = default;
  int dim_ = 0;
  double sd_ = 0.0;
  std::shared_ptr<const Matrix> dense_;
  std::shared_ptr<const Eigen::LLT<Matrix>> llt_;
};

struct RandomizationSpec {
  RandomizationCov omega_cov;
  std::uint64_t seed = 0;
};

/// A realized randomization: the vech draw omega_n = omega / sqrt(n) and the
/// symmetric tilt matrix W applied to the sample covariance. W is the matrix
/// version of omega_n with its diagonal doubled, so that the half-vec adjoint
/// recovers the draw: half_vec_adjoint(W) = omega_n. This is the convention
/// under which the stationarity conditions of the tilted objective read, in
/// vech coordinates, score(theta_hat) - omega_n + penalty_subgradient = 0.
struct Randomization {
  Matrix w;
  Vector omega_n;
};

inline Randomization make_randomization(const RandomizationCov& cov, int n,
                                        RngStream& rng) {
  if (n < 1) throw DimensionError("make_randomization: n must be >= 1");
  const int p = nodes_from_vech_dim(cov.dim());
  const Vector omega_n = cov.sample(rng) / std::sqrt(static_cast<double>(n));
  Matrix w = unvech(omega_n);
  w.diagonal() *= 2.0;
  return Randomization{std::move(w), omega_n};
}

inline Randomization make_randomization(const RandomizationSpec& spec, int n) {
  RngStream rng(spec.seed);
  return make_randomization(spec.omega_cov, n, rng);
}

/// Sample covariance X^T X / n of pre-centered data.
inline Matrix sample_covariance(const Matrix& x) {
  if (x.rows() < 2)
    throw DimensionError("sample_covariance: at least two observations required");
  return (x.transpose() * x) / static_cast<double>(x.rows());
}

struct GlassoOptions {
  int max_sweeps = 500;
  double rel_tol = 1e-6;
  double kkt_tol = 1e-6;
  int max_inner = 500;
  double inner_tol = 1e-9;
  bool polish = true;
};

struct GlassoSolution {
  Matrix theta_hat;   // penalized precision estimate; exact zeros off-support
  Matrix sigma_hat;   // inverse of theta_hat at exit
  Matrix noise;       // tilt matrix W (zero for non-randomized fits)
  Vector omega_n;     // vech randomization realization
  PenaltySpec penalty;
  bool converged = false;
  int iterations = 0;
  double kkt_residual = 0.0;
  std::vector<double> objective_history;  // one value per accepted descent step
};

/// Value of the penalized objective tr(A theta) - log det theta + penalty,
/// where A is the (possibly noise-tilted) covariance input.
inline double penalized_objective(const Matrix& a, const PenaltySpec& pen,
                                  const Matrix& theta) {
  Eigen::LLT<Matrix> llt(theta);
  if (llt.info() != Eigen::Success)
    return std::numeric_limits<double>::infinity();
  double log_det = 0.0;
  for (Eigen::Index i = 0; i < theta.rows(); ++i)
    log_det += 2.0 * std::log(llt.matrixLLT()(i, i));
  double value = a.cwiseProduct(theta).sum() - log_det;
  const double l1 = pen.l1_scale(), l2 = pen.l2_scale();
  for (Eigen::Index j = 0; j < theta.cols(); ++j)
    for (Eigen::Index i = 0; i < theta.rows(); ++i) {
      if (i == j && !pen.penalize_diagonal) continue;
      value += l1 * std::abs(theta(i, j)) + 0.5 * l2 * theta(i, j) * theta(i, j);
    }
  return value;
}

namespace detail {

// Stationarity residual of the penalized problem in matrix-entry scale:
// active entries must satisfy [A - theta^{-1}]_ij + l1 s_ij + l2 theta_ij = 0
// and inactive entries |[sigma - A]_ij| <= l1. Returns the largest violation.
inline double glasso_kkt_residual(const Matrix& a, const PenaltySpec& pen,
                                  const Matrix& theta, const Matrix& sigma) {
  const Eigen::Index p = a.rows();
  const double l1 = pen.l1_scale(), l2 = pen.l2_scale();
  double worst = 0.0;
  for (Eigen::Index j = 0; j < p; ++j)
    for (Eigen::Index i = j; i < p; ++i) {
      const double grad = a(i, j) - sigma(i, j);
      const double t = theta(i, j);
      if (i == j && !pen.penalize_diagonal) {
        worst = std::max(worst, std::abs(grad));
      } else if (t != 0.0) {
        const double sign = t > 0.0 ? 1.0 : -1.0;
        worst = std::max(worst, std::abs(grad + l1 * sign + l2 * t));
      } else {
        worst = std::max(worst, std::max(0.0, std::abs(grad) - l1));
      }
    }
  return worst;
}

// Newton refinement on the active pattern, growing the pattern when an
// inactive stationarity bound is violated. Monotone via backtracking.
inline void glasso_polish(const Matrix& a, const PenaltySpec& pen, Matrix& theta,
                          const GlassoOptions& opt,
                          std::vector<double>& history) {
  const int p = static_cast<int>(a.rows());
  const VechIndexer idx(p);
  const double l1 = pen.l1_scale(), l2 = pen.l2_scale();
  const bool pd = pen.penalize_diagonal;

  std::vector<int> active;
  std::vector<char> in_active(idx.dim(), 0);
  for (int k = 0; k < idx.dim(); ++k)
    if (idx.is_diagonal(k) || theta(idx.row(k), idx.col(k)) != 0.0) {
      active.push_back(k);
      in_active[k] = 1;
    }

  double f = penalized_objective(a, pen, theta);
  if (!std::isfinite(f))
    throw DecompositionError("glasso polish: iterate lost positive definiteness");

  for (int round = 0; round < 60; ++round) {
    // Newton iterations with the pattern fixed.
    for (int it = 0; it < 100; ++it) {
      Eigen::LLT<Matrix> llt(theta);
      if (llt.info() != Eigen::Success)
        throw DecompositionError("glasso polish: iterate lost positive definiteness");
      const Matrix sigma = llt.solve(Matrix::Identity(p, p));

      const int na = static_cast<int>(active.size());
      Vector grad(na);
      for (int t = 0; t < na; ++t) {
        const int k = active[t];
        const int i = idx.row(k), j = idx.col(k);
        double g = a(i, j) - sigma(i, j);
        if (i != j || pd) {
          const double v = theta(i, j);
          const double s = (i == j) ? 1.0 : (v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0));
          g += l1 * s + l2 * v;
        }
        grad[t] = idx.weight(k) * g;
      }
      if (grad.cwiseAbs().maxCoeff() <= 1e-10) break;

      Matrix hess = kron_sandwich_block(sigma, active, active, idx);
      for (int t = 0; t < na; ++t) {
        const int k = active[t];
        if (!idx.is_diagonal(k) || pd) hess(t, t) += l2 * idx.weight(k);
      }
      Eigen::LLT<Matrix> hllt(hess);
      if (hllt.info() != Eigen::Success)
        throw DecompositionError("glasso polish: Newton system not positive definite");
      const Vector step = hllt.solve(-grad);

      double scale = 1.0;
      bool accepted = false;
      for (int ls = 0; ls < 50; ++ls) {
        Matrix cand = theta;
        for (int t = 0; t < na; ++t) {
          const int k = active[t];
          cand(idx.row(k), idx.col(k)) += scale * step[t];
          cand(idx.col(k), idx.row(k)) = cand(idx.row(k), idx.col(k));
        }
        const double fc = penalized_objective(a, pen, cand);
        if (fc < f) {
          theta = std::move(cand);
          f = fc;
          history.push_back(f);
          accepted = true;
          break;
        }
        scale *= 0.5;
      }
      if (!accepted) break;  // at numerical floor

      // Active off-diagonals driven across zero leave the pattern.
      bool pattern_changed = false;
      std::vector<int> keep;
      keep.reserve(active.size());
      for (int t = 0; t < na; ++t) {
        const int k = active[t];
        const int i = idx.row(k), j = idx.col(k);
        if (i != j && theta(i, j) == 0.0) {
          in_active[k] = 0;
          pattern_changed = true;
        } else {
          keep.push_back(k);
        }
      }
      if (pattern_changed) active = std::move(keep);
    }

    // Check inactive stationarity bounds; grow the pattern on violations.
    Eigen::LLT<Matrix> llt(theta);
    if (llt.info() != Eigen::Success)
      throw DecompositionError("glasso polish: iterate lost positive definiteness");
    const Matrix sigma = llt.solve(Matrix::Identity(p, p));
    bool grew = false;
    for (int k = 0; k < idx.dim(); ++k) {
      if (in_active[k] || idx.is_diagonal(k)) continue;
      const int i = idx.row(k), j = idx.col(k);
      if (std::abs(sigma(i, j) - a(i, j)) > l1 * (1.0 + 1e-9)) {
        active.push_back(k);
        in_active[k] = 1;
        grew = true;
      }
    }
    if (!grew) return;
    std::sort(active.begin(), active.end());
  }
  throw ConvergenceError("glasso polish: active set did not settle");
}

}  // namespace detail

/// Penalized precision estimation by block coordinate descent on columns of
/// the working covariance, the classical inner-lasso scheme. The elastic-net
/// quadratic is folded into the inner soft-threshold denominators. A Newton
/// refinement on the selected pattern runs afterwards so stationarity holds
/// to kkt_tol; soft-thresholding leaves exact zeros off the pattern.
inline GlassoSolution solve_glasso(const Matrix& s, const PenaltySpec& pen,
                                   const Matrix& noise = Matrix(),
                                   const GlassoOptions& opt = GlassoOptions(),
                                   const Vector& omega_n = Vector()) {
  pen.validate();
  check_symmetric(s, "solve_glasso covariance", 1e-8);
  const int p = static_cast<int>(s.rows());
  const Matrix a = (noise.size() > 0) ? Matrix(s - noise) : s;
  if (noise.size() > 0) check_symmetric(a, "solve_glasso tilted covariance", 1e-8);

  const double l1 = pen.l1_scale(), l2 = pen.l2_scale();
  const bool pd = pen.penalize_diagonal;

  GlassoSolution sol;
  sol.noise = (noise.size() > 0) ? noise : Matrix::Zero(p, p);
  sol.omega_n = (omega_n.size() > 0) ? omega_n : Vector::Zero(vech_dim(p));
  sol.penalty = pen;

  // Initialize with the decoupled (diagonal) solution.
  Matrix theta = Matrix::Zero(p, p);
  Matrix w = a;
  for (int j = 0; j < p; ++j) {
    const double c = a(j, j) + (pd ? l1 : 0.0);
    double tjj;
    if (pd && l2 > 0.0) {
      tjj = (-c + std::sqrt(c * c + 4.0 * l2)) / (2.0 * l2);
    } else {
      if (c <= 0.0)
        throw DecompositionError(
            "solve_glasso: tilted covariance has a non-positive implied variance");
      tjj = 1.0 / c;
    }
    theta(j, j) = tjj;
    w(j, j) = a(j, j) + (pd ? l1 + l2 * tjj : 0.0);
  }

  double f = penalized_objective(a, pen, theta);
  sol.objective_history.push_back(f);

  Matrix w11(p - 1, p - 1);
  Vector a12(p - 1), beta(p - 1), gb(p - 1), w12(p - 1);
  std::vector<int> rest(p - 1);

  int sweep = 0;
  for (; sweep < opt.max_sweeps; ++sweep) {
    const Matrix theta_before = theta;
    const Matrix w_before = w;
    double max_change = 0.0;

    for (int col = 0; col < p; ++col) {
      for (int k = 0, t = 0; k < p; ++k)
        if (k != col) rest[t++] = k;

      for (int r = 0; r < p - 1; ++r) {
        a12[r] = a(rest[r], col);
        for (int c = 0; c < p - 1; ++c) w11(r, c) = w(rest[r], rest[c]);
      }
      double t22 = theta(col, col);
      for (int r = 0; r < p - 1; ++r) beta[r] = -theta(rest[r], col) / t22;

      // Inner coordinate descent on the column lasso with Gram
      // W11 + l2 * theta_jj I.
      const double ridge = l2 * t22;
      gb.noalias() = w11 * beta;
      if (ridge != 0.0) gb += ridge * beta;
      for (int inner = 0; inner < opt.max_inner; ++inner) {
        double delta = 0.0;
        for (int k = 0; k < p - 1; ++k) {
          const double denom = w11(k, k) + ridge;
          const double resid = a12[k] - (gb[k] - denom * beta[k]);
          double nb = 0.0;
          if (resid > l1)
            nb = (resid - l1) / denom;
          else if (resid < -l1)
            nb = (resid + l1) / denom;
          const double diff = nb - beta[k];
          if (diff != 0.0) {
            for (int r = 0; r < p - 1; ++r) gb[r] += diff * w11(r, k);
            if (ridge != 0.0) gb[k] += diff * ridge;
            beta[k] = nb;
            delta = std::max(delta, std::abs(diff));
          }
        }
        if (delta <= opt.inner_tol) break;
      }

      w12.noalias() = w11 * beta;

      // Diagonal update; PD loss shows up as a non-positive pivot here.
      double c = a(col, col) + (pd ? l1 : 0.0) - beta.dot(w12);
      if (pd && l2 > 0.0) {
        t22 = (-c + std::sqrt(c * c + 4.0 * l2)) / (2.0 * l2);
      } else {
        if (c <= 1e-12) {
          // Shrink the step once toward the previous column and retry.
          for (int r = 0; r < p - 1; ++r)
            beta[r] = 0.5 * (beta[r] - theta(rest[r], col) / theta(col, col));
          w12.noalias() = w11 * beta;
          c = a(col, col) + (pd ? l1 : 0.0) - beta.dot(w12);
          if (c <= 1e-12)
            throw DecompositionError(
                "solve_glasso: column update lost positive definiteness");
        }
        t22 = 1.0 / c;
      }

      for (int r = 0; r < p - 1; ++r) {
        w(rest[r], col) = w12[r];
        w(col, rest[r]) = w12[r];
        const double tij = -beta[r] * t22;
        max_change = std::max(max_change, std::abs(tij - theta(rest[r], col)));
        theta(rest[r], col) = tij;
        theta(col, rest[r]) = tij;
      }
      w(col, col) = a(col, col) + (pd ? l1 + l2 * t22 : 0.0);
      max_change = std::max(max_change, std::abs(t22 - theta(col, col)));
      theta(col, col) = t22;
    }

    const double f_new = penalized_objective(a, pen, theta);
    if (f_new > f + 1e-10 * std::max(1.0, std::abs(f))) {
      // A non-descending sweep means coordinate descent is done improving;
      // roll back and let the Newton refinement finish.
      theta = theta_before;
      w = w_before;
      ++sweep;
      break;
    }
    f = f_new;
    sol.objective_history.push_back(f);

    const double scale = 1.0 + theta.cwiseAbs().maxCoeff();
    if (max_change / scale < opt.rel_tol) {
      ++sweep;
      break;
    }
  }
  sol.iterations = sweep;

  if (opt.polish) detail::glasso_polish(a, pen, theta, opt, sol.objective_history);

  Eigen::LLT<Matrix> llt(theta);
  if (llt.info() != Eigen::Success)
    throw DecompositionError("solve_glasso: final iterate not positive definite");
  sol.sigma_hat = llt.solve(Matrix::Identity(p, p));
  sol.sigma_hat = symmetrize(sol.sigma_hat);
  sol.theta_hat = std::move(theta);
  sol.kkt_residual =
      detail::glasso_kkt_residual(a, pen, sol.theta_hat, sol.sigma_hat);
  sol.converged = sol.kkt_residual <= opt.kkt_tol;
  if (!sol.converged)
    throw ConvergenceError("solve_glasso: stationarity residual " +
                               std::to_string(sol.kkt_residual) +
                               " above tolerance after " +
                               std::to_string(sol.iterations) + " sweeps",
                           sol.kkt_residual);
  return sol;
}

}  // namespace graphinf

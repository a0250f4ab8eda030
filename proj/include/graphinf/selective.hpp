#pragma once

#include <Eigen/Dense>
#include <Eigen/LU>
#include <cmath>
#include <utility>

#include "graphinf/errors.hpp"
#include "graphinf/matcalc.hpp"
#include "graphinf/refit.hpp"
#include "graphinf/selection.hpp"

namespace graphinf {

/// Parameters of the conditional analysis. The first block is the affine
/// reconstruction of the scaled noise draw from the refit and the event:
///
///   noise(theta, b) = coef_refit * theta + coef_magnitude * b + offset,
///
/// with theta = sqrt(n) theta_bar_E and b = sqrt(n) B. The second block is
/// the two-factor normal form of the conditional law used for inference:
///
///   rho(sqrt(n) theta_bar; est_slope * sqrt(n) theta_star + est_offset, est_cov)
///     * rho(b; mag_slope * sqrt(n) theta_bar + mag_offset, mag_cov),
///
/// truncated to b strictly above barrier_origin in every coordinate.
struct SelectiveParams {
  Matrix coef_refit;      // d x |E|
  Matrix coef_magnitude;  // d x |E|
  Vector offset;          // d

  Matrix mag_cov;         // |E| x |E|, positive definite
  Matrix mag_slope;       // |E| x |E|
  Vector mag_offset;      // |E|
  Matrix est_cov;         // |E| x |E|, positive definite
  Matrix est_slope;       // |E| x |E|, invertible
  Vector est_offset;      // |E|

  double barrier_origin = 0.0;
  double sqrt_n = 0.0;
  double gamma = 1.0;
  double est_slope_cond = 0.0;  // rough condition estimate, diagnostics
};

/// Assemble the reconstruction coefficients from the refit state and the
/// selection event. With gamma = 1 this is exactly the l1 map; for gamma < 1
/// the magnitude coefficient picks up the diagonal quadratic correction and
/// the subgradient part of the offset is scaled by gamma.
inline SelectiveParams randomization_map(const RefitState& refit,
                                         const SelectionEvent& ev,
                                         const PenaltySpec& pen) {
  const ActiveSet& e = refit.active;
  const VechIndexer idx(e.p);
  const int ne = e.size();
  const double sqrt_n = std::sqrt(static_cast<double>(refit.n));

  SelectiveParams par;
  par.sqrt_n = sqrt_n;
  par.gamma = pen.gamma;

  if (refit.h_fallback) {
    par.coef_refit = -refit.h_cols;
  } else {
    Eigen::LLT<Matrix> jll(refit.j_ee);
    if (jll.info() != Eigen::Success)
      throw ConditioningError("randomization_map: J_EE is numerically singular");
    par.coef_refit = -refit.j_cols * jll.solve(refit.h_ee);
  }

  par.coef_magnitude = refit.h_cols;
  const double ridge = 0.5 * pen.l2_scale();
  if (ridge != 0.0)
    for (int t = 0; t < ne; ++t) {
      const int k = e.active[t];
      if (!idx.is_diagonal(k) || pen.penalize_diagonal)
        par.coef_magnitude(k, t) += ridge * idx.weight(k);
    }
  for (int t = 0; t < ne; ++t) par.coef_magnitude.col(t) *= ev.signs[t];

  // offset = sqrt(n) * (gamma-scaled penalty half-gradient + nuisance);
  // an unpenalized diagonal contributes no penalty gradient.
  const double l1 = pen.l1_scale();
  par.offset = Vector::Zero(idx.dim());
  for (int k = 0; k < idx.dim(); ++k) {
    if (idx.is_diagonal(k))
      par.offset[k] = pen.penalize_diagonal ? 0.5 * l1 * ev.subgrad_full[k] : 0.0;
    else
      par.offset[k] = l1 * ev.subgrad_full[k];
  }
  for (int t = 0; t < e.size_complement(); ++t)
    par.offset[e.inactive[t]] += refit.theta_perp[t];
  par.offset *= sqrt_n;
  return par;
}

/// The reconstructed noise at given scaled refit / magnitude coordinates.
inline Vector reconstruct_noise(const SelectiveParams& par,
                                const Vector& theta_scaled,
                                const Vector& b_scaled) {
  return par.coef_refit * theta_scaled + par.coef_magnitude * b_scaled +
         par.offset;
}

/// Complete the two-factor normal form given the noise covariance. Starting
/// from the reconstruction blocks C1 = coef_refit, C2 = coef_magnitude,
/// f = offset and the sandwich covariance of the refit:
///   mag_cov   = (C2' Om^-1 C2)^-1
///   mag_slope = -mag_cov C2' Om^-1 C1,   mag_offset = -mag_cov C2' Om^-1 f
///   est_cov   = (sandwich^-1 - mag_slope' mag_cov^-1 mag_slope
///                + C1' Om^-1 C1)^-1
///   est_slope = est_cov sandwich^-1
///   est_offset= est_cov (mag_slope' mag_cov^-1 mag_offset - C1' Om^-1 f).
inline SelectiveParams likelihood_params(SelectiveParams par,
                                         const RefitState& refit,
                                         const RandomizationCov& omega) {
  const int ne = refit.active.size();
  const Matrix oi_c2 = omega.solve(par.coef_magnitude);
  const Matrix gram2 = symmetrize(par.coef_magnitude.transpose() * oi_c2);
  Eigen::LLT<Matrix> g2ll(gram2);
  if (g2ll.info() != Eigen::Success)
    throw ConditioningError("likelihood_params: magnitude Gram is not positive definite");

  par.mag_cov = symmetrize(g2ll.solve(Matrix::Identity(ne, ne)));
  par.mag_slope = -g2ll.solve(oi_c2.transpose() * par.coef_refit);
  par.mag_offset = -g2ll.solve(oi_c2.transpose() * par.offset);

  Eigen::LLT<Matrix> sll(refit.sigma_e);
  if (sll.info() != Eigen::Success)
    throw ConditioningError("likelihood_params: sandwich covariance is not positive definite");
  const Matrix sigma_inv = symmetrize(sll.solve(Matrix::Identity(ne, ne)));

  const Matrix oi_c1 = omega.solve(par.coef_refit);
  const Matrix zinv = symmetrize(
      sigma_inv - par.mag_slope.transpose() * gram2 * par.mag_slope +
      par.coef_refit.transpose() * oi_c1);
  Eigen::LLT<Matrix> zll(zinv);
  if (zll.info() != Eigen::Success)
    throw ConditioningError(
        "likelihood_params: conditional covariance is indefinite (min eigenvalue " +
        std::to_string(min_eigenvalue(zinv)) + ")");
  par.est_cov = symmetrize(zll.solve(Matrix::Identity(ne, ne)));
  par.est_slope = zll.solve(sigma_inv);
  par.est_offset = zll.solve(par.mag_slope.transpose() * gram2 * par.mag_offset -
                             par.coef_refit.transpose() * (omega.solve(par.offset)));

  const Matrix slope_inv = refit.sigma_e * zinv;  // inverse of est_slope
  par.est_slope_cond = par.est_slope.norm() * slope_inv.norm();
  return par;
}

struct BarrierResult {
  Vector minimizer;   // strictly inside the constraint region
  double value = 0.0; // attained objective
  int iterations = 0;
  bool converged = false;
};

struct BarrierOptions {
  int max_iter = 200;
  double grad_tol = 1e-8;
  double origin = 0.0;  // constraint b_h > origin
};

/// Damped Newton minimization of
///   psi(b) = (b - target)' mag_cov^{-1} (b - target) / 2 - sum log(b_h - c),
/// the softened projection of the magnitude block onto its constraint set.
inline BarrierResult barrier_optimize(const Matrix& mag_cov, const Vector& target,
                                      const BarrierOptions& opt = BarrierOptions()) {
  const int k = static_cast<int>(target.size());
  const double c = opt.origin;
  Eigen::LLT<Matrix> dll(mag_cov);
  if (dll.info() != Eigen::Success)
    throw DecompositionError("barrier_optimize: covariance is not positive definite");

  BarrierResult res;
  if (k == 0) {  // nothing to optimize
    res.minimizer = Vector();
    res.converged = true;
    return res;
  }

  Vector b = target.cwiseMax(c + 1.0);
  auto psi = [&](const Vector& v) {
    if ((v.array() <= c).any()) return std::numeric_limits<double>::infinity();
    const Vector r = v - target;
    return 0.5 * r.dot(dll.solve(r)) - (v.array() - c).log().sum();
  };
  double f = psi(b);

  int it = 0;
  for (; it < opt.max_iter; ++it) {
    const Vector quad_grad = dll.solve(b - target);
    const Vector gap = (b.array() - c).matrix();
    const Vector grad = quad_grad - gap.cwiseInverse();
    if (grad.cwiseAbs().maxCoeff() <= opt.grad_tol) {
      res.converged = true;
      break;
    }
    Matrix hess = dll.solve(Matrix::Identity(k, k));
    hess.diagonal() += gap.cwiseAbs2().cwiseInverse();
    Eigen::LLT<Matrix> hll(symmetrize(hess));
    if (hll.info() != Eigen::Success)
      throw DecompositionError("barrier_optimize: Newton system not positive definite");
    const Vector step = hll.solve(-grad);
    const bool tiny =
        step.cwiseAbs().maxCoeff() <= 1e-7 * (1.0 + b.cwiseAbs().maxCoeff());

    double scale = 1.0;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      const Vector cand = b + scale * step;
      const double fc = psi(cand);
      if (fc < f || (tiny && std::isfinite(fc))) {
        b = cand;
        f = fc;
        accepted = true;
        break;
      }
      scale *= 0.5;
    }
    if (!accepted) {
      res.converged = grad.cwiseAbs().maxCoeff() <= 1e-5;
      break;
    }
  }
  if (!res.converged && it >= opt.max_iter)
    throw ConvergenceError("barrier_optimize: no convergence in " +
                           std::to_string(opt.max_iter) + " iterations");
  res.minimizer = b;
  res.value = f;
  res.iterations = it;
  return res;
}

/// Joint minimization of the two-block normalizer objective
///   (theta - mu)' est_cov^{-1} (theta - mu) / 2
///     + (b - mag_slope theta - mag_offset)' mag_cov^{-1} (...) / 2
///     + barrier(b),
/// with mu = est_slope * sqrt(n) theta_star + est_offset. Diagnostic path:
/// the estimation route uses the closed forms instead.
inline double selective_normalizer(const SelectiveParams& par,
                                   const Vector& theta_star_scaled,
                                   int max_iter = 400) {
  const int k = static_cast<int>(theta_star_scaled.size());
  const double c = par.barrier_origin;
  const Vector mu = par.est_slope * theta_star_scaled + par.est_offset;
  Eigen::LLT<Matrix> zll(par.est_cov), dll(par.mag_cov);
  if (zll.info() != Eigen::Success || dll.info() != Eigen::Success)
    throw DecompositionError("selective_normalizer: covariance factorization failed");

  Vector theta = mu;
  Vector b = (par.mag_slope * theta + par.mag_offset).cwiseMax(c + 1.0);
  auto value = [&](const Vector& th, const Vector& bb) {
    if ((bb.array() <= c).any()) return std::numeric_limits<double>::infinity();
    const Vector rz = th - mu;
    const Vector rd = bb - par.mag_slope * th - par.mag_offset;
    return 0.5 * rz.dot(zll.solve(rz)) + 0.5 * rd.dot(dll.solve(rd)) -
           (bb.array() - c).log().sum();
  };
  double f = value(theta, b);

  const Matrix zinv = zll.solve(Matrix::Identity(k, k));
  const Matrix dinv = dll.solve(Matrix::Identity(k, k));
  const Matrix dinv_p = dinv * par.mag_slope;

  for (int it = 0; it < max_iter; ++it) {
    const Vector rd = b - par.mag_slope * theta - par.mag_offset;
    const Vector gap = (b.array() - c).matrix();
    Vector grad(2 * k);
    grad.head(k) = zinv * (theta - mu) - dinv_p.transpose() * rd;
    grad.tail(k) = dinv * rd - gap.cwiseInverse();
    if (grad.cwiseAbs().maxCoeff() <= 1e-10) break;

    Matrix hess(2 * k, 2 * k);
    hess.topLeftCorner(k, k) = zinv + par.mag_slope.transpose() * dinv_p;
    hess.topRightCorner(k, k) = -dinv_p.transpose();
    hess.bottomLeftCorner(k, k) = -dinv_p;
    hess.bottomRightCorner(k, k) = dinv;
    hess.bottomRightCorner(k, k).diagonal() += gap.cwiseAbs2().cwiseInverse();
    Eigen::LLT<Matrix> hll(symmetrize(hess));
    if (hll.info() != Eigen::Success)
      throw DecompositionError("selective_normalizer: Newton system failed");
    const Vector step = hll.solve(-grad);

    double scale = 1.0;
    bool accepted = false;
    const bool tiny = step.cwiseAbs().maxCoeff() <=
                      1e-7 * (1.0 + std::max(theta.cwiseAbs().maxCoeff(),
                                              b.cwiseAbs().maxCoeff()));
    for (int ls = 0; ls < 60; ++ls) {
      const Vector th_c = theta + scale * step.head(k);
      const Vector b_c = b + scale * step.tail(k);
      const double fc = value(th_c, b_c);
      if (fc < f || (tiny && std::isfinite(fc))) {
        theta = th_c;
        b = b_c;
        f = fc;
        accepted = true;
        break;
      }
      scale *= 0.5;
    }
    if (!accepted) break;
  }
  return f;
}

/// Computed conditional log-likelihood at theta_star (up to a constant):
/// the normal log density of the observed scaled refit plus the optimized
/// normalizer correction.
inline double selective_loglik(const SelectiveParams& par, const Vector& theta_bar_e,
                               const Vector& theta_star) {
  const Vector obs = par.sqrt_n * theta_bar_e;
  const Vector mu = par.est_slope * (par.sqrt_n * theta_star) + par.est_offset;
  GaussianSpec law(mu, par.est_cov);
  return mvn_logdensity(obs, law) +
         selective_normalizer(par, par.sqrt_n * theta_star);
}

struct SelectiveEstimate {
  Vector theta_tilde;  // conditional MLE of the active coordinates
  Matrix fisher_inv;   // asymptotic covariance of sqrt(n)(theta_tilde - target)
  Vector b_hat;        // optimized magnitudes, sqrt(n) B scale
  bool barrier_converged = false;
  double loglik_at_mle = 0.0;
};

struct SelectiveMleOptions {
  bool with_loglik = true;  // evaluate the log likelihood at the estimate
};

/// Closed-form conditional MLE and observed Fisher information. Only the
/// magnitude block needs numerical work (the barrier solve at the observed
/// refit); the estimate and information then follow by linear algebra:
///   sqrt(n) theta_tilde = est_slope^{-1} [sqrt(n) theta_bar
///       + est_cov mag_slope' mag_cov^{-1} (target - b_hat) - est_offset]
/// with target = mag_slope sqrt(n) theta_bar + mag_offset.
inline SelectiveEstimate selective_mle(const SelectiveParams& par,
                                       const Vector& theta_bar_e,
                                       const SelectiveMleOptions& opt = SelectiveMleOptions()) {
  const int ne = static_cast<int>(theta_bar_e.size());
  const Vector obs = par.sqrt_n * theta_bar_e;
  const Vector target = par.mag_slope * obs + par.mag_offset;

  BarrierOptions bo;
  bo.origin = par.barrier_origin;
  BarrierResult bar = barrier_optimize(par.mag_cov, target, bo);

  Eigen::PartialPivLU<Matrix> lu(par.est_slope);
  {
    Eigen::FullPivLU<Matrix> check(par.est_slope);
    check.setThreshold(1e-12);
    if (check.rank() < ne)
      throw ConditioningError("selective_mle: estimate slope matrix is singular");
  }

  Eigen::LLT<Matrix> dll(par.mag_cov);
  const Vector pull =
      par.est_cov * (par.mag_slope.transpose() * dll.solve(target - bar.minimizer));
  const Vector scaled = lu.solve(obs + pull - par.est_offset);

  SelectiveEstimate est;
  est.theta_tilde = scaled / par.sqrt_n;
  est.b_hat = bar.minimizer;
  est.barrier_converged = bar.converged;

  // Observed information: curvature of the profiled objective at the MLE.
  const Matrix w1 = lu.solve(par.est_cov);                 // slope^{-1} est_cov
  const Matrix dinv_p = dll.solve(par.mag_slope);          // mag_cov^{-1} mag_slope
  Matrix curv = dll.solve(Matrix::Identity(ne, ne));
  const Vector gap = (bar.minimizer.array() - par.barrier_origin).matrix();
  curv.diagonal() += gap.cwiseAbs2().cwiseInverse();
  Eigen::LLT<Matrix> cll(symmetrize(curv));
  const Matrix inner = dinv_p.transpose() * (par.mag_slope - cll.solve(dinv_p));
  est.fisher_inv =
      symmetrize(lu.solve(w1.transpose()) + w1 * symmetrize(inner) * w1.transpose());

  Eigen::LLT<Matrix> fll(est.fisher_inv);
  if (fll.info() != Eigen::Success)
    throw ConditioningError("selective_mle: observed information is not positive definite");

  if (opt.with_loglik)
    est.loglik_at_mle = selective_loglik(par, theta_bar_e, est.theta_tilde);
  return est;
}

}  // namespace graphinf

#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "graphinf/selective.hpp"
#include "helpers.hpp"

using namespace graphinf;

namespace {

struct PipelineOut {
  GlassoSolution sol;
  SelectionEvent ev;
  RefitState refit;
  SelectiveParams par;
  Matrix s;
  RandomizationCov omega;
};

Matrix chain_precision(int p, double w) {
  Matrix theta = Matrix::Identity(p, p);
  for (int j = 0; j + 1 < p; ++j) {
    theta(j + 1, j) = w;
    theta(j, j + 1) = w;
  }
  return theta;
}

PipelineOut run_pipeline(const Matrix& theta_true, int n, double sd,
                         const PenaltySpec& pen, RngStream rng,
                         bool with_params = true) {
  const int p = static_cast<int>(theta_true.rows());
  Matrix sigma_true = theta_true.inverse();
  GaussianSpec law(Vector::Zero(p), symmetrize(sigma_true));
  Matrix x = mvn_sample(law, rng, n);
  Matrix s = sample_covariance(x);
  auto omega = RandomizationCov::isotropic(p, sd);
  auto rand = make_randomization(omega, n, rng);
  PipelineOut out{solve_glasso(s, pen, rand.w, GlassoOptions(), rand.omega_n),
                  {}, {}, {}, s, omega};
  out.ev = extract_event(out.sol, s, pen);
  RefitOptions ro;
  ro.with_sigma_perp = false;
  Matrix theta_bar = constrained_mle(s, out.ev.active, out.sol.theta_hat, ro);
  out.refit = build_refit_state(s, x, out.ev.active, theta_bar, ro);
  out.par = randomization_map(out.refit, out.ev, pen);
  if (with_params) out.par = likelihood_params(out.par, out.refit, omega);
  return out;
}

double reconstruction_error(const PipelineOut& out) {
  const double sqrt_n = out.par.sqrt_n;
  const Vector omega_draw = sqrt_n * out.sol.omega_n;
  const Vector rebuilt = reconstruct_noise(
      out.par, sqrt_n * out.refit.theta_e(), sqrt_n * out.ev.magnitudes);
  return (rebuilt - omega_draw).norm() / omega_draw.norm();
}

}  // namespace

// Median reconstruction error over independent instances at sample size n.
// The sparse-truth fixture keeps the second-order remainder of the map small;
// at the default penalty level the same statistic sits near 0.1 at n = 1000
// (it is the lasso-vs-refit gap, of order log(p)/sqrt(n), that dominates).
static double median_reconstruction_error(int n, int p, int seed0, int reps,
                                          double sd, double lambda_mult,
                                          bool penalize_diag, double edge_w) {
  Matrix theta_true = Matrix::Identity(p, p);
  if (edge_w != 0.0) {
    theta_true(0, 1) = theta_true(1, 0) = edge_w;
    theta_true(4, 5) = theta_true(5, 4) = -edge_w;
  }
  PenaltySpec pen(lambda_mult * universal_lambda(p, n), 1.0, penalize_diag);
  RngStream rng(1001);
  std::vector<double> errs;
  for (int r = 0; r < reps; ++r) {
    auto out = run_pipeline(theta_true, n, sd, pen, rng.child(seed0 + r), false);
    errs.push_back(reconstruction_error(out));
  }
  std::sort(errs.begin(), errs.end());
  return errs[errs.size() / 2];
}

TEST_CASE("noise reconstruction error is small and shrinks with n") {
  SECTION("median error within bound at n=1000, p=10") {
    const double med =
        median_reconstruction_error(1000, 10, 0, 15, 0.35, 1.4, false, 0.0);
    CHECK(med <= 0.05);
  }

  SECTION("median error decreases in n") {
    const double m250 =
        median_reconstruction_error(250, 10, 100, 9, 0.35, 1.4, false, 0.0);
    const double m1000 =
        median_reconstruction_error(1000, 10, 200, 9, 0.35, 1.4, false, 0.0);
    const double m4000 =
        median_reconstruction_error(4000, 10, 300, 9, 0.35, 1.4, false, 0.0);
    CHECK(m1000 < m250);
    CHECK(m4000 < m1000);
  }

  SECTION("default-penalty fixture decreases in n as well") {
    const double m250 =
        median_reconstruction_error(250, 10, 400, 9, 1.0, 1.0, true, 0.4);
    const double m1000 =
        median_reconstruction_error(1000, 10, 500, 9, 1.0, 1.0, true, 0.4);
    CHECK(m1000 < m250);
    CHECK(m1000 < 0.3);
  }
}

TEST_CASE("gamma=1 map equals the l1 map bitwise") {
  Matrix theta_true = chain_precision(5, 0.35);
  RngStream rng(77);
  for (int r = 0; r < 20; ++r) {
    auto lasso = run_pipeline(theta_true, 400, 1.0,
                              PenaltySpec(universal_lambda(5, 400)), rng.child(r));
    auto elastic = run_pipeline(theta_true, 400, 1.0,
                                PenaltySpec(universal_lambda(5, 400), 1.0),
                                rng.child(r));
    CHECK((lasso.par.coef_refit - elastic.par.coef_refit).cwiseAbs().maxCoeff() == 0.0);
    CHECK((lasso.par.coef_magnitude - elastic.par.coef_magnitude).cwiseAbs().maxCoeff() == 0.0);
    CHECK((lasso.par.offset - elastic.par.offset).cwiseAbs().maxCoeff() == 0.0);
    CHECK((lasso.par.est_cov - elastic.par.est_cov).cwiseAbs().maxCoeff() == 0.0);
    CHECK((lasso.par.est_offset - elastic.par.est_offset).cwiseAbs().maxCoeff() == 0.0);
    CHECK((lasso.par.mag_slope - elastic.par.mag_slope).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("offset carries the signed penalty gradient on active coordinates") {
  Matrix theta_true = chain_precision(3, 0.45);
  PenaltySpec pen(universal_lambda(3, 800));
  auto out = run_pipeline(theta_true, 800, 1.0, pen, RngStream(5), false);
  const VechIndexer idx(3);
  const double sqrt_n = out.par.sqrt_n;
  for (int t = 0; t < out.ev.active.size(); ++t) {
    const int k = out.ev.active.active[t];
    const double expected = sqrt_n * pen.lambda * out.ev.signs[t] *
                            (idx.is_diagonal(k) ? 0.5 : 1.0);
    CHECK(out.par.offset[k] == Catch::Approx(expected).margin(1e-12));
  }
}

TEST_CASE("likelihood parameters collapse when the refit coefficient vanishes") {
  Matrix theta_true = chain_precision(3, 0.4);
  PenaltySpec pen(universal_lambda(3, 500));
  auto out = run_pipeline(theta_true, 500, 1.0, pen, RngStream(21), false);

  SelectiveParams par = out.par;
  par.coef_refit.setZero();
  par = likelihood_params(par, out.refit, out.omega);
  const int ne = out.refit.active.size();
  CHECK(par.mag_slope.cwiseAbs().maxCoeff() < 1e-12);
  CHECK((par.est_cov - out.refit.sigma_e).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((par.est_slope - Matrix::Identity(ne, ne)).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(par.est_offset.cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("likelihood parameters match explicit-inverse formulas") {
  Matrix theta_true = chain_precision(3, 0.4);
  PenaltySpec pen(universal_lambda(3, 600));
  auto out = run_pipeline(theta_true, 600, 0.8, pen, RngStream(33));

  const Matrix om = out.omega.matrix();
  const Matrix om_inv = om.inverse();
  const Matrix& c1 = out.par.coef_refit;
  const Matrix& c2 = out.par.coef_magnitude;
  const Vector& f = out.par.offset;

  const Matrix delta = (c2.transpose() * om_inv * c2).inverse();
  const Matrix pmat = -delta * c2.transpose() * om_inv * c1;
  const Vector q = -delta * c2.transpose() * om_inv * f;
  const Matrix sig_inv = out.refit.sigma_e.inverse();
  const Matrix z =
      (sig_inv - pmat.transpose() * delta.inverse() * pmat +
       c1.transpose() * om_inv * c1).inverse();
  const Matrix l = z * sig_inv;
  const Vector m =
      z * (pmat.transpose() * delta.inverse() * q - c1.transpose() * om_inv * f);

  CHECK((out.par.mag_cov - delta).cwiseAbs().maxCoeff() < 1e-9);
  CHECK((out.par.mag_slope - pmat).cwiseAbs().maxCoeff() < 1e-9);
  CHECK((out.par.mag_offset - q).cwiseAbs().maxCoeff() < 1e-9);
  CHECK((out.par.est_cov - z).cwiseAbs().maxCoeff() < 1e-9);
  CHECK((out.par.est_slope - l).cwiseAbs().maxCoeff() < 1e-9);
  CHECK((out.par.est_offset - m).cwiseAbs().maxCoeff() < 1e-9);
  CHECK(min_eigenvalue(out.par.mag_cov) > 0.0);
  CHECK(min_eigenvalue(out.par.est_cov) > 0.0);
}

TEST_CASE("two-factor form agrees with the joint density on a grid") {
  // log rho(a; sqrt(n) t*, sandwich) + log rho(noise(a, b); 0, Omega)
  //   - log rho(a; slope sqrt(n) t* + off, est_cov) - log rho(b; P a + q, mag_cov)
  // must not depend on (a, b).
  Matrix theta_true = chain_precision(2, 0.5);
  PenaltySpec pen(universal_lambda(2, 700));
  auto out = run_pipeline(theta_true, 700, 1.0, pen, RngStream(55));
  const int ne = out.refit.active.size();
  REQUIRE(ne == 3);

  const Vector tstar = 0.9 * out.refit.theta_e();
  const Vector mu1 = out.par.sqrt_n * tstar;
  GaussianSpec pre(mu1, out.refit.sigma_e);
  GaussianSpec noise_law(Vector::Zero(out.omega.dim()), out.omega.matrix());
  GaussianSpec cond(out.par.est_slope * mu1 + out.par.est_offset, out.par.est_cov);

  RngStream rng(3);
  double ref = std::numeric_limits<double>::quiet_NaN();
  for (int g = 0; g < 24; ++g) {
    Vector a = mu1;
    Vector b = out.par.sqrt_n * out.ev.magnitudes;
    for (int i = 0; i < ne; ++i) {
      a[i] += 0.8 * rng.normal();
      b[i] += 0.8 * rng.normal();
    }
    const double lhs = mvn_logdensity(a, pre) +
                       mvn_logdensity(reconstruct_noise(out.par, a, b), noise_law);
    GaussianSpec mag_law(out.par.mag_slope * a + out.par.mag_offset, out.par.mag_cov);
    const double rhs = mvn_logdensity(a, cond) + mvn_logdensity(b, mag_law);
    const double diff = lhs - rhs;
    if (std::isnan(ref)) ref = diff;
    CHECK(diff == Catch::Approx(ref).margin(1e-8));
  }
}

TEST_CASE("barrier solver closed forms") {
  SECTION("scalar root at target 10") {
    Matrix delta = Matrix::Identity(3, 3);
    Vector target = Vector::Constant(3, 10.0);
    auto res = barrier_optimize(delta, target);
    REQUIRE(res.converged);
    for (int i = 0; i < 3; ++i)
      CHECK(res.minimizer[i] == Catch::Approx(10.0990195135927845).epsilon(1e-10));
  }

  SECTION("deep interior target recovers the unconstrained projection") {
    Matrix delta = 2.0 * Matrix::Identity(2, 2);
    Vector target = Vector::Constant(2, 1e3);
    auto res = barrier_optimize(delta, target);
    CHECK(std::abs(res.minimizer[0] - 1e3) / 1e3 < 1e-5);
  }

  SECTION("minimizer stays strictly inside the region") {
    Matrix delta = Matrix::Identity(2, 2);
    Vector target = Vector::Constant(2, -4.0);
    auto res = barrier_optimize(delta, target);
    REQUIRE(res.converged);
    CHECK(res.minimizer.minCoeff() > 0.0);
  }
}

TEST_CASE("normalizer tracks the truncated-normal quadrature in 1d") {
  // Scalar two-factor model with the truncation cutting deep.
  for (double shift : {-1.5, -2.5, -3.5}) {
    SelectiveParams par;
    par.est_cov = Matrix::Identity(1, 1);
    par.est_slope = Matrix::Identity(1, 1);
    par.est_offset = Vector::Zero(1);
    par.mag_cov = Matrix::Identity(1, 1);
    par.mag_slope = Matrix::Constant(1, 1, 0.3);
    par.mag_offset = Vector::Constant(1, shift);
    par.sqrt_n = 1.0;

    // log integral of rho(theta; 0, 1) * Phi(0.3 theta + shift) d theta.
    const int grid = 20001;
    const double lo = -12.0, hi = 12.0, h = (hi - lo) / (grid - 1);
    double acc = 0.0;
    for (int i = 0; i < grid; ++i) {
      const double th = lo + i * h;
      const double phi = std::exp(-0.5 * th * th) / std::sqrt(2.0 * M_PI);
      const double cdf = 0.5 * std::erfc(-(0.3 * th + shift) / std::sqrt(2.0));
      const double w = (i == 0 || i + 1 == grid) ? 0.5 : 1.0;
      acc += w * phi * cdf;
    }
    const double log_quadrature = std::log(acc * h);
    const double log_laplace = -selective_normalizer(par, Vector::Zero(1));
    CHECK(std::abs(log_laplace - log_quadrature) / std::abs(log_quadrature) <
          0.10);
  }
}

TEST_CASE("selective mle closed form and optimality") {
  Matrix theta_true = chain_precision(2, 0.5);
  PenaltySpec pen(universal_lambda(2, 900));
  auto out = run_pipeline(theta_true, 900, 1.0, pen, RngStream(59));
  const int ne = out.refit.active.size();
  REQUIRE(ne == 3);

  const Vector theta_bar = out.refit.theta_e();
  auto est = selective_mle(out.par, theta_bar);
  REQUIRE(est.barrier_converged);
  CHECK(est.b_hat.minCoeff() > 0.0);
  CHECK(min_eigenvalue(est.fisher_inv) > 0.0);

  SECTION("shrinkage identity holds exactly") {
    Eigen::PartialPivLU<Matrix> lu(out.par.est_slope);
    const Vector target =
        out.par.mag_slope * (out.par.sqrt_n * theta_bar) + out.par.mag_offset;
    const Vector lhs = out.par.sqrt_n * est.theta_tilde -
                       lu.solve(out.par.sqrt_n * theta_bar - out.par.est_offset);
    const Vector rhs = lu.solve(out.par.est_cov * (out.par.mag_slope.transpose() *
                                out.par.mag_cov.inverse() * (target - est.b_hat)));
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-9);
  }

  SECTION("numerical argmax of the computed log likelihood") {
    auto neg_loglik = [&](const Vector& v) {
      return -selective_loglik(out.par, theta_bar, v);
    };
    Vector argmax = testutil::cyclic_golden_min(neg_loglik, theta_bar, 60, 0.5, 1e-10);
    for (int i = 0; i < ne; ++i)
      CHECK(std::abs(argmax[i] - est.theta_tilde[i]) /
                std::max(1e-3, std::abs(est.theta_tilde[i])) <
            1e-3);
  }

  SECTION("fisher inverse matches the finite-difference Hessian") {
    const double h = 2e-3;
    auto ll = [&](const Vector& v_scaled) {
      return selective_loglik(out.par, theta_bar, v_scaled / out.par.sqrt_n);
    };
    const Vector center = out.par.sqrt_n * est.theta_tilde;
    Matrix fd(ne, ne);
    for (int a = 0; a < ne; ++a)
      for (int b = 0; b < ne; ++b) {
        Vector pp = center, pm = center, mp = center, mm = center;
        pp[a] += h; pp[b] += h;
        pm[a] += h; pm[b] -= h;
        mp[a] -= h; mp[b] += h;
        mm[a] -= h; mm[b] -= h;
        fd(a, b) = (ll(pp) - ll(pm) - ll(mp) + ll(mm)) / (4 * h * h);
      }
    const Matrix fd_inv = (-fd).inverse();
    for (int a = 0; a < ne; ++a)
      for (int b = 0; b < ne; ++b) {
        const double denom = std::max(std::abs(fd_inv(a, b)),
                                      5e-3 * fd_inv.cwiseAbs().maxCoeff());
        CHECK(std::abs(est.fisher_inv(a, b) - fd_inv(a, b)) / denom < 0.02);
      }
  }
}

TEST_CASE("uninformative magnitude block collapses the mle") {
  Matrix theta_true = chain_precision(3, 0.4);
  PenaltySpec pen(universal_lambda(3, 500));
  auto out = run_pipeline(theta_true, 500, 1.0, pen, RngStream(91));

  SelectiveParams par = out.par;
  par.mag_slope.setZero();
  const Vector theta_bar = out.refit.theta_e();
  auto est = selective_mle(par, theta_bar, SelectiveMleOptions{false});

  Eigen::PartialPivLU<Matrix> lu(par.est_slope);
  const Vector expected =
      lu.solve(par.sqrt_n * theta_bar - par.est_offset) / par.sqrt_n;
  CHECK((est.theta_tilde - expected).cwiseAbs().maxCoeff() < 1e-10);
  const Matrix expected_fisher =
      lu.solve(Matrix(lu.solve(par.est_cov).transpose()));
  CHECK((est.fisher_inv - expected_fisher).cwiseAbs().maxCoeff() < 1e-9);
}

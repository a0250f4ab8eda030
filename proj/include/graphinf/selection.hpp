#pragma once

#include <Eigen/Dense>
#include <cmath>

#include "graphinf/errors.hpp"
#include "graphinf/matcalc.hpp"
#include "graphinf/refit.hpp"
#include "graphinf/solver.hpp"

namespace graphinf {

/// The conditioning event of a converged penalized solve: the selected
/// pattern E with signs S and magnitudes B of the active coordinates, and
/// the inactive penalty subgradients U recovered from stationarity. The
/// event conditioned on downstream is {S = s, U = u, sqrt(n) B > 0}.
struct SelectionEvent {
  ActiveSet active;
  Vector signs;             // |E|, entries in {-1, +1}; +1 on the diagonal
  Vector magnitudes;        // |E|, strictly positive
  Vector subgrad_inactive;  // |E'|, inside [-1, 1] up to the box tolerance
  Vector subgrad_full;      // d: signs on E, subgradients on E'
};

struct EventOptions {
  double box_tol = 1e-4;  // acceptance slack on |U| <= 1
};

/// Read the event off a converged solution. U is recovered by inverting the
/// stationarity identity rather than taken from solver state, so externally
/// produced solutions can be ingested: in vech coordinates, for an inactive
/// off-diagonal position,
///   u_j = (omega_n_j - score_j) / (gamma * lambda),
/// with score = half_vec_adjoint(S_n - sigma_hat). A recovered |u| outside
/// the unit box by more than box_tol means the solve was too loose.
inline SelectionEvent extract_event(const GlassoSolution& sol, const Matrix& s_n,
                                    const PenaltySpec& pen,
                                    const EventOptions& opt = EventOptions()) {
  if (pen.gamma <= 0.0)
    throw ConfigError("extract_event: a pure quadratic penalty has no selection event");
  const int p = static_cast<int>(sol.theta_hat.rows());
  const VechIndexer idx(p);

  SelectionEvent ev;
  ev.active = extract_active_set(sol, 0.0);

  const Vector theta = vech(sol.theta_hat);
  ev.signs.resize(ev.active.size());
  ev.magnitudes.resize(ev.active.size());
  for (int t = 0; t < ev.active.size(); ++t) {
    const int k = ev.active.active[t];
    const double v = theta[k];
    if (idx.is_diagonal(k)) {
      if (v <= 0.0)
        throw KktViolationError("extract_event: non-positive diagonal in the solution");
      ev.signs[t] = 1.0;
    } else {
      ev.signs[t] = v > 0.0 ? 1.0 : -1.0;
    }
    ev.magnitudes[t] = std::abs(v);
  }

  const Vector score = half_vec_adjoint(s_n - sol.sigma_hat);
  const double l1 = pen.l1_scale();
  ev.subgrad_inactive.resize(ev.active.size_complement());
  ev.subgrad_full.resize(idx.dim());
  for (int t = 0; t < ev.active.size(); ++t)
    ev.subgrad_full[ev.active.active[t]] = ev.signs[t];
  for (int t = 0; t < ev.active.size_complement(); ++t) {
    const int k = ev.active.inactive[t];
    const double u = (sol.omega_n[k] - score[k]) / l1;
    if (std::abs(u) > 1.0 + opt.box_tol)
      throw KktViolationError("extract_event: recovered subgradient " +
                              std::to_string(u) +
                              " outside the unit box; solver tolerance too loose");
    ev.subgrad_inactive[t] = u;
    ev.subgrad_full[k] = u;
  }
  return ev;
}

/// Stationarity residual of the solution/event pair in vech coordinates;
/// a diagnostic gate before conditional inference. Active positions measure
///   score_j - omega_n_j + penalty_gradient_j,
/// inactive positions measure how far the recovered subgradient leaves the
/// unit box (scaled back by gamma * lambda, so units match).
inline double kkt_residual(const SelectionEvent& ev, const GlassoSolution& sol,
                           const Matrix& s_n, const PenaltySpec& pen) {
  const int p = static_cast<int>(sol.theta_hat.rows());
  const VechIndexer idx(p);
  Eigen::LLT<Matrix> llt(sol.theta_hat);
  if (llt.info() != Eigen::Success)
    throw DecompositionError("kkt_residual: solution not positive definite");
  const Matrix sigma = llt.solve(Matrix::Identity(p, p));
  const Vector score = half_vec_adjoint(s_n - sigma);
  const Vector theta = vech(sol.theta_hat);
  const double l1 = pen.l1_scale(), l2 = pen.l2_scale();

  double worst = 0.0;
  for (int t = 0; t < ev.active.size(); ++t) {
    const int k = ev.active.active[t];
    double pen_grad = l1 * ev.signs[t] + l2 * theta[k];
    if (idx.is_diagonal(k)) pen_grad = pen.penalize_diagonal ? 0.5 * pen_grad : 0.0;
    worst = std::max(worst, std::abs(score[k] - sol.omega_n[k] + pen_grad));
  }
  for (int t = 0; t < ev.active.size_complement(); ++t) {
    const double excess = std::max(0.0, std::abs(ev.subgrad_inactive[t]) - 1.0);
    worst = std::max(worst, l1 * excess);
  }
  return worst;
}

}  // namespace graphinf

#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "graphinf/errors.hpp"
#include "graphinf/rng.hpp"

namespace graphinf {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Absolute tolerance under which inputs are accepted as symmetric.
inline constexpr double kSymmetryTol = 1e-10;

inline int vech_dim(int p) { return p * (p + 1) / 2; }

/// Half-vectorization index bookkeeping for symmetric p x p matrices.
///
/// Entries {A_ij : i >= j} are stored in lower-triangle column-major order:
/// column 0 rows 0..p-1, then column 1 rows 1..p-1, and so on. Every index
/// set over vech positions (active sets, in particular) is relative to this
/// fixed order.
class VechIndexer {
 public:
  explicit VechIndexer(int p) : p_(p), d_(vech_dim(p)) {
    if (p < 1) throw DimensionError("VechIndexer: node count must be >= 1");
    rows_.resize(d_);
    cols_.resize(d_);
    for (int j = 0, k = 0; j < p; ++j)
      for (int i = j; i < p; ++i, ++k) {
        rows_[k] = i;
        cols_[k] = j;
      }
  }

  int nodes() const { return p_; }
  int dim() const { return d_; }

  /// vech position of entry (i, j); order of the pair does not matter.
  int index(int i, int j) const {
    if (i < j) std::swap(i, j);
    return j * p_ - j * (j - 1) / 2 + (i - j);
  }

  int row(int k) const { return rows_[k]; }
  int col(int k) const { return cols_[k]; }
  bool is_diagonal(int k) const { return rows_[k] == cols_[k]; }

  /// Multiplicity of position k in the full matrix (1 diagonal, 2 otherwise).
  double weight(int k) const { return is_diagonal(k) ? 1.0 : 2.0; }

 private:
  int p_;
  int d_;
  std::vector<int> rows_;
  std::vector<int> cols_;
};

/// Recover the node count p from a vech length d = p(p+1)/2.
inline int nodes_from_vech_dim(Eigen::Index d) {
  const int p = static_cast<int>((std::sqrt(8.0 * static_cast<double>(d) + 1.0) - 1.0) / 2.0 + 0.5);
  if (p < 1 || vech_dim(p) != d)
    throw DimensionError("vector length is not a triangular number");
  return p;
}

inline void check_square(const Matrix& a, const char* what) {
  if (a.rows() != a.cols())
    throw DimensionError(std::string(what) + ": matrix is not square");
}

/// Largest absolute asymmetry max_ij |A_ij - A_ji|.
inline double asymmetry(const Matrix& a) {
  return (a - a.transpose()).cwiseAbs().maxCoeff();
}

inline void check_symmetric(const Matrix& a, const char* what,
                            double tol = kSymmetryTol) {
  check_square(a, what);
  const double s = asymmetry(a);
  if (s > tol)
    throw SymmetryError(std::string(what) + ": asymmetry " + std::to_string(s) +
                        " exceeds tolerance");
}

/// (A + A^T) / 2; absorbs solver round-off before half-vectorization.
inline Matrix symmetrize(const Matrix& a) {
  check_square(a, "symmetrize");
  return 0.5 * (a + a.transpose());
}

/// Half-vectorization of a symmetric matrix (see VechIndexer for the order).
inline Vector vech(const Matrix& a) {
  check_symmetric(a, "vech");
  const Matrix s = symmetrize(a);
  const int p = static_cast<int>(s.rows());
  Vector v(vech_dim(p));
  for (int j = 0, k = 0; j < p; ++j)
    for (int i = j; i < p; ++i, ++k) v[k] = s(i, j);
  return v;
}

/// Symmetric matrix with lower triangle filled from v.
inline Matrix unvech(const Vector& v) {
  const int p = nodes_from_vech_dim(v.size());
  Matrix a(p, p);
  for (int j = 0, k = 0; j < p; ++j)
    for (int i = j; i < p; ++i, ++k) {
      a(i, j) = v[k];
      a(j, i) = v[k];
    }
  return a;
}

/// Duplication matrix D_p (p^2 x d, entries 0/1): vec(A) = D_p vech(A) for
/// symmetric A. Dense; intended for small p and for test oracles. Hot paths
/// use vec_adjoint / half_vec_adjoint instead of materializing D_p.
inline Matrix duplication_matrix(int p) {
  if (p < 1) throw DimensionError("duplication_matrix: p must be >= 1");
  const VechIndexer idx(p);
  Matrix d = Matrix::Zero(static_cast<Eigen::Index>(p) * p, idx.dim());
  for (int j = 0; j < p; ++j)
    for (int i = 0; i < p; ++i)
      d(static_cast<Eigen::Index>(j) * p + i, idx.index(i, j)) = 1.0;
  return d;
}

/// D_p^T vec(M) without forming D_p: diagonal entries of M once,
/// symmetric off-diagonal pairs summed.
inline Vector vec_adjoint(const Matrix& m) {
  check_square(m, "vec_adjoint");
  const int p = static_cast<int>(m.rows());
  Vector v(vech_dim(p));
  for (int j = 0, k = 0; j < p; ++j) {
    v[k++] = m(j, j);
    for (int i = j + 1; i < p; ++i, ++k) v[k] = m(i, j) + m(j, i);
  }
  return v;
}

/// D_p^T vec(M) / 2; the scale in which per-observation score vectors and
/// the average loss gradient are expressed throughout the library.
inline Vector half_vec_adjoint(const Matrix& m) { return 0.5 * vec_adjoint(m); }

inline Matrix pick_rows(const Matrix& m, const std::vector<int>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(i) = m.row(rows[i]);
  return out;
}

inline Vector pick(const Vector& v, const std::vector<int>& idx) {
  Vector out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = v[idx[i]];
  return out;
}

/// Block of D_p^T (S kron S) D_p restricted to the given vech positions,
/// computed entrywise so the p^2 x p^2 Kronecker product is never formed.
/// For row position a = (i, j) and column position b = (k, l):
///   entry = w_a * (S_ik S_jl + S_il S_jk)   for k != l,
///   entry = w_a * (S_ik S_jk)               for k == l,
/// with w_a = 1 on the diagonal of the vech order and 2 otherwise.
inline Matrix kron_sandwich_block(const Matrix& s, const std::vector<int>& rows,
                                  const std::vector<int>& cols,
                                  const VechIndexer& idx) {
  Matrix out(rows.size(), cols.size());
  for (std::size_t b = 0; b < cols.size(); ++b) {
    const int k = idx.row(cols[b]);
    const int l = idx.col(cols[b]);
    for (std::size_t a = 0; a < rows.size(); ++a) {
      const int i = idx.row(rows[a]);
      const int j = idx.col(rows[a]);
      const double m = (k != l) ? s(i, k) * s(j, l) + s(i, l) * s(j, k)
                                : s(i, k) * s(j, k);
      out(a, b) = idx.weight(rows[a]) * m;
    }
  }
  return out;
}

/// Kronecker product, dense. Test oracles and small-p work only.
inline Matrix kronecker(const Matrix& a, const Matrix& b) {
  Matrix k(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      k.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return k;
}

inline bool is_positive_definite(const Matrix& a) {
  if (a.rows() != a.cols()) return false;
  if (asymmetry(a) > kSymmetryTol * std::max(1.0, a.cwiseAbs().maxCoeff()))
    return false;
  Eigen::LLT<Matrix> llt(symmetrize(a));
  return llt.info() == Eigen::Success;
}

/// Smallest eigenvalue; diagnostics only (factorization-based checks are
/// used on the hot paths).
inline double min_eigenvalue(const Matrix& a) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(a),
                                           Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

/// Mean and covariance of a multivariate normal law. The covariance must be
/// symmetric within 1e-10 and positive definite.
struct GaussianSpec {
  Vector mean;
  Matrix covariance;

  GaussianSpec(Vector mu, Matrix cov)
      : mean(std::move(mu)), covariance(std::move(cov)) {
    check_symmetric(covariance, "GaussianSpec covariance");
    if (mean.size() != covariance.rows())
      throw DimensionError("GaussianSpec: mean/covariance dimension mismatch");
    covariance = symmetrize(covariance);
    Eigen::LLT<Matrix> llt(covariance);
    if (llt.info() != Eigen::Success)
      throw DecompositionError("GaussianSpec: covariance is not positive definite");
  }

  Eigen::Index dim() const { return mean.size(); }
};

/// Exact log density of N(mean, covariance) at x.
inline double mvn_logdensity(const Vector& x, const GaussianSpec& spec) {
  if (x.size() != spec.dim())
    throw DimensionError("mvn_logdensity: point dimension mismatch");
  Eigen::LLT<Matrix> llt(spec.covariance);
  if (llt.info() != Eigen::Success)
    throw DecompositionError("mvn_logdensity: covariance decomposition failed");
  const Matrix& l = llt.matrixLLT();
  double log_det = 0.0;
  for (Eigen::Index i = 0; i < l.rows(); ++i) log_det += 2.0 * std::log(l(i, i));
  const Vector z = llt.matrixL().solve(x - spec.mean);
  constexpr double kLog2Pi = 1.8378770664093454835606594728112;
  return -0.5 * (static_cast<double>(x.size()) * kLog2Pi + log_det +
                 z.squaredNorm());
}

/// n i.i.d. draws from N(mean, covariance), one per row.
inline Matrix mvn_sample(const GaussianSpec& spec, RngStream& rng, int n) {
  if (n < 0) throw DimensionError("mvn_sample: negative sample count");
  Eigen::LLT<Matrix> llt(spec.covariance);
  if (llt.info() != Eigen::Success)
    throw DecompositionError("mvn_sample: covariance decomposition failed");
  const Eigen::Index k = spec.dim();
  Matrix out(n, k);
  Vector z(k);
  for (int i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < k; ++j) z[j] = rng.normal();
    out.row(i) = (spec.mean + llt.matrixL() * z).transpose();
  }
  return out;
}

}  // namespace graphinf

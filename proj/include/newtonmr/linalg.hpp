#pragma once

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <stdexcept>
#include <utility>

namespace newtonmr {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline bool all_finite(const Vector& v) { return v.allFinite(); }
inline bool all_finite(const Matrix& m) { return m.allFinite(); }

/// Dense symmetric matrix. Construction symmetrizes the input, so the stored
/// array satisfies a(i,j) == a(j,i) exactly.
class SymMatrix {
 public:
  SymMatrix() = default;

  explicit SymMatrix(const Matrix& a) {
    if (a.rows() != a.cols())
      throw std::invalid_argument("SymMatrix: input must be square");
    if (!a.allFinite())
      throw std::invalid_argument("SymMatrix: input has non-finite entries");
    a_ = 0.5 * (a + a.transpose());
  }

  static SymMatrix zero(Eigen::Index d) { return SymMatrix(Matrix::Zero(d, d)); }
  static SymMatrix identity(Eigen::Index d) { return SymMatrix(Matrix::Identity(d, d)); }
  static SymMatrix diagonal(const Vector& d) {
    return SymMatrix(Matrix(d.asDiagonal()));
  }

  const Matrix& mat() const { return a_; }
  Eigen::Index dim() const { return a_.rows(); }

  Vector apply(const Vector& v) const { return a_ * v; }

  SymMatrix operator+(const SymMatrix& o) const { return SymMatrix(a_ + o.a_); }
  SymMatrix operator-(const SymMatrix& o) const { return SymMatrix(a_ - o.a_); }
  SymMatrix scaled(double s) const { return SymMatrix(s * a_); }

 private:
  Matrix a_;
};

/// Matrix-free symmetric operator: a dimension, an apply callback, and the
/// oracle price of one application (in units of one full function evaluation).
class LinearOperator {
 public:
  using ApplyFn = std::function<Vector(const Vector&)>;

  LinearOperator(Eigen::Index dim, ApplyFn apply, double cost_per_apply)
      : dim_(dim), apply_(std::move(apply)), cost_(cost_per_apply) {
    if (dim_ <= 0) throw std::invalid_argument("LinearOperator: dim must be positive");
    if (!apply_) throw std::invalid_argument("LinearOperator: empty apply callback");
  }

  static LinearOperator dense(SymMatrix a, double cost_per_apply = 2.0) {
    auto mat = std::make_shared<SymMatrix>(std::move(a));
    return LinearOperator(
        mat->dim(), [mat](const Vector& v) { return mat->apply(v); }, cost_per_apply);
  }

  Vector operator()(const Vector& v) const {
    if (v.size() != dim_)
      throw std::invalid_argument("LinearOperator: dimension mismatch");
    Vector out = apply_(v);
    if (out.size() != dim_ || !out.allFinite())
      throw std::runtime_error("LinearOperator: apply produced invalid output");
    return out;
  }

  Eigen::Index dim() const { return dim_; }
  double cost_per_apply() const { return cost_; }

 private:
  Eigen::Index dim_;
  ApplyFn apply_;
  double cost_;
};

/// Symmetric eigendecomposition with eigenpairs sorted by descending
/// eigenvalue magnitude (signed values kept). rank_tol is the default
/// threshold separating numerically nonzero eigenvalues from noise.
struct EigenDecomposition {
  Vector eigenvalues;   // |lam(0)| >= |lam(1)| >= ...
  Matrix eigenvectors;  // column i pairs with eigenvalues(i)
  double rank_tol = 0.0;

  Eigen::Index dim() const { return eigenvalues.size(); }

  double tol_or_default(double tol) const { return tol < 0.0 ? rank_tol : tol; }

  /// Number of eigenvalues with magnitude strictly above tol.
  Eigen::Index numerical_rank(double tol = -1.0) const;

  /// Pseudo-inverse action: sum over nonzero eigenpairs of (u_i^T v / lam_i) u_i.
  Vector pinv_apply(const Vector& v, double tol = -1.0) const;

  /// Orthogonal projection of v onto the span of the nonzero eigenvectors.
  Vector range_project(const Vector& v, double tol = -1.0) const;

  /// Basis of the numerical range (first rank columns).
  Matrix range_basis(double tol = -1.0) const;

  /// U diag(lam) U^T, mainly for checks.
  Matrix reconstruct() const;
};

/// Full symmetric eigendecomposition, magnitude-sorted.
EigenDecomposition eigh(const SymMatrix& a);

/// Largest eigenvalue magnitude.
double spectral_norm(const SymMatrix& a);

/// Materialize a matrix-free operator by applying it to the standard basis.
/// Guarded: refuses dimensions above the desk-scale cap.
SymMatrix densify(const LinearOperator& op, Eigen::Index max_dim = 2000);

}  // namespace newtonmr

#include "newtonmr/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

namespace newtonmr {

Eigen::Index EigenDecomposition::numerical_rank(double tol) const {
  const double t = tol_or_default(tol);
  Eigen::Index r = 0;
  for (Eigen::Index i = 0; i < eigenvalues.size(); ++i)
    if (std::abs(eigenvalues(i)) > t) ++r;
  return r;
}

Vector EigenDecomposition::pinv_apply(const Vector& v, double tol) const {
  if (v.size() != dim())
    throw std::invalid_argument("pinv_apply: dimension mismatch");
  const double t = tol_or_default(tol);
  Vector out = Vector::Zero(dim());
  for (Eigen::Index i = 0; i < eigenvalues.size(); ++i) {
    const double lam = eigenvalues(i);
    if (std::abs(lam) > t)
      out += (eigenvectors.col(i).dot(v) / lam) * eigenvectors.col(i);
  }
  return out;
}

Vector EigenDecomposition::range_project(const Vector& v, double tol) const {
  if (v.size() != dim())
    throw std::invalid_argument("range_project: dimension mismatch");
  const double t = tol_or_default(tol);
  Vector out = Vector::Zero(dim());
  for (Eigen::Index i = 0; i < eigenvalues.size(); ++i)
    if (std::abs(eigenvalues(i)) > t)
      out += eigenvectors.col(i).dot(v) * eigenvectors.col(i);
  return out;
}

Matrix EigenDecomposition::range_basis(double tol) const {
  const Eigen::Index r = numerical_rank(tol);
  Matrix u(dim(), r);
  Eigen::Index j = 0;
  const double t = tol_or_default(tol);
  for (Eigen::Index i = 0; i < eigenvalues.size() && j < r; ++i)
    if (std::abs(eigenvalues(i)) > t) u.col(j++) = eigenvectors.col(i);
  return u;
}

Matrix EigenDecomposition::reconstruct() const {
  return eigenvectors * eigenvalues.asDiagonal() * eigenvectors.transpose();
}

EigenDecomposition eigh(const SymMatrix& a) {
  Eigen::SelfAdjointEigenSolver<Matrix> solver(a.mat());
  if (solver.info() != Eigen::Success)
    throw std::runtime_error("eigh: eigensolver failed to converge");

  const Vector& lam = solver.eigenvalues();
  const Matrix& vec = solver.eigenvectors();
  const Eigen::Index d = lam.size();

  std::vector<Eigen::Index> order(static_cast<size_t>(d));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index i, Eigen::Index j) {
    return std::abs(lam(i)) > std::abs(lam(j));
  });

  EigenDecomposition dec;
  dec.eigenvalues.resize(d);
  dec.eigenvectors.resize(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    dec.eigenvalues(i) = lam(order[static_cast<size_t>(i)]);
    dec.eigenvectors.col(i) = vec.col(order[static_cast<size_t>(i)]);
  }
  const double lam_max = d > 0 ? std::abs(dec.eigenvalues(0)) : 0.0;
  dec.rank_tol = static_cast<double>(d) * std::numeric_limits<double>::epsilon() * lam_max;
  return dec;
}

double spectral_norm(const SymMatrix& a) {
  if (a.dim() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<Matrix> solver(a.mat(), Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success)
    throw std::runtime_error("spectral_norm: eigensolver failed to converge");
  return solver.eigenvalues().cwiseAbs().maxCoeff();
}

SymMatrix densify(const LinearOperator& op, Eigen::Index max_dim) {
  const Eigen::Index d = op.dim();
  if (d > max_dim)
    throw std::invalid_argument("densify: operator dimension exceeds cap");
  Matrix a(d, d);
  Vector e = Vector::Zero(d);
  for (Eigen::Index j = 0; j < d; ++j) {
    e(j) = 1.0;
    a.col(j) = op(e);
    e(j) = 0.0;
  }
  return SymMatrix(a);
}

}  // namespace newtonmr

#pragma once

// Reference computations the tests compare against: dense SVD pseudo-inverse,
// central finite differences, and exhaustive subset enumeration. Everything
// here is deliberately independent of the library's own linear algebra paths.

#include "newtonmr/linalg.hpp"
#include "newtonmr/objectives.hpp"

#include <Eigen/SVD>

#include <functional>
#include <vector>

namespace oracles {

using newtonmr::Matrix;
using newtonmr::Vector;

/// Moore-Penrose pseudo-inverse via Jacobi SVD with relative tolerance.
inline Matrix pinv(const Matrix& a, double rel_tol = 1e-12) {
  Eigen::JacobiSVD<Matrix> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector& sv = svd.singularValues();
  const double cut = sv.size() ? rel_tol * sv(0) : 0.0;
  Vector inv = Vector::Zero(sv.size());
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv(i) > cut) inv(i) = 1.0 / sv(i);
  return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

/// Central-difference gradient of f at x.
inline Vector fd_gradient(const std::function<double(const Vector&)>& f,
                          const Vector& x, double h = 1e-6) {
  Vector g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Vector xp = x, xm = x;
    xp(i) += h;
    xm(i) -= h;
    g(i) = (f(xp) - f(xm)) / (2.0 * h);
  }
  return g;
}

/// Central-difference Hessian-vector product from the gradient.
inline Vector fd_hvp(const std::function<Vector(const Vector&)>& grad,
                     const Vector& x, const Vector& v, double h = 1e-6) {
  return (grad(x + h * v) - grad(x - h * v)) / (2.0 * h);
}

/// All k-subsets of {0..n-1} in lexicographic order.
inline std::vector<std::vector<int>> subsets(int n, int k) {
  std::vector<std::vector<int>> out;
  std::vector<int> cur(k);
  std::function<void(int, int)> rec = [&](int start, int depth) {
    if (depth == k) {
      out.push_back(cur);
      return;
    }
    for (int i = start; i < n; ++i) {
      cur[depth] = i;
      rec(i + 1, depth + 1);
    }
  };
  rec(0, 0);
  return out;
}

}  // namespace oracles

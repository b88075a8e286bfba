#pragma once

#include "newtonmr/linalg.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace newtonmr {

/// Numeric table: one row per data point, features column-major friendly.
/// Labels, when present, are integer class ids aligned with rows.
struct Dataset {
  Matrix features;  // n x p
  std::vector<int> labels;
  bool has_labels = false;

  Eigen::Index n() const { return features.rows(); }
  Eigen::Index p() const { return features.cols(); }
};

/// Parses a numeric CSV. Ragged rows or non-numeric fields raise
/// std::runtime_error naming the offending row and column. When has_labels is
/// set the last column must hold integers. scale01 min-max-normalizes the
/// feature block (globally, so pixel-style data maps onto [0, 1]).
Dataset load_csv(const std::string& path, bool has_labels, bool skip_header = false,
                 bool scale01 = false);

/// Objective with component structure: f = sum of n_components pieces.
/// grad_sum/hvp_sum over an index subset return plain (unscaled) sums; the
/// estimator scaling n/|S| is applied by the operators built on top.
struct Problem {
  Eigen::Index dim = 0;
  Eigen::Index n_components = 1;
  std::function<double(const Vector&)> f;
  std::function<Vector(const Vector&)> grad;
  std::function<Vector(const Vector&, const Vector&)> hvp;
  std::function<Vector(const Vector&, const std::vector<int>&)> grad_sum;
  std::function<Vector(const Vector&, const Vector&, const std::vector<int>&)> hvp_sum;
  std::function<bool(const Vector&)> in_domain;  // null means all of R^d

  /// Whether the straight segment between two in-domain points stays inside
  /// the domain. Null means yes (convex domain). Line searches reject trial
  /// steps whose segment leaves the domain: sufficient-decrease conditions
  /// are meaningless across a pole.
  std::function<bool(const Vector&, const Vector&)> path_in_domain;

  bool domain_ok(const Vector& x) const {
    return x.allFinite() && (!in_domain || in_domain(x));
  }
  bool segment_ok(const Vector& from, const Vector& to) const {
    return !path_in_domain || path_in_domain(from, to);
  }
};

/// f(x) = 1/2 x^T A x - c^T x with A positive definite.
Problem make_quadratic(const SymMatrix& a, const Vector& c);

/// f(x1, x2) = a x1^2 / (b - x2), undefined on the line x2 = b. Rank-1
/// Hessian everywhere; the gradient-alignment constant of this objective is
/// 8/9, attained where x1^2 = 2 (b - x2)^2.
Problem make_fraction(double a, double b);

/// Multi-class (C classes) softmax regression without intercept, summed over
/// the dataset; parameter dimension (C-1) * p, class 0 is the reference.
Problem make_softmax(const Dataset& data, int num_classes);

/// Ground truth for the two-component Gaussian mixture task.
struct GmmGroundTruth {
  double w = 0.0;  // mixing parameter, weight of component 1 is sigmoid(w)
  Vector u, v;     // component means
  SymMatrix sigma1, sigma2;
  Vector stacked() const;
};

/// Negative log-likelihood of a two-component Gaussian mixture with known
/// covariances; unknowns x = [w; u; v] of dimension 2 p + 1.
Problem make_gmm(const Dataset& data, const SymMatrix& sigma1, const SymMatrix& sigma2);

/// Draws a mixture instance: means u* ~ U[-1,1]^p, v* ~ U[3,4]^p, mixing
/// w* ~ N(0,1); covariances Q^T D^{-1} Q with D equidistant on [1, cond]
/// (so each covariance has condition number cond) and Q orthonormalized from
/// a standard-normal (component 1) / uniform (component 2) matrix.
std::pair<Dataset, GmmGroundTruth> gen_gmm_data(Eigen::Index p, Eigen::Index n,
                                                double cond, std::uint64_t seed);

/// 1/2 (|w - w*| / |w*| + ||[u; v] - [u*; v*]|| / ||[u*; v*]||).
double estimation_error(const Vector& x, const GmmGroundTruth& truth);

/// Uniform-without-replacement row sampler; |S| = max(1, round(fraction * n)).
struct SampleSelector {
  double fraction = 1.0;
  std::uint64_t seed = 0;
  std::vector<int> draw(Eigen::Index n, int iteration) const;
};

/// Full Hessian-vector operator at x (oracle price 2 per apply).
LinearOperator hessian_operator(const Problem& prob, const Vector& x);

/// Sub-sampled estimator (n / |S|) * sum_{j in S} hvp_j at x; oracle price
/// 2 |S| / n per apply.
LinearOperator subsampled_operator(const Problem& prob, const Vector& x,
                                   const std::vector<int>& indices);

}  // namespace newtonmr

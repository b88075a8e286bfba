#include <cmath>
#include <stdexcept>

#include "doctest.h"
#include "newtonmr/linalg.hpp"
#include "newtonmr/random.hpp"
#include "oracles.hpp"

using namespace newtonmr;

namespace {

SymMatrix random_symmetric(Eigen::Index d, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m = rng.normal_matrix(d, d);
  return SymMatrix(Matrix(0.5 * (m + m.transpose())));
}

SymMatrix random_low_rank(Eigen::Index d, Eigen::Index rank, std::uint64_t seed) {
  Rng rng(seed);
  Matrix b = rng.normal_matrix(d, rank);
  return SymMatrix(Matrix(b * b.transpose()));
}

Matrix diag3(double a, double b, double c) {
  Vector v(3);
  v << a, b, c;
  return Matrix(v.asDiagonal());
}

}  // namespace

TEST_CASE("SymMatrix construction validates and symmetrizes") {
  CHECK_THROWS_AS(SymMatrix(Matrix::Zero(2, 3)), std::invalid_argument);

  Matrix bad = Matrix::Zero(2, 2);
  bad(0, 1) = std::nan("");
  CHECK_THROWS_AS(SymMatrix{bad}, std::invalid_argument);

  Matrix skew(2, 2);
  skew << 1.0, 2.0, 4.0, 1.0;
  SymMatrix s(skew);
  CHECK(s.mat()(0, 1) == doctest::Approx(3.0));
  CHECK(s.mat()(1, 0) == doctest::Approx(3.0));

  CHECK(SymMatrix::zero(3).mat().isZero(0.0));
  CHECK(SymMatrix::identity(4).mat().isIdentity(0.0));
  Vector d(2);
  d << 5.0, -1.0;
  CHECK(SymMatrix::diagonal(d).mat()(1, 1) == -1.0);
}

TEST_CASE("LinearOperator validates and applies") {
  SymMatrix a = random_symmetric(4, 11);
  LinearOperator op = LinearOperator::dense(a);
  CHECK(op.dim() == 4);
  CHECK(op.cost_per_apply() == 2.0);

  Rng rng(7);
  Vector v = rng.normal_vector(4);
  CHECK((op(v) - a.apply(v)).norm() == doctest::Approx(0.0));

  CHECK_THROWS_AS(LinearOperator(0, [](const Vector& x) { return x; }, 1.0),
                  std::invalid_argument);
  CHECK_THROWS_AS(LinearOperator(3, nullptr, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(op(Vector::Zero(5)), std::invalid_argument);
}

TEST_CASE("LinearOperator symmetry and linearity on random probes") {
  SymMatrix a = random_symmetric(8, 23);
  LinearOperator op = LinearOperator::dense(a);
  Rng rng(24);
  for (int i = 0; i < 100; ++i) {
    Vector u = rng.normal_vector(8);
    Vector v = rng.normal_vector(8);
    const double uv = u.dot(op(v));
    const double vu = v.dot(op(u));
    CHECK(std::abs(uv - vu) <= 1e-10 * std::max(1.0, std::abs(uv)));
    const double s = rng.uniform(-2.0, 2.0);
    CHECK((op(u + s * v) - (op(u) + s * op(v))).norm() <= 1e-10 * (1.0 + u.norm() + v.norm()));
  }
}

TEST_CASE("densify reconstructs the dense matrix and guards dimension") {
  SymMatrix a = random_symmetric(6, 31);
  LinearOperator op = LinearOperator::dense(a);
  SymMatrix back = densify(op);
  CHECK((back.mat() - a.mat()).norm() <= 1e-14 * a.mat().norm());
  CHECK_THROWS_AS(densify(op, 5), std::invalid_argument);
}

TEST_CASE("eigh orders by magnitude and reconstructs") {
  SUBCASE("diagonal case") {
    EigenDecomposition dec = eigh(SymMatrix(diag3(2.0, -3.0, 0.0)));
    CHECK(dec.eigenvalues(0) == doctest::Approx(-3.0));
    CHECK(dec.eigenvalues(1) == doctest::Approx(2.0));
    CHECK(dec.eigenvalues(2) == doctest::Approx(0.0));
    // axis eigenvectors, up to sign
    CHECK(std::abs(dec.eigenvectors.col(0)(1)) == doctest::Approx(1.0));
    CHECK(std::abs(dec.eigenvectors.col(1)(0)) == doctest::Approx(1.0));
  }
  SUBCASE("identity") {
    EigenDecomposition dec = eigh(SymMatrix::identity(4));
    for (int i = 0; i < 4; ++i) CHECK(dec.eigenvalues(i) == doctest::Approx(1.0));
  }
  SUBCASE("random reconstruction and orthonormality") {
    SymMatrix a = random_symmetric(20, 42);
    EigenDecomposition dec = eigh(a);
    const double norm = spectral_norm(a);
    CHECK((dec.reconstruct() - a.mat()).norm() <= 1e-10 * std::max(1.0, norm));
    Matrix vtv = dec.eigenvectors.transpose() * dec.eigenvectors;
    CHECK((vtv - Matrix::Identity(20, 20)).norm() <= 1e-10);
    for (int i = 0; i + 1 < 20; ++i)
      CHECK(std::abs(dec.eigenvalues(i)) >= std::abs(dec.eigenvalues(i + 1)));
  }
}

TEST_CASE("numerical_rank counts above the tolerance") {
  Vector d2(2);
  d2 << 2.0, 0.0;
  CHECK(eigh(SymMatrix::diagonal(d2)).numerical_rank(1e-12) == 1);
  CHECK(eigh(SymMatrix::zero(3)).numerical_rank() == 0);
  d2 << 1.0, 1e-13;
  CHECK(eigh(SymMatrix::diagonal(d2)).numerical_rank(1e-12) == 1);
  // default tolerance d*eps*|lambda_1| keeps honest small eigenvalues
  d2 << 1.0, 1e-8;
  CHECK(eigh(SymMatrix::diagonal(d2)).numerical_rank() == 2);
}

TEST_CASE("pinv_apply matches examples and the SVD oracle") {
  SUBCASE("least-norm on diag(2,0)") {
    Vector d(2), v(2);
    d << 2.0, 0.0;
    v << 4.0, 3.0;
    Vector p = eigh(SymMatrix::diagonal(d)).pinv_apply(v, 1e-12);
    CHECK(p(0) == doctest::Approx(2.0));
    CHECK(p(1) == doctest::Approx(0.0));
  }
  SUBCASE("identity is a no-op") {
    Rng rng(5);
    Vector v = rng.normal_vector(3);
    CHECK((eigh(SymMatrix::identity(3)).pinv_apply(v) - v).norm() <= 1e-14 * v.norm());
  }
  SUBCASE("random rank-3 5x5 vs dense Moore-Penrose") {
    SymMatrix h = random_low_rank(5, 3, 77);
    EigenDecomposition dec = eigh(h);
    Matrix hp = oracles::pinv(h.mat());
    Rng rng(78);
    Vector v = rng.normal_vector(5);
    Vector mine = dec.pinv_apply(v);
    Vector ref = hp * v;
    CHECK((mine - ref).norm() <= 1e-9 * std::max(1.0, ref.norm()));
    // result lies in the range of H
    Vector proj = dec.range_project(mine);
    CHECK((mine - proj).norm() <= 1e-10 * std::max(1.0, mine.norm()));
  }
}

TEST_CASE("pinv_apply satisfies the Moore-Penrose identities when assembled") {
  for (std::uint64_t seed : {101, 102, 103}) {
    const Eigen::Index d = 7;
    SymMatrix h = random_low_rank(d, 4, seed);
    EigenDecomposition dec = eigh(h);
    Matrix hplus(d, d);
    for (Eigen::Index j = 0; j < d; ++j)
      hplus.col(j) = dec.pinv_apply(Vector::Unit(d, j));
    const Matrix& a = h.mat();
    const double scale = std::max(1.0, a.norm());
    CHECK((a * hplus * a - a).norm() <= 1e-9 * scale);
    CHECK((hplus * a * hplus - hplus).norm() <= 1e-9 * std::max(1.0, hplus.norm()));
    CHECK(((a * hplus) - (a * hplus).transpose()).norm() <= 1e-9);
    CHECK(((hplus * a) - (hplus * a).transpose()).norm() <= 1e-9);
  }
}

TEST_CASE("range_project splits orthogonally and is idempotent") {
  SUBCASE("diag(2,0) projects onto the first axis") {
    Vector d(2), v(2);
    d << 2.0, 0.0;
    v << 4.0, 3.0;
    Vector p = eigh(SymMatrix::diagonal(d)).range_project(v, 1e-12);
    CHECK(p(0) == doctest::Approx(4.0));
    CHECK(p(1) == doctest::Approx(0.0));
  }
  SUBCASE("full rank is identity") {
    SymMatrix a = random_symmetric(5, 9);
    Rng rng(10);
    Vector v = rng.normal_vector(5);
    CHECK((eigh(a).range_project(v) - v).norm() <= 1e-10 * v.norm());
  }
  SUBCASE("Pythagoras and idempotency on a rank-deficient instance") {
    SymMatrix h = random_low_rank(8, 3, 55);
    EigenDecomposition dec = eigh(h);
    Rng rng(56);
    Vector v = rng.normal_vector(8);
    Vector p = dec.range_project(v);
    Vector n = v - p;
    CHECK(std::abs(p.squaredNorm() + n.squaredNorm() - v.squaredNorm()) <=
          1e-10 * v.squaredNorm());
    CHECK(std::abs(p.dot(n)) <= 1e-10 * v.squaredNorm());
    CHECK((dec.range_project(p) - p).norm() <= 1e-12 * std::max(1.0, p.norm()));
  }
}

TEST_CASE("range_basis columns are orthonormal and span the projector") {
  SymMatrix h = random_low_rank(6, 2, 91);
  EigenDecomposition dec = eigh(h);
  Matrix u = dec.range_basis();
  CHECK(u.cols() == 2);
  CHECK((u.transpose() * u - Matrix::Identity(2, 2)).norm() <= 1e-10);
  Rng rng(92);
  Vector v = rng.normal_vector(6);
  CHECK((u * (u.transpose() * v) - dec.range_project(v)).norm() <= 1e-10);
}

TEST_CASE("spectral_norm equals the top magnitude eigenvalue") {
  Vector d(2);
  d << 2.0, -3.0;
  CHECK(spectral_norm(SymMatrix::diagonal(d)) == doctest::Approx(3.0));
  CHECK(spectral_norm(SymMatrix::zero(4)) == 0.0);
  SymMatrix a = random_symmetric(10, 13);
  CHECK(spectral_norm(a) ==
        doctest::Approx(std::abs(eigh(a).eigenvalues(0))).epsilon(1e-10));
}

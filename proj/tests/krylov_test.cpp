#include <cmath>
#include <vector>

#include "doctest.h"
#include "newtonmr/krylov.hpp"
#include "newtonmr/linalg.hpp"
#include "newtonmr/perturb.hpp"
#include "newtonmr/random.hpp"
#include "oracles.hpp"
#include "test_problems.hpp"

using namespace newtonmr;
using test_problems::psd_rank;
using test_problems::with_spectrum;

namespace {

LinearOperator dense_op(const SymMatrix& a) { return LinearOperator::dense(a); }

/// Orthonormal basis of span{seed, A seed, A^2 seed, ...} with `count` vectors,
/// built by repeated Gram-Schmidt so the power basis stays well conditioned.
Matrix krylov_basis(const LinearOperator& op, const Vector& seed, int count) {
  Matrix q(seed.size(), count);
  int cols = 0;
  Vector v = seed;
  for (int i = 0; i < count; ++i) {
    Vector w = v;
    for (int pass = 0; pass < 2; ++pass)
      for (int j = 0; j < cols; ++j) w -= q.col(j).dot(w) * q.col(j);
    if (w.norm() > 1e-12 * seed.norm()) {
      q.col(cols++) = w / w.norm();
    }
    v = op(v);
  }
  return q.leftCols(cols);
}

void check_trace_invariants(const SolveResult& res, double rhs_norm) {
  const auto& rows = res.trace.rows;
  REQUIRE(!rows.empty());
  for (std::size_t i = 0; i + 1 < rows.size(); ++i) {
    CHECK(rows[i + 1].residual_norm <= rows[i].residual_norm + 1e-12 * rhs_norm);
    CHECK(rows[i + 1].image_norm >= rows[i].image_norm - 1e-12 * rhs_norm);
  }
  // The residual is orthogonal to the image at every iteration, so the two
  // norms split ||rhs||^2 Pythagoras-style.
  for (const auto& row : rows) {
    const double lhs = row.residual_norm * row.residual_norm +
                       row.image_norm * row.image_norm;
    CHECK(std::abs(lhs - rhs_norm * rhs_norm) <= 2e-8 * rhs_norm * rhs_norm);
    CHECK(row.image_norm <= (1.0 + 1e-8) * rhs_norm);
  }
}

}  // namespace

TEST_CASE("minres_qlp solves the identity in one iteration") {
  KrylovConfig cfg;
  SolveResult res = minres_qlp(dense_op(SymMatrix::identity(3)), Vector::Unit(3, 0), cfg);
  CHECK(res.iterations == 1);
  CHECK(res.termination == Termination::kToleranceMet);
  CHECK((res.solution - Vector::Unit(3, 0)).norm() <= 1e-12);
}

TEST_CASE("minres_qlp returns the min-norm solution on singular consistent systems") {
  Vector d(2), rhs(2);
  d << 2.0, 0.0;
  rhs << -4.0, 0.0;
  KrylovConfig cfg;
  SolveResult res = minres_qlp(dense_op(SymMatrix::diagonal(d)), rhs, cfg);
  CHECK(res.solution(0) == doctest::Approx(-2.0));
  CHECK(std::abs(res.solution(1)) <= 1e-12);
  CHECK(res.residual_norm <= 1e-10);
}

TEST_CASE("minres_qlp full run matches the pseudo-inverse on a rank-12 system") {
  Rng rng(301);
  SymMatrix a = psd_rank(20, 12, 0.5, 3.0, rng);
  EigenDecomposition dec = eigh(a);
  // rhs constructed inside the range so the plain seed applies
  Vector rhs = a.apply(rng.normal_vector(20));
  KrylovConfig cfg;
  cfg.max_iters = 40;
  SolveResult res = minres_qlp(dense_op(a), rhs, cfg, &dec);
  Vector oracle = oracles::pinv(a.mat()) * rhs;
  CHECK((res.solution - oracle).norm() <= 1e-8 * std::max(1.0, oracle.norm()));
  CHECK(res.seed_used == SeedMode::kPlain);
  check_trace_invariants(res, rhs.norm());
}

TEST_CASE("choose_seed picks plain for in-range rhs and the image otherwise") {
  Vector d(2);
  d << 1.0, 0.0;
  SymMatrix a = SymMatrix::diagonal(d);
  LinearOperator op = dense_op(a);
  EigenDecomposition dec = eigh(a);
  KrylovConfig cfg;

  Vector in_range(2), off_range(2);
  in_range << 1.0, 0.0;
  off_range << 1.0, 1.0;

  SeedChoice plain = choose_seed(op, in_range, cfg, &dec);
  CHECK(plain.mode == SeedMode::kPlain);
  CHECK((plain.seed - in_range).norm() == 0.0);
  CHECK(plain.oracle_applies == 0);

  SeedChoice inv = choose_seed(op, off_range, cfg, &dec);
  CHECK(inv.mode == SeedMode::kRangeInvariant);
  CHECK(inv.seed(0) == doctest::Approx(1.0));
  CHECK(std::abs(inv.seed(1)) <= 1e-12);

  // Without a decomposition, auto conservatively seeds with op(rhs).
  SeedChoice blind = choose_seed(op, off_range, cfg, nullptr);
  CHECK(blind.mode == SeedMode::kRangeInvariant);
  CHECK(blind.oracle_applies == 1);
}

TEST_CASE("range-invariant seeding recovers the pseudo-inverse on off-range rhs") {
  Vector d(2), rhs(2);
  d << 1.0, 0.0;
  rhs << -1.0, -1.0;
  KrylovConfig cfg;
  cfg.seed_mode = SeedMode::kRangeInvariant;
  SolveResult res = minres_qlp(dense_op(SymMatrix::diagonal(d)), rhs, cfg);
  CHECK(res.seed_used == SeedMode::kRangeInvariant);
  CHECK(res.solution(0) == doctest::Approx(-1.0));
  CHECK(std::abs(res.solution(1)) <= 1e-12);
  // every iterate (here: the final one) stays in the range of A
  CHECK(std::abs(res.solution(1)) <= 1e-8 * res.solution.norm());
}

TEST_CASE("plain seeding on an inconsistent system breaks down at the best iterate") {
  Vector d(2), rhs(2);
  d << 1.0, 0.0;
  rhs << 1.0, 1.0;
  KrylovConfig cfg;
  cfg.seed_mode = SeedMode::kPlain;
  SolveResult res = minres_qlp(dense_op(SymMatrix::diagonal(d)), rhs, cfg);
  CHECK(res.termination == Termination::kBreakdown);
  CHECK(res.solution(0) == doctest::Approx(1.0));
  CHECK(std::abs(res.solution(1)) <= 1e-12);
  CHECK(res.residual_norm == doctest::Approx(1.0));
}

TEST_CASE("minres_qlp trace invariants hold across instance classes") {
  Rng rng(317);
  KrylovConfig cfg;
  cfg.max_iters = 60;

  SUBCASE("full rank indefinite") {
    Vector eigs(12);
    for (int i = 0; i < 12; ++i) eigs(i) = rng.uniform(-3.0, 3.0) + (i % 2 ? 0.7 : -0.7);
    SymMatrix a = with_spectrum(eigs, rng);
    Vector rhs = rng.normal_vector(12);
    SolveResult res = minres_qlp(dense_op(a), rhs, cfg);
    check_trace_invariants(res, rhs.norm());
    CHECK(res.residual_norm <= 1e-6 * rhs.norm());
  }
  SUBCASE("singular with range-invariant seeding") {
    SymMatrix a = psd_rank(15, 7, 0.3, 2.0, rng);
    Vector rhs = rng.normal_vector(15);  // generically off-range
    cfg.seed_mode = SeedMode::kRangeInvariant;
    SolveResult res = minres_qlp(dense_op(a), rhs, cfg);
    // residual floor is the off-range component of rhs, so compare images
    EigenDecomposition dec = eigh(a);
    Vector target = dec.range_project(rhs);
    CHECK((a.apply(res.solution) - target).norm() <= 1e-7 * rhs.norm());
    check_trace_invariants(res, rhs.norm());
  }
}

TEST_CASE("theta > 0 stops at the first iteration that meets the tolerance") {
  Rng rng(331);
  SymMatrix a = psd_rank(16, 16, 0.4, 4.0, rng);
  Vector rhs = rng.normal_vector(16);
  KrylovConfig cfg;
  cfg.theta = 0.25;  // target residual 0.5 * ||rhs||
  SolveResult res = minres_qlp(dense_op(a), rhs, cfg);
  CHECK(res.termination == Termination::kToleranceMet);
  const double target = std::sqrt(cfg.theta) * rhs.norm();
  const auto& rows = res.trace.rows;
  REQUIRE(!rows.empty());
  CHECK(rows.back().residual_norm <= target);
  for (std::size_t i = 0; i + 1 < rows.size(); ++i)
    CHECK(rows[i].residual_norm > target);
}

TEST_CASE("the solution lies in the spanned Krylov subspace") {
  Rng rng(337);
  SymMatrix a = psd_rank(20, 12, 0.5, 3.0, rng);
  LinearOperator op = dense_op(a);
  Vector rhs = a.apply(rng.normal_vector(20));
  KrylovConfig cfg;
  cfg.seed_mode = SeedMode::kPlain;
  SolveResult res = minres_qlp(op, rhs, cfg);
  Matrix q = krylov_basis(op, rhs, res.iterations);
  Vector x = res.solution;
  Vector proj = q * (q.transpose() * x);
  CHECK((x - proj).norm() <= 1e-8 * std::max(1.0, x.norm()));
}

TEST_CASE("running rank(A) iterations reproduces pinv_apply on small instances") {
  for (std::uint64_t seed : {401, 402, 403}) {
    Rng rng(seed);
    const Eigen::Index d = 4 + static_cast<Eigen::Index>(seed % 27);  // up to 30
    SymMatrix a = psd_rank(d, std::max<Eigen::Index>(1, d - 3), 0.2, 2.5, rng);
    EigenDecomposition dec = eigh(a);
    Vector rhs = rng.normal_vector(d);
    KrylovConfig cfg;
    cfg.max_iters = static_cast<int>(2 * d);
    cfg.seed_mode = SeedMode::kRangeInvariant;
    SolveResult res = minres_qlp(dense_op(a), rhs, cfg);
    Vector oracle = dec.pinv_apply(rhs);
    CHECK((res.solution - oracle).norm() <= 1e-7 * std::max(1.0, oracle.norm()));
  }
}

TEST_CASE("iterate norms respect the perturbed pseudo-inverse bound") {
  // Full-rank base operator with a small additive perturbation: every iterate
  // of the min-norm solver stays within ||g|| / gamma_tilde.
  Rng rng(347);
  SymMatrix h = psd_rank(14, 14, 1.0, 5.0, rng);
  SymMatrix noise = sample_goe(14, 0.05, 911);
  SymMatrix ht = h + noise;
  Vector g = rng.normal_vector(14);

  SpectralDiagnostics diag = measure_diagnostics(h, ht, g);
  REQUIRE(diag.acute);
  const double gamma_tilde = predicted_gamma_tilde(diag);
  REQUIRE(gamma_tilde > 0.0);

  KrylovConfig cfg;
  cfg.max_iters = 40;
  SolveResult res = minres_qlp(dense_op(ht), g, cfg);
  const double bound = g.norm() / gamma_tilde * (1.0 + 1e-6);
  for (const auto& row : res.trace.rows) CHECK(row.iterate_norm <= bound);
}

TEST_CASE("cg handles the easy definite cases") {
  KrylovConfig cfg;
  SUBCASE("identity") {
    Vector rhs(2);
    rhs << 3.0, 4.0;
    SolveResult res = cg(dense_op(SymMatrix::identity(2)), rhs, cfg);
    CHECK((res.solution - rhs).norm() <= 1e-12 * rhs.norm());
    CHECK(!res.negative_curvature);
  }
  SUBCASE("diagonal") {
    Vector d(2), rhs(2), expect(2);
    d << 4.0, 1.0;
    rhs << 4.0, 1.0;
    expect << 1.0, 1.0;
    SolveResult res = cg(dense_op(SymMatrix::diagonal(d)), rhs, cfg);
    CHECK((res.solution - expect).norm() <= 1e-10);
    CHECK(res.termination == Termination::kToleranceMet);
  }
}

TEST_CASE("cg stops on nonpositive curvature") {
  Vector d(2);
  d << 1.0, -1.0;
  SymMatrix a = SymMatrix::diagonal(d);
  KrylovConfig cfg;

  SUBCASE("flat first direction falls back to the rhs") {
    // d0 = (1,1) has d'Ad = 0, so the solver cannot take a step and returns
    // the steepest-descent direction.
    Vector rhs(2);
    rhs << 1.0, 1.0;
    SolveResult res = cg(dense_op(a), rhs, cfg);
    CHECK(res.negative_curvature);
    CHECK(res.termination == Termination::kBreakdown);
    CHECK((res.solution - rhs).norm() == 0.0);
  }
  SUBCASE("negative curvature on the second direction keeps the first iterate") {
    // Hand-run: alpha0 = 5/3, x1 = (10/3, 5/3); the next direction
    // d1 = (20/9, 40/9) has d'Ad = -1200/81 < 0.
    Vector rhs(2);
    rhs << 2.0, 1.0;
    SolveResult res = cg(dense_op(a), rhs, cfg);
    CHECK(res.negative_curvature);
    CHECK(res.solution(0) == doctest::Approx(10.0 / 3.0));
    CHECK(res.solution(1) == doctest::Approx(5.0 / 3.0));
  }
}

TEST_CASE("decoupled_subspace_solve splits a diagonal instance") {
  Vector d(2), rhs(2);
  d << 2.0, 0.1;
  rhs << 2.0, 0.1;
  SymMatrix a = SymMatrix::diagonal(d);
  EigenDecomposition dec = eigh(a);
  KrylovConfig cfg;

  SolveResult head = decoupled_subspace_solve(dense_op(a), rhs, dec, 1.0,
                                              SpectralBand::kHead, cfg);
  CHECK(head.solution(0) == doctest::Approx(1.0));
  CHECK(std::abs(head.solution(1)) <= 1e-12);

  SolveResult tail = decoupled_subspace_solve(dense_op(a), rhs, dec, 1.0,
                                              SpectralBand::kTail, cfg);
  CHECK(std::abs(tail.solution(0)) <= 1e-12);
  CHECK(tail.solution(1) == doctest::Approx(1.0));

  // split above the whole spectrum empties the head band
  SolveResult none = decoupled_subspace_solve(dense_op(a), rhs, dec, 10.0,
                                              SpectralBand::kHead, cfg);
  CHECK(none.solution.norm() == 0.0);
}

TEST_CASE("decoupled band solutions sum to the joint min-norm solution") {
  Rng rng(353);
  // two well-separated bands: head in [2,4], tail in [0.01, 0.02]
  Vector eigs(20);
  for (int i = 0; i < 10; ++i) eigs(i) = rng.uniform(2.0, 4.0);
  for (int i = 10; i < 20; ++i) eigs(i) = rng.uniform(0.01, 0.02);
  SymMatrix a = with_spectrum(eigs, rng);
  EigenDecomposition dec = eigh(a);
  Vector rhs = rng.normal_vector(20);
  const double split = 1.0;

  KrylovConfig cfg;
  cfg.max_iters = 80;
  LinearOperator op = dense_op(a);
  SolveResult head = decoupled_subspace_solve(op, rhs, dec, split, SpectralBand::kHead, cfg);
  SolveResult tail = decoupled_subspace_solve(op, rhs, dec, split, SpectralBand::kTail, cfg);
  SolveResult joint = minres_qlp(op, rhs, cfg, &dec);

  Vector sum = head.solution + tail.solution;
  CHECK((sum - joint.solution).norm() <= 1e-7 * std::max(1.0, joint.solution.norm()));

  // per-band norm bounds: ||x_i|| <= ||P_i rhs|| / (smallest |eigenvalue| in band)
  double head_min = 4.0, tail_min = 1.0;
  Matrix u = dec.eigenvectors;
  Vector head_proj = Vector::Zero(20), tail_proj = Vector::Zero(20);
  for (int i = 0; i < 20; ++i) {
    const double lam = std::abs(dec.eigenvalues(i));
    if (lam >= split) {
      head_min = std::min(head_min, lam);
      head_proj += u.col(i).dot(rhs) * u.col(i);
    } else if (lam > 1e-12) {
      tail_min = std::min(tail_min, lam);
      tail_proj += u.col(i).dot(rhs) * u.col(i);
    }
  }
  CHECK(head.solution.norm() <= head_proj.norm() / head_min * (1.0 + 1e-9));
  CHECK(tail.solution.norm() <= tail_proj.norm() / tail_min * (1.0 + 1e-9));
}

#include "newtonmr/krylov.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace newtonmr {

namespace {

// Minimum-norm least-squares solution of the projected problem
// min ||Tbar y - c|| using a rank-revealing SVD. Singular values at or below
// rel_tol * sigma_max are treated as zero, which is what makes the full run
// land on the pseudo-inverse solution for singular systems.
Vector projected_min_norm_solve(const Matrix& tbar, const Vector& c, double rel_tol) {
  Eigen::BDCSVD<Matrix> svd(tbar, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector& sv = svd.singularValues();
  if (sv.size() == 0) return Vector::Zero(tbar.cols());
  const double cut = rel_tol * sv(0);
  Vector y = Vector::Zero(tbar.cols());
  const Vector utc = svd.matrixU().transpose() * c;
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv(i) > cut) y += (utc(i) / sv(i)) * svd.matrixV().col(i);
  return y;
}

SolveResult zero_rhs_result(Eigen::Index d, SeedMode mode) {
  SolveResult res;
  res.solution = Vector::Zero(d);
  res.termination = Termination::kToleranceMet;
  res.seed_used = mode;
  return res;
}

// Shared Lanczos minimum-residual core. `seed` spans the Krylov space,
// `rhs` defines the least-squares objective; they differ under
// range-invariant seeding.
SolveResult lanczos_min_residual(const LinearOperator& op, const Vector& rhs,
                                 const Vector& seed, SeedMode mode,
                                 int seed_applies, const KrylovConfig& cfg) {
  const Eigen::Index d = op.dim();
  SolveResult res;
  res.seed_used = mode;
  res.oracle_applies = seed_applies;

  const double rhs_norm = rhs.norm();
  const double seed_norm = seed.norm();
  if (rhs_norm == 0.0) {
    res.solution = Vector::Zero(d);
    res.termination = Termination::kToleranceMet;
    return res;
  }
  if (seed_norm <= 1e-300 || seed_norm <= 1e-14 * rhs_norm) {
    // Seed vanished: rhs is (numerically) orthogonal to the reachable range,
    // so the minimum-norm minimizer over the Krylov space is zero.
    res.solution = Vector::Zero(d);
    res.termination = Termination::kBreakdown;
    res.residual_norm = rhs_norm;
    return res;
  }

  const int max_t = std::min<int>(cfg.max_iters, static_cast<int>(d));
  const double target = std::sqrt(std::max(0.0, cfg.theta)) * rhs_norm;
  const double rhs_norm2 = rhs_norm * rhs_norm;

  Matrix q(d, max_t + 1);
  q.col(0) = seed / seed_norm;
  Vector alphas(max_t), betas(max_t);
  Vector c(max_t + 1);  // c(j) = q_j^T rhs
  c(0) = q.col(0).dot(rhs);

  double t_scale = 0.0;
  Vector y;
  Matrix tbar;

  for (int t = 1; t <= max_t; ++t) {
    // Lanczos step: w = A q_t - alpha_t q_t - beta_{t-1} q_{t-1}
    Vector w = op(q.col(t - 1));
    ++res.oracle_applies;
    const double alpha = q.col(t - 1).dot(w);
    alphas(t - 1) = alpha;
    w -= alpha * q.col(t - 1);
    if (t >= 2) w -= betas(t - 2) * q.col(t - 2);
    if (cfg.reorthogonalize) {
      for (int pass = 0; pass < 2; ++pass)
        w -= q.leftCols(t) * (q.leftCols(t).transpose() * w);
    }
    const double beta = w.norm();
    betas(t - 1) = beta;
    t_scale = std::max({t_scale, std::abs(alpha), beta});
    const double break_tol = 1e-13 * t_scale;
    const bool broke_down = beta <= break_tol;

    // Projected least-squares problem over span(q_1..q_t).
    const int rows = broke_down ? t : t + 1;
    tbar = Matrix::Zero(rows, t);
    for (int i = 0; i < t; ++i) {
      tbar(i, i) = alphas(i);
      if (i + 1 < rows) tbar(i + 1, i) = betas(i);
      if (i + 1 < t) tbar(i, i + 1) = betas(i);
    }
    if (!broke_down) {
      q.col(t) = w / beta;
      c(t) = q.col(t).dot(rhs);
    }
    const Vector c_head = c.head(rows);
    y = projected_min_norm_solve(tbar, c_head, cfg.projected_rank_tol);

    const Vector img = tbar * y;  // A p_t in the Lanczos basis
    const double out_of_span2 = std::max(0.0, rhs_norm2 - c_head.squaredNorm());
    const double residual =
        std::sqrt((img - c_head).squaredNorm() + out_of_span2);
    res.iterations = t;
    res.residual_norm = residual;
    res.image_norm = img.norm();
    res.solution_norm = y.norm();
    if (cfg.collect_trace)
      res.trace.rows.push_back({t, residual, res.image_norm, res.solution_norm});

    if (residual <= target) {
      res.termination = Termination::kToleranceMet;
      break;
    }
    if (broke_down) {
      res.termination = Termination::kBreakdown;
      break;
    }
    res.termination = Termination::kMaxIters;
  }

  res.solution = q.leftCols(res.iterations) * y;
  return res;
}

}  // namespace

std::string to_string(Termination t) {
  switch (t) {
    case Termination::kToleranceMet: return "tolerance_met";
    case Termination::kMaxIters: return "max_iters";
    case Termination::kBreakdown: return "breakdown";
  }
  return "unknown";
}

SeedChoice choose_seed(const LinearOperator& op, const Vector& rhs,
                       const KrylovConfig& cfg, const EigenDecomposition* dec) {
  if (rhs.size() != op.dim())
    throw std::invalid_argument("choose_seed: dimension mismatch");
  SeedChoice out;
  switch (cfg.seed_mode) {
    case SeedMode::kPlain:
      out.mode = SeedMode::kPlain;
      out.seed = rhs;
      return out;
    case SeedMode::kRangeInvariant:
      out.mode = SeedMode::kRangeInvariant;
      out.seed = op(rhs);
      out.oracle_applies = 1;
      return out;
    case SeedMode::kAuto:
      break;
  }
  if (dec != nullptr) {
    const double n = rhs.norm();
    const bool in_range =
        n == 0.0 || (rhs - dec->range_project(rhs)).norm() <= cfg.membership_tol * n;
    if (in_range) {
      out.mode = SeedMode::kPlain;
      out.seed = rhs;
      return out;
    }
  }
  out.mode = SeedMode::kRangeInvariant;
  out.seed = op(rhs);
  out.oracle_applies = 1;
  return out;
}

SolveResult minres_qlp(const LinearOperator& op, const Vector& rhs,
                       const KrylovConfig& cfg, const EigenDecomposition* dec) {
  if (rhs.size() != op.dim())
    throw std::invalid_argument("minres_qlp: dimension mismatch");
  if (rhs.norm() == 0.0) return zero_rhs_result(op.dim(), SeedMode::kPlain);
  SeedChoice sc = choose_seed(op, rhs, cfg, dec);
  return lanczos_min_residual(op, rhs, sc.seed, sc.mode, sc.oracle_applies, cfg);
}

SolveResult cg(const LinearOperator& op, const Vector& rhs, const KrylovConfig& cfg) {
  if (rhs.size() != op.dim())
    throw std::invalid_argument("cg: dimension mismatch");
  const Eigen::Index n = op.dim();
  SolveResult res;
  res.seed_used = SeedMode::kPlain;

  const double rhs_norm = rhs.norm();
  if (rhs_norm == 0.0) return zero_rhs_result(n, SeedMode::kPlain);
  const double target = std::sqrt(std::max(0.0, cfg.theta)) * rhs_norm;

  Vector x = Vector::Zero(n);
  Vector r = rhs;
  Vector d = r;
  double rs = r.squaredNorm();
  res.residual_norm = rhs_norm;
  res.termination = Termination::kMaxIters;

  for (int t = 1; t <= cfg.max_iters; ++t) {
    Vector ad = op(d);
    ++res.oracle_applies;
    const double curv = d.dot(ad);
    if (curv <= 0.0) {
      // Negative (or zero) curvature: stop. On the very first direction the
      // caller gets the steepest-descent direction for the quadratic model.
      if (t == 1) x = rhs;
      res.negative_curvature = true;
      res.termination = Termination::kBreakdown;
      break;
    }
    const double step = rs / curv;
    x += step * d;
    r -= step * ad;
    const double rn = r.norm();
    res.iterations = t;
    res.residual_norm = rn;
    res.image_norm = (rhs - r).norm();
    res.solution_norm = x.norm();
    if (cfg.collect_trace)
      res.trace.rows.push_back({t, rn, res.image_norm, res.solution_norm});
    if (rn <= target) {
      res.termination = Termination::kToleranceMet;
      break;
    }
    const double rs_new = r.squaredNorm();
    d = r + (rs_new / rs) * d;
    rs = rs_new;
  }

  res.solution = std::move(x);
  res.solution_norm = res.solution.norm();
  return res;
}

SolveResult decoupled_subspace_solve(const LinearOperator& op, const Vector& rhs,
                                     const EigenDecomposition& dec, double split,
                                     SpectralBand band, const KrylovConfig& cfg) {
  if (rhs.size() != op.dim() || dec.dim() != op.dim())
    throw std::invalid_argument("decoupled_subspace_solve: dimension mismatch");
  if (split <= 0.0)
    throw std::invalid_argument("decoupled_subspace_solve: split must be positive");

  std::vector<Eigen::Index> cols;
  for (Eigen::Index i = 0; i < dec.dim(); ++i) {
    const double mag = std::abs(dec.eigenvalues(i));
    if (mag <= dec.rank_tol) continue;
    const bool head = mag >= split;
    if ((band == SpectralBand::kHead) == head) cols.push_back(i);
  }

  if (cols.empty()) return zero_rhs_result(op.dim(), SeedMode::kPlain);

  Matrix u(dec.dim(), static_cast<Eigen::Index>(cols.size()));
  for (size_t j = 0; j < cols.size(); ++j) u.col(static_cast<Eigen::Index>(j)) = dec.eigenvectors.col(cols[j]);

  auto project = [u](const Vector& v) -> Vector { return u * (u.transpose() * v); };
  // P A P is symmetric and, because P is a spectral projector of A, agrees
  // with A P on the band; the band excludes zero eigenvalues so P rhs lies in
  // its range and plain seeding is exact.
  LinearOperator banded(
      op.dim(), [&op, project](const Vector& v) { return project(op(project(v))); },
      op.cost_per_apply());

  const Vector p_rhs = project(rhs);
  if (p_rhs.norm() == 0.0) return zero_rhs_result(op.dim(), SeedMode::kPlain);
  return lanczos_min_residual(banded, p_rhs, p_rhs, SeedMode::kPlain, 0, cfg);
}

}  // namespace newtonmr

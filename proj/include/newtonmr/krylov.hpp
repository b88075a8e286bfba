#pragma once

#include "newtonmr/linalg.hpp"

#include <string>
#include <vector>

namespace newtonmr {

enum class SeedMode { kAuto, kPlain, kRangeInvariant };
enum class Termination { kToleranceMet, kMaxIters, kBreakdown };

std::string to_string(Termination t);

struct KrylovConfig {
  /// Inexactness parameter: stop once ||A p - rhs|| <= sqrt(theta) * ||rhs||.
  /// theta = 0 runs until breakdown or the iteration cap.
  double theta = 0.0;
  int max_iters = 200;
  bool reorthogonalize = true;
  SeedMode seed_mode = SeedMode::kAuto;
  /// Rank cutoff for the projected least-squares solve, relative to ||T_t||.
  double projected_rank_tol = 1e-12;
  /// Relative tolerance of the range-membership test used by kAuto seeding.
  double membership_tol = 1e-8;
  bool collect_trace = true;
};

struct TraceRow {
  int t = 0;
  double residual_norm = 0.0;  // ||A p_t - rhs||
  double image_norm = 0.0;     // ||A p_t||
  double iterate_norm = 0.0;   // ||p_t||
};

struct SolveTrace {
  std::vector<TraceRow> rows;
};

struct SolveResult {
  Vector solution;
  int iterations = 0;
  Termination termination = Termination::kMaxIters;
  double residual_norm = 0.0;
  double image_norm = 0.0;
  double solution_norm = 0.0;
  int oracle_applies = 0;
  SeedMode seed_used = SeedMode::kPlain;
  bool negative_curvature = false;  // set by cg only
  SolveTrace trace;
};

struct SeedChoice {
  SeedMode mode = SeedMode::kPlain;  // resolved: kPlain or kRangeInvariant
  Vector seed;
  int oracle_applies = 0;  // extra applies spent forming the seed
};

/// Picks the Krylov seed. Explicit modes are honored as-is. kAuto uses the
/// decomposition's range-membership test when one is supplied; without a
/// decomposition it conservatively seeds with op(rhs), which is safe whether
/// or not rhs lies in the operator's range.
SeedChoice choose_seed(const LinearOperator& op, const Vector& rhs,
                       const KrylovConfig& cfg,
                       const EigenDecomposition* dec = nullptr);

/// Minimum-residual solve of the (possibly singular, possibly inconsistent)
/// symmetric system A p = rhs. Each iterate is the minimum-norm minimizer of
/// ||A p - rhs|| over the grown Krylov subspace; run to completion this is
/// the pseudo-inverse solution pinv(A) * rhs.
SolveResult minres_qlp(const LinearOperator& op, const Vector& rhs,
                       const KrylovConfig& cfg,
                       const EigenDecomposition* dec = nullptr);

/// Textbook conjugate gradient on A p = rhs with negative-curvature detection:
/// if a search direction d has d^T A d <= 0 the solver stops and returns the
/// current iterate (the steepest-descent direction rhs when this happens at
/// t = 0), with negative_curvature set.
SolveResult cg(const LinearOperator& op, const Vector& rhs, const KrylovConfig& cfg);

enum class SpectralBand { kHead, kTail };

/// Test harness for the head/tail decoupling argument: restricts the solve to
/// the band of eigenvalues of |lambda| >= split (head) or rank_tol < |lambda|
/// < split (tail) and minimizes ||A x - P b|| over the projected subspace.
SolveResult decoupled_subspace_solve(const LinearOperator& op, const Vector& rhs,
                                     const EigenDecomposition& dec, double split,
                                     SpectralBand band, const KrylovConfig& cfg);

}  // namespace newtonmr

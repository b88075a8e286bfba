#pragma once

#include "newtonmr/krylov.hpp"
#include "newtonmr/linalg.hpp"
#include "newtonmr/objectives.hpp"
#include "newtonmr/perturb.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace newtonmr {

enum class StopReason { kGradTol, kMaxIters, kLineSearchFailure, kDomainError };

std::string to_string(StopReason r);

enum class UpdateRule { kExactPinv, kMinres };

struct OptimizerConfig {
  int max_outer = 100;
  double tau = 1e-10;    // terminate once ||g|| <= tau
  double rho = 1e-4;     // line-search slope parameter
  double theta = 1e-2;   // inner-solve inexactness
  int inner_max = 200;   // Krylov iteration cap
  double alpha0 = 1.0;   // initial line-search trial
  double backtrack = 0.5;
  int ls_max = 50;       // backtracking budget
  bool use_line_search = true;  // false: always take alpha0

  UpdateRule update = UpdateRule::kMinres;
  PerturbationSpec perturb;  // Hessian degradation (none/additive/subsample)
  SeedMode seed_mode = SeedMode::kAuto;

  /// Lanczos reorthogonalization in the inner solver.
  bool reorthogonalize = true;

  /// Optional per-iteration spectral diagnostics (densifies both Hessians;
  /// desk-scale only, excluded from oracle accounting).
  bool collect_diagnostics = false;
  double rank_tol = -1.0;

  /// Re-verify the direction-quality inner product directly instead of using
  /// the solver residual identity.
  bool recheck_direction = false;

  /// Retain every iterate (x0 included) in RunResult::iterates.
  bool keep_iterates = false;

  /// L-BFGS specifics.
  int lbfgs_history = 20;
  double wolfe_c2 = 0.4;
};

struct IterationDiagnostics {
  SpectralDiagnostics spectral;
  double teps = 0.0, nu_tilde = 0.0, gamma_tilde = 0.0;
  double eta = 0.0, c1 = 0.0, c2 = 0.0;
};

struct IterationRecord {
  int k = 0;
  double f = 0.0;
  double grad_norm = 0.0;
  double alpha = 0.0;
  int inner_iters = 0;
  int ls_evals = 0;
  double step_norm = 0.0;
  double oracle_calls = 0.0;  // cumulative, after this iteration
  double wall_seconds = 0.0;  // cumulative
  std::optional<IterationDiagnostics> diag;
};

struct RunResult {
  Vector final_x;
  std::vector<IterationRecord> records;
  StopReason stop = StopReason::kMaxIters;
  double total_oracle_calls = 0.0;
  int skipped_curvature_pairs = 0;  // L-BFGS only
  std::vector<Vector> iterates;     // one per record when keep_iterates is set
};

/// Backtracking line search on the squared gradient norm:
/// accept alpha with ||g(x + alpha p)||^2 <= ||g(x)||^2 + 2 rho alpha delta,
/// where delta = <p, H~ g> <= 0 is supplied by the caller. Trial points
/// outside the domain shrink the step without spending a gradient evaluation.
struct LineSearchResult {
  bool ok = false;
  double alpha = 0.0;
  int evals = 0;  // gradient evaluations spent
  Vector x_new;
  Vector g_new;
};

LineSearchResult armijo_gradnorm(const Problem& prob, const Vector& x,
                                 const Vector& p, double delta, double gnorm2,
                                 const OptimizerConfig& cfg);

enum class Method {
  kNewtonMR,
  kSsNewtonMR,
  kNewtonCG,
  kSsNewtonCG,
  kGaussNewton,
  kSsGaussNewton,
  kLbfgs,
  kFirstOrder,
};

std::string to_string(Method m);

/// Per-iteration oracle price of one outer iteration, in units of one full
/// function evaluation: t inner matrix-vector products, ell line-search
/// evaluations, sample fractions for the sub-sampled/mini-batch variants.
double oracle_cost(Method m, int t, int ell, double s_over_n = 1.0,
                   double b_over_n = 1.0);

RunResult newton_mr_run(const Problem& prob, const Vector& x0,
                        const OptimizerConfig& cfg);

RunResult newton_cg_run(const Problem& prob, const Vector& x0,
                        const OptimizerConfig& cfg);

/// Gauss-Newton baseline: identical outer loop to Newton-CG; callers supply
/// convex objectives where the Hessian coincides with the Gauss-Newton matrix.
RunResult gauss_newton_run(const Problem& prob, const Vector& x0,
                           const OptimizerConfig& cfg);

RunResult lbfgs_run(const Problem& prob, const Vector& x0, const OptimizerConfig& cfg);

enum class FirstOrderMethod { kSgd, kMomentum, kAdagrad, kAdadelta, kRmsprop, kAdam };

FirstOrderMethod first_order_method_from_string(const std::string& name);
std::string to_string(FirstOrderMethod m);

struct FirstOrderConfig {
  double step = 1e-3;
  double batch_fraction = 1.0;  // b / n
  std::uint64_t seed = 0;
  int max_outer = 1000;
  double tau = 1e-10;
  double momentum = 0.9;    // momentum
  double decay = 0.9;       // rmsprop / adadelta accumulator decay
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double fuzz = 1e-8;       // denominator guard
  bool keep_iterates = false;
};

RunResult first_order_run(FirstOrderMethod method, const Problem& prob,
                          const Vector& x0, const FirstOrderConfig& cfg);

/// Writes the iteration records as CSV. include_wall switches the
/// wall_seconds column on (interactive use) or off (reproducible artifacts).
void write_trace_csv(std::ostream& os, const RunResult& run, bool include_wall,
                     bool include_diagnostics);

}  // namespace newtonmr

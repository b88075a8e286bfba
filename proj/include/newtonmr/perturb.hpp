#pragma once

#include "newtonmr/linalg.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>

namespace newtonmr {

/// Thrown when a closed-form constant is requested outside the inequality
/// regime in which it is defined. The message names the violated condition.
struct OutOfRegimeError : std::domain_error {
  using std::domain_error::domain_error;
};

enum class PerturbKind { kNone, kAdditive, kSubsample };

/// How a Hessian estimate is degraded in experiments.
struct PerturbationSpec {
  PerturbKind kind = PerturbKind::kNone;
  double epsilon = 0.0;   // additive: spectral-norm size of the noise
  double fraction = 1.0;  // subsample: |S| / n, in (0, 1]
  std::uint64_t seed = 0;

  void validate() const {
    if (epsilon < 0.0) throw std::invalid_argument("PerturbationSpec: epsilon < 0");
    if (fraction <= 0.0 || fraction > 1.0)
      throw std::invalid_argument("PerturbationSpec: fraction must be in (0, 1]");
  }
};

/// Symmetric noise drawn from the Gaussian orthogonal ensemble, rescaled so
/// its spectral norm is exactly epsilon. Deterministic per seed.
SymMatrix sample_goe(Eigen::Index d, double epsilon, std::uint64_t seed);

/// Constants measured from a concrete (H, H_tilde, g) triple. NaN marks
/// values that are undefined for the instance (e.g. gamma when H = 0).
struct SpectralDiagnostics {
  double gamma = 0.0;    // smallest nonzero |eigenvalue| of H
  double nu = 1.0;       // ||proj_range(H) g||^2 / ||g||^2 (1 when g = 0)
  double epsilon = 0.0;  // ||H_tilde - H||
  double c_const = 0.0;  // epsilon * ||pinv(H_tilde)||, 0 for epsilon = 0
  Eigen::Index r = 0;        // rank of H
  Eigen::Index r_tilde = 0;  // rank of H_tilde
  bool acute = true;         // r == r_tilde
  bool gamma_defined = true;
};

SpectralDiagnostics measure_diagnostics(const SymMatrix& h, const SymMatrix& h_tilde,
                                        const Vector& g, double tol = -1.0);

/// Bound on the range-projection discrepancy ||(H H^+ - Ht Ht^+) g|| / ||g||:
/// 4 eps/gamma + sqrt(1 - nu) in general, 2 eps/gamma for acute perturbations.
double predicted_teps(const SpectralDiagnostics& d);

/// Degraded gradient alignment: 2 nu - 1 - 4 eps/gamma (general, needs
/// nu > 1/2 and eps < gamma (2 nu - 1) / 4), or nu - 2 eps/gamma (acute,
/// needs eps < gamma nu / 2).
double predicted_nu_tilde(const SpectralDiagnostics& d);

/// Degraded pseudo-inverse regularity: the harmonic form
/// 1 / (1/(gamma - eps) + C (2/gamma + sqrt(1 - nu)/eps)) in general,
/// gamma - eps for acute perturbations.
double predicted_gamma_tilde(const SpectralDiagnostics& d);

struct TheoryConstants {
  double rho = 1e-4;   // line-search slope parameter, in (0, 1)
  double l0 = 1.0;     // moral-smoothness constant over the sublevel set
  double lh = 1.0;     // Hessian Lipschitz constant
  double theta = 0.0;  // inner-solve inexactness, in [0, 1)
};

enum class UpdateMode { kExact, kInexact };

/// Per-step gradient-norm contraction factor: with exact updates
/// eta = max(0, 4 rho nu~ gamma~^2 / L0 * ((1-rho) nu~ - eps/gamma~)); the
/// inexact form replaces nu~ by (1 - theta). Clamped into [0, 1].
double predicted_eta(const TheoryConstants& tc, const SpectralDiagnostics& d,
                     UpdateMode mode);

struct LocalConstants {
  double c1 = 0.0;  // quadratic coefficient  L_H / (2 gamma~^2)
  double c2 = 0.0;  // linear coefficient     eps/gamma~ + sqrt(1-nu~) or + sqrt(theta)
};

LocalConstants predicted_local_constants(const TheoryConstants& tc,
                                         const SpectralDiagnostics& d,
                                         UpdateMode mode);

/// Largest admissible perturbation sizes for the convergence guarantees, all
/// solved to 1e-12 via bisection of the defining inequalities.
struct EpsilonThresholds {
  double general_bound = 0.0;     // closed form, 0 when the nu-gate fails
  double acute_eta_bound = 0.0;   // eps < (1-rho)(gamma-eps)(nu gamma - 2 eps)/gamma
  double nu1_eta_bound = 0.0;     // nu = 1, non-acute variant
  double acute_local_bound = 0.0; // local-rate regime, acute
  double nu1_local_bound = 0.0;   // local-rate regime, nu = 1
  double delta_c = 0.0;           // gate: the guarantees need nu > delta_c
};

EpsilonThresholds epsilon_thresholds(const SpectralDiagnostics& d, double rho);

/// Spectral norm of the projector difference U U^T - Ut Ut^T for two
/// orthonormal bases with the same column count (the sine of the largest
/// principal angle between the subspaces).
double subspace_sin(const Matrix& u, const Matrix& u_tilde);

/// ||(H H^+ - Ht Ht^+) g|| / ||g||, measured directly.
double projected_gradient_gap(const SymMatrix& h, const SymMatrix& h_tilde,
                              const Vector& g, double tol = -1.0);

/// CSV serialization of a diagnostics row (predictions passed separately;
/// NaN renders as "nan").
std::string diagnostics_csv_header();
std::string diagnostics_csv_row(const SpectralDiagnostics& d, double teps,
                                double nu_tilde, double gamma_tilde, double eta,
                                double c1, double c2);

}  // namespace newtonmr

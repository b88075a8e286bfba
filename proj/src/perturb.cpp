#include "newtonmr/perturb.hpp"

#include "newtonmr/random.hpp"

#include <Eigen/SVD>

#include <cmath>
#include <cstdio>
#include <limits>

namespace newtonmr {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void require(bool ok, const char* condition) {
  if (!ok) throw OutOfRegimeError(std::string("out of regime: requires ") + condition);
}

// Largest eps in [0, hi) with lhs(eps) = eps below rhs(eps); rhs must be
// strictly decreasing in eps so the crossing is unique.
template <typename F>
double bisect_threshold(F rhs, double hi) {
  double lo = 0.0;
  if (rhs(0.0) <= 0.0) return 0.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (rhs(mid) - mid > 0.0)
      lo = mid;
    else
      hi = mid;
    if (hi - lo <= 1e-12 * std::max(1.0, hi)) break;
  }
  return lo;
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

SymMatrix sample_goe(Eigen::Index d, double epsilon, std::uint64_t seed) {
  if (d <= 0) throw std::invalid_argument("sample_goe: d must be positive");
  if (epsilon < 0.0) throw std::invalid_argument("sample_goe: epsilon < 0");
  if (epsilon == 0.0) return SymMatrix::zero(d);
  Rng rng(seed);
  SymMatrix e(rng.normal_matrix(d, d));  // symmetrized by construction
  const double norm = spectral_norm(e);
  if (norm == 0.0) return SymMatrix::zero(d);
  return e.scaled(epsilon / norm);
}

SpectralDiagnostics measure_diagnostics(const SymMatrix& h, const SymMatrix& h_tilde,
                                        const Vector& g, double tol) {
  if (h.dim() != h_tilde.dim() || g.size() != h.dim())
    throw std::invalid_argument("measure_diagnostics: dimension mismatch");

  const EigenDecomposition dh = eigh(h);
  const EigenDecomposition dht = eigh(h_tilde);

  SpectralDiagnostics out;
  out.r = dh.numerical_rank(tol);
  out.r_tilde = dht.numerical_rank(tol);
  out.acute = (out.r == out.r_tilde);
  out.epsilon = spectral_norm(h_tilde - h);

  if (out.r > 0) {
    out.gamma = std::abs(dh.eigenvalues(out.r - 1));
  } else {
    out.gamma = kNaN;
    out.gamma_defined = false;
  }

  const double gn2 = g.squaredNorm();
  out.nu = gn2 == 0.0 ? 1.0 : dh.range_project(g, tol).squaredNorm() / gn2;

  if (out.epsilon == 0.0) {
    out.c_const = 0.0;
  } else if (out.r_tilde > 0) {
    out.c_const = out.epsilon / std::abs(dht.eigenvalues(out.r_tilde - 1));
  } else {
    out.c_const = kNaN;
  }
  return out;
}

double predicted_teps(const SpectralDiagnostics& d) {
  require(d.gamma_defined, "rank(H) >= 1");
  require(d.epsilon < d.gamma, "eps < gamma");
  if (d.acute) return 2.0 * d.epsilon / d.gamma;
  return 4.0 * d.epsilon / d.gamma + std::sqrt(std::max(0.0, 1.0 - d.nu));
}

double predicted_nu_tilde(const SpectralDiagnostics& d) {
  require(d.gamma_defined, "rank(H) >= 1");
  if (d.acute) {
    require(d.nu > 0.0, "nu > 0");
    require(d.epsilon < d.gamma * d.nu / 2.0, "eps < gamma nu / 2");
    return d.nu - 2.0 * d.epsilon / d.gamma;
  }
  require(d.nu > 0.5, "nu > 1/2");
  require(d.epsilon < d.gamma * (2.0 * d.nu - 1.0) / 4.0, "eps < gamma (2 nu - 1) / 4");
  return 2.0 * d.nu - 1.0 - 4.0 * d.epsilon / d.gamma;
}

double predicted_gamma_tilde(const SpectralDiagnostics& d) {
  require(d.gamma_defined, "rank(H) >= 1");
  require(d.epsilon < d.gamma, "eps < gamma");
  if (d.acute) return d.gamma - d.epsilon;
  require(d.epsilon > 0.0, "eps > 0 (non-acute)");
  const double c = std::max(1.0, d.c_const);
  const double inv = 1.0 / (d.gamma - d.epsilon) +
                     c * (2.0 / d.gamma +
                          std::sqrt(std::max(0.0, 1.0 - d.nu)) / d.epsilon);
  return 1.0 / inv;
}

double predicted_eta(const TheoryConstants& tc, const SpectralDiagnostics& d,
                     UpdateMode mode) {
  require(tc.rho > 0.0 && tc.rho < 1.0, "rho in (0, 1)");
  require(tc.l0 > 0.0, "L0 > 0");
  const double nu_t = predicted_nu_tilde(d);
  const double gamma_t = predicted_gamma_tilde(d);
  double nu_eff = nu_t;
  if (mode == UpdateMode::kInexact) {
    require(tc.theta >= 0.0 && tc.theta < 1.0, "theta in [0, 1)");
    require(tc.theta >= 1.0 - nu_t, "theta >= 1 - nu_tilde");
    nu_eff = 1.0 - tc.theta;
  }
  const double eta = 4.0 * tc.rho * nu_eff * gamma_t * gamma_t / tc.l0 *
                     ((1.0 - tc.rho) * nu_eff - d.epsilon / gamma_t);
  return std::min(1.0, std::max(0.0, eta));
}

LocalConstants predicted_local_constants(const TheoryConstants& tc,
                                         const SpectralDiagnostics& d,
                                         UpdateMode mode) {
  require(tc.lh > 0.0, "L_H > 0");
  const double nu_t = predicted_nu_tilde(d);
  const double gamma_t = predicted_gamma_tilde(d);
  LocalConstants lc;
  lc.c1 = tc.lh / (2.0 * gamma_t * gamma_t);
  if (mode == UpdateMode::kExact) {
    lc.c2 = d.epsilon / gamma_t + std::sqrt(std::max(0.0, 1.0 - nu_t));
  } else {
    require(tc.theta >= 0.0 && tc.theta < 1.0, "theta in [0, 1)");
    require(tc.theta >= 1.0 - nu_t, "theta >= 1 - nu_tilde");
    lc.c2 = d.epsilon / gamma_t + std::sqrt(tc.theta);
  }
  return lc;
}

EpsilonThresholds epsilon_thresholds(const SpectralDiagnostics& d, double rho) {
  require(rho > 0.0 && rho < 1.0, "rho in (0, 1)");
  require(d.gamma_defined, "rank(H) >= 1");
  const double gamma = d.gamma;
  const double nu = d.nu;
  const double c = std::max(1.0, d.c_const);

  EpsilonThresholds th;

  // Gate on nu: the general guarantee needs the alignment to beat delta(C).
  {
    const double s = 1.0 - rho;
    const double t2 = c * c;
    const double num =
        std::sqrt((t2 + 4.0 * s * s) * (t2 + 4.0 * s * s) - 16.0 * s * s * s * s) -
        (t2 - 4.0 * s * s);
    th.delta_c = num / (8.0 * s * s);
  }

  // General bound: closed form from the quadratic in eps.
  {
    const double a = c + 2.0 * (1.0 - rho);
    const double b = (1.0 - rho) * (2.0 * nu - 1.0) - c * std::sqrt(std::max(0.0, 1.0 - nu));
    if (b > 0.0) {
      const double s = 2.0 * a + b + 1.0;
      th.general_bound = gamma * (s - std::sqrt(s * s - 8.0 * a * b)) / (4.0 * a);
    }
  }

  // Acute eta regime: eps < (1-rho)(gamma-eps)(nu gamma - 2 eps)/gamma.
  if (nu > 0.0) {
    th.acute_eta_bound = bisect_threshold(
        [&](double e) {
          return (1.0 - rho) * (gamma - e) * (nu * gamma - 2.0 * e) / gamma;
        },
        gamma);
  }

  // nu = 1, non-acute eta regime:
  // eps < (1-rho)(gamma-eps)(gamma-4 eps) / ((1+2C) gamma - 2C eps).
  th.nu1_eta_bound = bisect_threshold(
      [&](double e) {
        return (1.0 - rho) * (gamma - e) * (gamma - 4.0 * e) /
               ((1.0 + 2.0 * c) * gamma - 2.0 * c * e);
      },
      gamma);

  // Acute local-rate regime: eps < (gamma-eps)(1 - sqrt(1 - (nu - 2 eps/gamma))).
  if (nu > 0.0) {
    th.acute_local_bound = bisect_threshold(
        [&](double e) {
          const double nu_t = nu - 2.0 * e / gamma;
          if (nu_t <= 0.0) return -1.0;
          return (gamma - e) * (1.0 - std::sqrt(1.0 - nu_t));
        },
        std::min(gamma, gamma * nu / 2.0));
  }

  // nu = 1 local-rate regime: eps < (gamma-eps)(1 - 2 sqrt(eps/gamma))/(1+2C).
  th.nu1_local_bound = bisect_threshold(
      [&](double e) {
        return (gamma - e) * (1.0 - 2.0 * std::sqrt(e / gamma)) / (1.0 + 2.0 * c);
      },
      gamma);

  return th;
}

double subspace_sin(const Matrix& u, const Matrix& u_tilde) {
  if (u.rows() != u_tilde.rows())
    throw std::invalid_argument("subspace_sin: bases live in different spaces");
  if (u.cols() != u_tilde.cols())
    throw std::invalid_argument("subspace_sin: column counts differ");
  if (u.cols() == 0) return 0.0;
  // For equal-dimension subspaces the projector difference has norm
  // sqrt(1 - sigma_min(U^T Ut)^2).
  Eigen::BDCSVD<Matrix> svd(u.transpose() * u_tilde);
  const double smin = svd.singularValues().minCoeff();
  return std::sqrt(std::max(0.0, 1.0 - std::min(1.0, smin) * std::min(1.0, smin)));
}

double projected_gradient_gap(const SymMatrix& h, const SymMatrix& h_tilde,
                              const Vector& g, double tol) {
  if (h.dim() != h_tilde.dim() || g.size() != h.dim())
    throw std::invalid_argument("projected_gradient_gap: dimension mismatch");
  const double gn = g.norm();
  if (gn == 0.0)
    throw std::invalid_argument("projected_gradient_gap: g must be nonzero");
  const EigenDecomposition dh = eigh(h);
  const EigenDecomposition dht = eigh(h_tilde);
  return (dh.range_project(g, tol) - dht.range_project(g, tol)).norm() / gn;
}

std::string diagnostics_csv_header() {
  return "gamma,nu,epsilon,C,r,r_tilde,acute,teps,nu_tilde,gamma_tilde,eta,c1,c2";
}

std::string diagnostics_csv_row(const SpectralDiagnostics& d, double teps,
                                double nu_tilde, double gamma_tilde, double eta,
                                double c1, double c2) {
  std::string row = fmt_double(d.gamma);
  row += "," + fmt_double(d.nu);
  row += "," + fmt_double(d.epsilon);
  row += "," + fmt_double(d.c_const);
  row += "," + std::to_string(d.r);
  row += "," + std::to_string(d.r_tilde);
  row += d.acute ? ",1" : ",0";
  row += "," + fmt_double(teps);
  row += "," + fmt_double(nu_tilde);
  row += "," + fmt_double(gamma_tilde);
  row += "," + fmt_double(eta);
  row += "," + fmt_double(c1);
  row += "," + fmt_double(c2);
  return row;
}

}  // namespace newtonmr

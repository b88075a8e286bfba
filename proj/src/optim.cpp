#include "newtonmr/optim.hpp"

#include "newtonmr/random.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <deque>
#include <limits>
#include <ostream>
#include <stdexcept>

namespace newtonmr {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void validate_start(const Problem& prob, const Vector& x0) {
  if (x0.size() != prob.dim)
    throw std::invalid_argument("optimizer: x0 has wrong dimension");
  if (!prob.domain_ok(x0))
    throw std::invalid_argument("optimizer: x0 violates the problem domain");
}

IterationRecord initial_record(const Problem& prob, const Vector& x0, double gnorm) {
  IterationRecord rec;
  rec.k = 0;
  rec.f = prob.f(x0);
  rec.grad_norm = gnorm;
  return rec;
}

// Per-run source of the (possibly degraded) Hessian operator. An additive
// perturbation is drawn once and held fixed for the whole run; sub-sampling
// redraws its index set every outer iteration.
class HessianSource {
 public:
  HessianSource(const Problem& prob, const PerturbationSpec& spec)
      : prob_(prob), spec_(spec) {
    if (spec.kind == PerturbKind::kAdditive)
      noise_ = std::make_shared<const SymMatrix>(
          sample_goe(prob.dim, spec.epsilon, spec.seed));
  }

  LinearOperator at(const Vector& x, int k, double* s_over_n) const {
    *s_over_n = 1.0;
    switch (spec_.kind) {
      case PerturbKind::kNone:
        return hessian_operator(prob_, x);
      case PerturbKind::kAdditive: {
        LinearOperator base = hessian_operator(prob_, x);
        auto noise = noise_;
        return LinearOperator(
            prob_.dim,
            [base, noise](const Vector& v) -> Vector {
              return base(v) + noise->apply(v);
            },
            base.cost_per_apply());
      }
      case PerturbKind::kSubsample: {
        SampleSelector sel{spec_.fraction, spec_.seed};
        const std::vector<int> idx = sel.draw(prob_.n_components, k);
        *s_over_n = static_cast<double>(idx.size()) /
                    static_cast<double>(prob_.n_components);
        return subsampled_operator(prob_, x, idx);
      }
    }
    throw std::logic_error("HessianSource: unknown perturbation kind");
  }

 private:
  const Problem& prob_;
  PerturbationSpec spec_;
  std::shared_ptr<const SymMatrix> noise_;
};

std::optional<IterationDiagnostics> collect_diagnostics(
    const Problem& prob, const Vector& x, const Vector& g, const LinearOperator& op,
    const OptimizerConfig& cfg) {
  if (!cfg.collect_diagnostics) return std::nullopt;
  IterationDiagnostics d;
  const SymMatrix h = densify(hessian_operator(prob, x));
  const SymMatrix ht = densify(op);
  d.spectral = measure_diagnostics(h, ht, g, cfg.rank_tol);
  auto guard = [](auto&& fn) {
    try {
      return fn();
    } catch (const OutOfRegimeError&) {
      return kNaN;
    }
  };
  d.teps = guard([&] { return predicted_teps(d.spectral); });
  d.nu_tilde = guard([&] { return predicted_nu_tilde(d.spectral); });
  d.gamma_tilde = guard([&] { return predicted_gamma_tilde(d.spectral); });
  d.eta = kNaN;
  d.c1 = kNaN;
  d.c2 = kNaN;
  return d;
}

}  // namespace

std::string to_string(StopReason r) {
  switch (r) {
    case StopReason::kGradTol: return "grad_tol";
    case StopReason::kMaxIters: return "max_iters";
    case StopReason::kLineSearchFailure: return "line_search_failure";
    case StopReason::kDomainError: return "domain_error";
  }
  return "unknown";
}

std::string to_string(Method m) {
  switch (m) {
    case Method::kNewtonMR: return "newton_mr";
    case Method::kSsNewtonMR: return "ss_newton_mr";
    case Method::kNewtonCG: return "newton_cg";
    case Method::kSsNewtonCG: return "ss_newton_cg";
    case Method::kGaussNewton: return "gauss_newton";
    case Method::kSsGaussNewton: return "ss_gauss_newton";
    case Method::kLbfgs: return "lbfgs";
    case Method::kFirstOrder: return "first_order";
  }
  return "unknown";
}

double oracle_cost(Method m, int t, int ell, double s_over_n, double b_over_n) {
  if (t < 0 || ell < 0)
    throw std::invalid_argument("oracle_cost: counts must be non-negative");
  if (s_over_n <= 0.0 || s_over_n > 1.0 || b_over_n <= 0.0 || b_over_n > 1.0)
    throw std::invalid_argument("oracle_cost: fractions must be in (0, 1]");
  switch (m) {
    case Method::kNewtonMR:
      return 2.0 * (t + ell + 1);
    case Method::kSsNewtonMR:
      return 2.0 * t * s_over_n + 2.0 * (ell + 1);
    case Method::kNewtonCG:
    case Method::kGaussNewton:
      return 2.0 * t + ell + 2;
    case Method::kSsNewtonCG:
    case Method::kSsGaussNewton:
      return 2.0 * t * s_over_n + ell + 2;
    case Method::kLbfgs:
      return 2.0 * (ell + 1);
    case Method::kFirstOrder:
      return 2.0 * b_over_n;
  }
  throw std::logic_error("oracle_cost: unknown method");
}

LineSearchResult armijo_gradnorm(const Problem& prob, const Vector& x,
                                 const Vector& p, double delta, double gnorm2,
                                 const OptimizerConfig& cfg) {
  if (delta > 0.0)
    throw std::invalid_argument("armijo_gradnorm: delta must be non-positive");
  LineSearchResult out;
  double alpha = cfg.alpha0;
  for (int j = 0; j < cfg.ls_max; ++j) {
    const Vector x_trial = x + alpha * p;
    if (prob.domain_ok(x_trial) && prob.segment_ok(x, x_trial)) {
      Vector g_trial = prob.grad(x_trial);
      ++out.evals;
      if (g_trial.allFinite() &&
          g_trial.squaredNorm() <= gnorm2 + 2.0 * cfg.rho * alpha * delta) {
        out.ok = true;
        out.alpha = alpha;
        out.x_new = x_trial;
        out.g_new = std::move(g_trial);
        return out;
      }
    }
    alpha *= cfg.backtrack;
  }
  return out;
}

RunResult newton_mr_run(const Problem& prob, const Vector& x0,
                        const OptimizerConfig& cfg) {
  validate_start(prob, x0);
  const auto t0 = Clock::now();
  const Method method = cfg.perturb.kind == PerturbKind::kSubsample
                            ? Method::kSsNewtonMR
                            : Method::kNewtonMR;

  RunResult run;
  Vector x = x0;
  Vector g = prob.grad(x);
  if (!g.allFinite()) throw std::invalid_argument("newton_mr_run: gradient at x0 is not finite");
  run.records.push_back(initial_record(prob, x, g.norm()));
  if (cfg.keep_iterates) run.iterates.push_back(x);
  run.stop = StopReason::kMaxIters;
  const HessianSource source(prob, cfg.perturb);

  for (int k = 0; k < cfg.max_outer; ++k) {
    const double gnorm = g.norm();
    if (gnorm <= cfg.tau) {
      run.stop = StopReason::kGradTol;
      break;
    }

    double s_over_n = 1.0;
    LinearOperator hess = source.at(x, k, &s_over_n);
    auto diag = collect_diagnostics(prob, x, g, hess, cfg);

    Vector p;
    double delta = 0.0;
    int t_count = 0;
    int inner_iters = 0;
    if (cfg.update == UpdateRule::kExactPinv) {
      const SymMatrix ht = densify(hess);
      const EigenDecomposition dec = eigh(ht);
      const Vector gr = dec.range_project(g, cfg.rank_tol);
      p = -dec.pinv_apply(g, cfg.rank_tol);
      delta = -gr.squaredNorm();
      t_count = static_cast<int>(prob.dim);  // densification applies
      inner_iters = t_count;
    } else {
      KrylovConfig kcfg;
      kcfg.theta = cfg.theta;
      kcfg.max_iters = cfg.inner_max;
      kcfg.seed_mode = cfg.seed_mode;
      kcfg.reorthogonalize = cfg.reorthogonalize;
      kcfg.collect_trace = false;
      const SolveResult sol = minres_qlp(hess, -g, kcfg);
      p = sol.solution;
      // Residual identity: <p, H~ g> = ||H~ p + g||^2 - ||g||^2.
      delta = sol.residual_norm * sol.residual_norm - gnorm * gnorm;
      if (cfg.recheck_direction) delta = p.dot(hess(g));
      // Billed at the cost-model rate: t inner iterations, one product each.
      // The auto-seeding probe apply is setup, not an inner iteration.
      t_count = sol.iterations;
      inner_iters = sol.iterations;
    }

    if (delta >= 0.0 || !p.allFinite() || p.norm() == 0.0) {
      run.stop = StopReason::kLineSearchFailure;
      break;
    }

    double alpha = cfg.alpha0;
    int ls_evals = 1;
    Vector x_new, g_new;
    if (cfg.use_line_search) {
      LineSearchResult ls = armijo_gradnorm(prob, x, p, delta, gnorm * gnorm, cfg);
      if (!ls.ok) {
        run.stop = StopReason::kLineSearchFailure;
        break;
      }
      alpha = ls.alpha;
      ls_evals = ls.evals;
      x_new = std::move(ls.x_new);
      g_new = std::move(ls.g_new);
    } else {
      x_new = x + alpha * p;
      if (!prob.domain_ok(x_new) || !prob.segment_ok(x, x_new)) {
        run.stop = StopReason::kDomainError;
        break;
      }
      g_new = prob.grad(x_new);
      if (!g_new.allFinite()) {
        run.stop = StopReason::kDomainError;
        break;
      }
    }

    run.total_oracle_calls += oracle_cost(method, t_count, ls_evals, s_over_n);

    IterationRecord rec;
    rec.k = k + 1;
    rec.alpha = alpha;
    rec.inner_iters = inner_iters;
    rec.ls_evals = ls_evals;
    rec.step_norm = alpha * p.norm();
    rec.oracle_calls = run.total_oracle_calls;
    rec.diag = std::move(diag);
    x = std::move(x_new);
    g = std::move(g_new);
    rec.f = prob.f(x);
    rec.grad_norm = g.norm();
    rec.wall_seconds = seconds_since(t0);
    run.records.push_back(std::move(rec));
    if (cfg.keep_iterates) run.iterates.push_back(x);

    if (g.norm() <= cfg.tau) {
      run.stop = StopReason::kGradTol;
      break;
    }
  }

  run.final_x = std::move(x);
  return run;
}

namespace {

// Shared outer loop of the CG-based baselines (Newton-CG / Gauss-Newton).
RunResult cg_newton_core(const Problem& prob, const Vector& x0,
                         const OptimizerConfig& cfg, bool gauss_newton) {
  validate_start(prob, x0);
  const auto t0 = Clock::now();
  const bool subsampled = cfg.perturb.kind == PerturbKind::kSubsample;
  const Method method = gauss_newton
                            ? (subsampled ? Method::kSsGaussNewton : Method::kGaussNewton)
                            : (subsampled ? Method::kSsNewtonCG : Method::kNewtonCG);

  RunResult run;
  Vector x = x0;
  Vector g = prob.grad(x);
  if (!g.allFinite())
    throw std::invalid_argument("newton_cg_run: gradient at x0 is not finite");
  double f = prob.f(x);
  run.records.push_back(initial_record(prob, x, g.norm()));
  if (cfg.keep_iterates) run.iterates.push_back(x);
  run.stop = StopReason::kMaxIters;
  const HessianSource source(prob, cfg.perturb);

  for (int k = 0; k < cfg.max_outer; ++k) {
    const double gnorm = g.norm();
    if (gnorm <= cfg.tau) {
      run.stop = StopReason::kGradTol;
      break;
    }

    double s_over_n = 1.0;
    LinearOperator hess = source.at(x, k, &s_over_n);

    KrylovConfig kcfg;
    kcfg.theta = cfg.theta;
    kcfg.max_iters = cfg.inner_max;
    kcfg.collect_trace = false;
    const SolveResult sol = cg(hess, -g, kcfg);
    Vector p = sol.solution;
    double slope = g.dot(p);
    if (!p.allFinite() || p.norm() == 0.0 || slope >= 0.0) {
      p = -g;  // steepest-descent fallback
      slope = -gnorm * gnorm;
    }

    // Armijo on f
    double alpha = cfg.alpha0;
    bool accepted = false;
    int ls_evals = 0;
    double f_new = f;
    Vector x_new;
    if (cfg.use_line_search) {
      for (int j = 0; j < cfg.ls_max; ++j) {
        const Vector x_trial = x + alpha * p;
        if (prob.domain_ok(x_trial) && prob.segment_ok(x, x_trial)) {
          const double f_trial = prob.f(x_trial);
          ++ls_evals;
          if (std::isfinite(f_trial) && f_trial <= f + cfg.rho * alpha * slope) {
            accepted = true;
            x_new = x_trial;
            f_new = f_trial;
            break;
          }
        }
        alpha *= cfg.backtrack;
      }
      if (!accepted) {
        run.stop = StopReason::kLineSearchFailure;
        break;
      }
    } else {
      x_new = x + alpha * p;
      ls_evals = 1;
      if (!prob.domain_ok(x_new) || !prob.segment_ok(x, x_new)) {
        run.stop = StopReason::kDomainError;
        break;
      }
      f_new = prob.f(x_new);
    }

    Vector g_new = prob.grad(x_new);
    if (!g_new.allFinite() || !std::isfinite(f_new)) {
      run.stop = StopReason::kDomainError;
      break;
    }

    run.total_oracle_calls += oracle_cost(method, sol.iterations, ls_evals, s_over_n);

    IterationRecord rec;
    rec.k = k + 1;
    rec.alpha = alpha;
    rec.inner_iters = sol.iterations;
    rec.ls_evals = ls_evals;
    rec.step_norm = alpha * p.norm();
    rec.oracle_calls = run.total_oracle_calls;
    x = std::move(x_new);
    g = std::move(g_new);
    f = f_new;
    rec.f = f;
    rec.grad_norm = g.norm();
    rec.wall_seconds = seconds_since(t0);
    run.records.push_back(std::move(rec));
    if (cfg.keep_iterates) run.iterates.push_back(x);

    if (g.norm() <= cfg.tau) {
      run.stop = StopReason::kGradTol;
      break;
    }
  }

  run.final_x = std::move(x);
  return run;
}

}  // namespace

RunResult newton_cg_run(const Problem& prob, const Vector& x0,
                        const OptimizerConfig& cfg) {
  return cg_newton_core(prob, x0, cfg, /*gauss_newton=*/false);
}

RunResult gauss_newton_run(const Problem& prob, const Vector& x0,
                           const OptimizerConfig& cfg) {
  return cg_newton_core(prob, x0, cfg, /*gauss_newton=*/true);
}

namespace {

struct WolfeEval {
  double phi = 0.0;
  double dphi = 0.0;
  Vector x, g;
  bool in_domain = false;
};

// Strong Wolfe line search (bracket + bisection zoom). Each in-domain trial
// evaluates f and g together and counts as one line-search iteration.
struct WolfeSearch {
  const Problem& prob;
  const Vector& x;
  const Vector& p;
  double phi0, dphi0, c1, c2;
  int budget;
  int evals = 0;

  WolfeEval eval(double alpha) {
    WolfeEval e;
    e.x = x + alpha * p;
    if (!prob.domain_ok(e.x) || !prob.segment_ok(x, e.x)) return e;
    e.phi = prob.f(e.x);
    e.g = prob.grad(e.x);
    ++evals;
    if (!std::isfinite(e.phi) || !e.g.allFinite()) return e;
    e.dphi = e.g.dot(p);
    e.in_domain = true;
    return e;
  }

  bool armijo_ok(double alpha, const WolfeEval& e) const {
    return e.in_domain && e.phi <= phi0 + c1 * alpha * dphi0;
  }
  bool curvature_ok(const WolfeEval& e) const {
    return std::abs(e.dphi) <= -c2 * dphi0;
  }

  std::optional<std::pair<double, WolfeEval>> zoom(double lo, WolfeEval elo, double hi) {
    while (evals < budget) {
      const double alpha = 0.5 * (lo + hi);
      WolfeEval e = eval(alpha);
      if (!armijo_ok(alpha, e) || e.phi >= elo.phi) {
        hi = alpha;
      } else {
        if (curvature_ok(e)) return std::make_pair(alpha, std::move(e));
        if (e.dphi * (hi - lo) >= 0.0) hi = lo;
        lo = alpha;
        elo = std::move(e);
      }
      if (std::abs(hi - lo) <= 1e-16 * std::max(1.0, std::abs(lo)))
        return std::make_pair(lo, std::move(elo));
    }
    if (elo.in_domain && elo.phi < phi0) return std::make_pair(lo, std::move(elo));
    return std::nullopt;
  }

  std::optional<std::pair<double, WolfeEval>> run(double alpha_init) {
    double alpha_prev = 0.0;
    WolfeEval e_prev;
    e_prev.phi = phi0;
    e_prev.dphi = dphi0;
    e_prev.in_domain = true;
    double alpha = alpha_init;
    for (int i = 0; evals < budget; ++i) {
      WolfeEval e = eval(alpha);
      if (!e.in_domain || !armijo_ok(alpha, e) || (i > 0 && e.phi >= e_prev.phi)) {
        if (!e.in_domain) {
          // shrink toward the domain before bracketing
          alpha *= 0.5;
          if (alpha < 1e-20) return std::nullopt;
          continue;
        }
        return zoom(alpha_prev, std::move(e_prev), alpha);
      }
      if (curvature_ok(e)) return std::make_pair(alpha, std::move(e));
      if (e.dphi >= 0.0) return zoom(alpha, std::move(e), alpha_prev);
      alpha_prev = alpha;
      e_prev = std::move(e);
      alpha *= 2.0;
    }
    return std::nullopt;
  }
};

}  // namespace

RunResult lbfgs_run(const Problem& prob, const Vector& x0, const OptimizerConfig& cfg) {
  validate_start(prob, x0);
  const auto t0 = Clock::now();

  RunResult run;
  Vector x = x0;
  Vector g = prob.grad(x);
  if (!g.allFinite())
    throw std::invalid_argument("lbfgs_run: gradient at x0 is not finite");
  double f = prob.f(x);
  run.records.push_back(initial_record(prob, x, g.norm()));
  if (cfg.keep_iterates) run.iterates.push_back(x);
  run.stop = StopReason::kMaxIters;

  std::deque<std::pair<Vector, Vector>> pairs;  // (s, y)

  for (int k = 0; k < cfg.max_outer; ++k) {
    const double gnorm = g.norm();
    if (gnorm <= cfg.tau) {
      run.stop = StopReason::kGradTol;
      break;
    }

    // two-loop recursion
    Vector q = g;
    std::vector<double> alphas(pairs.size());
    for (size_t i = pairs.size(); i-- > 0;) {
      const auto& [s, y] = pairs[i];
      const double rho_i = 1.0 / y.dot(s);
      alphas[i] = rho_i * s.dot(q);
      q -= alphas[i] * y;
    }
    if (!pairs.empty()) {
      const auto& [s, y] = pairs.back();
      q *= s.dot(y) / y.dot(y);
    }
    for (size_t i = 0; i < pairs.size(); ++i) {
      const auto& [s, y] = pairs[i];
      const double rho_i = 1.0 / y.dot(s);
      const double beta = rho_i * y.dot(q);
      q += (alphas[i] - beta) * s;
    }
    Vector p = -q;
    double slope = g.dot(p);
    if (slope >= 0.0) {
      pairs.clear();
      p = -g;
      slope = -gnorm * gnorm;
    }

    WolfeSearch search{prob, x, p, f, slope, cfg.rho, cfg.wolfe_c2, cfg.ls_max};
    auto hit = search.run(cfg.alpha0);
    if (!hit) {
      run.stop = StopReason::kLineSearchFailure;
      break;
    }
    const double alpha = hit->first;
    WolfeEval& accepted = hit->second;

    Vector s_vec = accepted.x - x;
    Vector y_vec = accepted.g - g;
    const double sy = s_vec.dot(y_vec);
    if (sy > 1e-12 * s_vec.norm() * y_vec.norm()) {
      pairs.emplace_back(std::move(s_vec), std::move(y_vec));
      if (static_cast<int>(pairs.size()) > cfg.lbfgs_history) pairs.pop_front();
    } else {
      ++run.skipped_curvature_pairs;
    }

    run.total_oracle_calls += oracle_cost(Method::kLbfgs, 0, search.evals);

    IterationRecord rec;
    rec.k = k + 1;
    rec.alpha = alpha;
    rec.ls_evals = search.evals;
    rec.step_norm = alpha * p.norm();
    rec.oracle_calls = run.total_oracle_calls;
    x = std::move(accepted.x);
    g = std::move(accepted.g);
    f = accepted.phi;
    rec.f = f;
    rec.grad_norm = g.norm();
    rec.wall_seconds = seconds_since(t0);
    run.records.push_back(std::move(rec));
    if (cfg.keep_iterates) run.iterates.push_back(x);

    if (g.norm() <= cfg.tau) {
      run.stop = StopReason::kGradTol;
      break;
    }
  }

  run.final_x = std::move(x);
  return run;
}

FirstOrderMethod first_order_method_from_string(const std::string& name) {
  if (name == "sgd") return FirstOrderMethod::kSgd;
  if (name == "momentum") return FirstOrderMethod::kMomentum;
  if (name == "adagrad") return FirstOrderMethod::kAdagrad;
  if (name == "adadelta") return FirstOrderMethod::kAdadelta;
  if (name == "rmsprop") return FirstOrderMethod::kRmsprop;
  if (name == "adam") return FirstOrderMethod::kAdam;
  throw std::invalid_argument("unknown first-order method: " + name);
}

std::string to_string(FirstOrderMethod m) {
  switch (m) {
    case FirstOrderMethod::kSgd: return "sgd";
    case FirstOrderMethod::kMomentum: return "momentum";
    case FirstOrderMethod::kAdagrad: return "adagrad";
    case FirstOrderMethod::kAdadelta: return "adadelta";
    case FirstOrderMethod::kRmsprop: return "rmsprop";
    case FirstOrderMethod::kAdam: return "adam";
  }
  return "unknown";
}

RunResult first_order_run(FirstOrderMethod method, const Problem& prob,
                          const Vector& x0, const FirstOrderConfig& cfg) {
  validate_start(prob, x0);
  if (cfg.batch_fraction <= 0.0 || cfg.batch_fraction > 1.0)
    throw std::invalid_argument("first_order_run: batch_fraction must be in (0, 1]");
  const auto t0 = Clock::now();

  RunResult run;
  Vector x = x0;
  Vector g = prob.grad(x);
  run.records.push_back(initial_record(prob, x, g.norm()));
  if (cfg.keep_iterates) run.iterates.push_back(x);
  run.stop = StopReason::kMaxIters;

  const Eigen::Index d = prob.dim;
  Vector vel = Vector::Zero(d);       // momentum buffer / adam first moment
  Vector acc = Vector::Zero(d);       // squared-gradient accumulator
  Vector acc_dx = Vector::Zero(d);    // adadelta step accumulator
  SampleSelector sel{cfg.batch_fraction, cfg.seed};
  double b_over_n = cfg.batch_fraction;

  for (int k = 0; k < cfg.max_outer; ++k) {
    if (g.norm() <= cfg.tau) {
      run.stop = StopReason::kGradTol;
      break;
    }

    Vector ghat;
    if (cfg.batch_fraction >= 1.0) {
      ghat = g;
      b_over_n = 1.0;
    } else {
      const std::vector<int> idx = sel.draw(prob.n_components, k);
      b_over_n = static_cast<double>(idx.size()) /
                 static_cast<double>(prob.n_components);
      ghat = (1.0 / b_over_n) * prob.grad_sum(x, idx);
    }

    const int step_no = k + 1;
    const Vector x_prev = x;
    switch (method) {
      case FirstOrderMethod::kSgd:
        x = x - cfg.step * ghat;
        break;
      case FirstOrderMethod::kMomentum:
        vel = cfg.momentum * vel - cfg.step * ghat;
        x = x + vel;
        break;
      case FirstOrderMethod::kAdagrad:
        acc.array() += ghat.array().square();
        x.array() -= cfg.step * ghat.array() / (acc.array().sqrt() + cfg.fuzz);
        break;
      case FirstOrderMethod::kAdadelta: {
        acc.array() = cfg.decay * acc.array() + (1.0 - cfg.decay) * ghat.array().square();
        const Vector dx =
            (-(acc_dx.array() + cfg.fuzz).sqrt() / (acc.array() + cfg.fuzz).sqrt() *
             ghat.array())
                .matrix() *
            cfg.step;
        acc_dx.array() =
            cfg.decay * acc_dx.array() + (1.0 - cfg.decay) * dx.array().square();
        x += dx;
        break;
      }
      case FirstOrderMethod::kRmsprop:
        acc.array() = cfg.decay * acc.array() + (1.0 - cfg.decay) * ghat.array().square();
        x.array() -= cfg.step * ghat.array() / (acc.array().sqrt() + cfg.fuzz);
        break;
      case FirstOrderMethod::kAdam: {
        vel = cfg.adam_beta1 * vel + (1.0 - cfg.adam_beta1) * ghat;
        acc.array() = cfg.adam_beta2 * acc.array() +
                      (1.0 - cfg.adam_beta2) * ghat.array().square();
        const double bc1 = 1.0 - std::pow(cfg.adam_beta1, step_no);
        const double bc2 = 1.0 - std::pow(cfg.adam_beta2, step_no);
        x.array() -= cfg.step * (vel.array() / bc1) /
                     ((acc.array() / bc2).sqrt() + cfg.fuzz);
        break;
      }
    }

    if (!prob.domain_ok(x) || !prob.segment_ok(x_prev, x)) {
      run.stop = StopReason::kDomainError;
      break;
    }
    g = prob.grad(x);
    if (!g.allFinite()) {
      run.stop = StopReason::kDomainError;
      break;
    }
    run.total_oracle_calls += oracle_cost(Method::kFirstOrder, 0, 0, 1.0, b_over_n);

    IterationRecord rec;
    rec.k = k + 1;
    rec.alpha = cfg.step;
    rec.f = prob.f(x);
    rec.grad_norm = g.norm();
    rec.oracle_calls = run.total_oracle_calls;
    rec.wall_seconds = seconds_since(t0);
    run.records.push_back(std::move(rec));
    if (cfg.keep_iterates) run.iterates.push_back(x);
  }

  run.final_x = std::move(x);
  return run;
}

void write_trace_csv(std::ostream& os, const RunResult& run, bool include_wall,
                     bool include_diagnostics) {
  os << "k,f,grad_norm,alpha,inner_iters,ls_evals,step_norm,oracle_calls";
  if (include_wall) os << ",wall_seconds";
  if (include_diagnostics) os << "," << diagnostics_csv_header();
  os << "\n";
  for (const IterationRecord& r : run.records) {
    os << r.k << "," << fmt_double(r.f) << "," << fmt_double(r.grad_norm) << ","
       << fmt_double(r.alpha) << "," << r.inner_iters << "," << r.ls_evals << ","
       << fmt_double(r.step_norm) << "," << fmt_double(r.oracle_calls);
    if (include_wall) os << "," << fmt_double(r.wall_seconds);
    if (include_diagnostics) {
      if (r.diag.has_value()) {
        os << ","
           << diagnostics_csv_row(r.diag->spectral, r.diag->teps, r.diag->nu_tilde,
                                  r.diag->gamma_tilde, r.diag->eta, r.diag->c1,
                                  r.diag->c2);
      } else {
        os << ",nan,nan,nan,nan,0,0,0,nan,nan,nan,nan,nan,nan";
      }
    }
    os << "\n";
  }
}

}  // namespace newtonmr

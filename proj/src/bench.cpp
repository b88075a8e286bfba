#include "newtonmr/bench.hpp"

#include "newtonmr/random.hpp"

#include "json.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace newtonmr {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kInf = std::numeric_limits<double>::infinity();

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_short(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::string sanitize(const std::string& s) {
  std::string out = s;
  for (char& c : out)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-' && c != '.')
      c = '-';
  return out;
}

}  // namespace

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string fnv1a64_hex(const std::string& bytes) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(bytes)));
  return buf;
}

bool method_is_first_order(const std::string& kind) {
  return kind == "sgd" || kind == "momentum" || kind == "adagrad" ||
         kind == "adadelta" || kind == "rmsprop" || kind == "adam";
}

// ---------------------------------------------------------------------------
// Problem synthesis

namespace {

Dataset gen_softmax_data(Eigen::Index n, Eigen::Index p, int classes,
                         std::uint64_t seed) {
  if (n < 1 || p < 1 || classes < 2)
    throw std::invalid_argument("gen_softmax_data: need n >= 1, p >= 1, classes >= 2");
  Rng rng(derive_seed(seed, 0));
  Dataset data;
  data.features = rng.normal_matrix(n, p) / std::sqrt(static_cast<double>(p));
  const Matrix w_true = rng.normal_matrix(classes - 1, p);
  data.labels.resize(static_cast<size_t>(n));
  data.has_labels = true;
  for (Eigen::Index i = 0; i < n; ++i) {
    Vector z = Vector::Zero(classes);
    z.tail(classes - 1) = w_true * data.features.row(i).transpose();
    const double m = z.maxCoeff();
    Vector prob = (z.array() - m).exp();
    prob /= prob.sum();
    double u = rng.uniform();
    int label = classes - 1;
    for (int c = 0; c < classes; ++c) {
      u -= prob(c);
      if (u <= 0.0) {
        label = c;
        break;
      }
    }
    data.labels[static_cast<size_t>(i)] = label;
  }
  return data;
}

SymMatrix random_pd_matrix(Eigen::Index dim, double gamma, double top,
                           std::uint64_t seed) {
  if (dim < 1) throw std::invalid_argument("random_pd_matrix: dim must be positive");
  if (!(gamma > 0.0) || top < gamma)
    throw std::invalid_argument("random_pd_matrix: need 0 < gamma <= top");
  Rng rng(derive_seed(seed, 0));
  const Matrix q = Eigen::HouseholderQR<Matrix>(rng.normal_matrix(dim, dim))
                       .householderQ();
  Vector eigs(dim);
  for (Eigen::Index i = 0; i < dim; ++i)
    eigs(i) = dim == 1 ? gamma
                       : gamma + (top - gamma) * static_cast<double>(i) /
                                     static_cast<double>(dim - 1);
  return SymMatrix(q * eigs.asDiagonal() * q.transpose());
}

}  // namespace

BuiltProblem build_problem(const ProblemSpec& spec, std::uint64_t x0_seed) {
  BuiltProblem out;
  if (spec.kind == "quadratic") {
    const SymMatrix a = random_pd_matrix(spec.dim, spec.gamma, spec.top, spec.data_seed);
    Rng rng(derive_seed(spec.data_seed, 1));
    const Vector c = a.apply(rng.normal_vector(spec.dim));
    out.problem = make_quadratic(a, c);
  } else if (spec.kind == "fraction") {
    out.problem = make_fraction(spec.a, spec.b);
  } else if (spec.kind == "softmax") {
    const Dataset data = gen_softmax_data(spec.n, spec.p, spec.classes, spec.data_seed);
    out.problem = make_softmax(data, spec.classes);
  } else if (spec.kind == "gmm") {
    auto [data, truth] = gen_gmm_data(spec.p, spec.n, spec.cond, spec.data_seed);
    out.problem = make_gmm(data, truth.sigma1, truth.sigma2);
    out.truth = std::move(truth);
  } else if (spec.kind == "csv") {
    if (spec.dataset.empty())
      throw std::invalid_argument("problem kind csv requires a dataset path");
    const Dataset data = load_csv(spec.dataset, /*has_labels=*/true, spec.skip_header,
                                  spec.scale01);
    int classes = 0;
    for (int l : data.labels) classes = std::max(classes, l + 1);
    if (classes < 2)
      throw std::invalid_argument("csv dataset must contain at least two classes");
    out.problem = make_softmax(data, classes);
  } else {
    throw std::invalid_argument("unknown problem kind: " + spec.kind);
  }

  if (x0_seed != 0) {
    Rng rng(x0_seed);
    out.x0 = rng.normal_vector(out.problem.dim);
  } else if (spec.kind == "fraction") {
    // The fraction family is stationary at the origin; use a fixed draw.
    Rng rng(derive_seed(spec.data_seed, 2));
    out.x0 = rng.normal_vector(out.problem.dim);
  } else {
    out.x0 = Vector::Zero(out.problem.dim);
  }
  if (!out.problem.domain_ok(out.x0))
    throw std::runtime_error("build_problem: start point violates the domain");
  return out;
}

// ---------------------------------------------------------------------------
// Config parsing

namespace {

[[noreturn]] void unknown_key(const std::string& where, const std::string& key) {
  throw std::invalid_argument("config: unknown key '" + key + "' in " + where);
}

void parse_perturb(const json& j, PerturbationSpec& out) {
  for (const auto& [key, val] : j.items()) {
    if (key == "kind") {
      const std::string k = val.get<std::string>();
      if (k == "none") out.kind = PerturbKind::kNone;
      else if (k == "additive") out.kind = PerturbKind::kAdditive;
      else if (k == "subsample") out.kind = PerturbKind::kSubsample;
      else throw std::invalid_argument("config: unknown perturbation kind: " + k);
    } else if (key == "epsilon") out.epsilon = val.get<double>();
    else if (key == "fraction") out.fraction = val.get<double>();
    else if (key == "seed") out.seed = val.get<std::uint64_t>();
    else unknown_key("perturb", key);
  }
}

void parse_opt(const json& j, OptimizerConfig& o) {
  for (const auto& [key, val] : j.items()) {
    if (key == "max_outer") o.max_outer = val.get<int>();
    else if (key == "tau") o.tau = val.get<double>();
    else if (key == "rho") o.rho = val.get<double>();
    else if (key == "theta") o.theta = val.get<double>();
    else if (key == "inner_max") o.inner_max = val.get<int>();
    else if (key == "alpha0") o.alpha0 = val.get<double>();
    else if (key == "backtrack") o.backtrack = val.get<double>();
    else if (key == "ls_max") o.ls_max = val.get<int>();
    else if (key == "use_line_search") o.use_line_search = val.get<bool>();
    else if (key == "update") {
      const std::string u = val.get<std::string>();
      if (u == "minres") o.update = UpdateRule::kMinres;
      else if (u == "exact_pinv") o.update = UpdateRule::kExactPinv;
      else throw std::invalid_argument("config: unknown update rule: " + u);
    } else if (key == "perturb") parse_perturb(val, o.perturb);
    else if (key == "seed_mode") {
      const std::string s = val.get<std::string>();
      if (s == "auto") o.seed_mode = SeedMode::kAuto;
      else if (s == "plain") o.seed_mode = SeedMode::kPlain;
      else if (s == "range_invariant") o.seed_mode = SeedMode::kRangeInvariant;
      else throw std::invalid_argument("config: unknown seed mode: " + s);
    } else if (key == "reorthogonalize") o.reorthogonalize = val.get<bool>();
    else if (key == "collect_diagnostics") o.collect_diagnostics = val.get<bool>();
    else if (key == "rank_tol") o.rank_tol = val.get<double>();
    else if (key == "recheck_direction") o.recheck_direction = val.get<bool>();
    else if (key == "keep_iterates") o.keep_iterates = val.get<bool>();
    else if (key == "lbfgs_history") o.lbfgs_history = val.get<int>();
    else if (key == "wolfe_c2") o.wolfe_c2 = val.get<double>();
    else unknown_key("opt", key);
  }
}

void parse_fo(const json& j, FirstOrderConfig& f) {
  for (const auto& [key, val] : j.items()) {
    if (key == "step") f.step = val.get<double>();
    else if (key == "batch_fraction") f.batch_fraction = val.get<double>();
    else if (key == "seed") f.seed = val.get<std::uint64_t>();
    else if (key == "max_outer") f.max_outer = val.get<int>();
    else if (key == "tau") f.tau = val.get<double>();
    else if (key == "momentum") f.momentum = val.get<double>();
    else if (key == "decay") f.decay = val.get<double>();
    else if (key == "adam_beta1") f.adam_beta1 = val.get<double>();
    else if (key == "adam_beta2") f.adam_beta2 = val.get<double>();
    else if (key == "fuzz") f.fuzz = val.get<double>();
    else if (key == "keep_iterates") f.keep_iterates = val.get<bool>();
    else unknown_key("fo", key);
  }
}

void parse_method(const json& j, MethodSpec& m) {
  for (const auto& [key, val] : j.items()) {
    if (key == "name") m.name = val.get<std::string>();
    else if (key == "kind") m.kind = val.get<std::string>();
    else if (key == "opt") parse_opt(val, m.opt);
    else if (key == "fo") parse_fo(val, m.fo);
    else if (key == "step_grid") m.step_grid = val.get<std::vector<double>>();
    else unknown_key("method", key);
  }
  if (m.name.empty()) m.name = m.kind;
}

void parse_problem(const json& j, ProblemSpec& p) {
  for (const auto& [key, val] : j.items()) {
    if (key == "kind") p.kind = val.get<std::string>();
    else if (key == "n") p.n = val.get<Eigen::Index>();
    else if (key == "p") p.p = val.get<Eigen::Index>();
    else if (key == "classes") p.classes = val.get<int>();
    else if (key == "cond") p.cond = val.get<double>();
    else if (key == "data_seed") p.data_seed = val.get<std::uint64_t>();
    else if (key == "a") p.a = val.get<double>();
    else if (key == "b") p.b = val.get<double>();
    else if (key == "dim") p.dim = val.get<Eigen::Index>();
    else if (key == "gamma") p.gamma = val.get<double>();
    else if (key == "top") p.top = val.get<double>();
    else if (key == "dataset") p.dataset = val.get<std::string>();
    else if (key == "skip_header") p.skip_header = val.get<bool>();
    else if (key == "scale01") p.scale01 = val.get<bool>();
    else unknown_key("problem", key);
  }
}

MethodSpec default_newton_mr() {
  MethodSpec m;
  m.kind = m.name = "newton_mr";
  return m;
}

// Per-experiment defaults, overlaid by the user's config afterwards.
void apply_experiment_defaults(ExperimentConfig& cfg) {
  if (cfg.experiment == "unstable") {
    cfg.problem.kind = "fraction";
    cfg.problem.a = 100.0;
    cfg.problem.b = 1.0;
    cfg.epsilons = {0.0, 1e-2, 1e-5, 1e-13};
    cfg.seeds = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    MethodSpec m = default_newton_mr();
    m.opt.update = UpdateRule::kExactPinv;
    m.opt.rank_tol = 0.0;  // keep every nonzero eigenvalue: true pseudo-inverse
    m.opt.max_outer = 100;
    m.opt.ls_max = 60;
    cfg.methods = {m};
  } else if (cfg.experiment == "softmax_compare") {
    cfg.problem.kind = "softmax";
    cfg.fractions = {0.1, 0.05, 0.01};
    MethodSpec mr = default_newton_mr();
    mr.opt.max_outer = 200;
    MethodSpec ssmr = mr;
    ssmr.kind = ssmr.name = "ss_newton_mr";
    ssmr.opt.perturb.kind = PerturbKind::kSubsample;
    MethodSpec cg = mr;
    cg.kind = cg.name = "newton_cg";
    MethodSpec sscg = cg;
    sscg.kind = sscg.name = "ss_newton_cg";
    sscg.opt.perturb.kind = PerturbKind::kSubsample;
    MethodSpec lb = mr;
    lb.kind = lb.name = "lbfgs";
    cfg.methods = {mr, ssmr, cg, sscg, lb};
  } else if (cfg.experiment == "stability_sweep") {
    cfg.problem.kind = "quadratic";
    cfg.epsilons = {1e-3, 1e-2, 1e-1};
    MethodSpec m = default_newton_mr();
    m.opt.collect_diagnostics = true;
    cfg.methods = {m};
    cfg.traces_with_diagnostics = true;
  } else if (cfg.experiment == "gmm_profile") {
    cfg.problem.kind = "gmm";
    cfg.problem.p = 10;
    cfg.problem.n = 1000;
    cfg.problem.cond = 1e4;
    MethodSpec ssmr = default_newton_mr();
    ssmr.kind = ssmr.name = "ss_newton_mr";
    ssmr.opt.perturb.kind = PerturbKind::kSubsample;
    ssmr.opt.perturb.fraction = 0.05;
    ssmr.opt.max_outer = 200;
    MethodSpec lb = default_newton_mr();
    lb.kind = lb.name = "lbfgs";
    lb.opt.max_outer = 200;
    cfg.methods = {ssmr, lb};
  } else if (cfg.experiment != "custom") {
    throw std::invalid_argument("config: unknown experiment: " + cfg.experiment);
  }
}

json perturb_json(const PerturbationSpec& p) {
  const char* kind = p.kind == PerturbKind::kNone        ? "none"
                     : p.kind == PerturbKind::kAdditive  ? "additive"
                                                         : "subsample";
  return json{{"kind", kind},
              {"epsilon", p.epsilon},
              {"fraction", p.fraction},
              {"seed", p.seed}};
}

json opt_json(const OptimizerConfig& o) {
  return json{{"max_outer", o.max_outer},
              {"tau", o.tau},
              {"rho", o.rho},
              {"theta", o.theta},
              {"inner_max", o.inner_max},
              {"alpha0", o.alpha0},
              {"backtrack", o.backtrack},
              {"ls_max", o.ls_max},
              {"use_line_search", o.use_line_search},
              {"update", o.update == UpdateRule::kMinres ? "minres" : "exact_pinv"},
              {"perturb", perturb_json(o.perturb)},
              {"seed_mode", o.seed_mode == SeedMode::kAuto        ? "auto"
                            : o.seed_mode == SeedMode::kPlain     ? "plain"
                                                                  : "range_invariant"},
              {"reorthogonalize", o.reorthogonalize},
              {"collect_diagnostics", o.collect_diagnostics},
              {"rank_tol", o.rank_tol},
              {"recheck_direction", o.recheck_direction},
              {"keep_iterates", o.keep_iterates},
              {"lbfgs_history", o.lbfgs_history},
              {"wolfe_c2", o.wolfe_c2}};
}

json fo_json(const FirstOrderConfig& f) {
  return json{{"step", f.step},
              {"batch_fraction", f.batch_fraction},
              {"seed", f.seed},
              {"max_outer", f.max_outer},
              {"tau", f.tau},
              {"momentum", f.momentum},
              {"decay", f.decay},
              {"adam_beta1", f.adam_beta1},
              {"adam_beta2", f.adam_beta2},
              {"fuzz", f.fuzz},
              {"keep_iterates", f.keep_iterates}};
}

json method_json(const MethodSpec& m) {
  json j{{"name", m.name}, {"kind", m.kind}, {"opt", opt_json(m.opt)}};
  if (method_is_first_order(m.kind)) j["fo"] = fo_json(m.fo);
  if (!m.step_grid.empty()) j["step_grid"] = m.step_grid;
  return j;
}

json problem_json(const ProblemSpec& p) {
  json j{{"kind", p.kind}, {"data_seed", p.data_seed}};
  if (p.kind == "softmax") {
    j["n"] = p.n;
    j["p"] = p.p;
    j["classes"] = p.classes;
  } else if (p.kind == "gmm") {
    j["n"] = p.n;
    j["p"] = p.p;
    j["cond"] = p.cond;
  } else if (p.kind == "fraction") {
    j["a"] = p.a;
    j["b"] = p.b;
  } else if (p.kind == "quadratic") {
    j["dim"] = p.dim;
    j["gamma"] = p.gamma;
    j["top"] = p.top;
  } else if (p.kind == "csv") {
    j["dataset"] = p.dataset;
    j["skip_header"] = p.skip_header;
    j["scale01"] = p.scale01;
  }
  return j;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
  json j = json::parse(text);
  ExperimentConfig cfg;
  if (j.contains("experiment")) cfg.experiment = j["experiment"].get<std::string>();
  apply_experiment_defaults(cfg);
  for (const auto& [key, val] : j.items()) {
    if (key == "experiment") continue;
    else if (key == "problem") parse_problem(val, cfg.problem);
    else if (key == "methods") {
      cfg.methods.clear();
      for (const json& mj : val) {
        MethodSpec m;
        parse_method(mj, m);
        cfg.methods.push_back(std::move(m));
      }
    } else if (key == "epsilons") cfg.epsilons = val.get<std::vector<double>>();
    else if (key == "fractions") cfg.fractions = val.get<std::vector<double>>();
    else if (key == "seeds") cfg.seeds = val.get<std::vector<std::uint64_t>>();
    else if (key == "runs") cfg.runs = val.get<int>();
    else if (key == "jobs") cfg.jobs = val.get<int>();
    else if (key == "output_dir") cfg.output_dir = val.get<std::string>();
    else if (key == "traces_with_diagnostics")
      cfg.traces_with_diagnostics = val.get<bool>();
    else unknown_key("top level", key);
  }
  if (cfg.methods.empty())
    throw std::invalid_argument("config: at least one method is required");
  if (cfg.seeds.empty())
    throw std::invalid_argument("config: at least one seed is required");
  if (cfg.runs < 1) throw std::invalid_argument("config: runs must be >= 1");
  if (cfg.problem.kind == "csv" && !fs::exists(cfg.problem.dataset))
    throw std::invalid_argument("config: dataset does not exist: " + cfg.problem.dataset);
  std::set<std::string> names;
  for (const MethodSpec& m : cfg.methods)
    if (!names.insert(m.name).second)
      throw std::invalid_argument("config: duplicate method name: " + m.name);
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

std::string ExperimentConfig::resolved_json() const {
  json j;
  j["experiment"] = experiment;
  j["problem"] = problem_json(problem);
  json ms = json::array();
  for (const MethodSpec& m : methods) ms.push_back(method_json(m));
  j["methods"] = ms;
  j["epsilons"] = epsilons;
  j["fractions"] = fractions;
  j["seeds"] = seeds;
  j["runs"] = runs;
  j["jobs"] = jobs;
  j["output_dir"] = output_dir;
  j["traces_with_diagnostics"] = traces_with_diagnostics;
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// Experiment execution

namespace {

struct Job {
  MethodSpec method;
  std::shared_ptr<const BuiltProblem> built;
  std::string label;
  std::string trace_file;
  std::uint64_t seed = 0;
  int run_index = -1;
  std::optional<double> epsilon;
  std::optional<double> fraction;
};

std::string eps_tag(double eps) { return eps == 0.0 ? "" : "_eps" + fmt_short(eps); }

// Expands config into independent jobs. Sweep rules: additive methods fan out
// over cfg.epsilons (0 = baseline, perturbation dropped), subsample methods
// over cfg.fractions; gmm_profile repeats every method over `runs` datasets.
std::vector<Job> expand_jobs(const ExperimentConfig& cfg) {
  std::vector<Job> jobs;
  const bool sweep_eps = !cfg.epsilons.empty();
  const bool sweep_frac = !cfg.fractions.empty();

  if (cfg.experiment == "gmm_profile") {
    for (int r = 0; r < cfg.runs; ++r) {
      ProblemSpec ps = cfg.problem;
      ps.data_seed = derive_seed(cfg.problem.data_seed, static_cast<std::uint64_t>(r));
      auto built = std::make_shared<const BuiltProblem>(build_problem(ps));
      for (size_t mi = 0; mi < cfg.methods.size(); ++mi) {
        Job job;
        job.method = cfg.methods[mi];
        job.method.opt.keep_iterates = true;
        job.method.fo.keep_iterates = true;
        job.method.opt.perturb.seed = derive_seed(ps.data_seed, 100 + mi);
        job.method.fo.seed = derive_seed(ps.data_seed, 200 + mi);
        job.built = built;
        job.label = job.method.name;
        job.seed = ps.data_seed;
        job.run_index = r;
        if (job.method.opt.perturb.kind == PerturbKind::kSubsample)
          job.fraction = job.method.opt.perturb.fraction;
        job.trace_file = sanitize(job.label) + "_run" + std::to_string(r) + ".csv";
        jobs.push_back(std::move(job));
      }
    }
    return jobs;
  }

  // One shared problem; stochastic parts vary with the seed list.
  const bool random_start = cfg.problem.kind == "fraction";
  std::map<std::uint64_t, std::shared_ptr<const BuiltProblem>> built_cache;
  auto built_for = [&](std::uint64_t seed) {
    const std::uint64_t key = random_start ? seed : 0;
    auto it = built_cache.find(key);
    if (it != built_cache.end()) return it->second;
    auto built = std::make_shared<const BuiltProblem>(
        build_problem(cfg.problem, random_start ? derive_seed(seed, 7) : 0));
    built_cache.emplace(key, built);
    return built;
  };

  for (size_t mi = 0; mi < cfg.methods.size(); ++mi) {
    const MethodSpec& base = cfg.methods[mi];
    std::vector<MethodSpec> variants;
    if (base.opt.perturb.kind == PerturbKind::kSubsample && sweep_frac &&
        !method_is_first_order(base.kind)) {
      for (double f : cfg.fractions) {
        MethodSpec m = base;
        m.opt.perturb.fraction = f;
        m.name = base.name + "_f" + fmt_short(f);
        variants.push_back(std::move(m));
      }
    } else if (base.opt.perturb.kind != PerturbKind::kSubsample && sweep_eps &&
               !method_is_first_order(base.kind)) {
      for (double e : cfg.epsilons) {
        MethodSpec m = base;
        if (e > 0.0) {
          m.opt.perturb.kind = PerturbKind::kAdditive;
          m.opt.perturb.epsilon = e;
        } else {
          m.opt.perturb.kind = PerturbKind::kNone;
          // A zero rank tolerance only makes sense against a genuinely
          // perturbed matrix; for the clean baseline it would invert
          // floating-point noise eigenvalues of the true Hessian. Fall back
          // to the decomposition default for the reference run.
          if (m.opt.rank_tol == 0.0) m.opt.rank_tol = -1.0;
        }
        m.name = base.name + eps_tag(e);
        variants.push_back(std::move(m));
      }
    } else {
      variants.push_back(base);
    }

    for (MethodSpec& v : variants) {
      for (std::uint64_t seed : cfg.seeds) {
        Job job;
        job.method = v;
        job.method.opt.perturb.seed = derive_seed(seed, 300 + mi);
        job.method.fo.seed = derive_seed(seed, 400 + mi);
        job.built = built_for(seed);
        job.label = v.name;
        job.seed = seed;
        if (v.opt.perturb.kind == PerturbKind::kAdditive)
          job.epsilon = v.opt.perturb.epsilon;
        if (v.opt.perturb.kind == PerturbKind::kSubsample)
          job.fraction = v.opt.perturb.fraction;
        job.trace_file = sanitize(v.name) + "_s" + std::to_string(seed) + ".csv";
        jobs.push_back(std::move(job));
      }
    }
  }
  return jobs;
}

RunResult dispatch_run(const MethodSpec& m, const Problem& prob, const Vector& x0) {
  if (m.kind == "newton_mr" || m.kind == "ss_newton_mr")
    return newton_mr_run(prob, x0, m.opt);
  if (m.kind == "newton_cg" || m.kind == "ss_newton_cg")
    return newton_cg_run(prob, x0, m.opt);
  if (m.kind == "gauss_newton" || m.kind == "ss_gauss_newton")
    return gauss_newton_run(prob, x0, m.opt);
  if (m.kind == "lbfgs") return lbfgs_run(prob, x0, m.opt);
  if (method_is_first_order(m.kind))
    return first_order_run(first_order_method_from_string(m.kind), prob, x0, m.fo);
  throw std::invalid_argument("unknown method kind: " + m.kind);
}

// Appends one extra column to trace CSV text (line-oriented splice).
std::string splice_column(const std::string& csv, const std::string& header,
                          const std::vector<double>& values) {
  std::istringstream in(csv);
  std::ostringstream out;
  std::string line;
  size_t row = 0;
  while (std::getline(in, line)) {
    if (row == 0) {
      out << line << "," << header << "\n";
    } else {
      const double v = row - 1 < values.size() ? values[row - 1] : kNaN;
      out << line << "," << fmt_double(v) << "\n";
    }
    ++row;
  }
  return out.str();
}

struct JobOutcome {
  RunSummary summary;
  std::string trace_text;
  std::vector<std::string> notes;
};

JobOutcome execute_job(const Job& job, const ExperimentConfig& cfg) {
  JobOutcome out;
  RunSummary& s = out.summary;
  s.label = job.label;
  s.method_kind = job.method.kind;
  s.seed = job.seed;
  s.run_index = job.run_index;
  s.epsilon = job.epsilon;
  s.fraction = job.fraction;
  try {
    const Problem& prob = job.built->problem;
    const Vector& x0 = job.built->x0;
    MethodSpec m = job.method;

    if (method_is_first_order(m.kind) && !m.step_grid.empty()) {
      double best_f = kInf;
      double best_step = m.fo.step;
      std::string note = job.label + ": step grid";
      for (double step : m.step_grid) {
        FirstOrderConfig probe = m.fo;
        probe.step = step;
        probe.keep_iterates = false;
        const RunResult r = first_order_run(
            first_order_method_from_string(m.kind), prob, x0, probe);
        const double ff = r.records.back().f;
        note += " " + fmt_short(step) + ":" + fmt_short(ff);
        if (std::isfinite(ff) && ff < best_f) {
          best_f = ff;
          best_step = step;
        }
      }
      m.fo.step = best_step;
      s.tuned_step = best_step;
      note += " -> " + fmt_short(best_step);
      out.notes.push_back(note);
    }

    const RunResult run = dispatch_run(m, prob, x0);
    const IterationRecord& last = run.records.back();
    s.final_f = last.f;
    s.final_grad_norm = last.grad_norm;
    s.total_oracle_calls = run.total_oracle_calls;
    s.wall_seconds = last.wall_seconds;
    s.iterations = static_cast<int>(run.records.size()) - 1;
    s.stop = to_string(run.stop);
    if (job.built->truth.has_value())
      s.estimation_error = estimation_error(run.final_x, *job.built->truth);

    std::ostringstream trace;
    const bool with_diag =
        cfg.traces_with_diagnostics || cfg.experiment == "stability_sweep";
    write_trace_csv(trace, run, /*include_wall=*/false, with_diag);
    out.trace_text = trace.str();
    if (job.built->truth.has_value() && !run.iterates.empty()) {
      std::vector<double> errs;
      errs.reserve(run.iterates.size());
      for (const Vector& xk : run.iterates)
        errs.push_back(estimation_error(xk, *job.built->truth));
      out.trace_text = splice_column(out.trace_text, "estimation_error", errs);
    }
    s.trace_file = job.trace_file;
  } catch (const std::exception& e) {
    s.error = e.what();
    s.final_f = kNaN;
    s.final_grad_norm = kNaN;
    out.trace_text.clear();
  }
  return out;
}

json summary_json(const RunSummary& s, const std::string& hash) {
  json j;
  j["label"] = s.label;
  j["kind"] = s.method_kind;
  j["seed"] = s.seed;
  if (s.run_index >= 0) j["run_index"] = s.run_index;
  if (s.epsilon) j["epsilon"] = *s.epsilon;
  if (s.fraction) j["fraction"] = *s.fraction;
  if (!s.error.empty()) {
    j["error"] = s.error;
    return j;
  }
  j["trace"] = s.trace_file;
  j["hash"] = hash;
  j["iterations"] = s.iterations;
  j["stop"] = s.stop;
  j["final_f"] = s.final_f;
  j["final_grad_norm"] = s.final_grad_norm;
  j["oracle_calls"] = s.total_oracle_calls;
  j["wall_seconds"] = s.wall_seconds;
  if (s.estimation_error) j["estimation_error"] = *s.estimation_error;
  if (s.tuned_step) j["tuned_step"] = *s.tuned_step;
  return j;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::vector<std::vector<double>> metric_table(
    const std::vector<RunSummary>& summaries, const std::vector<std::string>& methods,
    const std::string& metric) {
  // group rows by repetition (run_index if present, else seed), first
  // appearance order
  std::vector<std::pair<int, std::uint64_t>> keys;
  std::vector<std::vector<double>> values;
  auto row_of = [&](const RunSummary& s) -> size_t {
    const std::pair<int, std::uint64_t> key{s.run_index, s.seed};
    for (size_t i = 0; i < keys.size(); ++i)
      if (keys[i] == key) return i;
    keys.push_back(key);
    values.emplace_back(methods.size(), kNaN);
    return keys.size() - 1;
  };
  for (const RunSummary& s : summaries) {
    const auto mit = std::find(methods.begin(), methods.end(), s.label);
    if (mit == methods.end()) continue;
    const size_t col = static_cast<size_t>(mit - methods.begin());
    double v = kNaN;
    if (s.error.empty()) {
      if (metric == "final_f") v = s.final_f;
      else if (metric == "final_grad_norm") v = s.final_grad_norm;
      else if (metric == "estimation_error")
        v = s.estimation_error ? *s.estimation_error : kNaN;
      else throw std::invalid_argument("unknown profile metric: " + metric);
    }
    values[row_of(s)][col] = v;
  }
  return values;
}

}  // namespace

ProfileTable performance_profile(const std::vector<std::string>& methods,
                                 const std::vector<std::vector<double>>& values) {
  if (methods.size() < 2)
    throw std::invalid_argument("performance_profile: need at least two methods");
  if (values.empty())
    throw std::invalid_argument("performance_profile: need at least one run");
  ProfileTable table;
  table.methods = methods;
  table.values = values;

  std::vector<std::vector<double>> ratios;
  for (size_t r = 0; r < values.size(); ++r) {
    const std::vector<double>& row = values[r];
    if (row.size() != methods.size())
      throw std::invalid_argument("performance_profile: ragged value table");
    double best = kInf;
    for (double v : row)
      if (std::isfinite(v)) best = std::min(best, v);
    if (!std::isfinite(best)) {
      table.excluded_runs.push_back(static_cast<int>(r));
      continue;
    }
    const double shift = best <= 0.0 ? 1.0 - best : 0.0;
    std::vector<double> ratio_row(methods.size(), kInf);
    for (size_t m = 0; m < row.size(); ++m)
      if (std::isfinite(row[m])) ratio_row[m] = (row[m] + shift) / (best + shift);
    ratios.push_back(std::move(ratio_row));
  }
  if (ratios.empty())
    throw std::invalid_argument("performance_profile: every run failed");
  table.ratios = ratios;

  std::set<double> grid{1.0};
  for (const auto& row : ratios)
    for (double v : row)
      if (std::isfinite(v)) grid.insert(v);
  table.lambdas.assign(grid.begin(), grid.end());

  const double n_runs = static_cast<double>(ratios.size());
  table.curves.assign(methods.size(), std::vector<double>(table.lambdas.size(), 0.0));
  for (size_t m = 0; m < methods.size(); ++m)
    for (size_t li = 0; li < table.lambdas.size(); ++li) {
      int count = 0;
      for (const auto& row : ratios)
        if (row[m] <= table.lambdas[li]) ++count;
      table.curves[m][li] = static_cast<double>(count) / n_runs;
    }
  return table;
}

std::string ProfileTable::csv() const {
  std::ostringstream out;
  out << "lambda";
  for (const std::string& m : methods) out << "," << m;
  out << "\n";
  for (size_t li = 0; li < lambdas.size(); ++li) {
    out << fmt_double(lambdas[li]);
    for (size_t m = 0; m < methods.size(); ++m) out << "," << fmt_double(curves[m][li]);
    out << "\n";
  }
  return out.str();
}

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.output_dir);
  const std::vector<Job> jobs = expand_jobs(cfg);

  std::vector<JobOutcome> outcomes(jobs.size());
  const int workers = std::max(1, cfg.jobs);
  if (workers == 1 || jobs.size() <= 1) {
    for (size_t i = 0; i < jobs.size(); ++i) outcomes[i] = execute_job(jobs[i], cfg);
  } else {
    std::atomic<size_t> next{0};
    auto worker = [&] {
      for (size_t i = next.fetch_add(1); i < jobs.size(); i = next.fetch_add(1))
        outcomes[i] = execute_job(jobs[i], cfg);
    };
    std::vector<std::thread> pool;
    for (int w = 0; w < std::min<int>(workers, static_cast<int>(jobs.size())); ++w)
      pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }

  ExperimentResult result;
  json files = json::object();
  json run_entries = json::array();
  for (size_t i = 0; i < jobs.size(); ++i) {
    JobOutcome& oc = outcomes[i];
    std::string hash;
    if (oc.summary.error.empty()) {
      write_file(fs::path(cfg.output_dir) / oc.summary.trace_file, oc.trace_text);
      hash = fnv1a64_hex(oc.trace_text);
      files[oc.summary.trace_file] = hash;
    }
    run_entries.push_back(summary_json(oc.summary, hash));
    for (std::string& n : oc.notes) result.notes.push_back(std::move(n));
    result.runs.push_back(std::move(oc.summary));
  }

  if (cfg.experiment == "gmm_profile") {
    std::vector<std::string> methods;
    for (const MethodSpec& m : cfg.methods) methods.push_back(m.name);
    for (const std::string metric :
         {"final_f", "final_grad_norm", "estimation_error"}) {
      try {
        const ProfileTable table =
            performance_profile(methods, metric_table(result.runs, methods, metric));
        const std::string text = table.csv();
        const std::string name = "profile_" + metric + ".csv";
        write_file(fs::path(cfg.output_dir) / name, text);
        files[name] = fnv1a64_hex(text);
        for (int r : table.excluded_runs)
          result.notes.push_back("profile " + metric + ": run " + std::to_string(r) +
                                 " excluded (all methods failed)");
      } catch (const std::exception& e) {
        result.notes.push_back("profile " + metric + " skipped: " + e.what());
      }
    }
  }

  json manifest;
  manifest["experiment"] = cfg.experiment;
  manifest["config"] = json::parse(cfg.resolved_json());
  manifest["runs"] = run_entries;
  manifest["files"] = files;
  manifest["notes"] = result.notes;
  manifest["created_unix"] = static_cast<std::int64_t>(std::time(nullptr));

  const fs::path mpath = fs::path(cfg.output_dir) / "manifest.json";
  write_file(mpath, manifest.dump(2) + "\n");
  result.manifest_path = mpath.string();
  return result;
}

ProfileTable profile_from_manifest(const std::string& manifest_path,
                                   const std::string& metric) {
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("cannot open manifest: " + manifest_path);
  json manifest = json::parse(in);

  std::vector<RunSummary> summaries;
  std::vector<std::string> methods;
  for (const json& e : manifest.at("runs")) {
    RunSummary s;
    s.label = e.at("label").get<std::string>();
    s.seed = e.value("seed", std::uint64_t{0});
    s.run_index = e.value("run_index", -1);
    if (e.contains("error")) {
      s.error = e["error"].get<std::string>();
    } else {
      s.final_f = e.value("final_f", kNaN);
      s.final_grad_norm = e.value("final_grad_norm", kNaN);
      if (e.contains("estimation_error"))
        s.estimation_error = e["estimation_error"].get<double>();
    }
    if (std::find(methods.begin(), methods.end(), s.label) == methods.end())
      methods.push_back(s.label);
    summaries.push_back(std::move(s));
  }
  return performance_profile(methods, metric_table(summaries, methods, metric));
}

// ---------------------------------------------------------------------------
// Trace reading and SVG plotting

int TraceData::column_index(const std::string& col) const {
  for (size_t i = 0; i < columns.size(); ++i)
    if (columns[i] == col) return static_cast<int>(i);
  return -1;
}

TraceData read_trace_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open trace: " + path);
  TraceData trace;
  trace.name = fs::path(path).stem().string();
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error("empty trace file: " + path);
  std::stringstream header(line);
  std::string cell;
  while (std::getline(header, cell, ',')) trace.columns.push_back(cell);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream fields(line);
    while (std::getline(fields, cell, ',')) row.push_back(std::strtod(cell.c_str(), nullptr));
    if (row.size() != trace.columns.size())
      throw std::runtime_error("ragged row in trace: " + path);
    trace.rows.push_back(std::move(row));
  }
  return trace;
}

namespace {

struct Ticks {
  std::vector<double> at;
};

Ticks linear_ticks(double lo, double hi) {
  Ticks t;
  const double raw = (hi - lo) / 4.0;
  if (!(raw > 0.0)) {
    t.at = {lo};
    return t;
  }
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  const double norm = raw / mag;
  const double step = mag * (norm < 1.5 ? 1.0 : norm < 3.5 ? 2.0 : norm < 7.5 ? 5.0 : 10.0);
  for (double v = std::ceil(lo / step) * step; v <= hi + 0.5 * step; v += step)
    t.at.push_back(v);
  return t;
}

Ticks log_ticks(double lo, double hi) {
  Ticks t;
  for (int e = static_cast<int>(std::floor(std::log10(lo)));
       e <= static_cast<int>(std::ceil(std::log10(hi))); ++e)
    t.at.push_back(std::pow(10.0, e));
  return t;
}

const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                          "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string plot_traces(const std::vector<TraceData>& traces,
                        const std::string& x_axis, const std::string& y_axis,
                        bool log_y, std::vector<std::string>* warnings) {
  if (traces.empty()) throw std::invalid_argument("plot_traces: no traces given");
  const std::string x_col = x_axis == "iteration" ? "k" : x_axis;

  struct Series {
    std::string name;
    std::vector<std::pair<double, double>> pts;
  };
  std::vector<Series> series;
  for (const TraceData& t : traces) {
    const int xi = t.column_index(x_col);
    const int yi = t.column_index(y_axis);
    if (xi < 0 || yi < 0) {
      std::string cols;
      for (const std::string& c : t.columns) cols += (cols.empty() ? "" : ",") + c;
      throw std::invalid_argument("trace " + t.name + " lacks column " +
                                  (xi < 0 ? x_col : y_axis) + " (has: " + cols + ")");
    }
    Series s;
    s.name = t.name;
    for (const auto& row : t.rows) {
      const double x = row[static_cast<size_t>(xi)];
      const double y = row[static_cast<size_t>(yi)];
      if (std::isfinite(x) && std::isfinite(y)) s.pts.emplace_back(x, y);
    }
    if (s.pts.empty())
      throw std::invalid_argument("trace " + t.name + " has no finite points");
    series.push_back(std::move(s));
  }

  if (log_y) {
    double min_pos = kInf;
    for (const Series& s : series)
      for (const auto& [x, y] : s.pts)
        if (y > 0.0) min_pos = std::min(min_pos, y);
    if (!std::isfinite(min_pos))
      throw std::invalid_argument("plot_traces: log scale but no positive values");
    int clamped = 0;
    for (Series& s : series)
      for (auto& [x, y] : s.pts)
        if (y <= 0.0) {
          y = min_pos;
          ++clamped;
        }
    if (clamped > 0 && warnings)
      warnings->push_back("clamped " + std::to_string(clamped) +
                          " non-positive values to " + fmt_short(min_pos) +
                          " for the log axis");
  }

  double xlo = kInf, xhi = -kInf, ylo = kInf, yhi = -kInf;
  for (const Series& s : series)
    for (const auto& [x, y] : s.pts) {
      xlo = std::min(xlo, x);
      xhi = std::max(xhi, x);
      ylo = std::min(ylo, y);
      yhi = std::max(yhi, y);
    }
  if (xhi == xlo) {
    xlo -= 1.0;
    xhi += 1.0;
  }
  double tlo = log_y ? std::log10(ylo) : ylo;
  double thi = log_y ? std::log10(yhi) : yhi;
  if (thi == tlo) {
    tlo -= 1.0;
    thi += 1.0;
  }
  const double pad = 0.04 * (thi - tlo);
  tlo -= pad;
  thi += pad;

  const double W = 840, H = 520, L = 70, R = 660, T = 20, B = 470;
  auto px = [&](double x) { return L + (x - xlo) / (xhi - xlo) * (R - L); };
  auto py = [&](double y) {
    const double v = log_y ? std::log10(y) : y;
    return B - (v - tlo) / (thi - tlo) * (B - T);
  };
  auto coord = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return std::string(buf);
  };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\""
      << H << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
  svg << "<rect x=\"0\" y=\"0\" width=\"" << W << "\" height=\"" << H
      << "\" fill=\"white\"/>\n";
  svg << "<g font-family=\"monospace\" font-size=\"12\" fill=\"black\">\n";

  // axes
  svg << "<line x1=\"" << L << "\" y1=\"" << B << "\" x2=\"" << R << "\" y2=\"" << B
      << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << B
      << "\" stroke=\"black\"/>\n";

  const Ticks xticks = linear_ticks(xlo, xhi);
  for (double v : xticks.at) {
    const double x = px(v);
    svg << "<line x1=\"" << coord(x) << "\" y1=\"" << B << "\" x2=\"" << coord(x)
        << "\" y2=\"" << B + 5 << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << coord(x) << "\" y=\"" << B + 20
        << "\" text-anchor=\"middle\">" << fmt_short(v) << "</text>\n";
  }
  const Ticks yticks = log_y ? log_ticks(ylo, yhi) : linear_ticks(tlo, thi);
  for (double v : yticks.at) {
    if (py(v) < T || py(v) > B) continue;
    const double y = py(v);
    svg << "<line x1=\"" << L - 5 << "\" y1=\"" << coord(y) << "\" x2=\"" << L
        << "\" y2=\"" << coord(y) << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << L - 8 << "\" y=\"" << coord(y + 4)
        << "\" text-anchor=\"end\">" << fmt_short(v) << "</text>\n";
  }

  svg << "<text x=\"" << (L + R) / 2 << "\" y=\"" << B + 40
      << "\" text-anchor=\"middle\">" << xml_escape(x_axis) << "</text>\n";
  svg << "<text x=\"18\" y=\"" << (T + B) / 2 << "\" text-anchor=\"middle\" "
      << "transform=\"rotate(-90 18 " << (T + B) / 2 << ")\">"
      << xml_escape(y_axis + (log_y ? " (log)" : "")) << "</text>\n";

  for (size_t si = 0; si < series.size(); ++si) {
    const char* color = kPalette[si % (sizeof kPalette / sizeof kPalette[0])];
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (size_t i = 0; i < series[si].pts.size(); ++i) {
      if (i) svg << " ";
      svg << coord(px(series[si].pts[i].first)) << ","
          << coord(py(series[si].pts[i].second));
    }
    svg << "\"/>\n";
    const double ly = T + 18 + 18 * static_cast<double>(si);
    svg << "<line x1=\"" << R + 10 << "\" y1=\"" << coord(ly - 4) << "\" x2=\""
        << R + 34 << "\" y2=\"" << coord(ly - 4) << "\" stroke=\"" << color
        << "\" stroke-width=\"1.5\"/>\n";
    svg << "<text x=\"" << R + 40 << "\" y=\"" << coord(ly) << "\">"
        << xml_escape(series[si].name) << "</text>\n";
  }
  svg << "</g>\n</svg>\n";
  return svg.str();
}

}  // namespace newtonmr

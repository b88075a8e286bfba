#pragma once

#include "newtonmr/optim.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace newtonmr {

/// Problem synthesis / loading description. `kind` selects the family:
///   quadratic  - PD quadratic with eigenvalues spread linearly in
///                [gamma, top] under a random orthogonal basis
///   fraction   - a x1^2 / (b - x2)
///   softmax    - synthetic multinomial regression data (n, p, classes)
///   gmm        - two-component Gaussian mixture fit (n, p, cond)
///   csv        - softmax regression on a user-supplied labeled CSV
struct ProblemSpec {
  std::string kind = "softmax";

  Eigen::Index n = 1000;
  Eigen::Index p = 20;
  int classes = 5;
  double cond = 1e4;
  std::uint64_t data_seed = 1;

  double a = 100.0;
  double b = 1.0;

  Eigen::Index dim = 50;
  double gamma = 1.0;  // smallest quadratic eigenvalue
  double top = 2.0;    // largest quadratic eigenvalue

  std::string dataset;
  bool skip_header = false;
  bool scale01 = true;
};

struct BuiltProblem {
  Problem problem;
  Vector x0;
  std::optional<GmmGroundTruth> truth;
};

/// Materializes the problem. `x0_seed` = 0 keeps the deterministic default
/// start (the origin, except the fraction family, whose origin is stationary
/// and which starts from a fixed normal draw instead); nonzero draws a
/// standard-normal start from that stream.
BuiltProblem build_problem(const ProblemSpec& spec, std::uint64_t x0_seed = 0);

/// One solver entry in an experiment. Subsampled second-order variants are
/// expressed through opt.perturb; first-order kinds read `fo` and may carry a
/// step grid for tuning.
struct MethodSpec {
  std::string name;  // file label; defaults to kind
  std::string kind = "newton_mr";  // newton_mr|newton_cg|gauss_newton|lbfgs|
                                   // sgd|momentum|adagrad|adadelta|rmsprop|adam
  OptimizerConfig opt;
  FirstOrderConfig fo;
  std::vector<double> step_grid;  // non-empty: grid-search fo.step first
};

bool method_is_first_order(const std::string& kind);

struct ExperimentConfig {
  std::string experiment = "custom";  // unstable|softmax_compare|
                                      // stability_sweep|gmm_profile|custom
  ProblemSpec problem;
  std::vector<MethodSpec> methods;
  std::vector<double> epsilons;   // additive sweeps; 0 = unperturbed baseline
  std::vector<double> fractions;  // subsample fractions (softmax_compare)
  std::vector<std::uint64_t> seeds = {1};
  int runs = 20;  // gmm_profile repetitions
  int jobs = 1;
  std::string output_dir = ".";
  bool traces_with_diagnostics = false;

  static ExperimentConfig load(const std::string& path);
  static ExperimentConfig from_json_text(const std::string& text);
  std::string resolved_json() const;
};

struct RunSummary {
  std::string label;
  std::string method_kind;
  std::string trace_file;  // relative to output_dir; empty if the run errored
  std::uint64_t seed = 0;
  int run_index = -1;  // gmm_profile repetition, else -1
  std::optional<double> epsilon;
  std::optional<double> fraction;
  double final_f = 0.0;
  double final_grad_norm = 0.0;
  double total_oracle_calls = 0.0;
  double wall_seconds = 0.0;
  int iterations = 0;
  std::string stop;
  std::optional<double> estimation_error;
  std::optional<double> tuned_step;
  std::string error;  // empty on success
};

struct ExperimentResult {
  std::vector<RunSummary> runs;
  std::string manifest_path;
  std::vector<std::string> notes;
};

/// Expands the experiment into independent runs, executes them (optionally on
/// cfg.jobs workers), writes one trace CSV per run plus manifest.json, and for
/// gmm_profile the three performance-profile tables. Individual run failures
/// are recorded in the manifest; remaining runs proceed.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

/// Dolan-More performance profile. values[run][method] is the metric for that
/// pairing (NaN = failed run). Ratios are metric / best-in-run; when the best
/// is non-positive the whole run is shifted so its best becomes 1, keeping
/// ratios well defined for log-likelihood-style metrics. Runs where every
/// method failed are dropped and listed in excluded_runs.
struct ProfileTable {
  std::vector<std::string> methods;
  std::vector<std::vector<double>> values;  // [run][method]
  std::vector<std::vector<double>> ratios;  // [run][method]
  std::vector<double> lambdas;              // shared sample grid
  std::vector<std::vector<double>> curves;  // [method][lambda index]
  std::vector<int> excluded_runs;

  std::string csv() const;
};

ProfileTable performance_profile(const std::vector<std::string>& methods,
                                 const std::vector<std::vector<double>>& values);

/// Rebuilds a profile from a manifest produced by run_experiment. metric is
/// one of final_f, final_grad_norm, estimation_error. Runs group by
/// (run_index, seed).
ProfileTable profile_from_manifest(const std::string& manifest_path,
                                   const std::string& metric);

struct TraceData {
  std::string name;  // legend label (file stem)
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  int column_index(const std::string& name) const;  // -1 if absent
};

TraceData read_trace_csv(const std::string& path);

/// Renders line plots of the given traces as a standalone SVG document.
/// x_axis: iteration|oracle_calls|wall_seconds, y_axis: f|grad_norm|alpha|
/// estimation_error (any trace column works). With log_y, non-positive values
/// clamp to the smallest positive value present and a warning is appended.
std::string plot_traces(const std::vector<TraceData>& traces,
                        const std::string& x_axis, const std::string& y_axis,
                        bool log_y, std::vector<std::string>* warnings = nullptr);

std::uint64_t fnv1a64(const std::string& bytes);
std::string fnv1a64_hex(const std::string& bytes);

}  // namespace newtonmr

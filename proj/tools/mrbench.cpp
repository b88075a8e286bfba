#include "newtonmr/bench.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;

namespace {

int fail(const std::string& message) {
  std::cerr << nlohmann::json{{"error", message}}.dump() << "\n";
  return 1;
}

std::string default_output_dir() {
  const char* env = std::getenv("MRBENCH_OUT");
  return env && *env ? env : "";
}

int cmd_run(const std::string& config_path, const std::string& output_dir, int jobs) {
  newtonmr::ExperimentConfig cfg = newtonmr::ExperimentConfig::load(config_path);
  if (!output_dir.empty()) cfg.output_dir = output_dir;
  if (jobs > 0) cfg.jobs = jobs;
  const newtonmr::ExperimentResult result = newtonmr::run_experiment(cfg);

  int failed = 0;
  for (const newtonmr::RunSummary& s : result.runs)
    if (!s.error.empty()) ++failed;
  std::cout << "wrote " << result.manifest_path << " (" << result.runs.size()
            << " runs";
  if (failed) std::cout << ", " << failed << " failed";
  std::cout << ")\n";
  for (const std::string& note : result.notes) std::cout << "note: " << note << "\n";
  return 0;
}

int cmd_profile(const std::string& dir, const std::string& metric,
                std::string out_path) {
  fs::path manifest = dir;
  if (fs::is_directory(manifest)) manifest /= "manifest.json";
  const newtonmr::ProfileTable table =
      newtonmr::profile_from_manifest(manifest.string(), metric);
  if (out_path.empty())
    out_path = (manifest.parent_path() / ("profile_" + metric + ".csv")).string();
  std::ofstream out(out_path, std::ios::binary);
  if (!out) return fail("cannot write " + out_path);
  out << table.csv();
  std::cout << "wrote " << out_path << "\n";
  return 0;
}

int cmd_plot(const std::vector<std::string>& trace_paths, const std::string& x_axis,
             const std::string& y_axis, bool log_y, const std::string& out_path) {
  std::vector<newtonmr::TraceData> traces;
  for (const std::string& p : trace_paths) traces.push_back(newtonmr::read_trace_csv(p));
  std::vector<std::string> warnings;
  const std::string svg = newtonmr::plot_traces(traces, x_axis, y_axis, log_y, &warnings);
  for (const std::string& w : warnings) std::cerr << "warning: " << w << "\n";
  std::ofstream out(out_path, std::ios::binary);
  if (!out) return fail("cannot write " + out_path);
  out << svg;
  std::cout << "wrote " << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Newton-MR benchmark harness"};
  app.require_subcommand(1);

  std::string config_path, output_dir = default_output_dir();
  int jobs = 0;
  CLI::App* run = app.add_subcommand("run", "execute an experiment config");
  run->add_option("config", config_path, "experiment config (JSON)")->required();
  run->add_option("--output-dir", output_dir, "output directory (default: config value or $MRBENCH_OUT)");
  run->add_option("--jobs", jobs, "worker threads");

  std::string profile_dir, metric = "final_f", profile_out;
  CLI::App* profile = app.add_subcommand("profile", "performance profile from a manifest");
  profile->add_option("dir", profile_dir, "experiment directory or manifest path")->required();
  profile->add_option("--metric", metric, "final_f | final_grad_norm | estimation_error");
  profile->add_option("--out", profile_out, "output CSV path");

  std::vector<std::string> trace_paths;
  std::string x_axis = "iteration", y_axis = "grad_norm", plot_out = "plot.svg";
  bool log_y = false;
  CLI::App* plot = app.add_subcommand("plot", "render trace CSVs as an SVG");
  plot->add_option("traces", trace_paths, "trace CSV files")->required();
  plot->add_option("--x", x_axis, "iteration | oracle_calls | wall_seconds");
  plot->add_option("--y", y_axis, "f | grad_norm | alpha | estimation_error");
  plot->add_flag("--log-y", log_y, "logarithmic y axis");
  plot->add_option("--out", plot_out, "output SVG path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(config_path, output_dir, jobs);
    if (profile->parsed()) return cmd_profile(profile_dir, metric, profile_out);
    if (plot->parsed()) return cmd_plot(trace_paths, x_axis, y_axis, log_y, plot_out);
  } catch (const std::exception& e) {
    return fail(e.what());
  }
  return fail("no subcommand");
}

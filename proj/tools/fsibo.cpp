// Command-line front end: auto runs against the built-in testbed, ask-tell sessions,
// plot-data emission and single testbed evaluations.
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "fsibo/campaign_io.hpp"
#include "fsibo/format.hpp"

namespace io = fsibo::io;
namespace fs = std::filesystem;

namespace {

int report_config_error(const io::ConfigError& e) {
  std::cerr << "configuration error:\n";
  for (const auto& p : e.problems()) std::cerr << "  " << p << "\n";
  return io::kConfigError;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Constrained Bayesian optimization of coupled fluid-structure designs"};
  app.require_subcommand(1);

  std::string config_path, out_dir, state_path;
  bool resume = false, no_plots = false;
  int stop_after = -1;

  auto* run = app.add_subcommand("run", "Run a campaign against the built-in testbed");
  run->add_option("-c,--config", config_path, "Campaign config file")->required();
  run->add_option("-o,--out", out_dir, "Output directory (defaults to campaign.output_dir)");
  run->add_flag("--resume", resume, "Continue from <out>/state.json if present");
  run->add_option("--stop-after", stop_after, "Stop after this many evaluations (resumable)");
  run->add_flag("--no-plots", no_plots, "Skip plot-data emission");

  std::string log_dir;
  auto* asktell = app.add_subcommand("asktell", "Drive a campaign with an external evaluator over stdin/stdout");
  asktell->add_option("-c,--config", config_path, "Campaign config file")->required();
  asktell->add_option("-s,--state", state_path, "State file (created or resumed)")->required();
  asktell->add_option("-o,--out", log_dir, "Directory for iteration logs");

  auto* plots = app.add_subcommand("plots", "Write surrogate plot data for a persisted state");
  plots->add_option("-s,--state", state_path, "State file")->required();
  plots->add_option("-o,--out", out_dir, "Output directory")->required();

  std::string family_name;
  auto* preset = app.add_subcommand("preset", "Print the full configuration of a preset family");
  preset->add_option("family", family_name, "example1 | example2 | example3 | sailplane")->required();

  std::vector<double> point;
  auto* evaluate = app.add_subcommand("evaluate", "Evaluate one design with the testbed of a config");
  evaluate->add_option("-c,--config", config_path, "Campaign config file")->required();
  evaluate->add_option("x", point, "Parameter values")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : io::kConfigError;
  }

  try {
    if (*preset) {
      std::cout << io::echo_config(io::preset(fsibo::testbed::parse_family(family_name)));
      return io::kOk;
    }
    if (*plots) {
      const auto files = io::emit_plots(state_path, out_dir);
      if (!files.notice.empty()) std::cerr << "notice: " << files.notice << "\n";
      for (const auto& f : files.files) std::cout << f.string() << "\n";
      return io::kOk;
    }

    const io::CampaignDocument doc = io::load_config(config_path);
    if (*run) {
      if (out_dir.empty()) out_dir = doc.output_dir;
      if (out_dir.empty()) {
        std::cerr << "error: no output directory (use --out or campaign.output_dir)\n";
        return io::kConfigError;
      }
      io::RunOptions opts;
      opts.resume = resume;
      opts.plots = !no_plots;
      if (stop_after >= 0) opts.stop_after_evaluations = stop_after;
      return io::run_auto(doc, out_dir, opts, std::cerr);
    }
    if (*asktell) {
      std::optional<fs::path> logs;
      if (!log_dir.empty()) logs = log_dir;
      return io::run_asktell(doc, state_path, std::cin, std::cout, std::cerr, logs);
    }
    if (*evaluate) {
      Eigen::VectorXd x = Eigen::Map<Eigen::VectorXd>(point.data(), static_cast<Eigen::Index>(point.size()));
      if (x.size() != doc.config.bounds.dim()) {
        std::cerr << "error: expected " << doc.config.bounds.dim() << " parameter values\n";
        return io::kConfigError;
      }
      const auto obs = io::testbed_evaluator(doc)(x);
      if (!obs) {
        std::cerr << "error: evaluation failed\n";
        return io::kEvaluationError;
      }
      std::cout << doc.config.objective_name << " = " << fsibo::format::shortest(obs->f) << "\n";
      for (std::size_t k = 0; k < obs->c.size(); ++k) {
        std::cout << doc.config.constraints[k].name << " = " << fsibo::format::shortest(obs->c[k]) << "\n";
      }
      return io::kOk;
    }
  } catch (const io::ConfigError& e) {
    return report_config_error(e);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return io::kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return io::kEvaluationError;
  }
  return io::kOk;
}

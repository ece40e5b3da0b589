#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fsibo/optimizer.hpp"
#include "fsibo/testbed.hpp"

namespace fsibo::io {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kConfigError = 1, kEvaluationError = 2, kProtocolError = 3 };

/// Collected configuration problems, each tagged with its line or field.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  std::vector<std::string> problems_;
};

struct CampaignDocument {
  optimizer::CampaignConfig config;
  testbed::ProblemSpec problem;
  std::string output_dir;

  bool operator==(const CampaignDocument& o) const {
    return config == o.config && problem == o.problem && output_dir == o.output_dir;
  }
};

/// Parses the sectioned key-value format; presets fill every key the document leaves out.
CampaignDocument parse_config(const std::string& text);
CampaignDocument load_config(const fs::path& path);

/// Built-in defaults of a problem family (bounds, constraints, init design, optimizer settings).
CampaignDocument preset(testbed::Family family);

/// Canonical text with every key spelled out; parse_config(echo_config(d)) == d.
std::string echo_config(const CampaignDocument& doc);

/// Built-in testbed evaluator for a preset family. Failed evaluations return nullopt.
optimizer::Evaluator testbed_evaluator(const CampaignDocument& doc);

/// Pending proposal handed to an external evaluator but not yet observed.
struct PendingAsk {
  Eigen::VectorXd x;
  int iteration = 0;
};

struct PersistedState {
  CampaignDocument doc;
  optimizer::CampaignState state;
  std::optional<PendingAsk> pending;
};

std::string serialize_state(const CampaignDocument& doc, const optimizer::CampaignState& state,
                            const std::optional<PendingAsk>& pending = std::nullopt);
PersistedState deserialize_state(const std::string& text);
/// Writes through a temporary file and rename so a crash never leaves a torn state.
void save_state(const fs::path& path, const CampaignDocument& doc, const optimizer::CampaignState& state,
                const std::optional<PendingAsk>& pending = std::nullopt);
PersistedState load_state(const fs::path& path);

/// "Init" or the proposal number.
std::string iteration_tag(int iteration);

/// Header of the iteration log: Iteration, parameters, objective, constraints, feasible, best.
std::string log_header(const optimizer::CampaignConfig& cfg);
std::string log_row(const optimizer::CampaignConfig& cfg, const optimizer::EvaluationRecord& rec,
                    const std::optional<double>& best);
/// Full log for a state (header plus one row per record).
std::string render_log(const optimizer::CampaignState& state);
/// Best feasible objective after initialization and after each proposal.
std::string render_best_series(const optimizer::CampaignState& state);

/// Files written by the plot-data emitters.
struct PlotFiles {
  std::vector<fs::path> files;
  std::string notice;  // set when the problem is more than two-dimensional
};

/// Plot data from explicit surrogates, or prior-only curves when surrogates is null.
PlotFiles write_plot_data(const fs::path& stem, const optimizer::CampaignState& state,
                          const optimizer::Surrogates* surrogates, int grid = 201);

/// Plot data for a persisted state using the hyperparameters it recorded.
PlotFiles emit_plots(const fs::path& state_path, const fs::path& out_dir);

struct RunOptions {
  bool resume = false;
  std::optional<int> stop_after_evaluations;  // simulate an interruption
  bool plots = true;
};

/// Auto mode: runs the campaign against the built-in testbed and writes logs, plot data and a summary.
int run_auto(const CampaignDocument& doc, const fs::path& out_dir, const RunOptions& opts, std::ostream& diag);

/// Ask-tell mode over line-delimited JSON records. Returns an ExitCode.
int run_asktell(const CampaignDocument& doc, const fs::path& state_path, std::istream& in, std::ostream& out,
                std::ostream& diag, const std::optional<fs::path>& log_dir = std::nullopt);

}  // namespace fsibo::io

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "fsibo/acquisition.hpp"
#include "fsibo/gp.hpp"

namespace fsibo::optimizer {

using Eigen::VectorXd;
using acquisition::Box;
using acquisition::ConstraintSpec;
using acquisition::Incumbent;

/// A surrogate could not be fitted; names the surrogate ("objective" or the constraint name).
class SurrogateFitError : public std::runtime_error {
 public:
  SurrogateFitError(std::string surrogate, const std::string& what);
  const std::string& surrogate() const { return surrogate_; }

 private:
  std::string surrogate_;
};

struct NamedConstraint {
  std::string name;
  ConstraintSpec spec;
  bool operator==(const NamedConstraint&) const = default;
};

struct CampaignConfig {
  std::vector<std::string> parameter_names;
  Box bounds;
  std::string objective_name = "f";
  std::vector<NamedConstraint> constraints;
  int n_init = 4;
  std::vector<VectorXd> init_points;  // used verbatim when nonempty
  int max_iters = 10;
  int stall_window = 3;
  double stall_tol = 0.01;
  std::uint64_t seed = 0;
  int fit_restarts = 8;
  int acquisition_budget = 2000;
  double quarantine_fraction = 0.01;  // of the box diagonal

  /// Throws std::invalid_argument describing the first violated invariant.
  void validate() const;
  bool operator==(const CampaignConfig& o) const;
};

struct EvaluationRecord {
  VectorXd x;
  double f = 0.0;
  std::vector<double> c;
  int iteration = 0;  // 0 for initialization rows, k >= 1 for the k-th proposal
  bool feasible = false;
  bool failed = false;

  bool is_init() const { return iteration == 0; }
};

struct SurrogateFit {
  std::string name;
  gp::Hyperparams hp;
  bool fallback = false;
};

enum class StopReason { None, Budget, Stall };
std::string to_string(StopReason r);

/// Complete campaign history; append-only and self-consistent (the incumbent always matches the records).
class CampaignState {
 public:
  explicit CampaignState(CampaignConfig config);

  const CampaignConfig& config() const { return config_; }
  const std::vector<EvaluationRecord>& history() const { return history_; }
  const Incumbent& incumbent() const { return incumbent_; }
  const std::vector<SurrogateFit>& fits() const { return fits_; }
  /// Best feasible objective after each record (nullopt before the first feasible one).
  const std::vector<std::optional<double>>& best_series() const { return best_series_; }
  std::vector<VectorXd> quarantined() const;

  int proposals() const { return proposals_; }
  int evaluations() const { return static_cast<int>(history_.size()); }

  /// Appends an observation (see tell()).
  void append(const EvaluationRecord& rec);
  void set_fits(std::vector<SurrogateFit> fits) { fits_ = std::move(fits); }

 private:
  CampaignConfig config_;
  std::vector<EvaluationRecord> history_;
  std::vector<std::optional<double>> best_series_;
  Incumbent incumbent_;
  std::vector<SurrogateFit> fits_;
  int proposals_ = 0;
};

/// Design points for the initialization phase.
std::vector<VectorXd> initialize(const CampaignConfig& config);

/// Fitted surrogates for the current history (objective first, then one per constraint).
struct Surrogates {
  std::vector<gp::Posterior> posteriors;
  std::vector<SurrogateFit> fits;

  const gp::Posterior& objective() const { return posteriors.front(); }
  std::vector<acquisition::ConstraintModel> constraint_models(const CampaignConfig& cfg) const;
};

/// Fits all surrogates on the non-failed records. Throws SurrogateFitError.
Surrogates fit_surrogates(const CampaignState& state);

struct ProposalInfo {
  VectorXd x;
  double acquisition = 0.0;
  bool feasibility_fallback = false;
  Surrogates surrogates;
};

/// Fits the surrogates, records their hyperparameters in the state and maximizes cEI.
ProposalInfo propose(CampaignState& state);

/// Records an observation for x. Iteration index: 0 during initialization, otherwise the next proposal number.
void tell(CampaignState& state, const VectorXd& x, double f, const std::vector<double>& c, int iteration);
/// Records a failed evaluation; the point is quarantined and excluded from the surrogates.
void tell_failure(CampaignState& state, const VectorXd& x, int iteration);

struct StopDecision {
  bool stop = false;
  StopReason reason = StopReason::None;
};

StopDecision should_stop(const CampaignState& state);

/// Objective and constraint values, or nullopt when the evaluation failed.
struct Observation {
  double f;
  std::vector<double> c;
};
using Evaluator = std::function<std::optional<Observation>(const VectorXd&)>;

/// Observer invoked after every record is appended (and after each proposal's surrogate fit).
struct CampaignHooks {
  std::function<void(const CampaignState&)> on_record;
  std::function<void(const CampaignState&, const ProposalInfo&)> on_proposal;
};

CampaignState run_campaign(const CampaignConfig& config, const Evaluator& evaluator, const CampaignHooks& hooks = {});

/// Continues a campaign from an existing state until should_stop.
void resume_campaign(CampaignState& state, const Evaluator& evaluator, const CampaignHooks& hooks = {});

/// What the engine wants evaluated next: pending initialization point or a fresh proposal.
struct Ask {
  VectorXd x;
  int iteration;  // 0 for initialization points
  std::optional<ProposalInfo> proposal;
};

/// Next point to evaluate, or nullopt when the campaign should stop. Deterministic in the state.
std::optional<Ask> next_ask(CampaignState& state, StopDecision* decision = nullptr);

}  // namespace fsibo::optimizer

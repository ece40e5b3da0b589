#include "fsibo/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace fsibo::optimizer {

namespace {

// SplitMix64 finalizer; decorrelates per-iteration and per-surrogate seeds.
std::uint64_t mix(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index) {
  return mix(mix(base ^ mix(stream)) + index);
}

constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kFitStream = 2;
constexpr std::uint64_t kAcquisitionStream = 3;

bool records_feasible(const CampaignConfig& cfg, const std::vector<double>& c) {
  for (std::size_t k = 0; k < cfg.constraints.size(); ++k) {
    if (!cfg.constraints[k].spec.satisfied_by(c[k])) return false;
  }
  return true;
}

}  // namespace

SurrogateFitError::SurrogateFitError(std::string surrogate, const std::string& what)
    : std::runtime_error("surrogate '" + surrogate + "': " + what), surrogate_(std::move(surrogate)) {}

std::string to_string(StopReason r) {
  switch (r) {
    case StopReason::None: return "none";
    case StopReason::Budget: return "budget";
    case StopReason::Stall: return "stall";
  }
  return "none";
}

void CampaignConfig::validate() const {
  const Eigen::Index d = bounds.lower.size();
  if (d < 1) throw std::invalid_argument("config: at least one design parameter is required");
  if (bounds.upper.size() != d) throw std::invalid_argument("config: lower and upper bounds differ in size");
  if (static_cast<Eigen::Index>(parameter_names.size()) != d) {
    throw std::invalid_argument("config: parameter names do not match the bounds");
  }
  for (Eigen::Index i = 0; i < d; ++i) {
    if (!std::isfinite(bounds.lower(i)) || !std::isfinite(bounds.upper(i)) || !(bounds.lower(i) < bounds.upper(i))) {
      throw std::invalid_argument("config: bound inversion or non-finite bound for '" + parameter_names[i] + "'");
    }
  }
  for (const auto& c : constraints) {
    if (!std::isfinite(c.spec.threshold)) throw std::invalid_argument("config: constraint '" + c.name + "' threshold must be finite");
  }
  if (init_points.empty() && n_init < 1) throw std::invalid_argument("config: n_init must be at least 1");
  for (std::size_t i = 0; i < init_points.size(); ++i) {
    if (!bounds.contains(init_points[i])) {
      throw std::invalid_argument("config: init point " + std::to_string(i) + " lies outside the bounds");
    }
  }
  if (max_iters < 0) throw std::invalid_argument("config: max_iters must be nonnegative");
  if (stall_window < 1) throw std::invalid_argument("config: stall_window must be at least 1");
  if (!(stall_tol >= 0.0)) throw std::invalid_argument("config: stall_tol must be nonnegative");
  if (fit_restarts < 1) throw std::invalid_argument("config: fit_restarts must be at least 1");
  if (acquisition_budget < 1) throw std::invalid_argument("config: acquisition_budget must be positive");
}

bool CampaignConfig::operator==(const CampaignConfig& o) const {
  if (init_points.size() != o.init_points.size()) return false;
  for (std::size_t i = 0; i < init_points.size(); ++i) {
    if (init_points[i] != o.init_points[i]) return false;
  }
  return parameter_names == o.parameter_names && bounds == o.bounds && objective_name == o.objective_name &&
         constraints == o.constraints && n_init == o.n_init && max_iters == o.max_iters &&
         stall_window == o.stall_window && stall_tol == o.stall_tol && seed == o.seed &&
         fit_restarts == o.fit_restarts && acquisition_budget == o.acquisition_budget &&
         quarantine_fraction == o.quarantine_fraction;
}

CampaignState::CampaignState(CampaignConfig config) : config_(std::move(config)) { config_.validate(); }

std::vector<VectorXd> CampaignState::quarantined() const {
  std::vector<VectorXd> out;
  for (const auto& r : history_) {
    if (r.failed) out.push_back(r.x);
  }
  return out;
}

void CampaignState::append(const EvaluationRecord& rec_in) {
  EvaluationRecord rec = rec_in;
  if (rec.x.size() != config_.bounds.dim()) throw std::invalid_argument("tell: design vector has the wrong dimension");
  if (!rec.failed && rec.c.size() != config_.constraints.size()) {
    throw std::invalid_argument("tell: expected " + std::to_string(config_.constraints.size()) + " constraint values, got " +
                                std::to_string(rec.c.size()));
  }
  if (rec.iteration < 0) throw std::invalid_argument("tell: negative iteration index");
  if (rec.failed) {
    rec.feasible = false;
    rec.c.clear();
  } else {
    rec.feasible = records_feasible(config_, rec.c);
  }
  if (rec.iteration > 0) {
    if (rec.iteration != proposals_ + 1) throw std::invalid_argument("tell: proposal index out of sequence");
    ++proposals_;
  }
  if (rec.feasible && (!incumbent_.feasible_found || rec.f < incumbent_.f_best)) {
    incumbent_.f_best = rec.f;
    incumbent_.x_best = rec.x;
    incumbent_.feasible_found = true;
  }
  history_.push_back(std::move(rec));
  best_series_.push_back(incumbent_.feasible_found ? std::optional<double>(incumbent_.f_best) : std::nullopt);
}

std::vector<VectorXd> initialize(const CampaignConfig& config) {
  config.validate();
  if (!config.init_points.empty()) return config.init_points;
  std::mt19937_64 rng(derive_seed(config.seed, kInitStream, 0));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const Eigen::Index d = config.bounds.dim();
  std::vector<VectorXd> pts;
  pts.reserve(config.n_init);
  for (int i = 0; i < config.n_init; ++i) {
    VectorXd x(d);
    for (Eigen::Index k = 0; k < d; ++k) {
      x(k) = config.bounds.lower(k) + unit(rng) * (config.bounds.upper(k) - config.bounds.lower(k));
    }
    pts.push_back(std::move(x));
  }
  return pts;
}

std::vector<acquisition::ConstraintModel> Surrogates::constraint_models(const CampaignConfig& cfg) const {
  std::vector<acquisition::ConstraintModel> out;
  for (std::size_t k = 0; k < cfg.constraints.size(); ++k) out.push_back({&posteriors[k + 1], cfg.constraints[k].spec});
  return out;
}

Surrogates fit_surrogates(const CampaignState& state) {
  const auto& cfg = state.config();
  std::vector<const EvaluationRecord*> usable;
  for (const auto& r : state.history()) {
    if (!r.failed) usable.push_back(&r);
  }
  const Eigen::Index n = static_cast<Eigen::Index>(usable.size());
  const Eigen::Index d = cfg.bounds.dim();
  if (n < 2) throw SurrogateFitError(cfg.objective_name, "needs at least two successful evaluations");
  Eigen::MatrixXd X(n, d);
  for (Eigen::Index i = 0; i < n; ++i) X.row(i) = usable[i]->x.transpose();
  bool distinct = false;
  for (Eigen::Index i = 1; i < n && !distinct; ++i) distinct = X.row(i) != X.row(0);
  if (!distinct) throw SurrogateFitError(cfg.objective_name, "all evaluated inputs are identical");

  std::vector<std::string> names{cfg.objective_name};
  for (const auto& c : cfg.constraints) names.push_back(c.name);

  Surrogates out;
  for (std::size_t s = 0; s < names.size(); ++s) {
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) y(i) = s == 0 ? usable[i]->f : usable[i]->c[s - 1];
    try {
      gp::Dataset ds(X, y, gp::Normalization::fit(cfg.bounds.lower, cfg.bounds.upper, y));
      gp::FitOptions opts;
      opts.restarts = cfg.fit_restarts;
      opts.seed = derive_seed(cfg.seed, kFitStream, static_cast<std::uint64_t>(state.proposals()) * 64 + s);
      for (const auto& prev : state.fits()) {
        if (prev.name == names[s]) opts.warm_start = prev.hp;
      }
      const auto fitted = gp::fit(ds, opts);
      out.posteriors.emplace_back(ds, fitted.hp);
      out.fits.push_back({names[s], fitted.hp, fitted.fallback});
    } catch (const std::exception& e) {
      throw SurrogateFitError(names[s], e.what());
    }
  }
  return out;
}

ProposalInfo propose(CampaignState& state) {
  const auto& cfg = state.config();
  ProposalInfo info;
  info.surrogates = fit_surrogates(state);
  const auto models = info.surrogates.constraint_models(cfg);

  acquisition::MaximizeOptions opts;
  opts.budget = cfg.acquisition_budget;
  opts.seed = derive_seed(cfg.seed, kAcquisitionStream, static_cast<std::uint64_t>(state.proposals()));
  opts.excluded = state.quarantined();
  opts.excluded_radius = cfg.quarantine_fraction * cfg.bounds.diagonal();
  const auto p = acquisition::maximize_acquisition(info.surrogates.objective(), models, state.incumbent(), cfg.bounds, opts);
  info.x = p.x;
  info.acquisition = p.value;
  info.feasibility_fallback = p.feasibility_fallback;
  state.set_fits(info.surrogates.fits);
  return info;
}

void tell(CampaignState& state, const VectorXd& x, double f, const std::vector<double>& c, int iteration) {
  if (!state.config().bounds.contains(x)) throw std::invalid_argument("tell: design point outside the bounds");
  EvaluationRecord rec;
  rec.x = x;
  rec.f = f;
  rec.c = c;
  rec.iteration = iteration;
  state.append(rec);
}

void tell_failure(CampaignState& state, const VectorXd& x, int iteration) {
  EvaluationRecord rec;
  rec.x = x;
  rec.iteration = iteration;
  rec.failed = true;
  state.append(rec);
}

StopDecision should_stop(const CampaignState& state) {
  const auto& cfg = state.config();
  if (state.proposals() >= cfg.max_iters) return {true, StopReason::Budget};
  if (state.proposals() < cfg.stall_window) return {};
  const auto& series = state.best_series();
  const std::size_t n = series.size();
  if (n < static_cast<std::size_t>(cfg.stall_window) + 1) return {};
  const std::size_t ref = n - static_cast<std::size_t>(cfg.stall_window) - 1;
  const auto& now = series[n - 1];
  const auto& then = series[ref];
  if (!now || !then) return {};
  const double scale = std::abs(*then) > 0.0 ? std::abs(*then) : 1.0;
  const double improvement = (*then - *now) / scale;
  if (improvement < cfg.stall_tol) return {true, StopReason::Stall};
  return {};
}

std::optional<Ask> next_ask(CampaignState& state, StopDecision* decision) {
  const auto init = initialize(state.config());
  if (state.evaluations() < static_cast<int>(init.size()) && state.proposals() == 0) {
    if (decision) *decision = {};
    return Ask{init[state.evaluations()], 0, std::nullopt};
  }
  const auto stop = should_stop(state);
  if (decision) *decision = stop;
  if (stop.stop) return std::nullopt;
  auto info = propose(state);
  Ask ask{info.x, state.proposals() + 1, std::move(info)};
  return ask;
}

namespace {

void evaluate_and_tell(CampaignState& state, const Ask& ask, const Evaluator& evaluator, const CampaignHooks& hooks) {
  std::optional<Observation> obs;
  try {
    obs = evaluator(ask.x);
  } catch (const std::exception&) {
    obs.reset();
  }
  if (obs && std::isfinite(obs->f) &&
      std::all_of(obs->c.begin(), obs->c.end(), [](double v) { return std::isfinite(v); })) {
    tell(state, ask.x, obs->f, obs->c, ask.iteration);
  } else {
    tell_failure(state, ask.x, ask.iteration);
  }
  if (hooks.on_record) hooks.on_record(state);
}

}  // namespace

void resume_campaign(CampaignState& state, const Evaluator& evaluator, const CampaignHooks& hooks) {
  while (auto ask = next_ask(state)) {
    if (ask->proposal && hooks.on_proposal) hooks.on_proposal(state, *ask->proposal);
    evaluate_and_tell(state, *ask, evaluator, hooks);
  }
}

CampaignState run_campaign(const CampaignConfig& config, const Evaluator& evaluator, const CampaignHooks& hooks) {
  CampaignState state(config);
  resume_campaign(state, evaluator, hooks);
  return state;
}

}  // namespace fsibo::optimizer

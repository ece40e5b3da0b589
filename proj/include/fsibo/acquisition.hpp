#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "fsibo/gp.hpp"

namespace fsibo::acquisition {

using Eigen::VectorXd;

enum class Sense { AtMost, AtLeast };  // "<=" and ">="

struct ConstraintSpec {
  double threshold = 0.0;
  Sense sense = Sense::AtMost;

  bool satisfied_by(double value) const { return sense == Sense::AtMost ? value <= threshold : value >= threshold; }
  bool operator==(const ConstraintSpec&) const = default;
};

std::string to_string(Sense s);
/// Accepts "<=", ">=" (and the unicode forms); throws std::invalid_argument otherwise.
Sense parse_sense(const std::string& text);

struct Incumbent {
  double f_best = 0.0;
  VectorXd x_best;
  bool feasible_found = false;
};

struct Box {
  VectorXd lower;
  VectorXd upper;

  Eigen::Index dim() const { return lower.size(); }
  bool contains(const VectorXd& x) const;
  double diagonal() const { return (upper - lower).norm(); }
  bool operator==(const Box& o) const { return lower == o.lower && upper == o.upper; }
};

double normal_pdf(double z);
double normal_cdf(double z);
/// log Phi(z), accurate in the far left tail.
double log_normal_cdf(double z);

double expected_improvement(double mu, double var, double f_best);
double feasibility_probability(double mu_c, double var_c, const ConstraintSpec& spec);

struct ConstraintModel {
  const gp::Posterior* posterior;
  ConstraintSpec spec;
};

/// EI times the product of feasibility probabilities; the product alone when no feasible incumbent exists.
double constrained_ei(const VectorXd& x, const gp::Posterior& objective, std::span<const ConstraintModel> constraints,
                      const Incumbent& inc);

/// Product of feasibility probabilities at x (1 with no constraints).
double feasibility_product(const VectorXd& x, std::span<const ConstraintModel> constraints);

struct MaximizeOptions {
  int probes_per_dim = 512;
  int refine_starts = 8;
  int budget = 2000;
  std::uint64_t seed = 0;
  /// Points whose neighbourhood is excluded from proposals (quarantined failures).
  std::vector<VectorXd> excluded;
  double excluded_radius = 0.0;
};

struct Proposal {
  VectorXd x;
  double value = 0.0;       // cEI at x
  bool feasibility_fallback = false;  // cEI vanished on every probe; x maximizes the feasibility product
  int evaluations = 0;
};

/// Space-filling probe followed by bounded pattern-search refinement of the best probes.
Proposal maximize_acquisition(const gp::Posterior& objective, std::span<const ConstraintModel> constraints,
                              const Incumbent& inc, const Box& bounds, const MaximizeOptions& opts = {});

/// Latin hypercube in [0,1]^dim, deterministic given the seed.
std::vector<VectorXd> latin_hypercube(Eigen::Index dim, int count, std::uint64_t seed);

}  // namespace fsibo::acquisition

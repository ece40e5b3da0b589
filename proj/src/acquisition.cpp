#include "fsibo/acquisition.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>

namespace fsibo::acquisition {

std::string to_string(Sense s) { return s == Sense::AtMost ? "<=" : ">="; }

Sense parse_sense(const std::string& text) {
  if (text == "<=" || text == "≤" || text == "le") return Sense::AtMost;
  if (text == ">=" || text == "≥" || text == "ge") return Sense::AtLeast;
  throw std::invalid_argument("constraint sense must be '<=' or '>=', got '" + text + "'");
}

bool Box::contains(const VectorXd& x) const {
  if (x.size() != lower.size()) return false;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if (!(x(i) >= lower(i) && x(i) <= upper(i))) return false;
  }
  return true;
}

double normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi); }

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

double log_normal_cdf(double z) {
  if (z > -30.0) return std::log(normal_cdf(z));
  // Mills-ratio asymptote: Phi(z) ~ phi(z)/(-z) * (1 - 1/z^2 + 3/z^4)
  const double z2 = z * z;
  return -0.5 * z2 - std::log(-z) - 0.5 * std::log(2.0 * std::numbers::pi) + std::log1p(-1.0 / z2 + 3.0 / (z2 * z2));
}

double expected_improvement(double mu, double var, double f_best) {
  const double sigma = std::sqrt(std::max(var, 0.0));
  const double gap = f_best - mu;
  if (!(sigma > 0.0)) return std::max(0.0, gap);
  const double z = gap / sigma;
  return std::max(0.0, gap * normal_cdf(z) + sigma * normal_pdf(z));
}

double feasibility_probability(double mu_c, double var_c, const ConstraintSpec& spec) {
  // ">=" constraints are handled as -c <= -threshold.
  const double slack = spec.sense == Sense::AtMost ? spec.threshold - mu_c : mu_c - spec.threshold;
  const double sigma = std::sqrt(std::max(var_c, 0.0));
  if (!(sigma > 0.0)) return slack >= 0.0 ? 1.0 : 0.0;
  return normal_cdf(slack / sigma);
}

double feasibility_product(const VectorXd& x, std::span<const ConstraintModel> constraints) {
  double rho = 1.0;
  for (const auto& c : constraints) {
    const auto p = c.posterior->predict(x);
    rho *= feasibility_probability(p.mean, p.var, c.spec);
  }
  return rho;
}

double constrained_ei(const VectorXd& x, const gp::Posterior& objective, std::span<const ConstraintModel> constraints,
                      const Incumbent& inc) {
  const double rho = feasibility_product(x, constraints);
  if (!inc.feasible_found) return rho;
  const auto p = objective.predict(x);
  return expected_improvement(p.mean, p.var, inc.f_best) * rho;
}

std::vector<VectorXd> latin_hypercube(Eigen::Index dim, int count, std::uint64_t seed) {
  std::vector<VectorXd> pts(count, VectorXd(dim));
  if (count <= 0) return pts;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<int> perm(count);
  for (Eigen::Index d = 0; d < dim; ++d) {
    for (int i = 0; i < count; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    for (int i = 0; i < count; ++i) pts[i](d) = (perm[i] + unit(rng)) / count;
  }
  return pts;
}

namespace {

double log_feasibility(const VectorXd& x, std::span<const ConstraintModel> constraints) {
  double acc = 0.0;
  for (const auto& c : constraints) {
    const auto p = c.posterior->predict(x);
    const double slack = c.spec.sense == Sense::AtMost ? c.spec.threshold - p.mean : p.mean - c.spec.threshold;
    const double sigma = std::sqrt(std::max(p.var, 0.0));
    if (!(sigma > 0.0)) {
      if (slack < 0.0) return -std::numeric_limits<double>::infinity();
      continue;
    }
    acc += log_normal_cdf(slack / sigma);
  }
  return acc;
}

class Scorer {
 public:
  Scorer(const gp::Posterior& obj, std::span<const ConstraintModel> cons, const Incumbent& inc, const Box& box,
         const MaximizeOptions& opts, bool fallback)
      : obj_(obj), cons_(cons), inc_(inc), box_(box), opts_(opts), fallback_(fallback) {}

  // Score of a unit-box point. Quarantined neighbourhoods score -inf.
  double operator()(const VectorXd& u) {
    ++count;
    const VectorXd x = to_user(u);
    for (const auto& q : opts_.excluded) {
      if ((x - q).norm() <= opts_.excluded_radius) return -std::numeric_limits<double>::infinity();
    }
    return fallback_ ? log_feasibility(x, cons_) : constrained_ei(x, obj_, cons_, inc_);
  }

  VectorXd to_user(const VectorXd& u) const {
    VectorXd x = (box_.lower.array() + u.array() * (box_.upper - box_.lower).array()).matrix();
    return x.cwiseMax(box_.lower).cwiseMin(box_.upper);
  }

  int count = 0;

 private:
  const gp::Posterior& obj_;
  std::span<const ConstraintModel> cons_;
  const Incumbent& inc_;
  const Box& box_;
  const MaximizeOptions& opts_;
  bool fallback_;
};

// Compass search inside the unit box; returns the best point and its score.
std::pair<VectorXd, double> pattern_search(Scorer& score, VectorXd u, double value, int budget) {
  const Eigen::Index d = u.size();
  double step = 1.0 / 64.0;
  int used = 0;
  while (used < budget && step > 1e-7) {
    bool improved = false;
    for (Eigen::Index k = 0; k < d && used < budget; ++k) {
      for (double sign : {1.0, -1.0}) {
        if (used >= budget) break;
        VectorXd trial = u;
        trial(k) = std::clamp(trial(k) + sign * step, 0.0, 1.0);
        if (trial(k) == u(k)) continue;
        const double v = score(trial);
        ++used;
        if (v > value) {
          u = std::move(trial);
          value = v;
          improved = true;
          break;
        }
      }
    }
    if (improved) {
      step *= 2.0;
      step = std::min(step, 0.25);
    } else {
      step *= 0.5;
    }
  }
  return {u, value};
}

struct Ranked {
  double value;
  int index;
};

Proposal run(const gp::Posterior& objective, std::span<const ConstraintModel> constraints, const Incumbent& inc,
             const Box& bounds, const MaximizeOptions& opts, bool fallback) {
  const Eigen::Index d = bounds.dim();
  const int n_probe = std::max(1, opts.probes_per_dim * static_cast<int>(d));
  const auto probes = latin_hypercube(d, n_probe, opts.seed);
  Scorer score(objective, constraints, inc, bounds, opts, fallback);

  std::vector<Ranked> ranked(n_probe);
  for (int i = 0; i < n_probe; ++i) ranked[i] = {score(probes[i]), i};
  std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
    if (a.value != b.value) return a.value > b.value;
    return a.index < b.index;
  });

  Proposal out;
  const int starts = std::min<int>(opts.refine_starts, n_probe);
  out.x = probes[ranked[0].index];
  out.value = ranked[0].value;
  if (!fallback && !(out.value > 0.0)) {
    out.evaluations = score.count;
    return out;  // caller switches to the feasibility fallback
  }
  const int remaining = std::max(0, opts.budget - n_probe);
  const int per_start = starts > 0 ? remaining / starts : 0;
  for (int s = 0; s < starts; ++s) {
    const auto& r = ranked[s];
    if (!std::isfinite(r.value)) break;
    auto [u, v] = pattern_search(score, probes[r.index], r.value, per_start);
    // Strict improvement only; earlier (better ranked) starts win ties.
    if (v > out.value) {
      out.x = u;
      out.value = v;
    }
  }
  out.evaluations = score.count;
  out.x = score.to_user(out.x);
  return out;
}

}  // namespace

Proposal maximize_acquisition(const gp::Posterior& objective, std::span<const ConstraintModel> constraints,
                              const Incumbent& inc, const Box& bounds, const MaximizeOptions& opts) {
  if (bounds.dim() < 1 || bounds.upper.size() != bounds.dim()) throw std::invalid_argument("acquisition: empty box");
  for (Eigen::Index i = 0; i < bounds.dim(); ++i) {
    if (!std::isfinite(bounds.lower(i)) || !std::isfinite(bounds.upper(i)) || !(bounds.upper(i) >= bounds.lower(i))) {
      throw std::invalid_argument("acquisition: bounds must be finite and ordered");
    }
  }
  Proposal p = run(objective, constraints, inc, bounds, opts, false);
  if (p.value > 0.0) {
    const double cei = constrained_ei(p.x, objective, constraints, inc);
    p.value = cei;
    return p;
  }
  Proposal fb = run(objective, constraints, inc, bounds, opts, true);
  fb.feasibility_fallback = true;
  fb.value = 0.0;
  fb.evaluations += p.evaluations;
  return fb;
}

}  // namespace fsibo::acquisition

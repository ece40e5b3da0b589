#include "fsibo/gp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

namespace fsibo::gp {

namespace {

constexpr double kSqrt5 = 2.23606797749978969640917366873128;

// Factorization is accepted only if every pivot stays above this fraction of the largest diagonal entry.
constexpr double kPivotFloor = 1e-13;

bool try_llt(const MatrixXd& K, Eigen::LLT<MatrixXd>& llt) {
  llt.compute(K);
  if (llt.info() != Eigen::Success) return false;
  const auto diag = llt.matrixLLT().diagonal();
  const double max_k = K.diagonal().maxCoeff();
  for (Eigen::Index i = 0; i < diag.size(); ++i) {
    if (!std::isfinite(diag(i)) || diag(i) * diag(i) <= kPivotFloor * max_k) return false;
  }
  return true;
}

// Derivative of the Matern 5/2 kernel with respect to log(lengthscale).
double matern52_dlog_lengthscale(double r, const Hyperparams& hp) {
  const double s = kSqrt5 * r / hp.lengthscale;
  return hp.signal_var * s * s * (1.0 + s) / 3.0 * std::exp(-s);
}

Hyperparams from_log(const Eigen::Vector3d& p) {
  return {std::exp(p(0)), std::exp(p(1)), std::exp(p(2))};
}

Eigen::Vector3d to_log(const Hyperparams& hp, const LogBox& box) {
  Eigen::Vector3d p(std::log(hp.signal_var), std::log(hp.lengthscale),
                    std::log(std::max(hp.noise_var, std::exp(box.lower(2)))));
  return p.cwiseMax(box.lower).cwiseMin(box.upper);
}

double radical_inverse(int index, int base) {
  double inv = 1.0 / base, f = inv, out = 0.0;
  for (int i = index; i > 0; i /= base, f *= inv) out += f * (i % base);
  return out;
}

// Randomly shifted Halton points: the first k starts of a larger design equal the k-start design,
// so adding restarts never loses a trajectory.
std::vector<Eigen::Vector3d> space_filling_starts(const LogBox& box, int count, std::uint64_t seed) {
  std::vector<Eigen::Vector3d> pts(std::max(count, 0));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const Eigen::Vector3d shift(unit(rng), unit(rng), unit(rng));
  constexpr int bases[3] = {2, 3, 5};
  for (int i = 0; i < count; ++i) {
    for (int dim = 0; dim < 3; ++dim) {
      const double u = std::fmod(radical_inverse(i + 1, bases[dim]) + shift(dim), 1.0);
      pts[i](dim) = box.lower(dim) + u * (box.upper(dim) - box.lower(dim));
    }
  }
  return pts;
}

struct Evaluated {
  double value = -std::numeric_limits<double>::infinity();
  Eigen::Vector3d grad = Eigen::Vector3d::Zero();
  bool ok = false;
};

Evaluated evaluate(const Dataset& ds, const Eigen::Vector3d& p) {
  Evaluated e;
  try {
    const auto v = log_marginal_likelihood_with_grad(ds, from_log(p));
    if (std::isfinite(v.value) && v.grad_log.allFinite()) {
      e.value = v.value;
      e.grad = v.grad_log;
      e.ok = true;
    }
  } catch (const FactorizationError&) {
  }
  return e;
}

Eigen::Vector3d project(const Eigen::Vector3d& p, const LogBox& box) {
  return p.cwiseMax(box.lower).cwiseMin(box.upper);
}

// Projected gradient ascent with an adaptive step.
std::pair<Eigen::Vector3d, Evaluated> local_ascent(const Dataset& ds, Eigen::Vector3d p, const LogBox& box,
                                                    int max_steps) {
  Evaluated cur = evaluate(ds, p);
  if (!cur.ok) return {p, cur};
  double step = 0.5;
  for (int it = 0; it < max_steps && step > 1e-10; ++it) {
    const Eigen::Vector3d trial = project(p + step * cur.grad.normalized(), box);
    const double moved = (trial - p).norm();
    if (moved < 1e-12) break;
    Evaluated next = evaluate(ds, trial);
    if (next.ok && next.value > cur.value) {
      const double gain = next.value - cur.value;
      p = trial;
      cur = next;
      if (gain < 1e-12 * std::max(1.0, std::abs(cur.value))) break;
      step = std::min(step * 2.0, 4.0);
    } else {
      step *= 0.5;
    }
  }
  return {p, cur};
}

}  // namespace

Normalization Normalization::identity(Eigen::Index dim) {
  Normalization n;
  n.lower = VectorXd::Zero(dim);
  n.upper = VectorXd::Ones(dim);
  return n;
}

Normalization Normalization::fit(const VectorXd& lower, const VectorXd& upper, const VectorXd& y) {
  if (lower.size() != upper.size()) throw std::invalid_argument("normalization: bound size mismatch");
  for (Eigen::Index i = 0; i < lower.size(); ++i) {
    if (!(upper(i) > lower(i))) throw std::invalid_argument("normalization: empty box");
  }
  Normalization n;
  n.lower = lower;
  n.upper = upper;
  if (y.size() > 0) {
    n.y_mean = y.mean();
    const double var = (y.array() - n.y_mean).square().mean();
    const double sd = std::sqrt(var);
    n.y_scale = (sd > 1e-12 * std::max(1.0, std::abs(n.y_mean))) ? sd : 1.0;
  }
  return n;
}

VectorXd Normalization::to_unit(const VectorXd& x) const {
  return ((x - lower).array() / (upper - lower).array()).matrix();
}

VectorXd Normalization::from_unit(const VectorXd& u) const {
  return (lower.array() + u.array() * (upper - lower).array()).matrix();
}

Dataset::Dataset(MatrixXd X_, VectorXd y_) : Dataset(X_, y_, Normalization::identity(X_.cols())) {}

Dataset::Dataset(MatrixXd X_, VectorXd y_, Normalization norm_)
    : X(std::move(X_)), y(std::move(y_)), norm(std::move(norm_)) {
  if (X.rows() < 1) throw std::invalid_argument("dataset: needs at least one point");
  if (X.rows() != y.size()) throw std::invalid_argument("dataset: row count of X differs from length of y");
  if (norm.lower.size() != X.cols()) throw std::invalid_argument("dataset: normalization dimension mismatch");
  if (!(norm.y_scale > 0.0)) throw std::invalid_argument("dataset: output scale must be positive");
}

MatrixXd Dataset::unit_inputs() const {
  MatrixXd U(X.rows(), X.cols());
  for (Eigen::Index i = 0; i < X.rows(); ++i) U.row(i) = norm.to_unit(X.row(i).transpose()).transpose();
  return U;
}

VectorXd Dataset::standardized_outputs() const {
  return ((y.array() - norm.y_mean) / norm.y_scale).matrix();
}

double matern52_radial(double r, const Hyperparams& hp) {
  const double s = kSqrt5 * r / hp.lengthscale;
  return hp.signal_var * (1.0 + s + s * s / 3.0) * std::exp(-s);
}

double matern52(const VectorXd& xi, const VectorXd& xj, const Hyperparams& hp) {
  return matern52_radial((xi - xj).norm(), hp);
}

MatrixXd build_covariance(const MatrixXd& X, const Hyperparams& hp) {
  const Eigen::Index n = X.rows();
  MatrixXd K(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    K(i, i) = hp.signal_var + hp.noise_var;
    for (Eigen::Index j = 0; j < i; ++j) {
      const double k = matern52_radial((X.row(i) - X.row(j)).norm(), hp);
      K(i, j) = k;
      K(j, i) = k;
    }
  }
  return K;
}

Factorization factorize(const MatrixXd& X, const Hyperparams& hp) {
  if (!hp.valid()) throw std::invalid_argument("factorize: invalid hyperparameters");
  MatrixXd K = build_covariance(X, hp);
  Factorization f;
  if (try_llt(K, f.llt)) return f;
  for (double rel = 1e-10; rel <= 1e-4 * (1.0 + 1e-9); rel *= 10.0) {
    const double jitter = rel * hp.signal_var;
    MatrixXd Kj = K;
    Kj.diagonal().array() += jitter;
    if (try_llt(Kj, f.llt)) {
      f.jitter = jitter;
      return f;
    }
  }
  throw FactorizationError("covariance matrix is not positive definite after jitter escalation "
                           "(duplicate inputs with zero noise?)");
}

double log_marginal_likelihood(const Dataset& ds, const Hyperparams& hp) {
  const MatrixXd U = ds.unit_inputs();
  const VectorXd y = ds.standardized_outputs();
  const Factorization f = factorize(U, hp);
  const VectorXd alpha = f.llt.solve(y);
  const double logdet = 2.0 * f.llt.matrixLLT().diagonal().array().log().sum();
  const double n = static_cast<double>(y.size());
  return -0.5 * y.dot(alpha) - 0.5 * logdet - 0.5 * n * std::log(2.0 * std::numbers::pi);
}

LmlValue log_marginal_likelihood_with_grad(const Dataset& ds, const Hyperparams& hp) {
  const MatrixXd U = ds.unit_inputs();
  const VectorXd y = ds.standardized_outputs();
  const Eigen::Index n = U.rows();
  const Factorization f = factorize(U, hp);
  const VectorXd alpha = f.llt.solve(y);
  const double logdet = 2.0 * f.llt.matrixLLT().diagonal().array().log().sum();

  LmlValue out;
  out.value = -0.5 * y.dot(alpha) - 0.5 * logdet - 0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);

  const MatrixXd Kinv = f.llt.solve(MatrixXd::Identity(n, n));
  const MatrixXd A = alpha * alpha.transpose() - Kinv;

  MatrixXd dK_signal(n, n), dK_length(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) {
      const double r = (U.row(i) - U.row(j)).norm();
      dK_signal(i, j) = dK_signal(j, i) = matern52_radial(r, hp);
      dK_length(i, j) = dK_length(j, i) = matern52_dlog_lengthscale(r, hp);
    }
  }
  out.grad_log(0) = 0.5 * (A.cwiseProduct(dK_signal)).sum();
  out.grad_log(1) = 0.5 * (A.cwiseProduct(dK_length)).sum();
  out.grad_log(2) = 0.5 * hp.noise_var * A.trace();
  return out;
}

LogBox LogBox::defaults() {
  LogBox b;
  b.lower << std::log(1e-3), std::log(1e-2), std::log(1e-8);
  b.upper << std::log(1e3), std::log(1e1), std::log(1e-1);
  return b;
}

Hyperparams LogBox::midpoint() const { return from_log(0.5 * (lower + upper)); }

FitResult fit(const Dataset& ds, const FitOptions& opts) {
  const LogBox& box = opts.bounds;
  const Eigen::Vector3d mid = 0.5 * (box.lower + box.upper);
  const Evaluated mid_eval = evaluate(ds, mid);

  std::vector<Eigen::Vector3d> starts;
  if (opts.warm_start) starts.push_back(to_log(*opts.warm_start, box));
  for (const auto& s : space_filling_starts(box, opts.restarts, opts.seed)) starts.push_back(s);

  FitResult best;
  best.lml = -std::numeric_limits<double>::infinity();
  bool found = false;
  // Restarts are independent; reduced in start order so the result does not depend on scheduling.
  for (const auto& s : starts) {
    auto [p, e] = local_ascent(ds, s, box, opts.max_steps);
    if (e.ok && e.value > best.lml) {
      best.lml = e.value;
      best.hp = from_log(p);
      found = true;
    }
  }
  if (!found || (mid_eval.ok && best.lml < mid_eval.value)) {
    if (!mid_eval.ok) throw FactorizationError("fit: no restart produced a factorizable covariance");
    best.hp = from_log(mid);
    best.lml = mid_eval.value;
    best.fallback = true;
  }
  return best;
}

Posterior::Posterior(const Dataset& ds, const Hyperparams& hp)
    : Xu_(ds.unit_inputs()), hp_(hp), norm_(ds.norm), fac_(factorize(Xu_, hp)) {
  weights_ = fac_.llt.solve(ds.standardized_outputs());
}

Posterior::Prediction Posterior::predict_unit(const VectorXd& ustar) const {
  const Eigen::Index n = Xu_.rows();
  VectorXd kstar(n);
  for (Eigen::Index i = 0; i < n; ++i) kstar(i) = matern52_radial((Xu_.row(i).transpose() - ustar).norm(), hp_);
  const double mean = kstar.dot(weights_);
  const VectorXd v = fac_.llt.matrixL().solve(kstar);
  const double var = std::max(0.0, hp_.signal_var - v.squaredNorm());
  return {mean, var};
}

Posterior::Prediction Posterior::predict(const VectorXd& xstar) const {
  const auto p = predict_unit(norm_.to_unit(xstar));
  return {norm_.destandardize(p.mean), norm_.y_scale * norm_.y_scale * p.var};
}

}  // namespace fsibo::gp

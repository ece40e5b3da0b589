#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

namespace fsibo::gp {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Raised when K(X,X)+sigma^2 I cannot be factorized even after jitter escalation.
class FactorizationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Hyperparams {
  double signal_var = 1.0;   // theta1
  double lengthscale = 1.0;  // theta2
  double noise_var = 0.0;    // sigma^2

  bool valid() const { return signal_var > 0.0 && lengthscale > 0.0 && noise_var >= 0.0; }
  bool operator==(const Hyperparams&) const = default;
};

/// Affine maps between user units and the unit box / standardized outputs.
struct Normalization {
  VectorXd lower;
  VectorXd upper;
  double y_mean = 0.0;
  double y_scale = 1.0;

  static Normalization identity(Eigen::Index dim);
  /// Inputs to [0,1]^d over the box, outputs to zero mean and unit variance.
  /// A constant output keeps y_scale = 1.
  static Normalization fit(const VectorXd& lower, const VectorXd& upper, const VectorXd& y);

  VectorXd to_unit(const VectorXd& x) const;
  VectorXd from_unit(const VectorXd& u) const;
  double standardize(double y) const { return (y - y_mean) / y_scale; }
  double destandardize(double z) const { return y_mean + y_scale * z; }
};

struct Dataset {
  MatrixXd X;  // n x d, user units
  VectorXd y;
  Normalization norm;

  Dataset() = default;
  /// Validates shapes and builds an identity normalization.
  Dataset(MatrixXd X, VectorXd y);
  Dataset(MatrixXd X, VectorXd y, Normalization norm);

  Eigen::Index size() const { return X.rows(); }
  Eigen::Index dim() const { return X.cols(); }
  MatrixXd unit_inputs() const;
  VectorXd standardized_outputs() const;
};

/// Matern nu=5/2 covariance in closed form.
double matern52(const VectorXd& xi, const VectorXd& xj, const Hyperparams& hp);
double matern52_radial(double r, const Hyperparams& hp);

/// k(X,X) with noise_var on the diagonal. No jitter is added here.
MatrixXd build_covariance(const MatrixXd& X, const Hyperparams& hp);

struct Factorization {
  Eigen::LLT<MatrixXd> llt;
  double jitter = 0.0;  // absolute value added to the diagonal
};

/// Cholesky of K+sigma^2 I. Tries no jitter first, then 1e-10*theta1 escalating x10 up to 1e-4*theta1.
Factorization factorize(const MatrixXd& X, const Hyperparams& hp);

/// Evaluated on the dataset's normalized inputs and standardized outputs.
double log_marginal_likelihood(const Dataset& ds, const Hyperparams& hp);

/// LML and its gradient with respect to (log theta1, log theta2, log sigma^2).
struct LmlValue {
  double value;
  Eigen::Vector3d grad_log;
};
LmlValue log_marginal_likelihood_with_grad(const Dataset& ds, const Hyperparams& hp);

struct LogBox {
  Eigen::Vector3d lower;  // natural log of (theta1, theta2, sigma^2)
  Eigen::Vector3d upper;

  static LogBox defaults();
  Hyperparams midpoint() const;
};

struct FitOptions {
  LogBox bounds = LogBox::defaults();
  int restarts = 8;
  std::uint64_t seed = 0;
  int max_steps = 200;
  std::optional<Hyperparams> warm_start;
};

struct FitResult {
  Hyperparams hp;
  double lml = 0.0;
  bool fallback = false;  // no restart improved over the bounds midpoint
};

/// Multistart projected gradient ascent of the LML in log-hyperparameter space.
FitResult fit(const Dataset& ds, const FitOptions& opts = {});

/// Immutable conditioned GP. Stores the normalized training set.
class Posterior {
 public:
  Posterior(const Dataset& ds, const Hyperparams& hp);

  struct Prediction {
    double mean;
    double var;
  };

  /// Mean and variance at a point in user units (de-normalized).
  Prediction predict(const VectorXd& xstar) const;
  /// Same, but xstar is already in unit-box coordinates and results stay standardized.
  Prediction predict_unit(const VectorXd& ustar) const;

  const Hyperparams& hyperparams() const { return hp_; }
  const Normalization& normalization() const { return norm_; }
  const MatrixXd& unit_inputs() const { return Xu_; }
  MatrixXd chol_factor() const { return fac_.llt.matrixL(); }
  const VectorXd& weights() const { return weights_; }
  double jitter() const { return fac_.jitter; }
  Eigen::Index dim() const { return Xu_.cols(); }

 private:
  MatrixXd Xu_;
  Hyperparams hp_;
  Normalization norm_;
  Factorization fac_;
  VectorXd weights_;
};

}  // namespace fsibo::gp

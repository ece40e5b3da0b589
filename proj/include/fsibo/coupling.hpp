#pragma once

#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace fsibo::coupling {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// A failure inside one of the two black-box sub-solvers.
class SubSolverError : public std::runtime_error {
 public:
  enum class Which { Fluid, Solid };
  SubSolverError(Which which, const std::string& what);
  Which which() const { return which_; }

 private:
  Which which_;
};

/// Fluid maps interface displacement to interface load; solid maps load back to a predicted displacement.
struct SolverPair {
  std::function<VectorXd(const VectorXd&)> fluid;
  std::function<VectorXd(const VectorXd&)> solid;
};

struct Residual {
  VectorXd r;       // S(F(d)) - d
  VectorXd dtilde;  // S(F(d))
};

Residual residual(const SolverPair& pair, const VectorXd& d);

/// Secant history. Column 0 is the newest pair.
class CouplingHistory {
 public:
  explicit CouplingHistory(Eigen::Index p);

  /// Prepends the pair; drops the oldest column once more than p columns would be stored.
  void push_pair(const VectorXd& delta_r, const VectorXd& delta_dtilde);
  void clear();

  Eigen::Index p() const { return p_; }
  Eigen::Index q() const { return V_.cols(); }
  const MatrixXd& V() const { return V_; }
  const MatrixXd& W() const { return W_; }

 private:
  Eigen::Index p_;
  MatrixXd V_;
  MatrixXd W_;
};

/// Economy Householder QR of a tall matrix with greedy filtering of near-dependent columns.
class FilteredQR {
 public:
  /// Columns whose diagonal entry of R falls below rel_tol times the largest diagonal so far are skipped.
  explicit FilteredQR(const MatrixXd& A, double rel_tol = 1e-12);

  /// Least-squares coefficients for every original column (zeros on filtered columns).
  VectorXd solve(const VectorXd& b) const;

  const std::vector<Eigen::Index>& kept() const { return kept_; }
  /// Upper-triangular factor restricted to kept columns.
  MatrixXd R() const;
  /// Thin orthonormal factor for kept columns.
  MatrixXd Q() const;

 private:
  Eigen::Index rows_;
  Eigen::Index cols_;
  std::vector<VectorXd> reflectors_;  // unit Householder vectors, reflector k acts on rows k..end
  std::vector<Eigen::Index> kept_;
  MatrixXd R_;

  void apply_reflectors(VectorXd& v) const;
};

/// Coefficients alpha minimizing ||V alpha + r_k||, i.e. V alpha ~ -r_k. Empty optional if every column was filtered.
std::optional<VectorXd> solve_alpha(const CouplingHistory& hist, const VectorXd& rk, double filter_tol = 1e-12);

/// d + W alpha + r_k.
VectorXd qn_update(const VectorXd& d, const CouplingHistory& hist, const VectorXd& alpha, const VectorXd& rk);

struct ConvergeOptions {
  double eps = 1e-8;
  int max_iter = 50;
  double omega = 0.5;  // relaxation of the startup step
  double filter_tol = 1e-12;
};

struct CouplingReport {
  VectorXd d_final;
  int iterations = 0;  // displacement updates performed (relaxed + quasi-Newton)
  std::vector<double> residual_norms;  // one entry per residual evaluation, starting at d0
  bool converged = false;
};

CouplingReport converge(const SolverPair& pair, const VectorXd& d0, const ConvergeOptions& opts = {});

/// Two-column table "iteration residual_norm" with a header line.
void write_residual_trace(std::ostream& os, const CouplingReport& report);

}  // namespace fsibo::coupling

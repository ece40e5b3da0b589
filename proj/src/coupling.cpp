#include "fsibo/coupling.hpp"

#include <cmath>
#include <ostream>

#include "fsibo/format.hpp"

namespace fsibo::coupling {

SubSolverError::SubSolverError(Which which, const std::string& what)
    : std::runtime_error(std::string(which == Which::Fluid ? "fluid" : "solid") + " solver failed: " + what),
      which_(which) {}

Residual residual(const SolverPair& pair, const VectorXd& d) {
  VectorXd load;
  try {
    load = pair.fluid(d);
  } catch (const SubSolverError&) {
    throw;
  } catch (const std::exception& e) {
    throw SubSolverError(SubSolverError::Which::Fluid, e.what());
  }
  VectorXd dtilde;
  try {
    dtilde = pair.solid(load);
  } catch (const SubSolverError&) {
    throw;
  } catch (const std::exception& e) {
    throw SubSolverError(SubSolverError::Which::Solid, e.what());
  }
  if (dtilde.size() != d.size()) {
    throw SubSolverError(SubSolverError::Which::Solid, "returned a displacement of the wrong dimension");
  }
  if (!dtilde.allFinite()) throw SubSolverError(SubSolverError::Which::Solid, "non-finite displacement");
  return {dtilde - d, dtilde};
}

CouplingHistory::CouplingHistory(Eigen::Index p) : p_(p), V_(p, 0), W_(p, 0) {}

void CouplingHistory::push_pair(const VectorXd& delta_r, const VectorXd& delta_dtilde) {
  if (delta_r.size() != p_ || delta_dtilde.size() != p_) {
    throw std::invalid_argument("push_pair: vectors must have the interface dimension");
  }
  const Eigen::Index keep = std::min<Eigen::Index>(V_.cols(), p_ - 1);
  MatrixXd V(p_, keep + 1), W(p_, keep + 1);
  V.col(0) = delta_r;
  W.col(0) = delta_dtilde;
  V.rightCols(keep) = V_.leftCols(keep);
  W.rightCols(keep) = W_.leftCols(keep);
  V_ = std::move(V);
  W_ = std::move(W);
}

void CouplingHistory::clear() {
  V_.resize(p_, 0);
  W_.resize(p_, 0);
}

FilteredQR::FilteredQR(const MatrixXd& A, double rel_tol) : rows_(A.rows()), cols_(A.cols()) {
  std::vector<VectorXd> rcols;
  double max_diag = 0.0;
  for (Eigen::Index j = 0; j < cols_; ++j) {
    const Eigen::Index k = static_cast<Eigen::Index>(kept_.size());
    if (k >= rows_) break;
    VectorXd a = A.col(j);
    apply_reflectors(a);
    const double tail = a.tail(rows_ - k).norm();
    if (!(tail > rel_tol * max_diag) || tail == 0.0) continue;

    // Reflector mapping the tail onto -sign(a_k) * tail * e_k.
    VectorXd v = a.tail(rows_ - k);
    const double alpha = v(0) >= 0.0 ? -tail : tail;
    v(0) -= alpha;
    const double vnorm = v.norm();
    if (vnorm > 0.0) v /= vnorm;
    reflectors_.push_back(v);
    a.tail(rows_ - k).setZero();
    a(k) = alpha;
    max_diag = std::max(max_diag, std::abs(alpha));
    kept_.push_back(j);
    rcols.push_back(a.head(k + 1));
  }
  const Eigen::Index r = static_cast<Eigen::Index>(kept_.size());
  R_ = MatrixXd::Zero(r, r);
  for (Eigen::Index c = 0; c < r; ++c) R_.col(c).head(c + 1) = rcols[c];
}

void FilteredQR::apply_reflectors(VectorXd& v) const {
  for (std::size_t k = 0; k < reflectors_.size(); ++k) {
    const auto& h = reflectors_[k];
    const Eigen::Index off = static_cast<Eigen::Index>(k);
    auto seg = v.tail(rows_ - off);
    seg -= 2.0 * h.dot(seg) * h;
  }
}

VectorXd FilteredQR::solve(const VectorXd& b) const {
  VectorXd qtb = b;
  apply_reflectors(qtb);
  const Eigen::Index r = static_cast<Eigen::Index>(kept_.size());
  VectorXd coef(r);
  // Back substitution on the kept triangle.
  for (Eigen::Index i = r - 1; i >= 0; --i) {
    double s = qtb(i);
    for (Eigen::Index j = i + 1; j < r; ++j) s -= R_(i, j) * coef(j);
    coef(i) = s / R_(i, i);
  }
  VectorXd full = VectorXd::Zero(cols_);
  for (Eigen::Index i = 0; i < r; ++i) full(kept_[i]) = coef(i);
  return full;
}

MatrixXd FilteredQR::R() const { return R_; }

MatrixXd FilteredQR::Q() const {
  const Eigen::Index r = static_cast<Eigen::Index>(kept_.size());
  MatrixXd Q(rows_, r);
  for (Eigen::Index c = 0; c < r; ++c) {
    VectorXd e = VectorXd::Zero(rows_);
    e(c) = 1.0;
    // Q = H_0 H_1 ... H_{r-1}; apply in reverse to e_c.
    for (Eigen::Index k = static_cast<Eigen::Index>(reflectors_.size()) - 1; k >= 0; --k) {
      const auto& h = reflectors_[k];
      auto seg = e.tail(rows_ - k);
      seg -= 2.0 * h.dot(seg) * h;
    }
    Q.col(c) = e;
  }
  return Q;
}

std::optional<VectorXd> solve_alpha(const CouplingHistory& hist, const VectorXd& rk, double filter_tol) {
  if (hist.q() < 1) return std::nullopt;
  const FilteredQR qr(hist.V(), filter_tol);
  if (qr.kept().empty()) return std::nullopt;
  return qr.solve(-rk);
}

VectorXd qn_update(const VectorXd& d, const CouplingHistory& hist, const VectorXd& alpha, const VectorXd& rk) {
  if (d.size() != rk.size() || hist.p() != d.size() || alpha.size() != hist.q()) {
    throw std::invalid_argument("qn_update: dimension mismatch");
  }
  return d + hist.W() * alpha + rk;
}

CouplingReport converge(const SolverPair& pair, const VectorXd& d0, const ConvergeOptions& opts) {
  if (!(opts.eps > 0.0)) throw std::invalid_argument("converge: eps must be positive");
  CouplingReport rep;
  CouplingHistory hist(d0.size());
  VectorXd d = d0;
  Residual cur = residual(pair, d);
  rep.residual_norms.push_back(cur.r.norm());

  std::optional<Residual> prev;
  while (rep.residual_norms.back() > opts.eps && rep.iterations < opts.max_iter) {
    VectorXd next;
    std::optional<VectorXd> alpha;
    if (prev) {
      hist.push_pair(cur.r - prev->r, cur.dtilde - prev->dtilde);
      alpha = solve_alpha(hist, cur.r, opts.filter_tol);
    }
    if (alpha) {
      next = qn_update(d, hist, *alpha, cur.r);
    } else {
      next = d + opts.omega * cur.r;
    }
    prev = std::move(cur);
    d = std::move(next);
    ++rep.iterations;
    cur = residual(pair, d);
    rep.residual_norms.push_back(cur.r.norm());
  }
  rep.d_final = d;
  rep.converged = rep.residual_norms.back() <= opts.eps;
  return rep;
}

void write_residual_trace(std::ostream& os, const CouplingReport& report) {
  os << "iteration residual_norm\n";
  for (std::size_t i = 0; i < report.residual_norms.size(); ++i) {
    os << i << ' ' << format::shortest(report.residual_norms[i]) << '\n';
  }
}

}  // namespace fsibo::coupling

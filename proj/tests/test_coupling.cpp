#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "fsibo/coupling.hpp"
#include "oracles.hpp"

using namespace fsibo::coupling;

namespace {

// S(F(d)) = A d + b, split as fluid d -> A d and solid l -> l + b.
SolverPair affine_pair(const MatrixXd& A, const VectorXd& b) {
  return {[A](const VectorXd& d) -> VectorXd { return A * d; }, [b](const VectorXd& l) -> VectorXd { return l + b; }};
}

MatrixXd random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
  std::normal_distribution<double> g;
  MatrixXd M(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) M(i, j) = g(rng);
  return M;
}

// Random matrix with prescribed spectral radius (symmetric, so eigenvalues are real).
MatrixXd with_spectral_radius(std::mt19937_64& rng, Eigen::Index p, double radius) {
  const MatrixXd G = random_matrix(rng, p, p);
  const MatrixXd S = 0.5 * (G + G.transpose());
  const double rho = Eigen::SelfAdjointEigenSolver<MatrixXd>(S).eigenvalues().cwiseAbs().maxCoeff();
  return S * (radius / rho);
}

}  // namespace

TEST_CASE("residual of an affine pair") {
  const SolverPair pair = affine_pair(MatrixXd::Constant(1, 1, 0.5), VectorXd::Constant(1, 1.0));
  const Residual r0 = residual(pair, VectorXd::Zero(1));
  CHECK(r0.r(0) == 1.0);
  CHECK(r0.dtilde(0) == 1.0);
  CHECK(residual(pair, VectorXd::Constant(1, 2.0)).r(0) == 0.0);

  std::mt19937_64 rng(3);
  const MatrixXd A = random_matrix(rng, 3, 3);
  const SolverPair p3 = affine_pair(A, VectorXd::Ones(3));
  const VectorXd d1 = random_matrix(rng, 3, 1), d2 = random_matrix(rng, 3, 1);
  const VectorXd lhs = residual(p3, d1).r - residual(p3, d2).r;
  const VectorXd rhs = (A - MatrixXd::Identity(3, 3)) * (d1 - d2);
  CHECK((lhs - rhs).norm() < 1e-12);
}

TEST_CASE("sub-solver failures name the failing side") {
  SolverPair pair{[](const VectorXd&) -> VectorXd { throw std::runtime_error("mesh inverted"); },
                  [](const VectorXd& l) -> VectorXd { return l; }};
  try {
    residual(pair, VectorXd::Zero(2));
    FAIL("expected a SubSolverError");
  } catch (const SubSolverError& e) {
    CHECK(e.which() == SubSolverError::Which::Fluid);
  }
  pair.fluid = [](const VectorXd& d) -> VectorXd { return d; };
  pair.solid = [](const VectorXd&) -> VectorXd { throw std::runtime_error("singular"); };
  try {
    residual(pair, VectorXd::Zero(2));
    FAIL("expected a SubSolverError");
  } catch (const SubSolverError& e) {
    CHECK(e.which() == SubSolverError::Which::Solid);
  }
}

TEST_CASE("history keeps the newest columns first and truncates at p") {
  CouplingHistory h(3);
  CHECK(h.q() == 0);
  for (int k = 1; k <= 4; ++k) {
    h.push_pair(VectorXd::Constant(3, k), VectorXd::Constant(3, 10 * k));
    CHECK(h.q() <= h.p());
  }
  CHECK(h.q() == 3);
  CHECK(h.V()(0, 0) == 4.0);
  CHECK(h.V()(0, 1) == 3.0);
  CHECK(h.V()(0, 2) == 2.0);
  CHECK(h.W()(0, 2) == 20.0);
  h.clear();
  CHECK(h.q() == 0);
}

TEST_CASE("solve_alpha: trivial and oracle cases") {
  CouplingHistory one(4);
  const VectorXd v = (VectorXd(4) << 1.0, -2.0, 0.5, 3.0).finished();
  one.push_pair(v, VectorXd::Zero(4));
  const auto a1 = solve_alpha(one, -2.5 * v);
  REQUIRE(a1);
  CHECK((*a1)(0) == doctest::Approx(2.5).epsilon(1e-14));

  std::mt19937_64 rng(12);
  const MatrixXd Q = random_matrix(rng, 6, 3).householderQr().householderQ() * MatrixXd::Identity(6, 3);
  CouplingHistory orth(6);
  for (int j = 2; j >= 0; --j) orth.push_pair(Q.col(j), VectorXd::Zero(6));
  const VectorXd rk = random_matrix(rng, 6, 1);
  const auto ao = solve_alpha(orth, rk);
  REQUIRE(ao);
  CHECK((*ao - Q.transpose() * (-rk)).norm() < 1e-12);

  for (int trial = 0; trial < 100; ++trial) {
    CouplingHistory h(6);
    const MatrixXd V = random_matrix(rng, 6, 3);
    for (int j = 2; j >= 0; --j) h.push_pair(V.col(j), VectorXd::Zero(6));
    const VectorXd r = random_matrix(rng, 6, 1);
    const auto a = solve_alpha(h, r);
    REQUIRE(a);
    const VectorXd ref = oracle::normal_equations(V, -r);
    CHECK((*a - ref).norm() <= 1e-10 * ref.norm());
  }
}

TEST_CASE("filtered QR drops dependent columns") {
  MatrixXd A(5, 3);
  A.col(0) << 1, 2, 3, 4, 5;
  A.col(1) << 0, 1, 0, 1, 0;
  A.col(2) = 2.0 * A.col(0);
  const FilteredQR qr(A);
  CHECK(qr.kept() == std::vector<Eigen::Index>{0, 1});
  const VectorXd b = A.col(0) + 3.0 * A.col(1);
  const VectorXd x = qr.solve(b);
  CHECK(x(0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(x(1) == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(x(2) == 0.0);
  const MatrixXd Qk = qr.Q();
  CHECK((Qk.transpose() * Qk - MatrixXd::Identity(2, 2)).norm() < 1e-12);

  CouplingHistory zero(3);
  zero.push_pair(VectorXd::Zero(3), VectorXd::Zero(3));
  CHECK(!solve_alpha(zero, VectorXd::Ones(3)));
}

TEST_CASE("qn_update follows d + W alpha + r") {
  CouplingHistory h(3);
  h.push_pair(VectorXd::Ones(3), (VectorXd(3) << 1, 2, 3).finished());
  const VectorXd d = (VectorXd(3) << 0.5, 0.5, 0.5).finished();
  const VectorXd r = (VectorXd(3) << 0.1, -0.2, 0.3).finished();
  CHECK(qn_update(d, h, VectorXd::Zero(1), r) == d + r);
  CHECK(qn_update(d, h, VectorXd::Constant(1, 2.0), VectorXd::Zero(3)) == d + 2.0 * h.W().col(0));
  CHECK(qn_update(d, h, VectorXd::Zero(1), VectorXd::Zero(3)) == d);

  // One secant pair is exact for a scalar affine map.
  const double a = 0.5, b = 1.0;
  const double d0 = 0.0, d1 = 0.5;
  const double r0 = a * d0 + b - d0, r1 = a * d1 + b - d1;
  CouplingHistory s(1);
  s.push_pair(VectorXd::Constant(1, r1 - r0), VectorXd::Constant(1, (a * d1 + b) - (a * d0 + b)));
  const auto alpha = solve_alpha(s, VectorXd::Constant(1, r1));
  REQUIRE(alpha);
  CHECK(qn_update(VectorXd::Constant(1, d1), s, *alpha, VectorXd::Constant(1, r1))(0) ==
        doctest::Approx(b / (1 - a)).epsilon(1e-14));
}

TEST_CASE("converge on scalar and already-converged pairs") {
  const SolverPair pair = affine_pair(MatrixXd::Constant(1, 1, 0.5), VectorXd::Constant(1, 1.0));
  ConvergeOptions opts;
  opts.eps = 1e-10;
  const CouplingReport rep = converge(pair, VectorXd::Zero(1), opts);
  CHECK(rep.converged);
  CHECK(rep.d_final(0) == doctest::Approx(2.0).epsilon(1e-10));
  CHECK(rep.iterations <= 4);
  CHECK(rep.residual_norms.back() <= 1e-10);

  const CouplingReport at = converge(pair, VectorXd::Constant(1, 2.0), opts);
  CHECK(at.converged);
  CHECK(at.iterations == 0);

  // Decoupled (constant) pair: exact after the first quasi-Newton pass.
  const SolverPair constant{[](const VectorXd& d) -> VectorXd { return 0.0 * d; },
                            [](const VectorXd& l) -> VectorXd { return l + VectorXd::Constant(l.size(), 3.0); }};
  const CouplingReport c = converge(constant, VectorXd::Zero(4), opts);
  CHECK(c.converged);
  CHECK(c.iterations <= 2);
}

TEST_CASE("converge is exact on affine pairs, including divergent Picard maps") {
  std::mt19937_64 rng(31);
  MatrixXd A2(2, 2);
  A2 << 1.2, 0.0, 0.0, -0.4;
  const VectorXd b2 = (VectorXd(2) << 1.0, -2.0).finished();
  ConvergeOptions opts;
  opts.eps = 1e-10;
  const CouplingReport r2 = converge(affine_pair(A2, b2), VectorXd::Zero(2), opts);
  const VectorXd exact2 = (MatrixXd::Identity(2, 2) - A2).lu().solve(b2);
  CHECK(r2.converged);
  CHECK(r2.iterations <= 6);
  CHECK((r2.d_final - exact2).norm() < 1e-8);

  for (int p : {1, 2, 5, 10}) {
    const MatrixXd A = with_spectral_radius(rng, p, 1.5);
    const VectorXd b = random_matrix(rng, p, 1);
    const SolverPair pair = affine_pair(A, b);
    const CouplingReport rep = converge(pair, VectorXd::Zero(p), opts);
    CHECK(rep.converged);
    CHECK(rep.iterations <= p + 2);
    CHECK(residual(pair, rep.d_final).r.norm() <= 1e-10);
    // Independent re-evaluation agrees with the report.
    CHECK(residual(pair, rep.d_final).r.norm() <= rep.residual_norms.back() * (1 + 1e-9) + 1e-15);
  }
}

TEST_CASE("non-convergence is reported with the full trace") {
  const SolverPair pair{[](const VectorXd& d) -> VectorXd { return d.array().cos().matrix() * 3.0; },
                        [](const VectorXd& l) -> VectorXd { return l; }};
  ConvergeOptions opts;
  opts.max_iter = 3;
  opts.eps = 1e-14;
  const CouplingReport rep = converge(pair, VectorXd::Zero(2), opts);
  CHECK(!rep.converged);
  CHECK(rep.iterations == 3);
  CHECK(rep.residual_norms.size() == 4);

  std::ostringstream os;
  write_residual_trace(os, rep);
  std::istringstream in(os.str());
  std::string header;
  std::getline(in, header);
  CHECK(header == "iteration residual_norm");
  int rows = 0;
  for (std::string line; std::getline(in, line);) ++rows;
  CHECK(rows == 4);
}

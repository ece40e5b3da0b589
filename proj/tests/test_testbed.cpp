#include <cmath>
#include <numbers>

#include "doctest.h"
#include "fsibo/testbed.hpp"
#include "oracles.hpp"

using namespace fsibo::testbed;

namespace {

StiffnessProfile uniform(double modulus, double length = kBeamLength) { return {Uniform{modulus}, length}; }

VectorXd one(double v) { return VectorXd::Constant(1, v); }

struct Sdof {
  double omega = 2.0 * std::numbers::pi;  // period 1 s
  MatrixXd M = MatrixXd::Identity(1, 1);
  MatrixXd C = MatrixXd::Zero(1, 1);
  MatrixXd K = MatrixXd::Constant(1, 1, 4.0 * std::numbers::pi * std::numbers::pi);

  Trajectory run(double rho, double dt, double t_end) const {
    return generalized_alpha_trajectory(M, C, K, [](double) { return VectorXd::Zero(1); }, {rho, dt, t_end},
                                        VectorXd::Ones(1), VectorXd::Zero(1));
  }
};

// Upward zero crossings of u, located with cubic Hermite interpolation over (u, v).
std::vector<double> upward_crossings(const Trajectory& tr) {
  std::vector<double> out;
  for (std::size_t n = 0; n + 1 < tr.times.size(); ++n) {
    const double u0 = tr.displacement[n](0), u1 = tr.displacement[n + 1](0);
    if (!(u0 < 0.0 && u1 >= 0.0)) continue;
    const double h = tr.times[n + 1] - tr.times[n];
    const double m0 = tr.velocity[n](0) * h, m1 = tr.velocity[n + 1](0) * h;
    auto hermite = [&](double s) {
      const double s2 = s * s, s3 = s2 * s;
      return (2 * s3 - 3 * s2 + 1) * u0 + (s3 - 2 * s2 + s) * m0 + (-2 * s3 + 3 * s2) * u1 + (s3 - s2) * m1;
    };
    double lo = 0.0, hi = 1.0;
    for (int it = 0; it < 100; ++it) {
      const double mid = 0.5 * (lo + hi);
      (hermite(mid) < 0.0 ? lo : hi) = mid;
    }
    out.push_back(tr.times[n] + 0.5 * (lo + hi) * h);
  }
  return out;
}

double period_error(const Sdof& s, double dt) {
  const auto c = upward_crossings(s.run(1.0, dt, 20.5));
  const double period = (c.back() - c.front()) / static_cast<double>(c.size() - 1);
  return std::abs(period - 1.0);
}

}  // namespace

TEST_CASE("stiffness profiles") {
  const StiffnessProfile flat{Linear{0.0}};
  CHECK(stiffness_eval(flat, 0.1) == doctest::Approx(5.6e6).epsilon(1e-14));
  const StiffnessProfile steep{Linear{kLinearSlopeBound}};
  CHECK(stiffness_eval(steep, 0.0) == doctest::Approx(0.0160e6).epsilon(1e-2));
  CHECK(stiffness_eval(steep, 0.0) > 0.0);
  CHECK_NOTHROW(steep.validate());
  CHECK_THROWS_AS((StiffnessProfile{Linear{1.01 * kLinearSlopeBound}}.validate()), std::invalid_argument);

  // Integral constraint holds for every admissible slope.
  for (double A : {-31.9088e6, -10e6, 0.0, 12e6, 31.9088e6}) {
    const StiffnessProfile p{Linear{A}};
    double integral = 0.0;
    const int n = 1000;
    for (int i = 0; i < n; ++i) integral += stiffness_eval(p, kBeamLength * (i + 0.5) / n) * kBeamLength / n;
    CHECK(integral == doctest::Approx(kStiffnessIntegral).epsilon(1e-12));
  }

  const StiffnessProfile box{Box{0.1199}};
  CHECK(stiffness_eval(box, 0.1199) == 7.0e6);
  CHECK(stiffness_eval(box, 0.30) == 5.6e6);
  CHECK_THROWS_AS((StiffnessProfile{Box{0.01}}.validate()), std::invalid_argument);
  CHECK_THROWS_AS(uniform(11e6).validate(), std::invalid_argument);
}

TEST_CASE("cantilever finite differences match the closed form") {
  const BeamSection section;
  const double E = 5.6e6, q = 500.0;
  const double fd = beam_deflection(uniform(E), [q](double) { return q; }, 256, section);
  const double exact = oracle::cantilever_tip(q, kBeamLength, E, section.second_moment);
  CHECK(std::abs(fd - exact) <= 0.005 * exact);

  CHECK(beam_deflection(uniform(E), [](double) { return 0.0; }, 64, section) == 0.0);
  const double d1 = beam_deflection(uniform(E), [](double x) { return 300.0 + 900.0 * x; }, 64, section);
  const double d2 = beam_deflection(uniform(2 * E), [](double x) { return 300.0 + 900.0 * x; }, 64, section);
  CHECK(d2 == doctest::Approx(0.5 * d1).epsilon(1e-12));
  CHECK_THROWS_AS(beam_deflection(uniform(E), [](double) { return 1.0; }, 8, section), std::invalid_argument);
  CHECK_THROWS_AS(beam_deflection(uniform(0.0), [](double) { return 1.0; }, 32, section), EvaluationFailure);
}

TEST_CASE("pseudo-fluid load") {
  const PseudoFluidParams p;
  const VectorXd q = pseudo_fluid_load(VectorXd::Zero(5), p);
  CHECK((q.array() == p.q0).all());
  const VectorXd w = VectorXd::Constant(2, 0.01);
  CHECK(pseudo_fluid_load(w, p)(0) == doctest::Approx(p.q0 / 1.2 - p.gamma * 0.01));
  CHECK_THROWS_AS(pseudo_fluid_load(VectorXd::Constant(1, -0.06), p), EvaluationFailure);
}

TEST_CASE("decoupled load converges after one quasi-Newton pass") {
  ProblemSpec spec;
  spec.fluid.beta = 0.0;
  spec.fluid.gamma = 0.0;
  const auto out = coupled_evaluate(spec, uniform(5.6e6));
  CHECK(out.coupling_report.converged);
  CHECK(out.coupling_report.iterations <= 2);
}

TEST_CASE("coupled fixed point matches a damped Picard reference") {
  ProblemSpec spec;
  spec.coupling.eps = 1e-13;
  const StiffnessProfile profile{Linear{-10e6}};
  const auto out = coupled_evaluate(spec, profile);
  const VectorXd ref = picard_fixed_point(spec, profile, 0.1, 100000, 1e-14);
  CHECK((out.deflection - ref).norm() <= 1e-12 + 1e-9 * ref.norm());
}

TEST_CASE("accepted evaluations carry a converged report") {
  const ProblemSpec spec;
  for (double A : {-31.9088, 0.0, 31.9088}) {
    const auto out = coupled_evaluate(spec, profile_for(Family::Example1, one(A)));
    CHECK(out.coupling_report.converged);
    CHECK(out.coupling_report.residual_norms.back() <= spec.coupling.eps);
    // The residual trace decreases strictly once past the startup step.
    const auto& r = out.coupling_report.residual_norms;
    for (std::size_t k = 3; k < r.size(); ++k) CHECK(r[k] < r[k - 1]);
  }
  const auto a = coupled_evaluate(spec, profile_for(Family::Example1, one(7.5)));
  const auto b = coupled_evaluate(spec, profile_for(Family::Example1, one(7.5)));
  CHECK(a.objective == b.objective);
  CHECK(a.constraints == b.constraints);
}

TEST_CASE("Example-1 analog is monotone and minimized at the lower bound") {
  const ProblemSpec spec;
  double prev = -1.0;
  double best = std::numeric_limits<double>::infinity(), best_A = 0.0;
  for (int i = 0; i <= 200; ++i) {
    const double A = -31.9088 + 2 * 31.9088 * i / 200.0;
    const auto out = coupled_evaluate(spec, profile_for(Family::Example1, one(A)));
    CHECK(out.objective > prev);
    CHECK(out.constraint("v_x") == doctest::Approx(spec.v0 * (1 + spec.kappa * out.objective)));
    prev = out.objective;
    if (out.objective < best) {
      best = out.objective;
      best_A = A;
    }
  }
  CHECK(best_A == -31.9088);
}

TEST_CASE("Example-2 analog is evaluable and continuous on [0, 10] MPa") {
  const ProblemSpec spec;
  double prev = std::numeric_limits<double>::quiet_NaN();
  for (int i = 0; i <= 400; ++i) {
    const double B = 10.0 * i / 400.0;
    const auto out = coupled_evaluate(spec, profile_for(Family::Example2, one(B)));
    CHECK(std::isfinite(out.objective));
    if (std::isfinite(prev)) CHECK(std::abs(out.objective - prev) <= 0.1 * prev);
    prev = out.objective;
  }
}

TEST_CASE("box stiffness is most effective near the clamp") {
  const ProblemSpec spec;
  const double root = coupled_evaluate(spec, profile_for(Family::Example3, one(kBeamLength / 6))).objective;
  const double tip = coupled_evaluate(spec, profile_for(Family::Example3, one(5 * kBeamLength / 6))).objective;
  const double base = coupled_evaluate(spec, uniform(kBoxOutside)).objective;
  CHECK(root < tip);
  CHECK(tip < base);
}

TEST_CASE("testbed is grid converged") {
  ProblemSpec coarse;
  ProblemSpec fine;
  fine.structural_nodes = 2 * coarse.structural_nodes - 1;
  fine.fluid_centers = 2 * coarse.fluid_centers;
  for (const auto& [family, x] : {std::pair{Family::Example1, one(-20.0)}, std::pair{Family::Example3, one(0.2)},
                                  std::pair{Family::Example2, one(3.0)}}) {
    const double a = coupled_evaluate(coarse, profile_for(family, x)).objective;
    const double b = coupled_evaluate(fine, profile_for(family, x)).objective;
    CHECK(std::abs(a - b) <= 0.01 * std::abs(b));
  }
}

TEST_CASE("sail-plane analog forces rise with the angle of attack") {
  ProblemSpec spec;
  spec.family = Family::SailPlane;
  double prev_lift = -1.0, prev_drag = -1.0;
  for (double theta : {0.0, 2.5, 5.0, 7.5, 10.0}) {
    VectorXd x(2);
    x << theta, 40.0;
    const auto out = coupled_evaluate(spec, profile_for(Family::SailPlane, x));
    CHECK(out.constraint("F_L") > prev_lift);
    CHECK(out.objective > prev_drag);
    CHECK(out.constraint("dp") > 0.0);
    prev_lift = out.constraint("F_L");
    prev_drag = out.objective;
  }
  VectorXd soft(2), stiff(2);
  soft << 5.0, 30.0;
  stiff << 5.0, 50.0;
  CHECK(coupled_evaluate(spec, profile_for(Family::SailPlane, soft)).constraint("delta") >
        coupled_evaluate(spec, profile_for(Family::SailPlane, stiff)).constraint("delta"));
}

TEST_CASE("invalid designs fail as evaluations") {
  const ProblemSpec spec;
  CHECK_THROWS_AS(coupled_evaluate(spec, profile_for(Family::Example1, one(40.0))), EvaluationFailure);
  CHECK_THROWS_AS(profile_for(Family::Example1, VectorXd::Zero(2)), std::invalid_argument);
  CHECK(parse_family("sailplane") == Family::SailPlane);
  CHECK_THROWS_AS(parse_family("example9"), std::invalid_argument);
}

TEST_CASE("generalized-alpha parameters") {
  const auto p1 = GeneralizedAlphaParams::from_rho_inf(1.0);
  CHECK(p1.alpha_m == 0.5);
  CHECK(p1.alpha_f == 0.5);
  CHECK(p1.gamma == 0.5);
  CHECK(p1.beta == 0.25);
  const auto p8 = GeneralizedAlphaParams::from_rho_inf(0.8);
  CHECK(p8.gamma == doctest::Approx(0.5 - p8.alpha_m + p8.alpha_f));
  CHECK_THROWS_AS(GeneralizedAlphaParams::from_rho_inf(1.5), std::invalid_argument);
}

TEST_CASE("generalized-alpha: zero data gives a zero trajectory") {
  const Sdof s;
  const auto tr = generalized_alpha_trajectory(s.M, s.C, s.K, [](double) { return VectorXd::Zero(1); }, {0.8, 0.01, 1.0},
                                               VectorXd::Zero(1), VectorXd::Zero(1));
  for (const auto& u : tr.displacement) CHECK(u(0) == 0.0);
  CHECK(tr.times.size() == 101);
}

TEST_CASE("generalized-alpha: second-order period error") {
  const Sdof s;
  const double e1 = period_error(s, 1.0 / 20), e2 = period_error(s, 1.0 / 40), e3 = period_error(s, 1.0 / 80);
  CHECK(std::log2(e1 / e2) == doctest::Approx(2.0).epsilon(0.05));
  CHECK(std::log2(e2 / e3) == doctest::Approx(2.0).epsilon(0.05));
  // Compare the trajectory with the analytic cosine at a fine step.
  const auto tr = s.run(1.0, 1.0 / 400, 1.0);
  for (std::size_t n = 0; n < tr.times.size(); ++n) {
    CHECK(std::abs(tr.displacement[n](0) - std::cos(s.omega * tr.times[n])) < 2e-3);
  }
}

TEST_CASE("generalized-alpha: energy and dissipation") {
  const Sdof s;
  const auto energy = [&](const Trajectory& tr, std::size_t n) {
    const double u = tr.displacement[n](0), v = tr.velocity[n](0);
    return 0.5 * v * v + 0.5 * s.omega * s.omega * u * u;
  };
  const auto cons = s.run(1.0, 1.0 / 20, 100.0);
  const double e0 = energy(cons, 0);
  double drift = 0.0;
  for (std::size_t n = 0; n < cons.times.size(); ++n) drift = std::max(drift, std::abs(energy(cons, n) - e0) / e0);
  CHECK(drift < 1e-3);

  const auto diss = s.run(0.8, 1.0 / 20, 20.0);
  double prev = energy(diss, 0);
  for (std::size_t period = 1; period <= 20; ++period) {
    const double e = energy(diss, period * 20);
    CHECK(e < prev);
    CHECK(std::sqrt(e / prev) > 0.95);
    prev = e;
  }
}

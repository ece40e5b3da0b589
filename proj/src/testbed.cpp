#include "fsibo/testbed.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>

#include <Eigen/LU>

#include "fsibo/transfer.hpp"

namespace fsibo::testbed {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

constexpr double kDegree = std::numbers::pi / 180.0;

// Average of 1/E over [a,b] by midpoint subsampling; exact for piecewise constants up to one cell.
double mean_compliance(const StiffnessProfile& profile, double a, double b, double floor) {
  constexpr int kSub = 16;
  double acc = 0.0;
  for (int s = 0; s < kSub; ++s) {
    const double x = a + (s + 0.5) * (b - a) / kSub;
    acc += 1.0 / std::max(stiffness_eval(profile, x), floor);
  }
  return acc / kSub;
}

struct Geometry {
  std::vector<transfer::Point> nodes;
  std::vector<transfer::Point> centers;
  transfer::CouplingPairs pairs;
  std::vector<double> trib;
};

Geometry make_geometry(double length, int n_struct, int n_fluid) {
  Geometry g;
  for (int i = 0; i < n_struct; ++i) g.nodes.emplace_back(length * i / (n_struct - 1), 0.0);
  for (int j = 0; j < n_fluid; ++j) g.centers.emplace_back(length * (j + 0.5) / n_fluid, 0.0);
  g.pairs = transfer::pair_meshes(g.nodes, g.centers);
  g.trib = transfer::tributary_lengths(g.nodes);
  return g;
}

std::vector<transfer::Point> as_points(const VectorXd& w) {
  std::vector<transfer::Point> pts(w.size());
  for (Eigen::Index i = 0; i < w.size(); ++i) pts[i] = transfer::Point(0.0, w(i));
  return pts;
}

// Fluid-side displacement samples (normal component) for nodal deflections d.
VectorXd fluid_deflection(const Geometry& g, const VectorXd& d) {
  const auto motion = transfer::map_motion(as_points(d), g.pairs);
  VectorXd wf(motion.size());
  for (std::size_t j = 0; j < motion.size(); ++j) wf(j) = motion[j].y();
  return wf;
}

VectorXd nodal_forces(const Geometry& g, const VectorXd& pressure) {
  transfer::ScalarField field;
  field.positions = g.centers;  // loads act on the reference configuration (small deflections)
  field.values.assign(pressure.data(), pressure.data() + pressure.size());
  const auto loads = transfer::map_loads(field, g.pairs);
  return Eigen::Map<const VectorXd>(loads.data(), static_cast<Eigen::Index>(loads.size()));
}

VectorXd intensities(const Geometry& g, const VectorXd& forces) {
  VectorXd q(forces.size());
  for (Eigen::Index i = 0; i < q.size(); ++i) q(i) = forces(i) / g.trib[i];
  return q;
}

struct CoupledModel {
  std::shared_ptr<const Geometry> geometry;
  coupling::SolverPair pair;
  std::function<VectorXd(const VectorXd&)> pressure;  // fluid-center load intensity for nodal deflections
  StiffnessProfile beam;
  BeamSection section;
};

CoupledModel build_model(const ProblemSpec& spec, const StiffnessProfile& profile) {
  profile.validate();
  CoupledModel m;
  m.beam = profile;
  m.section = spec.section;
  if (std::holds_alternative<Uniform>(profile.variant)) m.section.min_modulus = spec.uniform_min_modulus;

  if (const auto* sail = std::get_if<SailPlane>(&profile.variant)) {
    const SailPlaneParams sp = spec.sail;
    m.beam.length = sp.length;
    m.section.second_moment = sp.second_moment;
    auto geo = std::make_shared<const Geometry>(make_geometry(sp.length, spec.structural_nodes, spec.fluid_centers));
    m.geometry = geo;
    VectorXd shape(spec.fluid_centers);
    for (int j = 0; j < spec.fluid_centers; ++j) shape(j) = 2.0 * (1.0 - geo->centers[j].x() / sp.length);
    const double theta = sail->angle_deg * kDegree;
    m.pressure = [sp, shape, theta, geo](const VectorXd& d) {
      const double camber = sp.camber_gain * std::atan(d(d.size() - 1) / sp.length);
      const double q0 = sp.dynamic_pressure() * (sp.base_coefficient + sp.slope_coefficient * std::sin(theta + camber));
      return pseudo_fluid_load(fluid_deflection(*geo, d), {q0, sp.beta, sp.gamma}, shape);
    };
  } else {
    auto geo = std::make_shared<const Geometry>(make_geometry(profile.length, spec.structural_nodes, spec.fluid_centers));
    m.geometry = geo;
    const auto fluid = spec.fluid;
    m.pressure = [fluid, geo](const VectorXd& d) { return pseudo_fluid_load(fluid_deflection(*geo, d), fluid); };
  }
  return m;
}

}  // namespace

void StiffnessProfile::validate() const {
  if (!(length > 0.0)) throw std::invalid_argument("profile: beam length must be positive");
  std::visit(overloaded{
                 [&](const Linear& p) {
                   if (!std::isfinite(p.slope) || std::abs(p.slope) > kLinearSlopeBound * (1.0 + 1e-12)) {
                     throw std::invalid_argument("profile: linear slope outside [-31.9088, 31.9088] MPa/m");
                   }
                   const double mean = kStiffnessIntegral / length;
                   if (mean - std::abs(p.slope) * length / 2.0 <= 0.0) {
                     throw std::invalid_argument("profile: linear stiffness is not positive along the beam");
                   }
                 },
                 [&](const Uniform& p) {
                   if (!(p.modulus >= 0.0 && p.modulus <= 10.0e6)) {
                     throw std::invalid_argument("profile: uniform modulus outside [0, 10] MPa");
                   }
                 },
                 [&](const Box& p) {
                   const double lo = length / 6.0, hi = length - length / 6.0;
                   if (!(p.center >= lo - 1e-12 && p.center <= hi + 1e-12)) {
                     throw std::invalid_argument("profile: box center must keep the box on the beam");
                   }
                 },
                 [&](const SailPlane& p) {
                   if (!std::isfinite(p.angle_deg) || !(p.modulus > 0.0)) {
                     throw std::invalid_argument("profile: sail plane needs a finite angle and positive modulus");
                   }
                 },
             },
             variant);
}

double stiffness_eval(const StiffnessProfile& profile, double x) {
  return std::visit(overloaded{
                        [&](const Linear& p) {
                          const double b = kStiffnessIntegral / profile.length - p.slope * profile.length / 2.0;
                          return p.slope * x + b;
                        },
                        [&](const Uniform& p) { return p.modulus; },
                        [&](const Box& p) {
                          const double half = profile.length / 6.0;
                          return (x >= p.center - half && x <= p.center + half) ? kBoxInside : kBoxOutside;
                        },
                        [&](const SailPlane& p) { return p.modulus; },
                    },
                    profile.variant);
}

VectorXd beam_deflection_profile(const StiffnessProfile& profile, const VectorXd& q, const BeamSection& section) {
  const Eigen::Index n = q.size();
  if (n < 2) throw std::invalid_argument("beam: need at least two nodes");
  const double l = profile.length;
  const double h = l / static_cast<double>(n - 1);
  const double floor = section.min_modulus > 0.0 ? section.min_modulus : 0.0;

  // Bending moment: M'' = q, M(l) = 0, M'(l) = 0 via a ghost node beyond the tip.
  VectorXd M = VectorXd::Zero(n);
  M(n - 2) = 0.5 * h * h * q(n - 1);
  for (Eigen::Index i = n - 2; i >= 1; --i) M(i - 1) = h * h * q(i) + 2.0 * M(i) - M(i + 1);

  // Curvature with cell-averaged compliance, then w'' = M/(EI), w(0) = 0, w'(0) = 0.
  VectorXd kappa(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double a = std::max(0.0, (static_cast<double>(i) - 0.5) * h);
    const double b = std::min(l, (static_cast<double>(i) + 0.5) * h);
    const double compliance = mean_compliance(profile, a, b, floor);
    if (!std::isfinite(compliance) || compliance <= 0.0) {
      throw EvaluationFailure("beam: stiffness is not positive along the beam");
    }
    kappa(i) = M(i) * compliance / section.second_moment;
  }
  VectorXd w = VectorXd::Zero(n);
  w(1) = 0.5 * h * h * kappa(0);
  for (Eigen::Index i = 1; i + 1 < n; ++i) w(i + 1) = 2.0 * w(i) - w(i - 1) + h * h * kappa(i);
  return w;
}

double beam_deflection(const StiffnessProfile& profile, const std::function<double(double)>& load, int n_grid,
                       const BeamSection& section) {
  if (n_grid < 16) throw std::invalid_argument("beam: n_grid must be at least 16");
  VectorXd q(n_grid);
  for (int i = 0; i < n_grid; ++i) q(i) = load(profile.length * i / (n_grid - 1));
  return beam_deflection_profile(profile, q, section)(n_grid - 1);
}

VectorXd pseudo_fluid_load(const VectorXd& w, const PseudoFluidParams& params, const VectorXd& shape) {
  VectorXd q(w.size());
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    const double denom = 1.0 + params.beta * w(i);
    if (!(denom > 0.0)) throw EvaluationFailure("pseudo-fluid: excessive deformation (load model singular)");
    const double s = shape.size() ? shape(i) : 1.0;
    q(i) = params.q0 * s / denom - params.gamma * w(i);
  }
  return q;
}

std::string to_string(Family f) {
  switch (f) {
    case Family::Example1: return "example1";
    case Family::Example2: return "example2";
    case Family::Example3: return "example3";
    case Family::SailPlane: return "sailplane";
    case Family::Custom: return "custom";
  }
  return "custom";
}

Family parse_family(const std::string& s) {
  if (s == "example1") return Family::Example1;
  if (s == "example2") return Family::Example2;
  if (s == "example3") return Family::Example3;
  if (s == "sailplane") return Family::SailPlane;
  if (s == "custom") return Family::Custom;
  throw std::invalid_argument("unknown problem family '" + s + "'");
}

bool ProblemSpec::operator==(const ProblemSpec& o) const {
  const auto sail_eq = [](const SailPlaneParams& a, const SailPlaneParams& b) {
    return a.length == b.length && a.inflow_speed == b.inflow_speed && a.density == b.density &&
           a.base_coefficient == b.base_coefficient && a.slope_coefficient == b.slope_coefficient &&
           a.camber_gain == b.camber_gain && a.base_drag == b.base_drag && a.second_moment == b.second_moment &&
           a.pressure_length == b.pressure_length && a.beta == b.beta && a.gamma == b.gamma;
  };
  return family == o.family && fluid.q0 == o.fluid.q0 && fluid.beta == o.fluid.beta && fluid.gamma == o.fluid.gamma &&
         kappa == o.kappa && v0 == o.v0 && section.second_moment == o.section.second_moment &&
         section.min_modulus == o.section.min_modulus && structural_nodes == o.structural_nodes &&
         fluid_centers == o.fluid_centers && coupling.eps == o.coupling.eps && coupling.max_iter == o.coupling.max_iter &&
         coupling.omega == o.coupling.omega && coupling.filter_tol == o.coupling.filter_tol && sail_eq(sail, o.sail) &&
         uniform_min_modulus == o.uniform_min_modulus;
}

double EvaluationOutput::constraint(const std::string& name) const {
  for (const auto& [n, v] : constraints) {
    if (n == name) return v;
  }
  throw std::out_of_range("no constraint named '" + name + "'");
}

StiffnessProfile profile_for(Family family, const VectorXd& x) {
  const auto need = [&](Eigen::Index d) {
    if (x.size() != d) throw std::invalid_argument("design vector has the wrong dimension for " + to_string(family));
  };
  StiffnessProfile p;
  switch (family) {
    case Family::Example1: need(1); p.variant = Linear{x(0) * 1e6}; break;
    case Family::Example2: need(1); p.variant = Uniform{x(0) * 1e6}; break;
    case Family::Example3: need(1); p.variant = Box{x(0)}; break;
    case Family::SailPlane: need(2); p.variant = SailPlane{x(0), x(1) * 1e6}; p.length = SailPlaneParams{}.length; break;
    case Family::Custom: throw std::invalid_argument("custom problems have no built-in evaluator");
  }
  return p;
}

EvaluationOutput coupled_evaluate(const ProblemSpec& spec, const StiffnessProfile& profile) {
  if (spec.structural_nodes < 2 || spec.fluid_centers < 1) throw std::invalid_argument("testbed: grid sizes too small");
  CoupledModel m;
  try {
    m = build_model(spec, profile);
  } catch (const std::invalid_argument& e) {
    throw EvaluationFailure(e.what());
  }
  const auto* model = &m;
  m.pair.fluid = [model](const VectorXd& d) { return nodal_forces(*model->geometry, model->pressure(d)); };
  m.pair.solid = [model](const VectorXd& forces) {
    return beam_deflection_profile(model->beam, intensities(*model->geometry, forces), model->section);
  };

  EvaluationOutput out;
  try {
    out.coupling_report = coupling::converge(m.pair, VectorXd::Zero(spec.structural_nodes), spec.coupling);
  } catch (const coupling::SubSolverError& e) {
    throw EvaluationFailure(e.what());
  }
  if (!out.coupling_report.converged) throw EvaluationFailure("coupling did not converge");
  const VectorXd& d = out.coupling_report.d_final;
  out.deflection = d;
  const double tip = d(d.size() - 1);

  if (const auto* sail = std::get_if<SailPlane>(&profile.variant)) {
    const VectorXd pressure = m.pressure(d);
    const double normal = nodal_forces(*m.geometry, pressure).sum();
    const double theta = sail->angle_deg * kDegree;
    out.objective = normal * std::sin(theta) + spec.sail.base_drag;
    out.constraints = {
        {"F_L", normal * std::cos(theta)},
        {"delta", tip},
        {"dp", (pressure.maxCoeff() - pressure.minCoeff()) / spec.sail.pressure_length},
    };
  } else {
    out.objective = tip;
    out.constraints = {{"v_x", spec.v0 * (1.0 + spec.kappa * tip)}};
  }
  if (!std::isfinite(out.objective)) throw EvaluationFailure("non-finite objective");
  for (const auto& c : out.constraints) {
    if (!std::isfinite(c.second)) throw EvaluationFailure("non-finite constraint " + c.first);
  }
  return out;
}

VectorXd picard_fixed_point(const ProblemSpec& spec, const StiffnessProfile& profile, double relaxation,
                            int max_iter, double tol) {
  const CoupledModel m = build_model(spec, profile);
  VectorXd d = VectorXd::Zero(spec.structural_nodes);
  for (int it = 0; it < max_iter; ++it) {
    const VectorXd forces = nodal_forces(*m.geometry, m.pressure(d));
    const VectorXd dtilde = beam_deflection_profile(m.beam, intensities(*m.geometry, forces), m.section);
    const VectorXd r = dtilde - d;
    d += relaxation * r;
    if (r.norm() <= tol) break;
  }
  return d;
}

GeneralizedAlphaParams GeneralizedAlphaParams::from_rho_inf(double rho) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw std::invalid_argument("generalized-alpha: rho_inf must lie in [0,1]");
  GeneralizedAlphaParams p;
  p.alpha_m = (2.0 * rho - 1.0) / (rho + 1.0);
  p.alpha_f = rho / (rho + 1.0);
  p.gamma = 0.5 - p.alpha_m + p.alpha_f;
  p.beta = 0.25 * (1.0 - p.alpha_m + p.alpha_f) * (1.0 - p.alpha_m + p.alpha_f);
  return p;
}

Trajectory generalized_alpha_trajectory(const MatrixXd& M, const MatrixXd& C, const MatrixXd& K,
                                        const std::function<VectorXd(double)>& force, const IntegratorConfig& cfg,
                                        const VectorXd& u0, const VectorXd& v0) {
  if (!(cfg.dt > 0.0) || !(cfg.t_end >= 0.0)) throw std::invalid_argument("generalized-alpha: invalid time settings");
  const auto p = GeneralizedAlphaParams::from_rho_inf(cfg.rho_inf);
  const double dt = cfg.dt;
  const Eigen::PartialPivLU<MatrixXd> mass(M);
  const Eigen::FullPivLU<MatrixXd> effective((1.0 - p.alpha_m) * M + (1.0 - p.alpha_f) * p.gamma * dt * C +
                                             (1.0 - p.alpha_f) * p.beta * dt * dt * K);
  if (!effective.isInvertible()) throw std::runtime_error("generalized-alpha: singular effective stiffness");

  VectorXd u = u0, v = v0;
  VectorXd a = mass.solve(force(0.0) - C * v - K * u);
  const auto steps = static_cast<long>(std::llround(cfg.t_end / dt));

  Trajectory tr;
  tr.times.reserve(steps + 1);
  tr.times.push_back(0.0);
  tr.displacement.push_back(u);
  tr.velocity.push_back(v);
  for (long n = 0; n < steps; ++n) {
    const double t = static_cast<double>(n) * dt;
    const VectorXd u_pred = u + dt * v + dt * dt * (0.5 - p.beta) * a;
    const VectorXd v_pred = v + dt * (1.0 - p.gamma) * a;
    const VectorXd rhs = force(t + (1.0 - p.alpha_f) * dt) - p.alpha_m * M * a -
                         C * ((1.0 - p.alpha_f) * v_pred + p.alpha_f * v) -
                         K * ((1.0 - p.alpha_f) * u_pred + p.alpha_f * u);
    const VectorXd a_next = effective.solve(rhs);
    u = u_pred + dt * dt * p.beta * a_next;
    v = v_pred + dt * p.gamma * a_next;
    a = a_next;
    tr.times.push_back(static_cast<double>(n + 1) * dt);
    tr.displacement.push_back(u);
    tr.velocity.push_back(v);
  }
  return tr;
}

}  // namespace fsibo::testbed

#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Core>

#include "fsibo/coupling.hpp"

namespace fsibo::testbed {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// An evaluation that cannot produce an accepted output (invalid design, blow-up, no coupling convergence).
class EvaluationFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kBeamLength = 0.35;            // m
inline constexpr double kStiffnessIntegral = 1.96e6;   // Pa*m, integral of E along the beam
inline constexpr double kLinearSlopeBound = 31.9088e6; // Pa/m
inline constexpr double kBoxInside = 7.0e6;            // Pa
inline constexpr double kBoxOutside = 5.6e6;           // Pa

struct Linear {
  double slope;  // A, Pa/m
};
struct Uniform {
  double modulus;  // B, Pa
};
struct Box {
  double center;  // x_b, m
};
struct SailPlane {
  double angle_deg;  // theta
  double modulus;    // E, Pa
};

struct StiffnessProfile {
  std::variant<Linear, Uniform, Box, SailPlane> variant;
  double length = kBeamLength;

  /// Throws std::invalid_argument if the parameter leaves its admissible range.
  void validate() const;
};

/// Young's modulus (Pa) at position x (m) along the beam.
double stiffness_eval(const StiffnessProfile& profile, double x);

struct BeamSection {
  double second_moment = 5.333333333333333e-6;  // m^4 per unit depth (0.04 m thick)
  /// Floor applied to E before inverting, so that a zero modulus stays solvable.
  double min_modulus = 0.0;
};

/// Nodal deflections of a clamped-free Euler-Bernoulli beam under nodal load intensities q (N/m),
/// second-order finite differences on n = q.size() equally spaced nodes.
VectorXd beam_deflection_profile(const StiffnessProfile& profile, const VectorXd& q, const BeamSection& section);

/// Tip deflection (m) under a distributed load function q(x) sampled on n_grid nodes.
double beam_deflection(const StiffnessProfile& profile, const std::function<double(double)>& load, int n_grid,
                       const BeamSection& section = {});

struct PseudoFluidParams {
  double q0 = 500.0;     // N/m
  double beta = 20.0;    // 1/m
  double gamma = 1000.0; // N/m^2
};

/// q = q0 * shape / (1 + beta*w) - gamma*w, elementwise. shape defaults to 1.
VectorXd pseudo_fluid_load(const VectorXd& w, const PseudoFluidParams& params, const VectorXd& shape = {});

struct SailPlaneParams {
  double length = 0.4;           // m
  double inflow_speed = 5.0;     // m/s
  double density = 2000.0;       // kg/m^3
  double base_coefficient = 0.35;
  double slope_coefficient = 8.6;  // per unit sin(theta)
  double camber_gain = 3.0;        // effective angle added per unit atan(tip/length)
  double base_drag = 350.0;        // N
  double second_moment = 6.0e-4;   // m^4
  double pressure_length = 0.8;    // m, converts the load-field spread (N/m) to a pressure
  double beta = 20.0;
  double gamma = 1000.0;

  double dynamic_pressure() const { return 0.5 * density * inflow_speed * inflow_speed; }
};

enum class Family { Example1, Example2, Example3, SailPlane, Custom };

std::string to_string(Family f);
Family parse_family(const std::string& s);

struct ProblemSpec {
  Family family = Family::Example1;
  PseudoFluidParams fluid;
  double kappa = 5.0;  // 1/m, blockage sensitivity of the outlet velocity
  double v0 = 1.0;     // m/s
  BeamSection section;
  int structural_nodes = 33;
  int fluid_centers = 128;
  coupling::ConvergeOptions coupling;
  SailPlaneParams sail;
  /// Uniform stiffness floor (Pa) so that the B = 0 end of the Example-2 range is evaluable.
  double uniform_min_modulus = 0.05e6;

  bool operator==(const ProblemSpec& o) const;
};

struct EvaluationOutput {
  double objective = 0.0;
  std::vector<std::pair<std::string, double>> constraints;
  coupling::CouplingReport coupling_report;
  VectorXd deflection;  // converged nodal deflection

  double constraint(const std::string& name) const;
};

/// Builds the profile of the problem family from a design vector in user units
/// (Example1: A in MPa/m, Example2: B in MPa, Example3: x_b in m, SailPlane: theta in degrees and E in MPa).
StiffnessProfile profile_for(Family family, const VectorXd& x);

/// Converged coupled run of the reduced FSI model. Throws EvaluationFailure.
EvaluationOutput coupled_evaluate(const ProblemSpec& spec, const StiffnessProfile& profile);

/// Fixed point of the same coupled model by under-relaxed Picard iteration; used as a reference.
VectorXd picard_fixed_point(const ProblemSpec& spec, const StiffnessProfile& profile, double relaxation,
                            int max_iter, double tol);

struct IntegratorConfig {
  double rho_inf = 1.0;
  double dt = 0.01;
  double t_end = 1.0;
};

struct GeneralizedAlphaParams {
  double alpha_m, alpha_f, beta, gamma;
  static GeneralizedAlphaParams from_rho_inf(double rho_inf);
};

struct Trajectory {
  std::vector<double> times;
  std::vector<VectorXd> displacement;
  std::vector<VectorXd> velocity;
};

Trajectory generalized_alpha_trajectory(const MatrixXd& M, const MatrixXd& C, const MatrixXd& K,
                                        const std::function<VectorXd(double)>& force, const IntegratorConfig& cfg,
                                        const VectorXd& u0, const VectorXd& v0);

}  // namespace fsibo::testbed

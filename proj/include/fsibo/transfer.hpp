#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

namespace fsibo::transfer {

using Point = Eigen::Vector2d;

class TransferError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename Value>
struct FieldSample {
  std::vector<Point> positions;
  std::vector<Value> values;

  void check() const {
    if (positions.size() != values.size()) throw TransferError("field sample: positions and values differ in length");
  }
};

using ScalarField = FieldSample<double>;
using VectorField = FieldSample<Point>;

/// Inverse-distance weighted value at query. A coincident center returns its own value.
template <typename Value>
Value idw(const Point& query, std::span<const Point> centers, std::span<const Value> values, double alpha = 2.0) {
  if (centers.empty() || centers.size() != values.size()) throw TransferError("idw: needs matching, nonempty centers");
  if (!(alpha > 0.0)) throw TransferError("idw: exponent must be positive");
  double wsum = 0.0;
  Value acc = values[0] * 0.0;
  for (std::size_t i = 0; i < centers.size(); ++i) {
    const double dist = (query - centers[i]).norm();
    if (dist == 0.0) return values[i];
    const double w = 1.0 / std::pow(dist, alpha);
    wsum += w;
    acc = acc + w * values[i];
  }
  return acc / wsum;
}

template <typename Value>
Value idw(const Point& query, const FieldSample<Value>& centers, double alpha = 2.0) {
  centers.check();
  return idw<Value>(query, std::span<const Point>(centers.positions), std::span<const Value>(centers.values), alpha);
}

struct WeightedCenter {
  std::size_t center;
  double weight;  // normalized IDW weight, > 0
};

struct Projection {
  std::size_t segment;  // segment between structural nodes segment and segment+1
  double t;             // position along the segment in [0,1]
  double distance;
};

struct PairingOptions {
  std::size_t neighbours = 4;
  double alpha = 2.0;
  /// Re-pairing threshold as a fraction of the minimum fluid spacing.
  double stale_fraction = 0.1;
};

/// Node-to-center IDW stencils plus center-to-segment projections, built for a fixed reference geometry.
struct CouplingPairs {
  std::vector<std::vector<WeightedCenter>> node_stencils;
  std::vector<Projection> center_projections;
  std::vector<Point> structural_reference;
  std::vector<Point> fluid_reference;
  double min_fluid_spacing = 0.0;
  PairingOptions options;
};

/// structural_nodes is an ordered polyline; fluid_centers are unordered.
CouplingPairs pair_meshes(std::span<const Point> structural_nodes, std::span<const Point> fluid_centers,
                          const PairingOptions& opts = {});

/// True when any node or center moved beyond the stale threshold since pairing.
bool needs_repair(const CouplingPairs& pairs, std::span<const Point> structural_nodes,
                  std::span<const Point> fluid_centers);

/// Half the length of the segments adjacent to each structural node.
std::vector<double> tributary_lengths(std::span<const Point> structural_nodes);

/// Nodal point loads (N per unit depth): IDW pressure at the node times tributary length.
std::vector<double> map_loads(const ScalarField& fluid_pressure, const CouplingPairs& pairs);

/// Displacement of every fluid boundary point, linear along its projected structural segment.
std::vector<Point> map_motion(std::span<const Point> structural_displacements, const CouplingPairs& pairs);

}  // namespace fsibo::transfer

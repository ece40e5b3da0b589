#include "fsibo/transfer.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

namespace fsibo::transfer {

namespace {

Projection project_onto(const Point& q, const Point& a, const Point& b, std::size_t seg) {
  const Point ab = b - a;
  const double len2 = ab.squaredNorm();
  double t = len2 > 0.0 ? (q - a).dot(ab) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return {seg, t, (q - (a + t * ab)).norm()};
}

}  // namespace

CouplingPairs pair_meshes(std::span<const Point> structural_nodes, std::span<const Point> fluid_centers,
                          const PairingOptions& opts) {
  if (structural_nodes.empty() || fluid_centers.empty()) throw TransferError("pair_meshes: both point sets must be nonempty");
  if (opts.neighbours < 1) throw TransferError("pair_meshes: need at least one neighbour");

  CouplingPairs pairs;
  pairs.options = opts;
  pairs.structural_reference.assign(structural_nodes.begin(), structural_nodes.end());
  pairs.fluid_reference.assign(fluid_centers.begin(), fluid_centers.end());

  const std::size_t nc = fluid_centers.size();
  double min_spacing = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < nc; ++i) {
    for (std::size_t j = i + 1; j < nc; ++j) {
      const double dist = (fluid_centers[i] - fluid_centers[j]).norm();
      if (dist > 0.0) min_spacing = std::min(min_spacing, dist);
    }
  }
  if (nc > 1 && !std::isfinite(min_spacing)) throw TransferError("pair_meshes: degenerate geometry, all fluid centers coincide");
  pairs.min_fluid_spacing = std::isfinite(min_spacing) ? min_spacing : 0.0;

  const std::size_t k = std::min(opts.neighbours, nc);
  std::vector<std::size_t> order(nc);
  std::vector<double> dist(nc);
  pairs.node_stencils.reserve(structural_nodes.size());
  for (const auto& node : structural_nodes) {
    for (std::size_t j = 0; j < nc; ++j) dist[j] = (node - fluid_centers[j]).norm();
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) { return dist[a] < dist[b] || (dist[a] == dist[b] && a < b); });
    std::vector<WeightedCenter> stencil;
    if (dist[order[0]] == 0.0) {
      stencil.push_back({order[0], 1.0});
    } else {
      double wsum = 0.0;
      for (std::size_t i = 0; i < k; ++i) {
        const double w = 1.0 / std::pow(dist[order[i]], opts.alpha);
        stencil.push_back({order[i], w});
        wsum += w;
      }
      for (auto& s : stencil) s.weight /= wsum;
    }
    pairs.node_stencils.push_back(std::move(stencil));
  }

  pairs.center_projections.reserve(nc);
  for (const auto& c : fluid_centers) {
    if (structural_nodes.size() == 1) {
      pairs.center_projections.push_back({0, 0.0, (c - structural_nodes[0]).norm()});
      continue;
    }
    Projection best{0, 0.0, std::numeric_limits<double>::infinity()};
    for (std::size_t s = 0; s + 1 < structural_nodes.size(); ++s) {
      const Projection p = project_onto(c, structural_nodes[s], structural_nodes[s + 1], s);
      if (p.distance < best.distance) best = p;
    }
    pairs.center_projections.push_back(best);
  }
  return pairs;
}

bool needs_repair(const CouplingPairs& pairs, std::span<const Point> structural_nodes,
                  std::span<const Point> fluid_centers) {
  if (structural_nodes.size() != pairs.structural_reference.size() || fluid_centers.size() != pairs.fluid_reference.size()) {
    return true;
  }
  const double limit = pairs.options.stale_fraction * pairs.min_fluid_spacing;
  for (std::size_t i = 0; i < structural_nodes.size(); ++i) {
    if ((structural_nodes[i] - pairs.structural_reference[i]).norm() > limit) return true;
  }
  for (std::size_t i = 0; i < fluid_centers.size(); ++i) {
    if ((fluid_centers[i] - pairs.fluid_reference[i]).norm() > limit) return true;
  }
  return false;
}

std::vector<double> tributary_lengths(std::span<const Point> structural_nodes) {
  std::vector<double> trib(structural_nodes.size(), 0.0);
  for (std::size_t s = 0; s + 1 < structural_nodes.size(); ++s) {
    const double half = 0.5 * (structural_nodes[s + 1] - structural_nodes[s]).norm();
    trib[s] += half;
    trib[s + 1] += half;
  }
  return trib;
}

std::vector<double> map_loads(const ScalarField& fluid_pressure, const CouplingPairs& pairs) {
  fluid_pressure.check();
  if (fluid_pressure.values.size() != pairs.fluid_reference.size()) {
    throw TransferError("map_loads: pressure field does not match the paired fluid centers");
  }
  const double limit = pairs.options.stale_fraction * pairs.min_fluid_spacing;
  for (std::size_t i = 0; i < fluid_pressure.positions.size(); ++i) {
    if ((fluid_pressure.positions[i] - pairs.fluid_reference[i]).norm() > limit) {
      throw TransferError("map_loads: stale coupling pairs, fluid geometry moved beyond the re-pair threshold");
    }
  }
  const auto trib = tributary_lengths(pairs.structural_reference);
  std::vector<double> loads(pairs.node_stencils.size(), 0.0);
  for (std::size_t n = 0; n < loads.size(); ++n) {
    double p = 0.0;
    for (const auto& s : pairs.node_stencils[n]) p += s.weight * fluid_pressure.values[s.center];
    loads[n] = p * trib[n];
  }
  return loads;
}

std::vector<Point> map_motion(std::span<const Point> structural_displacements, const CouplingPairs& pairs) {
  if (structural_displacements.size() != pairs.structural_reference.size()) {
    throw TransferError("map_motion: displacement count does not match the structural nodes");
  }
  std::vector<Point> out(pairs.center_projections.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto& pr = pairs.center_projections[i];
    if (structural_displacements.size() == 1) {
      out[i] = structural_displacements[0];
      continue;
    }
    out[i] = (1.0 - pr.t) * structural_displacements[pr.segment] + pr.t * structural_displacements[pr.segment + 1];
  }
  return out;
}

}  // namespace fsibo::transfer

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "octoflow/vec3.hpp"

// Parametric synthetic bifurcating vessel trees: centerline segments with
// radii, lumen point sampling, wall-distance queries. All lengths in mm.
namespace octoflow::vasctree {

struct BranchSegment {
  Vec3 start;
  Vec3 end;
  double radius_start = 0.0;
  double radius_end = 0.0;
  std::int32_t parent = -1;  // -1 = inlet root

  Vec3 direction() const { return (end - start).normalized(); }
  double length() const { return (end - start).norm(); }
};

struct VesselTree {
  std::vector<BranchSegment> segments;
  std::int32_t inlet_segment = 0;
  std::vector<std::int32_t> outlet_segments;
  std::uint64_t generation_seed = 0;

  // children_of[i] lists segment ids whose parent is i, in id order.
  std::vector<std::vector<std::int32_t>> children_of() const;

  // Throws std::runtime_error on any structural invariant violation.
  void validate() const;
};

struct TreeGenConfig {
  double root_radius_min_mm = 1.62;
  double root_radius_max_mm = 1.98;
  double bif_angle_min_deg = 35.0;
  double bif_angle_max_deg = 135.0;
  int n_generations = 3;
  double radius_decay_exponent = 3.0;  // Murray's law
  double extension_factor = 5.0;
  double segment_length_over_radius = 8.0;

  void validate() const;
};

struct PointCloud {
  std::vector<Vec3> points;
  std::vector<double> wall_distance;
  std::vector<std::int32_t> owning_segment;  // empty when loaded from a cloud file

  std::size_t size() const { return points.size(); }
};

// Full binary tree with config.n_generations bifurcation generations.
// Pure function of (config, seed).
VesselTree generate_tree(const TreeGenConfig& config, std::uint64_t seed);

// Extends the inlet backwards and every outlet forwards along the local axis
// by extension_factor times the local diameter. Topology unchanged.
VesselTree add_flow_extensions(const VesselTree& tree, double extension_factor);

// Quasi-uniform stratified jittered samples strictly inside the lumen.
// Throws if target_spacing exceeds the smallest segment radius.
PointCloud sample_lumen_points(const VesselTree& tree, double target_spacing_mm,
                               std::uint64_t seed);

// Signed inside-distance to the lumen wall under the capped-frustum union
// model: positive inside, negative outside, zero on the wall.
double distance_to_wall(const VesselTree& tree, const Vec3& point);

// Per-segment clearance (radius at the nearest axis parameter minus distance
// to the axis) plus the clamped axis parameter; building block for
// distance_to_wall and the flow oracle.
struct SegmentProjection {
  double clearance;    // mm, positive inside this segment
  double axis_t;       // clamped parameter in [0, 1]
  double radial_dist;  // mm
  double radius;       // local radius at axis_t
};
SegmentProjection project_to_segment(const BranchSegment& seg, const Vec3& point);

// Text format: header `vasctree v1 seed=<n>`, one record per segment.
std::string tree_to_string(const VesselTree& tree);
VesselTree tree_from_string(const std::string& text);
void write_tree(const std::string& path, const VesselTree& tree);
VesselTree read_tree(const std::string& path);

}  // namespace octoflow::vasctree

#pragma once

#include <atomic>
#include <cstdint>
#include <vector>

#include "octoflow/vasctree.hpp"
#include "octoflow/vec3.hpp"

// Sparse octree over a point cloud: Morton-keyed sorted node lists per level,
// parent closure, neighbor lookups, and trilinear interpolation on the finest
// level. A cell is occupied iff it contains at least one cloud point.
namespace octoflow::oct {

constexpr std::int32_t kEmptyNode = -1;

struct OctreeConfig {
  int max_depth = 10;
  double finest_pitch_mm = 0.15;
};

// Per-channel values on the occupied nodes of one level, node-major.
struct FeatureField {
  int level = 0;
  std::int64_t channels = 0;
  std::vector<double> values;  // [node][channel]
};

// child_to_parent[i] = parent node index of child node i (one level up).
// Children of parent p are the contiguous index range
// [parent_child_offsets[p], parent_child_offsets[p+1]) at the child level.
struct LevelMap {
  std::vector<std::int32_t> child_to_parent;
  std::vector<std::int32_t> parent_child_offsets;
};

class Octree {
 public:
  static Octree build(const vasctree::PointCloud& cloud, const OctreeConfig& config);

  int max_depth() const { return max_depth_; }
  double finest_pitch() const { return pitch_; }
  double root_side() const { return root_side_; }
  const Vec3& origin() const { return origin_; }

  const std::vector<std::uint64_t>& keys(int level) const { return levels_[level]; }
  std::int64_t node_count(int level) const {
    return static_cast<std::int64_t>(levels_[level].size());
  }
  // Index of `key` in the sorted key list of `level`, or kEmptyNode.
  std::int32_t find(int level, std::uint64_t key) const;
  // Occupied neighbor at an integer cell offset; increments the lookup
  // counter. Returns kEmptyNode outside the domain or in unoccupied space.
  std::int32_t neighbor(int level, std::uint64_t key, int dx, int dy, int dz) const;

  const LevelMap& level_map(int child_level) const;  // child_level >= 1

  // Mean position of the cloud points inside each finest node.
  const std::vector<Vec3>& finest_mean_positions() const { return mean_positions_; }
  const std::vector<std::int32_t>& finest_point_counts() const { return point_counts_; }
  // Finest node index containing each cloud point, in cloud order.
  const std::vector<std::int32_t>& point_to_node() const { return point_to_node_; }

  // Trilinear interpolation support: the <=8 occupied finest nodes around x
  // and their weights, renormalized over the occupied corners (zero corners
  // dropped; count 0 means the whole neighborhood is unoccupied). Throws if x
  // lies outside the root cube.
  int gather_corners(const Vec3& x, std::int32_t idx_out[8], double w_out[8]) const;
  // Interpolates a finest-level field at x; zero vector where no corner is
  // occupied.
  std::vector<double> interpolate(const FeatureField& field, const Vec3& x) const;

  Vec3 cell_center(int level, std::uint64_t key) const;

  static std::uint64_t morton_encode(std::uint32_t i, std::uint32_t j, std::uint32_t k);
  static void morton_decode(std::uint64_t key, std::uint32_t& i, std::uint32_t& j,
                            std::uint32_t& k);

  static std::int64_t neighbor_lookup_count();
  static void reset_neighbor_lookup_count();

 private:
  int max_depth_ = 0;
  double pitch_ = 0.0;
  double root_side_ = 0.0;
  Vec3 origin_{};
  std::vector<std::vector<std::uint64_t>> levels_;    // [level][node] sorted keys
  std::vector<std::vector<std::uint8_t>> child_mask_; // [level][node], levels < max_depth
  std::vector<LevelMap> level_maps_;                  // [level], valid for level >= 1
  std::vector<Vec3> mean_positions_;
  std::vector<std::int32_t> point_counts_;
  std::vector<std::int32_t> point_to_node_;

 public:
  const std::vector<std::uint8_t>& child_masks(int level) const { return child_mask_[level]; }
};

// Averages per-point features (point-major, `channels` wide) over the points
// in each occupied finest cell.
FeatureField average_point_features(const Octree& tree, const double* point_features,
                                    std::int64_t channels);

}  // namespace octoflow::oct

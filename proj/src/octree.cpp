#include "octoflow/octree.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace octoflow::oct {

namespace {

std::atomic<std::int64_t> g_neighbor_lookups{0};

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

// Spreads the low 21 bits of x to every third bit.
std::uint64_t spread3(std::uint64_t x) {
  x &= 0x1fffff;
  x = (x | (x << 32)) & 0x1f00000000ffff;
  x = (x | (x << 16)) & 0x1f0000ff0000ff;
  x = (x | (x << 8)) & 0x100f00f00f00f00f;
  x = (x | (x << 4)) & 0x10c30c30c30c30c3;
  x = (x | (x << 2)) & 0x1249249249249249;
  return x;
}

std::uint32_t compact3(std::uint64_t x) {
  x &= 0x1249249249249249;
  x = (x ^ (x >> 2)) & 0x10c30c30c30c30c3;
  x = (x ^ (x >> 4)) & 0x100f00f00f00f00f;
  x = (x ^ (x >> 8)) & 0x1f0000ff0000ff;
  x = (x ^ (x >> 16)) & 0x1f00000000ffff;
  x = (x ^ (x >> 32)) & 0x1fffff;
  return static_cast<std::uint32_t>(x);
}

}  // namespace

std::uint64_t Octree::morton_encode(std::uint32_t i, std::uint32_t j, std::uint32_t k) {
  return spread3(i) | (spread3(j) << 1) | (spread3(k) << 2);
}

void Octree::morton_decode(std::uint64_t key, std::uint32_t& i, std::uint32_t& j,
                           std::uint32_t& k) {
  i = compact3(key);
  j = compact3(key >> 1);
  k = compact3(key >> 2);
}

std::int64_t Octree::neighbor_lookup_count() {
  return g_neighbor_lookups.load(std::memory_order_relaxed);
}

void Octree::reset_neighbor_lookup_count() {
  g_neighbor_lookups.store(0, std::memory_order_relaxed);
}

Octree Octree::build(const vasctree::PointCloud& cloud, const OctreeConfig& config) {
  if (config.max_depth < 1 || config.max_depth > 20)
    fail("octree: max_depth must be in [1, 20]");
  if (!(config.finest_pitch_mm > 0.0)) fail("octree: finest pitch must be > 0");
  if (cloud.size() == 0) fail("octree: empty point cloud");

  Octree tree;
  tree.max_depth_ = config.max_depth;
  tree.pitch_ = config.finest_pitch_mm;
  tree.root_side_ = config.finest_pitch_mm * static_cast<double>(1u << config.max_depth);

  Vec3 centroid{0.0, 0.0, 0.0};
  for (const Vec3& p : cloud.points) centroid = centroid + p;
  centroid = centroid * (1.0 / static_cast<double>(cloud.size()));
  tree.origin_ = centroid - Vec3{0.5, 0.5, 0.5} * tree.root_side_;

  const std::uint32_t grid = 1u << config.max_depth;
  std::vector<std::uint64_t> point_keys(cloud.size());
  for (std::size_t n = 0; n < cloud.size(); ++n) {
    Vec3 rel = (cloud.points[n] - tree.origin_) * (1.0 / tree.pitch_);
    double cx = std::floor(rel.x), cy = std::floor(rel.y), cz = std::floor(rel.z);
    if (cx < 0.0 || cy < 0.0 || cz < 0.0 || cx >= grid || cy >= grid || cz >= grid)
      fail("octree: geometry exceeds octree domain");
    point_keys[n] = morton_encode(static_cast<std::uint32_t>(cx),
                                  static_cast<std::uint32_t>(cy),
                                  static_cast<std::uint32_t>(cz));
  }

  tree.levels_.resize(static_cast<std::size_t>(config.max_depth) + 1);
  std::vector<std::uint64_t>& finest = tree.levels_[static_cast<std::size_t>(config.max_depth)];
  finest = point_keys;
  std::sort(finest.begin(), finest.end());
  finest.erase(std::unique(finest.begin(), finest.end()), finest.end());

  // Right-shifting sorted keys keeps them sorted, so each coarser level is a
  // dedup of the level below: occupied <=> contains at least one point.
  for (int level = config.max_depth - 1; level >= 0; --level) {
    const std::vector<std::uint64_t>& below = tree.levels_[static_cast<std::size_t>(level) + 1];
    std::vector<std::uint64_t>& here = tree.levels_[static_cast<std::size_t>(level)];
    here.reserve(below.size());
    for (std::uint64_t key : below) {
      std::uint64_t parent = key >> 3;
      if (here.empty() || here.back() != parent) here.push_back(parent);
    }
  }
  if (tree.levels_[0].size() != 1) fail("octree: internal error, root level not a single node");

  tree.child_mask_.resize(static_cast<std::size_t>(config.max_depth));
  tree.level_maps_.resize(static_cast<std::size_t>(config.max_depth) + 1);
  for (int level = 1; level <= config.max_depth; ++level) {
    const std::vector<std::uint64_t>& children = tree.levels_[static_cast<std::size_t>(level)];
    const std::vector<std::uint64_t>& parents = tree.levels_[static_cast<std::size_t>(level) - 1];
    LevelMap& map = tree.level_maps_[static_cast<std::size_t>(level)];
    std::vector<std::uint8_t>& masks = tree.child_mask_[static_cast<std::size_t>(level) - 1];
    masks.assign(parents.size(), 0);
    map.child_to_parent.resize(children.size());
    map.parent_child_offsets.assign(parents.size() + 1, 0);
    std::size_t pi = 0;
    for (std::size_t ci = 0; ci < children.size(); ++ci) {
      std::uint64_t parent_key = children[ci] >> 3;
      while (parents[pi] != parent_key) ++pi;  // both sorted, single sweep
      map.child_to_parent[ci] = static_cast<std::int32_t>(pi);
      masks[pi] |= static_cast<std::uint8_t>(1u << (children[ci] & 7u));
      ++map.parent_child_offsets[pi + 1];
    }
    for (std::size_t p = 0; p < parents.size(); ++p)
      map.parent_child_offsets[p + 1] += map.parent_child_offsets[p];
  }

  tree.point_to_node_.resize(cloud.size());
  tree.mean_positions_.assign(finest.size(), Vec3{0.0, 0.0, 0.0});
  tree.point_counts_.assign(finest.size(), 0);
  for (std::size_t n = 0; n < cloud.size(); ++n) {
    auto it = std::lower_bound(finest.begin(), finest.end(), point_keys[n]);
    std::int32_t idx = static_cast<std::int32_t>(it - finest.begin());
    tree.point_to_node_[n] = idx;
    tree.mean_positions_[static_cast<std::size_t>(idx)] =
        tree.mean_positions_[static_cast<std::size_t>(idx)] + cloud.points[n];
    ++tree.point_counts_[static_cast<std::size_t>(idx)];
  }
  for (std::size_t i = 0; i < finest.size(); ++i)
    tree.mean_positions_[i] = tree.mean_positions_[i] *
                              (1.0 / static_cast<double>(tree.point_counts_[i]));
  return tree;
}

std::int32_t Octree::find(int level, std::uint64_t key) const {
  const std::vector<std::uint64_t>& keys = levels_[static_cast<std::size_t>(level)];
  auto it = std::lower_bound(keys.begin(), keys.end(), key);
  if (it == keys.end() || *it != key) return kEmptyNode;
  return static_cast<std::int32_t>(it - keys.begin());
}

std::int32_t Octree::neighbor(int level, std::uint64_t key, int dx, int dy, int dz) const {
  g_neighbor_lookups.fetch_add(1, std::memory_order_relaxed);
  std::uint32_t i, j, k;
  morton_decode(key, i, j, k);
  std::int64_t ni = static_cast<std::int64_t>(i) + dx;
  std::int64_t nj = static_cast<std::int64_t>(j) + dy;
  std::int64_t nk = static_cast<std::int64_t>(k) + dz;
  std::int64_t side = std::int64_t(1) << level;
  if (ni < 0 || nj < 0 || nk < 0 || ni >= side || nj >= side || nk >= side) return kEmptyNode;
  return find(level, morton_encode(static_cast<std::uint32_t>(ni),
                                   static_cast<std::uint32_t>(nj),
                                   static_cast<std::uint32_t>(nk)));
}

const LevelMap& Octree::level_map(int child_level) const {
  if (child_level < 1 || child_level > max_depth_)
    fail("octree: level map requires a child level in [1, max_depth]");
  return level_maps_[static_cast<std::size_t>(child_level)];
}

Vec3 Octree::cell_center(int level, std::uint64_t key) const {
  std::uint32_t i, j, k;
  morton_decode(key, i, j, k);
  double side = pitch_ * static_cast<double>(1u << (max_depth_ - level));
  return origin_ + Vec3{(i + 0.5) * side, (j + 0.5) * side, (k + 0.5) * side};
}

int Octree::gather_corners(const Vec3& x, std::int32_t idx_out[8], double w_out[8]) const {
  Vec3 rel = (x - origin_) * (1.0 / pitch_);
  double grid = static_cast<double>(1u << max_depth_);
  if (rel.x < 0.0 || rel.y < 0.0 || rel.z < 0.0 || rel.x >= grid || rel.y >= grid ||
      rel.z >= grid)
    fail("interpolation: query point outside the octree domain");

  // Corner lattice of cell centers: base cell holds the center at or below x.
  double bx = std::floor(rel.x - 0.5), by = std::floor(rel.y - 0.5),
         bz = std::floor(rel.z - 0.5);
  double fx = rel.x - 0.5 - bx, fy = rel.y - 0.5 - by, fz = rel.z - 0.5 - bz;

  int count = 0;
  double total = 0.0;
  for (int dz = 0; dz < 2; ++dz) {
    for (int dy = 0; dy < 2; ++dy) {
      for (int dx = 0; dx < 2; ++dx) {
        double cx = bx + dx, cy = by + dy, cz = bz + dz;
        if (cx < 0.0 || cy < 0.0 || cz < 0.0 || cx >= grid || cy >= grid || cz >= grid)
          continue;
        std::int32_t idx = find(max_depth_, morton_encode(static_cast<std::uint32_t>(cx),
                                                          static_cast<std::uint32_t>(cy),
                                                          static_cast<std::uint32_t>(cz)));
        if (idx == kEmptyNode) continue;
        double w = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy) * (dz ? fz : 1.0 - fz);
        if (w == 0.0) continue;
        idx_out[count] = idx;
        w_out[count] = w;
        total += w;
        ++count;
      }
    }
  }
  // Renormalize over the occupied corners so weights stay a partition of unity.
  if (count > 0 && total > 0.0)
    for (int c = 0; c < count; ++c) w_out[c] /= total;
  return count;
}

std::vector<double> Octree::interpolate(const FeatureField& field, const Vec3& x) const {
  if (field.level != max_depth_) fail("interpolation: field must live on the finest level");
  if (static_cast<std::int64_t>(field.values.size()) !=
      node_count(max_depth_) * field.channels)
    fail("interpolation: field size does not match octree");
  std::int32_t idx[8];
  double w[8];
  int count = gather_corners(x, idx, w);
  std::vector<double> out(static_cast<std::size_t>(field.channels), 0.0);
  for (int c = 0; c < count; ++c) {
    const double* row = field.values.data() + static_cast<std::int64_t>(idx[c]) * field.channels;
    for (std::int64_t ch = 0; ch < field.channels; ++ch) out[static_cast<std::size_t>(ch)] += w[c] * row[ch];
  }
  return out;
}

FeatureField average_point_features(const Octree& tree, const double* point_features,
                                    std::int64_t channels) {
  FeatureField field;
  field.level = tree.max_depth();
  field.channels = channels;
  std::int64_t n_nodes = tree.node_count(tree.max_depth());
  field.values.assign(static_cast<std::size_t>(n_nodes * channels), 0.0);
  const std::vector<std::int32_t>& owner = tree.point_to_node();
  for (std::size_t p = 0; p < owner.size(); ++p) {
    double* row = field.values.data() + static_cast<std::int64_t>(owner[p]) * channels;
    const double* src = point_features + static_cast<std::int64_t>(p) * channels;
    for (std::int64_t ch = 0; ch < channels; ++ch) row[ch] += src[ch];
  }
  const std::vector<std::int32_t>& counts = tree.finest_point_counts();
  for (std::int64_t n = 0; n < n_nodes; ++n) {
    double inv = 1.0 / static_cast<double>(counts[static_cast<std::size_t>(n)]);
    double* row = field.values.data() + n * channels;
    for (std::int64_t ch = 0; ch < channels; ++ch) row[ch] *= inv;
  }
  return field;
}

}  // namespace octoflow::oct

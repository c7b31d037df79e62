#include "octoflow/vasctree.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "octoflow/rng.hpp"

namespace octoflow::vasctree {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kDirectionWobbleDeg = 20.0;  // parent-direction jitter per bifurcation
constexpr double kForwardBias = 0.3;          // keeps daughter bisector near parent axis

// Deterministic orthonormal pair completing unit vector v to a right-handed basis.
void make_basis(const Vec3& v, Vec3& e1, Vec3& e2) {
  Vec3 h = std::abs(v.x) < 0.9 ? Vec3{1.0, 0.0, 0.0} : Vec3{0.0, 1.0, 0.0};
  e1 = cross(v, h).normalized();
  e2 = cross(v, e1);
}

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

}  // namespace

void TreeGenConfig::validate() const {
  if (n_generations < 0) fail("tree config: n_generations must be >= 0");
  if (root_radius_min_mm <= 0.0 || root_radius_max_mm < root_radius_min_mm)
    fail("tree config: root radius range invalid");
  if (bif_angle_min_deg <= 0.0 || bif_angle_max_deg < bif_angle_min_deg ||
      bif_angle_max_deg >= 180.0)
    fail("tree config: bifurcation angle range invalid");
  if (radius_decay_exponent <= 0.0) fail("tree config: radius_decay_exponent must be > 0");
  if (extension_factor < 0.0) fail("tree config: extension_factor must be >= 0");
  if (segment_length_over_radius <= 0.0)
    fail("tree config: segment_length_over_radius must be > 0");
}

std::vector<std::vector<std::int32_t>> VesselTree::children_of() const {
  std::vector<std::vector<std::int32_t>> out(segments.size());
  for (std::size_t i = 0; i < segments.size(); ++i) {
    std::int32_t p = segments[i].parent;
    if (p >= 0) out[static_cast<std::size_t>(p)].push_back(static_cast<std::int32_t>(i));
  }
  return out;
}

void VesselTree::validate() const {
  if (segments.empty()) fail("tree: no segments");
  int roots = 0;
  for (std::size_t i = 0; i < segments.size(); ++i) {
    const BranchSegment& s = segments[i];
    if (s.parent < -1 || s.parent >= static_cast<std::int32_t>(segments.size()) ||
        s.parent == static_cast<std::int32_t>(i))
      fail("tree: segment " + std::to_string(i) + " has invalid parent");
    if (s.parent == -1) ++roots;
    if (!(s.radius_start > 0.0) || !(s.radius_end > 0.0))
      fail("tree: segment " + std::to_string(i) + " has non-positive radius");
    if (!(s.length() > 0.0)) fail("tree: segment " + std::to_string(i) + " has zero length");
    if (s.parent >= 0) {
      const BranchSegment& p = segments[static_cast<std::size_t>(s.parent)];
      if ((s.start - p.end).norm() > 1e-9)
        fail("tree: segment " + std::to_string(i) + " detached from parent end");
      if (s.radius_start > p.radius_end + 1e-12)
        fail("tree: segment " + std::to_string(i) + " wider than its parent at the junction");
    }
  }
  if (roots != 1) fail("tree: expected exactly one root segment, found " + std::to_string(roots));

  std::vector<std::vector<std::int32_t>> kids = children_of();
  std::vector<std::int32_t> leaves;
  for (std::size_t i = 0; i < segments.size(); ++i)
    if (kids[i].empty()) leaves.push_back(static_cast<std::int32_t>(i));
  if (leaves != outlet_segments) fail("tree: outlet list does not match leaf segments");
  if (segments[static_cast<std::size_t>(inlet_segment)].parent != -1)
    fail("tree: inlet segment is not the root");
}

VesselTree generate_tree(const TreeGenConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);

  VesselTree tree;
  tree.generation_seed = seed;

  double root_radius = uniform(rng, config.root_radius_min_mm, config.root_radius_max_mm);
  BranchSegment root;
  root.parent = -1;
  root.start = {0.0, 0.0, 0.0};
  root.end = {0.0, 0.0, config.segment_length_over_radius * root_radius};
  root.radius_start = root.radius_end = root_radius;
  tree.segments.push_back(root);

  double decay = std::pow(2.0, -1.0 / config.radius_decay_exponent);

  // Breadth-first so segment ids and RNG draws are generation-ordered.
  std::vector<std::int32_t> frontier = {0};
  for (int gen = 0; gen < config.n_generations; ++gen) {
    std::vector<std::int32_t> next;
    for (std::int32_t parent_id : frontier) {
      const BranchSegment parent = tree.segments[static_cast<std::size_t>(parent_id)];
      Vec3 dir = parent.direction();

      double theta = uniform(rng, config.bif_angle_min_deg, config.bif_angle_max_deg) *
                     kPi / 180.0;
      double wobble = uniform(rng, 0.0, kDirectionWobbleDeg) * kPi / 180.0;
      double wobble_az = uniform(rng, 0.0, 2.0 * kPi);
      double plane_az = uniform(rng, 0.0, 2.0 * kPi);

      Vec3 e1, e2;
      make_basis(dir, e1, e2);
      Vec3 wobbled = dir * std::cos(wobble) +
                     (e1 * std::cos(wobble_az) + e2 * std::sin(wobble_az)) * std::sin(wobble);
      Vec3 bisector = (wobbled + dir * kForwardBias).normalized();

      // Unit normal to the bisector spanning the branching plane: the two
      // daughters sit at exactly +/- theta/2, so their mutual angle is theta.
      Vec3 f1, f2;
      make_basis(bisector, f1, f2);
      Vec3 m = f1 * std::cos(plane_az) + f2 * std::sin(plane_az);

      double child_radius = parent.radius_end * decay;
      double child_length = config.segment_length_over_radius * child_radius;
      for (int side = 0; side < 2; ++side) {
        double sign = side == 0 ? 1.0 : -1.0;
        Vec3 cdir = bisector * std::cos(theta / 2.0) + m * (sign * std::sin(theta / 2.0));
        BranchSegment child;
        child.parent = parent_id;
        child.start = parent.end;
        child.end = parent.end + cdir * child_length;
        child.radius_start = child.radius_end = child_radius;
        next.push_back(static_cast<std::int32_t>(tree.segments.size()));
        tree.segments.push_back(child);
      }
    }
    frontier = std::move(next);
  }

  tree.inlet_segment = 0;
  tree.outlet_segments = frontier.empty() ? std::vector<std::int32_t>{0} : frontier;
  tree.validate();
  return tree;
}

VesselTree add_flow_extensions(const VesselTree& tree, double extension_factor) {
  if (extension_factor < 0.0) fail("flow extensions: factor must be >= 0");
  VesselTree out = tree;
  BranchSegment& inlet = out.segments[static_cast<std::size_t>(out.inlet_segment)];
  inlet.start = inlet.start - inlet.direction() * (extension_factor * 2.0 * inlet.radius_start);
  for (std::int32_t id : out.outlet_segments) {
    BranchSegment& seg = out.segments[static_cast<std::size_t>(id)];
    seg.end = seg.end + seg.direction() * (extension_factor * 2.0 * seg.radius_end);
  }
  out.validate();
  return out;
}

SegmentProjection project_to_segment(const BranchSegment& seg, const Vec3& point) {
  Vec3 axis = seg.end - seg.start;
  double len2 = dot(axis, axis);
  double t = len2 > 0.0 ? dot(point - seg.start, axis) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  Vec3 closest = seg.start + axis * t;
  SegmentProjection proj;
  proj.axis_t = t;
  proj.radial_dist = (point - closest).norm();
  proj.radius = seg.radius_start + t * (seg.radius_end - seg.radius_start);
  proj.clearance = proj.radius - proj.radial_dist;
  return proj;
}

double distance_to_wall(const VesselTree& tree, const Vec3& point) {
  double best = -std::numeric_limits<double>::infinity();
  for (const BranchSegment& seg : tree.segments)
    best = std::max(best, project_to_segment(seg, point).clearance);
  return best;
}

PointCloud sample_lumen_points(const VesselTree& tree, double target_spacing_mm,
                               std::uint64_t seed) {
  tree.validate();
  if (!(target_spacing_mm > 0.0)) fail("lumen sampling: spacing must be > 0");
  double min_radius = std::numeric_limits<double>::infinity();
  for (const BranchSegment& seg : tree.segments)
    min_radius = std::min({min_radius, seg.radius_start, seg.radius_end});
  if (target_spacing_mm > min_radius)
    fail("lumen sampling: spacing exceeds minimal lumen size");

  PointCloud cloud;
  for (std::size_t id = 0; id < tree.segments.size(); ++id) {
    const BranchSegment& seg = tree.segments[id];
    std::mt19937_64 rng(derive_seed(seed, id));

    Vec3 dir = seg.direction();
    Vec3 e1, e2;
    make_basis(dir, e1, e2);
    double length = seg.length();
    double step = target_spacing_mm;
    int n_axial = std::max(1, static_cast<int>(std::llround(length / step)));
    double axial_step = length / n_axial;

    for (int ia = 0; ia < n_axial; ++ia) {
      double a = (ia + uniform01(rng)) * axial_step;
      double t = a / length;
      double radius = seg.radius_start + t * (seg.radius_end - seg.radius_start);
      int half_cells = static_cast<int>(std::ceil(radius / step));
      for (int iy = -half_cells; iy <= half_cells; ++iy) {
        for (int ix = -half_cells; ix <= half_cells; ++ix) {
          // Draw both jitters before the accept test so the RNG stream is a
          // pure function of the geometry grid.
          double x = (ix + uniform(rng, -0.5, 0.5)) * step;
          double y = (iy + uniform(rng, -0.5, 0.5)) * step;
          if (radius - std::hypot(x, y) <= 1e-9) continue;
          cloud.points.push_back(seg.start + dir * a + e1 * x + e2 * y);
          cloud.owning_segment.push_back(static_cast<std::int32_t>(id));
        }
      }
    }
  }

  cloud.wall_distance.resize(cloud.points.size());
  for (std::size_t i = 0; i < cloud.points.size(); ++i)
    cloud.wall_distance[i] = distance_to_wall(tree, cloud.points[i]);
  return cloud;
}

namespace {

std::string fmt_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

std::string fmt_vec(const Vec3& v) {
  return fmt_real(v.x) + "," + fmt_real(v.y) + "," + fmt_real(v.z);
}

Vec3 parse_vec(const std::string& s, const std::string& context) {
  Vec3 v;
  char tail;
  if (std::sscanf(s.c_str(), "%lf,%lf,%lf%c", &v.x, &v.y, &v.z, &tail) != 3)
    fail("tree file: malformed triplet '" + s + "' in " + context);
  return v;
}

// Splits `tok` of the form key=value, checking the key.
std::string expect_kv(const std::string& tok, const std::string& key,
                      const std::string& context) {
  std::string prefix = key + "=";
  if (tok.rfind(prefix, 0) != 0)
    fail("tree file: expected '" + key + "=...' in " + context + ", got '" + tok + "'");
  return tok.substr(prefix.size());
}

}  // namespace

std::string tree_to_string(const VesselTree& tree) {
  std::ostringstream os;
  os << "vasctree v1 seed=" << tree.generation_seed << "\n";
  for (std::size_t i = 0; i < tree.segments.size(); ++i) {
    const BranchSegment& s = tree.segments[i];
    os << "seg " << i << " parent=" << s.parent << " start=" << fmt_vec(s.start)
       << " end=" << fmt_vec(s.end) << " r0=" << fmt_real(s.radius_start)
       << " r1=" << fmt_real(s.radius_end) << "\n";
  }
  return os.str();
}

VesselTree tree_from_string(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) fail("tree file: empty");
  std::istringstream hs(line);
  std::string magic, version, seed_tok;
  hs >> magic >> version >> seed_tok;
  if (magic != "vasctree" || version != "v1") fail("tree file: bad header '" + line + "'");
  VesselTree tree;
  tree.generation_seed = std::stoull(expect_kv(seed_tok, "seed", "header"));

  std::vector<BranchSegment> segs;
  std::string row;
  std::size_t expected_id = 0;
  while (std::getline(is, row)) {
    if (row.empty()) continue;
    std::istringstream rs(row);
    std::string tag, id_tok, parent_tok, start_tok, end_tok, r0_tok, r1_tok;
    rs >> tag >> id_tok >> parent_tok >> start_tok >> end_tok >> r0_tok >> r1_tok;
    if (tag != "seg") fail("tree file: expected 'seg' record, got '" + row + "'");
    std::string ctx = "segment " + id_tok;
    if (std::stoull(id_tok) != expected_id)
      fail("tree file: segment ids must be consecutive from 0, got " + id_tok);
    BranchSegment s;
    s.parent = static_cast<std::int32_t>(std::stol(expect_kv(parent_tok, "parent", ctx)));
    s.start = parse_vec(expect_kv(start_tok, "start", ctx), ctx);
    s.end = parse_vec(expect_kv(end_tok, "end", ctx), ctx);
    s.radius_start = std::stod(expect_kv(r0_tok, "r0", ctx));
    s.radius_end = std::stod(expect_kv(r1_tok, "r1", ctx));
    segs.push_back(s);
    ++expected_id;
  }
  tree.segments = std::move(segs);

  tree.inlet_segment = -1;
  std::vector<std::vector<std::int32_t>> kids = tree.children_of();
  for (std::size_t i = 0; i < tree.segments.size(); ++i) {
    if (tree.segments[i].parent == -1) tree.inlet_segment = static_cast<std::int32_t>(i);
    if (kids[i].empty()) tree.outlet_segments.push_back(static_cast<std::int32_t>(i));
  }
  tree.validate();
  return tree;
}

void write_tree(const std::string& path, const VesselTree& tree) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail("cannot open for writing: " + path);
  f << tree_to_string(tree);
  if (!f) fail("write failed: " + path);
}

VesselTree read_tree(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail("cannot open tree file: " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return tree_from_string(os.str());
}

}  // namespace octoflow::vasctree

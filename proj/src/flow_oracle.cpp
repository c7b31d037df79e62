#include "octoflow/flow_oracle.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace octoflow::oracle {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kFramesPerSecond = 30.0;

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

// Parabolic axial velocity (m/s) of one segment at a projected point, clamped
// to zero outside the local radius. q in mL/s, geometry in mm.
double profile_speed(const vasctree::SegmentProjection& proj, double q_mls) {
  double ratio = proj.radial_dist / proj.radius;
  double falloff = std::max(0.0, 1.0 - ratio * ratio);
  return 2.0 * q_mls / (kPi * proj.radius * proj.radius) * falloff;
}

}  // namespace

double segment_flow(const vasctree::VesselTree& tree,
                    const hemo::OutletFlowAssignment& assignment, std::int32_t segment_id) {
  if (segment_id < 0 || segment_id >= static_cast<std::int32_t>(tree.segments.size()))
    fail("segment_flow: segment id out of range");
  // A segment carries everything that leaves through the outlets below it.
  double total = 0.0;
  for (const auto& [outlet, fraction] : assignment.fractions) {
    std::int32_t cur = outlet;
    while (cur != -1) {
      if (cur == segment_id) {
        total += fraction;
        break;
      }
      cur = tree.segments[static_cast<std::size_t>(cur)].parent;
    }
  }
  return total;
}

Vec3 poiseuille_velocity(const vasctree::VesselTree& tree,
                         const hemo::OutletFlowAssignment& assignment, double q_total_mls,
                         const Vec3& point) {
  // Owner = segment with the largest inside-clearance at the point.
  std::int32_t owner = -1;
  vasctree::SegmentProjection owner_proj{};
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < tree.segments.size(); ++i) {
    vasctree::SegmentProjection proj = vasctree::project_to_segment(tree.segments[i], point);
    if (proj.clearance > best) {
      best = proj.clearance;
      owner = static_cast<std::int32_t>(i);
      owner_proj = proj;
    }
  }
  if (best < -1e-12) fail("poiseuille velocity: point lies outside the lumen");

  const vasctree::BranchSegment& seg = tree.segments[static_cast<std::size_t>(owner)];
  double q_own = segment_flow(tree, assignment, owner) * q_total_mls;
  Vec3 velocity = seg.direction() * profile_speed(owner_proj, q_own);

  // Within one local radius downstream of a junction, fade in from the parent
  // profile so the field stays continuous across the bifurcation apex.
  double axial_pos = owner_proj.axis_t * seg.length();
  double blend_span = seg.radius_start;
  if (seg.parent >= 0 && axial_pos < blend_span) {
    // Extrude the parent vessel past its end as a cylinder of its end radius:
    // measure the radial distance to the parent's axis line, not to the
    // clamped endpoint. A collinear same-radius continuation then blends into
    // exactly the plain profile instead of decaying with the axial overshoot.
    const vasctree::BranchSegment& par = tree.segments[static_cast<std::size_t>(seg.parent)];
    Vec3 par_axis = par.direction();
    Vec3 rel = point - par.start;
    vasctree::SegmentProjection par_proj{};
    par_proj.radial_dist = (rel - par_axis * dot(rel, par_axis)).norm();
    par_proj.radius = par.radius_end;
    double q_par = segment_flow(tree, assignment, seg.parent) * q_total_mls;
    Vec3 parent_velocity = par_axis * profile_speed(par_proj, q_par);
    double lambda = axial_pos / blend_span;
    velocity = parent_velocity * (1.0 - lambda) + velocity * lambda;
  }
  return velocity;
}

std::vector<Vec3> unit_flow_shape(const vasctree::VesselTree& tree,
                                  const hemo::OutletFlowAssignment& assignment,
                                  const vasctree::PointCloud& cloud) {
  std::vector<Vec3> shape(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i)
    shape[i] = poiseuille_velocity(tree, assignment, 1.0, cloud.points[i]);
  return shape;
}

SimulationRecord generate_record(const vasctree::VesselTree& tree,
                                 const vasctree::PointCloud& cloud,
                                 const hemo::InflowWaveform& waveform,
                                 const hemo::InjectionParams& injection,
                                 const hemo::PhysicsConstants& constants, int n_cycles,
                                 double split_exponent) {
  if (n_cycles < 1) fail("record generation: n_cycles must be >= 1");
  if (cloud.size() == 0) fail("record generation: empty point cloud");
  waveform.validate();

  hemo::OutletFlowAssignment assignment = hemo::flow_split(tree, split_exponent);
  std::vector<Vec3> shape = unit_flow_shape(tree, assignment, cloud);

  SimulationRecord record;
  record.n_points = static_cast<std::int64_t>(cloud.size());
  record.frame_dt_ms = 1000.0 / kFramesPerSecond;
  double span_ms = n_cycles * waveform.cycle_length_ms;
  std::int64_t n_frames =
      static_cast<std::int64_t>(std::floor(span_ms / record.frame_dt_ms)) + 1;

  record.times_ms.resize(static_cast<std::size_t>(n_frames));
  record.velocities.resize(static_cast<std::size_t>(n_frames * record.n_points * 3));
  for (std::int64_t f = 0; f < n_frames; ++f) {
    double t = static_cast<double>(f) * record.frame_dt_ms;
    record.times_ms[static_cast<std::size_t>(f)] = t;
    double q_total = hemo::total_flow(t, waveform, injection, constants);
    double* frame = record.velocities.data() + f * record.n_points * 3;
    for (std::int64_t p = 0; p < record.n_points; ++p) {
      const Vec3& s = shape[static_cast<std::size_t>(p)];
      frame[p * 3 + 0] = q_total * s.x;
      frame[p * 3 + 1] = q_total * s.y;
      frame[p * 3 + 2] = q_total * s.z;
    }
  }
  return record;
}

namespace {

void write_exact(std::ofstream& f, const void* data, std::size_t bytes,
                 const std::string& path) {
  f.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!f) fail("write failed: " + path);
}

void read_exact(std::ifstream& f, void* data, std::size_t bytes, const std::string& path) {
  f.read(static_cast<char*>(data), static_cast<std::streamsize>(bytes));
  if (f.gcount() != static_cast<std::streamsize>(bytes))
    fail("truncated file: " + path);
}

void check_magic(std::ifstream& f, const char* magic, std::size_t len,
                 const std::string& path) {
  std::vector<char> buf(len);
  read_exact(f, buf.data(), len, path);
  if (std::memcmp(buf.data(), magic, len) != 0)
    fail("bad magic in " + path + " (expected " + magic + ")");
}

}  // namespace

void write_cloud(const std::string& path, const vasctree::PointCloud& cloud) {
  if (cloud.wall_distance.size() != cloud.size())
    fail("cloud write: wall distances missing");
  std::ofstream f(path, std::ios::binary);
  if (!f) fail("cannot open for writing: " + path);
  write_exact(f, "OCLD1", 5, path);
  std::uint32_t n = static_cast<std::uint32_t>(cloud.size());
  write_exact(f, &n, 4, path);
  std::vector<float> row(4);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    row[0] = static_cast<float>(cloud.points[i].x);
    row[1] = static_cast<float>(cloud.points[i].y);
    row[2] = static_cast<float>(cloud.points[i].z);
    row[3] = static_cast<float>(cloud.wall_distance[i]);
    write_exact(f, row.data(), 16, path);
  }
}

vasctree::PointCloud read_cloud(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail("cannot open cloud file: " + path);
  check_magic(f, "OCLD1", 5, path);
  std::uint32_t n = 0;
  read_exact(f, &n, 4, path);
  vasctree::PointCloud cloud;
  cloud.points.resize(n);
  cloud.wall_distance.resize(n);
  float row[4];
  for (std::uint32_t i = 0; i < n; ++i) {
    read_exact(f, row, 16, path);
    cloud.points[i] = {row[0], row[1], row[2]};
    cloud.wall_distance[i] = row[3];
  }
  return cloud;
}

void write_record(const std::string& path, const SimulationRecord& record) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail("cannot open for writing: " + path);
  write_exact(f, "OFLOW1", 6, path);
  std::uint32_t n_points = static_cast<std::uint32_t>(record.n_points);
  std::uint32_t n_frames = static_cast<std::uint32_t>(record.n_frames());
  float dt = static_cast<float>(record.frame_dt_ms);
  write_exact(f, &n_points, 4, path);
  write_exact(f, &n_frames, 4, path);
  write_exact(f, &dt, 4, path);
  std::vector<float> frame(static_cast<std::size_t>(record.n_points) * 3);
  for (std::int64_t i = 0; i < record.n_frames(); ++i) {
    const double* src = record.frame(i);
    for (std::size_t j = 0; j < frame.size(); ++j) frame[j] = static_cast<float>(src[j]);
    write_exact(f, frame.data(), frame.size() * 4, path);
  }
}

SimulationRecord read_record(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail("cannot open record file: " + path);
  check_magic(f, "OFLOW1", 6, path);
  std::uint32_t n_points = 0, n_frames = 0;
  float dt = 0.0f;
  read_exact(f, &n_points, 4, path);
  read_exact(f, &n_frames, 4, path);
  read_exact(f, &dt, 4, path);
  if (n_points == 0 || n_frames == 0) fail("record file: empty dimensions in " + path);
  SimulationRecord record;
  record.n_points = n_points;
  record.frame_dt_ms = dt;
  record.times_ms.resize(n_frames);
  for (std::uint32_t i = 0; i < n_frames; ++i)
    record.times_ms[i] = static_cast<double>(i) * record.frame_dt_ms;
  std::vector<float> buf(static_cast<std::size_t>(n_points) * 3);
  record.velocities.resize(static_cast<std::size_t>(n_points) * n_frames * 3);
  for (std::uint32_t i = 0; i < n_frames; ++i) {
    read_exact(f, buf.data(), buf.size() * 4, path);
    double* dst = record.velocities.data() + static_cast<std::size_t>(i) * n_points * 3;
    for (std::size_t j = 0; j < buf.size(); ++j) dst[j] = static_cast<double>(buf[j]);
  }
  return record;
}

}  // namespace octoflow::oracle

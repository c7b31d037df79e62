#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "octoflow/hemo_bc.hpp"
#include "octoflow/vasctree.hpp"
#include "octoflow/vec3.hpp"

// Quasi-steady Poiseuille ground-truth generator: instantaneous parabolic
// profiles driven by the time-varying total inflow, with flow conservation at
// junctions. Velocities in m/s (flow in mL/s over areas in mm^2).
namespace octoflow::oracle {

struct SimulationRecord {
  std::int64_t n_points = 0;
  double frame_dt_ms = 1000.0 / 30.0;
  std::vector<double> times_ms;    // frame i at i * frame_dt_ms
  std::vector<double> velocities;  // [frame][point][xyz], m/s

  std::int64_t n_frames() const { return static_cast<std::int64_t>(times_ms.size()); }
  const double* frame(std::int64_t i) const { return velocities.data() + i * n_points * 3; }
};

// Fraction of the inlet flow carried by a segment (sum over its subtree's
// outlets); the inlet carries 1.
double segment_flow(const vasctree::VesselTree& tree,
                    const hemo::OutletFlowAssignment& assignment, std::int32_t segment_id);

// Instantaneous velocity at a point for total inflow q_total_mls. Parabolic
// profile of the owning segment, blended linearly from the parent profile
// over the first local radius downstream of a junction. Throws if the point
// lies outside every segment.
Vec3 poiseuille_velocity(const vasctree::VesselTree& tree,
                         const hemo::OutletFlowAssignment& assignment, double q_total_mls,
                         const Vec3& point);

// Velocity per unit total inflow at each cloud point; generate_record scales
// this shape by the inflow history, exploiting linearity in q_total.
std::vector<Vec3> unit_flow_shape(const vasctree::VesselTree& tree,
                                  const hemo::OutletFlowAssignment& assignment,
                                  const vasctree::PointCloud& cloud);

// Time-resolved record at 30 frames per second over n_cycles cardiac cycles.
SimulationRecord generate_record(const vasctree::VesselTree& tree,
                                 const vasctree::PointCloud& cloud,
                                 const hemo::InflowWaveform& waveform,
                                 const hemo::InjectionParams& injection,
                                 const hemo::PhysicsConstants& constants, int n_cycles,
                                 double split_exponent);

// Point cloud file: magic OCLD1, point count, then x,y,z,wall_distance as f32.
void write_cloud(const std::string& path, const vasctree::PointCloud& cloud);
vasctree::PointCloud read_cloud(const std::string& path);

// Velocity record file: magic OFLOW1, point count, frame count, frame spacing
// in ms (f32), then frame-major xyz velocities as f32.
void write_record(const std::string& path, const SimulationRecord& record);
SimulationRecord read_record(const std::string& path);

}  // namespace octoflow::oracle

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "octoflow/model.hpp"
#include "octoflow/train.hpp"

// Accuracy statistics (per-component absolute errors, quantiles, R^2 of
// time-averaged fields) and the phase-separated runtime benchmark.
namespace octoflow::eval {

// Per-component absolute differences, flattened: 3N values for N vectors.
std::vector<double> absolute_errors(const std::vector<double>& predicted,
                                    const std::vector<double>& target);

// Mean over frames of a frame-major [frame][point][xyz] series -> [point][xyz].
std::vector<double> time_average_field(const double* velocities, std::int64_t n_frames,
                                       std::int64_t n_points);

struct ErrorStats {
  double mean = 0.0;    // of absolute component errors
  double stddev = 0.0;  // population standard deviation
  double median = 0.0;
  double q75 = 0.0;     // 75th percentile
  double q90 = 0.0;     // 90th percentile
  double r_squared = 0.0;  // pooled over components; NaN when target variance is 0
};

// Compares two same-length component vectors (e.g. time-averaged fields).
// Quantiles use linear interpolation between order statistics.
ErrorStats compute_stats(const std::vector<double>& predicted,
                         const std::vector<double>& target);

// Flow through a planar cross-section from point samples: sum of u . n times
// the per-sample area (velocities m/s, areas mm^2 -> flow mL/s).
double volumetric_flow_rate(const std::vector<Vec3>& velocities, const Vec3& unit_normal,
                            double area_per_sample_mm2);

struct PhaseTiming {
  double mean_ms = 0.0;
  double std_ms = 0.0;
  int n_runs = 0;
};

struct RuntimeReport {
  PhaseTiming net;       // BC net + feature assembly + U-Net forward
  PhaseTiming spatial;   // interpolation + spatial head, normalized to 1e6 points
  PhaseTiming temporal;  // trunk + combination, normalized to 1e2 times
  int threads = 1;
  std::string kernels;   // active kernel backend name

  // Affine cost model t(N_s, N_t) = net + N_s/1e6 * spatial + N_t/1e2 * temporal
  // fitted over the measurement grid; residual is max |fit - measured| / measured.
  double fit_net_ms = 0.0;
  double fit_spatial_ms_per_1e6 = 0.0;
  double fit_temporal_ms_per_1e2 = 0.0;
  double fit_max_rel_residual = 0.0;

  // Raw grid measurements for scaling checks: one entry per (N_s, N_t) cell.
  struct GridCell {
    std::int64_t n_spatial = 0;
    std::int64_t n_temporal = 0;
    double net_ms = 0.0;
    double spatial_ms = 0.0;
    double temporal_ms = 0.0;
  };
  std::vector<GridCell> grid;
};

// Times the three prediction phases separately on one case, n_runs times per
// grid cell after warm-up passes. Query points cycle through the case cloud.
RuntimeReport benchmark(model::SurrogateModel& model, const train::CaseData& data,
                        const oct::OctreeConfig& oct_config,
                        const std::vector<std::int64_t>& spatial_grid,
                        const std::vector<std::int64_t>& temporal_grid, int n_runs);

// CSV: header phase,mean_ms,std_ms,n and one row per phase.
void write_benchmark_csv(const std::string& path, const RuntimeReport& report);

}  // namespace octoflow::eval

#include "octoflow/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <stdexcept>

#include "octoflow/kernels.hpp"
#include "octoflow/threading.hpp"

namespace octoflow::eval {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

double quantile_sorted(const std::vector<double>& sorted, double p) {
  std::size_t n = sorted.size();
  if (n == 1) return sorted[0];
  double h = p * static_cast<double>(n - 1);
  std::size_t lo = static_cast<std::size_t>(h);
  if (lo + 1 >= n) return sorted[n - 1];
  double frac = h - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

PhaseTiming time_phase(int warmup, int n_runs, const std::function<void()>& body) {
  for (int i = 0; i < warmup; ++i) body();
  std::vector<double> samples(static_cast<std::size_t>(n_runs));
  for (int i = 0; i < n_runs; ++i) {
    Clock::time_point start = Clock::now();
    body();
    samples[static_cast<std::size_t>(i)] = ms_since(start);
  }
  PhaseTiming t;
  t.n_runs = n_runs;
  for (double s : samples) t.mean_ms += s;
  t.mean_ms /= n_runs;
  for (double s : samples) t.std_ms += (s - t.mean_ms) * (s - t.mean_ms);
  t.std_ms = std::sqrt(t.std_ms / n_runs);
  return t;
}

}  // namespace

std::vector<double> absolute_errors(const std::vector<double>& predicted,
                                    const std::vector<double>& target) {
  if (predicted.size() != target.size())
    fail("absolute_errors: size mismatch (" + std::to_string(predicted.size()) + " vs " +
         std::to_string(target.size()) + ")");
  if (predicted.empty()) fail("absolute_errors: empty inputs");
  std::vector<double> out(predicted.size());
  for (std::size_t i = 0; i < predicted.size(); ++i)
    out[i] = std::abs(predicted[i] - target[i]);
  return out;
}

std::vector<double> time_average_field(const double* velocities, std::int64_t n_frames,
                                       std::int64_t n_points) {
  if (n_frames < 1 || n_points < 1) fail("time_average_field: empty series");
  std::vector<double> out(static_cast<std::size_t>(n_points * 3), 0.0);
  for (std::int64_t f = 0; f < n_frames; ++f) {
    const double* frame = velocities + f * n_points * 3;
    for (std::int64_t i = 0; i < n_points * 3; ++i) out[static_cast<std::size_t>(i)] += frame[i];
  }
  double inv = 1.0 / static_cast<double>(n_frames);
  for (double& v : out) v *= inv;
  return out;
}

ErrorStats compute_stats(const std::vector<double>& predicted,
                         const std::vector<double>& target) {
  std::vector<double> errors = absolute_errors(predicted, target);
  std::size_t n = errors.size();

  ErrorStats s;
  for (double e : errors) s.mean += e;
  s.mean /= static_cast<double>(n);
  for (double e : errors) s.stddev += (e - s.mean) * (e - s.mean);
  s.stddev = std::sqrt(s.stddev / static_cast<double>(n));

  std::sort(errors.begin(), errors.end());
  s.median = quantile_sorted(errors, 0.5);
  s.q75 = quantile_sorted(errors, 0.75);
  s.q90 = quantile_sorted(errors, 0.9);

  double target_mean = 0.0;
  for (double t : target) target_mean += t;
  target_mean /= static_cast<double>(n);
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ss_res += (predicted[i] - target[i]) * (predicted[i] - target[i]);
    ss_tot += (target[i] - target_mean) * (target[i] - target_mean);
  }
  s.r_squared = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot
                             : std::numeric_limits<double>::quiet_NaN();
  return s;
}

double volumetric_flow_rate(const std::vector<Vec3>& velocities, const Vec3& unit_normal,
                            double area_per_sample_mm2) {
  if (velocities.empty()) fail("volumetric_flow_rate: no samples");
  if (std::abs(unit_normal.norm() - 1.0) > 1e-9)
    fail("volumetric_flow_rate: normal must be unit length");
  double flow = 0.0;
  for (const Vec3& u : velocities) flow += dot(u, unit_normal);
  return flow * area_per_sample_mm2;  // (m/s) * mm^2 == mL/s
}

RuntimeReport benchmark(model::SurrogateModel& surrogate, const train::CaseData& data,
                        const oct::OctreeConfig& oct_config,
                        const std::vector<std::int64_t>& spatial_grid,
                        const std::vector<std::int64_t>& temporal_grid, int n_runs) {
  if (n_runs < 10) fail("benchmark: need at least 10 runs per phase");
  if (spatial_grid.empty() || temporal_grid.empty()) fail("benchmark: empty grid");
  constexpr int kWarmup = 5;

  const model::ModelConfig& mc = surrogate.config();
  oct::Octree tree = oct::Octree::build(data.cloud, oct_config);

  std::vector<double> wf = model::resample_waveform(data.waveform, mc.bc_input_len);
  std::int64_t n_cloud = static_cast<std::int64_t>(data.cloud.size());
  ad::Tensor df({n_cloud, 1});
  for (std::int64_t i = 0; i < n_cloud; ++i)
    df.data[static_cast<std::size_t>(i)] =
        data.cloud.wall_distance[static_cast<std::size_t>(i)];

  RuntimeReport report;
  report.threads = static_cast<int>(ThreadPool::instance().size());
  report.kernels = kernels::active_name();

  // Phase 1: waveform encoding, feature assembly, U-Net forward.
  ad::Tensor latent;
  auto run_net = [&] {
    ad::Tape tape;
    model::TapeBinding net(tape, surrogate, false);
    ad::ValueId bc = model::bc_net_forward(
        net, tape.leaf(ad::Tensor({1, mc.bc_input_len}, wf)));
    ad::ValueId features = model::assemble_features(net, tape.leaf(df), bc);
    ad::ValueId out =
        model::unet_forward(net, &tree, tape.octree_avg_features(features, &tree));
    latent = tape.value(out);
  };
  report.net = time_phase(kWarmup, n_runs, run_net);

  // Phase 2: interpolation + spatial head per point count; queries cycle
  // through the cloud.
  std::int64_t max_spatial = *std::max_element(spatial_grid.begin(), spatial_grid.end());
  std::vector<Vec3> queries(static_cast<std::size_t>(max_spatial));
  for (std::int64_t i = 0; i < max_spatial; ++i)
    queries[static_cast<std::size_t>(i)] =
        data.cloud.points[static_cast<std::size_t>(i) % data.cloud.size()];

  std::vector<PhaseTiming> spatial_times;
  std::vector<ad::Tensor> spatial_features(spatial_grid.size());
  for (std::size_t gi = 0; gi < spatial_grid.size(); ++gi) {
    std::int64_t ns = spatial_grid[gi];
    if (ns < 1) fail("benchmark: spatial grid entries must be >= 1");
    std::vector<Vec3> pts(queries.begin(), queries.begin() + ns);
    spatial_times.push_back(time_phase(kWarmup, n_runs, [&] {
      ad::Tape tape;
      model::TapeBinding net(tape, surrogate, false);
      ad::ValueId field = tape.leaf_external(&latent, false);
      ad::ValueId sampled = tape.octree_interpolate(field, &tree, pts);
      ad::ValueId out = model::spatial_head(net, sampled);
      spatial_features[gi] = tape.value(out);
    }));
  }

  // Phase 3: trunk + combination per (point count, time count) cell.
  double span = data.record.times_ms.empty() ? 1000.0 : data.record.times_ms.back();
  double time_scale = data.time_scale_ms();
  PhaseTiming last_temporal;
  for (std::size_t gi = 0; gi < spatial_grid.size(); ++gi) {
    for (std::int64_t nt : temporal_grid) {
      if (nt < 1) fail("benchmark: temporal grid entries must be >= 1");
      ad::Tensor times({nt, 1});
      for (std::int64_t i = 0; i < nt; ++i)
        times.data[static_cast<std::size_t>(i)] =
            span * static_cast<double>(i) / static_cast<double>(std::max<std::int64_t>(nt - 1, 1)) /
            time_scale;
      PhaseTiming tmp = time_phase(kWarmup, n_runs, [&] {
        ad::Tape tape;
        model::TapeBinding net(tape, surrogate, false);
        ad::ValueId temporal = model::trunk_forward(net, tape.leaf(times));
        ad::ValueId spatial = tape.leaf_external(&spatial_features[gi], false);
        ad::ValueId out = model::evaluate_velocity(net, spatial, temporal);
        (void)tape.value(out);
      });
      RuntimeReport::GridCell cell;
      cell.n_spatial = spatial_grid[gi];
      cell.n_temporal = nt;
      cell.net_ms = report.net.mean_ms;
      cell.spatial_ms = spatial_times[gi].mean_ms;
      cell.temporal_ms = tmp.mean_ms;
      report.grid.push_back(cell);
      last_temporal = tmp;
    }
  }

  // Normalized phase rows reported at the largest grid cell.
  std::size_t last_sp = spatial_grid.size() - 1;
  report.spatial = spatial_times[last_sp];
  double sp_scale = 1e6 / static_cast<double>(spatial_grid[last_sp]);
  report.spatial.mean_ms *= sp_scale;
  report.spatial.std_ms *= sp_scale;
  double tmp_scale = 1e2 / static_cast<double>(report.grid.back().n_temporal);
  report.temporal = last_temporal;
  report.temporal.mean_ms *= tmp_scale;
  report.temporal.std_ms *= tmp_scale;

  // Least-squares affine fit of the summed cell totals.
  // Unknowns: (net, spatial per 1e6 pts, temporal per 1e2 times).
  double ata[9] = {0, 0, 0, 0, 0, 0, 0, 0, 0};
  double atb[3] = {0, 0, 0};
  for (const RuntimeReport::GridCell& cell : report.grid) {
    double row[3] = {1.0, static_cast<double>(cell.n_spatial) / 1e6,
                     static_cast<double>(cell.n_temporal) / 1e2};
    double total = cell.net_ms + cell.spatial_ms + cell.temporal_ms;
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) ata[i * 3 + j] += row[i] * row[j];
      atb[i] += row[i] * total;
    }
  }
  // 3x3 solve by Cramer's rule.
  auto det3 = [](const double* m) {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
  };
  double d = det3(ata);
  if (std::abs(d) < 1e-12) fail("benchmark: cost-model fit is singular (degenerate grid)");
  double coeff[3];
  for (int col = 0; col < 3; ++col) {
    double m[9];
    std::copy(ata, ata + 9, m);
    for (int r = 0; r < 3; ++r) m[r * 3 + col] = atb[r];
    coeff[col] = det3(m) / d;
  }
  report.fit_net_ms = coeff[0];
  report.fit_spatial_ms_per_1e6 = coeff[1];
  report.fit_temporal_ms_per_1e2 = coeff[2];
  for (const RuntimeReport::GridCell& cell : report.grid) {
    double total = cell.net_ms + cell.spatial_ms + cell.temporal_ms;
    double fitted = coeff[0] + coeff[1] * static_cast<double>(cell.n_spatial) / 1e6 +
                    coeff[2] * static_cast<double>(cell.n_temporal) / 1e2;
    report.fit_max_rel_residual =
        std::max(report.fit_max_rel_residual, std::abs(fitted - total) / total);
  }
  return report;
}

void write_benchmark_csv(const std::string& path, const RuntimeReport& report) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail("cannot open for writing: " + path);
  f << "phase,mean_ms,std_ms,n\n";
  char buf[128];
  std::snprintf(buf, sizeof(buf), "net,%.6g,%.6g,%d\n", report.net.mean_ms,
                report.net.std_ms, report.net.n_runs);
  f << buf;
  std::snprintf(buf, sizeof(buf), "spatial,%.6g,%.6g,%d\n", report.spatial.mean_ms,
                report.spatial.std_ms, report.spatial.n_runs);
  f << buf;
  std::snprintf(buf, sizeof(buf), "temporal,%.6g,%.6g,%d\n", report.temporal.mean_ms,
                report.temporal.std_ms, report.temporal.n_runs);
  f << buf;
  if (!f) fail("write failed: " + path);
}

}  // namespace octoflow::eval

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "octoflow/vasctree.hpp"

// Inflow boundary conditions: pulsatile carotid-like waveforms, contrast-agent
// injection, and flow splitting over the tree outlets. Flow rates in mL/s,
// times in ms.
namespace octoflow::hemo {

struct PhysicsConstants {
  double kinematic_viscosity_m2s = 3.2e-6;
  double density_kgm3 = 1.06e3;
  double mixing_factor = 0.3;  // injected flow fraction added to baseline
};

enum class AgeGroup { kYoung, kElderly };

std::string age_group_name(AgeGroup age);
AgeGroup age_group_from_name(const std::string& name);

struct InflowWaveform {
  std::vector<double> samples_mls;  // one cycle; samples_mls.front() == .back()
  double cycle_length_ms = 885.0;
  double mean_flow_mls = 4.4;
  AgeGroup age_group = AgeGroup::kYoung;

  // Periodic piecewise-linear evaluation at arbitrary time.
  double value_at(double t_ms) const;

  // Throws std::runtime_error when the waveform breaks its invariants
  // (positivity, periodic endpoints, cycle mean within 0.5% of mean_flow_mls).
  void validate() const;
};

struct InjectionParams {
  double t_s_ms = 885.0;    // injection start
  double t_l_ms = 250.0;    // rise time constant
  double q_ca_max_mls = 2.5;
};

// Outlet segment id -> fraction of total inflow leaving through it.
struct OutletFlowAssignment {
  std::map<std::int32_t, double> fractions;
};

// Smooth periodic waveform with the requested cycle mean; shape depends on
// the age group (sharper, larger-amplitude systolic peak for elderly).
InflowWaveform synth_inflow_waveform(double mean_flow_mls, double cycle_length_ms,
                                     AgeGroup age, int n_samples);

// Full study grid: three cycle means x three cycle lengths x two age groups.
std::vector<InflowWaveform> waveform_grid(int n_samples);

// Contrast-agent injection rate (saturating exponential onset).
double injection_rate(double t_ms, const InjectionParams& params);

// Total inflow: baseline waveform plus mixing_factor times the injection.
double total_flow(double t_ms, const InflowWaveform& waveform, const InjectionParams& params,
                  const PhysicsConstants& constants);

// Distributes unit inflow over the outlets, splitting at every junction in
// proportion to (child radius)^split_exponent.
OutletFlowAssignment flow_split(const vasctree::VesselTree& tree, double split_exponent);

// CSV with header `t_ms,q_mls`, one cycle including the duplicated endpoint.
// Reading recovers cycle length from the last sample time and the mean from a
// trapezoidal average; the age group is not stored in the file.
void write_waveform_csv(const std::string& path, const InflowWaveform& waveform);
InflowWaveform read_waveform_csv(const std::string& path);

}  // namespace octoflow::hemo

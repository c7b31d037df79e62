#include "octoflow/hemo_bc.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace octoflow::hemo {

namespace {

constexpr double kTwoPi = 6.28318530717958647692;

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

struct Harmonic {
  double a;  // cos coefficient
  double b;  // sin coefficient
};

// Normalized waveform shapes f(phase) with unit cycle mean, 8 harmonics.
// Young: systolic peak ~1.94x mean at phase 0.15, dicrotic bump, diastolic
// floor ~0.63. Elderly: sharper peak ~2.32x mean, floor ~0.53.
constexpr Harmonic kYoungHarmonics[8] = {
    {0.044092357526933801, 0.41802348317415028},
    {-0.064129382293172499, 0.20290136905238834},
    {-0.15653345357808829, 0.01930839465401149},
    {-0.068973700511469865, -0.038921764285687652},
    {-0.015544428400386882, -0.070453399884473522},
    {0.031255533204349699, -0.01974453182442916},
    {0.014464450608622136, 0.0040678109047950634},
    {0.0020104939458306, 0.0066983471534621739},
};

constexpr Harmonic kElderlyHarmonics[8] = {
    {0.04692670593376233, 0.44421003791573754},
    {0.066487933931643026, 0.27118159806042741},
    {-0.25444348629056057, 0.10597124607567143},
    {-0.11397341377472209, -0.053130629027287962},
    {-0.074492884811590193, -0.12033254367873018},
    {0.06481093159407178, -0.066153877932440125},
    {0.035002635272586978, -0.0037316242686573492},
    {0.02258680796756056, 0.016600716648917754},
};

double shape_value(AgeGroup age, double phase) {
  const Harmonic* h = age == AgeGroup::kYoung ? kYoungHarmonics : kElderlyHarmonics;
  double v = 1.0;
  for (int k = 0; k < 8; ++k) {
    double arg = kTwoPi * (k + 1) * phase;
    v += h[k].a * std::cos(arg) + h[k].b * std::sin(arg);
  }
  return v;
}

}  // namespace

std::string age_group_name(AgeGroup age) {
  return age == AgeGroup::kYoung ? "young" : "elderly";
}

AgeGroup age_group_from_name(const std::string& name) {
  if (name == "young") return AgeGroup::kYoung;
  if (name == "elderly") return AgeGroup::kElderly;
  fail("unknown age group '" + name + "' (expected young|elderly)");
}

double InflowWaveform::value_at(double t_ms) const {
  if (samples_mls.size() < 2) fail("waveform: needs at least two samples");
  double t = std::fmod(t_ms, cycle_length_ms);
  if (t < 0.0) t += cycle_length_ms;
  double pos = t / cycle_length_ms * static_cast<double>(samples_mls.size() - 1);
  std::size_t i = std::min(static_cast<std::size_t>(pos), samples_mls.size() - 2);
  double frac = pos - static_cast<double>(i);
  return samples_mls[i] + frac * (samples_mls[i + 1] - samples_mls[i]);
}

void InflowWaveform::validate() const {
  if (samples_mls.size() < 2) fail("waveform: needs at least two samples");
  if (!(cycle_length_ms > 0.0)) fail("waveform: cycle length must be > 0");
  if (std::abs(samples_mls.front() - samples_mls.back()) > 1e-9)
    fail("waveform: first and last sample must match (periodicity)");
  double sum = 0.0;
  for (std::size_t i = 0; i + 1 < samples_mls.size(); ++i)
    sum += 0.5 * (samples_mls[i] + samples_mls[i + 1]);
  double mean = sum / static_cast<double>(samples_mls.size() - 1);
  for (double q : samples_mls)
    if (!(q > 0.0)) fail("waveform: flow must stay positive over the cycle");
  if (std::abs(mean - mean_flow_mls) > 5e-3 * mean_flow_mls)
    fail("waveform: cycle mean deviates from mean_flow_mls by more than 0.5%");
}

InflowWaveform synth_inflow_waveform(double mean_flow_mls, double cycle_length_ms,
                                     AgeGroup age, int n_samples) {
  if (n_samples < 32) fail("waveform synthesis: n_samples must be >= 32");
  if (!(mean_flow_mls > 0.0) || !(cycle_length_ms > 0.0))
    fail("waveform synthesis: mean flow and cycle length must be > 0");
  InflowWaveform w;
  w.cycle_length_ms = cycle_length_ms;
  w.mean_flow_mls = mean_flow_mls;
  w.age_group = age;
  w.samples_mls.resize(static_cast<std::size_t>(n_samples));
  for (int i = 0; i < n_samples; ++i) {
    double phase = static_cast<double>(i) / static_cast<double>(n_samples - 1);
    w.samples_mls[static_cast<std::size_t>(i)] = mean_flow_mls * shape_value(age, phase);
  }
  w.validate();
  return w;
}

std::vector<InflowWaveform> waveform_grid(int n_samples) {
  const double means[3] = {3.4, 4.4, 5.4};
  const double cycles[3] = {785.0, 885.0, 985.0};
  const AgeGroup ages[2] = {AgeGroup::kYoung, AgeGroup::kElderly};
  std::vector<InflowWaveform> grid;
  grid.reserve(18);
  for (double mean : means)
    for (double cycle : cycles)
      for (AgeGroup age : ages)
        grid.push_back(synth_inflow_waveform(mean, cycle, age, n_samples));
  return grid;
}

double injection_rate(double t_ms, const InjectionParams& params) {
  if (!(params.t_l_ms > 0.0)) fail("injection: t_l_ms must be > 0");
  if (t_ms < params.t_s_ms) return 0.0;
  return params.q_ca_max_mls * (1.0 - std::exp(-(t_ms - params.t_s_ms) / params.t_l_ms));
}

double total_flow(double t_ms, const InflowWaveform& waveform, const InjectionParams& params,
                  const PhysicsConstants& constants) {
  return waveform.value_at(t_ms) + constants.mixing_factor * injection_rate(t_ms, params);
}

OutletFlowAssignment flow_split(const vasctree::VesselTree& tree, double split_exponent) {
  tree.validate();
  std::vector<std::vector<std::int32_t>> kids = tree.children_of();
  std::vector<double> fraction(tree.segments.size(), 0.0);
  fraction[static_cast<std::size_t>(tree.inlet_segment)] = 1.0;

  // Segments are id-ordered parent-before-child, so one forward sweep works.
  OutletFlowAssignment out;
  for (std::size_t i = 0; i < tree.segments.size(); ++i) {
    const std::vector<std::int32_t>& children = kids[i];
    if (children.empty()) {
      out.fractions[static_cast<std::int32_t>(i)] = fraction[i];
      continue;
    }
    double total_weight = 0.0;
    for (std::int32_t c : children)
      total_weight +=
          std::pow(tree.segments[static_cast<std::size_t>(c)].radius_start, split_exponent);
    for (std::int32_t c : children) {
      double w = std::pow(tree.segments[static_cast<std::size_t>(c)].radius_start,
                          split_exponent);
      fraction[static_cast<std::size_t>(c)] = fraction[i] * w / total_weight;
    }
  }
  return out;
}

void write_waveform_csv(const std::string& path, const InflowWaveform& waveform) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail("cannot open for writing: " + path);
  f << "t_ms,q_mls\n";
  std::size_t n = waveform.samples_mls.size();
  for (std::size_t i = 0; i < n; ++i) {
    double t = waveform.cycle_length_ms * static_cast<double>(i) / static_cast<double>(n - 1);
    char buf[80];
    std::snprintf(buf, sizeof(buf), "%.9g,%.17g\n", t, waveform.samples_mls[i]);
    f << buf;
  }
  if (!f) fail("write failed: " + path);
}

InflowWaveform read_waveform_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail("cannot open waveform file: " + path);
  std::string header;
  if (!std::getline(f, header) || header != "t_ms,q_mls")
    fail("waveform file: bad header in " + path);
  InflowWaveform w;
  std::string line;
  double last_t = 0.0;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    double t, q;
    char tail;
    if (std::sscanf(line.c_str(), "%lf,%lf%c", &t, &q, &tail) != 2)
      fail("waveform file: malformed row '" + line + "' in " + path);
    w.samples_mls.push_back(q);
    last_t = t;
  }
  if (w.samples_mls.size() < 2) fail("waveform file: too few samples in " + path);
  w.cycle_length_ms = last_t;
  double sum = 0.0;
  for (std::size_t i = 0; i + 1 < w.samples_mls.size(); ++i)
    sum += 0.5 * (w.samples_mls[i] + w.samples_mls[i + 1]);
  w.mean_flow_mls = sum / static_cast<double>(w.samples_mls.size() - 1);
  w.validate();
  return w;
}

}  // namespace octoflow::hemo

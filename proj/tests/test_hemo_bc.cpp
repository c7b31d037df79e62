#include <algorithm>
#include <cmath>
#include <filesystem>
#include <vector>

#include "doctest.h"
#include "octoflow/hemo_bc.hpp"
#include "octoflow/vasctree.hpp"

using namespace octoflow;
using hemo::AgeGroup;
using hemo::InflowWaveform;
using hemo::InjectionParams;

namespace {

double trapezoid_mean(const std::vector<double>& samples) {
  double sum = 0.0;
  for (std::size_t i = 0; i + 1 < samples.size(); ++i)
    sum += 0.5 * (samples[i] + samples[i + 1]);
  return sum / static_cast<double>(samples.size() - 1);
}

}  // namespace

TEST_CASE("synthesized waveforms hit the requested mean exactly") {
  for (AgeGroup age : {AgeGroup::kYoung, AgeGroup::kElderly}) {
    InflowWaveform wf = hemo::synth_inflow_waveform(4.4, 885.0, age, 256);
    CHECK(wf.samples_mls.size() == 256);
    CHECK(wf.mean_flow_mls == 4.4);
    CHECK(trapezoid_mean(wf.samples_mls) == doctest::Approx(4.4).epsilon(1e-12));
    CHECK(wf.samples_mls.front() == doctest::Approx(wf.samples_mls.back()).epsilon(1e-12));
    CHECK_NOTHROW(wf.validate());

    for (double q : wf.samples_mls) CHECK(q > 0.0);

    // Systolic peak lands in the first third of the cycle.
    std::size_t peak =
        static_cast<std::size_t>(std::max_element(wf.samples_mls.begin(), wf.samples_mls.end()) -
                                 wf.samples_mls.begin());
    CHECK(peak < wf.samples_mls.size() / 3);
  }
}

TEST_CASE("waveform scales linearly and bitwise with the mean flow") {
  InflowWaveform a = hemo::synth_inflow_waveform(4.4, 885.0, AgeGroup::kYoung, 128);
  InflowWaveform b = hemo::synth_inflow_waveform(8.8, 885.0, AgeGroup::kYoung, 128);
  REQUIRE(a.samples_mls.size() == b.samples_mls.size());
  for (std::size_t i = 0; i < a.samples_mls.size(); ++i)
    CHECK(b.samples_mls[i] == 2.0 * a.samples_mls[i]);
}

TEST_CASE("elderly and young waveform shapes differ") {
  InflowWaveform young = hemo::synth_inflow_waveform(4.4, 885.0, AgeGroup::kYoung, 128);
  InflowWaveform old = hemo::synth_inflow_waveform(4.4, 885.0, AgeGroup::kElderly, 128);
  double max_diff = 0.0;
  for (std::size_t i = 0; i < young.samples_mls.size(); ++i)
    max_diff = std::max(max_diff, std::abs(young.samples_mls[i] - old.samples_mls[i]));
  CHECK(max_diff > 0.1);
}

TEST_CASE("periodic linear interpolation matches samples and wraps") {
  InflowWaveform wf = hemo::synth_inflow_waveform(5.4, 785.0, AgeGroup::kElderly, 64);
  double dt = 785.0 / 63.0;
  for (std::size_t i = 0; i < 64; ++i)
    CHECK(wf.value_at(static_cast<double>(i) * dt) ==
          doctest::Approx(wf.samples_mls[i]).epsilon(1e-9));
  CHECK(wf.value_at(100.0 + 785.0) == doctest::Approx(wf.value_at(100.0)).epsilon(1e-9));
  CHECK(wf.value_at(-785.0 + 33.0) == doctest::Approx(wf.value_at(33.0)).epsilon(1e-9));
}

TEST_CASE("study grid enumerates exactly 18 validated waveforms") {
  std::vector<InflowWaveform> grid = hemo::waveform_grid(128);
  REQUIRE(grid.size() == 18);
  int young = 0;
  for (const InflowWaveform& wf : grid) {
    CHECK_NOTHROW(wf.validate());
    CHECK(std::abs(trapezoid_mean(wf.samples_mls) - wf.mean_flow_mls) <
          0.005 * wf.mean_flow_mls);
    if (wf.age_group == AgeGroup::kYoung) ++young;
  }
  CHECK(young == 9);

  std::vector<double> means, cycles;
  for (const InflowWaveform& wf : grid) {
    means.push_back(wf.mean_flow_mls);
    cycles.push_back(wf.cycle_length_ms);
  }
  for (double m : {3.4, 4.4, 5.4}) CHECK(std::count(means.begin(), means.end(), m) == 6);
  for (double c : {785.0, 885.0, 985.0})
    CHECK(std::count(cycles.begin(), cycles.end(), c) == 6);
}

TEST_CASE("injection curve: onset, rise constant and asymptote") {
  InjectionParams inj;  // T_S 885, T_L 250, max 2.5
  CHECK(hemo::injection_rate(0.0, inj) == 0.0);
  CHECK(hemo::injection_rate(884.999, inj) == 0.0);
  CHECK(hemo::injection_rate(885.0, inj) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(hemo::injection_rate(885.0 + 250.0, inj) ==
        doctest::Approx(2.5 * (1.0 - std::exp(-1.0))).epsilon(1e-5));
  CHECK(std::abs(hemo::injection_rate(885.0 + 30.0 * 250.0, inj) - 2.5) < 1e-9);

  // Continuity at the onset.
  double eps = 1e-7;
  CHECK(std::abs(hemo::injection_rate(885.0 + eps, inj) - hemo::injection_rate(885.0, inj)) <
        1e-8);
  // Monotone rise.
  CHECK(hemo::injection_rate(1000.0, inj) < hemo::injection_rate(1100.0, inj));
}

TEST_CASE("total flow mixes baseline and injection with factor 0.3") {
  InflowWaveform wf = hemo::synth_inflow_waveform(4.4, 885.0, AgeGroup::kYoung, 128);
  InjectionParams inj;
  hemo::PhysicsConstants constants;
  double t = 1200.0;
  CHECK(hemo::total_flow(t, wf, inj, constants) ==
        doctest::Approx(wf.value_at(t) + 0.3 * hemo::injection_rate(t, inj)).epsilon(1e-12));
  // Before injection, total flow is the baseline exactly.
  CHECK(hemo::total_flow(400.0, wf, inj, constants) ==
        doctest::Approx(wf.value_at(400.0)).epsilon(1e-12));
}

TEST_CASE("flow split follows the radius-cubed law on a single bifurcation") {
  vasctree::VesselTree t;
  vasctree::BranchSegment root;
  root.start = {0, 0, 0};
  root.end = {0, 0, 10};
  root.radius_start = root.radius_end = 1.8;
  root.parent = -1;
  t.segments.push_back(root);
  auto child = [&](double radius, double x) {
    vasctree::BranchSegment c;
    c.start = {0, 0, 10};
    c.end = {x, 0, 18};
    c.radius_start = c.radius_end = radius;
    c.parent = 0;
    t.segments.push_back(c);
  };
  child(1.5, 4.0);
  child(1.0, -4.0);
  t.inlet_segment = 0;
  t.outlet_segments = {1, 2};

  hemo::OutletFlowAssignment split = hemo::flow_split(t, 3.0);
  REQUIRE(split.fractions.size() == 2);
  CHECK(split.fractions.at(1) == doctest::Approx(3.375 / 4.375).epsilon(1e-12));
  CHECK(split.fractions.at(2) == doctest::Approx(1.0 / 4.375).epsilon(1e-12));
}

TEST_CASE("outlet fractions sum to one on random trees") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    vasctree::TreeGenConfig cfg;
    cfg.n_generations = 1 + static_cast<int>(seed % 3);
    vasctree::VesselTree tree = vasctree::generate_tree(cfg, seed);
    hemo::OutletFlowAssignment split = hemo::flow_split(tree, 3.0);
    REQUIRE(split.fractions.size() == tree.outlet_segments.size());
    double sum = 0.0;
    for (const auto& [id, frac] : split.fractions) {
      CHECK(frac > 0.0);
      sum += frac;
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }
}

TEST_CASE("waveform csv round trips samples bitwise") {
  InflowWaveform wf = hemo::synth_inflow_waveform(5.4, 985.0, AgeGroup::kElderly, 96);
  std::filesystem::path path =
      std::filesystem::temp_directory_path() / "octoflow_waveform_roundtrip.csv";
  hemo::write_waveform_csv(path.string(), wf);
  InflowWaveform back = hemo::read_waveform_csv(path.string());
  std::filesystem::remove(path);

  REQUIRE(back.samples_mls.size() == wf.samples_mls.size());
  for (std::size_t i = 0; i < wf.samples_mls.size(); ++i)
    CHECK(back.samples_mls[i] == wf.samples_mls[i]);
  CHECK(back.cycle_length_ms == 985.0);
  CHECK(back.mean_flow_mls == doctest::Approx(5.4).epsilon(1e-9));
  CHECK_NOTHROW(back.validate());
}

TEST_CASE("waveform validation rejects broken inputs") {
  InflowWaveform wf = hemo::synth_inflow_waveform(4.4, 885.0, AgeGroup::kYoung, 64);
  InflowWaveform negative = wf;
  negative.samples_mls[10] = -0.1;
  CHECK_THROWS(negative.validate());

  InflowWaveform open_ends = wf;
  open_ends.samples_mls.back() += 0.5;
  CHECK_THROWS(open_ends.validate());

  InflowWaveform wrong_mean = wf;
  wrong_mean.mean_flow_mls = 6.0;
  CHECK_THROWS(wrong_mean.validate());
}

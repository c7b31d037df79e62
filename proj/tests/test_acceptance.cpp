// Acceptance gate: exercises the nine release criteria end to end and prints
// one PASS/FAIL line per criterion. The process exit status is the number of
// failed criteria, so `ctest` treats any shortfall as a test failure.
//
// An optional argument restricts the run to a comma-separated list of
// criterion numbers (e.g. `test_acceptance 1,2,9`); skipped criteria do not
// count as failures. This is a maintenance aid — the registered ctest entry
// always runs everything.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "octoflow/autodiff.hpp"
#include "octoflow/config.hpp"
#include "octoflow/eval.hpp"
#include "octoflow/flow_oracle.hpp"
#include "octoflow/hemo_bc.hpp"
#include "octoflow/model.hpp"
#include "octoflow/octree.hpp"
#include "octoflow/rng.hpp"
#include "octoflow/train.hpp"
#include "octoflow/vasctree.hpp"
#include "octoflow/vec3.hpp"

namespace fs = std::filesystem;
using namespace octoflow;

namespace {

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

struct Stopwatch {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* format, ...) {
  char buf[512];
  va_list args;
  va_start(args, format);
  std::vsnprintf(buf, sizeof(buf), format, args);
  va_end(args);
  return std::string(buf);
}

fs::path workspace() {
  static fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "octoflow_acceptance";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string file_bytes(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Relative path -> contents for every regular file under `dir`.
std::map<std::string, std::string> dir_bytes(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& entry : fs::recursive_directory_iterator(dir))
    if (entry.is_regular_file())
      out[fs::relative(entry.path(), dir).generic_string()] = file_bytes(entry.path());
  return out;
}

// Random values bounded away from zero so leaky-ReLU kinks and MAE kinks sit
// far from every finite-difference probe.
void fill_away_from_zero(ad::Tensor& t, std::mt19937_64& rng) {
  for (double& v : t.data)
    v = (uniform01(rng) < 0.5 ? -1.0 : 1.0) * uniform(rng, 0.3, 1.2);
}

ad::Tensor random_tensor(std::vector<std::int64_t> shape, std::mt19937_64& rng) {
  ad::Tensor t(std::move(shape));
  fill_away_from_zero(t, rng);
  return t;
}

vasctree::PointCloud scatter_cloud(int n, double extent, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  vasctree::PointCloud cloud;
  cloud.points.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    cloud.points.push_back({uniform(rng, -extent, extent), uniform(rng, -extent, extent),
                            uniform(rng, -extent, extent)});
  cloud.wall_distance.assign(cloud.points.size(), 0.0);
  for (double& d : cloud.wall_distance) d = uniform(rng, 0.1, 1.0);
  return cloud;
}

// ---------------------------------------------------------------------------
// Criterion 1 — finite-difference gradient suite
// ---------------------------------------------------------------------------

using OpBuilder =
    std::function<ad::ValueId(ad::Tape&, const std::vector<ad::ValueId>&)>;

// Analytic gradients of a scalar-valued build vs central differences over
// every element of every input tensor.
double max_rel_grad_error(std::vector<ad::Tensor>& inputs, const OpBuilder& build) {
  auto run = [&](ad::Tape& tape, bool with_grad,
                 std::vector<ad::ValueId>* ids_out) -> ad::ValueId {
    std::vector<ad::ValueId> ids;
    ids.reserve(inputs.size());
    for (ad::Tensor& t : inputs) ids.push_back(tape.leaf_external(&t, with_grad));
    ad::ValueId out = build(tape, ids);
    if (ids_out) *ids_out = ids;
    return out;
  };

  ad::Tape tape;
  std::vector<ad::ValueId> ids;
  ad::ValueId loss = run(tape, true, &ids);
  if (tape.value(loss).numel() != 1)
    throw std::runtime_error("gradient check: loss is not scalar");
  tape.backward(loss);
  std::vector<ad::Tensor> grads;
  grads.reserve(ids.size());
  for (ad::ValueId id : ids) grads.push_back(tape.grad(id));

  double max_rel = 0.0;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    for (std::size_t i = 0; i < inputs[t].data.size(); ++i) {
      double saved = inputs[t].data[i];
      double h = 1e-5 * std::max(1.0, std::abs(saved));
      inputs[t].data[i] = saved + h;
      ad::Tape tp;
      double fp = tp.value(run(tp, false, nullptr)).data[0];
      inputs[t].data[i] = saved - h;
      ad::Tape tm;
      double fm = tm.value(run(tm, false, nullptr)).data[0];
      inputs[t].data[i] = saved;
      double fd = (fp - fm) / (2.0 * h);
      double analytic = grads[t].data[i];
      double rel = std::abs(analytic - fd) /
                   std::max({1.0, std::abs(analytic), std::abs(fd)});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

// Probes the op's output shape, then reduces it to a scalar: rank <= 2 output
// through two fixed non-uniform projections (every element gets a distinct
// cotangent), rank-3 output through an MAE loss against an offset target.
double check_op(std::vector<ad::Tensor> inputs, const OpBuilder& op, std::uint64_t seed) {
  ad::Tape probe;
  std::vector<ad::ValueId> pids;
  for (ad::Tensor& t : inputs) pids.push_back(probe.leaf_external(&t, false));
  ad::Tensor out_probe = probe.value(op(probe, pids));

  std::mt19937_64 rng(seed);
  if (out_probe.rank() <= 2) {
    std::int64_t rows = out_probe.rank() == 2 ? out_probe.dim(0) : 1;
    std::int64_t cols = out_probe.rank() == 2 ? out_probe.dim(1) : out_probe.dim(0);
    ad::Tensor w1({cols, 1}), w2({rows, 1});
    for (double& v : w1.data) v = uniform(rng, 0.4, 1.3);
    for (double& v : w2.data) v = uniform(rng, 0.4, 1.3);
    int rank = out_probe.rank();
    OpBuilder reduced = [op, w1, w2, rank](ad::Tape& tape,
                                           const std::vector<ad::ValueId>& ids) {
      ad::ValueId out = op(tape, ids);
      if (rank == 1) out = tape.repeat_row(out, 1);
      ad::ValueId col = tape.fully_connected(out, tape.leaf(w1), ad::kNoValue);
      ad::ValueId row = tape.repeat_row(tape.global_mean_pool(col), 1);
      return tape.fully_connected(row, tape.leaf(w2), ad::kNoValue);
    };
    return max_rel_grad_error(inputs, reduced);
  }

  ad::Tensor target = out_probe;
  for (double& v : target.data)
    v += (uniform01(rng) < 0.5 ? -1.0 : 1.0) * uniform(rng, 0.5, 1.5);
  OpBuilder reduced = [op, target](ad::Tape& tape, const std::vector<ad::ValueId>& ids) {
    return tape.mae_loss(op(tape, ids), tape.leaf(target));
  };
  return max_rel_grad_error(inputs, reduced);
}

Outcome criterion_gradients() {
  Stopwatch watch;
  std::mt19937_64 rng(101);
  constexpr double kTol = 1e-5;

  vasctree::PointCloud cloud = scatter_cloud(40, 3.4, 7);
  oct::Octree tree = oct::Octree::build(cloud, {3, 1.0});
  std::int64_t n3 = tree.node_count(3);
  std::int64_t n2 = tree.node_count(2);

  std::vector<std::pair<std::string, double>> results;
  auto record = [&](const std::string& name, double err) {
    results.emplace_back(name, err);
  };

  record("fc", check_op({random_tensor({4, 3}, rng), random_tensor({3, 5}, rng),
                         random_tensor({5}, rng)},
                        [](ad::Tape& t, const std::vector<ad::ValueId>& v) {
                          return t.fully_connected(v[0], v[1], v[2]);
                        },
                        1));
  record("conv1d_s1", check_op({random_tensor({2, 6}, rng), random_tensor({3, 2, 3}, rng),
                                random_tensor({3}, rng)},
                               [](ad::Tape& t, const std::vector<ad::ValueId>& v) {
                                 return t.conv1d(v[0], v[1], v[2], 1, 1);
                               },
                               2));
  record("conv1d_s2", check_op({random_tensor({2, 7}, rng), random_tensor({3, 2, 3}, rng),
                                random_tensor({3}, rng)},
                               [](ad::Tape& t, const std::vector<ad::ValueId>& v) {
                                 return t.conv1d(v[0], v[1], v[2], 2, 1);
                               },
                               3));
  record("avg_pool1d", check_op({random_tensor({3, 8}, rng)},
                                [](ad::Tape& t, const std::vector<ad::ValueId>& v) {
                                  return t.avg_pool1d(v[0], 2);
                                },
                                4));
  record("global_mean_pool", check_op({random_tensor({3, 6}, rng)},
                                      [](ad::Tape& t, const std::vector<ad::ValueId>& v) {
                                        return t.global_mean_pool(v[0]);
                                      },
                                      5));
  record("lrelu", check_op({random_tensor({4, 5}, rng)},
                           [](ad::Tape& t, const std::vector<ad::ValueId>& v) {
                             return t.lrelu(v[0], 0.1);
                           },
                           6));
  record("octree_conv",
         check_op({random_tensor({n3, 2}, rng), random_tensor({27, 2, 3}, rng),
                   random_tensor({3}, rng)},
                  [&tree](ad::Tape& t, const std::vector<ad::ValueId>& v) {
                    return t.octree_conv(v[0], v[1], v[2], &tree, 3);
                  },
                  7));
  record("octree_conv_strided",
         check_op({random_tensor({n3, 2}, rng), random_tensor({27, 2, 3}, rng),
                   random_tensor({3}, rng)},
                  [&tree](ad::Tape& t, const std::vector<ad::ValueId>& v) {
                    return t.octree_conv_strided(v[0], v[1], v[2], &tree, 3);
                  },
                  8));
  record("octree_conv_transposed",
         check_op({random_tensor({n2, 2}, rng), random_tensor({27, 2, 3}, rng),
                   random_tensor({3}, rng)},
                  [&tree](ad::Tape& t, const std::vector<ad::ValueId>& v) {
                    return t.octree_conv_transposed(v[0], v[1], v[2], &tree, 2);
                  },
                  9));
  std::vector<Vec3> queries(cloud.points.begin(), cloud.points.begin() + 6);
  record("octree_interpolate",
         check_op({random_tensor({n3, 3}, rng)},
                  [&tree, queries](ad::Tape& t, const std::vector<ad::ValueId>& v) {
                    return t.octree_interpolate(v[0], &tree, queries);
                  },
                  10));
  record("head_combine",
         check_op({random_tensor({4, 6}, rng), random_tensor({3, 2}, rng),
                   random_tensor({3}, rng)},
                  [](ad::Tape& t, const std::vector<ad::ValueId>& v) {
                    return t.head_combine(v[0], v[1], v[2]);
                  },
                  11));
  {
    ad::Tensor a = random_tensor({3, 4}, rng);
    ad::Tensor b = a;
    for (double& v : b.data)
      v += (uniform01(rng) < 0.5 ? -1.0 : 1.0) * uniform(rng, 0.5, 1.2);
    std::vector<ad::Tensor> mae_inputs{a, b};
    record("mae_loss",
           max_rel_grad_error(mae_inputs,
                              [](ad::Tape& t, const std::vector<ad::ValueId>& v) {
                                return t.mae_loss(v[0], v[1]);
                              }));
  }

  double worst = 0.0;
  std::string worst_name;
  for (const auto& [name, err] : results)
    if (err >= worst) {
      worst = err;
      worst_name = name;
    }
  double elapsed = watch.seconds();
  bool pass = worst < kTol && elapsed < 120.0;
  return {pass, fmt("%zu ops, max rel err %.2e (%s, tol 1e-5), %.1f s (limit 120)",
                    results.size(), worst, worst_name.c_str(), elapsed)};
}

// ---------------------------------------------------------------------------
// Criterion 2 — octree structural suite
// ---------------------------------------------------------------------------

std::vector<std::uint64_t> expected_level_keys(const vasctree::PointCloud& cloud,
                                               const oct::Octree& tree, int level) {
  double cell = tree.root_side() / static_cast<double>(std::int64_t{1} << level);
  std::set<std::uint64_t> keys;
  for (const Vec3& p : cloud.points) {
    auto cell_index = [&](double x, double o) {
      return static_cast<std::uint32_t>(std::floor((x - o) / cell));
    };
    keys.insert(oct::Octree::morton_encode(cell_index(p.x, tree.origin().x),
                                           cell_index(p.y, tree.origin().y),
                                           cell_index(p.z, tree.origin().z)));
  }
  return {keys.begin(), keys.end()};
}

Outcome criterion_octree() {
  Stopwatch watch;
  std::mt19937_64 rng(2024);
  int clouds_checked = 0;

  for (int i = 0; i < 50; ++i) {
    int depth = 2 + i % 5;
    double pitch = uniform(rng, 0.3, 1.5);
    double extent = 0.45 * pitch * static_cast<double>(std::int64_t{1} << depth);
    vasctree::PointCloud cloud =
        scatter_cloud(100 + 7 * i, extent, 5000 + static_cast<std::uint64_t>(i));
    oct::OctreeConfig config{depth, pitch};
    oct::Octree tree = oct::Octree::build(cloud, config);

    double side = pitch * static_cast<double>(std::int64_t{1} << depth);
    if (std::abs(tree.root_side() - side) > 1e-12 * std::max(1.0, side))
      return {false, fmt("cloud %d: root side %.17g != pitch*2^depth %.17g", i,
                         tree.root_side(), side)};

    oct::Octree again = oct::Octree::build(cloud, config);
    for (int level = 0; level <= depth; ++level) {
      const std::vector<std::uint64_t>& keys = tree.keys(level);
      if (keys != again.keys(level))
        return {false, fmt("cloud %d level %d: rebuild changed the key list", i, level)};
      if (!std::is_sorted(keys.begin(), keys.end()) ||
          std::adjacent_find(keys.begin(), keys.end()) != keys.end())
        return {false, fmt("cloud %d level %d: keys not sorted unique", i, level)};
      if (keys != expected_level_keys(cloud, tree, level))
        return {false,
                fmt("cloud %d level %d: keys disagree with point recomputation", i, level)};
      if (level > 0) {
        std::set<std::uint64_t> parents;
        for (std::uint64_t k : keys) parents.insert(k >> 3);
        std::vector<std::uint64_t> expected(parents.begin(), parents.end());
        if (tree.keys(level - 1) != expected)
          return {false, fmt("cloud %d level %d: parent closure violated", i, level)};
      }
    }
    for (std::uint64_t k : tree.keys(depth)) {
      std::uint32_t a, b, c;
      oct::Octree::morton_decode(k, a, b, c);
      if (oct::Octree::morton_encode(a, b, c) != k)
        return {false, fmt("cloud %d: key %llu fails decode/encode round trip", i,
                           static_cast<unsigned long long>(k))};
    }
    ++clouds_checked;
  }

  // Default configuration: 0.15 mm cells, depth 10 -> 153.6 mm root cube.
  vasctree::PointCloud cloud = scatter_cloud(500, 60.0, 99);
  oct::Octree tree = oct::Octree::build(cloud, oct::OctreeConfig{});
  if (std::abs(tree.root_side() - 153.6) > 1e-12)
    return {false, fmt("default config root side %.17g != 153.6", tree.root_side())};

  double elapsed = watch.seconds();
  bool pass = elapsed < 60.0;
  return {pass, fmt("%d randomized clouds, root side 153.6 mm at defaults, %.1f s (limit 60)",
                    clouds_checked, elapsed)};
}

// ---------------------------------------------------------------------------
// Criterion 3 — sparse/dense convolution equivalence
// ---------------------------------------------------------------------------

Outcome criterion_sparse_equiv() {
  constexpr int kSide = 8;
  vasctree::PointCloud cloud;
  for (int i = 0; i < kSide; ++i)
    for (int j = 0; j < kSide; ++j)
      for (int k = 0; k < kSide; ++k)
        cloud.points.push_back({i + 0.5, j + 0.5, k + 0.5});
  cloud.wall_distance.assign(cloud.points.size(), 0.0);
  oct::Octree tree = oct::Octree::build(cloud, {3, 1.0});
  std::int64_t n = tree.node_count(3);
  if (n != kSide * kSide * kSide)
    return {false, fmt("expected %d occupied nodes, got %lld", kSide * kSide * kSide,
                       static_cast<long long>(n))};

  constexpr std::int64_t ci = 3, co = 2;
  std::mt19937_64 rng(31);
  ad::Tensor x({n, ci}), kernel({27, ci, co}), bias({co});
  for (double& v : x.data) v = uniform(rng, -1.0, 1.0);
  for (double& v : kernel.data) v = uniform(rng, -1.0, 1.0);
  for (double& v : bias.data) v = uniform(rng, -1.0, 1.0);

  // Node index of cell (i, j, k): with all 512 cells occupied the sorted key
  // list is exactly 0..511, i.e. the Morton code itself.
  auto node_of = [](int i, int j, int k) {
    return static_cast<std::int64_t>(oct::Octree::morton_encode(
        static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j),
        static_cast<std::uint32_t>(k)));
  };

  oct::Octree::reset_neighbor_lookup_count();
  ad::Tape tape;
  ad::ValueId out_id = tape.octree_conv(tape.leaf_external(&x, false),
                                        tape.leaf_external(&kernel, false),
                                        tape.leaf_external(&bias, false), &tree, 3);
  std::int64_t lookups = oct::Octree::neighbor_lookup_count();
  const ad::Tensor& out = tape.value(out_id);

  double max_diff = 0.0;
  for (int i = 0; i < kSide; ++i)
    for (int j = 0; j < kSide; ++j)
      for (int k = 0; k < kSide; ++k)
        for (std::int64_t c = 0; c < co; ++c) {
          double dense = bias.data[static_cast<std::size_t>(c)];
          for (int dx = -1; dx <= 1; ++dx)
            for (int dy = -1; dy <= 1; ++dy)
              for (int dz = -1; dz <= 1; ++dz) {
                int ni = i + dx, nj = j + dy, nk = k + dz;
                if (ni < 0 || nj < 0 || nk < 0 || ni >= kSide || nj >= kSide ||
                    nk >= kSide)
                  continue;  // zero padding
                std::int64_t offset = ((dx + 1) * 9 + (dy + 1) * 3 + (dz + 1));
                const double* krow =
                    kernel.data.data() + static_cast<std::size_t>((offset * ci) * co);
                const double* xin =
                    x.data.data() + static_cast<std::size_t>(node_of(ni, nj, nk) * ci);
                for (std::int64_t cc = 0; cc < ci; ++cc)
                  dense += xin[cc] * krow[cc * co + c];
              }
          double sparse =
              out.data[static_cast<std::size_t>(node_of(i, j, k) * co + c)];
          max_diff = std::max(max_diff, std::abs(sparse - dense));
        }

  std::int64_t expected_lookups = 27 * n;
  bool pass = max_diff < 1e-10 && lookups == expected_lookups;
  return {pass, fmt("max |sparse - dense| %.2e (tol 1e-10), %lld neighbor lookups "
                    "(expected %lld)",
                    max_diff, static_cast<long long>(lookups),
                    static_cast<long long>(expected_lookups))};
}

// ---------------------------------------------------------------------------
// Criterion 4 — operator head behaviour
// ---------------------------------------------------------------------------

model::ModelConfig tiny_model_config() {
  model::ModelConfig mc;
  mc.latent_dim = 4;
  mc.unet_channels = {2, 3, 3, 4};
  mc.head_hidden = 6;
  mc.trunk_width = 5;
  mc.bc_input_len = 32;
  return mc;
}

Outcome criterion_operator_head() {
  model::SurrogateModel net(tiny_model_config(), 11);
  {
    std::mt19937_64 rng(12);
    for (model::Param& p : net.params())
      for (double& v : p.value.data) v = uniform(rng, -0.35, 0.35);
  }

  vasctree::PointCloud cloud = scatter_cloud(60, 300.0, 21);
  oct::OctreeConfig oc{10, 1.0};
  hemo::InflowWaveform wf = hemo::synth_inflow_waveform(4.4, 885.0, hemo::AgeGroup::kYoung, 64);
  std::vector<Vec3> queries(cloud.points.begin(), cloud.points.begin() + 8);
  double time_scale = 1770.0;

  for (int n_t : {1, 10, 100}) {
    std::vector<double> times(static_cast<std::size_t>(n_t));
    for (int i = 0; i < n_t; ++i) times[static_cast<std::size_t>(i)] = 1770.0 * i / 100.0;
    model::reset_unet_forward_count();
    model::predict(net, cloud, wf, queries, times, time_scale, oc);
    if (model::unet_forward_count() != 1)
      return {false, fmt("N_t=%d ran the U-Net %lld times instead of once", n_t,
                         static_cast<long long>(model::unet_forward_count()))};
  }

  std::vector<double> times = {0.0, 123.0, 456.0, 789.0, 1500.0};
  model::PredictResult batched = model::predict(net, cloud, wf, queries, times, time_scale, oc);
  double max_diff = 0.0;
  for (std::size_t i = 0; i < times.size(); ++i) {
    model::PredictResult single =
        model::predict(net, cloud, wf, queries, {times[i]}, time_scale, oc);
    for (std::size_t q = 0; q < queries.size() * 3; ++q)
      max_diff = std::max(max_diff,
                          std::abs(single.velocities[q] -
                                   batched.velocities[i * queries.size() * 3 + q]));
  }
  if (max_diff >= 1e-12)
    return {false, fmt("batched vs per-time predictions differ by %.2e", max_diff)};

  // Interpolation: constants exact and linear fields recovered on a fully
  // occupied block (every query surrounded by eight occupied cells).
  vasctree::PointCloud block;
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j)
      for (int k = 0; k < 6; ++k) block.points.push_back({i + 0.5, j + 0.5, k + 0.5});
  block.wall_distance.assign(block.points.size(), 0.0);
  oct::Octree tree = oct::Octree::build(block, {3, 1.0});
  std::int64_t n = tree.node_count(3);

  oct::FeatureField constant{3, 2, {}};
  constant.values.resize(static_cast<std::size_t>(n * 2));
  for (std::int64_t i = 0; i < n; ++i) {
    constant.values[static_cast<std::size_t>(2 * i)] = 0.75;
    constant.values[static_cast<std::size_t>(2 * i + 1)] = -1.25;
  }
  oct::FeatureField linear{3, 2, {}};
  linear.values.resize(static_cast<std::size_t>(n * 2));
  Vec3 a0{0.3, -0.7, 0.2}, a1{-0.1, 0.4, 0.9};
  for (std::int64_t i = 0; i < n; ++i) {
    Vec3 c = tree.cell_center(3, tree.keys(3)[static_cast<std::size_t>(i)]);
    linear.values[static_cast<std::size_t>(2 * i)] = a0.dot(c) + 0.5;
    linear.values[static_cast<std::size_t>(2 * i + 1)] = a1.dot(c) - 0.25;
  }

  std::mt19937_64 rng(77);
  double const_err = 0.0, linear_err = 0.0;
  for (int q = 0; q < 200; ++q) {
    Vec3 x{uniform(rng, 0.7, 5.3), uniform(rng, 0.7, 5.3), uniform(rng, 0.7, 5.3)};
    std::vector<double> vc = tree.interpolate(constant, x);
    const_err = std::max({const_err, std::abs(vc[0] - 0.75), std::abs(vc[1] + 1.25)});
    std::vector<double> vl = tree.interpolate(linear, x);
    linear_err = std::max({linear_err, std::abs(vl[0] - (a0.dot(x) + 0.5)),
                           std::abs(vl[1] - (a1.dot(x) - 0.25))});
  }

  bool pass = const_err <= 1e-12 && linear_err <= 1e-6;
  return {pass, fmt("1 U-Net pass for N_t in {1,10,100}; batched == per-time (%.1e); "
                    "interpolation errors const %.1e, linear %.1e",
                    max_diff, const_err, linear_err)};
}

// ---------------------------------------------------------------------------
// Criterion 5 — physics of the boundary conditions and the oracle
// ---------------------------------------------------------------------------

Outcome criterion_physics() {
  // Outlet fractions sum to one on randomized trees.
  double worst_sum_err = 0.0;
  for (int i = 0; i < 100; ++i) {
    vasctree::TreeGenConfig tg;
    tg.n_generations = 1 + i % 5;
    vasctree::VesselTree tree = vasctree::generate_tree(tg, 1000 + static_cast<std::uint64_t>(i));
    double exponent = 2.0 + 0.1 * (i % 11);
    hemo::OutletFlowAssignment assignment = hemo::flow_split(tree, exponent);
    if (assignment.fractions.size() != tree.outlet_segments.size())
      return {false, fmt("tree %d: %zu fractions for %zu outlets", i,
                         assignment.fractions.size(), tree.outlet_segments.size())};
    double sum = 0.0;
    for (const auto& kv : assignment.fractions) sum += kv.second;
    worst_sum_err = std::max(worst_sum_err, std::abs(sum - 1.0));
  }
  if (worst_sum_err > 1e-12)
    return {false, fmt("outlet fractions sum error %.2e exceeds 1e-12", worst_sum_err)};

  // Injection: zero before and at onset, saturating to the maximum rate.
  hemo::InjectionParams inj;
  if (hemo::injection_rate(inj.t_s_ms - 1.0, inj) != 0.0 ||
      hemo::injection_rate(inj.t_s_ms, inj) != 0.0)
    return {false, "injection rate not exactly zero at onset"};
  if (!(hemo::injection_rate(inj.t_s_ms + 1.0, inj) > 0.0))
    return {false, "injection rate does not rise after onset"};
  double tail = hemo::injection_rate(inj.t_s_ms + 30.0 * inj.t_l_ms, inj);
  if (std::abs(tail - inj.q_ca_max_mls) > 1e-9)
    return {false, fmt("injection asymptote %.12g not within 1e-9 of %.3g", tail,
                       inj.q_ca_max_mls)};

  // Waveform study grid: 18 members, each hitting its cycle mean.
  std::vector<hemo::InflowWaveform> grid = hemo::waveform_grid(256);
  if (grid.size() != 18)
    return {false, fmt("waveform grid has %zu entries, expected 18", grid.size())};
  double worst_mean_err = 0.0;
  for (const hemo::InflowWaveform& wf : grid) {
    wf.validate();
    double dt = wf.cycle_length_ms / static_cast<double>(wf.samples_mls.size() - 1);
    double integral = 0.0;
    for (std::size_t i = 0; i + 1 < wf.samples_mls.size(); ++i)
      integral += 0.5 * (wf.samples_mls[i] + wf.samples_mls[i + 1]) * dt;
    double mean = integral / wf.cycle_length_ms;
    worst_mean_err = std::max(worst_mean_err,
                              std::abs(mean - wf.mean_flow_mls) / wf.mean_flow_mls);
  }
  if (worst_mean_err >= 0.005)
    return {false, fmt("waveform cycle mean off by %.3f%%", 100.0 * worst_mean_err)};

  // Oracle inlet flux: midpoint quadrature over an inlet cross-section
  // reproduces the driving total flow.
  vasctree::TreeGenConfig tg;
  tg.n_generations = 2;
  vasctree::VesselTree tree = vasctree::generate_tree(tg, 7);
  hemo::OutletFlowAssignment assignment = hemo::flow_split(tree, 2.0);
  const vasctree::BranchSegment& inlet = tree.segments[static_cast<std::size_t>(tree.inlet_segment)];
  Vec3 n = inlet.direction();
  Vec3 station = inlet.start + (inlet.end - inlet.start) * 0.3;
  Vec3 u0 = std::abs(n.x) < 0.9 ? Vec3{1, 0, 0} : Vec3{0, 1, 0};
  Vec3 e1 = (u0 - n * u0.dot(n)).normalized();
  Vec3 e2 = n.cross(e1);
  double radius = vasctree::project_to_segment(inlet, station).radius;
  double h = radius / 30.0;

  hemo::InflowWaveform wf = hemo::synth_inflow_waveform(4.4, 885.0, hemo::AgeGroup::kYoung, 256);
  hemo::PhysicsConstants constants;
  double worst_flux_err = 0.0;
  for (double t_ms : {0.0, 900.0, 1400.0}) {
    double q = hemo::total_flow(t_ms, wf, inj, constants);
    std::vector<Vec3> samples;
    for (double a = -radius + 0.5 * h; a < radius; a += h)
      for (double b = -radius + 0.5 * h; b < radius; b += h) {
        Vec3 p = station + e1 * a + e2 * b;
        if (vasctree::project_to_segment(inlet, p).clearance > 0.0)
          samples.push_back(oracle::poiseuille_velocity(tree, assignment, q, p));
      }
    double flux = eval::volumetric_flow_rate(samples, n, h * h);
    worst_flux_err = std::max(worst_flux_err, std::abs(flux - q) / q);
  }
  bool pass = worst_flux_err < 0.05;
  return {pass, fmt("fraction sums 1e-12-exact on 100 trees; injection continuous, "
                    "asymptote within 1e-9; 18 waveforms, mean err %.2f%%; inlet flux err "
                    "%.2f%% (limit 5%%)",
                    100.0 * worst_mean_err, 100.0 * worst_flux_err)};
}

// ---------------------------------------------------------------------------
// Criteria 6 and 7 — desk-scale learning study and runtime cost model
// ---------------------------------------------------------------------------

struct ExperimentArtifacts {
  bool ready = false;
  config::RunConfig cfg = config::RunConfig::defaults();
  std::unique_ptr<train::Dataset> dataset;
  std::unique_ptr<model::SurrogateModel> net;
};

config::RunConfig experiment_config() {
  config::RunConfig cfg = config::RunConfig::defaults();
  cfg.set_integer("n_generations_min", 2);
  cfg.set_integer("n_generations_max", 2);
  cfg.set_real("target_spacing_mm", 0.7);
  cfg.set_real("finest_pitch_mm", 0.7);
  cfg.set("augment", "off");
  cfg.set_real("lr", 3e-4);
  cfg.set_integer("max_epochs", 48);
  cfg.set_integer("seed", 42);
  return cfg;
}

Outcome criterion_learning(ExperimentArtifacts& artifacts) {
  Stopwatch watch;
  constexpr std::uint64_t kSeed = 42;
  artifacts.cfg = experiment_config();

  artifacts.dataset =
      std::make_unique<train::Dataset>(train::build_dataset(16, artifacts.cfg, kSeed));
  artifacts.net = std::make_unique<model::SurrogateModel>(
      train::model_config_from(artifacts.cfg), derive_seed(kSeed, 1));
  train::TrainConfig tc = train::TrainConfig::from_run_config(artifacts.cfg);
  train::Trainer trainer(*artifacts.net, tc);
  train::FitResult fit = trainer.fit(*artifacts.dataset);

  // Held-out accuracy on time-averaged fields, pooled over the test cases.
  oct::OctreeConfig oc = train::octree_config_from(artifacts.cfg);
  std::vector<double> pooled_pred, pooled_target;
  for (std::size_t idx : artifacts.dataset->indices_of(train::Split::kTest)) {
    const train::CaseData& data = artifacts.dataset->cases[idx];
    model::PredictResult pred =
        model::predict(*artifacts.net, data.cloud, data.waveform, data.cloud.points,
                       data.record.times_ms, data.time_scale_ms(), oc);
    std::vector<double> pred_avg =
        eval::time_average_field(pred.velocities.data(), pred.n_times, pred.n_points);
    std::vector<double> tgt_avg = eval::time_average_field(
        data.record.velocities.data(), data.record.n_frames(), data.record.n_points);
    pooled_pred.insert(pooled_pred.end(), pred_avg.begin(), pred_avg.end());
    pooled_target.insert(pooled_target.end(), tgt_avg.begin(), tgt_avg.end());
  }
  eval::ErrorStats stats = eval::compute_stats(pooled_pred, pooled_target);

  double mean_speed = 0.0;
  for (std::size_t i = 0; i + 2 < pooled_target.size(); i += 3)
    mean_speed += std::sqrt(pooled_target[i] * pooled_target[i] +
                            pooled_target[i + 1] * pooled_target[i + 1] +
                            pooled_target[i + 2] * pooled_target[i + 2]);
  mean_speed /= static_cast<double>(pooled_target.size() / 3);

  artifacts.ready = true;
  double minutes = watch.seconds() / 60.0;
  bool pass = stats.r_squared >= 0.80 && stats.mean <= 0.15 * mean_speed &&
              minutes <= 60.0;
  return {pass,
          fmt("R^2 %.3f (>=0.80), MAE %.4f m/s (limit 0.15 x mean speed %.4f = %.4f), "
              "best epoch %d, %.1f min (limit 60)",
              stats.r_squared, stats.mean, mean_speed, 0.15 * mean_speed, fit.best_epoch,
              minutes)};
}

Outcome criterion_cost_model(const ExperimentArtifacts& artifacts) {
  if (!artifacts.ready)
    return {false, "skipped: the learning study did not produce a model"};
  std::vector<std::size_t> test_cases =
      artifacts.dataset->indices_of(train::Split::kTest);
  const train::CaseData& data = artifacts.dataset->cases[test_cases.front()];
  oct::OctreeConfig oc = train::octree_config_from(artifacts.cfg);

  eval::RuntimeReport fit_report =
      eval::benchmark(*artifacts.net, data, oc, {10000, 100000}, {10, 100}, 5);
  eval::RuntimeReport doubling_report =
      eval::benchmark(*artifacts.net, data, oc, {10000, 20000}, {10}, 8);

  double t1 = 0.0, t2 = 0.0;
  for (const auto& cell : doubling_report.grid) {
    if (cell.n_spatial == 10000) t1 = cell.spatial_ms;
    if (cell.n_spatial == 20000) t2 = cell.spatial_ms;
  }
  double doubling = t1 > 0.0 ? t2 / t1 : 0.0;

  bool pass = fit_report.fit_max_rel_residual < 0.20 && doubling >= 1.6 && doubling <= 2.4;
  return {pass, fmt("cost model t = %.0f + (N_s/1e6) %.0f + (N_t/1e2) %.1f ms, max rel "
                    "residual %.1f%% (limit 20%%); spatial doubling factor %.2f "
                    "(range [1.6, 2.4])",
                    fit_report.fit_net_ms, fit_report.fit_spatial_ms_per_1e6,
                    fit_report.fit_temporal_ms_per_1e2,
                    100.0 * fit_report.fit_max_rel_residual, doubling)};
}

// ---------------------------------------------------------------------------
// Criterion 8 — byte-identical reruns of the CLI pipeline
// ---------------------------------------------------------------------------

int run_command(const std::string& cmd) {
  return std::system((cmd + " > /dev/null 2>&1").c_str());
}

Outcome criterion_determinism() {
  fs::path dir = workspace() / "determinism";
  fs::create_directories(dir);
  fs::path cfg_path = dir / "small.cfg";
  {
    std::ofstream cfg(cfg_path);
    cfg << "n_generations_min = 1\nn_generations_max = 1\n"
           "target_spacing_mm = 0.9\nfinest_pitch_mm = 2\n"
           "latent_dim = 4\nunet_channels = 2,3,3,4\nhead_hidden = 6\n"
           "trunk_width = 5\nbc_input_len = 32\nwaveform_samples = 64\n"
           "batch_time_points = 4\nbatch_spatial_points = 64\n"
           "max_epochs = 2\naugment = off\n";
  }
  std::string bin = OCTOFLOW_BIN;
  std::string base = " --config " + cfg_path.string();

  for (const char* name : {"g1", "g2"}) {
    std::string cmd = bin + " gen-data --out-dir " + (dir / name).string() +
                      " --cases 4 --seed 11" + base;
    if (run_command(cmd) != 0) return {false, "gen-data run failed: " + cmd};
  }
  if (dir_bytes(dir / "g1") != dir_bytes(dir / "g2"))
    return {false, "two gen-data runs with the same seed differ"};

  for (const char* name : {"t1", "t2"}) {
    fs::create_directories(dir / name);
    std::string cmd = bin + " train --data " + (dir / "g1").string() + " --out " +
                      (dir / name / "model.ckpt").string() + " --max-epochs 1 --seed 7" +
                      base;
    if (run_command(cmd) != 0) return {false, "train run failed: " + cmd};
  }
  if (dir_bytes(dir / "t1") != dir_bytes(dir / "t2"))
    return {false, "two train runs with the same seed differ"};

  return {true, "gen-data and train reruns are byte-identical (4 cases, 1 epoch)"};
}

// ---------------------------------------------------------------------------
// Criterion 9 — file format round trips
// ---------------------------------------------------------------------------

Outcome criterion_round_trips() {
  fs::path dir = workspace() / "formats";
  fs::create_directories(dir);

  vasctree::TreeGenConfig tg;
  tg.n_generations = 2;
  vasctree::VesselTree tree = vasctree::generate_tree(tg, 3);

  // Vessel tree text format.
  fs::path tree_a = dir / "tree_a.txt", tree_b = dir / "tree_b.txt";
  vasctree::write_tree(tree_a.string(), tree);
  vasctree::write_tree(tree_b.string(), vasctree::read_tree(tree_a.string()));
  if (file_bytes(tree_a) != file_bytes(tree_b))
    return {false, "tree text round trip changed bytes"};

  // Point cloud (OCLD1).
  vasctree::PointCloud cloud = vasctree::sample_lumen_points(tree, 0.7, 5);
  fs::path cloud_a = dir / "cloud_a.bin", cloud_b = dir / "cloud_b.bin";
  oracle::write_cloud(cloud_a.string(), cloud);
  oracle::write_cloud(cloud_b.string(), oracle::read_cloud(cloud_a.string()));
  if (file_bytes(cloud_a) != file_bytes(cloud_b))
    return {false, "cloud (OCLD1) round trip changed bytes"};

  // Velocity record (OFLOW1).
  hemo::InflowWaveform wf = hemo::synth_inflow_waveform(4.4, 885.0, hemo::AgeGroup::kYoung, 64);
  hemo::InjectionParams inj;
  hemo::PhysicsConstants constants;
  oracle::SimulationRecord record =
      oracle::generate_record(tree, cloud, wf, inj, constants, 1, 2.0);
  fs::path rec_a = dir / "record_a.bin", rec_b = dir / "record_b.bin";
  oracle::write_record(rec_a.string(), record);
  oracle::write_record(rec_b.string(), oracle::read_record(rec_a.string()));
  if (file_bytes(rec_a) != file_bytes(rec_b))
    return {false, "record (OFLOW1) round trip changed bytes"};

  // Checkpoint (OCKPT1).
  model::SurrogateModel net(tiny_model_config(), 17);
  fs::path ckpt_a = dir / "model_a.ckpt", ckpt_b = dir / "model_b.ckpt";
  net.save(ckpt_a.string());
  model::SurrogateModel loaded(tiny_model_config(), 0);
  loaded.load(ckpt_a.string());
  loaded.save(ckpt_b.string());
  if (file_bytes(ckpt_a) != file_bytes(ckpt_b))
    return {false, "checkpoint (OCKPT1) round trip changed bytes"};

  // Run configuration text.
  config::RunConfig cfg = config::RunConfig::defaults();
  cfg.set_real("target_spacing_mm", 0.62);
  fs::path cfg_a = dir / "run_a.cfg", cfg_b = dir / "run_b.cfg";
  cfg.save(cfg_a.string());
  config::RunConfig::load(cfg_a.string()).save(cfg_b.string());
  if (file_bytes(cfg_a) != file_bytes(cfg_b))
    return {false, "config round trip changed bytes"};

  return {true, "tree text, OCLD1, OFLOW1, OCKPT1 and config files survive "
                "write -> read -> write bit-exactly"};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  if (argc > 1) {
    std::stringstream ss(argv[1]);
    std::string item;
    while (std::getline(ss, item, ',')) only.insert(std::atoi(item.c_str()));
  }
  auto enabled = [&](int n) { return only.empty() || only.count(n) > 0; };

  struct Entry {
    int number;
    const char* title;
    std::function<Outcome()> run;
  };
  ExperimentArtifacts artifacts;
  std::vector<Entry> entries = {
      {1, "gradient suite", criterion_gradients},
      {2, "octree structural suite", criterion_octree},
      {3, "sparse/dense convolution equivalence", criterion_sparse_equiv},
      {4, "operator head", criterion_operator_head},
      {5, "boundary-condition and oracle physics", criterion_physics},
      {6, "desk-scale learning study", [&] { return criterion_learning(artifacts); }},
      {7, "runtime cost model", [&] { return criterion_cost_model(artifacts); }},
      {8, "deterministic CLI reruns", criterion_determinism},
      {9, "format round trips", criterion_round_trips},
  };

  int failures = 0;
  for (const Entry& entry : entries) {
    if (!enabled(entry.number)) continue;
    Outcome outcome;
    try {
      outcome = entry.run();
    } catch (const std::exception& e) {
      outcome = {false, std::string("exception: ") + e.what()};
    }
    if (!outcome.pass) ++failures;
    std::printf("criterion %d: %s - %s: %s\n", entry.number,
                outcome.pass ? "PASS" : "FAIL", entry.title, outcome.detail.c_str());
    std::fflush(stdout);
  }
  if (failures == 0)
    std::printf("acceptance: all criteria passed\n");
  else
    std::printf("acceptance: %d criteria failed\n", failures);
  return failures;
}

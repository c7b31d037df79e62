#include "octoflow/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "octoflow/rng.hpp"

namespace octoflow::train {

namespace fs = std::filesystem;

namespace {

constexpr double kTwoPi = 6.28318530717958647692;

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

// First k elements of a partial Fisher-Yates shuffle of [0, n), sorted.
std::vector<std::int64_t> sample_indices(std::mt19937_64& rng, std::int64_t n,
                                         std::int64_t k) {
  std::vector<std::int64_t> all(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
  if (k >= n) return all;
  for (std::int64_t i = 0; i < k; ++i) {
    std::int64_t j = i + static_cast<std::int64_t>(
                             uniform_index(rng, static_cast<std::uint64_t>(n - i)));
    std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(j)]);
  }
  all.resize(static_cast<std::size_t>(k));
  std::sort(all.begin(), all.end());
  return all;
}

}  // namespace

std::string split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  fail("unreachable split");
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  fail("unknown split '" + name + "' (expected train|val|test)");
}

std::vector<std::size_t> Dataset::indices_of(Split which) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < splits.size(); ++i)
    if (splits[i] == which) out.push_back(i);
  return out;
}

void split_counts(int n_cases, int& n_train, int& n_val, int& n_test) {
  if (n_cases < 4) fail("dataset split: need at least 4 cases to populate all splits");
  int held = std::max(1, static_cast<int>(std::llround(n_cases / 9.0)));
  n_val = held;
  n_test = held;
  n_train = n_cases - 2 * held;
  if (n_train < 2) fail("dataset split: too few cases for a training split");
}

vasctree::TreeGenConfig tree_config_from(const config::RunConfig& cfg) {
  vasctree::TreeGenConfig t;
  t.root_radius_min_mm = cfg.real("root_radius_min_mm");
  t.root_radius_max_mm = cfg.real("root_radius_max_mm");
  t.bif_angle_min_deg = cfg.real("bif_angle_min_deg");
  t.bif_angle_max_deg = cfg.real("bif_angle_max_deg");
  t.radius_decay_exponent = cfg.real("radius_decay_exponent");
  t.extension_factor = cfg.real("extension_factor");
  t.segment_length_over_radius = cfg.real("segment_length_over_radius");
  t.n_generations = static_cast<int>(cfg.integer("n_generations_min"));
  return t;
}

oct::OctreeConfig octree_config_from(const config::RunConfig& cfg) {
  oct::OctreeConfig o;
  o.max_depth = static_cast<int>(cfg.integer("octree_max_depth"));
  o.finest_pitch_mm = cfg.real("finest_pitch_mm");
  return o;
}

model::ModelConfig model_config_from(const config::RunConfig& cfg) {
  model::ModelConfig m;
  m.latent_dim = static_cast<int>(cfg.integer("latent_dim"));
  m.unet_channels.clear();
  for (std::int64_t c : cfg.int_list("unet_channels"))
    m.unet_channels.push_back(static_cast<int>(c));
  m.head_hidden = static_cast<int>(cfg.integer("head_hidden"));
  m.trunk_width = static_cast<int>(cfg.integer("trunk_width"));
  m.lrelu_slope = cfg.real("lrelu_slope");
  m.bc_input_len = static_cast<int>(cfg.integer("bc_input_len"));
  m.velocity_scale_mps = cfg.real("velocity_scale_mps");
  m.validate();
  return m;
}

hemo::PhysicsConstants physics_from(const config::RunConfig& cfg) {
  hemo::PhysicsConstants p;
  p.kinematic_viscosity_m2s = cfg.real("kinematic_viscosity_m2s");
  p.density_kgm3 = cfg.real("density_kgm3");
  p.mixing_factor = cfg.real("mixing_factor");
  return p;
}

Dataset build_dataset(int n_cases, const config::RunConfig& cfg, std::uint64_t seed) {
  if (n_cases < 3) fail("dataset: need at least 3 cases");
  int gen_min = static_cast<int>(cfg.integer("n_generations_min"));
  int gen_max = static_cast<int>(cfg.integer("n_generations_max"));
  if (gen_min < 1 || gen_max < gen_min) fail("dataset: invalid generation range");

  const double means[3] = {3.4, 4.4, 5.4};
  const double cycles[3] = {785.0, 885.0, 985.0};
  const hemo::AgeGroup ages[2] = {hemo::AgeGroup::kYoung, hemo::AgeGroup::kElderly};
  int waveform_samples = static_cast<int>(cfg.integer("waveform_samples"));

  Dataset dataset;
  dataset.cases.resize(static_cast<std::size_t>(n_cases));
  for (int i = 0; i < n_cases; ++i) {
    CaseData& c = dataset.cases[static_cast<std::size_t>(i)];
    std::uint64_t case_seed = derive_seed(seed, static_cast<std::uint64_t>(i));
    std::mt19937_64 rng(case_seed);

    char id[32];
    std::snprintf(id, sizeof(id), "case_%03d", i);
    c.id = id;

    vasctree::TreeGenConfig tree_cfg = tree_config_from(cfg);
    tree_cfg.n_generations =
        gen_min + static_cast<int>(uniform_index(
                      rng, static_cast<std::uint64_t>(gen_max - gen_min + 1)));
    vasctree::VesselTree bare =
        vasctree::generate_tree(tree_cfg, derive_seed(case_seed, 101));
    c.tree = vasctree::add_flow_extensions(bare, tree_cfg.extension_factor);
    c.cloud = vasctree::sample_lumen_points(c.tree, cfg.real("target_spacing_mm"),
                                            derive_seed(case_seed, 102));

    // Boundary conditions drawn uniformly from the 3 x 3 x 2 study grid.
    double mean = means[uniform_index(rng, 3)];
    double cycle = cycles[uniform_index(rng, 3)];
    hemo::AgeGroup age = ages[uniform_index(rng, 2)];
    c.waveform = hemo::synth_inflow_waveform(mean, cycle, age, waveform_samples);

    double t_s = cfg.real("t_s_ms");
    c.injection.t_s_ms = t_s < 0.0 ? cycle : t_s;  // auto: one settling cycle
    c.injection.t_l_ms = cfg.real("t_l_ms");
    c.injection.q_ca_max_mls = cfg.real("q_ca_max_mls");
    c.constants = physics_from(cfg);
    c.n_cycles = static_cast<int>(cfg.integer("n_cycles"));

    c.record = oracle::generate_record(c.tree, c.cloud, c.waveform, c.injection,
                                       c.constants, c.n_cycles, cfg.real("split_exponent"));
  }

  int n_train = 0, n_val = 0, n_test = 0;
  split_counts(n_cases, n_train, n_val, n_test);
  dataset.splits.resize(static_cast<std::size_t>(n_cases));
  for (int i = 0; i < n_cases; ++i)
    dataset.splits[static_cast<std::size_t>(i)] =
        i < n_train ? Split::kTrain : (i < n_train + n_val ? Split::kVal : Split::kTest);
  return dataset;
}

void save_dataset(const std::string& dir, const Dataset& dataset,
                  const config::RunConfig& cfg) {
  fs::create_directories(dir);
  std::ofstream splits(fs::path(dir) / "splits.txt", std::ios::binary);
  if (!splits) fail("cannot open for writing: " + dir + "/splits.txt");
  for (std::size_t i = 0; i < dataset.cases.size(); ++i) {
    const CaseData& c = dataset.cases[i];
    fs::path case_dir = fs::path(dir) / c.id;
    fs::create_directories(case_dir);
    vasctree::write_tree((case_dir / "tree.txt").string(), c.tree);
    oracle::write_cloud((case_dir / "cloud.bin").string(), c.cloud);
    oracle::write_record((case_dir / "record.bin").string(), c.record);

    config::RunConfig bc = cfg;
    bc.set_real("mean_flow_mls", c.waveform.mean_flow_mls);
    bc.set_real("cycle_ms", c.waveform.cycle_length_ms);
    bc.set("age", hemo::age_group_name(c.waveform.age_group));
    bc.set_real("t_s_ms", c.injection.t_s_ms);
    bc.set_real("t_l_ms", c.injection.t_l_ms);
    bc.set_real("q_ca_max_mls", c.injection.q_ca_max_mls);
    bc.set_real("mixing_factor", c.constants.mixing_factor);
    bc.set_integer("n_cycles", c.n_cycles);
    bc.set_integer("waveform_samples",
                   static_cast<std::int64_t>(c.waveform.samples_mls.size()));
    bc.save((case_dir / "bc.cfg").string());

    splits << c.id << " " << split_name(dataset.splits[i]) << "\n";
  }
  if (!splits) fail("write failed: " + dir + "/splits.txt");
}

CaseData load_case(const std::string& case_dir, const std::string& id) {
  fs::path cd(case_dir);
  CaseData c;
  c.id = id;
  c.tree = vasctree::read_tree((cd / "tree.txt").string());
  c.cloud = oracle::read_cloud((cd / "cloud.bin").string());
  c.record = oracle::read_record((cd / "record.bin").string());
  if (c.record.n_points != static_cast<std::int64_t>(c.cloud.size()))
    fail("dataset case " + id + ": record point count does not match cloud");

  config::RunConfig bc = config::RunConfig::load((cd / "bc.cfg").string());
  c.waveform = hemo::synth_inflow_waveform(
      bc.real("mean_flow_mls"), bc.real("cycle_ms"),
      hemo::age_group_from_name(bc.str("age")),
      static_cast<int>(bc.integer("waveform_samples")));
  c.injection.t_s_ms = bc.real("t_s_ms");
  if (c.injection.t_s_ms < 0.0) c.injection.t_s_ms = bc.real("cycle_ms");
  c.injection.t_l_ms = bc.real("t_l_ms");
  c.injection.q_ca_max_mls = bc.real("q_ca_max_mls");
  c.constants = physics_from(bc);
  c.n_cycles = static_cast<int>(bc.integer("n_cycles"));
  return c;
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream splits(fs::path(dir) / "splits.txt");
  if (!splits) fail("cannot open dataset: " + dir + "/splits.txt missing");
  Dataset dataset;
  std::string id, split;
  while (splits >> id >> split) {
    dataset.cases.push_back(load_case((fs::path(dir) / id).string(), id));
    dataset.splits.push_back(split_from_name(split));
  }
  if (dataset.cases.empty()) fail("dataset: no cases listed in " + dir + "/splits.txt");
  return dataset;
}

RigidTransform identity_transform() { return RigidTransform{Mat3::identity(), Vec3{}}; }

RigidTransform sample_rigid_transform(std::mt19937_64& rng, double max_translation_mm) {
  // Uniform unit quaternion (Shoemake's method), then quaternion -> matrix.
  double u1 = uniform01(rng), u2 = uniform01(rng), u3 = uniform01(rng);
  double qx = std::sqrt(1.0 - u1) * std::sin(kTwoPi * u2);
  double qy = std::sqrt(1.0 - u1) * std::cos(kTwoPi * u2);
  double qz = std::sqrt(u1) * std::sin(kTwoPi * u3);
  double qw = std::sqrt(u1) * std::cos(kTwoPi * u3);

  RigidTransform t;
  double* m = t.rotation.m;
  m[0] = 1 - 2 * (qy * qy + qz * qz);
  m[1] = 2 * (qx * qy - qz * qw);
  m[2] = 2 * (qx * qz + qy * qw);
  m[3] = 2 * (qx * qy + qz * qw);
  m[4] = 1 - 2 * (qx * qx + qz * qz);
  m[5] = 2 * (qy * qz - qx * qw);
  m[6] = 2 * (qx * qz - qy * qw);
  m[7] = 2 * (qy * qz + qx * qw);
  m[8] = 1 - 2 * (qx * qx + qy * qy);
  t.translation = {uniform(rng, -max_translation_mm, max_translation_mm),
                   uniform(rng, -max_translation_mm, max_translation_mm),
                   uniform(rng, -max_translation_mm, max_translation_mm)};
  return t;
}

vasctree::PointCloud transform_cloud(const vasctree::PointCloud& cloud,
                                     const RigidTransform& t) {
  vasctree::PointCloud out = cloud;
  for (Vec3& p : out.points) p = t.rotation.apply(p) + t.translation;
  return out;  // wall distances are invariant under rigid motion
}

TrainConfig TrainConfig::from_run_config(const config::RunConfig& cfg) {
  TrainConfig t;
  t.lr = cfg.real("lr");
  t.batch_time_points = static_cast<int>(cfg.integer("batch_time_points"));
  t.batch_spatial_points = static_cast<int>(cfg.integer("batch_spatial_points"));
  t.max_epochs = static_cast<int>(cfg.integer("max_epochs"));
  t.augment = cfg.str("augment") == "on";
  t.seed = static_cast<std::uint64_t>(cfg.integer("seed"));
  t.octree = octree_config_from(cfg);
  return t;
}

Trainer::Trainer(model::SurrogateModel& model, const TrainConfig& cfg)
    : model_(&model), cfg_(cfg) {}

double Trainer::training_step(const CaseData& data, std::mt19937_64& rng) {
  RigidTransform t = cfg_.augment ? sample_rigid_transform(rng, cfg_.max_translation_mm)
                                  : identity_transform();

  std::vector<std::int64_t> frame_idx =
      sample_indices(rng, data.record.n_frames(), cfg_.batch_time_points);
  std::vector<std::int64_t> point_idx =
      sample_indices(rng, static_cast<std::int64_t>(data.cloud.size()),
                     cfg_.batch_spatial_points);
  std::int64_t n_t = static_cast<std::int64_t>(frame_idx.size());
  std::int64_t n_s = static_cast<std::int64_t>(point_idx.size());

  vasctree::PointCloud cloud = transform_cloud(data.cloud, t);
  oct::Octree tree = oct::Octree::build(cloud, cfg_.octree);

  ad::Tape tape;
  model::TapeBinding net(tape, *model_, true);
  const model::ModelConfig& mc = model_->config();

  std::vector<double> wf = model::resample_waveform(data.waveform, mc.bc_input_len);
  ad::ValueId bc = model::bc_net_forward(
      net, tape.leaf(ad::Tensor({1, mc.bc_input_len}, std::move(wf))));

  std::int64_t n_cloud = static_cast<std::int64_t>(cloud.size());
  ad::Tensor df({n_cloud, 1});
  for (std::int64_t i = 0; i < n_cloud; ++i)
    df.data[static_cast<std::size_t>(i)] = cloud.wall_distance[static_cast<std::size_t>(i)];
  ad::ValueId features = model::assemble_features(net, tape.leaf(std::move(df)), bc);
  ad::ValueId latent = model::unet_forward(net, &tree, tape.octree_avg_features(features, &tree));

  std::vector<Vec3> queries(static_cast<std::size_t>(n_s));
  for (std::int64_t i = 0; i < n_s; ++i)
    queries[static_cast<std::size_t>(i)] =
        cloud.points[static_cast<std::size_t>(point_idx[static_cast<std::size_t>(i)])];
  ad::ValueId spatial =
      model::spatial_head(net, tape.octree_interpolate(latent, &tree, queries));

  ad::Tensor times({n_t, 1});
  double time_scale = data.time_scale_ms();
  for (std::int64_t i = 0; i < n_t; ++i)
    times.data[static_cast<std::size_t>(i)] =
        data.record.times_ms[static_cast<std::size_t>(frame_idx[static_cast<std::size_t>(i)])] /
        time_scale;
  ad::ValueId temporal = model::trunk_forward(net, tape.leaf(std::move(times)));

  ad::ValueId prediction = model::evaluate_velocity(net, spatial, temporal);

  // Targets: rotated oracle velocities in normalized units, [3 x T x S].
  ad::Tensor target({3, n_t, n_s});
  double inv_scale = 1.0 / mc.velocity_scale_mps;
  for (std::int64_t ti = 0; ti < n_t; ++ti) {
    const double* frame = data.record.frame(frame_idx[static_cast<std::size_t>(ti)]);
    for (std::int64_t si = 0; si < n_s; ++si) {
      const double* u = frame + point_idx[static_cast<std::size_t>(si)] * 3;
      Vec3 v = t.rotation.apply({u[0], u[1], u[2]});
      target.data[static_cast<std::size_t>(0 * n_t * n_s + ti * n_s + si)] = v.x * inv_scale;
      target.data[static_cast<std::size_t>(1 * n_t * n_s + ti * n_s + si)] = v.y * inv_scale;
      target.data[static_cast<std::size_t>(2 * n_t * n_s + ti * n_s + si)] = v.z * inv_scale;
    }
  }
  ad::ValueId loss = tape.mae_loss(prediction, tape.leaf(std::move(target)));

  double loss_value = tape.value(loss).data[0];
  if (!std::isfinite(loss_value))
    throw NumericError("training: non-finite loss at step " + std::to_string(step_ + 1));

  tape.backward(loss);
  ++step_;
  ad::AdamConfig adam;
  adam.lr = cfg_.lr;
  std::vector<model::Param>& params = model_->params();
  for (std::size_t i = 0; i < params.size(); ++i)
    ad::adam_update(params[i].value, tape.grad(net.id_of(i)), params[i].adam, step_, adam);

  return loss_value * mc.velocity_scale_mps;
}

double Trainer::evaluate_mae(const Dataset& dataset, Split which) {
  double abs_sum = 0.0;
  std::int64_t count = 0;
  for (std::size_t ci : dataset.indices_of(which)) {
    const CaseData& c = dataset.cases[ci];
    model::PredictResult pred =
        model::predict(*model_, c.cloud, c.waveform, c.cloud.points, c.record.times_ms,
                       c.time_scale_ms(), cfg_.octree);
    const std::vector<double>& target = c.record.velocities;
    if (pred.velocities.size() != target.size())
      fail("evaluate: prediction size mismatch for case " + c.id);
    for (std::size_t i = 0; i < target.size(); ++i)
      abs_sum += std::abs(pred.velocities[i] - target[i]);
    count += static_cast<std::int64_t>(target.size());
  }
  if (count == 0) fail("evaluate: split has no cases");
  return abs_sum / static_cast<double>(count);
}

FitResult Trainer::fit(const Dataset& dataset) {
  std::vector<std::size_t> train_cases = dataset.indices_of(Split::kTrain);
  if (train_cases.empty()) fail("fit: dataset has no training cases");
  std::mt19937_64 rng(cfg_.seed);

  FitResult result;
  result.best_val_mae = std::numeric_limits<double>::infinity();
  std::vector<ad::Tensor> best_params;

  for (int epoch = 1; epoch <= cfg_.max_epochs; ++epoch) {
    // Per-epoch shuffle of the case order.
    std::vector<std::size_t> order = train_cases;
    for (std::size_t i = 0; i + 1 < order.size(); ++i) {
      std::size_t j = i + static_cast<std::size_t>(
                              uniform_index(rng, order.size() - i));
      std::swap(order[i], order[j]);
    }

    double loss_sum = 0.0;
    for (std::size_t ci : order) loss_sum += training_step(dataset.cases[ci], rng);

    EpochLog row;
    row.epoch = epoch;
    row.train_mae = loss_sum / static_cast<double>(order.size());
    row.val_mae = evaluate_mae(dataset, Split::kVal);
    if (!std::isfinite(row.val_mae))
      throw NumericError("training: non-finite validation error at epoch " +
                         std::to_string(epoch));
    result.log.push_back(row);

    if (row.val_mae < result.best_val_mae) {
      result.best_val_mae = row.val_mae;
      result.best_epoch = epoch;
      best_params.clear();
      for (const model::Param& p : model_->params()) best_params.push_back(p.value);
    }
  }

  std::vector<model::Param>& params = model_->params();
  for (std::size_t i = 0; i < params.size(); ++i) params[i].value = best_params[i];
  return result;
}

void write_train_log_csv(const std::string& path, const std::vector<EpochLog>& log) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail("cannot open for writing: " + path);
  f << "epoch,train_mae,val_mae\n";
  for (const EpochLog& row : log) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g\n", row.epoch, row.train_mae,
                  row.val_mae);
    f << buf;
  }
  if (!f) fail("write failed: " + path);
}

}  // namespace octoflow::train

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "doctest.h"
#include "octoflow/config.hpp"
#include "octoflow/model.hpp"
#include "octoflow/rng.hpp"
#include "octoflow/train.hpp"
#include "octoflow/vasctree.hpp"

using namespace octoflow;

namespace {

// Small trees, coarse sampling, and a tiny model keep every test fast.
config::RunConfig small_run_config() {
  config::RunConfig cfg = config::RunConfig::defaults();
  cfg.set_integer("n_generations_min", 1);
  cfg.set_integer("n_generations_max", 1);
  cfg.set_real("target_spacing_mm", 0.9);
  cfg.set_real("finest_pitch_mm", 2.0);
  cfg.set_integer("latent_dim", 4);
  cfg.set("unet_channels", "2,3,3,4");
  cfg.set_integer("head_hidden", 6);
  cfg.set_integer("trunk_width", 5);
  cfg.set_integer("bc_input_len", 32);
  cfg.set_integer("waveform_samples", 64);
  cfg.set_integer("batch_time_points", 4);
  cfg.set_integer("batch_spatial_points", 64);
  cfg.set_integer("max_epochs", 2);
  return cfg;
}

std::map<std::string, std::vector<char>> dir_contents(const std::string& root) {
  namespace fs = std::filesystem;
  std::map<std::string, std::vector<char>> out;
  for (const fs::directory_entry& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    out[fs::relative(e.path(), root).string()] = {std::istreambuf_iterator<char>(in),
                                                  std::istreambuf_iterator<char>()};
  }
  return out;
}

std::string fresh_dir(const std::string& tag) {
  namespace fs = std::filesystem;
  fs::path p = fs::temp_directory_path() / ("octoflow_train_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

}  // namespace

TEST_CASE("split sizing follows the one-ninth rule and rejects tiny datasets") {
  int tr = 0, va = 0, te = 0;
  train::split_counts(16, tr, va, te);
  CHECK(tr == 12);
  CHECK(va == 2);
  CHECK(te == 2);
  train::split_counts(45, tr, va, te);
  CHECK(tr == 35);
  CHECK(va == 5);
  CHECK(te == 5);
  train::split_counts(4, tr, va, te);
  CHECK(tr == 2);
  CHECK(va == 1);
  CHECK(te == 1);
  train::split_counts(9, tr, va, te);
  CHECK(tr == 7);
  CHECK(va == 1);
  CHECK(te == 1);
  CHECK_THROWS(train::split_counts(3, tr, va, te));
  CHECK_THROWS(train::split_counts(0, tr, va, te));
}

TEST_CASE("split names round-trip") {
  for (train::Split s : {train::Split::kTrain, train::Split::kVal, train::Split::kTest})
    CHECK(train::split_from_name(train::split_name(s)) == s);
  CHECK_THROWS(train::split_from_name("holdout"));
}

TEST_CASE("dataset generation is deterministic and case records are consistent") {
  config::RunConfig cfg = small_run_config();
  train::Dataset a = train::build_dataset(4, cfg, 77);
  train::Dataset b = train::build_dataset(4, cfg, 77);
  train::Dataset c = train::build_dataset(4, cfg, 78);
  REQUIRE(a.cases.size() == 4);
  REQUIRE(a.splits.size() == 4);
  CHECK(a.indices_of(train::Split::kTrain).size() == 2);
  CHECK(a.indices_of(train::Split::kVal).size() == 1);
  CHECK(a.indices_of(train::Split::kTest).size() == 1);

  bool any_difference_to_c = false;
  for (std::size_t i = 0; i < a.cases.size(); ++i) {
    const train::CaseData& ca = a.cases[i];
    CHECK(vasctree::tree_to_string(ca.tree) == vasctree::tree_to_string(b.cases[i].tree));
    CHECK(ca.record.velocities == b.cases[i].record.velocities);
    CHECK(ca.waveform.samples_mls == b.cases[i].waveform.samples_mls);
    if (vasctree::tree_to_string(ca.tree) != vasctree::tree_to_string(c.cases[i].tree))
      any_difference_to_c = true;

    CHECK(ca.cloud.size() > 0);
    CHECK(ca.record.n_points == static_cast<std::int64_t>(ca.cloud.size()));
    CHECK(ca.record.frame_dt_ms == doctest::Approx(1000.0 / 30.0).epsilon(1e-12));
    std::int64_t want_frames =
        static_cast<std::int64_t>(std::floor(ca.n_cycles * ca.waveform.cycle_length_ms /
                                             (1000.0 / 30.0))) +
        1;
    CHECK(static_cast<std::int64_t>(ca.record.times_ms.size()) == want_frames);
    CHECK(ca.time_scale_ms() == doctest::Approx(ca.n_cycles * ca.waveform.cycle_length_ms));
    CHECK_NOTHROW(ca.waveform.validate());
    CHECK_NOTHROW(ca.tree.validate());
  }
  CHECK(any_difference_to_c);
}

TEST_CASE("rigid augmentation keeps distances and wall clearances") {
  std::mt19937_64 rng(5);
  config::RunConfig cfg = small_run_config();
  train::Dataset ds = train::build_dataset(4, cfg, 21);
  const vasctree::PointCloud& cloud = ds.cases[0].cloud;

  train::RigidTransform id = train::identity_transform();
  vasctree::PointCloud same = train::transform_cloud(cloud, id);
  for (std::size_t i = 0; i < cloud.size(); ++i)
    CHECK((same.points[i] - cloud.points[i]).norm() == 0.0);

  for (int trial = 0; trial < 3; ++trial) {
    train::RigidTransform t = train::sample_rigid_transform(rng, 5.0);
    vasctree::PointCloud moved = train::transform_cloud(cloud, t);
    REQUIRE(moved.size() == cloud.size());
    CHECK(moved.wall_distance == cloud.wall_distance);
    std::mt19937_64 pick(trial);
    for (int pair = 0; pair < 50; ++pair) {
      std::size_t i = uniform_index(pick, cloud.size());
      std::size_t j = uniform_index(pick, cloud.size());
      double before = (cloud.points[i] - cloud.points[j]).norm();
      double after = (moved.points[i] - moved.points[j]).norm();
      CHECK(after == doctest::Approx(before).epsilon(1e-9));
    }
    CHECK(t.translation.norm() <= std::sqrt(3.0) * 5.0 + 1e-12);
  }
}

TEST_CASE("a zero-initialized model scores the mean absolute target velocity") {
  config::RunConfig cfg = small_run_config();
  train::Dataset ds = train::build_dataset(4, cfg, 33);
  model::SurrogateModel m(train::model_config_from(cfg), 1);
  train::TrainConfig tc = train::TrainConfig::from_run_config(cfg);
  train::Trainer trainer(m, tc);

  double got = trainer.evaluate_mae(ds, train::Split::kVal);
  double abs_sum = 0.0;
  std::int64_t count = 0;
  for (std::size_t ci : ds.indices_of(train::Split::kVal)) {
    for (double v : ds.cases[ci].record.velocities) {
      abs_sum += std::abs(v);
      ++count;
    }
  }
  CHECK(got == doctest::Approx(abs_sum / static_cast<double>(count)).epsilon(1e-12));
}

TEST_CASE("a zero learning rate leaves every parameter bit-identical") {
  config::RunConfig cfg = small_run_config();
  train::Dataset ds = train::build_dataset(4, cfg, 55);
  model::SurrogateModel m(train::model_config_from(cfg), 2);
  train::TrainConfig tc = train::TrainConfig::from_run_config(cfg);
  tc.lr = 0.0;
  train::Trainer trainer(m, tc);

  std::vector<std::vector<double>> before;
  for (const model::Param& p : m.params()) before.push_back(p.value.data);
  std::mt19937_64 rng(9);
  trainer.training_step(ds.cases[0], rng);
  trainer.training_step(ds.cases[1], rng);
  CHECK(trainer.steps_taken() == 2);
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    REQUIRE(m.params()[i].value.data.size() == before[i].size());
    CHECK(std::memcmp(m.params()[i].value.data.data(), before[i].data(),
                      before[i].size() * sizeof(double)) == 0);
  }
}

TEST_CASE("fitting lowers the training loss and tracks the best epoch") {
  config::RunConfig cfg = small_run_config();
  cfg.set_integer("max_epochs", 6);
  cfg.set("augment", "off");
  train::Dataset ds = train::build_dataset(4, cfg, 91);
  model::SurrogateModel m(train::model_config_from(cfg), 3);
  train::TrainConfig tc = train::TrainConfig::from_run_config(cfg);
  train::Trainer trainer(m, tc);
  train::FitResult fit = trainer.fit(ds);

  REQUIRE(fit.log.size() == 6);
  double best = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  for (const train::EpochLog& e : fit.log) {
    CHECK(std::isfinite(e.train_mae));
    CHECK(std::isfinite(e.val_mae));
    if (e.val_mae < best) {
      best = e.val_mae;
      best_epoch = e.epoch;
    }
  }
  CHECK(fit.best_epoch == best_epoch);
  CHECK(fit.best_val_mae == doctest::Approx(best));
  CHECK(fit.log.back().train_mae < fit.log.front().train_mae);
  CHECK(trainer.steps_taken() == 6 * 2);

  // fit() must leave the model at the best-validation parameters.
  train::Trainer probe(m, tc);
  CHECK(probe.evaluate_mae(ds, train::Split::kVal) == doctest::Approx(best).epsilon(1e-12));
}

TEST_CASE("two identically seeded runs produce identical logs and weights") {
  config::RunConfig cfg = small_run_config();
  cfg.set_integer("max_epochs", 3);
  train::Dataset ds = train::build_dataset(4, cfg, 13);

  auto run = [&](model::SurrogateModel& m) {
    train::TrainConfig tc = train::TrainConfig::from_run_config(cfg);
    tc.seed = 17;
    train::Trainer trainer(m, tc);
    return trainer.fit(ds);
  };
  model::SurrogateModel m1(train::model_config_from(cfg), 4);
  model::SurrogateModel m2(train::model_config_from(cfg), 4);
  train::FitResult f1 = run(m1);
  train::FitResult f2 = run(m2);

  REQUIRE(f1.log.size() == f2.log.size());
  for (std::size_t i = 0; i < f1.log.size(); ++i) {
    CHECK(f1.log[i].train_mae == f2.log[i].train_mae);
    CHECK(f1.log[i].val_mae == f2.log[i].val_mae);
  }
  for (std::size_t i = 0; i < m1.params().size(); ++i)
    CHECK(m1.params()[i].value.data == m2.params()[i].value.data);
}

TEST_CASE("datasets survive save and reload, and rewriting changes nothing") {
  config::RunConfig cfg = small_run_config();
  train::Dataset ds = train::build_dataset(4, cfg, 101);
  std::string d1 = fresh_dir("ds1");
  std::string d2 = fresh_dir("ds2");
  train::save_dataset(d1, ds, cfg);

  train::Dataset loaded = train::load_dataset(d1);
  REQUIRE(loaded.cases.size() == ds.cases.size());
  for (std::size_t i = 0; i < ds.cases.size(); ++i) {
    CHECK(loaded.cases[i].id == ds.cases[i].id);
    CHECK(loaded.splits[i] == ds.splits[i]);
    CHECK(vasctree::tree_to_string(loaded.cases[i].tree) ==
          vasctree::tree_to_string(ds.cases[i].tree));
    CHECK(loaded.cases[i].cloud.size() == ds.cases[i].cloud.size());
    // The record format stores the frame spacing in single precision, so
    // reloaded timestamps match only up to that rounding.
    REQUIRE(loaded.cases[i].record.times_ms.size() == ds.cases[i].record.times_ms.size());
    for (std::size_t k = 0; k < ds.cases[i].record.times_ms.size(); ++k)
      CHECK(std::abs(loaded.cases[i].record.times_ms[k] -
                     ds.cases[i].record.times_ms[k]) < 1e-2);
    CHECK(loaded.cases[i].waveform.cycle_length_ms == ds.cases[i].waveform.cycle_length_ms);
    CHECK(loaded.cases[i].n_cycles == ds.cases[i].n_cycles);
  }

  train::save_dataset(d2, loaded, cfg);
  CHECK(dir_contents(d1) == dir_contents(d2));

  train::CaseData single = train::load_case(d1 + "/" + ds.cases[2].id, ds.cases[2].id);
  CHECK(single.id == ds.cases[2].id);
  CHECK(single.cloud.size() == ds.cases[2].cloud.size());
  CHECK(single.waveform.cycle_length_ms == ds.cases[2].waveform.cycle_length_ms);

  std::filesystem::remove_all(d1);
  std::filesystem::remove_all(d2);
}

TEST_CASE("run-config adapters carry every relevant field") {
  config::RunConfig cfg = small_run_config();
  cfg.set("augment", "off");
  cfg.set_real("lr", 0.05);
  train::TrainConfig tc = train::TrainConfig::from_run_config(cfg);
  CHECK(tc.lr == 0.05);
  CHECK(tc.batch_time_points == 4);
  CHECK(tc.batch_spatial_points == 64);
  CHECK(tc.max_epochs == 2);
  CHECK_FALSE(tc.augment);
  CHECK(tc.octree.max_depth == 10);
  CHECK(tc.octree.finest_pitch_mm == 2.0);

  model::ModelConfig mc = train::model_config_from(cfg);
  CHECK(mc.latent_dim == 4);
  CHECK(mc.unet_channels == std::vector<int>{2, 3, 3, 4});
  CHECK(mc.bc_input_len == 32);

  hemo::PhysicsConstants pc = train::physics_from(cfg);
  CHECK(pc.mixing_factor == 0.3);
  CHECK(pc.kinematic_viscosity_m2s == 3.2e-6);
}

TEST_CASE("epoch logs render as csv with one row per epoch") {
  std::vector<train::EpochLog> log = {{1, 0.5, 0.6}, {2, 0.25, 0.5}};
  namespace fs = std::filesystem;
  std::string path = (fs::temp_directory_path() / "octoflow_train_log.csv").string();
  train::write_train_log_csv(path, log);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "epoch,train_mae,val_mae");
  int rows = 0;
  while (std::getline(in, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 2);
  fs::remove(path);
}

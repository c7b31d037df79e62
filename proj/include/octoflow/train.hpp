#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "octoflow/config.hpp"
#include "octoflow/flow_oracle.hpp"
#include "octoflow/hemo_bc.hpp"
#include "octoflow/model.hpp"
#include "octoflow/octree.hpp"
#include "octoflow/vasctree.hpp"

// Dataset construction (synthetic trees + oracle records), rigid-motion
// augmentation, and the ADAM training loop with best-on-validation selection.
namespace octoflow::train {

// Raised when training produces non-finite numbers.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct CaseData {
  std::string id;
  vasctree::VesselTree tree;
  vasctree::PointCloud cloud;
  hemo::InflowWaveform waveform;
  hemo::InjectionParams injection;
  hemo::PhysicsConstants constants;
  int n_cycles = 2;
  oracle::SimulationRecord record;

  double time_scale_ms() const { return n_cycles * waveform.cycle_length_ms; }
};

enum class Split { kTrain, kVal, kTest };
std::string split_name(Split s);
Split split_from_name(const std::string& name);

struct Dataset {
  std::vector<CaseData> cases;
  std::vector<Split> splits;

  std::vector<std::size_t> indices_of(Split which) const;
};

// Validation and test each get max(1, round(n/9)) cases; training the rest.
// Requires n >= 4 so every split is populated.
void split_counts(int n_cases, int& n_train, int& n_val, int& n_test);

// Config-struct adapters shared by the CLI and the tests.
vasctree::TreeGenConfig tree_config_from(const config::RunConfig& cfg);
oct::OctreeConfig octree_config_from(const config::RunConfig& cfg);
model::ModelConfig model_config_from(const config::RunConfig& cfg);
hemo::PhysicsConstants physics_from(const config::RunConfig& cfg);

// Generates n_cases synthetic cases: tree topology and boundary conditions
// sampled per case, oracle records computed, splits assigned by index.
Dataset build_dataset(int n_cases, const config::RunConfig& cfg, std::uint64_t seed);

// Directory layout: case_<id>/{tree.txt, cloud.bin, record.bin, bc.cfg} plus
// splits.txt at the root.
void save_dataset(const std::string& dir, const Dataset& dataset,
                  const config::RunConfig& cfg);
Dataset load_dataset(const std::string& dir);
// Loads one case directory (tree.txt, cloud.bin, record.bin, bc.cfg).
CaseData load_case(const std::string& case_dir, const std::string& id);

struct RigidTransform {
  Mat3 rotation;
  Vec3 translation;
};
RigidTransform identity_transform();
// Uniform random rotation (unit quaternion) and translation in
// [-max_translation_mm, max_translation_mm]^3.
RigidTransform sample_rigid_transform(std::mt19937_64& rng, double max_translation_mm);
vasctree::PointCloud transform_cloud(const vasctree::PointCloud& cloud,
                                     const RigidTransform& t);

struct TrainConfig {
  double lr = 1e-3;
  int batch_time_points = 10;
  int batch_spatial_points = 4096;
  int max_epochs = 40;
  bool augment = true;
  double max_translation_mm = 5.0;
  std::uint64_t seed = 0;
  oct::OctreeConfig octree;

  static TrainConfig from_run_config(const config::RunConfig& cfg);
};

struct EpochLog {
  int epoch = 0;
  double train_mae = 0.0;  // mean step loss, physical units (m/s)
  double val_mae = 0.0;
};

struct FitResult {
  std::vector<EpochLog> log;
  int best_epoch = 0;
  double best_val_mae = 0.0;
};

class Trainer {
 public:
  Trainer(model::SurrogateModel& model, const TrainConfig& cfg);

  // One ADAM update from one case: random time/space subsets, optional rigid
  // augmentation. Returns the step loss in physical units.
  double training_step(const CaseData& data, std::mt19937_64& rng);

  // Pooled MAE of full-record predictions over a split, physical units.
  double evaluate_mae(const Dataset& dataset, Split which);

  // Epoch loop over the training split with per-epoch shuffling; restores the
  // parameters of the best validation epoch before returning.
  FitResult fit(const Dataset& dataset);

  std::int64_t steps_taken() const { return step_; }

 private:
  model::SurrogateModel* model_;
  TrainConfig cfg_;
  std::int64_t step_ = 0;
};

void write_train_log_csv(const std::string& path, const std::vector<EpochLog>& log);

}  // namespace octoflow::train

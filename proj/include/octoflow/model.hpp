#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "octoflow/autodiff.hpp"
#include "octoflow/hemo_bc.hpp"
#include "octoflow/octree.hpp"
#include "octoflow/vasctree.hpp"

// The velocity-field surrogate: a 1-D CNN encodes the inflow waveform into a
// boundary-condition vector, an octree U-Net turns per-node geometry features
// into a latent field, and a DeepONet-style head combines interpolated
// spatial latents with a time trunk into velocities. One U-Net pass serves
// the whole time-resolved prediction.
namespace octoflow::model {

struct ModelConfig {
  int latent_dim = 32;
  std::vector<int> unet_channels = {32, 64, 128, 256};  // finest level first
  int head_hidden = 128;
  int trunk_width = 64;
  double lrelu_slope = 0.01;
  int bc_input_len = 256;
  double velocity_scale_mps = 1.0;  // normalization constant baked into the model

  void validate() const;
};

struct Param {
  std::string name;
  ad::Tensor value;
  ad::AdamState adam;
};

class SurrogateModel {
 public:
  SurrogateModel(const ModelConfig& config, std::uint64_t init_seed);

  const ModelConfig& config() const { return config_; }
  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }
  Param& param(const std::string& name);
  std::int64_t parameter_count() const;

  void save(const std::string& path) const;
  void load(const std::string& path);  // validates names and shapes

 private:
  void register_param(const std::string& name, std::vector<std::int64_t> shape,
                      std::int64_t fan_in, std::mt19937_64& rng, double gain = 6.0);

  ModelConfig config_;
  std::vector<Param> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Attaches every parameter to a tape as an external leaf (no copies); the
// model must outlive the binding.
class TapeBinding {
 public:
  TapeBinding(ad::Tape& tape, SurrogateModel& model, bool requires_grad);

  ad::ValueId operator[](const std::string& name) const;
  ad::ValueId id_of(std::size_t param_index) const { return ids_[param_index]; }
  ad::Tape& tape() const { return *tape_; }
  SurrogateModel& model() const { return *model_; }
  const ModelConfig& config() const { return model_->config(); }

 private:
  ad::Tape* tape_;
  SurrogateModel* model_;
  std::vector<ad::ValueId> ids_;
};

// Waveform resampled to the BC net input length (periodic linear interp,
// duplicated cycle endpoint).
std::vector<double> resample_waveform(const hemo::InflowWaveform& waveform, int n_samples);

// [1 x bc_input_len] inflow samples -> [4] boundary-condition vector.
ad::ValueId bc_net_forward(const TapeBinding& net, ad::ValueId waveform_row);

// Per-point features: wall distance column [n x 1] ++ broadcast BC vector.
ad::ValueId assemble_features(const TapeBinding& net, ad::ValueId wall_distance_col,
                              ad::ValueId bc_vec);

// Octree U-Net over the finest four levels; input and output are finest-level
// node fields. Increments the forward counter and rewrites the level log.
ad::ValueId unet_forward(const TapeBinding& net, const oct::Octree* tree,
                         ad::ValueId finest_field);

// [S x latent] interpolated node latents -> [S x 3*latent] spatial weights.
ad::ValueId spatial_head(const TapeBinding& net, ad::ValueId point_latents);

// [T x 1] normalized times -> [T x latent] temporal coefficients.
ad::ValueId trunk_forward(const TapeBinding& net, ad::ValueId times_col);

// Velocity reconstruction u_i[t, s] = b_s[i] . r_t + c_i -> [3 x T x S].
ad::ValueId evaluate_velocity(const TapeBinding& net, ad::ValueId spatial,
                              ad::ValueId temporal);

std::int64_t unet_forward_count();
void reset_unet_forward_count();
const std::vector<int>& unet_level_log();  // levels visited by the last forward

struct PredictResult {
  std::vector<double> velocities;  // [time][point][xyz], m/s (de-normalized)
  std::int64_t n_times = 0;
  std::int64_t n_points = 0;
};

// Full inference pipeline: exactly one BC-net, one feature assembly, one
// octree build, and one U-Net pass regardless of how many times / points are
// queried. Times are normalized by time_scale_ms.
PredictResult predict(SurrogateModel& model, const vasctree::PointCloud& cloud,
                      const hemo::InflowWaveform& waveform,
                      const std::vector<Vec3>& query_points,
                      const std::vector<double>& times_ms, double time_scale_ms,
                      const oct::OctreeConfig& oct_config);

}  // namespace octoflow::model

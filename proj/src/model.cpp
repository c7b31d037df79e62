#include "octoflow/model.hpp"

#include <atomic>
#include <cmath>
#include <stdexcept>

#include "octoflow/rng.hpp"

namespace octoflow::model {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

std::atomic<std::int64_t> g_unet_forwards{0};
std::vector<int> g_level_log;

// Per-level residual block counts along the encoder, finest level first.
constexpr int kEncoderBlocks[4] = {2, 3, 4, 6};
constexpr int kDecoderBlocks = 2;
constexpr int kUnetLevels = 4;
constexpr int kBcChannels[5] = {1, 8, 16, 32, 4};
constexpr int kBcKernelSize = 5;
constexpr int kFeatureChannels = 5;  // wall distance + 4 BC components
constexpr int kTrunkLayers = 5;

}  // namespace

void ModelConfig::validate() const {
  if (latent_dim < 1) fail("model config: latent_dim must be >= 1");
  if (static_cast<int>(unet_channels.size()) != kUnetLevels)
    fail("model config: unet_channels must list exactly 4 levels");
  for (int c : unet_channels)
    if (c < 1) fail("model config: unet channel counts must be >= 1");
  if (head_hidden < 1) fail("model config: head_hidden must be >= 1");
  if (trunk_width < 1) fail("model config: trunk_width must be >= 1");
  if (!(lrelu_slope > 0.0) || lrelu_slope >= 1.0)
    fail("model config: lrelu_slope must be in (0, 1)");
  if (bc_input_len < 32 || bc_input_len % 16 != 0)
    fail("model config: bc_input_len must be a multiple of 16 and >= 32");
  if (!(velocity_scale_mps > 0.0)) fail("model config: velocity_scale_mps must be > 0");
}

void SurrogateModel::register_param(const std::string& name, std::vector<std::int64_t> shape,
                                    std::int64_t fan_in, std::mt19937_64& rng, double gain) {
  Param p;
  p.name = name;
  p.value = ad::Tensor(std::move(shape));
  if (fan_in > 0) {
    // Uniform fan-in scaling: bound = sqrt(gain / fan_in); biases (fan_in == 0)
    // start at zero. gain 6 is the He choice for layers feeding a rectifier;
    // purely linear layers (residual projections, concat reducers) pass gain 3,
    // which preserves activation variance so deep block stacks stay
    // well-scaled at initialization instead of doubling per block.
    double bound = std::sqrt(gain / static_cast<double>(fan_in));
    for (double& v : p.value.data) v = uniform(rng, -bound, bound);
  }
  index_[p.name] = params_.size();
  params_.push_back(std::move(p));
}

SurrogateModel::SurrogateModel(const ModelConfig& config, std::uint64_t init_seed)
    : config_(config) {
  config_.validate();
  std::mt19937_64 rng(init_seed);
  std::int64_t d = config_.latent_dim;
  const std::vector<int>& ch = config_.unet_channels;

  for (int i = 0; i < 4; ++i) {
    std::int64_t ci = kBcChannels[i], co = kBcChannels[i + 1];
    std::string base = "bc.conv" + std::to_string(i + 1);
    register_param(base + ".k", {co, ci, kBcKernelSize}, ci * kBcKernelSize, rng);
    register_param(base + ".b", {co}, 0, rng);
  }

  auto conv3 = [&](const std::string& base, std::int64_t ci, std::int64_t co,
                   bool zero = false) {
    register_param(base + ".k", {27, ci, co}, zero ? 0 : 27 * ci, rng);
    register_param(base + ".b", {co}, 0, rng);
  };
  // The residual branch's closing conv starts at zero, so at initialization
  // every block reduces to its projection and the output scale stays bounded
  // no matter how many blocks are stacked.
  auto res_block = [&](const std::string& base, std::int64_t c) {
    conv3(base + ".conv1", c, c);
    conv3(base + ".conv2", c, c, true);
    register_param(base + ".proj.w", {c, c}, c, rng, 3.0);
    register_param(base + ".proj.b", {c}, 0, rng);
  };

  conv3("unet.stem", kFeatureChannels, ch[0]);
  for (int level = 0; level < kUnetLevels; ++level) {
    if (level > 0) conv3("unet.down" + std::to_string(level), ch[level - 1], ch[level]);
    for (int b = 0; b < kEncoderBlocks[level]; ++b)
      res_block("unet.enc" + std::to_string(level) + ".block" + std::to_string(b),
                ch[level]);
  }
  for (int level = kUnetLevels - 2; level >= 0; --level) {
    std::string tag = std::to_string(level);
    conv3("unet.up" + tag, ch[level + 1], ch[level]);
    register_param("unet.dec" + tag + ".skip.w", {2 * ch[level], ch[level]}, 2 * ch[level],
                   rng, 3.0);
    register_param("unet.dec" + tag + ".skip.b", {ch[level]}, 0, rng);
    for (int b = 0; b < kDecoderBlocks; ++b)
      res_block("unet.dec" + tag + ".block" + std::to_string(b), ch[level]);
  }

  register_param("head.fc1.w", {ch[0], config_.head_hidden}, ch[0], rng);
  register_param("head.fc1.b", {config_.head_hidden}, 0, rng);
  // Zero so the initial prediction is exactly the output bias; the spatial
  // coefficients grow from the first update instead of starting at noise.
  register_param("head.fc2.w", {config_.head_hidden, 3 * d}, 0, rng);
  register_param("head.fc2.b", {3 * d}, 0, rng);

  std::int64_t w = config_.trunk_width;
  std::int64_t widths[kTrunkLayers + 1] = {1, w, w, w, w, d};
  for (int i = 0; i < kTrunkLayers; ++i) {
    std::string base = "trunk.fc" + std::to_string(i + 1);
    register_param(base + ".w", {widths[i], widths[i + 1]}, widths[i], rng);
    register_param(base + ".b", {widths[i + 1]}, 0, rng);
  }

  register_param("out.bias", {3}, 0, rng);
}

Param& SurrogateModel::param(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) fail("model: unknown parameter '" + name + "'");
  return params_[it->second];
}

std::int64_t SurrogateModel::parameter_count() const {
  std::int64_t n = 0;
  for (const Param& p : params_) n += p.value.numel();
  return n;
}

void SurrogateModel::save(const std::string& path) const {
  std::vector<ad::NamedTensorRef> refs;
  refs.reserve(params_.size());
  for (const Param& p : params_) refs.push_back({p.name, &p.value});
  ad::write_checkpoint(path, refs);
}

void SurrogateModel::load(const std::string& path) {
  std::vector<std::pair<std::string, ad::Tensor>> loaded = ad::read_checkpoint(path);
  if (loaded.size() != params_.size())
    fail("checkpoint " + path + ": expected " + std::to_string(params_.size()) +
         " tensors, found " + std::to_string(loaded.size()));
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    if (loaded[i].first != params_[i].name)
      fail("checkpoint " + path + ": tensor '" + loaded[i].first + "' where '" +
           params_[i].name + "' was expected");
    if (loaded[i].second.shape != params_[i].value.shape)
      fail("checkpoint " + path + ": shape " + loaded[i].second.shape_str() +
           " for '" + params_[i].name + "' does not match model shape " +
           params_[i].value.shape_str());
    params_[i].value = std::move(loaded[i].second);
  }
}

TapeBinding::TapeBinding(ad::Tape& tape, SurrogateModel& model, bool requires_grad)
    : tape_(&tape), model_(&model) {
  ids_.reserve(model.params().size());
  for (Param& p : model.params())
    ids_.push_back(tape.leaf_external(&p.value, requires_grad));
}

ad::ValueId TapeBinding::operator[](const std::string& name) const {
  // param() validates the name; the index map gives the tape id.
  Param& p = model_->param(name);
  return ids_[static_cast<std::size_t>(&p - model_->params().data())];
}

std::vector<double> resample_waveform(const hemo::InflowWaveform& waveform, int n_samples) {
  if (n_samples < 2) fail("waveform resampling: need at least two samples");
  std::vector<double> out(static_cast<std::size_t>(n_samples));
  for (int i = 0; i < n_samples; ++i) {
    double t = waveform.cycle_length_ms * static_cast<double>(i) /
               static_cast<double>(n_samples - 1);
    out[static_cast<std::size_t>(i)] = waveform.value_at(t);
  }
  return out;
}

ad::ValueId bc_net_forward(const TapeBinding& net, ad::ValueId waveform_row) {
  const ad::Tensor& in = net.tape().value(waveform_row);
  if (in.rank() != 2 || in.dim(0) != 1 || in.dim(1) != net.config().bc_input_len)
    fail("bc_net: expected [1 x " + std::to_string(net.config().bc_input_len) +
         "] inflow samples, got " + in.shape_str());
  ad::Tape& tape = net.tape();
  double slope = net.config().lrelu_slope;
  ad::ValueId h = waveform_row;
  for (int i = 1; i <= 4; ++i) {
    std::string base = "bc.conv" + std::to_string(i);
    h = tape.conv1d(h, net[base + ".k"], net[base + ".b"], 1, kBcKernelSize / 2);
    h = tape.avg_pool1d(h, 2);
    h = tape.lrelu(h, slope);
  }
  return tape.global_mean_pool(h);
}

ad::ValueId assemble_features(const TapeBinding& net, ad::ValueId wall_distance_col,
                              ad::ValueId bc_vec) {
  ad::Tape& tape = net.tape();
  const ad::Tensor& df = tape.value(wall_distance_col);
  if (df.rank() != 2 || df.dim(1) != 1)
    fail("assemble_features: wall distances must be [n x 1], got " + df.shape_str());
  const ad::Tensor& bc = tape.value(bc_vec);
  if (bc.numel() != kFeatureChannels - 1)
    fail("assemble_features: BC vector must have 4 components, got " + bc.shape_str());
  ad::ValueId bc_rows = tape.repeat_row(bc_vec, df.dim(0));
  return tape.concat({wall_distance_col, bc_rows}, 1);
}

namespace {

ad::ValueId res_block_forward(const TapeBinding& net, const oct::Octree* tree, int depth,
                              const std::string& base, ad::ValueId x) {
  ad::Tape& tape = net.tape();
  double slope = net.config().lrelu_slope;
  ad::ValueId h = tape.lrelu(x, slope);
  h = tape.octree_conv(h, net[base + ".conv1.k"], net[base + ".conv1.b"], tree, depth);
  h = tape.lrelu(h, slope);
  h = tape.octree_conv(h, net[base + ".conv2.k"], net[base + ".conv2.b"], tree, depth);
  ad::ValueId p = tape.fully_connected(x, net[base + ".proj.w"], net[base + ".proj.b"]);
  return tape.add(p, h);
}

}  // namespace

ad::ValueId unet_forward(const TapeBinding& net, const oct::Octree* tree,
                         ad::ValueId finest_field) {
  if (tree->max_depth() < 10) fail("unet: octree shallower than level 10");
  ad::Tape& tape = net.tape();
  int finest = tree->max_depth();
  const ad::Tensor& in = tape.value(finest_field);
  if (in.rank() != 2 || in.dim(0) != tree->node_count(finest) ||
      in.dim(1) != kFeatureChannels)
    fail("unet: expected [" + std::to_string(tree->node_count(finest)) + " x 5] features, got " +
         in.shape_str());

  g_level_log.clear();
  ad::ValueId x = tape.octree_conv(finest_field, net["unet.stem.k"], net["unet.stem.b"],
                                   tree, finest);

  std::vector<ad::ValueId> encoder_out(kUnetLevels);
  for (int level = 0; level < kUnetLevels; ++level) {
    int depth = finest - level;
    g_level_log.push_back(depth);
    if (level > 0) {
      std::string tag = std::to_string(level);
      x = tape.octree_conv_strided(x, net["unet.down" + tag + ".k"],
                                   net["unet.down" + tag + ".b"], tree, depth + 1);
    }
    for (int b = 0; b < kEncoderBlocks[level]; ++b)
      x = res_block_forward(net, tree, depth,
                            "unet.enc" + std::to_string(level) + ".block" + std::to_string(b),
                            x);
    encoder_out[static_cast<std::size_t>(level)] = x;
  }

  for (int level = kUnetLevels - 2; level >= 0; --level) {
    int depth = finest - level;
    g_level_log.push_back(depth);
    std::string tag = std::to_string(level);
    x = tape.octree_conv_transposed(x, net["unet.up" + tag + ".k"],
                                    net["unet.up" + tag + ".b"], tree, depth - 1);
    x = tape.concat({x, encoder_out[static_cast<std::size_t>(level)]}, 1);
    x = tape.fully_connected(x, net["unet.dec" + tag + ".skip.w"],
                             net["unet.dec" + tag + ".skip.b"]);
    for (int b = 0; b < kDecoderBlocks; ++b)
      x = res_block_forward(net, tree, depth,
                            "unet.dec" + tag + ".block" + std::to_string(b), x);
  }

  g_unet_forwards.fetch_add(1, std::memory_order_relaxed);
  return x;
}

ad::ValueId spatial_head(const TapeBinding& net, ad::ValueId point_latents) {
  ad::Tape& tape = net.tape();
  double slope = net.config().lrelu_slope;
  ad::ValueId h = tape.fully_connected(point_latents, net["head.fc1.w"], net["head.fc1.b"]);
  h = tape.lrelu(h, slope);
  return tape.fully_connected(h, net["head.fc2.w"], net["head.fc2.b"]);
}

ad::ValueId trunk_forward(const TapeBinding& net, ad::ValueId times_col) {
  ad::Tape& tape = net.tape();
  const ad::Tensor& t = tape.value(times_col);
  if (t.rank() != 2 || t.dim(1) != 1)
    fail("trunk: times must be [T x 1], got " + t.shape_str());
  double slope = net.config().lrelu_slope;
  ad::ValueId h = times_col;
  for (int i = 1; i <= kTrunkLayers; ++i) {
    std::string base = "trunk.fc" + std::to_string(i);
    h = tape.fully_connected(h, net[base + ".w"], net[base + ".b"]);
    if (i < kTrunkLayers) h = tape.lrelu(h, slope);
  }
  return h;
}

ad::ValueId evaluate_velocity(const TapeBinding& net, ad::ValueId spatial,
                              ad::ValueId temporal) {
  return net.tape().head_combine(spatial, temporal, net["out.bias"]);
}

std::int64_t unet_forward_count() { return g_unet_forwards.load(std::memory_order_relaxed); }
void reset_unet_forward_count() { g_unet_forwards.store(0, std::memory_order_relaxed); }
const std::vector<int>& unet_level_log() { return g_level_log; }

PredictResult predict(SurrogateModel& model, const vasctree::PointCloud& cloud,
                      const hemo::InflowWaveform& waveform,
                      const std::vector<Vec3>& query_points,
                      const std::vector<double>& times_ms, double time_scale_ms,
                      const oct::OctreeConfig& oct_config) {
  if (cloud.size() == 0) fail("predict: empty point cloud");
  if (cloud.wall_distance.size() != cloud.size())
    fail("predict: point cloud lacks wall distances");
  if (query_points.empty() || times_ms.empty())
    fail("predict: need at least one query point and one time");
  if (!(time_scale_ms > 0.0)) fail("predict: time scale must be > 0");

  oct::Octree tree = oct::Octree::build(cloud, oct_config);
  ad::Tape tape;
  TapeBinding net(tape, model, false);

  std::vector<double> wf = resample_waveform(waveform, model.config().bc_input_len);
  ad::ValueId wf_id = tape.leaf(ad::Tensor({1, model.config().bc_input_len}, std::move(wf)));
  ad::ValueId bc = bc_net_forward(net, wf_id);

  std::int64_t n_pts = static_cast<std::int64_t>(cloud.size());
  ad::Tensor df({n_pts, 1});
  for (std::int64_t i = 0; i < n_pts; ++i)
    df.data[static_cast<std::size_t>(i)] = cloud.wall_distance[static_cast<std::size_t>(i)];
  ad::ValueId features = assemble_features(net, tape.leaf(std::move(df)), bc);

  ad::ValueId node_features = tape.octree_avg_features(features, &tree);
  ad::ValueId latent = unet_forward(net, &tree, node_features);

  ad::ValueId sampled = tape.octree_interpolate(latent, &tree, query_points);
  ad::ValueId spatial = spatial_head(net, sampled);

  std::int64_t n_times = static_cast<std::int64_t>(times_ms.size());
  ad::Tensor times({n_times, 1});
  for (std::int64_t i = 0; i < n_times; ++i)
    times.data[static_cast<std::size_t>(i)] = times_ms[static_cast<std::size_t>(i)] / time_scale_ms;
  ad::ValueId temporal = trunk_forward(net, tape.leaf(std::move(times)));

  ad::ValueId combined = evaluate_velocity(net, spatial, temporal);

  // [3 x T x S] normalized output -> [T][S][xyz] in physical units.
  const ad::Tensor& out = tape.value(combined);
  std::int64_t s = static_cast<std::int64_t>(query_points.size());
  PredictResult result;
  result.n_times = n_times;
  result.n_points = s;
  result.velocities.resize(static_cast<std::size_t>(n_times * s * 3));
  double scale = model.config().velocity_scale_mps;
  for (int i = 0; i < 3; ++i) {
    const double* block = out.data.data() + static_cast<std::int64_t>(i) * n_times * s;
    for (std::int64_t t = 0; t < n_times; ++t)
      for (std::int64_t p = 0; p < s; ++p)
        result.velocities[static_cast<std::size_t>((t * s + p) * 3 + i)] =
            scale * block[t * s + p];
  }
  return result;
}

}  // namespace octoflow::model

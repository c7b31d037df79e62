#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "octoflow/octree.hpp"
#include "octoflow/vec3.hpp"

// Reverse-mode automatic differentiation over dense double tensors, with
// octree-aware ops (sparse 3x3x3 convolutions as gather + GEMM). One Tape per
// forward pass; parameters attach as external leaves so no weights are copied.
namespace octoflow::ad {

struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::int64_t> s) : shape(std::move(s)) {
    data.assign(static_cast<std::size_t>(numel_of(shape)), 0.0);
  }
  Tensor(std::vector<std::int64_t> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {}

  static std::int64_t numel_of(const std::vector<std::int64_t>& s) {
    std::int64_t n = 1;
    for (std::int64_t d : s) n *= d;
    return n;
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  std::int64_t dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(shape.size()); }
  std::string shape_str() const;
};

using ValueId = std::int32_t;
constexpr ValueId kNoValue = -1;

class Tape {
 public:
  // Leaves. External leaves reference caller-owned storage that must outlive
  // the tape; their gradients are accumulated on the tape.
  ValueId leaf(Tensor value, bool requires_grad = false);
  ValueId leaf_external(const Tensor* value, bool requires_grad);

  // Dense layers. x is [M x K]; w is [K x N]; bias is [N] or kNoValue.
  ValueId fully_connected(ValueId x, ValueId w, ValueId bias);
  // x [C_in x L], kernel [C_out x C_in x ks], bias [C_out] or kNoValue.
  ValueId conv1d(ValueId x, ValueId kernel, ValueId bias, int stride, int pad);
  ValueId avg_pool1d(ValueId x, int width);       // [C x L] -> [C x L/width]
  ValueId global_mean_pool(ValueId x);            // [C x L] -> [C]
  ValueId lrelu(ValueId x, double slope);
  ValueId add(ValueId a, ValueId b);
  ValueId scale(ValueId x, double factor);
  ValueId concat(const std::vector<ValueId>& xs, int axis);  // 2-D, axis 0 or 1
  ValueId repeat_row(ValueId v, std::int64_t rows);          // [N] -> [rows x N]

  // Octree ops. The octree must outlive the tape. Fields are [nodes x C] at
  // the level given; kernels for the 3x3x3 convs are [27 x C_in x C_out] with
  // offset order (dx, dy, dz) row-major over {-1, 0, 1}.
  ValueId octree_avg_features(ValueId point_features, const oct::Octree* tree);
  ValueId octree_conv(ValueId field, ValueId kernel, ValueId bias, const oct::Octree* tree,
                      int level);
  // Field at child level -> output at child level - 1 (window at 2p + d).
  ValueId octree_conv_strided(ValueId field, ValueId kernel, ValueId bias,
                              const oct::Octree* tree, int child_level);
  // Field at parent level -> output at parent level + 1 (adjoint structure).
  ValueId octree_conv_transposed(ValueId field, ValueId kernel, ValueId bias,
                                 const oct::Octree* tree, int parent_level);
  // Finest-level field sampled at query points -> [P x C].
  ValueId octree_interpolate(ValueId field, const oct::Octree* tree,
                             const std::vector<Vec3>& points);

  // Operator combination: spatial features [S x 3d], temporal features
  // [T x d], bias [3] -> [3 x T x S] with out[i][t][s] = b_s[i.] . r_t + c[i].
  ValueId head_combine(ValueId spatial, ValueId temporal, ValueId bias);
  ValueId mae_loss(ValueId prediction, ValueId target);  // -> scalar

  void backward(ValueId loss);

  const Tensor& value(ValueId id) const;
  // Gradient of the last backward() w.r.t. value id; zeros if it never
  // received a contribution.
  const Tensor& grad(ValueId id);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor grad;
    bool requires_grad = false;
    std::function<void()> backprop;
  };

  const Tensor& val_of(const Node& n) const { return n.external ? *n.external : n.owned; }
  Tensor& grad_buffer(ValueId id);
  bool wants_grad(ValueId id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  ValueId push(Tensor value, bool requires_grad, std::function<void()> backprop);

  // Shared gather + GEMM core of the three octree convolution flavors.
  ValueId octree_conv_core(const char* op_name, ValueId field, ValueId kernel, ValueId bias,
                           std::shared_ptr<std::vector<std::int32_t>> fwd_table,
                           std::shared_ptr<std::vector<std::int32_t>> bwd_table,
                           bool mirror_bwd_kernel, std::int64_t n_out, std::int64_t n_in);

  std::vector<Node> nodes_;
};

// ADAM with bias correction; state tensors match the parameter shape.
struct AdamState {
  Tensor m;
  Tensor v;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One update of `param` from `grad`; `step` is the 1-based global step count.
void adam_update(Tensor& param, const Tensor& grad, AdamState& state, std::int64_t step,
                 const AdamConfig& config);

// Checkpoint format OCKPT1: magic, tensor count, then per tensor a
// length-prefixed name, rank, dims, and f64 payload, little-endian.
struct NamedTensorRef {
  std::string name;
  const Tensor* tensor;
};
void write_checkpoint(const std::string& path, const std::vector<NamedTensorRef>& tensors);
std::vector<std::pair<std::string, Tensor>> read_checkpoint(const std::string& path);

}  // namespace octoflow::ad

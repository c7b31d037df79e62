#include "octoflow/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <memory>
#include <stdexcept>

#include "octoflow/kernels.hpp"
#include "octoflow/threading.hpp"

namespace octoflow::ad {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

void check(bool ok, const std::string& msg) {
  if (!ok) fail(msg);
}

// Offset order shared by every 3x3x3 octree kernel: (dx, dy, dz) row-major
// over {-1, 0, 1}; index 26 - o is the mirrored offset.
constexpr int kWindow = 27;

// Source node index per (output node, window offset); kEmptyNode for holes.
using GatherTable = std::vector<std::int32_t>;

// Same-level window: neighbors of each node at `level`.
std::shared_ptr<GatherTable> same_level_table(const oct::Octree* tree, int level) {
  const std::vector<std::uint64_t>& keys = tree->keys(level);
  auto table = std::make_shared<GatherTable>(keys.size() * kWindow);
  for (std::size_t i = 0; i < keys.size(); ++i) {
    std::int32_t* row = table->data() + i * kWindow;
    int o = 0;
    for (int dx = -1; dx <= 1; ++dx)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dz = -1; dz <= 1; ++dz)
          row[o++] = tree->neighbor(level, keys[i], dx, dy, dz);
  }
  return table;
}

// Downsampling window: for each parent node at child_level - 1, the child
// cells at 2p + d for d in {-1, 0, 1}^3 (stride-2, zero-padded semantics).
std::shared_ptr<GatherTable> down_window_table(const oct::Octree* tree, int child_level) {
  const std::vector<std::uint64_t>& parents = tree->keys(child_level - 1);
  auto table = std::make_shared<GatherTable>(parents.size() * kWindow);
  for (std::size_t p = 0; p < parents.size(); ++p) {
    std::uint64_t base = parents[p] << 3;  // child cell (2i, 2j, 2k)
    std::int32_t* row = table->data() + p * kWindow;
    int o = 0;
    for (int dx = -1; dx <= 1; ++dx)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dz = -1; dz <= 1; ++dz)
          row[o++] = tree->neighbor(child_level, base, dx, dy, dz);
  }
  return table;
}

// Upsampling window: for each child node, the parent cell (c - d) / 2 for
// every offset with matching parity; the adjoint of down_window_table.
std::shared_ptr<GatherTable> up_window_table(const oct::Octree* tree, int child_level) {
  const std::vector<std::uint64_t>& children = tree->keys(child_level);
  std::int64_t parent_side = std::int64_t(1) << (child_level - 1);
  auto table = std::make_shared<GatherTable>(children.size() * kWindow);
  for (std::size_t c = 0; c < children.size(); ++c) {
    std::uint32_t vx, vy, vz;
    oct::Octree::morton_decode(children[c], vx, vy, vz);
    std::int32_t* row = table->data() + c * kWindow;
    int o = 0;
    for (int dx = -1; dx <= 1; ++dx) {
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dz = -1; dz <= 1; ++dz, ++o) {
          std::int64_t px = static_cast<std::int64_t>(vx) - dx;
          std::int64_t py = static_cast<std::int64_t>(vy) - dy;
          std::int64_t pz = static_cast<std::int64_t>(vz) - dz;
          row[o] = oct::kEmptyNode;
          if ((px | py | pz) < 0 || (px & 1) || (py & 1) || (pz & 1)) continue;
          px >>= 1, py >>= 1, pz >>= 1;
          if (px >= parent_side || py >= parent_side || pz >= parent_side) continue;
          row[o] = tree->find(child_level - 1,
                              oct::Octree::morton_encode(static_cast<std::uint32_t>(px),
                                                         static_cast<std::uint32_t>(py),
                                                         static_cast<std::uint32_t>(pz)));
        }
      }
    }
  }
  return table;
}

// Materializes the gather matrix [rows x 27*c] from a table and node-major
// source rows of width c.
void gather_rows(const GatherTable& table, std::int64_t rows, const double* src,
                 std::int64_t c, double* out) {
  ThreadPool::instance().parallel_for(rows, [&](std::int64_t begin, std::int64_t end) {
    for (std::int64_t r = begin; r < end; ++r) {
      double* dst = out + r * kWindow * c;
      const std::int32_t* idx = table.data() + r * kWindow;
      for (int o = 0; o < kWindow; ++o, dst += c) {
        if (idx[o] == oct::kEmptyNode)
          std::memset(dst, 0, static_cast<std::size_t>(c) * sizeof(double));
        else
          std::memcpy(dst, src + static_cast<std::int64_t>(idx[o]) * c,
                      static_cast<std::size_t>(c) * sizeof(double));
      }
    }
  });
}

// Reshapes a conv kernel [27 x ci x co] into the backward form
// [27 x co x ci], optionally mirroring the window offsets.
std::vector<double> transpose_kernel(const Tensor& k, bool mirror) {
  std::int64_t ci = k.dim(1), co = k.dim(2);
  std::vector<double> out(static_cast<std::size_t>(k.numel()));
  for (int o = 0; o < kWindow; ++o) {
    int o2 = mirror ? kWindow - 1 - o : o;
    const double* src = k.data.data() + static_cast<std::int64_t>(o) * ci * co;
    double* dst = out.data() + static_cast<std::int64_t>(o2) * co * ci;
    for (std::int64_t i = 0; i < ci; ++i)
      for (std::int64_t j = 0; j < co; ++j) dst[j * ci + i] = src[i * co + j];
  }
  return out;
}

void add_bias_rows(double* out, std::int64_t rows, std::int64_t c, const double* bias) {
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < c; ++j) out[r * c + j] += bias[j];
}

void column_sums_into(const double* dy, std::int64_t rows, std::int64_t c, double* db) {
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < c; ++j) db[j] += dy[r * c + j];
}

}  // namespace

std::string Tensor::shape_str() const {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += " x ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

ValueId Tape::push(Tensor value, bool requires_grad, std::function<void()> backprop) {
  Node node;
  node.owned = std::move(value);
  node.requires_grad = requires_grad;
  node.backprop = std::move(backprop);
  nodes_.push_back(std::move(node));
  return static_cast<ValueId>(nodes_.size() - 1);
}

ValueId Tape::leaf(Tensor value, bool requires_grad) {
  return push(std::move(value), requires_grad, nullptr);
}

ValueId Tape::leaf_external(const Tensor* value, bool requires_grad) {
  check(value != nullptr, "leaf_external: null tensor");
  Node node;
  node.external = value;
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return static_cast<ValueId>(nodes_.size() - 1);
}

const Tensor& Tape::value(ValueId id) const {
  check(id >= 0 && static_cast<std::size_t>(id) < nodes_.size(), "tape: bad value id");
  return val_of(nodes_[static_cast<std::size_t>(id)]);
}

Tensor& Tape::grad_buffer(ValueId id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.data.empty()) n.grad = Tensor(val_of(n).shape);
  return n.grad;
}

const Tensor& Tape::grad(ValueId id) {
  check(id >= 0 && static_cast<std::size_t>(id) < nodes_.size(), "tape: bad value id");
  return grad_buffer(id);
}

void Tape::backward(ValueId loss) {
  const Tensor& l = value(loss);
  check(l.numel() == 1, "backward: loss must be a scalar, got " + l.shape_str());
  grad_buffer(loss).data[0] = 1.0;
  for (ValueId id = loss; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || !n.backprop) continue;
    if (n.grad.data.empty()) continue;  // nothing downstream touched this value
    n.backprop();
  }
}

ValueId Tape::fully_connected(ValueId x, ValueId w, ValueId bias) {
  const Tensor& xv = value(x);
  const Tensor& wv = value(w);
  check(xv.rank() == 2 && wv.rank() == 2 && xv.dim(1) == wv.dim(0),
        "fully_connected: x " + xv.shape_str() + " incompatible with w " + wv.shape_str());
  std::int64_t m = xv.dim(0), kdim = xv.dim(1), n = wv.dim(1);
  if (bias != kNoValue)
    check(value(bias).numel() == n, "fully_connected: bias " + value(bias).shape_str() +
                                        " does not match output width " +
                                        std::to_string(n));

  Tensor out({m, n});
  kernels::gemm(m, n, kdim, xv.data.data(), kdim, wv.data.data(), n, out.data.data(), n,
                false);
  if (bias != kNoValue) add_bias_rows(out.data.data(), m, n, value(bias).data.data());

  bool rg = wants_grad(x) || wants_grad(w) || (bias != kNoValue && wants_grad(bias));
  ValueId y = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_.back().backprop = [this, x, w, bias, y, m, kdim, n] {
      const double* dy = grad_buffer(y).data.data();
      if (wants_grad(x))
        kernels::gemm_bt(m, kdim, n, dy, n, value(w).data.data(), n,
                         grad_buffer(x).data.data(), kdim, true);
      if (wants_grad(w))
        kernels::gemm_at(kdim, n, m, value(x).data.data(), kdim, dy, n,
                         grad_buffer(w).data.data(), n, true);
      if (bias != kNoValue && wants_grad(bias))
        column_sums_into(dy, m, n, grad_buffer(bias).data.data());
    };
  }
  return y;
}

ValueId Tape::conv1d(ValueId x, ValueId kernel, ValueId bias, int stride, int pad) {
  const Tensor& xv = value(x);
  const Tensor& kv = value(kernel);
  check(xv.rank() == 2 && kv.rank() == 3,
        "conv1d: expected x [C_in x L] and kernel [C_out x C_in x ks], got " +
            xv.shape_str() + " and " + kv.shape_str());
  std::int64_t cin = xv.dim(0), len = xv.dim(1);
  std::int64_t cout = kv.dim(0), ks = kv.dim(2);
  check(kv.dim(1) == cin, "conv1d: kernel " + kv.shape_str() + " does not match input " +
                              xv.shape_str());
  check(stride >= 1 && pad >= 0, "conv1d: stride must be >= 1 and pad >= 0");
  std::int64_t span = len + 2 * pad - ks;
  check(span >= 0, "conv1d: kernel wider than padded input");
  std::int64_t lout = span / stride + 1;
  if (bias != kNoValue)
    check(value(bias).numel() == cout, "conv1d: bias size mismatch");

  Tensor out({cout, lout});
  for (std::int64_t co = 0; co < cout; ++co) {
    for (std::int64_t t = 0; t < lout; ++t) {
      double acc = bias != kNoValue ? value(bias).data[static_cast<std::size_t>(co)] : 0.0;
      for (std::int64_t ci = 0; ci < cin; ++ci) {
        const double* xr = xv.data.data() + ci * len;
        const double* kr = kv.data.data() + (co * cin + ci) * ks;
        for (std::int64_t u = 0; u < ks; ++u) {
          std::int64_t pos = t * stride + u - pad;
          if (pos >= 0 && pos < len) acc += kr[u] * xr[pos];
        }
      }
      out.data[static_cast<std::size_t>(co * lout + t)] = acc;
    }
  }

  bool rg = wants_grad(x) || wants_grad(kernel) || (bias != kNoValue && wants_grad(bias));
  ValueId y = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_.back().backprop = [this, x, kernel, bias, y, cin, len, cout, ks, lout, stride,
                              pad] {
      const Tensor& dyt = grad_buffer(y);
      const double* dy = dyt.data.data();
      const Tensor& xv2 = value(x);
      const Tensor& kv2 = value(kernel);
      double* dx = wants_grad(x) ? grad_buffer(x).data.data() : nullptr;
      double* dk = wants_grad(kernel) ? grad_buffer(kernel).data.data() : nullptr;
      double* db =
          bias != kNoValue && wants_grad(bias) ? grad_buffer(bias).data.data() : nullptr;
      for (std::int64_t co = 0; co < cout; ++co) {
        for (std::int64_t t = 0; t < lout; ++t) {
          double g = dy[co * lout + t];
          if (db) db[co] += g;
          for (std::int64_t ci = 0; ci < cin; ++ci) {
            for (std::int64_t u = 0; u < ks; ++u) {
              std::int64_t pos = t * stride + u - pad;
              if (pos < 0 || pos >= len) continue;
              if (dx) dx[ci * len + pos] += g * kv2.data[static_cast<std::size_t>(
                                                 (co * cin + ci) * ks + u)];
              if (dk) dk[(co * cin + ci) * ks + u] +=
                  g * xv2.data[static_cast<std::size_t>(ci * len + pos)];
            }
          }
        }
      }
    };
  }
  return y;
}

ValueId Tape::avg_pool1d(ValueId x, int width) {
  const Tensor& xv = value(x);
  check(xv.rank() == 2, "avg_pool1d: expected [C x L], got " + xv.shape_str());
  std::int64_t c = xv.dim(0), len = xv.dim(1);
  check(width >= 1 && len % width == 0,
        "avg_pool1d: width " + std::to_string(width) + " must divide length " +
            std::to_string(len));
  std::int64_t lout = len / width;
  Tensor out({c, lout});
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t t = 0; t < lout; ++t) {
      double acc = 0.0;
      for (int u = 0; u < width; ++u)
        acc += xv.data[static_cast<std::size_t>(ch * len + t * width + u)];
      out.data[static_cast<std::size_t>(ch * lout + t)] = acc / width;
    }

  bool rg = wants_grad(x);
  ValueId y = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_.back().backprop = [this, x, y, c, len, lout, width] {
      const double* dy = grad_buffer(y).data.data();
      double* dx = grad_buffer(x).data.data();
      double inv = 1.0 / width;
      for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t t = 0; t < lout; ++t)
          for (int u = 0; u < width; ++u)
            dx[ch * len + t * width + u] += dy[ch * lout + t] * inv;
    };
  }
  return y;
}

ValueId Tape::global_mean_pool(ValueId x) {
  const Tensor& xv = value(x);
  check(xv.rank() == 2, "global_mean_pool: expected [C x L], got " + xv.shape_str());
  std::int64_t c = xv.dim(0), len = xv.dim(1);
  Tensor out({c});
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (std::int64_t l = 0; l < len; ++l) acc += xv.data[static_cast<std::size_t>(ch * len + l)];
    out.data[static_cast<std::size_t>(ch)] = acc / static_cast<double>(len);
  }
  bool rg = wants_grad(x);
  ValueId y = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_.back().backprop = [this, x, y, c, len] {
      const double* dy = grad_buffer(y).data.data();
      double* dx = grad_buffer(x).data.data();
      double inv = 1.0 / static_cast<double>(len);
      for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t l = 0; l < len; ++l) dx[ch * len + l] += dy[ch] * inv;
    };
  }
  return y;
}

ValueId Tape::lrelu(ValueId x, double slope) {
  const Tensor& xv = value(x);
  Tensor out(xv.shape);
  kernels::active().lrelu_fwd(xv.numel(), xv.data.data(), out.data.data(), slope);
  bool rg = wants_grad(x);
  ValueId y = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_.back().backprop = [this, x, y, slope] {
      const Tensor& xv2 = value(x);
      kernels::active().lrelu_bwd(xv2.numel(), xv2.data.data(), grad_buffer(y).data.data(),
                                  grad_buffer(x).data.data(), slope);
    };
  }
  return y;
}

ValueId Tape::add(ValueId a, ValueId b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  check(av.shape == bv.shape,
        "add: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
  Tensor out(av.shape);
  for (std::int64_t i = 0; i < av.numel(); ++i)
    out.data[static_cast<std::size_t>(i)] =
        av.data[static_cast<std::size_t>(i)] + bv.data[static_cast<std::size_t>(i)];
  bool rg = wants_grad(a) || wants_grad(b);
  ValueId y = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_.back().backprop = [this, a, b, y] {
      const Tensor& dy = grad_buffer(y);
      if (wants_grad(a))
        kernels::active().axpy(dy.numel(), 1.0, dy.data.data(), grad_buffer(a).data.data());
      if (wants_grad(b))
        kernels::active().axpy(dy.numel(), 1.0, dy.data.data(), grad_buffer(b).data.data());
    };
  }
  return y;
}

ValueId Tape::scale(ValueId x, double factor) {
  const Tensor& xv = value(x);
  Tensor out(xv.shape);
  for (std::int64_t i = 0; i < xv.numel(); ++i)
    out.data[static_cast<std::size_t>(i)] = factor * xv.data[static_cast<std::size_t>(i)];
  bool rg = wants_grad(x);
  ValueId y = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_.back().backprop = [this, x, y, factor] {
      const Tensor& dy = grad_buffer(y);
      kernels::active().axpy(dy.numel(), factor, dy.data.data(), grad_buffer(x).data.data());
    };
  }
  return y;
}

ValueId Tape::concat(const std::vector<ValueId>& xs, int axis) {
  check(!xs.empty(), "concat: empty input list");
  check(axis == 0 || axis == 1, "concat: axis must be 0 or 1");
  const Tensor& first = value(xs[0]);
  check(first.rank() == 2, "concat: expected rank-2 tensors, got " + first.shape_str());
  std::int64_t rows = first.dim(0), cols = first.dim(1);
  std::int64_t total = 0;
  bool rg = false;
  for (ValueId id : xs) {
    const Tensor& t = value(id);
    check(t.rank() == 2, "concat: expected rank-2 tensors, got " + t.shape_str());
    if (axis == 0)
      check(t.dim(1) == cols, "concat: column mismatch " + t.shape_str() + " vs " +
                                  first.shape_str());
    else
      check(t.dim(0) == rows, "concat: row mismatch " + t.shape_str() + " vs " +
                                  first.shape_str());
    total += axis == 0 ? t.dim(0) : t.dim(1);
    rg = rg || wants_grad(id);
  }

  Tensor out(axis == 0 ? std::vector<std::int64_t>{total, cols}
                       : std::vector<std::int64_t>{rows, total});
  std::int64_t offset = 0;
  for (ValueId id : xs) {
    const Tensor& t = value(id);
    if (axis == 0) {
      std::memcpy(out.data.data() + offset * cols, t.data.data(),
                  static_cast<std::size_t>(t.numel()) * sizeof(double));
      offset += t.dim(0);
    } else {
      std::int64_t w = t.dim(1);
      for (std::int64_t r = 0; r < rows; ++r)
        std::memcpy(out.data.data() + r * total + offset, t.data.data() + r * w,
                    static_cast<std::size_t>(w) * sizeof(double));
      offset += w;
    }
  }

  std::vector<ValueId> inputs = xs;
  ValueId y = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_.back().backprop = [this, inputs, y, axis, rows, cols, total] {
      const double* dy = grad_buffer(y).data.data();
      std::int64_t offset = 0;
      for (ValueId id : inputs) {
        const Tensor& t = value(id);
        std::int64_t span = axis == 0 ? t.dim(0) : t.dim(1);
        if (wants_grad(id)) {
          double* dx = grad_buffer(id).data.data();
          if (axis == 0) {
            kernels::active().axpy(t.numel(), 1.0, dy + offset * cols, dx);
          } else {
            for (std::int64_t r = 0; r < rows; ++r)
              for (std::int64_t j = 0; j < span; ++j)
                dx[r * span + j] += dy[r * total + offset + j];
          }
        }
        offset += span;
      }
    };
  }
  return y;
}

ValueId Tape::repeat_row(ValueId v, std::int64_t rows) {
  const Tensor& vv = value(v);
  check(vv.rank() == 1, "repeat_row: expected a vector, got " + vv.shape_str());
  check(rows >= 1, "repeat_row: rows must be >= 1");
  std::int64_t n = vv.dim(0);
  Tensor out({rows, n});
  for (std::int64_t r = 0; r < rows; ++r)
    std::memcpy(out.data.data() + r * n, vv.data.data(),
                static_cast<std::size_t>(n) * sizeof(double));
  bool rg = wants_grad(v);
  ValueId y = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_.back().backprop = [this, v, y, rows, n] {
      const double* dy = grad_buffer(y).data.data();
      double* dv = grad_buffer(v).data.data();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < n; ++j) dv[j] += dy[r * n + j];
    };
  }
  return y;
}

ValueId Tape::octree_avg_features(ValueId point_features, const oct::Octree* tree) {
  const Tensor& pf = value(point_features);
  check(pf.rank() == 2, "octree_avg_features: expected [points x C], got " + pf.shape_str());
  check(pf.dim(0) == static_cast<std::int64_t>(tree->point_to_node().size()),
        "octree_avg_features: feature rows " + pf.shape_str() +
            " do not match the octree point count");
  std::int64_t c = pf.dim(1);
  oct::FeatureField field = oct::average_point_features(*tree, pf.data.data(), c);
  Tensor out({tree->node_count(tree->max_depth()), c});
  out.data = std::move(field.values);

  bool rg = wants_grad(point_features);
  ValueId y = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_.back().backprop = [this, point_features, y, tree, c] {
      const double* dy = grad_buffer(y).data.data();
      double* dx = grad_buffer(point_features).data.data();
      const std::vector<std::int32_t>& owner = tree->point_to_node();
      const std::vector<std::int32_t>& counts = tree->finest_point_counts();
      for (std::size_t p = 0; p < owner.size(); ++p) {
        double inv = 1.0 / static_cast<double>(counts[static_cast<std::size_t>(owner[p])]);
        const double* src = dy + static_cast<std::int64_t>(owner[p]) * c;
        double* dst = dx + static_cast<std::int64_t>(p) * c;
        for (std::int64_t ch = 0; ch < c; ++ch) dst[ch] += inv * src[ch];
      }
    };
  }
  return y;
}

ValueId Tape::octree_conv_core(const char* op_name, ValueId field, ValueId kernel,
                               ValueId bias,
                               std::shared_ptr<std::vector<std::int32_t>> fwd_table,
                               std::shared_ptr<std::vector<std::int32_t>> bwd_table,
                               bool mirror_bwd_kernel, std::int64_t n_out,
                               std::int64_t n_in) {
  const Tensor& xv = value(field);
  const Tensor& kv = value(kernel);
  check(kv.rank() == 3 && kv.dim(0) == kWindow,
        std::string(op_name) + ": expected kernel [27 x C_in x C_out], got " + kv.shape_str());
  std::int64_t cin = kv.dim(1), cout = kv.dim(2);
  check(xv.rank() == 2 && xv.dim(1) == cin,
        std::string(op_name) + ": field " + xv.shape_str() + " does not match kernel " +
            kv.shape_str());
  check(xv.dim(0) == n_in, std::string(op_name) + ": field " + xv.shape_str() +
                               " does not match the octree level node count " +
                               std::to_string(n_in));
  if (bias != kNoValue)
    check(value(bias).numel() == cout, std::string(op_name) + ": bias size mismatch");

  Tensor out({n_out, cout});
  {
    std::vector<double> gathered(static_cast<std::size_t>(n_out * kWindow * cin));
    gather_rows(*fwd_table, n_out, xv.data.data(), cin, gathered.data());
    kernels::gemm(n_out, cout, kWindow * cin, gathered.data(), kWindow * cin,
                  kv.data.data(), cout, out.data.data(), cout, false);
  }
  if (bias != kNoValue) add_bias_rows(out.data.data(), n_out, cout, value(bias).data.data());

  bool rg = wants_grad(field) || wants_grad(kernel) || (bias != kNoValue && wants_grad(bias));
  ValueId y = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_.back().backprop = [this, field, kernel, bias, y, fwd_table, bwd_table,
                              mirror_bwd_kernel, n_out, n_in, cin, cout] {
      const Tensor& dyt = grad_buffer(y);
      if (wants_grad(field)) {
        // dX = Gather(dY, adjoint window) * K reshaped [27 x C_out x C_in].
        std::vector<double> k2 = transpose_kernel(value(kernel), mirror_bwd_kernel);
        std::vector<double> gathered(static_cast<std::size_t>(n_in * kWindow * cout));
        gather_rows(*bwd_table, n_in, dyt.data.data(), cout, gathered.data());
        kernels::gemm(n_in, cin, kWindow * cout, gathered.data(), kWindow * cout, k2.data(),
                      cin, grad_buffer(field).data.data(), cin, true);
      }
      if (wants_grad(kernel)) {
        // dK = Gather(X)^T * dY, regathering instead of retaining the matrix.
        std::vector<double> gathered(static_cast<std::size_t>(n_out * kWindow * cin));
        gather_rows(*fwd_table, n_out, value(field).data.data(), cin, gathered.data());
        kernels::gemm_at(kWindow * cin, cout, n_out, gathered.data(), kWindow * cin,
                         dyt.data.data(), cout, grad_buffer(kernel).data.data(), cout, true);
      }
      if (bias != kNoValue && wants_grad(bias))
        column_sums_into(dyt.data.data(), n_out, cout, grad_buffer(bias).data.data());
    };
  }
  return y;
}

ValueId Tape::octree_conv(ValueId field, ValueId kernel, ValueId bias,
                          const oct::Octree* tree, int level) {
  check(level >= 0 && level <= tree->max_depth(), "octree_conv: level out of range");
  std::shared_ptr<GatherTable> table = same_level_table(tree, level);
  std::int64_t n = tree->node_count(level);
  // Backward reuses the same window with the mirrored kernel.
  return octree_conv_core("octree_conv", field, kernel, bias, table, table, true, n, n);
}

ValueId Tape::octree_conv_strided(ValueId field, ValueId kernel, ValueId bias,
                                  const oct::Octree* tree, int child_level) {
  check(child_level >= 1 && child_level <= tree->max_depth(),
        "octree_conv_strided: level out of range");
  return octree_conv_core("octree_conv_strided", field, kernel, bias,
                          down_window_table(tree, child_level),
                          up_window_table(tree, child_level),
                          false, tree->node_count(child_level - 1),
                          tree->node_count(child_level));
}

ValueId Tape::octree_conv_transposed(ValueId field, ValueId kernel, ValueId bias,
                                     const oct::Octree* tree, int parent_level) {
  check(parent_level >= 0 && parent_level < tree->max_depth(),
        "octree_conv_transposed: level out of range");
  return octree_conv_core("octree_conv_transposed", field, kernel, bias,
                          up_window_table(tree, parent_level + 1),
                          down_window_table(tree, parent_level + 1),
                          false, tree->node_count(parent_level + 1),
                          tree->node_count(parent_level));
}

ValueId Tape::octree_interpolate(ValueId field, const oct::Octree* tree,
                                 const std::vector<Vec3>& points) {
  const Tensor& xv = value(field);
  check(xv.rank() == 2, "octree_interpolate: expected [nodes x C], got " + xv.shape_str());
  std::int64_t c = xv.dim(1);
  check(xv.dim(0) == tree->node_count(tree->max_depth()),
        "octree_interpolate: field rows do not match the finest level");
  std::int64_t n_pts = static_cast<std::int64_t>(points.size());

  auto counts = std::make_shared<std::vector<int>>(points.size());
  auto corner_idx = std::make_shared<std::vector<std::int32_t>>(points.size() * 8);
  auto corner_w = std::make_shared<std::vector<double>>(points.size() * 8);
  for (std::size_t p = 0; p < points.size(); ++p)
    (*counts)[p] = tree->gather_corners(points[p], corner_idx->data() + p * 8,
                                        corner_w->data() + p * 8);

  Tensor out({n_pts, c});
  for (std::int64_t p = 0; p < n_pts; ++p) {
    double* dst = out.data.data() + p * c;
    for (int k = 0; k < (*counts)[static_cast<std::size_t>(p)]; ++k) {
      double w = (*corner_w)[static_cast<std::size_t>(p * 8 + k)];
      const double* src = xv.data.data() +
                          static_cast<std::int64_t>((*corner_idx)[static_cast<std::size_t>(
                              p * 8 + k)]) * c;
      for (std::int64_t ch = 0; ch < c; ++ch) dst[ch] += w * src[ch];
    }
  }

  bool rg = wants_grad(field);
  ValueId y = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_.back().backprop = [this, field, y, counts, corner_idx, corner_w, n_pts, c] {
      const double* dy = grad_buffer(y).data.data();
      double* dx = grad_buffer(field).data.data();
      for (std::int64_t p = 0; p < n_pts; ++p) {
        const double* src = dy + p * c;
        for (int k = 0; k < (*counts)[static_cast<std::size_t>(p)]; ++k) {
          double w = (*corner_w)[static_cast<std::size_t>(p * 8 + k)];
          double* dst = dx + static_cast<std::int64_t>((*corner_idx)[static_cast<std::size_t>(
                                 p * 8 + k)]) * c;
          for (std::int64_t ch = 0; ch < c; ++ch) dst[ch] += w * src[ch];
        }
      }
    };
  }
  return y;
}

ValueId Tape::head_combine(ValueId spatial, ValueId temporal, ValueId bias) {
  const Tensor& bv = value(spatial);
  const Tensor& rv = value(temporal);
  const Tensor& cv = value(bias);
  check(bv.rank() == 2 && rv.rank() == 2 && bv.dim(1) == 3 * rv.dim(1),
        "head_combine: spatial " + bv.shape_str() + " must be [S x 3d] for temporal " +
            rv.shape_str());
  check(cv.numel() == 3, "head_combine: bias must have 3 components, got " + cv.shape_str());
  std::int64_t s = bv.dim(0), t = rv.dim(0), d = rv.dim(1);

  Tensor out({3, t, s});
  for (int i = 0; i < 3; ++i) {
    double* block = out.data.data() + static_cast<std::int64_t>(i) * t * s;
    kernels::gemm_bt(t, s, d, rv.data.data(), d, bv.data.data() + i * d, 3 * d, block, s,
                     false);
    double c = cv.data[static_cast<std::size_t>(i)];
    for (std::int64_t j = 0; j < t * s; ++j) block[j] += c;
  }

  bool rg = wants_grad(spatial) || wants_grad(temporal) || wants_grad(bias);
  ValueId y = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_.back().backprop = [this, spatial, temporal, bias, y, s, t, d] {
      const double* dy = grad_buffer(y).data.data();
      const Tensor& bv2 = value(spatial);
      const Tensor& rv2 = value(temporal);
      for (int i = 0; i < 3; ++i) {
        const double* block = dy + static_cast<std::int64_t>(i) * t * s;
        if (wants_grad(temporal))
          kernels::gemm(t, d, s, block, s, bv2.data.data() + i * d, 3 * d,
                        grad_buffer(temporal).data.data(), d, true);
        if (wants_grad(spatial))
          kernels::gemm_at(s, d, t, block, s, rv2.data.data(), d,
                           grad_buffer(spatial).data.data() + i * d, 3 * d, true);
        if (wants_grad(bias)) {
          double acc = 0.0;
          for (std::int64_t j = 0; j < t * s; ++j) acc += block[j];
          grad_buffer(bias).data[static_cast<std::size_t>(i)] += acc;
        }
      }
    };
  }
  return y;
}

ValueId Tape::mae_loss(ValueId prediction, ValueId target) {
  const Tensor& pv = value(prediction);
  const Tensor& tv = value(target);
  check(pv.shape == tv.shape,
        "mae_loss: shape mismatch " + pv.shape_str() + " vs " + tv.shape_str());
  std::int64_t n = pv.numel();
  check(n > 0, "mae_loss: empty tensors");
  double sum = kernels::active().abs_sum_diff(n, pv.data.data(), tv.data.data());
  bool rg = wants_grad(prediction) || wants_grad(target);
  ValueId y = push(Tensor::scalar(sum / static_cast<double>(n)), rg, nullptr);
  if (rg) {
    nodes_.back().backprop = [this, prediction, target, y, n] {
      double g = grad_buffer(y).data[0] / static_cast<double>(n);
      const Tensor& pv2 = value(prediction);
      const Tensor& tv2 = value(target);
      if (wants_grad(prediction))
        kernels::active().sign_diff_scale(n, pv2.data.data(), tv2.data.data(), g,
                                          grad_buffer(prediction).data.data());
      if (wants_grad(target))
        kernels::active().sign_diff_scale(n, tv2.data.data(), pv2.data.data(), g,
                                          grad_buffer(target).data.data());
    };
  }
  return y;
}

void adam_update(Tensor& param, const Tensor& grad, AdamState& state, std::int64_t step,
                 const AdamConfig& config) {
  check(param.shape == grad.shape, "adam_update: gradient shape " + grad.shape_str() +
                                       " does not match parameter " + param.shape_str());
  check(step >= 1, "adam_update: step must be >= 1");
  if (state.m.data.empty()) state.m = Tensor(param.shape);
  if (state.v.data.empty()) state.v = Tensor(param.shape);
  double bias1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
  double bias2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
  kernels::active().adam_step(param.numel(), param.data.data(), grad.data.data(),
                              state.m.data.data(), state.v.data.data(), config.lr,
                              config.beta1, config.beta2, config.eps, bias1, bias2);
}

void write_checkpoint(const std::string& path, const std::vector<NamedTensorRef>& tensors) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail("cannot open for writing: " + path);
  auto put = [&](const void* data, std::size_t bytes) {
    f.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
    if (!f) fail("write failed: " + path);
  };
  put("OCKPT1", 6);
  std::uint32_t count = static_cast<std::uint32_t>(tensors.size());
  put(&count, 4);
  for (const NamedTensorRef& ref : tensors) {
    std::uint32_t name_len = static_cast<std::uint32_t>(ref.name.size());
    put(&name_len, 4);
    put(ref.name.data(), name_len);
    std::uint32_t rank = static_cast<std::uint32_t>(ref.tensor->shape.size());
    put(&rank, 4);
    for (std::int64_t d : ref.tensor->shape) {
      std::uint64_t dim = static_cast<std::uint64_t>(d);
      put(&dim, 8);
    }
    put(ref.tensor->data.data(), ref.tensor->data.size() * sizeof(double));
  }
}

std::vector<std::pair<std::string, Tensor>> read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail("cannot open checkpoint: " + path);
  auto get = [&](void* data, std::size_t bytes) {
    f.read(static_cast<char*>(data), static_cast<std::streamsize>(bytes));
    if (f.gcount() != static_cast<std::streamsize>(bytes))
      fail("truncated checkpoint: " + path);
  };
  char magic[6];
  get(magic, 6);
  if (std::memcmp(magic, "OCKPT1", 6) != 0) fail("bad magic in checkpoint: " + path);
  std::uint32_t count = 0;
  get(&count, 4);
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t name_len = 0;
    get(&name_len, 4);
    if (name_len > 4096) fail("checkpoint: unreasonable tensor name length in " + path);
    std::string name(name_len, '\0');
    get(name.data(), name_len);
    std::uint32_t rank = 0;
    get(&rank, 4);
    if (rank > 8) fail("checkpoint: unreasonable tensor rank in " + path);
    std::vector<std::int64_t> shape(rank);
    for (std::uint32_t r = 0; r < rank; ++r) {
      std::uint64_t dim = 0;
      get(&dim, 8);
      shape[r] = static_cast<std::int64_t>(dim);
    }
    Tensor t(shape);
    get(t.data.data(), t.data.size() * sizeof(double));
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

}  // namespace octoflow::ad

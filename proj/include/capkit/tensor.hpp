#pragma once

// Dense float64 tensors with a reverse-mode differentiation graph.
//
// The differentiable surface is deliberately small: matmul, add, multiply,
// concat, reshape, embedding (row gather), sigmoid, tanh, relu, layer_norm,
// dropout, softmax and log. Everything else in the library (reductions,
// transposes, convolutions, attention, losses) is composed from these.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "capkit/rng.hpp"

namespace capkit {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Receives the node whose grad is complete; accumulates into parents.
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

inline thread_local bool grad_enabled = true;

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : node_(std::make_shared<detail::Node>()) {
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    node_->data.assign(numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<double> values) : node_(std::make_shared<detail::Node>()) {
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (numel(shape) != values.size()) {
      throw ShapeError("shape " + shape_str(shape) + " does not hold " +
                       std::to_string(values.size()) + " values");
    }
    node_->data = std::move(values);
    node_->shape = std::move(shape);
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  const std::vector<double>& values() const { return node_->data; }

  double item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  double at(std::size_t i, std::size_t j) const { return node_->data[i * dim(1) + j]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    if (!is_leaf()) throw GraphError("requires_grad can only be toggled on leaf tensors");
    node_->requires_grad = flag;
    return *this;
  }

  bool is_leaf() const { return !node_->backward; }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  const char* op() const { return node_->op; }

  /// Copy of the values with no graph attached.
  Tensor detach() const { return Tensor(shape(), node_->data); }

  /// Reverse-mode accumulation from this scalar. Leaf gradients accumulate
  /// across calls; interior gradients are recomputed each call.
  void backward() const;

  /// Identity of the underlying storage; two handles alias iff equal.
  const void* id() const { return node_.get(); }

 private:
  friend Tensor make_result(Shape, std::vector<double>, std::vector<Tensor>, const char*,
                            std::function<void(detail::Node&)>);
  friend std::vector<std::shared_ptr<detail::Node>> topological_order(const Tensor&);

  std::shared_ptr<detail::Node> node_;
};

/// Builds an op output and, when any input participates in a graph and
/// recording is enabled, attaches the backward closure.
inline Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                          const char* op, std::function<void(detail::Node&)> backward) {
  Tensor out(std::move(shape), std::move(data));
  out.node_->op = op;
  if (!detail::grad_enabled) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  out.node_->requires_grad = true;
  out.node_->backward = std::move(backward);
  out.node_->parents.reserve(inputs.size());
  for (auto& in : inputs) out.node_->parents.push_back(in.node_);
  return out;
}

inline std::vector<std::shared_ptr<detail::Node>> topological_order(const Tensor& root) {
  std::vector<std::shared_ptr<detail::Node>> order;
  std::unordered_set<const detail::Node*> visited;
  // Iterative post-order DFS; recurrent graphs get deep.
  std::vector<std::pair<std::shared_ptr<detail::Node>, std::size_t>> stack;
  stack.emplace_back(root.node_, 0);
  visited.insert(root.node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      auto parent = node->parents[next++];
      if (parent->requires_grad && visited.insert(parent.get()).second) {
        stack.emplace_back(std::move(parent), 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

inline void Tensor::backward() const {
  if (!defined()) throw GraphError("backward() on an undefined tensor");
  if (size() != 1) throw GraphError("backward() needs a scalar loss, got shape " + shape_str(shape()));
  if (!node_->requires_grad) throw GraphError("backward() on a constant with no graph");
  auto order = topological_order(*this);
  for (auto& n : order) {
    if (n->backward) n->grad.assign(n->data.size(), 0.0);
  }
  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto& n = **it;
    if (n.backward) n.backward(n);
  }
}

namespace detail {

inline Node& parent(Node& n, std::size_t i) { return *n.parents[i]; }

// Numpy-style broadcasting of two shapes, with per-operand strides aligned to
// the output rank (stride 0 on broadcast axes).
struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;
  bool same = false;

  BroadcastPlan(const Shape& a, const Shape& b) {
    if (a == b) {
      same = true;
      out = a;
      return;
    }
    const std::size_t r = std::max(a.size(), b.size());
    out.assign(r, 1);
    stride_a.assign(r, 0);
    stride_b.assign(r, 0);
    auto dim_of = [r](const Shape& s, std::size_t d) -> std::size_t {
      const std::size_t off = r - s.size();
      return d < off ? 1 : s[d - off];
    };
    for (std::size_t d = 0; d < r; ++d) {
      const auto da = dim_of(a, d), db = dim_of(b, d);
      if (da != db && da != 1 && db != 1) {
        throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
      }
      out[d] = std::max(da, db);
    }
    std::size_t sa = 1, sb = 1;
    for (std::size_t d = r; d-- > 0;) {
      const auto da = dim_of(a, d), db = dim_of(b, d);
      stride_a[d] = da == 1 ? 0 : sa;
      stride_b[d] = db == 1 ? 0 : sb;
      sa *= da;
      sb *= db;
    }
  }

  template <typename F>
  void for_each(F&& f) const {
    const std::size_t n = numel(out);
    if (same) {
      for (std::size_t i = 0; i < n; ++i) f(i, i, i);
      return;
    }
    const std::size_t r = out.size();
    std::vector<std::size_t> idx(r, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t o = 0; o < n; ++o) {
      f(o, ia, ib);
      for (std::size_t d = r; d-- > 0;) {
        ++idx[d];
        ia += stride_a[d];
        ib += stride_b[d];
        if (idx[d] < out[d]) break;
        ia -= stride_a[d] * out[d];
        ib -= stride_b[d] * out[d];
        idx[d] = 0;
      }
    }
  }
};

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, const char* op, Fwd fwd, Deriv deriv) {
  std::vector<double> out(x.size());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
  return make_result(x.shape(), std::move(out), {x}, op, [deriv](Node& self) {
    auto& p = parent(self, 0);
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      p.grad[i] += self.grad[i] * deriv(p.data[i], self.data[i]);
    }
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      const double av = pa[i * k + l];
      if (av == 0.0) continue;
      const double* brow = pb + l * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return make_result({m, n}, std::move(out), {a, b}, "matmul", [m, k, n](detail::Node& self) {
    auto& na = detail::parent(self, 0);
    auto& nb = detail::parent(self, 1);
    const double* g = self.grad.data();
    if (na.requires_grad) {
      na.ensure_grad();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t l = 0; l < k; ++l) {
          const double* brow = nb.data.data() + l * n;
          const double* grow = g + i * n;
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
          na.grad[i * k + l] += s;
        }
      }
    }
    if (nb.requires_grad) {
      nb.ensure_grad();
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = g + i * n;
        for (std::size_t l = 0; l < k; ++l) {
          const double av = na.data[i * k + l];
          if (av == 0.0) continue;
          double* gb = nb.grad.data() + l * n;
          for (std::size_t j = 0; j < n; ++j) gb[j] += av * grow[j];
        }
      }
    }
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::BroadcastPlan plan(a.shape(), b.shape());
  std::vector<double> out(numel(plan.out));
  const auto da = a.data(), db = b.data();
  plan.for_each([&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = da[ia] + db[ib]; });
  Shape shape = plan.out;
  return make_result(std::move(shape), std::move(out), {a, b}, "add",
                     [plan = std::move(plan)](detail::Node& self) {
                       auto& na = detail::parent(self, 0);
                       auto& nb = detail::parent(self, 1);
                       if (na.requires_grad) na.ensure_grad();
                       if (nb.requires_grad) nb.ensure_grad();
                       plan.for_each([&](std::size_t o, std::size_t ia, std::size_t ib) {
                         if (na.requires_grad) na.grad[ia] += self.grad[o];
                         if (nb.requires_grad) nb.grad[ib] += self.grad[o];
                       });
                     });
}

inline Tensor multiply(const Tensor& a, const Tensor& b) {
  detail::BroadcastPlan plan(a.shape(), b.shape());
  std::vector<double> out(numel(plan.out));
  const auto da = a.data(), db = b.data();
  plan.for_each([&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = da[ia] * db[ib]; });
  Shape shape = plan.out;
  return make_result(std::move(shape), std::move(out), {a, b}, "multiply",
                     [plan = std::move(plan)](detail::Node& self) {
                       auto& na = detail::parent(self, 0);
                       auto& nb = detail::parent(self, 1);
                       if (na.requires_grad) na.ensure_grad();
                       if (nb.requires_grad) nb.ensure_grad();
                       plan.for_each([&](std::size_t o, std::size_t ia, std::size_t ib) {
                         if (na.requires_grad) na.grad[ia] += self.grad[o] * nb.data[ib];
                         if (nb.requires_grad) nb.grad[ib] += self.grad[o] * na.data[ia];
                       });
                     });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) throw ShapeError("concat shape mismatch: " + shape_str(first) + " vs " + shape_str(s));
    out_shape[axis] += s[axis];
    widths.push_back(s[axis]);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  const std::size_t total = out_shape[axis];
  std::vector<double> out(numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto src = parts[p].data();
    const std::size_t chunk = widths[p] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.begin() + o * chunk, chunk, out.begin() + (o * total + offset) * inner);
    }
    offset += widths[p];
  }
  return make_result(std::move(out_shape), std::move(out), parts, "concat",
                     [widths, outer, inner, total](detail::Node& self) {
                       std::size_t offset = 0;
                       for (std::size_t p = 0; p < widths.size(); ++p) {
                         auto& np = detail::parent(self, p);
                         const std::size_t chunk = widths[p] * inner;
                         if (np.requires_grad) {
                           np.ensure_grad();
                           for (std::size_t o = 0; o < outer; ++o) {
                             const double* g = self.grad.data() + (o * total + offset) * inner;
                             double* dst = np.grad.data() + o * chunk;
                             for (std::size_t i = 0; i < chunk; ++i) dst[i] += g[i];
                           }
                         }
                         offset += widths[p];
                       }
                     });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), {x}, "reshape", [](detail::Node& self) {
    auto& p = detail::parent(self, 0);
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

/// Row gather: out[i] = table[ids[i]]. Used for word embeddings, and also as
/// the indexing primitive behind transposes and convolution patches.
inline Tensor embedding(const Tensor& table, std::vector<std::size_t> ids) {
  if (table.rank() != 2) throw ShapeError("embedding table must be 2-D, got " + shape_str(table.shape()));
  if (ids.empty()) throw ShapeError("embedding lookup with no ids");
  const std::size_t rows = table.dim(0), cols = table.dim(1);
  std::vector<double> out(ids.size() * cols);
  const auto src = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= rows) {
      throw std::out_of_range("embedding id " + std::to_string(ids[i]) + " >= table rows " +
                              std::to_string(rows));
    }
    std::copy_n(src.begin() + ids[i] * cols, cols, out.begin() + i * cols);
  }
  const std::size_t n = ids.size();
  return make_result({n, cols}, std::move(out), {table}, "embedding",
                     [ids = std::move(ids), cols](detail::Node& self) {
                       auto& p = detail::parent(self, 0);
                       if (!p.requires_grad) return;
                       p.ensure_grad();
                       for (std::size_t i = 0; i < ids.size(); ++i) {
                         double* dst = p.grad.data() + ids[i] * cols;
                         const double* g = self.grad.data() + i * cols;
                         for (std::size_t j = 0; j < cols; ++j) dst[j] += g[j];
                       }
                     });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      x, "sigmoid", [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary(
      x, "tanh", [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor log(const Tensor& x) {
  return detail::unary(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

/// Normalizes over the last axis to zero mean and unit variance (no affine).
inline Tensor layer_norm(const Tensor& x, double eps = 1e-5) {
  if (x.rank() == 0) throw ShapeError("layer_norm needs rank >= 1");
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.size() / width;
  std::vector<double> out(x.size());
  std::vector<double> inv_std(rows);
  const auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * width;
    double mean = 0.0;
    for (std::size_t j = 0; j < width; ++j) mean += row[j];
    mean /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t j = 0; j < width; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(width);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < width; ++j) out[r * width + j] = (row[j] - mean) * inv_std[r];
  }
  return make_result(x.shape(), std::move(out), {x}, "layer_norm",
                     [width, rows, inv_std = std::move(inv_std)](detail::Node& self) {
                       auto& p = detail::parent(self, 0);
                       if (!p.requires_grad) return;
                       p.ensure_grad();
                       const double w = static_cast<double>(width);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* g = self.grad.data() + r * width;
                         const double* y = self.data.data() + r * width;
                         double mean_g = 0.0, mean_gy = 0.0;
                         for (std::size_t j = 0; j < width; ++j) {
                           mean_g += g[j];
                           mean_gy += g[j] * y[j];
                         }
                         mean_g /= w;
                         mean_gy /= w;
                         for (std::size_t j = 0; j < width; ++j) {
                           p.grad[r * width + j] += inv_std[r] * (g[j] - mean_g - y[j] * mean_gy);
                         }
                       }
                     });
}

/// Inverted dropout with an explicit mask (entries 0 or 1/(1-rate)).
inline Tensor dropout_with_mask(const Tensor& x, std::vector<double> mask) {
  if (mask.size() != x.size()) throw ShapeError("dropout mask size does not match input");
  std::vector<double> out(x.size());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] * mask[i];
  return make_result(x.shape(), std::move(out), {x}, "dropout", [mask = std::move(mask)](detail::Node& self) {
    auto& p = detail::parent(self, 0);
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < mask.size(); ++i) p.grad[i] += self.grad[i] * mask[i];
  });
}

inline std::vector<double> dropout_mask(std::size_t n, double rate, Rng& rng) {
  std::vector<double> mask(n);
  const double keep = 1.0 / (1.0 - rate);
  for (auto& m : mask) m = rng.uniform() < rate ? 0.0 : keep;
  return mask;
}

/// Identity outside training mode or when rate is zero.
inline Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout rate must be in [0, 1)");
  if (!training || rate == 0.0) return x;
  return dropout_with_mask(x, dropout_mask(x.size(), rate, rng));
}

/// Max-subtracted softmax along `axis`.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw ShapeError("softmax axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  const std::size_t len = x.dim(axis);
  for (std::size_t d = 0; d < axis; ++d) outer *= x.dim(d);
  for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  std::vector<double> out(x.size());
  const auto in = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      double mx = in[base];
      for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, in[base + k * inner]);
      double sum = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const double e = std::exp(in[base + k * inner] - mx);
        out[base + k * inner] = e;
        sum += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= sum;
    }
  }
  return make_result(x.shape(), std::move(out), {x}, "softmax", [outer, inner, len](detail::Node& self) {
    auto& p = detail::parent(self, 0);
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * len * inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < len; ++k) dot += self.grad[base + k * inner] * self.data[base + k * inner];
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t at = base + k * inner;
          p.grad[at] += self.data[at] * (self.grad[at] - dot);
        }
      }
    }
  });
}

}  // namespace capkit

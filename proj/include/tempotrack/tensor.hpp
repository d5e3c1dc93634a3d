#pragma once

// Reverse-mode autodiff over dense row-major tensors. Single-threaded per
// graph; distinct graphs may live on distinct threads. Spatial maps are
// channel-last [H,W,C], token matrices are [N,C].

#include <algorithm>
#include <atomic>
#include <limits>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <unordered_set>
#include <vector>

#include "tempotrack/common.hpp"

namespace tempotrack {

struct OpCounters {
  std::uint64_t matmuls = 0;
  std::uint64_t attention_logits_products = 0;
};

inline OpCounters& op_counters() {
  thread_local OpCounters counters;
  return counters;
}

inline void reset_op_counters() { op_counters() = OpCounters{}; }

namespace debug {
// Diagnostic fault switch: when set, softmax slices are corrupted after
// normalization so negative-control selftests can prove the checks bite.
inline bool& softmax_fault() {
  thread_local bool fault = false;
  return fault;
}
}  // namespace debug

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_mode_enabled() { return detail::grad_mode(); }

// Scoped inference mode: ops executed under the guard never record the
// graph, so long tracking runs keep constant memory.
struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // sized on demand, same length as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  // Pulls this node's grad into the parents. Receives *this so the closure
  // does not own the node (avoids shared_ptr cycles).
  std::function<void(TensorNode<T>&)> backprop;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->value.assign(numel(t.node_->shape), T(0));
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.node_->value.begin(), t.node_->value.end(), v);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (numel(shape) != data.size())
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rank() const { return node_->shape.size(); }

  std::span<T> data() { return {node_->value.data(), node_->value.size()}; }
  std::span<const T> data() const { return {node_->value.data(), node_->value.size()}; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  bool has_grad() const { return node_ && node_->grad.size() == node_->value.size(); }
  std::span<const T> grad() const {
    if (!has_grad())
      throw ContractError("tensor has no gradient (backward not run or not reached)");
    return {node_->grad.data(), node_->grad.size()};
  }

  T item() const {
    if (size() != 1)
      throw ContractError("item() requires a scalar tensor, got " + shape_str(shape()));
    return node_->value[0];
  }

  // Value copy with no graph attachment.
  Tensor detach(bool requires_grad = false) const {
    return from(node_->shape, node_->value, requires_grad);
  }

  void zero_grad() {
    if (node_) node_->grad.assign(node_->value.size(), T(0));
  }

  // Reverse accumulation from a scalar. Grads accumulate across calls until
  // zeroed, matching optimizer batching.
  void backward() const {
    if (size() != 1)
      throw ContractError("backward() requires a scalar loss, got " + shape_str(shape()));
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    topo(node_.get(), seen, order);
    node_->ensure_grad();
    node_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->backprop) n->backprop(*n);
    }
  }

  std::shared_ptr<Node>& node() { return node_; }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  static void topo(Node* n, std::unordered_set<Node*>& seen, std::vector<Node*>& order) {
    // Iterative DFS; graphs can be deep (per-frame chains).
    struct Frame {
      Node* node;
      std::size_t next_child;
    };
    if (seen.count(n)) return;
    std::vector<Frame> stack{{n, 0}};
    seen.insert(n);
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next_child < f.node->parents.size()) {
        Node* child = f.node->parents[f.next_child++].get();
        if (!seen.count(child)) {
          seen.insert(child);
          stack.push_back({child, 0});
        }
      } else {
        order.push_back(f.node);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<Node> node_;
};

namespace detail {

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value,
                      std::vector<Tensor<T>> parents,
                      std::function<void(TensorNode<T>&)> backprop) {
  Tensor<T> out = Tensor<T>::from(std::move(shape), std::move(value));
  bool needs = false;
  if (grad_mode()) {
    for (const auto& p : parents)
      if (p.requires_grad()) needs = true;
  }
  if (needs) {
    out.node()->requires_grad = true;
    out.node()->parents.reserve(parents.size());
    for (auto& p : parents) out.node()->parents.push_back(p.node());
    out.node()->backprop = std::move(backprop);
  }
  return out;
}

template <typename T>
void accumulate(TensorNode<T>& parent, const std::vector<T>& delta) {
  if (!parent.requires_grad) return;
  parent.ensure_grad();
  for (std::size_t i = 0; i < delta.size(); ++i) parent.grad[i] += delta[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and arithmetic ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  std::vector<T> v(a.size());
  const auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = da[i] + db[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(
      a.shape(), std::move(v), {a, b}, [an, bn](TensorNode<T>& out) {
        if (an->requires_grad) {
          an->ensure_grad();
          for (std::size_t i = 0; i < out.grad.size(); ++i) an->grad[i] += out.grad[i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t i = 0; i < out.grad.size(); ++i) bn->grad[i] += out.grad[i];
        }
      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("sub: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  std::vector<T> v(a.size());
  const auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = da[i] - db[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(
      a.shape(), std::move(v), {a, b}, [an, bn](TensorNode<T>& out) {
        if (an->requires_grad) {
          an->ensure_grad();
          for (std::size_t i = 0; i < out.grad.size(); ++i) an->grad[i] += out.grad[i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t i = 0; i < out.grad.size(); ++i) bn->grad[i] -= out.grad[i];
        }
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  std::vector<T> v(a.size());
  const auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = da[i] * db[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(
      a.shape(), std::move(v), {a, b}, [an, bn](TensorNode<T>& out) {
        if (an->requires_grad) {
          an->ensure_grad();
          for (std::size_t i = 0; i < out.grad.size(); ++i)
            an->grad[i] += out.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t i = 0; i < out.grad.size(); ++i)
            bn->grad[i] += out.grad[i] * an->value[i];
        }
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  std::vector<T> v(a.size());
  const auto da = a.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = da[i] * c;
  auto an = a.node();
  return detail::make_result<T>(a.shape(), std::move(v), {a},
                                [an, c](TensorNode<T>& out) {
                                  if (!an->requires_grad) return;
                                  an->ensure_grad();
                                  for (std::size_t i = 0; i < out.grad.size(); ++i)
                                    an->grad[i] += out.grad[i] * c;
                                });
}

// x * s with s a scalar tensor (learnable mixing weights).
template <typename T>
Tensor<T> scale_by(const Tensor<T>& x, const Tensor<T>& s) {
  if (s.size() != 1)
    throw ShapeError("scale_by: scaling tensor must be scalar, got " + shape_str(s.shape()));
  const T c = s.data()[0];
  std::vector<T> v(x.size());
  const auto dx = x.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = dx[i] * c;
  auto xn = x.node(), sn = s.node();
  return detail::make_result<T>(
      x.shape(), std::move(v), {x, s}, [xn, sn](TensorNode<T>& out) {
        const T cc = sn->value[0];
        if (xn->requires_grad) {
          xn->ensure_grad();
          for (std::size_t i = 0; i < out.grad.size(); ++i) xn->grad[i] += out.grad[i] * cc;
        }
        if (sn->requires_grad) {
          sn->ensure_grad();
          T acc = 0;
          for (std::size_t i = 0; i < out.grad.size(); ++i) acc += out.grad[i] * xn->value[i];
          sn->grad[0] += acc;
        }
      });
}

// Broadcast multiply over the last dimension: out[..., c] = x[..., c] * v[c].
template <typename T>
Tensor<T> channel_scale(const Tensor<T>& x, const Tensor<T>& v) {
  if (x.rank() < 1 || v.rank() != 1 || x.shape().back() != v.shape()[0])
    throw ShapeError("channel_scale: last dim of " + shape_str(x.shape()) +
                     " must match vector " + shape_str(v.shape()));
  const std::size_t c = v.shape()[0];
  const std::size_t rows = x.size() / c;
  std::vector<T> out(x.size());
  const auto dx = x.data(), dv = v.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = dx[r * c + j] * dv[j];
  auto xn = x.node(), vn = v.node();
  return detail::make_result<T>(
      x.shape(), std::move(out), {x, v}, [xn, vn, rows, c](TensorNode<T>& o) {
        if (xn->requires_grad) {
          xn->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j)
              xn->grad[r * c + j] += o.grad[r * c + j] * vn->value[j];
        }
        if (vn->requires_grad) {
          vn->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j)
              vn->grad[j] += o.grad[r * c + j] * xn->value[r * c + j];
        }
      });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> v(x.size());
  const auto dx = x.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = dx[i] > T(0) ? dx[i] : T(0);
  auto xn = x.node();
  return detail::make_result<T>(x.shape(), std::move(v), {x},
                                [xn](TensorNode<T>& out) {
                                  if (!xn->requires_grad) return;
                                  xn->ensure_grad();
                                  for (std::size_t i = 0; i < out.grad.size(); ++i)
                                    if (xn->value[i] > T(0)) xn->grad[i] += out.grad[i];
                                });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  // Saturated outputs are nudged to the nearest representable interior
  // values so results stay strictly inside (0,1).
  constexpr T lo = std::numeric_limits<T>::min();
  const T hi = T(1) - std::numeric_limits<T>::epsilon() / T(2);
  std::vector<T> v(x.size());
  const auto dx = x.data();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const T z = dx[i];
    const T s = z >= T(0) ? T(1) / (T(1) + std::exp(-z))
                          : std::exp(z) / (T(1) + std::exp(z));
    v[i] = std::clamp(s, lo, hi);
  }
  auto xn = x.node();
  std::vector<T> saved = v;
  return detail::make_result<T>(
      x.shape(), std::move(v), {x}, [xn, saved = std::move(saved)](TensorNode<T>& out) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < out.grad.size(); ++i)
          xn->grad[i] += out.grad[i] * saved[i] * (T(1) - saved[i]);
      });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  auto xn = x.node();
  return detail::make_result<T>({1}, {acc}, {x}, [xn](TensorNode<T>& out) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += out.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  const T inv = T(1) / static_cast<T>(x.size());
  T acc = 0;
  for (T v : x.data()) acc += v;
  acc *= inv;
  auto xn = x.node();
  return detail::make_result<T>({1}, {acc}, {x}, [xn, inv](TensorNode<T>& out) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += out.grad[0] * inv;
  });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(shape));
  std::vector<T> v(x.data().begin(), x.data().end());
  auto xn = x.node();
  return detail::make_result<T>(std::move(shape), std::move(v), {x},
                                [xn](TensorNode<T>& out) {
                                  if (!xn->requires_grad) return;
                                  xn->ensure_grad();
                                  for (std::size_t i = 0; i < out.grad.size(); ++i)
                                    xn->grad[i] += out.grad[i];
                                });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat: empty input list");
  const Shape& s0 = xs[0].shape();
  if (axis >= s0.size())
    throw ShapeError("concat: axis " + std::to_string(axis) + " invalid for " + shape_str(s0));
  std::size_t axis_total = 0;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    if (s.size() != s0.size())
      throw ShapeError("concat: rank mismatch " + shape_str(s0) + " vs " + shape_str(s));
    for (std::size_t d = 0; d < s.size(); ++d)
      if (d != axis && s[d] != s0[d])
        throw ShapeError("concat: incompatible shapes " + shape_str(s0) + " vs " +
                         shape_str(s) + " on non-concat dim " + std::to_string(d));
    axis_total += s[axis];
  }
  Shape out_shape = s0;
  out_shape[axis] = axis_total;

  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
  for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];

  std::vector<T> out(numel(out_shape));
  std::size_t offset = 0;  // in axis units
  for (const auto& x : xs) {
    const std::size_t ax = x.shape()[axis];
    const auto dx = x.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + (o * axis_total + offset) * inner,
                  dx.data() + o * ax * inner, ax * inner * sizeof(T));
    offset += ax;
  }

  std::vector<std::shared_ptr<TensorNode<T>>> nodes;
  std::vector<std::size_t> axes;
  for (const auto& x : xs) {
    nodes.push_back(x.node());
    axes.push_back(x.shape()[axis]);
  }
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), xs,
      [nodes, axes, outer, inner, axis_total](TensorNode<T>& o) {
        std::size_t offset = 0;
        for (std::size_t p = 0; p < nodes.size(); ++p) {
          auto& n = *nodes[p];
          const std::size_t ax = axes[p];
          if (n.requires_grad) {
            n.ensure_grad();
            for (std::size_t ou = 0; ou < outer; ++ou)
              for (std::size_t i = 0; i < ax * inner; ++i)
                n.grad[ou * ax * inner + i] += o.grad[(ou * axis_total + offset) * inner + i];
          }
          offset += ax;
        }
      });
}

template <typename T>
Tensor<T> slice_last(const Tensor<T>& x, std::size_t start, std::size_t len) {
  const std::size_t c = x.shape().back();
  if (start + len > c)
    throw ShapeError("slice_last: [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of range for " +
                     shape_str(x.shape()));
  Shape out_shape = x.shape();
  out_shape.back() = len;
  const std::size_t rows = x.size() / c;
  std::vector<T> out(rows * len);
  const auto dx = x.data();
  for (std::size_t r = 0; r < rows; ++r)
    std::memcpy(out.data() + r * len, dx.data() + r * c + start, len * sizeof(T));
  auto xn = x.node();
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), {x},
      [xn, start, len, c, rows](TensorNode<T>& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < len; ++j)
            xn->grad[r * c + start + j] += o.grad[r * len + j];
      });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  ++op_counters().matmuls;
  std::vector<T> out(n * m, T(0));
  const auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T av = da[i * k + p];
      const T* brow = db.data() + p * m;
      T* orow = out.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(
      {n, m}, std::move(out), {a, b}, [an, bn, n, k, m](TensorNode<T>& o) {
        if (an->requires_grad) {
          an->ensure_grad();
          // dA = dOut * B^T
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              T acc = 0;
              const T* grow = o.grad.data() + i * m;
              const T* brow = bn->value.data() + p * m;
              for (std::size_t j = 0; j < m; ++j) acc += grow[j] * brow[j];
              an->grad[i * k + p] += acc;
            }
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          // dB = A^T * dOut
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const T av = an->value[i * k + p];
              const T* grow = o.grad.data() + i * m;
              T* brow = bn->grad.data() + p * m;
              for (std::size_t j = 0; j < m; ++j) brow[j] += av * grow[j];
            }
        }
      });
}

// [N,C] + [C] row-broadcast bias.
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.rank() != 2 || b.rank() != 1 || x.shape()[1] != b.shape()[0])
    throw ShapeError("add_rowvec: incompatible shapes " + shape_str(x.shape()) + " and " +
                     shape_str(b.shape()));
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  std::vector<T> out(x.size());
  const auto dx = x.data(), db = b.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = dx[i * c + j] + db[j];
  auto xn = x.node(), bn = b.node();
  return detail::make_result<T>(
      x.shape(), std::move(out), {x, b}, [xn, bn, n, c](TensorNode<T>& o) {
        if (xn->requires_grad) {
          xn->ensure_grad();
          for (std::size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) bn->grad[j] += o.grad[i * c + j];
        }
      });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add_rowvec(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// Normalization and reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank())
    throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for " +
                     shape_str(x.shape()));
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1;
  const std::size_t n = s[axis];
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];

  std::vector<T> out(x.size());
  const auto dx = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = dx[base];
      for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, dx[base + i * inner]);
      T denom = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const T e = std::exp(dx[base + i * inner] - mx);
        out[base + i * inner] = e;
        denom += e;
      }
      const T inv = T(1) / denom;
      for (std::size_t i = 0; i < n; ++i) out[base + i * inner] *= inv;
      if (debug::softmax_fault()) out[base] += T(0.05);
    }

  auto xn = x.node();
  std::vector<T> saved = out;
  return detail::make_result<T>(
      x.shape(), std::move(out), {x},
      [xn, saved = std::move(saved), outer, inner, n](TensorNode<T>& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t ou = 0; ou < outer; ++ou)
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = ou * n * inner + in;
            T dot = 0;
            for (std::size_t i = 0; i < n; ++i)
              dot += o.grad[base + i * inner] * saved[base + i * inner];
            for (std::size_t i = 0; i < n; ++i)
              xn->grad[base + i * inner] +=
                  saved[base + i * inner] * (o.grad[base + i * inner] - dot);
          }
      });
}

// Normalizes the last dimension to zero mean / unit variance, then applies
// the affine pair. Variance is biased (1/D), epsilon inside the sqrt.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  const std::size_t d = x.shape().back();
  if (gamma.rank() != 1 || beta.rank() != 1 || gamma.shape()[0] != d || beta.shape()[0] != d)
    throw ShapeError("layer_norm: affine shapes " + shape_str(gamma.shape()) + "/" +
                     shape_str(beta.shape()) + " do not match last dim of " +
                     shape_str(x.shape()));
  const std::size_t rows = x.size() / d;
  std::vector<T> out(x.size());
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(rows);
  const auto dx = x.data(), dg = gamma.data(), db = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = dx.data() + r * d;
    T m = 0;
    for (std::size_t j = 0; j < d; ++j) m += row[j];
    m /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const T c = row[j] - m;
      var += c * c;
    }
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - m) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = dg[j] * h + db[j];
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return detail::make_result<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
       d](TensorNode<T>& o) {
        if (gn->requires_grad) {
          gn->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j)
              gn->grad[j] += o.grad[r * d + j] * xhat[r * d + j];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) bn->grad[j] += o.grad[r * d + j];
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          const T invd = T(1) / static_cast<T>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            // dxhat = dy * gamma; dx via the standard two-moment reduction.
            T sum_dxhat = 0, sum_dxhat_xhat = 0;
            for (std::size_t j = 0; j < d; ++j) {
              const T dxh = o.grad[r * d + j] * gn->value[j];
              sum_dxhat += dxh;
              sum_dxhat_xhat += dxh * xhat[r * d + j];
            }
            for (std::size_t j = 0; j < d; ++j) {
              const T dxh = o.grad[r * d + j] * gn->value[j];
              xn->grad[r * d + j] +=
                  inv_std[r] * (dxh - invd * sum_dxhat - xhat[r * d + j] * invd * sum_dxhat_xhat);
            }
          }
        }
      });
}

// Per-channel spatial normalization of an [H,W,C] map (zero mean / unit
// variance over the H*W positions of each channel) followed by an affine
// pair. Keeps feature magnitudes in a fixed range so correlation responses
// can neither collapse nor blow up during training.
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                        T eps = T(1e-5)) {
  if (x.rank() != 3)
    throw ShapeError("instance_norm: expected rank-3 [HxWxC], got " + shape_str(x.shape()));
  const std::size_t h = x.shape()[0], w = x.shape()[1], c = x.shape()[2];
  if (gamma.rank() != 1 || beta.rank() != 1 || gamma.shape()[0] != c || beta.shape()[0] != c)
    throw ShapeError("instance_norm: affine shapes " + shape_str(gamma.shape()) + "/" +
                     shape_str(beta.shape()) + " do not match channels of " +
                     shape_str(x.shape()));
  const std::size_t np = h * w;
  std::vector<T> out(x.size());
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(c);
  const auto dx = x.data(), dg = gamma.data(), db = beta.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    T m = 0;
    for (std::size_t p = 0; p < np; ++p) m += dx[p * c + ch];
    m /= static_cast<T>(np);
    T var = 0;
    for (std::size_t p = 0; p < np; ++p) {
      const T d = dx[p * c + ch] - m;
      var += d * d;
    }
    var /= static_cast<T>(np);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[ch] = is;
    for (std::size_t p = 0; p < np; ++p) {
      const T hh = (dx[p * c + ch] - m) * is;
      xhat[p * c + ch] = hh;
      out[p * c + ch] = dg[ch] * hh + db[ch];
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return detail::make_result<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), np,
       c](TensorNode<T>& o) {
        if (gn->requires_grad) {
          gn->ensure_grad();
          for (std::size_t p = 0; p < np; ++p)
            for (std::size_t ch = 0; ch < c; ++ch)
              gn->grad[ch] += o.grad[p * c + ch] * xhat[p * c + ch];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t p = 0; p < np; ++p)
            for (std::size_t ch = 0; ch < c; ++ch) bn->grad[ch] += o.grad[p * c + ch];
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          const T invn = T(1) / static_cast<T>(np);
          for (std::size_t ch = 0; ch < c; ++ch) {
            T sum_dxhat = 0, sum_dxhat_xhat = 0;
            for (std::size_t p = 0; p < np; ++p) {
              const T dxh = o.grad[p * c + ch] * gn->value[ch];
              sum_dxhat += dxh;
              sum_dxhat_xhat += dxh * xhat[p * c + ch];
            }
            for (std::size_t p = 0; p < np; ++p) {
              const T dxh = o.grad[p * c + ch] * gn->value[ch];
              xn->grad[p * c + ch] += inv_std[ch] * (dxh - invn * sum_dxhat -
                                                     xhat[p * c + ch] * invn * sum_dxhat_xhat);
            }
          }
        }
      });
}

// [H,W,C] -> [C] per-channel spatial mean.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 3)
    throw ShapeError("global_avg_pool: expected rank-3 [HxWxC], got " + shape_str(x.shape()));
  const std::size_t h = x.shape()[0], w = x.shape()[1], c = x.shape()[2];
  const T inv = T(1) / static_cast<T>(h * w);
  std::vector<T> out(c, T(0));
  const auto dx = x.data();
  for (std::size_t p = 0; p < h * w; ++p)
    for (std::size_t j = 0; j < c; ++j) out[j] += dx[p * c + j];
  for (std::size_t j = 0; j < c; ++j) out[j] *= inv;
  auto xn = x.node();
  return detail::make_result<T>({c}, std::move(out), {x},
                                [xn, h, w, c, inv](TensorNode<T>& o) {
                                  if (!xn->requires_grad) return;
                                  xn->ensure_grad();
                                  for (std::size_t p = 0; p < h * w; ++p)
                                    for (std::size_t j = 0; j < c; ++j)
                                      xn->grad[p * c + j] += o.grad[j] * inv;
                                });
}

// ---------------------------------------------------------------------------
// Convolution (channel-last, symmetric zero padding)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernels, const Tensor<T>& bias,
                 std::size_t stride, std::size_t pad) {
  if (x.rank() != 3 || kernels.rank() != 4)
    throw ShapeError("conv2d: need input [HxWxC] and kernels [KHxKWxCinxCout], got " +
                     shape_str(x.shape()) + " and " + shape_str(kernels.shape()));
  const std::size_t h = x.shape()[0], w = x.shape()[1], cin = x.shape()[2];
  const std::size_t kh = kernels.shape()[0], kw = kernels.shape()[1];
  const std::size_t kcin = kernels.shape()[2], cout = kernels.shape()[3];
  if (kcin != cin)
    throw ShapeError("conv2d: channel mismatch, input " + shape_str(x.shape()) +
                     " vs kernels " + shape_str(kernels.shape()));
  if (bias.rank() != 1 || bias.shape()[0] != cout)
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " must be [" +
                     std::to_string(cout) + "]");
  if (h + 2 * pad < kh || w + 2 * pad < kw)
    throw ShapeError("conv2d: non-positive output size for input " + shape_str(x.shape()) +
                     " kernel " + shape_str(kernels.shape()));
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1;
  const std::size_t ow = (w + 2 * pad - kw) / stride + 1;

  std::vector<T> out(oh * ow * cout);
  const auto dx = x.data(), dk = kernels.data(), db = bias.data();
  for (std::size_t oy = 0; oy < oh; ++oy)
    for (std::size_t ox = 0; ox < ow; ++ox) {
      T* orow = out.data() + (oy * ow + ox) * cout;
      for (std::size_t j = 0; j < cout; ++j) orow[j] = db[j];
      for (std::size_t ky = 0; ky < kh; ++ky) {
        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                  static_cast<std::ptrdiff_t>(pad);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                    static_cast<std::ptrdiff_t>(pad);
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
          const T* xpix = dx.data() + (static_cast<std::size_t>(iy) * w +
                                       static_cast<std::size_t>(ix)) * cin;
          const T* krow = dk.data() + (ky * kw + kx) * cin * cout;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const T xv = xpix[ci];
            const T* kc = krow + ci * cout;
            for (std::size_t j = 0; j < cout; ++j) orow[j] += xv * kc[j];
          }
        }
      }
    }

  auto xn = x.node(), kn = kernels.node(), bn = bias.node();
  return detail::make_result<T>(
      {oh, ow, cout}, std::move(out), {x, kernels, bias},
      [xn, kn, bn, h, w, cin, kh, kw, cout, oh, ow, stride, pad](TensorNode<T>& o) {
        const bool gx = xn->requires_grad, gk = kn->requires_grad, gb = bn->requires_grad;
        if (gx) xn->ensure_grad();
        if (gk) kn->ensure_grad();
        if (gb) bn->ensure_grad();
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const T* grow = o.grad.data() + (oy * ow + ox) * cout;
            if (gb)
              for (std::size_t j = 0; j < cout; ++j) bn->grad[j] += grow[j];
            if (!gx && !gk) continue;
            for (std::size_t ky = 0; ky < kh; ++ky) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                        static_cast<std::ptrdiff_t>(pad);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                          static_cast<std::ptrdiff_t>(pad);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                const std::size_t xoff = (static_cast<std::size_t>(iy) * w +
                                          static_cast<std::size_t>(ix)) * cin;
                const std::size_t koff = (ky * kw + kx) * cin * cout;
                for (std::size_t ci = 0; ci < cin; ++ci) {
                  const T xv = xn->value[xoff + ci];
                  const T* kc = kn->value.data() + koff + ci * cout;
                  T accx = 0;
                  for (std::size_t j = 0; j < cout; ++j) {
                    accx += grow[j] * kc[j];
                    if (gk) kn->grad[koff + ci * cout + j] += grow[j] * xv;
                  }
                  if (gx) xn->grad[xoff + ci] += accx;
                }
              }
            }
          }
      });
}

// ---------------------------------------------------------------------------
// Attention primitives (fused per-head forms so one call == one logits GEMM)
// ---------------------------------------------------------------------------

// Per-head scaled dot products: q,k are [N,C] with C = heads*hd;
// out[h,i,j] = q_h[i]·k_h[j] / sqrt(hd). One call counts as one logits
// product in the op counters regardless of head count.
template <typename T>
Tensor<T> attention_logits(const Tensor<T>& q, const Tensor<T>& k, std::size_t heads) {
  if (q.rank() != 2 || k.rank() != 2 || q.shape()[1] != k.shape()[1])
    throw ShapeError("attention_logits: incompatible shapes " + shape_str(q.shape()) +
                     " and " + shape_str(k.shape()));
  const std::size_t c = q.shape()[1];
  if (heads == 0 || c % heads != 0)
    throw ShapeError("attention_logits: channels " + std::to_string(c) +
                     " not divisible by heads " + std::to_string(heads));
  const std::size_t nq = q.shape()[0], nk = k.shape()[0], hd = c / heads;
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(hd));
  ++op_counters().attention_logits_products;

  std::vector<T> out(heads * nq * nk);
  const auto dq = q.data(), dk = k.data();
  for (std::size_t hh = 0; hh < heads; ++hh)
    for (std::size_t i = 0; i < nq; ++i) {
      const T* qrow = dq.data() + i * c + hh * hd;
      T* orow = out.data() + (hh * nq + i) * nk;
      for (std::size_t j = 0; j < nk; ++j) {
        const T* krow = dk.data() + j * c + hh * hd;
        T acc = 0;
        for (std::size_t d = 0; d < hd; ++d) acc += qrow[d] * krow[d];
        orow[j] = acc * inv_scale;
      }
    }

  auto qn = q.node(), kn = k.node();
  return detail::make_result<T>(
      {heads, nq, nk}, std::move(out), {q, k},
      [qn, kn, heads, nq, nk, hd, c, inv_scale](TensorNode<T>& o) {
        if (qn->requires_grad) {
          qn->ensure_grad();
          for (std::size_t hh = 0; hh < heads; ++hh)
            for (std::size_t i = 0; i < nq; ++i) {
              T* qg = qn->grad.data() + i * c + hh * hd;
              const T* grow = o.grad.data() + (hh * nq + i) * nk;
              for (std::size_t j = 0; j < nk; ++j) {
                const T g = grow[j] * inv_scale;
                const T* krow = kn->value.data() + j * c + hh * hd;
                for (std::size_t d = 0; d < hd; ++d) qg[d] += g * krow[d];
              }
            }
        }
        if (kn->requires_grad) {
          kn->ensure_grad();
          for (std::size_t hh = 0; hh < heads; ++hh)
            for (std::size_t i = 0; i < nq; ++i) {
              const T* qrow = qn->value.data() + i * c + hh * hd;
              const T* grow = o.grad.data() + (hh * nq + i) * nk;
              for (std::size_t j = 0; j < nk; ++j) {
                const T g = grow[j] * inv_scale;
                T* kg = kn->grad.data() + j * c + hh * hd;
                for (std::size_t d = 0; d < hd; ++d) kg[d] += g * qrow[d];
              }
            }
        }
      });
}

// scores [heads,Nq,Nk] x values [Nk,C] -> [Nq,C]; head h writes channels
// [h*hd, (h+1)*hd) so the per-head results come out already concatenated.
template <typename T>
Tensor<T> attention_apply(const Tensor<T>& scores, const Tensor<T>& v, std::size_t heads) {
  if (scores.rank() != 3 || v.rank() != 2 || scores.shape()[0] != heads ||
      scores.shape()[2] != v.shape()[0] || v.shape()[1] % heads != 0)
    throw ShapeError("attention_apply: incompatible shapes " + shape_str(scores.shape()) +
                     " and " + shape_str(v.shape()));
  const std::size_t nq = scores.shape()[1], nk = scores.shape()[2], c = v.shape()[1];
  const std::size_t hd = c / heads;
  std::vector<T> out(nq * c, T(0));
  const auto ds = scores.data(), dv = v.data();
  for (std::size_t hh = 0; hh < heads; ++hh)
    for (std::size_t i = 0; i < nq; ++i) {
      const T* srow = ds.data() + (hh * nq + i) * nk;
      T* orow = out.data() + i * c + hh * hd;
      for (std::size_t j = 0; j < nk; ++j) {
        const T s = srow[j];
        const T* vrow = dv.data() + j * c + hh * hd;
        for (std::size_t d = 0; d < hd; ++d) orow[d] += s * vrow[d];
      }
    }
  auto sn = scores.node(), vn = v.node();
  return detail::make_result<T>(
      {nq, c}, std::move(out), {scores, v},
      [sn, vn, heads, nq, nk, c, hd](TensorNode<T>& o) {
        if (sn->requires_grad) {
          sn->ensure_grad();
          for (std::size_t hh = 0; hh < heads; ++hh)
            for (std::size_t i = 0; i < nq; ++i) {
              const T* grow = o.grad.data() + i * c + hh * hd;
              T* sg = sn->grad.data() + (hh * nq + i) * nk;
              for (std::size_t j = 0; j < nk; ++j) {
                const T* vrow = vn->value.data() + j * c + hh * hd;
                T acc = 0;
                for (std::size_t d = 0; d < hd; ++d) acc += grow[d] * vrow[d];
                sg[j] += acc;
              }
            }
        }
        if (vn->requires_grad) {
          vn->ensure_grad();
          for (std::size_t hh = 0; hh < heads; ++hh)
            for (std::size_t i = 0; i < nq; ++i) {
              const T* grow = o.grad.data() + i * c + hh * hd;
              const T* srow = sn->value.data() + (hh * nq + i) * nk;
              for (std::size_t j = 0; j < nk; ++j) {
                const T s = srow[j];
                T* vg = vn->grad.data() + j * c + hh * hd;
                for (std::size_t d = 0; d < hd; ++d) vg[d] += s * grow[d];
              }
            }
        }
      });
}

// [h,A,B] -> [h,B,A]. Cheap permutation; this is the transpose reuse path,
// deliberately not a GEMM and not counted as one.
template <typename T>
Tensor<T> transpose12(const Tensor<T>& x) {
  if (x.rank() != 3)
    throw ShapeError("transpose12: expected rank-3, got " + shape_str(x.shape()));
  const std::size_t h = x.shape()[0], a = x.shape()[1], b = x.shape()[2];
  std::vector<T> out(x.size());
  const auto dx = x.data();
  for (std::size_t hh = 0; hh < h; ++hh)
    for (std::size_t i = 0; i < a; ++i)
      for (std::size_t j = 0; j < b; ++j)
        out[(hh * b + j) * a + i] = dx[(hh * a + i) * b + j];
  auto xn = x.node();
  return detail::make_result<T>({h, b, a}, std::move(out), {x},
                                [xn, h, a, b](TensorNode<T>& o) {
                                  if (!xn->requires_grad) return;
                                  xn->ensure_grad();
                                  for (std::size_t hh = 0; hh < h; ++hh)
                                    for (std::size_t i = 0; i < a; ++i)
                                      for (std::size_t j = 0; j < b; ++j)
                                        xn->grad[(hh * a + i) * b + j] +=
                                            o.grad[(hh * b + j) * a + i];
                                });
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Mean binary cross-entropy from raw logits; numerically stable form.
// Targets are plain data (no grad).
template <typename T>
Tensor<T> bce_with_logits_mean(const Tensor<T>& logits, const Tensor<T>& targets) {
  if (logits.shape() != targets.shape())
    throw ShapeError("bce_with_logits_mean: shape mismatch " + shape_str(logits.shape()) +
                     " vs " + shape_str(targets.shape()));
  const std::size_t n = logits.size();
  const auto dx = logits.data(), dt = targets.data();
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T x = dx[i], t = dt[i];
    acc += std::max(x, T(0)) - x * t + std::log1p(std::exp(-std::abs(x)));
  }
  acc /= static_cast<T>(n);
  auto xn = logits.node(), tn = targets.node();
  return detail::make_result<T>(
      {1}, {acc}, {logits, targets}, [xn, tn, n](TensorNode<T>& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const T g = o.grad[0] / static_cast<T>(n);
        for (std::size_t i = 0; i < n; ++i) {
          const T x = xn->value[i];
          const T s = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                                : std::exp(x) / (T(1) + std::exp(x));
          xn->grad[i] += g * (s - tn->value[i]);
        }
      });
}

// Weighted sum of per-element binary cross-entropies from raw logits;
// weights are plain data and should sum to 1 for a mean-style loss.
template <typename T>
Tensor<T> bce_with_logits_weighted(const Tensor<T>& logits, const Tensor<T>& targets,
                                   const Tensor<T>& weights) {
  if (logits.shape() != targets.shape() || logits.shape() != weights.shape())
    throw ShapeError("bce_with_logits_weighted: shape mismatch " + shape_str(logits.shape()) +
                     " vs " + shape_str(targets.shape()) + " vs " + shape_str(weights.shape()));
  const std::size_t n = logits.size();
  const auto dx = logits.data(), dt = targets.data(), dw = weights.data();
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T x = dx[i], t = dt[i];
    acc += dw[i] * (std::max(x, T(0)) - x * t + std::log1p(std::exp(-std::abs(x))));
  }
  auto xn = logits.node(), tn = targets.node(), wn = weights.node();
  return detail::make_result<T>(
      {1}, {acc}, {logits, targets, weights}, [xn, tn, wn, n](TensorNode<T>& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const T g = o.grad[0];
        for (std::size_t i = 0; i < n; ++i) {
          const T x = xn->value[i];
          const T s = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                                : std::exp(x) / (T(1) + std::exp(x));
          xn->grad[i] += g * wn->value[i] * (s - tn->value[i]);
        }
      });
}

// Mean (1 - IoU) between predicted and target boxes expressed as non-negative
// (l,t,r,b) distances from a shared cell center, restricted to cells where
// mask > 0.5. reg is [H,W,4]; targets [H,W,4] and mask [H,W] are plain data.
template <typename T>
Tensor<T> ltrb_iou_loss(const Tensor<T>& reg, const Tensor<T>& targets, const Tensor<T>& mask) {
  if (reg.rank() != 3 || reg.shape()[2] != 4 || reg.shape() != targets.shape() ||
      mask.rank() != 2 || mask.shape()[0] != reg.shape()[0] || mask.shape()[1] != reg.shape()[1])
    throw ShapeError("ltrb_iou_loss: incompatible shapes " + shape_str(reg.shape()) + ", " +
                     shape_str(targets.shape()) + ", " + shape_str(mask.shape()));
  const std::size_t cells = reg.shape()[0] * reg.shape()[1];
  const auto dr = reg.data(), dt = targets.data(), dm = mask.data();
  const T eps = T(1e-9);
  std::size_t count = 0;
  T acc = 0;
  for (std::size_t p = 0; p < cells; ++p) {
    if (dm[p] <= T(0.5)) continue;
    ++count;
    const T l = dr[p * 4 + 0], t = dr[p * 4 + 1], r = dr[p * 4 + 2], b = dr[p * 4 + 3];
    const T lt = dt[p * 4 + 0], tt = dt[p * 4 + 1], rt = dt[p * 4 + 2], bt = dt[p * 4 + 3];
    const T iw = std::min(l, lt) + std::min(r, rt);
    const T ih = std::min(t, tt) + std::min(b, bt);
    const T inter = iw * ih;
    const T uni = (l + r) * (t + b) + (lt + rt) * (tt + bt) - inter + eps;
    acc += T(1) - inter / uni;
  }
  if (count == 0)
    return detail::make_result<T>({1}, {T(0)}, {reg}, [](TensorNode<T>&) {});
  acc /= static_cast<T>(count);

  auto rn = reg.node(), tn = targets.node(), mn = mask.node();
  return detail::make_result<T>(
      {1}, {acc}, {reg, targets, mask}, [rn, tn, mn, cells, count, eps](TensorNode<T>& o) {
        if (!rn->requires_grad) return;
        rn->ensure_grad();
        const T gscale = o.grad[0] / static_cast<T>(count);
        for (std::size_t p = 0; p < cells; ++p) {
          if (mn->value[p] <= T(0.5)) continue;
          const T l = rn->value[p * 4 + 0], t = rn->value[p * 4 + 1];
          const T r = rn->value[p * 4 + 2], b = rn->value[p * 4 + 3];
          const T lt = tn->value[p * 4 + 0], tt = tn->value[p * 4 + 1];
          const T rt = tn->value[p * 4 + 2], bt = tn->value[p * 4 + 3];
          const T iw = std::min(l, lt) + std::min(r, rt);
          const T ih = std::min(t, tt) + std::min(b, bt);
          const T inter = iw * ih;
          const T area_p = (l + r) * (t + b);
          const T area_t = (lt + rt) * (tt + bt);
          const T uni = area_p + area_t - inter + eps;
          // d(1-iou)/dz = -(d inter * uni - inter * d uni)/uni^2,
          // d uni = d area_p - d inter.
          const T inv_u2 = T(1) / (uni * uni);
          const T diw_dl = l < lt ? T(1) : T(0);
          const T diw_dr = r < rt ? T(1) : T(0);
          const T dih_dt = t < tt ? T(1) : T(0);
          const T dih_db = b < bt ? T(1) : T(0);
          const T dinter[4] = {diw_dl * ih, dih_dt * iw, diw_dr * ih, dih_db * iw};
          const T darea[4] = {t + b, l + r, t + b, l + r};
          for (int z = 0; z < 4; ++z) {
            const T duni = darea[z] - dinter[z];
            const T diou = (dinter[z] * uni - inter * duni) * inv_u2;
            rn->grad[p * 4 + z] += gscale * (-diou);
          }
        }
      });
}

template <typename T>
bool all_finite(const Tensor<T>& x) {
  for (T v : x.data())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace tempotrack

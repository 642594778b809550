#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "spanet/common.hpp"

namespace spanet {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until backward() touches this node
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(const TensorNode&)> backward_fn;

  std::size_t numel() const { return data.size(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

// Thread-local switch: when disabled, ops do not record the backward graph.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::grad_mode(); }

// Value-semantic handle to a node in the define-by-run graph. Copies share
// the underlying buffer; a fresh tensor is created by every op.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), 0.0, requires_grad);
  }

  static Tensor filled(Shape shape, double value, bool requires_grad = false) {
    auto n = std::make_shared<detail::TensorNode>();
    n->shape = std::move(shape);
    n->data.assign(shape_numel(n->shape), value);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from_vector(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
      throw DimensionError("Tensor: shape " + shape_str(shape) + " does not match data length " +
                           std::to_string(data.size()));
    auto n = std::make_shared<detail::TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from_vector({}, {v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  std::size_t rank() const { return n_->shape.size(); }
  std::size_t size() const { return n_->data.size(); }
  std::vector<double>& data() { return n_->data; }
  const std::vector<double>& data() const { return n_->data; }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool v) { n_->requires_grad = v; }

  bool has_grad() const { return n_ && n_->grad.size() == n_->data.size(); }
  const std::vector<double>& grad() const {
    if (!has_grad()) throw ContractError("Tensor::grad: no gradient buffer; call backward() first");
    return n_->grad;
  }
  std::vector<double>& grad() {
    if (!has_grad()) throw ContractError("Tensor::grad: no gradient buffer; call backward() first");
    return n_->grad;
  }
  void zero_grad() {
    if (n_) n_->grad.assign(n_->data.size(), 0.0);
  }

  double item() const {
    if (size() != 1) throw ContractError("Tensor::item: tensor has " + std::to_string(size()) + " elements");
    return n_->data[0];
  }

  std::shared_ptr<detail::TensorNode> node() const { return n_; }

  // Factory for ops (including domain-specific ones defined outside this
  // header). backward_fn may be empty when no input requires grad.
  static Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                        std::function<void(const detail::TensorNode&)> backward_fn) {
    auto n = std::make_shared<detail::TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    if (shape_numel(n->shape) != n->data.size())
      throw DimensionError("make_op: shape/data mismatch");
    bool track = grad_enabled();
    bool any = false;
    if (track) {
      for (const auto& p : parents) any = any || p.n_->requires_grad;
    }
    if (track && any) {
      n->requires_grad = true;
      n->parents.reserve(parents.size());
      for (auto& p : parents) n->parents.push_back(p.n_);
      n->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(n));
  }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> n) : n_(std::move(n)) {}
  std::shared_ptr<detail::TensorNode> n_;
};

namespace detail {

inline void topo_visit(const std::shared_ptr<TensorNode>& node, std::unordered_set<TensorNode*>& seen,
                       std::vector<std::shared_ptr<TensorNode>>& order) {
  // Iterative post-order DFS; graphs can be deep during long training loops.
  struct Frame {
    std::shared_ptr<TensorNode> n;
    std::size_t next_parent = 0;
  };
  if (seen.count(node.get())) return;
  std::vector<Frame> stack;
  stack.push_back({node});
  seen.insert(node.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.n->parents.size()) {
      auto& p = f.n->parents[f.next_parent++];
      if (!seen.count(p.get())) {
        seen.insert(p.get());
        stack.push_back({p});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }
}

}  // namespace detail

// Reverse pass record: nodes reachable from the root in topological order.
class Tape {
 public:
  explicit Tape(const Tensor& root) : root_(root.node()) {
    std::unordered_set<detail::TensorNode*> seen;
    detail::topo_visit(root_, seen, order_);
  }

  // Runs the reverse pass once; visits each recorded node exactly once in
  // reverse topological order. Gradients accumulate into existing buffers.
  void run() {
    for (auto& n : order_)
      if (n->requires_grad) n->ensure_grad();
    for (double& g : root_->grad) g += 1.0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }
  }

  std::size_t num_nodes() const { return order_.size(); }

 private:
  std::shared_ptr<detail::TensorNode> root_;
  std::vector<std::shared_ptr<detail::TensorNode>> order_;
};

inline void backward(const Tensor& root) {
  if (root.size() != 1) throw ContractError("backward: root must be scalar, got shape " + shape_str(root.shape()));
  if (!root.requires_grad()) throw ContractError("backward: root does not require grad");
  Tape(root).run();
}

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------

namespace detail {
inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}
}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto an = a.node(), bn = b.node();
  return Tensor::make_op(a.shape(), std::move(out), {a, b}, [an, bn](const detail::TensorNode& o) {
    if (an->requires_grad)
      for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
    if (bn->requires_grad)
      for (std::size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto an = a.node(), bn = b.node();
  return Tensor::make_op(a.shape(), std::move(out), {a, b}, [an, bn](const detail::TensorNode& o) {
    if (an->requires_grad)
      for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
    if (bn->requires_grad)
      for (std::size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] -= o.grad[i];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto an = a.node(), bn = b.node();
  return Tensor::make_op(a.shape(), std::move(out), {a, b}, [an, bn](const detail::TensorNode& o) {
    if (an->requires_grad)
      for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * bn->data[i];
    if (bn->requires_grad)
      for (std::size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i] * an->data[i];
  });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
  auto an = a.node();
  return Tensor::make_op(a.shape(), std::move(out), {a}, [an, c](const detail::TensorNode& o) {
    if (an->requires_grad)
      for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * c;
  });
}

// a + b where b's shape is a trailing suffix of a's shape; b is broadcast
// over a's leading (batch) dimensions. This is the only broadcast form.
inline Tensor add_broadcast(const Tensor& a, const Tensor& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (bs.size() > as.size() || !std::equal(bs.rbegin(), bs.rend(), as.rbegin()))
    throw DimensionError("add_broadcast: " + shape_str(bs) + " is not a trailing suffix of " + shape_str(as));
  std::size_t inner = b.size();
  if (inner == 0) throw DimensionError("add_broadcast: empty operand");
  std::size_t outer = a.size() / inner;
  std::vector<double> out(a.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] = a.data()[o * inner + i] + b.data()[i];
  auto an = a.node(), bn = b.node();
  return Tensor::make_op(a.shape(), std::move(out), {a, b}, [an, bn, outer, inner](const detail::TensorNode& o) {
    if (an->requires_grad)
      for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
    if (bn->requires_grad)
      for (std::size_t ou = 0; ou < outer; ++ou)
        for (std::size_t i = 0; i < inner; ++i) bn->grad[i] += o.grad[ou * inner + i];
  });
}

// Adds a length-d vector to every row of x (last-axis bias add).
inline Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  if (v.rank() != 1 || x.rank() < 1 || x.shape().back() != v.shape()[0])
    throw DimensionError("add_rowvec: last extent of " + shape_str(x.shape()) + " must match " +
                         shape_str(v.shape()));
  return add_broadcast(x, v);
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
  auto an = a.node();
  return Tensor::make_op(a.shape(), std::move(out), {a}, [an](const detail::TensorNode& o) {
    if (!an->requires_grad) return;
    // Subgradient at 0 is defined as 0.
    for (std::size_t i = 0; i < o.grad.size(); ++i)
      if (an->data[i] > 0.0) an->grad[i] += o.grad[i];
  });
}

inline Tensor reshape(const Tensor& a, Shape new_shape) {
  if (shape_numel(new_shape) != a.size())
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(new_shape));
  std::vector<double> out = a.data();
  auto an = a.node();
  return Tensor::make_op(std::move(new_shape), std::move(out), {a}, [an](const detail::TensorNode& o) {
    if (an->requires_grad)
      for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
  });
}

inline Tensor transpose_last2(const Tensor& a) {
  if (a.rank() < 2) throw DimensionError("transpose_last2: rank must be >= 2, got " + shape_str(a.shape()));
  Shape s = a.shape();
  std::size_t m = s[s.size() - 2], n = s[s.size() - 1];
  std::swap(s[s.size() - 2], s[s.size() - 1]);
  std::size_t outer = a.size() / (m * n);
  std::vector<double> out(a.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[o * m * n + j * m + i] = a.data()[o * m * n + i * n + j];
  auto an = a.node();
  return Tensor::make_op(std::move(s), std::move(out), {a}, [an, outer, m, n](const detail::TensorNode& o) {
    if (!an->requires_grad) return;
    for (std::size_t ou = 0; ou < outer; ++ou)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) an->grad[ou * m * n + i * n + j] += o.grad[ou * m * n + j * m + i];
  });
}

// Concatenates along the last axis; all parts share leading extents.
inline Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_last: no inputs");
  Shape lead = parts[0].shape();
  lead.pop_back();
  std::size_t total_last = 0;
  for (const auto& p : parts) {
    Shape pl = p.shape();
    if (pl.empty()) throw DimensionError("concat_last: scalar input");
    std::size_t last = pl.back();
    pl.pop_back();
    if (pl != lead)
      throw DimensionError("concat_last: leading extents differ: " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    total_last += last;
  }
  std::size_t outer = shape_numel(lead);
  Shape os = lead;
  os.push_back(total_last);
  std::vector<double> out(outer * total_last);
  std::vector<std::size_t> lasts;
  for (const auto& p : parts) lasts.push_back(p.shape().back());
  std::size_t off = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    std::size_t l = lasts[pi];
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < l; ++j) out[o * total_last + off + j] = parts[pi].data()[o * l + j];
    off += l;
  }
  std::vector<std::shared_ptr<detail::TensorNode>> pnodes;
  for (const auto& p : parts) pnodes.push_back(p.node());
  return Tensor::make_op(std::move(os), std::move(out), parts,
                         [pnodes, lasts, outer, total_last](const detail::TensorNode& o) {
                           std::size_t off2 = 0;
                           for (std::size_t pi = 0; pi < pnodes.size(); ++pi) {
                             std::size_t l = lasts[pi];
                             if (pnodes[pi]->requires_grad)
                               for (std::size_t ou = 0; ou < outer; ++ou)
                                 for (std::size_t j = 0; j < l; ++j)
                                   pnodes[pi]->grad[ou * l + j] += o.grad[ou * total_last + off2 + j];
                             off2 += l;
                           }
                         });
}

// Row lookup into a 2-D table; serves embedding. Differentiable w.r.t. the
// table (scatter-add), not the indices.
inline Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& idx) {
  if (table.rank() != 2) throw DimensionError("gather_rows: table must be 2-D, got " + shape_str(table.shape()));
  std::size_t rows = table.shape()[0], d = table.shape()[1];
  for (std::size_t i : idx)
    if (i >= rows) throw ContractError("gather_rows: index " + std::to_string(i) + " out of range");
  std::vector<double> out(idx.size() * d);
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(idx[r] * d), d, out.begin() + static_cast<std::ptrdiff_t>(r * d));
  auto tn = table.node();
  return Tensor::make_op({idx.size(), d}, std::move(out), {table}, [tn, idx, d](const detail::TensorNode& o) {
    if (!tn->requires_grad) return;
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < d; ++j) tn->grad[idx[r] * d + j] += o.grad[r * d + j];
  });
}

// ---------------------------------------------------------------------------
// Matmul
// ---------------------------------------------------------------------------

// Batched matrix product: a [..., m, k] times b [..., k, n]. Leading extents
// must be identical, or b may be rank-2 and is then shared across the batch.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw DimensionError("matmul: operands must be rank >= 2: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  std::size_t m = as[as.size() - 2], k = as[as.size() - 1];
  std::size_t kb = bs[bs.size() - 2], n = bs[bs.size() - 1];
  if (k != kb)
    throw DimensionError("matmul: inner extents disagree: " + shape_str(as) + " vs " + shape_str(bs));
  bool shared_b = bs.size() == 2 && as.size() > 2;
  if (!shared_b) {
    if (Shape(as.begin(), as.end() - 2) != Shape(bs.begin(), bs.end() - 2))
      throw DimensionError("matmul: batch extents disagree: " + shape_str(as) + " vs " + shape_str(bs));
  }
  std::size_t batch = a.size() / (m * k);
  Shape os(as.begin(), as.end() - 2);
  os.push_back(m);
  os.push_back(n);
  std::vector<double> out(batch * m * n, 0.0);
  for (std::size_t t = 0; t < batch; ++t) {
    const double* pa = a.data().data() + t * m * k;
    const double* pb = b.data().data() + (shared_b ? 0 : t * k * n);
    double* po = out.data() + t * m * n;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t l = 0; l < k; ++l) {
        double av = pa[i * k + l];
        if (av == 0.0) continue;
        const double* pbl = pb + l * n;
        double* poi = po + i * n;
        for (std::size_t j = 0; j < n; ++j) poi[j] += av * pbl[j];
      }
  }
  auto an = a.node(), bn = b.node();
  return Tensor::make_op(std::move(os), std::move(out), {a, b},
                         [an, bn, batch, m, k, n, shared_b](const detail::TensorNode& o) {
                           for (std::size_t t = 0; t < batch; ++t) {
                             const double* go = o.grad.data() + t * m * n;
                             const double* pa = an->data.data() + t * m * k;
                             const double* pb = bn->data.data() + (shared_b ? 0 : t * k * n);
                             if (an->requires_grad) {
                               double* ga = an->grad.data() + t * m * k;
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t l = 0; l < k; ++l) {
                                   double s = 0.0;
                                   for (std::size_t j = 0; j < n; ++j) s += go[i * n + j] * pb[l * n + j];
                                   ga[i * k + l] += s;
                                 }
                             }
                             if (bn->requires_grad) {
                               double* gb = bn->grad.data() + (shared_b ? 0 : t * k * n);
                               for (std::size_t l = 0; l < k; ++l)
                                 for (std::size_t j = 0; j < n; ++j) {
                                   double s = 0.0;
                                   for (std::size_t i = 0; i < m; ++i) s += pa[i * k + l] * go[i * n + j];
                                   gb[l * n + j] += s;
                                 }
                             }
                           }
                         });
}

// ---------------------------------------------------------------------------
// Reductions and normalizations
// ---------------------------------------------------------------------------

// Softmax over the trailing `trailing_axes` axes (1 or 2). Max-subtraction
// keeps at least one pre-normalization entry equal to 1.
inline Tensor softmax(const Tensor& x, int trailing_axes = 1) {
  if (trailing_axes < 1) throw ContractError("softmax: axis set must be nonempty");
  if (trailing_axes > 2 || static_cast<std::size_t>(trailing_axes) > x.rank())
    throw ContractError("softmax: trailing_axes must be 1 or 2 and at most the rank");
  std::size_t group = x.shape().back();
  if (trailing_axes == 2) group *= x.shape()[x.rank() - 2];
  std::size_t outer = x.size() / group;
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < outer; ++o) {
    const double* px = x.data().data() + o * group;
    double* po = out.data() + o * group;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < group; ++i) mx = std::max(mx, px[i]);
    double s = 0.0;
    for (std::size_t i = 0; i < group; ++i) {
      po[i] = std::exp(px[i] - mx);
      s += po[i];
    }
    for (std::size_t i = 0; i < group; ++i) po[i] /= s;
  }
  auto xn = x.node();
  return Tensor::make_op(x.shape(), std::move(out), {x}, [xn, outer, group](const detail::TensorNode& o) {
    if (!xn->requires_grad) return;
    for (std::size_t ou = 0; ou < outer; ++ou) {
      const double* y = o.data.data() + ou * group;
      const double* g = o.grad.data() + ou * group;
      double dot = 0.0;
      for (std::size_t i = 0; i < group; ++i) dot += g[i] * y[i];
      double* gx = xn->grad.data() + ou * group;
      for (std::size_t i = 0; i < group; ++i) gx[i] += y[i] * (g[i] - dot);
    }
  });
}

inline Tensor log_softmax(const Tensor& x, int trailing_axes = 1) {
  if (trailing_axes < 1) throw ContractError("log_softmax: axis set must be nonempty");
  if (trailing_axes > 2 || static_cast<std::size_t>(trailing_axes) > x.rank())
    throw ContractError("log_softmax: trailing_axes must be 1 or 2 and at most the rank");
  std::size_t group = x.shape().back();
  if (trailing_axes == 2) group *= x.shape()[x.rank() - 2];
  std::size_t outer = x.size() / group;
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < outer; ++o) {
    const double* px = x.data().data() + o * group;
    double* po = out.data() + o * group;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < group; ++i) mx = std::max(mx, px[i]);
    double s = 0.0;
    for (std::size_t i = 0; i < group; ++i) s += std::exp(px[i] - mx);
    double lse = mx + std::log(s);
    for (std::size_t i = 0; i < group; ++i) po[i] = px[i] - lse;
  }
  auto xn = x.node();
  return Tensor::make_op(x.shape(), std::move(out), {x}, [xn, outer, group](const detail::TensorNode& o) {
    if (!xn->requires_grad) return;
    for (std::size_t ou = 0; ou < outer; ++ou) {
      const double* y = o.data.data() + ou * group;
      const double* g = o.grad.data() + ou * group;
      double gsum = 0.0;
      for (std::size_t i = 0; i < group; ++i) gsum += g[i];
      double* gx = xn->grad.data() + ou * group;
      for (std::size_t i = 0; i < group; ++i) gx[i] += g[i] - std::exp(y[i]) * gsum;
    }
  });
}

// Stable log-sum-exp reduction over one axis. -inf entries represent
// probability zero and are absorbed.
inline Tensor log_sum_exp(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw ContractError("log_sum_exp: axis " + std::to_string(axis) + " out of range for " +
                                            shape_str(x.shape()));
  if (x.shape()[axis] == 0) throw ContractError("log_sum_exp: empty axis");
  std::size_t n = x.shape()[axis];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  std::size_t outer = x.size() / (n * inner);
  Shape os;
  for (std::size_t i = 0; i < x.rank(); ++i)
    if (i != axis) os.push_back(x.shape()[i]);
  std::vector<double> out(outer * inner);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const double* px = x.data().data() + o * n * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, px[i * inner]);
      double r;
      if (mx == -std::numeric_limits<double>::infinity()) {
        r = mx;
      } else {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += std::exp(px[i * inner] - mx);
        r = mx + std::log(s);
      }
      out[o * inner + in] = r;
    }
  auto xn = x.node();
  return Tensor::make_op(std::move(os), std::move(out), {x},
                         [xn, outer, n, inner](const detail::TensorNode& o) {
                           if (!xn->requires_grad) return;
                           for (std::size_t ou = 0; ou < outer; ++ou)
                             for (std::size_t in = 0; in < inner; ++in) {
                               double r = o.data[ou * inner + in];
                               if (r == -std::numeric_limits<double>::infinity()) continue;
                               double g = o.grad[ou * inner + in];
                               const double* px = xn->data.data() + ou * n * inner + in;
                               double* gx = xn->grad.data() + ou * n * inner + in;
                               for (std::size_t i = 0; i < n; ++i) gx[i * inner] += g * std::exp(px[i * inner] - r);
                             }
                         });
}

// Layer normalization over the last axis with learned gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  if (x.rank() < 1) throw DimensionError("layer_norm: input must have rank >= 1");
  std::size_t d = x.shape().back();
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d})
    throw DimensionError("layer_norm: gain/bias must be length-" + std::to_string(d) + " vectors, got " +
                         shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
  std::size_t outer = x.size() / d;
  std::vector<double> out(x.size());
  std::vector<double> mu(outer), istd(outer);
  for (std::size_t o = 0; o < outer; ++o) {
    const double* px = x.data().data() + o * d;
    double m = 0.0;
    for (std::size_t i = 0; i < d; ++i) m += px[i];
    m /= static_cast<double>(d);
    double v = 0.0;
    for (std::size_t i = 0; i < d; ++i) v += (px[i] - m) * (px[i] - m);
    v /= static_cast<double>(d);
    double is = 1.0 / std::sqrt(v + eps);
    mu[o] = m;
    istd[o] = is;
    double* po = out.data() + o * d;
    for (std::size_t i = 0; i < d; ++i) po[i] = (px[i] - m) * is * gain.data()[i] + bias.data()[i];
  }
  auto xn = x.node(), gn = gain.node(), bn = bias.node();
  return Tensor::make_op(x.shape(), std::move(out), {x, gain, bias},
                         [xn, gn, bn, outer, d, mu, istd](const detail::TensorNode& o) {
                           for (std::size_t ou = 0; ou < outer; ++ou) {
                             const double* px = xn->data.data() + ou * d;
                             const double* g = o.grad.data() + ou * d;
                             double m = mu[ou], is = istd[ou];
                             if (gn->requires_grad || bn->requires_grad) {
                               for (std::size_t i = 0; i < d; ++i) {
                                 double xhat = (px[i] - m) * is;
                                 if (gn->requires_grad) gn->grad[i] += g[i] * xhat;
                                 if (bn->requires_grad) bn->grad[i] += g[i];
                               }
                             }
                             if (xn->requires_grad) {
                               // dL/dxhat_i = g_i * gain_i; fold mean/var chain rule.
                               double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                               for (std::size_t i = 0; i < d; ++i) {
                                 double xhat = (px[i] - m) * is;
                                 double dxh = g[i] * gn->data[i];
                                 sum_dxhat += dxh;
                                 sum_dxhat_xhat += dxh * xhat;
                               }
                               double* gx = xn->grad.data() + ou * d;
                               double dn = static_cast<double>(d);
                               for (std::size_t i = 0; i < d; ++i) {
                                 double xhat = (px[i] - m) * is;
                                 double dxh = g[i] * gn->data[i];
                                 gx[i] += is * (dxh - sum_dxhat / dn - xhat * sum_dxhat_xhat / dn);
                               }
                             }
                           }
                         });
}

inline Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  auto xn = x.node();
  return Tensor::make_op({}, {s}, {x}, [xn](const detail::TensorNode& o) {
    if (!xn->requires_grad) return;
    for (double& g : xn->grad) g += o.grad[0];
  });
}

inline Tensor mean_all(const Tensor& x) {
  if (x.size() == 0) throw ContractError("mean_all: empty tensor");
  double s = 0.0;
  for (double v : x.data()) s += v;
  double inv = 1.0 / static_cast<double>(x.size());
  auto xn = x.node();
  return Tensor::make_op({}, {s * inv}, {x}, [xn, inv](const detail::TensorNode& o) {
    if (!xn->requires_grad) return;
    for (double& g : xn->grad) g += o.grad[0] * inv;
  });
}

inline Tensor mean_axis(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw ContractError("mean_axis: axis out of range for " + shape_str(x.shape()));
  std::size_t n = x.shape()[axis];
  if (n == 0) throw ContractError("mean_axis: empty axis");
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  std::size_t outer = x.size() / (n * inner);
  Shape os;
  for (std::size_t i = 0; i < x.rank(); ++i)
    if (i != axis) os.push_back(x.shape()[i]);
  std::vector<double> out(outer * inner, 0.0);
  double inv = 1.0 / static_cast<double>(n);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t in = 0; in < inner; ++in) out[o * inner + in] += x.data()[(o * n + i) * inner + in] * inv;
  auto xn = x.node();
  return Tensor::make_op(std::move(os), std::move(out), {x},
                         [xn, outer, n, inner, inv](const detail::TensorNode& o) {
                           if (!xn->requires_grad) return;
                           for (std::size_t ou = 0; ou < outer; ++ou)
                             for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t in = 0; in < inner; ++in)
                                 xn->grad[(ou * n + i) * inner + in] += o.grad[ou * inner + in] * inv;
                         });
}

}  // namespace spanet

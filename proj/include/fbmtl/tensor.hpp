#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fbmtl/errors.hpp"
#include "fbmtl/rng.hpp"

namespace fbmtl {

// Dense double-precision tensors with reverse-mode differentiation.
// Rank 0 (scalar), 1 (vector) and 2 (row-major matrix) cover everything the
// model needs. Each operation eagerly records a computation node (operation
// tag, parent handles, backward rule); the recorded graph is a DAG owned
// through shared handles and is released once the last handle to a result
// goes out of scope, so the per-step unrolled graphs never accumulate.

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

enum class Op {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kScale,
  kScalarMul,
  kMatMul,
  kTanh,
  kRelu,
  kLog,
  kConcat,
  kRowLookup,
  kMeanAxis,
  kSumAll,
  kMeanAll,
  kSoftmax,
  kCrossEntropy,
  kNll,
  kFrobeniusDiff,
  kInfNorm,
  kEntry,
  kRow,
  kRepeatRows,
  kDetach,
};

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// Per-parent transient gradient buffers for one backward pass; an entry is
// null when that parent does not require a gradient.
using GradBufs = std::vector<std::vector<double>*>;

// One computation record: operation tag, parents, and the rule that scatters
// the incoming gradient into the parents' buffers. Whatever context an op
// needs in its backward rule is captured in the closure.
struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until populated by a backward pass
  bool requires_grad = false;
  Op op = Op::kLeaf;
  std::vector<NodePtr> parents;
  std::function<void(Node&, const std::vector<double>&, const GradBufs&)> backward_fn;
};

inline bool& recording_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor leaf(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size())
      throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> v(shape_numel(shape), 0.0);
    return leaf(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    std::vector<double> v(shape_numel(shape), value);
    return leaf(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return leaf(Shape{}, {value}, requires_grad);
  }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = stddev * rng.normal();
    return leaf(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi,
                             bool requires_grad = false) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = rng.uniform(lo, hi);
    return leaf(std::move(shape), std::move(v), requires_grad);
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  std::size_t rank() const { return n_->shape.size(); }
  std::size_t numel() const { return n_->values.size(); }
  bool is_scalar() const { return numel() == 1; }

  // Rows/cols with rank-1 tensors treated as a single row.
  std::size_t rows() const { return rank() == 2 ? n_->shape[0] : 1; }
  std::size_t cols() const {
    return rank() == 2 ? n_->shape[1] : (rank() == 1 ? n_->shape[0] : 1);
  }

  const std::vector<double>& values() const& { return n_->values; }
  // rvalue handle: hand out a copy, the node dies with the temporary
  std::vector<double> values() && { return n_->values; }
  std::vector<double>& values_mut() {
    if (n_->op != Op::kLeaf)
      throw std::logic_error("values_mut: only leaf tensors may be mutated");
    return n_->values;
  }

  double value() const {
    if (!is_scalar()) throw std::invalid_argument("value(): tensor is not scalar");
    return n_->values[0];
  }
  double at(std::size_t i) const { return n_->values.at(i); }
  double at(std::size_t r, std::size_t c) const { return n_->values.at(r * cols() + c); }

  bool requires_grad() const { return n_->requires_grad; }
  bool has_grad() const { return !n_->grad.empty(); }
  const std::vector<double>& grad() const { return n_->grad; }
  std::vector<double>& grad_mut() { return n_->grad; }
  void zero_grad() { n_->grad.clear(); }

  Op op() const { return n_->op; }
  detail::Node* node() const { return n_.get(); }
  const detail::NodePtr& handle() const { return n_; }

  static Tensor wrap(detail::NodePtr n) { return Tensor(std::move(n)); }

 private:
  explicit Tensor(detail::NodePtr n) : n_(std::move(n)) {}
  detail::NodePtr n_;
};

// Pauses graph recording (evaluation paths, numeric oracles).
struct NoGradScope {
  NoGradScope() : prev_(detail::recording_flag()) { detail::recording_flag() = false; }
  ~NoGradScope() { detail::recording_flag() = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  bool prev_;
};

namespace detail {

template <typename Fn>
inline Tensor make_op(Shape shape, std::vector<double> values, Op op,
                      std::initializer_list<Tensor> parents, Fn&& backward) {
  bool rg = false;
  if (recording_flag()) {
    for (const Tensor& p : parents) rg = rg || p.requires_grad();
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  n->requires_grad = rg;
  if (rg) {
    n->op = op;
    n->parents.reserve(parents.size());
    for (const Tensor& p : parents) n->parents.push_back(p.handle());
    n->backward_fn = std::forward<Fn>(backward);
  }
  return Tensor::wrap(std::move(n));
}

template <typename Fn>
inline Tensor make_op(Shape shape, std::vector<double> values, Op op,
                      const std::vector<Tensor>& parents, Fn&& backward) {
  bool rg = false;
  if (recording_flag()) {
    for (const Tensor& p : parents) rg = rg || p.requires_grad();
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  n->requires_grad = rg;
  if (rg) {
    n->op = op;
    n->parents.reserve(parents.size());
    for (const Tensor& p : parents) n->parents.push_back(p.handle());
    n->backward_fn = std::forward<Fn>(backward);
  }
  return Tensor::wrap(std::move(n));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural operations
// ---------------------------------------------------------------------------

// Elementwise sum. A rank-1 [C] or rank-2 [1,C] right operand is broadcast
// over the rows of a [R,C] left operand (bias addition).
inline Tensor add(const Tensor& a, const Tensor& b) {
  const bool broadcast =
      a.rank() == 2 && a.shape() != b.shape() && b.cols() == a.cols() && b.rows() == 1;
  if (!broadcast) detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  const auto& av = a.values();
  const auto& bv = b.values();
  if (broadcast) {
    const std::size_t r = a.rows(), c = a.cols();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[i * c + j] = av[i * c + j] + bv[j];
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  }
  const std::size_t rows = a.rows(), cols = a.cols();
  return detail::make_op(
      a.shape(), std::move(out), Op::kAdd, {a, b},
      [broadcast, rows, cols](detail::Node&, const std::vector<double>& g,
                              const detail::GradBufs& pg) {
        if (pg[0])
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
        if (pg[1]) {
          if (broadcast) {
            for (std::size_t i = 0; i < rows; ++i)
              for (std::size_t j = 0; j < cols; ++j) (*pg[1])[j] += g[i * cols + j];
          } else {
            for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] += g[i];
          }
        }
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  return detail::make_op(a.shape(), std::move(out), Op::kSub, {a, b},
                         [](detail::Node&, const std::vector<double>& g,
                            const detail::GradBufs& pg) {
                           if (pg[0])
                             for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
                           if (pg[1])
                             for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] -= g[i];
                         });
}

// Elementwise product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  return detail::make_op(
      a.shape(), std::move(out), Op::kMul, {a, b},
      [](detail::Node& self, const std::vector<double>& g, const detail::GradBufs& pg) {
        const auto& av = self.parents[0]->values;
        const auto& bv = self.parents[1]->values;
        if (pg[0])
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * bv[i];
        if (pg[1])
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] += g[i] * av[i];
      });
}

// Multiplication by a plain constant.
inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a.values()[i];
  return detail::make_op(a.shape(), std::move(out), Op::kScale, {a},
                         [c](detail::Node&, const std::vector<double>& g,
                             const detail::GradBufs& pg) {
                           if (pg[0])
                             for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += c * g[i];
                         });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

// Product of a scalar tensor and an arbitrary tensor; both sides get grads.
inline Tensor scalar_mul(const Tensor& s, const Tensor& a) {
  if (!s.is_scalar()) throw ShapeError("scalar_mul: left operand must be scalar, got " +
                                       shape_str(s.shape()));
  const double sv = s.values()[0];
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sv * a.values()[i];
  return detail::make_op(
      a.shape(), std::move(out), Op::kScalarMul, {s, a},
      [](detail::Node& self, const std::vector<double>& g, const detail::GradBufs& pg) {
        const double sval = self.parents[0]->values[0];
        const auto& av = self.parents[1]->values;
        if (pg[0]) {
          double acc = 0.0;
          for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
          (*pg[0])[0] += acc;
        }
        if (pg[1])
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] += sval * g[i];
      });
}

// Matrix product [p,q] x [q,r] -> [p,r].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
    throw ShapeError("matmul: shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " are incompatible");
  const std::size_t p = a.shape()[0], q = a.shape()[1], r = b.shape()[1];
  std::vector<double> out(p * r, 0.0);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t k = 0; k < q; ++k) {
      const double aik = av[i * q + k];
      if (aik == 0.0) continue;
      const double* brow = bv.data() + k * r;
      double* orow = out.data() + i * r;
      for (std::size_t j = 0; j < r; ++j) orow[j] += aik * brow[j];
    }
  return detail::make_op(
      Shape{p, r}, std::move(out), Op::kMatMul, {a, b},
      [p, q, r](detail::Node& self, const std::vector<double>& g, const detail::GradBufs& pg) {
        const auto& av = self.parents[0]->values;
        const auto& bv = self.parents[1]->values;
        if (pg[0]) {  // dA += G * B^T
          auto& ga = *pg[0];
          for (std::size_t i = 0; i < p; ++i)
            for (std::size_t k = 0; k < q; ++k) {
              double acc = 0.0;
              const double* grow = g.data() + i * r;
              const double* brow = bv.data() + k * r;
              for (std::size_t j = 0; j < r; ++j) acc += grow[j] * brow[j];
              ga[i * q + k] += acc;
            }
        }
        if (pg[1]) {  // dB += A^T * G
          auto& gb = *pg[1];
          for (std::size_t i = 0; i < p; ++i)
            for (std::size_t k = 0; k < q; ++k) {
              const double aik = av[i * q + k];
              if (aik == 0.0) continue;
              const double* grow = g.data() + i * r;
              double* gbrow = gb.data() + k * r;
              for (std::size_t j = 0; j < r; ++j) gbrow[j] += aik * grow[j];
            }
        }
      });
}

inline Tensor tanh_op(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.values()[i]);
  return detail::make_op(
      a.shape(), std::move(out), Op::kTanh, {a},
      [](detail::Node& self, const std::vector<double>& g, const detail::GradBufs& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double y = self.values[i];
          (*pg[0])[i] += g[i] * (1.0 - y * y);
        }
      });
}

// Subgradient 0 at the origin.
inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, a.values()[i]);
  return detail::make_op(
      a.shape(), std::move(out), Op::kRelu, {a},
      [](detail::Node& self, const std::vector<double>& g, const detail::GradBufs& pg) {
        if (!pg[0]) return;
        const auto& xv = self.parents[0]->values;
        for (std::size_t i = 0; i < g.size(); ++i)
          if (xv[i] > 0.0) (*pg[0])[i] += g[i];
      });
}

// Elementwise natural log; inputs must be positive.
inline Tensor log_op(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.values()[i]);
  return detail::make_op(
      a.shape(), std::move(out), Op::kLog, {a},
      [](detail::Node& self, const std::vector<double>& g, const detail::GradBufs& pg) {
        if (!pg[0]) return;
        const auto& xv = self.parents[0]->values;
        for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] / xv[i];
      });
}

// Concatenation along an axis. Rank-1 parts concatenate along axis 0; rank-2
// parts along axis 0 (stacked rows) or axis 1 (side by side).
inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no parts");
  const std::size_t rank = parts[0].rank();
  if (rank == 0 || axis >= rank)
    throw ShapeError("concat: axis " + std::to_string(axis) + " invalid for rank " +
                     std::to_string(rank));
  for (const Tensor& p : parts) {
    if (p.rank() != rank) throw ShapeError("concat: mixed ranks");
    for (std::size_t d = 0; d < rank; ++d)
      if (d != axis && p.shape()[d] != parts[0].shape()[d])
        throw ShapeError("concat: shapes " + shape_str(parts[0].shape()) + " and " +
                         shape_str(p.shape()) + " disagree off-axis");
  }
  Shape out_shape = parts[0].shape();
  out_shape[axis] = 0;
  for (const Tensor& p : parts) out_shape[axis] += p.shape()[axis];

  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets(parts.size());
  if (rank == 1 || axis == 0) {
    std::size_t pos = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
      offsets[pi] = pos;
      const auto& v = parts[pi].values();
      std::copy(v.begin(), v.end(), out.begin() + static_cast<std::ptrdiff_t>(pos));
      pos += v.size();
    }
  } else {  // rank 2, axis 1
    const std::size_t rows = out_shape[0], total_cols = out_shape[1];
    std::size_t col0 = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
      offsets[pi] = col0;
      const std::size_t c = parts[pi].shape()[1];
      const auto& v = parts[pi].values();
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * total_cols + col0 + j] = v[i * c + j];
      col0 += c;
    }
  }
  std::vector<std::size_t> part_sizes;
  for (const Tensor& p : parts)
    part_sizes.push_back(rank == 2 && axis == 1 ? p.shape()[1] : p.numel());
  const std::size_t out_rows = out_shape.size() == 2 ? out_shape[0] : 1;
  const std::size_t out_cols = out_shape.size() == 2 ? out_shape[1] : out_shape[0];
  const bool col_concat = (rank == 2 && axis == 1);
  return detail::make_op(
      out_shape, std::move(out), Op::kConcat, parts,
      [offsets, part_sizes, out_rows, out_cols, col_concat](
          detail::Node&, const std::vector<double>& g, const detail::GradBufs& pg) {
        for (std::size_t pi = 0; pi < pg.size(); ++pi) {
          if (!pg[pi]) continue;
          auto& dst = *pg[pi];
          if (!col_concat) {
            for (std::size_t i = 0; i < part_sizes[pi]; ++i) dst[i] += g[offsets[pi] + i];
          } else {
            const std::size_t c = part_sizes[pi];
            for (std::size_t i = 0; i < out_rows; ++i)
              for (std::size_t j = 0; j < c; ++j)
                dst[i * c + j] += g[i * out_cols + offsets[pi] + j];
          }
        }
      });
}

// Embedding lookup: gathers rows of a [V,E] table into a [n,E] matrix.
inline Tensor row_lookup(const Tensor& table, const std::vector<std::size_t>& ids) {
  if (table.rank() != 2) throw ShapeError("row_lookup: table must be rank 2, got " +
                                          shape_str(table.shape()));
  const std::size_t v = table.shape()[0], e = table.shape()[1];
  for (std::size_t id : ids)
    if (id >= v)
      throw std::out_of_range("row_lookup: id " + std::to_string(id) + " out of range " +
                              std::to_string(v));
  std::vector<double> out(ids.size() * e);
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.values().begin() + static_cast<std::ptrdiff_t>(ids[i] * e), e,
                out.begin() + static_cast<std::ptrdiff_t>(i * e));
  return detail::make_op(
      Shape{ids.size(), e}, std::move(out), Op::kRowLookup, {table},
      [ids, e](detail::Node&, const std::vector<double>& g, const detail::GradBufs& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < ids.size(); ++i)
          for (std::size_t j = 0; j < e; ++j) (*pg[0])[ids[i] * e + j] += g[i * e + j];
      });
}

// Mean along one axis of a matrix: axis 0 -> [1,C], axis 1 -> [R,1].
inline Tensor mean_axis(const Tensor& a, std::size_t axis) {
  if (a.rank() != 2 || axis > 1)
    throw ShapeError("mean_axis: need rank-2 tensor and axis 0/1, got " +
                     shape_str(a.shape()) + " axis " + std::to_string(axis));
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  if (axis == 0) {
    std::vector<double> out(c, 0.0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[j] += a.values()[i * c + j];
    for (double& x : out) x /= static_cast<double>(r);
    return detail::make_op(
        Shape{1, c}, std::move(out), Op::kMeanAxis, {a},
        [r, c](detail::Node&, const std::vector<double>& g, const detail::GradBufs& pg) {
          if (!pg[0]) return;
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j)
              (*pg[0])[i * c + j] += g[j] / static_cast<double>(r);
        });
  }
  std::vector<double> out(r, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i] += a.values()[i * c + j];
    out[i] /= static_cast<double>(c);
  }
  return detail::make_op(
      Shape{r, 1}, std::move(out), Op::kMeanAxis, {a},
      [r, c](detail::Node&, const std::vector<double>& g, const detail::GradBufs& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) (*pg[0])[i * c + j] += g[i] / static_cast<double>(c);
      });
}

inline Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double x : a.values()) s += x;
  return detail::make_op(Shape{}, {s}, Op::kSumAll, {a},
                         [](detail::Node&, const std::vector<double>& g,
                            const detail::GradBufs& pg) {
                           if (!pg[0]) return;
                           for (double& x : *pg[0]) x += g[0];
                         });
}

inline Tensor mean_all(const Tensor& a) {
  double s = 0.0;
  for (double x : a.values()) s += x;
  const double n = static_cast<double>(a.numel());
  return detail::make_op(Shape{}, {s / n}, Op::kMeanAll, {a},
                         [n](detail::Node&, const std::vector<double>& g,
                             const detail::GradBufs& pg) {
                           if (!pg[0]) return;
                           for (double& x : *pg[0]) x += g[0] / n;
                         });
}

// Shift-stabilized softmax along `axis`. Rank-1 tensors use axis 0; rank-2
// tensors normalize each row (axis 1) or each column (axis 0).
inline Tensor softmax(const Tensor& a, std::size_t axis) {
  if (axis >= std::max<std::size_t>(a.rank(), 1))
    throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                     shape_str(a.shape()));
  const std::size_t r = a.rows(), c = a.cols();
  // Slices: axis==1 (or rank-1 axis 0) -> r slices of length c with stride 1;
  // rank-2 axis==0 -> c slices of length r with stride c.
  const bool row_wise = (a.rank() < 2) || axis == 1;
  const std::size_t n_slices = row_wise ? r : c;
  const std::size_t len = row_wise ? c : r;
  const std::size_t stride = row_wise ? 1 : c;
  std::vector<double> out(a.numel());
  const auto& av = a.values();
  for (std::size_t s = 0; s < n_slices; ++s) {
    const std::size_t base = row_wise ? s * c : s;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, av[base + i * stride]);
    double sum = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
      const double e = std::exp(av[base + i * stride] - mx);
      out[base + i * stride] = e;
      sum += e;
    }
    for (std::size_t i = 0; i < len; ++i) out[base + i * stride] /= sum;
  }
  return detail::make_op(
      a.shape(), std::move(out), Op::kSoftmax, {a},
      [n_slices, len, stride, row_wise, c](detail::Node& self, const std::vector<double>& g,
                                           const detail::GradBufs& pg) {
        if (!pg[0]) return;
        const auto& y = self.values;
        for (std::size_t s = 0; s < n_slices; ++s) {
          const std::size_t base = row_wise ? s * c : s;
          double dot = 0.0;
          for (std::size_t i = 0; i < len; ++i)
            dot += g[base + i * stride] * y[base + i * stride];
          for (std::size_t i = 0; i < len; ++i) {
            const std::size_t k = base + i * stride;
            (*pg[0])[k] += y[k] * (g[k] - dot);
          }
        }
      });
}

// Cross-entropy from logits: -log softmax(logits)[target], stabilized by max
// subtraction. Accepts a rank-1 [V] or single-row [1,V] logit tensor.
inline Tensor cross_entropy(const Tensor& logits, std::size_t target) {
  if (logits.rank() > 2 || logits.rows() != 1)
    throw ShapeError("cross_entropy: expected a single logit row, got " +
                     shape_str(logits.shape()));
  const std::size_t v = logits.cols();
  if (target >= v)
    throw std::out_of_range("cross_entropy: target " + std::to_string(target) +
                            " out of range for " + std::to_string(v) + " classes");
  const auto& x = logits.values();
  double mx = x[0];
  for (double xi : x) mx = std::max(mx, xi);
  double sum = 0.0;
  for (double xi : x) sum += std::exp(xi - mx);
  const double lse = mx + std::log(sum);
  return detail::make_op(
      Shape{}, {lse - x[target]}, Op::kCrossEntropy, {logits},
      [target, lse](detail::Node& self, const std::vector<double>& g,
                    const detail::GradBufs& pg) {
        if (!pg[0]) return;
        const auto& x = self.parents[0]->values;
        for (std::size_t i = 0; i < x.size(); ++i) {
          double p = std::exp(x[i] - lse);
          (*pg[0])[i] += g[0] * (p - (i == target ? 1.0 : 0.0));
        }
      });
}

// Mean negative log-likelihood of given targets under row-wise probability
// distributions [T,V]; rows with mask[i]==false contribute nothing. Inputs
// must already be normalized and positive at the target entries.
inline Tensor nll_mean(const Tensor& probs, const std::vector<std::size_t>& targets,
                       const std::vector<bool>& mask = {}) {
  if (probs.rank() > 2) throw ShapeError("nll_mean: rank > 2");
  const std::size_t t = probs.rows(), v = probs.cols();
  if (targets.size() != t)
    throw ShapeError("nll_mean: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(t) + " rows");
  if (!mask.empty() && mask.size() != t)
    throw ShapeError("nll_mean: mask length mismatch");
  std::size_t active = 0;
  double total = 0.0;
  for (std::size_t i = 0; i < t; ++i) {
    if (!mask.empty() && !mask[i]) continue;
    if (targets[i] >= v)
      throw std::out_of_range("nll_mean: target " + std::to_string(targets[i]) +
                              " out of range for " + std::to_string(v) + " classes");
    total += -std::log(probs.values()[i * v + targets[i]]);
    ++active;
  }
  if (active == 0) throw std::invalid_argument("nll_mean: no unmasked positions");
  const double inv = 1.0 / static_cast<double>(active);
  return detail::make_op(
      Shape{}, {total * inv}, Op::kNll, {probs},
      [targets, mask, v, inv](detail::Node& self, const std::vector<double>& g,
                              const detail::GradBufs& pg) {
        if (!pg[0]) return;
        const auto& p = self.parents[0]->values;
        for (std::size_t i = 0; i < targets.size(); ++i) {
          if (!mask.empty() && !mask[i]) continue;
          const std::size_t k = i * v + targets[i];
          (*pg[0])[k] += g[0] * (-inv / p[k]);
        }
      });
}

// Frobenius norm of (a - b). Subgradient 0 where a == b.
inline Tensor frobenius_diff(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "frobenius_diff");
  double ss = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a.values()[i] - b.values()[i];
    ss += d * d;
  }
  const double norm = std::sqrt(ss);
  return detail::make_op(
      Shape{}, {norm}, Op::kFrobeniusDiff, {a, b},
      [](detail::Node& self, const std::vector<double>& g, const detail::GradBufs& pg) {
        const double norm = self.values[0];
        if (norm == 0.0) return;
        const auto& av = self.parents[0]->values;
        const auto& bv = self.parents[1]->values;
        for (std::size_t i = 0; i < av.size(); ++i) {
          const double d = (av[i] - bv[i]) / norm * g[0];
          if (pg[0]) (*pg[0])[i] += d;
          if (pg[1]) (*pg[1])[i] -= d;
        }
      });
}

// Max-absolute-value norm; the subgradient goes to the first attaining entry.
inline Tensor inf_norm(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("inf_norm: empty tensor");
  std::size_t arg = 0;
  double best = -1.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double m = std::abs(a.values()[i]);
    if (m > best) {
      best = m;
      arg = i;
    }
  }
  return detail::make_op(
      Shape{}, {best}, Op::kInfNorm, {a},
      [arg](detail::Node& self, const std::vector<double>& g, const detail::GradBufs& pg) {
        if (!pg[0]) return;
        const double x = self.parents[0]->values[arg];
        const double s = x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
        (*pg[0])[arg] += g[0] * s;
      });
}

// Scalar view of one entry of a rank-1 tensor.
inline Tensor entry(const Tensor& a, std::size_t i) {
  if (a.rank() != 1)
    throw ShapeError("entry: expected rank-1 tensor, got " + shape_str(a.shape()));
  if (i >= a.numel()) throw std::out_of_range("entry: index out of range");
  return detail::make_op(Shape{}, {a.values()[i]}, Op::kEntry, {a},
                         [i](detail::Node&, const std::vector<double>& g,
                             const detail::GradBufs& pg) {
                           if (pg[0]) (*pg[0])[i] += g[0];
                         });
}

// One row of a matrix as a [1,C] tensor.
inline Tensor row(const Tensor& a, std::size_t r) {
  if (a.rank() != 2)
    throw ShapeError("row: expected rank-2 tensor, got " + shape_str(a.shape()));
  if (r >= a.shape()[0]) throw std::out_of_range("row: index out of range");
  const std::size_t c = a.shape()[1];
  std::vector<double> out(a.values().begin() + static_cast<std::ptrdiff_t>(r * c),
                          a.values().begin() + static_cast<std::ptrdiff_t>((r + 1) * c));
  return detail::make_op(Shape{1, c}, std::move(out), Op::kRow, {a},
                         [r, c](detail::Node&, const std::vector<double>& g,
                                const detail::GradBufs& pg) {
                           if (!pg[0]) return;
                           for (std::size_t j = 0; j < c; ++j) (*pg[0])[r * c + j] += g[j];
                         });
}

// Tiles a single row [1,C] into [n,C]; gradients sum back over the copies.
inline Tensor repeat_rows(const Tensor& a, std::size_t n) {
  if (a.rank() != 2 || a.shape()[0] != 1)
    throw ShapeError("repeat_rows: expected [1,C], got " + shape_str(a.shape()));
  const std::size_t c = a.shape()[1];
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n; ++i)
    std::copy(a.values().begin(), a.values().end(),
              out.begin() + static_cast<std::ptrdiff_t>(i * c));
  return detail::make_op(Shape{n, c}, std::move(out), Op::kRepeatRows, {a},
                         [n, c](detail::Node&, const std::vector<double>& g,
                                const detail::GradBufs& pg) {
                           if (!pg[0]) return;
                           for (std::size_t i = 0; i < n; ++i)
                             for (std::size_t j = 0; j < c; ++j) (*pg[0])[j] += g[i * c + j];
                         });
}

// Constant copy; cuts the tensor out of the recorded graph.
inline Tensor detach(const Tensor& a) {
  return Tensor::leaf(a.shape(), a.values(), false);
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

// Reverse-mode sweep from a scalar loss. Gradients are first propagated in
// transient per-node buffers and then added into the persistent .grad of
// every tensor with requires_grad, so repeated calls accumulate.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || !loss.is_scalar())
    throw std::invalid_argument("backward: loss must be a defined scalar tensor" +
                                (loss.defined() ? ", got shape " + shape_str(loss.shape())
                                                : std::string()));
  detail::Node* root = loss.node();
  if (!root->requires_grad) return;  // nothing reachable wants a gradient

  // Iterative post-order DFS over grad-requiring parents: leaves first.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen{root};
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root, 0}};
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      detail::Node* p = n->parents[idx++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  std::unordered_map<detail::Node*, std::vector<double>> buf;
  buf[root] = {1.0};
  detail::GradBufs pgrads;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    auto found = buf.find(n);
    if (found == buf.end() || !n->backward_fn) continue;
    pgrads.clear();
    for (const auto& p : n->parents) {
      if (p->requires_grad) {
        auto [slot, inserted] = buf.try_emplace(p.get());
        if (inserted) slot->second.assign(p->values.size(), 0.0);
        pgrads.push_back(&slot->second);
      } else {
        pgrads.push_back(nullptr);
      }
    }
    n->backward_fn(*n, found->second, pgrads);
  }

  for (detail::Node* n : order) {
    if (!n->requires_grad) continue;
    if (n->grad.empty()) n->grad.assign(n->values.size(), 0.0);
    auto found = buf.find(n);
    if (found == buf.end()) continue;
    for (std::size_t i = 0; i < n->grad.size(); ++i) n->grad[i] += found->second[i];
  }
}

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

// Central-difference check of d f / d point against the recorded gradient.
// Returns max over coordinates of |analytic - numeric| / max(1, |numeric|).
inline double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                                const Tensor& point, double eps) {
  if (eps <= 0.0) throw std::invalid_argument("finite_diff_check: eps must be positive");

  Tensor x = Tensor::leaf(point.shape(), point.values(), true);
  Tensor y = f(x);
  if (!y.is_scalar())
    throw std::invalid_argument("finite_diff_check: function must return a scalar");
  if (!std::isfinite(y.value()))
    throw std::runtime_error("finite_diff_check: non-finite function value at base point");
  backward(y);
  std::vector<double> analytic(point.numel(), 0.0);
  if (x.has_grad()) analytic = x.grad();

  NoGradScope pause;
  auto eval = [&](const std::vector<double>& at) {
    Tensor p = Tensor::leaf(point.shape(), at, false);
    const double v = f(p).value();
    if (!std::isfinite(v))
      throw std::runtime_error("finite_diff_check: non-finite function value at probe point");
    return v;
  };
  double worst = 0.0;
  std::vector<double> probe = point.values();
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = eval(probe);
    probe[i] = orig - eps;
    const double down = eval(probe);
    probe[i] = orig;
    const double numeric = (up - down) / (2.0 * eps);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace fbmtl

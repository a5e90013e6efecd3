#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "unimod/errors.hpp"
#include "unimod/random.hpp"

namespace unimod {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <class S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;
using MaskMat =
    Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Index shape_numel(const Shape& s) {
  Index n = 1;
  for (Index e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

namespace detail {
inline thread_local bool grad_enabled = true;
}

// Disables graph recording in scope (evaluation / profiling passes).
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
};

template <class S>
struct TensorNode {
  Shape shape;
  VecX<S> value;
  VecX<S> grad;  // allocated on first use; persists on leaves until zeroed
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Accumulates this node's grad into its parents' grads.
  std::function<void(TensorNode&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad = VecX<S>::Zero(value.size());
  }
};

// Dense n-d array with an attached gradient slot. Row-major storage; a
// [d0,...,dk] tensor is viewed as a (d0*...*d(k-1)) x dk matrix by the 2-d
// operations below. Copies are shallow (handles to one node), matching the
// usual autograd-variable semantics.
template <class S>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode<S>> n) : n_(std::move(n)) {}

  static Tensor zeros(Shape shape) {
    return filled(std::move(shape), S(0));
  }

  static Tensor filled(Shape shape, S v) {
    auto n = std::make_shared<TensorNode<S>>();
    n->value = VecX<S>::Constant(shape_numel(shape), v);
    n->shape = std::move(shape);
    return Tensor(std::move(n));
  }

  static Tensor from(Shape shape, std::vector<double> data) {
    if (static_cast<Index>(data.size()) != shape_numel(shape))
      throw ShapeError("data length " + std::to_string(data.size()) +
                       " does not fill shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode<S>>();
    n->shape = std::move(shape);
    n->value.resize(static_cast<Index>(data.size()));
    for (Index i = 0; i < n->value.size(); ++i)
      n->value[i] = static_cast<S>(data[static_cast<std::size_t>(i)]);
    return Tensor(std::move(n));
  }

  static Tensor scalar_of(S v) { return filled({1}, v); }

  static Tensor randn(Shape shape, RandomStream& rs, double stddev = 1.0) {
    auto n = std::make_shared<TensorNode<S>>();
    n->value.resize(shape_numel(shape));
    n->shape = std::move(shape);
    for (Index i = 0; i < n->value.size(); ++i)
      n->value[i] = static_cast<S>(rs.normal() * stddev);
    return Tensor(std::move(n));
  }

  static Tensor rand_uniform(Shape shape, RandomStream& rs, double lo,
                             double hi) {
    auto n = std::make_shared<TensorNode<S>>();
    n->value.resize(shape_numel(shape));
    n->shape = std::move(shape);
    for (Index i = 0; i < n->value.size(); ++i)
      n->value[i] = static_cast<S>(rs.uniform(lo, hi));
    return Tensor(std::move(n));
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  Index size() const { return n_->value.size(); }

  Index cols() const { return n_->shape.empty() ? 1 : n_->shape.back(); }
  Index rows() const { return cols() == 0 ? 0 : size() / cols(); }

  Eigen::Map<const MatX<S>> mat() const {
    return {n_->value.data(), rows(), cols()};
  }
  Eigen::Map<MatX<S>> mat() {
    return {n_->value.data(), rows(), cols()};
  }
  const VecX<S>& raw() const { return n_->value; }
  VecX<S>& raw() { return n_->value; }

  S item() const {
    if (size() != 1)
      throw ContractError("item() on non-scalar tensor " +
                          shape_str(n_->shape));
    return n_->value[0];
  }

  S operator()(Index r, Index c) const { return mat()(r, c); }

  Tensor& set_requires_grad(bool rg = true) {
    n_->requires_grad = rg;
    return *this;
  }
  bool requires_grad() const { return n_->requires_grad; }

  bool has_grad() const { return n_->grad.size() == n_->value.size(); }
  Eigen::Map<const MatX<S>> grad_mat() const {
    return {n_->grad.data(), rows(), cols()};
  }
  VecX<S>& grad_raw() { return n_->grad; }
  void ensure_grad() { n_->ensure_grad(); }
  void zero_grad() {
    if (has_grad()) n_->grad.setZero();
  }

  std::shared_ptr<TensorNode<S>>& node() { return n_; }
  const std::shared_ptr<TensorNode<S>>& node() const { return n_; }

  // Value copy detached from the graph.
  Tensor detach() const {
    auto n = std::make_shared<TensorNode<S>>();
    n->shape = n_->shape;
    n->value = n_->value;
    return Tensor(std::move(n));
  }

 private:
  std::shared_ptr<TensorNode<S>> n_;
};

namespace detail {

template <class S>
Tensor<S> make_op(Shape shape, VecX<S> value,
                  std::vector<Tensor<S>> parents,
                  std::function<void(TensorNode<S>&)> backward) {
  auto n = std::make_shared<TensorNode<S>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool rg = false;
  if (grad_enabled) {
    for (const auto& p : parents) rg = rg || p.requires_grad();
  }
  if (rg) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward = std::move(backward);
  }
  return Tensor<S>(std::move(n));
}

template <class S>
Eigen::Map<MatX<S>> node_mat(TensorNode<S>& n) {
  Index c = n.shape.empty() ? 1 : n.shape.back();
  return {n.value.data(), c == 0 ? 0 : n.value.size() / c, c};
}

template <class S>
Eigen::Map<MatX<S>> node_grad_mat(TensorNode<S>& n) {
  Index c = n.shape.empty() ? 1 : n.shape.back();
  return {n.grad.data(), c == 0 ? 0 : n.grad.size() / c, c};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Reverse-mode sweep. `loss` must be scalar. Gradients accumulate into the
// grad slots of every reachable node that requires grad; callers zero
// parameter grads between steps.
template <class S>
void backward(const Tensor<S>& loss) {
  if (loss.size() != 1)
    throw ContractError("backward() requires a scalar loss, got " +
                        shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS; reverse post-order is a valid evaluation order.
  std::vector<TensorNode<S>*> topo;
  std::unordered_set<TensorNode<S>*> seen;
  std::vector<std::pair<TensorNode<S>*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode<S>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad();
  loss.node()->grad[0] += S(1);
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    TensorNode<S>* n = *it;
    if (n->backward) {
      n->ensure_grad();
      n->backward(*n);
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise / broadcast arithmetic

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  return detail::make_op<S>(
      a.shape(), a.raw() + b.raw(), {a, b}, [](TensorNode<S>& out) {
        if (out.parents[0]->requires_grad) {
          out.parents[0]->ensure_grad();
          out.parents[0]->grad += out.grad;
        }
        if (out.parents[1]->requires_grad) {
          out.parents[1]->ensure_grad();
          out.parents[1]->grad += out.grad;
        }
      });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("sub: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  return detail::make_op<S>(
      a.shape(), a.raw() - b.raw(), {a, b}, [](TensorNode<S>& out) {
        if (out.parents[0]->requires_grad) {
          out.parents[0]->ensure_grad();
          out.parents[0]->grad += out.grad;
        }
        if (out.parents[1]->requires_grad) {
          out.parents[1]->ensure_grad();
          out.parents[1]->grad -= out.grad;
        }
      });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  return detail::make_op<S>(
      a.shape(), (a.raw().array() * b.raw().array()).matrix(), {a, b},
      [](TensorNode<S>& out) {
        auto& pa = *out.parents[0];
        auto& pb = *out.parents[1];
        if (pa.requires_grad) {
          pa.ensure_grad();
          pa.grad.array() += out.grad.array() * pb.value.array();
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          pb.grad.array() += out.grad.array() * pa.value.array();
        }
      });
}

template <class S>
Tensor<S> mul_const(const Tensor<S>& a, S c) {
  return detail::make_op<S>(a.shape(), a.raw() * c, {a},
                            [c](TensorNode<S>& out) {
                              auto& pa = *out.parents[0];
                              if (!pa.requires_grad) return;
                              pa.ensure_grad();
                              pa.grad += out.grad * c;
                            });
}

template <class S>
Tensor<S> add_const(const Tensor<S>& a, S c) {
  return detail::make_op<S>(a.shape(), (a.raw().array() + c).matrix(), {a},
                            [](TensorNode<S>& out) {
                              auto& pa = *out.parents[0];
                              if (!pa.requires_grad) return;
                              pa.ensure_grad();
                              pa.grad += out.grad;
                            });
}

template <class S>
Tensor<S> one_minus(const Tensor<S>& a) {
  return detail::make_op<S>(a.shape(), (S(1) - a.raw().array()).matrix(), {a},
                            [](TensorNode<S>& out) {
                              auto& pa = *out.parents[0];
                              if (!pa.requires_grad) return;
                              pa.ensure_grad();
                              pa.grad -= out.grad;
                            });
}

// a: [m x n], v: [1 x n] (or [n]); adds v to every row of a.
template <class S>
Tensor<S> add_rowvec(const Tensor<S>& a, const Tensor<S>& v) {
  if (v.size() != a.cols())
    throw ShapeError("add_rowvec: " + shape_str(a.shape()) + " vs " +
                     shape_str(v.shape()));
  VecX<S> out = a.raw();
  Eigen::Map<MatX<S>> om(out.data(), a.rows(), a.cols());
  om.rowwise() += v.raw().transpose();
  return detail::make_op<S>(a.shape(), std::move(out), {a, v},
                            [](TensorNode<S>& out) {
                              auto& pa = *out.parents[0];
                              auto& pv = *out.parents[1];
                              auto g = detail::node_grad_mat(out);
                              if (pa.requires_grad) {
                                pa.ensure_grad();
                                pa.grad += out.grad;
                              }
                              if (pv.requires_grad) {
                                pv.ensure_grad();
                                pv.grad += g.colwise().sum().transpose();
                              }
                            });
}

// a: [m x n], s: [m x 1] (or [m]); scales row i of a by s[i].
template <class S>
Tensor<S> scale_rows(const Tensor<S>& a, const Tensor<S>& s) {
  if (s.size() != a.rows())
    throw ShapeError("scale_rows: " + shape_str(a.shape()) + " vs " +
                     shape_str(s.shape()));
  VecX<S> out = a.raw();
  Eigen::Map<MatX<S>> om(out.data(), a.rows(), a.cols());
  om.array().colwise() *= s.raw().array();
  return detail::make_op<S>(
      a.shape(), std::move(out), {a, s}, [](TensorNode<S>& out) {
        auto& pa = *out.parents[0];
        auto& ps = *out.parents[1];
        auto g = detail::node_grad_mat(out);
        auto am = detail::node_mat(pa);
        if (pa.requires_grad) {
          pa.ensure_grad();
          detail::node_grad_mat(pa).array() +=
              g.array().colwise() * ps.value.array();
        }
        if (ps.requires_grad) {
          ps.ensure_grad();
          ps.grad.array() += (g.array() * am.array()).rowwise().sum();
        }
      });
}

// ---------------------------------------------------------------------------
// Matrix product

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, bool trans_a = false,
                 bool trans_b = false) {
  const Index am = trans_a ? a.cols() : a.rows();
  const Index ak = trans_a ? a.rows() : a.cols();
  const Index bk = trans_b ? b.cols() : b.rows();
  const Index bn = trans_b ? b.rows() : b.cols();
  if (ak != bk)
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) +
                     (trans_a ? "^T" : "") + " x " + shape_str(b.shape()) +
                     (trans_b ? "^T" : ""));
  VecX<S> out(am * bn);
  Eigen::Map<MatX<S>> om(out.data(), am, bn);
  const auto amat = a.mat();
  const auto bmat = b.mat();
  if (!trans_a && !trans_b)
    om.noalias() = amat * bmat;
  else if (trans_a && !trans_b)
    om.noalias() = amat.transpose() * bmat;
  else if (!trans_a && trans_b)
    om.noalias() = amat * bmat.transpose();
  else
    om.noalias() = amat.transpose() * bmat.transpose();

  return detail::make_op<S>(
      {am, bn}, std::move(out), {a, b},
      [trans_a, trans_b](TensorNode<S>& out) {
        auto& pa = *out.parents[0];
        auto& pb = *out.parents[1];
        auto g = detail::node_grad_mat(out);
        auto am = detail::node_mat(pa);
        auto bm = detail::node_mat(pb);
        if (pa.requires_grad) {
          pa.ensure_grad();
          auto ga = detail::node_grad_mat(pa);
          if (!trans_a && !trans_b)
            ga.noalias() += g * bm.transpose();
          else if (trans_a && !trans_b)
            ga.noalias() += bm * g.transpose();
          else if (!trans_a && trans_b)
            ga.noalias() += g * bm;
          else
            ga.noalias() += bm.transpose() * g.transpose();
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          auto gb = detail::node_grad_mat(pb);
          if (!trans_a && !trans_b)
            gb.noalias() += am.transpose() * g;
          else if (trans_a && !trans_b)
            gb.noalias() += am * g;
          else if (!trans_a && trans_b)
            gb.noalias() += g.transpose() * am;
          else
            gb.noalias() += g.transpose() * am.transpose();
        }
      });
}

// ---------------------------------------------------------------------------
// Nonlinearities

template <class S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  VecX<S> out(a.size());
  for (Index i = 0; i < a.size(); ++i) {
    const S x = a.raw()[i];
    out[i] = x >= S(0) ? S(1) / (S(1) + std::exp(-x))
                       : std::exp(x) / (S(1) + std::exp(x));
  }
  return detail::make_op<S>(
      a.shape(), std::move(out), {a}, [](TensorNode<S>& out) {
        auto& pa = *out.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        pa.grad.array() += out.grad.array() * out.value.array() *
                           (S(1) - out.value.array());
      });
}

template <class S>
Tensor<S> log_t(const Tensor<S>& a) {
  return detail::make_op<S>(
      a.shape(), a.raw().array().log().matrix(), {a}, [](TensorNode<S>& out) {
        auto& pa = *out.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        pa.grad.array() += out.grad.array() / pa.value.array();
      });
}

template <class S>
Tensor<S> exp_t(const Tensor<S>& a) {
  return detail::make_op<S>(
      a.shape(), a.raw().array().exp().matrix(), {a}, [](TensorNode<S>& out) {
        auto& pa = *out.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        pa.grad.array() += out.grad.array() * out.value.array();
      });
}

// tanh-form gaussian error linear unit.
template <class S>
Tensor<S> gelu(const Tensor<S>& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  VecX<S> out(a.size());
  for (Index i = 0; i < a.size(); ++i) {
    const double x = static_cast<double>(a.raw()[i]);
    out[i] = static_cast<S>(0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x))));
  }
  return detail::make_op<S>(
      a.shape(), std::move(out), {a}, [](TensorNode<S>& out) {
        auto& pa = *out.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (Index i = 0; i < pa.value.size(); ++i) {
          const double x = static_cast<double>(pa.value[i]);
          const double u = kC * (x + kA * x * x * x);
          const double t = std::tanh(u);
          const double sech2 = 1.0 - t * t;
          const double d =
              0.5 * (1.0 + t) + 0.5 * x * sech2 * kC * (1.0 + 3.0 * kA * x * x);
          pa.grad[i] += out.grad[i] * static_cast<S>(d);
        }
      });
}

// ---------------------------------------------------------------------------
// Row-wise softmax with optional boolean mask (true = attendable). Masked
// entries are exactly zero; rows are stabilized by row-max subtraction.
template <class S>
Tensor<S> row_softmax(const Tensor<S>& a, const MaskMat* mask = nullptr) {
  const Index m = a.rows(), n = a.cols();
  if (mask && (mask->rows() != m || mask->cols() != n))
    throw ShapeError("row_softmax: mask " + std::to_string(mask->rows()) +
                     "x" + std::to_string(mask->cols()) +
                     " does not match logits " + shape_str(a.shape()));
  VecX<S> out(a.size());
  Eigen::Map<MatX<S>> om(out.data(), m, n);
  const auto am = a.mat();
  for (Index r = 0; r < m; ++r) {
    S mx = std::numeric_limits<S>::lowest();
    bool any = false;
    for (Index c = 0; c < n; ++c) {
      if (mask && !(*mask)(r, c)) continue;
      any = true;
      mx = std::max(mx, am(r, c));
    }
    if (!any)
      throw DegenerateRowError("row_softmax: row " + std::to_string(r) +
                               " is fully masked");
    S denom = S(0);
    for (Index c = 0; c < n; ++c) {
      if (mask && !(*mask)(r, c)) {
        om(r, c) = S(0);
        continue;
      }
      om(r, c) = std::exp(am(r, c) - mx);
      denom += om(r, c);
    }
    om.row(r) /= denom;
  }
  // Masked outputs are exactly zero, so the standard softmax backward
  // (p * (g - <g,p>)) is already correct without consulting the mask.
  return detail::make_op<S>(
      a.shape(), std::move(out), {a}, [](TensorNode<S>& out) {
        auto& pa = *out.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        auto p = detail::node_mat(out);
        auto g = detail::node_grad_mat(out);
        auto ga = detail::node_grad_mat(pa);
        for (Index r = 0; r < p.rows(); ++r) {
          const S dot = g.row(r).dot(p.row(r));
          ga.row(r).array() +=
              p.row(r).array() * (g.row(r).array() - dot);
        }
      });
}

// Row-wise normalization to zero mean / unit variance (no learned affine).
template <class S>
Tensor<S> layer_norm(const Tensor<S>& a, S eps = S(1e-5)) {
  const Index m = a.rows(), n = a.cols();
  VecX<S> out(a.size());
  VecX<S> inv_std(m);
  Eigen::Map<MatX<S>> om(out.data(), m, n);
  const auto am = a.mat();
  for (Index r = 0; r < m; ++r) {
    const S mu = am.row(r).mean();
    const S var = (am.row(r).array() - mu).square().mean();
    inv_std[r] = S(1) / std::sqrt(var + eps);
    om.row(r) = (am.row(r).array() - mu) * inv_std[r];
  }
  return detail::make_op<S>(
      a.shape(), std::move(out), {a},
      [inv_std = std::move(inv_std)](TensorNode<S>& out) {
        auto& pa = *out.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        auto y = detail::node_mat(out);
        auto g = detail::node_grad_mat(out);
        auto ga = detail::node_grad_mat(pa);
        const Index n = y.cols();
        for (Index r = 0; r < y.rows(); ++r) {
          const S gm = g.row(r).mean();
          const S gy = g.row(r).dot(y.row(r)) / static_cast<S>(n);
          ga.row(r).array() +=
              inv_std[r] *
              (g.row(r).array() - gm - y.row(r).array() * gy);
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions

template <class S>
Tensor<S> sum(const Tensor<S>& a) {
  VecX<S> out(1);
  out[0] = a.raw().sum();
  return detail::make_op<S>({1}, std::move(out), {a}, [](TensorNode<S>& out) {
    auto& pa = *out.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    pa.grad.array() += out.grad[0];
  });
}

template <class S>
Tensor<S> mean(const Tensor<S>& a) {
  VecX<S> out(1);
  out[0] = a.raw().mean();
  const S inv = S(1) / static_cast<S>(a.size());
  return detail::make_op<S>({1}, std::move(out), {a},
                            [inv](TensorNode<S>& out) {
                              auto& pa = *out.parents[0];
                              if (!pa.requires_grad) return;
                              pa.ensure_grad();
                              pa.grad.array() += out.grad[0] * inv;
                            });
}

// ---------------------------------------------------------------------------
// Structural ops

template <class S>
Tensor<S> slice_rows(const Tensor<S>& a, Index r0, Index nr) {
  if (r0 < 0 || nr < 0 || r0 + nr > a.rows())
    throw ShapeError("slice_rows: range [" + std::to_string(r0) + ", " +
                     std::to_string(r0 + nr) + ") out of " +
                     shape_str(a.shape()));
  const Index n = a.cols();
  VecX<S> out = a.raw().segment(r0 * n, nr * n);
  return detail::make_op<S>({nr, n}, std::move(out), {a},
                            [r0, nr, n](TensorNode<S>& out) {
                              auto& pa = *out.parents[0];
                              if (!pa.requires_grad) return;
                              pa.ensure_grad();
                              pa.grad.segment(r0 * n, nr * n) += out.grad;
                            });
}

template <class S>
Tensor<S> slice_cols(const Tensor<S>& a, Index c0, Index nc) {
  if (c0 < 0 || nc < 0 || c0 + nc > a.cols())
    throw ShapeError("slice_cols: range [" + std::to_string(c0) + ", " +
                     std::to_string(c0 + nc) + ") out of " +
                     shape_str(a.shape()));
  const Index m = a.rows();
  VecX<S> out(m * nc);
  Eigen::Map<MatX<S>>(out.data(), m, nc) = a.mat().middleCols(c0, nc);
  return detail::make_op<S>(
      {m, nc}, std::move(out), {a}, [c0, nc](TensorNode<S>& out) {
        auto& pa = *out.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        detail::node_grad_mat(pa).middleCols(c0, nc) +=
            detail::node_grad_mat(out);
      });
}

template <class S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no parts");
  const Index n = parts[0].cols();
  Index m = 0;
  for (const auto& p : parts) {
    if (p.cols() != n)
      throw ShapeError("concat_rows: column mismatch " +
                       shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    m += p.rows();
  }
  VecX<S> out(m * n);
  Index off = 0;
  for (const auto& p : parts) {
    out.segment(off, p.size()) = p.raw();
    off += p.size();
  }
  return detail::make_op<S>({m, n}, std::move(out), parts,
                            [](TensorNode<S>& out) {
                              Index off = 0;
                              for (auto& pp : out.parents) {
                                if (pp->requires_grad) {
                                  pp->ensure_grad();
                                  pp->grad += out.grad.segment(off, pp->value.size());
                                }
                                off += pp->value.size();
                              }
                            });
}

template <class S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no parts");
  const Index m = parts[0].rows();
  Index n = 0;
  for (const auto& p : parts) {
    if (p.rows() != m)
      throw ShapeError("concat_cols: row mismatch " +
                       shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    n += p.cols();
  }
  VecX<S> out(m * n);
  Eigen::Map<MatX<S>> om(out.data(), m, n);
  Index off = 0;
  for (const auto& p : parts) {
    om.middleCols(off, p.cols()) = p.mat();
    off += p.cols();
  }
  return detail::make_op<S>({m, n}, std::move(out), parts,
                            [](TensorNode<S>& out) {
                              auto g = detail::node_grad_mat(out);
                              Index off = 0;
                              for (auto& pp : out.parents) {
                                Index c = pp->shape.back();
                                if (pp->requires_grad) {
                                  pp->ensure_grad();
                                  detail::node_grad_mat(*pp) +=
                                      g.middleCols(off, c);
                                }
                                off += c;
                              }
                            });
}

// Row gather: out[i] = a[ids[i]]. Backward scatter-adds, so repeated ids
// accumulate (this is also the embedding-lookup backward).
template <class S>
Tensor<S> gather_rows(const Tensor<S>& a, std::vector<Index> ids) {
  const Index n = a.cols();
  for (Index id : ids)
    if (id < 0 || id >= a.rows())
      throw ShapeError("gather_rows: row " + std::to_string(id) +
                       " out of " + shape_str(a.shape()));
  const Index k = static_cast<Index>(ids.size());
  VecX<S> out(k * n);
  Eigen::Map<MatX<S>> om(out.data(), k, n);
  const auto am = a.mat();
  for (Index i = 0; i < k; ++i) om.row(i) = am.row(ids[static_cast<std::size_t>(i)]);
  return detail::make_op<S>(
      {k, n}, std::move(out), {a},
      [ids = std::move(ids)](TensorNode<S>& out) {
        auto& pa = *out.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        auto g = detail::node_grad_mat(out);
        auto ga = detail::node_grad_mat(pa);
        for (Index i = 0; i < g.rows(); ++i)
          ga.row(ids[static_cast<std::size_t>(i)]) += g.row(i);
      });
}

// out = base with out[ids[i]] = rows[i]. Replaced rows take their gradient
// from `rows`; untouched rows keep flowing to `base`.
template <class S>
Tensor<S> scatter_rows_into(const Tensor<S>& base, std::vector<Index> ids,
                            const Tensor<S>& rows) {
  if (rows.cols() != base.cols() ||
      rows.rows() != static_cast<Index>(ids.size()))
    throw ShapeError("scatter_rows_into: rows " + shape_str(rows.shape()) +
                     " vs base " + shape_str(base.shape()) + " with " +
                     std::to_string(ids.size()) + " ids");
  VecX<S> out = base.raw();
  Eigen::Map<MatX<S>> om(out.data(), base.rows(), base.cols());
  const auto rm = rows.mat();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= base.rows())
      throw ShapeError("scatter_rows_into: row " + std::to_string(ids[i]) +
                       " out of " + shape_str(base.shape()));
    om.row(ids[i]) = rm.row(static_cast<Index>(i));
  }
  return detail::make_op<S>(
      base.shape(), std::move(out), {base, rows},
      [ids = std::move(ids)](TensorNode<S>& out) {
        auto& pb = *out.parents[0];
        auto& pr = *out.parents[1];
        auto g = detail::node_grad_mat(out);
        if (pr.requires_grad) {
          pr.ensure_grad();
          auto gr = detail::node_grad_mat(pr);
          for (std::size_t i = 0; i < ids.size(); ++i)
            gr.row(static_cast<Index>(i)) += g.row(ids[i]);
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          auto gb = detail::node_grad_mat(pb);
          gb += g;
          for (Index id : ids) gb.row(id) -= g.row(id);
        }
      });
}

// Value copy that blocks gradient flow.
template <class S>
Tensor<S> stop_gradient(const Tensor<S>& a) {
  return a.detach();
}

// ---------------------------------------------------------------------------
// Mean negative log-likelihood over masked rows of a logits matrix.
// Row r contributes logsumexp(logits[r]) - logits[r][targets[r]] when
// mask[r] is set. The shifted-prediction bookkeeping of the sequence losses
// lives in the model layer; this kernel is position-agnostic.
template <class S>
Tensor<S> masked_nll(const Tensor<S>& logits, const std::vector<Index>& targets,
                     const std::vector<std::uint8_t>& mask) {
  const Index m = logits.rows(), v = logits.cols();
  if (static_cast<Index>(targets.size()) != m ||
      static_cast<Index>(mask.size()) != m)
    throw ShapeError("masked_nll: targets/mask length " +
                     std::to_string(targets.size()) + "/" +
                     std::to_string(mask.size()) + " vs logits " +
                     shape_str(logits.shape()));
  Index count = 0;
  S total = S(0);
  const auto lm = logits.mat();
  for (Index r = 0; r < m; ++r) {
    if (!mask[static_cast<std::size_t>(r)]) continue;
    const Index t = targets[static_cast<std::size_t>(r)];
    if (t < 0 || t >= v)
      throw VocabularyError("masked_nll: target " + std::to_string(t) +
                            " outside vocab of " + std::to_string(v));
    const S mx = lm.row(r).maxCoeff();
    const S lse = mx + std::log((lm.row(r).array() - mx).exp().sum());
    total += lse - lm(r, t);
    ++count;
  }
  if (count == 0) throw ContractError("masked_nll: loss mask selects no rows");
  VecX<S> out(1);
  out[0] = total / static_cast<S>(count);
  return detail::make_op<S>(
      {1}, std::move(out), {logits},
      [targets, mask, count](TensorNode<S>& out) {
        auto& pl = *out.parents[0];
        if (!pl.requires_grad) return;
        pl.ensure_grad();
        auto lm = detail::node_mat(pl);
        auto gl = detail::node_grad_mat(pl);
        const S scale = out.grad[0] / static_cast<S>(count);
        VecX<S> p(lm.cols());
        for (Index r = 0; r < lm.rows(); ++r) {
          if (!mask[static_cast<std::size_t>(r)]) continue;
          const S mx = lm.row(r).maxCoeff();
          p = (lm.row(r).array() - mx).exp().matrix().transpose();
          p /= p.sum();
          gl.row(r) += scale * p.transpose();
          gl(r, targets[static_cast<std::size_t>(r)]) -= scale;
        }
      });
}

// ---------------------------------------------------------------------------
// Central-difference gradient check. Runs f once with gradients to collect
// the analytic gradient of x, then probes every coordinate of x with
// two value-only evaluations. Returns max_i |analytic_i - numeric_i| /
// max(1, |numeric_i|).
template <class S>
double finite_diff_check(const std::function<Tensor<S>(const Tensor<S>&)>& f,
                         Tensor<S>& x, double eps) {
  if (!(eps > 0.0) || eps > 1e-2)
    throw ContractError("finite_diff_check: eps must lie in (0, 1e-2]");
  x.set_requires_grad(true);
  x.zero_grad();
  {
    Tensor<S> loss = f(x);
    backward(loss);
  }
  if (!x.has_grad())
    throw ContractError("finite_diff_check: f does not reach x");
  VecX<S> analytic = x.grad_raw();

  double worst = 0.0;
  for (Index i = 0; i < x.size(); ++i) {
    const S orig = x.raw()[i];
    double fp, fm;
    {
      NoGradGuard ng;
      x.raw()[i] = orig + static_cast<S>(eps);
      fp = static_cast<double>(f(x).item());
      x.raw()[i] = orig - static_cast<S>(eps);
      fm = static_cast<double>(f(x).item());
      x.raw()[i] = orig;
    }
    const double numeric = (fp - fm) / (2.0 * eps);
    const double err = std::abs(static_cast<double>(analytic[i]) - numeric) /
                       std::max(1.0, std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace unimod

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "sdrc/errors.hpp"

// Dense row-major tensors with reverse-mode autodiff on a define-by-run
// tape. The scalar type is a template parameter: float is the model-state
// default, double backs the finite-difference oracles. Reductions always
// accumulate in double so the float lane stays accurate enough for the
// exact-decomposition tolerances.

namespace sdrc {

template <typename T>
class TapeT;

namespace detail {

inline std::int64_t product_of(const std::vector<int>& dims) {
  std::int64_t n = 1;
  for (int d : dims) {
    if (d <= 0) throw ShapeError("tensor extent must be positive, got " + std::to_string(d));
    n *= d;
  }
  return n;
}

template <typename T>
void check_finite(const std::vector<T>& v, const char* where) {
  for (const T& x : v) {
    if (!std::isfinite(static_cast<double>(x)))
      throw ContractError(std::string(where) + ": non-finite value");
  }
}

}  // namespace detail

template <typename T>
class TensorT {
 public:
  TensorT() = default;

  explicit TensorT(std::vector<int> dims)
      : dims_(std::move(dims)),
        data_(std::make_shared<std::vector<T>>(detail::product_of(dims_), T(0))) {}

  // Public construction validates finiteness; this is the API boundary
  // where NaN/Inf is a contract violation in every build mode.
  TensorT(std::vector<int> dims, std::vector<T> values)
      : dims_(std::move(dims)), data_(std::make_shared<std::vector<T>>(std::move(values))) {
    if (detail::product_of(dims_) != static_cast<std::int64_t>(data_->size()))
      throw ShapeError("value count does not match extents");
    detail::check_finite(*data_, "Tensor");
  }

  static TensorT zeros(std::vector<int> dims) { return TensorT(std::move(dims)); }

  static TensorT full(std::vector<int> dims, T value) {
    TensorT t(std::move(dims));
    for (T& x : *t.data_) x = value;
    return t;
  }

  static TensorT identity(int m) {
    TensorT t({m, m});
    for (int i = 0; i < m; ++i) (*t.data_)[static_cast<std::size_t>(i) * m + i] = T(1);
    return t;
  }

  const std::vector<int>& dims() const { return dims_; }
  int rank() const { return static_cast<int>(dims_.size()); }
  std::int64_t size() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }

  int rows() const {
    require_rank2("rows()");
    return dims_[0];
  }
  int cols() const {
    require_rank2("cols()");
    return dims_[1];
  }

  std::vector<T>& values() { return *data_; }
  const std::vector<T>& values() const { return *data_; }
  std::shared_ptr<std::vector<T>> shared_values() const { return data_; }
  T* data() { return data_->data(); }
  const T* data() const { return data_->data(); }

  T at(std::int64_t i) const { return (*data_)[static_cast<std::size_t>(i)]; }
  T& at(std::int64_t i) { return (*data_)[static_cast<std::size_t>(i)]; }
  T at2(int r, int c) const { return (*data_)[static_cast<std::size_t>(r) * dims_[1] + c]; }
  T& at2(int r, int c) { return (*data_)[static_cast<std::size_t>(r) * dims_[1] + c]; }

  bool tracked() const { return tape_ != nullptr; }
  TapeT<T>* tape() const { return tape_; }
  int node() const { return node_; }

  // Same storage, no tape association.
  TensorT detached() const {
    TensorT t;
    t.dims_ = dims_;
    t.data_ = data_;
    return t;
  }

  // Deep copy of the values, no tape association.
  TensorT clone() const {
    TensorT t;
    t.dims_ = dims_;
    t.data_ = std::make_shared<std::vector<T>>(*data_);
    return t;
  }

  template <typename U>
  TensorT<U> cast() const {
    std::vector<U> out(data_->size());
    for (std::size_t i = 0; i < data_->size(); ++i) out[i] = static_cast<U>((*data_)[i]);
    TensorT<U> t;
    t.set_raw(dims_, std::make_shared<std::vector<U>>(std::move(out)));
    return t;
  }

  // Internal maker: no finiteness validation (ops validate in debug only).
  void set_raw(std::vector<int> dims, std::shared_ptr<std::vector<T>> data) {
    dims_ = std::move(dims);
    data_ = std::move(data);
    tape_ = nullptr;
    node_ = -1;
  }

  void set_tracking(TapeT<T>* tape, int node) {
    tape_ = tape;
    node_ = node;
  }

 private:
  void require_rank2(const char* what) const {
    if (rank() != 2) throw ShapeError(std::string(what) + " requires a rank-2 tensor");
  }

  std::vector<int> dims_;
  std::shared_ptr<std::vector<T>> data_;
  TapeT<T>* tape_ = nullptr;
  int node_ = -1;
};

using Tensor = TensorT<float>;

namespace detail {

template <typename T>
TensorT<T> wrap(std::vector<int> dims, std::vector<T> values) {
#ifndef NDEBUG
  check_finite(values, "op output");
#endif
  TensorT<T> t;
  t.set_raw(std::move(dims), std::make_shared<std::vector<T>>(std::move(values)));
  return t;
}

}  // namespace detail

template <typename T>
class TapeT {
 public:
  using BackwardFn = std::function<void(const std::vector<T>& out_grad, TapeT<T>& tape)>;

  TapeT() = default;
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  // Registers a leaf sharing the argument's storage. Gradients of the
  // returned tensor are retrievable after backward().
  TensorT<T> watch(const TensorT<T>& t) {
    TensorT<T> leaf = t.detached();
    int id = add_node(leaf.size(), BackwardFn());
    leaf.set_tracking(this, id);
    return leaf;
  }

  // Used by ops: makes a tracked output node. Parents must already be on
  // this tape (topological order holds by construction); -1 entries mean
  // an untracked operand and are ignored.
  TensorT<T> emit(std::vector<int> dims, std::vector<T> values,
                  std::initializer_list<int> parents, BackwardFn back) {
    return emit_impl(std::move(dims), std::move(values), parents.begin(), parents.end(),
                     std::move(back));
  }

  TensorT<T> emit(std::vector<int> dims, std::vector<T> values, const std::vector<int>& parents,
                  BackwardFn back) {
    return emit_impl(std::move(dims), std::move(values), parents.begin(), parents.end(),
                     std::move(back));
  }

  // Reuses an existing node under new extents (reshape).
  TensorT<T> alias(const TensorT<T>& t, std::vector<int> dims) {
    TensorT<T> out;
    out.set_raw(std::move(dims), t.shared_values());
    out.set_tracking(this, t.node());
    return out;
  }

  void accumulate(int node, const T* g, std::int64_t n) {
    std::vector<T>& buf = nodes_[static_cast<std::size_t>(node)].grad;
    if (buf.empty()) buf.assign(static_cast<std::size_t>(n), T(0));
    for (std::int64_t i = 0; i < n; ++i) buf[static_cast<std::size_t>(i)] += g[i];
  }

  void accumulate(int node, const std::vector<T>& g) {
    accumulate(node, g.data(), static_cast<std::int64_t>(g.size()));
  }

  // Reverse sweep from a scalar output; each node's backward runs at most
  // once. Callable repeatedly (grads reset first).
  void backward(const TensorT<T>& output) {
    if (output.tape() != this) throw ContractError("backward: output not on this tape");
    if (output.size() != 1) throw ContractError("backward: output must be scalar");
    for (Node& n : nodes_) n.grad.clear();
    nodes_[static_cast<std::size_t>(output.node())].grad.assign(1, T(1));
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.grad.empty() && n.back) n.back(n.grad, *this);
    }
  }

  // Gradient of a tracked tensor; zeros when backward never reached it.
  TensorT<T> grad(const TensorT<T>& t) const {
    if (t.tape() != this) throw ContractError("grad: tensor not on this tape");
    const std::vector<T>& g = nodes_[static_cast<std::size_t>(t.node())].grad;
    if (g.empty()) return TensorT<T>::zeros(t.dims());
    return detail::wrap(t.dims(), g);
  }

  int node_count() const { return static_cast<int>(nodes_.size()); }

 private:
  struct Node {
    std::int64_t size = 0;
    BackwardFn back;
    std::vector<T> grad;
  };

  template <typename It>
  TensorT<T> emit_impl(std::vector<int> dims, std::vector<T> values, It first, It last,
                       BackwardFn back) {
    TensorT<T> out = detail::wrap(std::move(dims), std::move(values));
    int id = add_node(out.size(), std::move(back));
    for (It it = first; it != last; ++it) {
      if (*it >= id) throw ContractError("tape parent does not precede its node");
    }
    out.set_tracking(this, id);
    return out;
  }

  int add_node(std::int64_t size, BackwardFn back) {
    nodes_.push_back(Node{size, std::move(back), {}});
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<Node> nodes_;
};

using Tape = TapeT<float>;

// ---------------------------------------------------------------------------
// Op plumbing

namespace detail {

template <typename T>
TapeT<T>* common_tape(std::initializer_list<const TensorT<T>*> ts) {
  TapeT<T>* tape = nullptr;
  for (const TensorT<T>* t : ts) {
    if (!t->tracked()) continue;
    if (tape != nullptr && tape != t->tape())
      throw ContractError("operands live on different tapes");
    tape = t->tape();
  }
  return tape;
}

template <typename T>
void require_same_dims(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
  if (a.dims() != b.dims()) throw ShapeError(std::string(op) + ": extents differ");
}

template <typename T>
void require_rank2(const TensorT<T>& a, const char* op) {
  if (a.rank() != 2) throw ShapeError(std::string(op) + ": rank-2 tensor required");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast arithmetic

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  detail::require_same_dims(a, b, "add");
  std::vector<T> out(a.values());
  const std::vector<T>& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  TapeT<T>* tp = detail::common_tape<T>({&a, &b});
  if (!tp) return detail::wrap(a.dims(), std::move(out));
  int pa = a.node(), pb = b.node();
  return tp->emit(a.dims(), std::move(out), {pa, pb},
                  [pa, pb](const std::vector<T>& g, TapeT<T>& t) {
                    if (pa >= 0) t.accumulate(pa, g);
                    if (pb >= 0) t.accumulate(pb, g);
                  });
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  detail::require_same_dims(a, b, "sub");
  std::vector<T> out(a.values());
  const std::vector<T>& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  TapeT<T>* tp = detail::common_tape<T>({&a, &b});
  if (!tp) return detail::wrap(a.dims(), std::move(out));
  int pa = a.node(), pb = b.node();
  return tp->emit(a.dims(), std::move(out), {pa, pb},
                  [pa, pb](const std::vector<T>& g, TapeT<T>& t) {
                    if (pa >= 0) t.accumulate(pa, g);
                    if (pb >= 0) {
                      std::vector<T> ng(g.size());
                      for (std::size_t i = 0; i < g.size(); ++i) ng[i] = -g[i];
                      t.accumulate(pb, ng);
                    }
                  });
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  detail::require_same_dims(a, b, "mul");
  std::vector<T> out(a.values());
  const std::vector<T>& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  TapeT<T>* tp = detail::common_tape<T>({&a, &b});
  if (!tp) return detail::wrap(a.dims(), std::move(out));
  int pa = a.node(), pb = b.node();
  auto av = a.shared_values();
  auto bs = b.shared_values();
  return tp->emit(a.dims(), std::move(out), {pa, pb},
                  [pa, pb, av, bs](const std::vector<T>& g, TapeT<T>& t) {
                    if (pa >= 0) {
                      std::vector<T> ga(g.size());
                      for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * (*bs)[i];
                      t.accumulate(pa, ga);
                    }
                    if (pb >= 0) {
                      std::vector<T> gb(g.size());
                      for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * (*av)[i];
                      t.accumulate(pb, gb);
                    }
                  });
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T c) {
  std::vector<T> out(a.values());
  for (T& x : out) x *= c;
  TapeT<T>* tp = detail::common_tape<T>({&a});
  if (!tp) return detail::wrap(a.dims(), std::move(out));
  int pa = a.node();
  return tp->emit(a.dims(), std::move(out), {pa},
                  [pa, c](const std::vector<T>& g, TapeT<T>& t) {
                    std::vector<T> ga(g.size());
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * c;
                    t.accumulate(pa, ga);
                  });
}

template <typename T>
TensorT<T> neg(const TensorT<T>& a) {
  return scale(a, T(-1));
}

template <typename T>
TensorT<T> add_const(const TensorT<T>& a, T c) {
  std::vector<T> out(a.values());
  for (T& x : out) x += c;
  TapeT<T>* tp = detail::common_tape<T>({&a});
  if (!tp) return detail::wrap(a.dims(), std::move(out));
  int pa = a.node();
  return tp->emit(a.dims(), std::move(out), {pa},
                  [pa](const std::vector<T>& g, TapeT<T>& t) { t.accumulate(pa, g); });
}

// out[r][c] = x[r][c] op v[r][0]  (column-vector broadcast over columns)
namespace detail {

template <typename T, typename Fwd, typename BackX, typename BackV>
TensorT<T> colvec_broadcast(const TensorT<T>& x, const TensorT<T>& v, const char* name,
                            Fwd fwd, BackX back_x, BackV back_v) {
  require_rank2(x, name);
  if (v.rank() != 2 || v.cols() != 1 || v.rows() != x.rows())
    throw ShapeError(std::string(name) + ": broadcast vector must be [rows x 1]");
  const int m = x.rows(), n = x.cols();
  std::vector<T> out(x.values());
  const std::vector<T>& vv = v.values();
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < n; ++c) out[static_cast<std::size_t>(r) * n + c] = fwd(out[static_cast<std::size_t>(r) * n + c], vv[static_cast<std::size_t>(r)]);
  TapeT<T>* tp = common_tape<T>({&x, &v});
  if (!tp) return wrap(x.dims(), std::move(out));
  int px = x.node(), pv = v.node();
  auto xs = x.shared_values();
  auto vs = v.shared_values();
  return tp->emit(x.dims(), std::move(out), {px, pv},
                  [px, pv, m, n, xs, vs, back_x, back_v](const std::vector<T>& g, TapeT<T>& t) {
                    if (px >= 0) {
                      std::vector<T> gx(g.size());
                      for (int r = 0; r < m; ++r)
                        for (int c = 0; c < n; ++c) {
                          std::size_t i = static_cast<std::size_t>(r) * n + c;
                          gx[i] = back_x(g[i], (*xs)[i], (*vs)[static_cast<std::size_t>(r)]);
                        }
                      t.accumulate(px, gx);
                    }
                    if (pv >= 0) {
                      std::vector<T> gv(static_cast<std::size_t>(m), T(0));
                      for (int r = 0; r < m; ++r) {
                        double acc = 0.0;
                        for (int c = 0; c < n; ++c) {
                          std::size_t i = static_cast<std::size_t>(r) * n + c;
                          acc += static_cast<double>(back_v(g[i], (*xs)[i], (*vs)[static_cast<std::size_t>(r)]));
                        }
                        gv[static_cast<std::size_t>(r)] = static_cast<T>(acc);
                      }
                      t.accumulate(pv, gv);
                    }
                  });
}

}  // namespace detail

template <typename T>
TensorT<T> add_colvec(const TensorT<T>& x, const TensorT<T>& v) {
  return detail::colvec_broadcast(
      x, v, "add_colvec", [](T a, T b) { return a + b; },
      [](T g, T, T) { return g; }, [](T g, T, T) { return g; });
}

template <typename T>
TensorT<T> sub_colvec(const TensorT<T>& x, const TensorT<T>& v) {
  return detail::colvec_broadcast(
      x, v, "sub_colvec", [](T a, T b) { return a - b; },
      [](T g, T, T) { return g; }, [](T g, T, T) { return -g; });
}

template <typename T>
TensorT<T> mul_colvec(const TensorT<T>& x, const TensorT<T>& v) {
  return detail::colvec_broadcast(
      x, v, "mul_colvec", [](T a, T b) { return a * b; },
      [](T g, T, T vr) { return g * vr; }, [](T g, T xi, T) { return g * xi; });
}

// Row-vector broadcasts: v is [1 x cols].
namespace detail {

template <typename T, typename Fwd, typename BackX, typename BackV>
TensorT<T> rowvec_broadcast(const TensorT<T>& x, const TensorT<T>& v, const char* name,
                            Fwd fwd, BackX back_x, BackV back_v) {
  require_rank2(x, name);
  if (v.rank() != 2 || v.rows() != 1 || v.cols() != x.cols())
    throw ShapeError(std::string(name) + ": broadcast vector must be [1 x cols]");
  const int m = x.rows(), n = x.cols();
  std::vector<T> out(x.values());
  const std::vector<T>& vv = v.values();
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < n; ++c) {
      std::size_t i = static_cast<std::size_t>(r) * n + c;
      out[i] = fwd(out[i], vv[static_cast<std::size_t>(c)]);
    }
  TapeT<T>* tp = common_tape<T>({&x, &v});
  if (!tp) return wrap(x.dims(), std::move(out));
  int px = x.node(), pv = v.node();
  auto xs = x.shared_values();
  auto vs = v.shared_values();
  return tp->emit(x.dims(), std::move(out), {px, pv},
                  [px, pv, m, n, xs, vs, back_x, back_v](const std::vector<T>& g, TapeT<T>& t) {
                    if (px >= 0) {
                      std::vector<T> gx(g.size());
                      for (int r = 0; r < m; ++r)
                        for (int c = 0; c < n; ++c) {
                          std::size_t i = static_cast<std::size_t>(r) * n + c;
                          gx[i] = back_x(g[i], (*xs)[i], (*vs)[static_cast<std::size_t>(c)]);
                        }
                      t.accumulate(px, gx);
                    }
                    if (pv >= 0) {
                      std::vector<T> gv(static_cast<std::size_t>(n), T(0));
                      for (int c = 0; c < n; ++c) {
                        double acc = 0.0;
                        for (int r = 0; r < m; ++r) {
                          std::size_t i = static_cast<std::size_t>(r) * n + c;
                          acc += static_cast<double>(back_v(g[i], (*xs)[i], (*vs)[static_cast<std::size_t>(c)]));
                        }
                        gv[static_cast<std::size_t>(c)] = static_cast<T>(acc);
                      }
                      t.accumulate(pv, gv);
                    }
                  });
}

}  // namespace detail

template <typename T>
TensorT<T> sub_rowvec(const TensorT<T>& x, const TensorT<T>& v) {
  return detail::rowvec_broadcast(
      x, v, "sub_rowvec", [](T a, T b) { return a - b; },
      [](T g, T, T) { return g; }, [](T g, T, T) { return -g; });
}

template <typename T>
TensorT<T> mul_rowvec(const TensorT<T>& x, const TensorT<T>& v) {
  return detail::rowvec_broadcast(
      x, v, "mul_rowvec", [](T a, T b) { return a * b; },
      [](T g, T, T vc) { return g * vc; }, [](T g, T xi, T) { return g * xi; });
}

// Broadcast-multiply by a tracked scalar (any 1-element tensor).
template <typename T>
TensorT<T> mul_scalar_t(const TensorT<T>& x, const TensorT<T>& s) {
  if (s.size() != 1) throw ShapeError("mul_scalar_t: scalar operand must have one element");
  const T sv = s.at(0);
  std::vector<T> out(x.values());
  for (T& v : out) v *= sv;
  TapeT<T>* tp = detail::common_tape<T>({&x, &s});
  if (!tp) return detail::wrap(x.dims(), std::move(out));
  int px = x.node(), ps = s.node();
  auto xs = x.shared_values();
  return tp->emit(x.dims(), std::move(out), {px, ps},
                  [px, ps, sv, xs](const std::vector<T>& g, TapeT<T>& t) {
                    if (px >= 0) {
                      std::vector<T> gx(g.size());
                      for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * sv;
                      t.accumulate(px, gx);
                    }
                    if (ps >= 0) {
                      double acc = 0.0;
                      for (std::size_t i = 0; i < g.size(); ++i)
                        acc += static_cast<double>(g[i]) * static_cast<double>((*xs)[i]);
                      T gs = static_cast<T>(acc);
                      t.accumulate(ps, &gs, 1);
                    }
                  });
}

// out[r][c] = x[r][c] * w[r][0]; gradient flows to both operands.
template <typename T>
TensorT<T> scale_rows(const TensorT<T>& x, const TensorT<T>& w) {
  return mul_colvec(x, w);
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities

namespace detail {

template <typename T, typename Fwd, typename Back>
TensorT<T> unary_op(const TensorT<T>& x, const char* /*name*/, Fwd fwd, Back back) {
  std::vector<T> out(x.size());
  const std::vector<T>& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  TapeT<T>* tp = common_tape<T>({&x});
  if (!tp) return wrap(x.dims(), std::move(out));
  int px = x.node();
  auto xs = x.shared_values();
  return tp->emit(x.dims(), std::move(out), {px},
                  [px, xs, back](const std::vector<T>& g, TapeT<T>& t) {
                    std::vector<T> gx(g.size());
                    for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * back((*xs)[i]);
                    t.accumulate(px, gx);
                  });
}

}  // namespace detail

template <typename T>
TensorT<T> gelu(const TensorT<T>& x) {
  // Exact (erf) GELU; smooth everywhere, so finite differences agree.
  return detail::unary_op(
      x, "gelu",
      [](T v) {
        double d = static_cast<double>(v);
        return static_cast<T>(0.5 * d * (1.0 + std::erf(d * M_SQRT1_2)));
      },
      [](T v) {
        double d = static_cast<double>(v);
        double cdf = 0.5 * (1.0 + std::erf(d * M_SQRT1_2));
        double pdf = std::exp(-0.5 * d * d) / std::sqrt(2.0 * M_PI);
        return static_cast<T>(cdf + d * pdf);
      });
}

template <typename T>
TensorT<T> sqrt_t(const TensorT<T>& x) {
  for (const T& v : x.values())
    if (v < T(0)) throw ContractError("sqrt_t: negative input");
  return detail::unary_op(
      x, "sqrt", [](T v) { return static_cast<T>(std::sqrt(static_cast<double>(v))); },
      [](T v) {
        double s = std::sqrt(static_cast<double>(v));
        return static_cast<T>(0.5 / s);
      });
}

template <typename T>
TensorT<T> recip(const TensorT<T>& x) {
  for (const T& v : x.values())
    if (v == T(0)) throw DegenerateInputError("recip: zero input");
  return detail::unary_op(
      x, "recip", [](T v) { return T(1) / v; },
      [](T v) {
        double d = static_cast<double>(v);
        return static_cast<T>(-1.0 / (d * d));
      });
}

template <typename T>
TensorT<T> log_t(const TensorT<T>& x) {
  for (const T& v : x.values())
    if (v <= T(0)) throw ContractError("log_t: non-positive input");
  return detail::unary_op(
      x, "log", [](T v) { return static_cast<T>(std::log(static_cast<double>(v))); },
      [](T v) { return static_cast<T>(1.0 / static_cast<double>(v)); });
}

// Gradient passes where x >= floor (subgradient choice at the boundary).
template <typename T>
TensorT<T> clamp_min(const TensorT<T>& x, T floor) {
  return detail::unary_op(
      x, "clamp_min", [floor](T v) { return v < floor ? floor : v; },
      [floor](T v) { return v >= floor ? T(1) : T(0); });
}

template <typename T>
TensorT<T> clamp(const TensorT<T>& x, T lo, T hi) {
  return detail::unary_op(
      x, "clamp",
      [lo, hi](T v) { return v < lo ? lo : (v > hi ? hi : v); },
      [lo, hi](T v) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Shape ops

template <typename T>
TensorT<T> reshape(const TensorT<T>& x, std::vector<int> dims) {
  if (detail::product_of(dims) != x.size()) throw ShapeError("reshape: element count changes");
  if (!x.tracked()) {
    TensorT<T> out;
    out.set_raw(std::move(dims), x.shared_values());
    return out;
  }
  return x.tape()->alias(x, std::move(dims));
}

template <typename T>
TensorT<T> transpose(const TensorT<T>& x) {
  detail::require_rank2(x, "transpose");
  const int m = x.rows(), n = x.cols();
  std::vector<T> out(x.size());
  const std::vector<T>& xv = x.values();
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < n; ++c)
      out[static_cast<std::size_t>(c) * m + r] = xv[static_cast<std::size_t>(r) * n + c];
  TapeT<T>* tp = detail::common_tape<T>({&x});
  if (!tp) return detail::wrap({n, m}, std::move(out));
  int px = x.node();
  return tp->emit({n, m}, std::move(out), {px},
                  [px, m, n](const std::vector<T>& g, TapeT<T>& t) {
                    std::vector<T> gx(g.size());
                    for (int c = 0; c < n; ++c)
                      for (int r = 0; r < m; ++r)
                        gx[static_cast<std::size_t>(r) * n + c] =
                            g[static_cast<std::size_t>(c) * m + r];
                    t.accumulate(px, gx);
                  });
}

template <typename T>
TensorT<T> concat_rows(const std::vector<TensorT<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: empty input");
  const int n = parts[0].cols();
  int total = 0;
  for (const TensorT<T>& p : parts) {
    detail::require_rank2(p, "concat_rows");
    if (p.cols() != n) throw ShapeError("concat_rows: column extents differ");
    total += p.rows();
  }
  std::vector<T> out;
  out.reserve(static_cast<std::size_t>(total) * n);
  for (const TensorT<T>& p : parts)
    out.insert(out.end(), p.values().begin(), p.values().end());

  TapeT<T>* tape = nullptr;
  for (const TensorT<T>& p : parts) {
    if (!p.tracked()) continue;
    if (tape != nullptr && tape != p.tape())
      throw ContractError("concat_rows: operands live on different tapes");
    tape = p.tape();
  }
  if (!tape) return detail::wrap({total, n}, std::move(out));

  struct Piece {
    int node;
    std::size_t offset;
    std::size_t count;
  };
  std::vector<Piece> pieces;
  std::vector<int> parents;
  std::size_t off = 0;
  for (const TensorT<T>& p : parts) {
    std::size_t cnt = static_cast<std::size_t>(p.size());
    if (p.tracked()) {
      pieces.push_back({p.node(), off, cnt});
      parents.push_back(p.node());
    }
    off += cnt;
  }
  return tape->emit({total, n}, std::move(out), parents,
                    [pieces](const std::vector<T>& g, TapeT<T>& t) {
                      for (const Piece& pc : pieces)
                        t.accumulate(pc.node, g.data() + pc.offset,
                                     static_cast<std::int64_t>(pc.count));
                    });
}

template <typename T>
TensorT<T> slice_rows(const TensorT<T>& x, int r0, int r1) {
  detail::require_rank2(x, "slice_rows");
  if (r0 < 0 || r1 > x.rows() || r0 >= r1) throw ShapeError("slice_rows: bad row range");
  const int n = x.cols();
  const std::size_t begin = static_cast<std::size_t>(r0) * n;
  const std::size_t count = static_cast<std::size_t>(r1 - r0) * n;
  std::vector<T> out(x.values().begin() + begin, x.values().begin() + begin + count);
  TapeT<T>* tp = detail::common_tape<T>({&x});
  if (!tp) return detail::wrap({r1 - r0, n}, std::move(out));
  int px = x.node();
  std::int64_t full = x.size();
  return tp->emit({r1 - r0, n}, std::move(out), {px},
                  [px, begin, count, full](const std::vector<T>& g, TapeT<T>& t) {
                    std::vector<T> gx(static_cast<std::size_t>(full), T(0));
                    for (std::size_t i = 0; i < count; ++i) gx[begin + i] = g[i];
                    t.accumulate(px, gx);
                  });
}

// ---------------------------------------------------------------------------
// Matrix product and reductions

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner extents differ (" + std::to_string(a.cols()) + " vs " +
                     std::to_string(b.rows()) + ")");
  const int m = a.rows(), k = a.cols(), p = b.cols();
  std::vector<T> out(static_cast<std::size_t>(m) * p);
  const T* av = a.data();
  const T* bv = b.data();
  std::vector<double> acc(static_cast<std::size_t>(p));
  for (int i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (int kk = 0; kk < k; ++kk) {
      const double aik = static_cast<double>(av[static_cast<std::size_t>(i) * k + kk]);
      const T* brow = bv + static_cast<std::size_t>(kk) * p;
      for (int j = 0; j < p; ++j) acc[static_cast<std::size_t>(j)] += aik * static_cast<double>(brow[j]);
    }
    for (int j = 0; j < p; ++j) out[static_cast<std::size_t>(i) * p + j] = static_cast<T>(acc[static_cast<std::size_t>(j)]);
  }
  TapeT<T>* tp = detail::common_tape<T>({&a, &b});
  if (!tp) return detail::wrap({m, p}, std::move(out));
  int pa = a.node(), pb = b.node();
  auto as = a.shared_values();
  auto bs = b.shared_values();
  return tp->emit({m, p}, std::move(out), {pa, pb},
                  [pa, pb, m, k, p, as, bs](const std::vector<T>& g, TapeT<T>& t) {
                    if (pa >= 0) {
                      // ga = g . b^T
                      std::vector<T> ga(static_cast<std::size_t>(m) * k);
                      for (int i = 0; i < m; ++i)
                        for (int kk = 0; kk < k; ++kk) {
                          double acc = 0.0;
                          for (int j = 0; j < p; ++j)
                            acc += static_cast<double>(g[static_cast<std::size_t>(i) * p + j]) *
                                   static_cast<double>((*bs)[static_cast<std::size_t>(kk) * p + j]);
                          ga[static_cast<std::size_t>(i) * k + kk] = static_cast<T>(acc);
                        }
                      t.accumulate(pa, ga);
                    }
                    if (pb >= 0) {
                      // gb = a^T . g
                      std::vector<T> gb(static_cast<std::size_t>(k) * p);
                      for (int kk = 0; kk < k; ++kk)
                        for (int j = 0; j < p; ++j) {
                          double acc = 0.0;
                          for (int i = 0; i < m; ++i)
                            acc += static_cast<double>((*as)[static_cast<std::size_t>(i) * k + kk]) *
                                   static_cast<double>(g[static_cast<std::size_t>(i) * p + j]);
                          gb[static_cast<std::size_t>(kk) * p + j] = static_cast<T>(acc);
                        }
                      t.accumulate(pb, gb);
                    }
                  });
}

template <typename T>
TensorT<T> sum(const TensorT<T>& x) {
  double acc = 0.0;
  for (const T& v : x.values()) acc += static_cast<double>(v);
  std::vector<T> out{static_cast<T>(acc)};
  TapeT<T>* tp = detail::common_tape<T>({&x});
  if (!tp) return detail::wrap({1}, std::move(out));
  int px = x.node();
  std::int64_t n = x.size();
  return tp->emit({1}, std::move(out), {px},
                  [px, n](const std::vector<T>& g, TapeT<T>& t) {
                    std::vector<T> gx(static_cast<std::size_t>(n), g[0]);
                    t.accumulate(px, gx);
                  });
}

template <typename T>
TensorT<T> mean(const TensorT<T>& x) {
  return scale(sum(x), static_cast<T>(1.0 / static_cast<double>(x.size())));
}

// Column sums of a rank-2 tensor: [m x n] -> [1 x n].
template <typename T>
TensorT<T> colsum(const TensorT<T>& x) {
  detail::require_rank2(x, "colsum");
  const int m = x.rows(), n = x.cols();
  std::vector<double> acc(static_cast<std::size_t>(n), 0.0);
  const std::vector<T>& xv = x.values();
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < n; ++c)
      acc[static_cast<std::size_t>(c)] += static_cast<double>(xv[static_cast<std::size_t>(r) * n + c]);
  std::vector<T> out(static_cast<std::size_t>(n));
  for (int c = 0; c < n; ++c) out[static_cast<std::size_t>(c)] = static_cast<T>(acc[static_cast<std::size_t>(c)]);
  TapeT<T>* tp = detail::common_tape<T>({&x});
  if (!tp) return detail::wrap({1, n}, std::move(out));
  int px = x.node();
  return tp->emit({1, n}, std::move(out), {px},
                  [px, m, n](const std::vector<T>& g, TapeT<T>& t) {
                    std::vector<T> gx(static_cast<std::size_t>(m) * n);
                    for (int r = 0; r < m; ++r)
                      for (int c = 0; c < n; ++c)
                        gx[static_cast<std::size_t>(r) * n + c] = g[static_cast<std::size_t>(c)];
                    t.accumulate(px, gx);
                  });
}

// Softmax along one axis of an arbitrary-rank tensor. Exponentials and
// the normalizer run in double; each lane sums to one within 1e-6.
template <typename T>
TensorT<T> softmax(const TensorT<T>& x, int axis) {
  if (axis < 0 || axis >= x.rank()) throw ShapeError("softmax: axis out of range");
  const std::vector<int>& d = x.dims();
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= d[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= d[static_cast<std::size_t>(i)];
  const int len = d[static_cast<std::size_t>(axis)];
  std::vector<T> out(x.size());
  const std::vector<T>& xv = x.values();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * len * inner + in;
      double mx = -1e300;
      for (int l = 0; l < len; ++l)
        mx = std::max(mx, static_cast<double>(xv[static_cast<std::size_t>(base + l * inner)]));
      double denom = 0.0;
      for (int l = 0; l < len; ++l)
        denom += std::exp(static_cast<double>(xv[static_cast<std::size_t>(base + l * inner)]) - mx);
      for (int l = 0; l < len; ++l) {
        double e = std::exp(static_cast<double>(xv[static_cast<std::size_t>(base + l * inner)]) - mx);
        out[static_cast<std::size_t>(base + l * inner)] = static_cast<T>(e / denom);
      }
    }
  TapeT<T>* tp = detail::common_tape<T>({&x});
  if (!tp) return detail::wrap(x.dims(), std::move(out));
  int px = x.node();
  auto ps = std::make_shared<std::vector<T>>(out);
  return tp->emit(x.dims(), std::move(out), {px},
                  [px, outer, inner, len, ps](const std::vector<T>& g, TapeT<T>& t) {
                    std::vector<T> gx(g.size());
                    for (std::int64_t o = 0; o < outer; ++o)
                      for (std::int64_t in = 0; in < inner; ++in) {
                        const std::int64_t base = o * len * inner + in;
                        double dot = 0.0;
                        for (int l = 0; l < len; ++l) {
                          std::size_t i = static_cast<std::size_t>(base + l * inner);
                          dot += static_cast<double>(g[i]) * static_cast<double>((*ps)[i]);
                        }
                        for (int l = 0; l < len; ++l) {
                          std::size_t i = static_cast<std::size_t>(base + l * inner);
                          gx[i] = static_cast<T>(static_cast<double>((*ps)[i]) *
                                                 (static_cast<double>(g[i]) - dot));
                        }
                      }
                    t.accumulate(px, gx);
                  });
}

// ---------------------------------------------------------------------------
// Free-function helpers on plain tensors

template <typename T>
double frobenius_norm(const TensorT<T>& x) {
  double acc = 0.0;
  for (const T& v : x.values()) acc += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(acc);
}

template <typename T>
double dot_flat(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.size() != b.size()) throw ShapeError("dot_flat: sizes differ");
  double acc = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i)
    acc += static_cast<double>(a.at(i)) * static_cast<double>(b.at(i));
  return acc;
}

template <typename T>
double max_abs_diff(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.size() != b.size()) throw ShapeError("max_abs_diff: sizes differ");
  double mx = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i)
    mx = std::max(mx, std::abs(static_cast<double>(a.at(i)) - static_cast<double>(b.at(i))));
  return mx;
}

// ---------------------------------------------------------------------------
// Finite-difference oracle

// Max over coordinates of |autodiff - central difference| divided by
// max(|central difference|, 1e-8).
template <typename T>
double grad_check(const std::function<TensorT<T>(TapeT<T>&, const TensorT<T>&)>& f,
                  const TensorT<T>& x, T step) {
  if (step <= T(0)) throw ContractError("grad_check: step must be positive");
  TapeT<T> tape;
  TensorT<T> xt = tape.watch(x);
  TensorT<T> y = f(tape, xt);
  if (y.size() != 1) throw ContractError("grad_check: f must return a scalar");
  tape.backward(y);
  TensorT<T> autodiff = tape.grad(xt);

  TensorT<T> probe = x.clone();
  double worst = 0.0;
  for (std::int64_t i = 0; i < x.size(); ++i) {
    const T saved = probe.at(i);
    probe.at(i) = saved + step;
    TapeT<T> tp;
    const double up = static_cast<double>(f(tp, probe).at(0));
    probe.at(i) = saved - step;
    TapeT<T> tm;
    const double dn = static_cast<double>(f(tm, probe).at(0));
    probe.at(i) = saved;
    const double central = (up - dn) / (2.0 * static_cast<double>(step));
    const double err = std::abs(static_cast<double>(autodiff.at(i)) - central) /
                       std::max(std::abs(central), 1e-8);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace sdrc

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace latentmem {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline void check_shape_positive(const Shape& s, const char* where) {
  for (int d : s)
    if (d <= 0) throw std::invalid_argument(std::string(where) + ": non-positive dimension in " + shape_str(s));
}

template <class Real>
class Tape;

// Dense row-major tensor. A tensor participates in gradient tracking when it
// carries a node handle into a live tape; plain tensors are free values and
// flow through the same ops without recording anything.
template <class Real>
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<Real>> data;
  bool requires_grad = false;
  int node = -1;
  Tape<Real>* tape = nullptr;

  Tensor() : data(std::make_shared<std::vector<Real>>(1, Real(0))) {}

  static Tensor zeros(Shape s) {
    check_shape_positive(s, "zeros");
    Tensor t;
    t.shape = std::move(s);
    t.data = std::make_shared<std::vector<Real>>(static_cast<size_t>(shape_numel(t.shape)), Real(0));
    return t;
  }

  static Tensor full(Shape s, Real v) {
    Tensor t = zeros(std::move(s));
    std::fill(t.data->begin(), t.data->end(), v);
    return t;
  }

  static Tensor from_vector(Shape s, std::vector<Real> v) {
    check_shape_positive(s, "from_vector");
    if (static_cast<int64_t>(v.size()) != shape_numel(s))
      throw std::invalid_argument("from_vector: data length " + std::to_string(v.size()) +
                                  " does not match shape " + shape_str(s));
    Tensor t;
    t.shape = std::move(s);
    t.data = std::make_shared<std::vector<Real>>(std::move(v));
    return t;
  }

  static Tensor scalar(Real v) {
    Tensor t;
    t.shape = {};
    t.data = std::make_shared<std::vector<Real>>(1, v);
    return t;
  }

  int64_t numel() const { return static_cast<int64_t>(data->size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int rows() const { return shape.at(0); }
  int cols() const { return shape.at(1); }

  Real& at(int i) { return (*data)[static_cast<size_t>(i)]; }
  Real at(int i) const { return (*data)[static_cast<size_t>(i)]; }
  Real& at(int i, int j) { return (*data)[static_cast<size_t>(i) * shape.at(1) + j]; }
  Real at(int i, int j) const { return (*data)[static_cast<size_t>(i) * shape.at(1) + j]; }

  Real value() const {
    if (numel() != 1) throw std::logic_error("value(): tensor is not a scalar, shape " + shape_str(shape));
    return (*data)[0];
  }

  bool on_tape() const { return node >= 0 && tape != nullptr; }

  // Same storage, no tape affiliation.
  Tensor detached() const {
    Tensor t;
    t.shape = shape;
    t.data = data;
    return t;
  }

  // Fresh storage copy, no tape affiliation.
  Tensor clone() const {
    Tensor t;
    t.shape = shape;
    t.data = std::make_shared<std::vector<Real>>(*data);
    return t;
  }
};

template <class Real>
struct GradMap {
  std::unordered_map<int, Tensor<Real>> grads;

  bool contains(int node) const { return grads.count(node) > 0; }
  bool contains(const Tensor<Real>& t) const { return t.node >= 0 && contains(t.node); }

  const Tensor<Real>& at(int node) const {
    auto it = grads.find(node);
    if (it == grads.end()) throw std::out_of_range("no gradient recorded for node " + std::to_string(node));
    return it->second;
  }
  const Tensor<Real>& at(const Tensor<Real>& t) const { return at(t.node); }
};

// Append-only record of operations. Node parents always precede the node, so a
// single reverse sweep performs full reverse-mode accumulation. Nodes in the
// frozen set are never accumulated into and never propagated through.
template <class Real>
class Tape {
 public:
  // Called as fn(tape, self_node_id); reads the output gradient via
  // grad_of(self) and accumulates into parent gradient buffers.
  using BackwardFn = std::function<void(Tape&, int)>;

  Tensor<Real> leaf(const Tensor<Real>& value, bool frozen = false) {
    Tensor<Real> t;
    t.shape = value.shape;
    t.data = value.data;
    t.requires_grad = true;
    t.tape = this;
    t.node = record({}, value.shape, nullptr);
    if (frozen) frozen_.insert(t.node);
    return t;
  }

  int record(std::vector<int> parents, Shape shape, BackwardFn fn) {
    int self = static_cast<int>(nodes_.size());
    for (int p : parents)
      if (p < 0 || p >= self) throw std::logic_error("tape: parent node does not precede child");
    nodes_.push_back(NodeRec{std::move(parents), std::move(shape), std::move(fn)});
    grads_.push_back(nullptr);
    return self;
  }

  void freeze(int node_id) { frozen_.insert(node_id); }
  bool is_frozen(int node_id) const { return frozen_.count(node_id) > 0; }

  // True when backward should spend effort producing a gradient for this node.
  bool wants_grad(int node_id) const {
    return node_id >= 0 && node_id < static_cast<int>(nodes_.size()) && !is_frozen(node_id);
  }

  std::vector<Real>* grad_of(int node_id) {
    if (node_id < 0 || node_id >= static_cast<int>(grads_.size())) return nullptr;
    return grads_[static_cast<size_t>(node_id)].get();
  }

  std::vector<Real>& grad_acc(int node_id) {
    auto& slot = grads_[static_cast<size_t>(node_id)];
    if (!slot)
      slot = std::make_shared<std::vector<Real>>(
          static_cast<size_t>(shape_numel(nodes_[static_cast<size_t>(node_id)].shape)), Real(0));
    return *slot;
  }

  GradMap<Real> backward(const Tensor<Real>& loss) {
    if (!loss.on_tape() || loss.tape != this) throw std::logic_error("backward: loss is not on this tape");
    if (loss.numel() != 1)
      throw std::logic_error("backward: loss must be scalar, got shape " + shape_str(loss.shape));
    for (auto& g : grads_) g = nullptr;
    grad_acc(loss.node)[0] = Real(1);
    for (int id = loss.node; id >= 0; --id) {
      if (!grads_[static_cast<size_t>(id)]) continue;
      if (is_frozen(id)) continue;
      auto& fn = nodes_[static_cast<size_t>(id)].backward;
      if (fn) fn(*this, id);
    }
    GradMap<Real> out;
    for (int id = 0; id < static_cast<int>(nodes_.size()); ++id) {
      if (!grads_[static_cast<size_t>(id)] || is_frozen(id)) continue;
      Tensor<Real> g;
      g.shape = nodes_[static_cast<size_t>(id)].shape;
      g.data = grads_[static_cast<size_t>(id)];
      out.grads.emplace(id, std::move(g));
    }
    return out;
  }

  void reset() {
    nodes_.clear();
    grads_.clear();
    frozen_.clear();
  }

  size_t size() const { return nodes_.size(); }
  const std::vector<int>& parents_of(int node_id) const { return nodes_.at(static_cast<size_t>(node_id)).parents; }

 private:
  struct NodeRec {
    std::vector<int> parents;
    Shape shape;
    BackwardFn backward;
  };
  std::vector<NodeRec> nodes_;
  std::vector<std::shared_ptr<std::vector<Real>>> grads_;
  std::unordered_set<int> frozen_;
};

namespace detail {

template <class Real>
Tape<Real>* result_tape(std::initializer_list<const Tensor<Real>*> ins) {
  Tape<Real>* t = nullptr;
  for (const Tensor<Real>* in : ins) {
    if (!in->on_tape()) continue;
    if (t && t != in->tape) throw std::logic_error("operands belong to different tapes");
    t = in->tape;
  }
  return t;
}

template <class Real>
void check_finite(const Tensor<Real>& t, const char* op) {
#if defined(LATENTMEM_CHECK_FINITE) || !defined(NDEBUG)
  for (Real v : *t.data)
    if (!std::isfinite(static_cast<double>(v)))
      throw std::logic_error(std::string(op) + ": non-finite value in output " + shape_str(t.shape));
#else
  (void)t;
  (void)op;
#endif
}

template <class Real>
void attach(Tensor<Real>& out, Tape<Real>* tape, std::vector<int> parents,
            typename Tape<Real>::BackwardFn fn) {
  if (!tape) return;
  out.tape = tape;
  out.requires_grad = true;
  out.node = tape->record(std::move(parents), out.shape, std::move(fn));
}

inline std::vector<int> live_parents(std::initializer_list<int> ids) {
  std::vector<int> out;
  for (int id : ids)
    if (id >= 0) out.push_back(id);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

namespace detail {

// C[M x N] += A[M x K] * B[K x N]
template <class Real>
void mm_acc(const Real* a, const Real* b, Real* c, int M, int K, int N) {
  for (int i = 0; i < M; ++i) {
    const Real* arow = a + static_cast<size_t>(i) * K;
    Real* crow = c + static_cast<size_t>(i) * N;
    for (int k = 0; k < K; ++k) {
      const Real av = arow[k];
      const Real* brow = b + static_cast<size_t>(k) * N;
      for (int j = 0; j < N; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[M x N] += A[M x K] * B[N x K]^T  (rows dotted against rows)
template <class Real>
void mm_nt_acc(const Real* a, const Real* b, Real* c, int M, int K, int N) {
  for (int i = 0; i < M; ++i) {
    const Real* arow = a + static_cast<size_t>(i) * K;
    Real* crow = c + static_cast<size_t>(i) * N;
    for (int j = 0; j < N; ++j) {
      const Real* brow = b + static_cast<size_t>(j) * K;
      Real acc = 0;
      for (int k = 0; k < K; ++k) acc += arow[k] * brow[k];
      crow[j] += acc;
    }
  }
}

// C[K x N] += A[M x K]^T * B[M x N]
template <class Real>
void mm_tn_acc(const Real* a, const Real* b, Real* c, int M, int K, int N) {
  for (int i = 0; i < M; ++i) {
    const Real* arow = a + static_cast<size_t>(i) * K;
    const Real* brow = b + static_cast<size_t>(i) * N;
    for (int k = 0; k < K; ++k) {
      const Real av = arow[k];
      Real* crow = c + static_cast<size_t>(k) * N;
      for (int j = 0; j < N; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows())
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape) + " and " +
                                shape_str(b.shape));
  const int M = a.rows(), K = a.cols(), N = b.cols();
  Tensor<Real> out = Tensor<Real>::zeros({M, N});
  detail::mm_acc(a.data->data(), b.data->data(), out.data->data(), M, K, N);
  detail::check_finite(out, "matmul");
  if (Tape<Real>* tape = detail::result_tape<Real>({&a, &b})) {
    const int na = a.node, nb = b.node;
    auto da = a.data, db = b.data;
    detail::attach(out, tape, detail::live_parents({na, nb}),
                   [na, nb, da, db, M, K, N](Tape<Real>& t, int self) {
                     const Real* go = t.grad_of(self)->data();
                     if (t.wants_grad(na)) {
                       // dA = dC * B^T
                       detail::mm_nt_acc(go, db->data(), t.grad_acc(na).data(), M, N, K);
                     }
                     if (t.wants_grad(nb)) {
                       // dB = A^T * dC
                       detail::mm_tn_acc(da->data(), go, t.grad_acc(nb).data(), M, K, N);
                     }
                   });
  }
  return out;
}

// a [M x K] times b[N x K] transposed -> [M x N]
template <class Real>
Tensor<Real> matmul_nt(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.cols())
    throw std::invalid_argument("matmul_nt: incompatible shapes " + shape_str(a.shape) + " and " +
                                shape_str(b.shape));
  const int M = a.rows(), K = a.cols(), N = b.rows();
  Tensor<Real> out = Tensor<Real>::zeros({M, N});
  detail::mm_nt_acc(a.data->data(), b.data->data(), out.data->data(), M, K, N);
  detail::check_finite(out, "matmul_nt");
  if (Tape<Real>* tape = detail::result_tape<Real>({&a, &b})) {
    const int na = a.node, nb = b.node;
    auto da = a.data, db = b.data;
    detail::attach(out, tape, detail::live_parents({na, nb}),
                   [na, nb, da, db, M, K, N](Tape<Real>& t, int self) {
                     const Real* go = t.grad_of(self)->data();
                     if (t.wants_grad(na)) {
                       // dA = dC * B
                       detail::mm_acc(go, db->data(), t.grad_acc(na).data(), M, N, K);
                     }
                     if (t.wants_grad(nb)) {
                       // dB = dC^T * A
                       detail::mm_tn_acc(go, da->data(), t.grad_acc(nb).data(), M, N, K);
                     }
                   });
  }
  return out;
}

template <class Real>
Tensor<Real> transpose2d(const Tensor<Real>& x) {
  if (x.ndim() != 2) throw std::invalid_argument("transpose2d: need 2-d tensor, got " + shape_str(x.shape));
  const int R = x.rows(), C = x.cols();
  Tensor<Real> out = Tensor<Real>::zeros({C, R});
  for (int i = 0; i < R; ++i)
    for (int j = 0; j < C; ++j) out.at(j, i) = x.at(i, j);
  if (Tape<Real>* tape = detail::result_tape<Real>({&x})) {
    const int nx = x.node;
    detail::attach(out, tape, {nx}, [nx, R, C](Tape<Real>& t, int self) {
      if (!t.wants_grad(nx)) return;
      const Real* go = t.grad_of(self)->data();
      Real* gx = t.grad_acc(nx).data();
      for (int j = 0; j < C; ++j)
        for (int i = 0; i < R; ++i) gx[static_cast<size_t>(i) * C + j] += go[static_cast<size_t>(j) * R + i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

namespace detail {

template <class Real, class FwdFn, class BwdA, class BwdB>
Tensor<Real> binary_same_shape(const char* name, const Tensor<Real>& a, const Tensor<Real>& b, FwdFn fwd,
                               BwdA bwd_a, BwdB bwd_b) {
  if (a.shape != b.shape)
    throw std::invalid_argument(std::string(name) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
  Tensor<Real> out = Tensor<Real>::zeros(a.shape);
  const size_t n = a.data->size();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = fwd((*a.data)[i], (*b.data)[i]);
  check_finite(out, name);
  if (Tape<Real>* tape = result_tape<Real>({&a, &b})) {
    const int na = a.node, nb = b.node;
    auto da = a.data, db = b.data;
    attach(out, tape, live_parents({na, nb}), [na, nb, da, db, n, bwd_a, bwd_b](Tape<Real>& t, int self) {
      const Real* go = t.grad_of(self)->data();
      if (t.wants_grad(na)) {
        Real* g = t.grad_acc(na).data();
        for (size_t i = 0; i < n; ++i) g[i] += bwd_a(go[i], (*da)[i], (*db)[i]);
      }
      if (t.wants_grad(nb)) {
        Real* g = t.grad_acc(nb).data();
        for (size_t i = 0; i < n; ++i) g[i] += bwd_b(go[i], (*da)[i], (*db)[i]);
      }
    });
  }
  return out;
}

}  // namespace detail

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::binary_same_shape<Real>(
      "add", a, b, [](Real x, Real y) { return x + y; },
      [](Real g, Real, Real) { return g; }, [](Real g, Real, Real) { return g; });
}

template <class Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::binary_same_shape<Real>(
      "sub", a, b, [](Real x, Real y) { return x - y; },
      [](Real g, Real, Real) { return g; }, [](Real g, Real, Real) { return -g; });
}

template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::binary_same_shape<Real>(
      "mul", a, b, [](Real x, Real y) { return x * y; },
      [](Real g, Real, Real y) { return g * y; }, [](Real g, Real x, Real) { return g * x; });
}

// min(a, b) elementwise; ties give the gradient to a.
template <class Real>
Tensor<Real> min_elem(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::binary_same_shape<Real>(
      "min_elem", a, b, [](Real x, Real y) { return x <= y ? x : y; },
      [](Real g, Real x, Real y) { return x <= y ? g : Real(0); },
      [](Real g, Real x, Real y) { return x <= y ? Real(0) : g; });
}

template <class Real>
Tensor<Real> scale(const Tensor<Real>& x, Real c) {
  Tensor<Real> out = Tensor<Real>::zeros(x.shape);
  const size_t n = x.data->size();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*x.data)[i] * c;
  detail::check_finite(out, "scale");
  if (Tape<Real>* tape = detail::result_tape<Real>({&x})) {
    const int nx = x.node;
    detail::attach(out, tape, {nx}, [nx, c, n](Tape<Real>& t, int self) {
      if (!t.wants_grad(nx)) return;
      const Real* go = t.grad_of(self)->data();
      Real* g = t.grad_acc(nx).data();
      for (size_t i = 0; i < n; ++i) g[i] += go[i] * c;
    });
  }
  return out;
}

// x [R x C] plus a length-C bias added to every row (the only broadcast kept
// besides scalar product).
template <class Real>
Tensor<Real> add_bias_row(const Tensor<Real>& x, const Tensor<Real>& bias) {
  if (x.ndim() != 2 || bias.numel() != x.cols())
    throw std::invalid_argument("add_bias_row: shapes " + shape_str(x.shape) + " and " + shape_str(bias.shape));
  const int R = x.rows(), C = x.cols();
  Tensor<Real> out = Tensor<Real>::zeros(x.shape);
  for (int i = 0; i < R; ++i)
    for (int j = 0; j < C; ++j) out.at(i, j) = x.at(i, j) + (*bias.data)[static_cast<size_t>(j)];
  detail::check_finite(out, "add_bias_row");
  if (Tape<Real>* tape = detail::result_tape<Real>({&x, &bias})) {
    const int nx = x.node, nb = bias.node;
    detail::attach(out, tape, detail::live_parents({nx, nb}), [nx, nb, R, C](Tape<Real>& t, int self) {
      const Real* go = t.grad_of(self)->data();
      if (t.wants_grad(nx)) {
        Real* g = t.grad_acc(nx).data();
        for (size_t i = 0; i < static_cast<size_t>(R) * C; ++i) g[i] += go[i];
      }
      if (t.wants_grad(nb)) {
        Real* g = t.grad_acc(nb).data();
        for (int i = 0; i < R; ++i)
          for (int j = 0; j < C; ++j) g[j] += go[static_cast<size_t>(i) * C + j];
      }
    });
  }
  return out;
}

namespace detail {
template <class Real>
inline Real gelu_fwd(Real x) {
  const Real k = Real(0.7978845608028654);  // sqrt(2/pi)
  const Real u = k * (x + Real(0.044715) * x * x * x);
  return Real(0.5) * x * (Real(1) + std::tanh(u));
}
template <class Real>
inline Real gelu_bwd(Real x) {
  const Real k = Real(0.7978845608028654);
  const Real u = k * (x + Real(0.044715) * x * x * x);
  const Real th = std::tanh(u);
  const Real du = k * (Real(1) + Real(3) * Real(0.044715) * x * x);
  return Real(0.5) * (Real(1) + th) + Real(0.5) * x * (Real(1) - th * th) * du;
}
}  // namespace detail

// tanh-approximate GELU (the activation used across the project)
template <class Real>
Tensor<Real> gelu(const Tensor<Real>& x) {
  Tensor<Real> out = Tensor<Real>::zeros(x.shape);
  const size_t n = x.data->size();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = detail::gelu_fwd((*x.data)[i]);
  detail::check_finite(out, "gelu");
  if (Tape<Real>* tape = detail::result_tape<Real>({&x})) {
    const int nx = x.node;
    auto dx = x.data;
    detail::attach(out, tape, {nx}, [nx, dx, n](Tape<Real>& t, int self) {
      if (!t.wants_grad(nx)) return;
      const Real* go = t.grad_of(self)->data();
      Real* g = t.grad_acc(nx).data();
      for (size_t i = 0; i < n; ++i) g[i] += go[i] * detail::gelu_bwd((*dx)[i]);
    });
  }
  return out;
}

template <class Real>
Tensor<Real> exp_elem(const Tensor<Real>& x) {
  Tensor<Real> out = Tensor<Real>::zeros(x.shape);
  const size_t n = x.data->size();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = std::exp((*x.data)[i]);
  detail::check_finite(out, "exp_elem");
  if (Tape<Real>* tape = detail::result_tape<Real>({&x})) {
    const int nx = x.node;
    auto dout = out.data;
    detail::attach(out, tape, {nx}, [nx, dout, n](Tape<Real>& t, int self) {
      if (!t.wants_grad(nx)) return;
      const Real* go = t.grad_of(self)->data();
      Real* g = t.grad_acc(nx).data();
      for (size_t i = 0; i < n; ++i) g[i] += go[i] * (*dout)[i];
    });
  }
  return out;
}

// gradient passes only where lo < x < hi
template <class Real>
Tensor<Real> clamp(const Tensor<Real>& x, Real lo, Real hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
  Tensor<Real> out = Tensor<Real>::zeros(x.shape);
  const size_t n = x.data->size();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = std::min(hi, std::max(lo, (*x.data)[i]));
  if (Tape<Real>* tape = detail::result_tape<Real>({&x})) {
    const int nx = x.node;
    auto dx = x.data;
    detail::attach(out, tape, {nx}, [nx, dx, lo, hi, n](Tape<Real>& t, int self) {
      if (!t.wants_grad(nx)) return;
      const Real* go = t.grad_of(self)->data();
      Real* g = t.grad_acc(nx).data();
      for (size_t i = 0; i < n; ++i)
        if ((*dx)[i] > lo && (*dx)[i] < hi) g[i] += go[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// normalization and softmax family
// ---------------------------------------------------------------------------

// Normalizes the last dimension to zero mean / unit variance, then applies an
// optional elementwise affine (gain, bias of length D).
template <class Real>
Tensor<Real> layer_norm_lastdim(const Tensor<Real>& x, const Tensor<Real>* gain = nullptr,
                                const Tensor<Real>* bias = nullptr, Real eps = Real(1e-5)) {
  if (x.ndim() < 1) throw std::invalid_argument("layer_norm_lastdim: need at least 1-d input");
  const int D = x.shape.back();
  const int R = static_cast<int>(x.numel() / D);
  const bool affine = gain != nullptr && bias != nullptr;
  if ((gain == nullptr) != (bias == nullptr))
    throw std::invalid_argument("layer_norm_lastdim: gain and bias must be given together");
  if (affine && (gain->numel() != D || bias->numel() != D))
    throw std::invalid_argument("layer_norm_lastdim: affine params must have length " + std::to_string(D));

  Tensor<Real> out = Tensor<Real>::zeros(x.shape);
  auto xhat = std::make_shared<std::vector<Real>>(x.data->size());
  auto inv_std = std::make_shared<std::vector<Real>>(static_cast<size_t>(R));
  for (int r = 0; r < R; ++r) {
    const Real* row = x.data->data() + static_cast<size_t>(r) * D;
    Real mu = 0;
    for (int j = 0; j < D; ++j) mu += row[j];
    mu /= Real(D);
    Real var = 0;
    for (int j = 0; j < D; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= Real(D);
    const Real is = Real(1) / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(r)] = is;
    Real* orow = out.data->data() + static_cast<size_t>(r) * D;
    Real* hrow = xhat->data() + static_cast<size_t>(r) * D;
    for (int j = 0; j < D; ++j) {
      hrow[j] = (row[j] - mu) * is;
      orow[j] = affine ? hrow[j] * (*gain->data)[static_cast<size_t>(j)] + (*bias->data)[static_cast<size_t>(j)]
                       : hrow[j];
    }
  }
  detail::check_finite(out, "layer_norm_lastdim");
  Tape<Real>* tape = affine ? detail::result_tape<Real>({&x, gain, bias}) : detail::result_tape<Real>({&x});
  if (tape) {
    const int nx = x.node;
    const int ng = affine ? gain->node : -1;
    const int nb = affine ? bias->node : -1;
    auto dgain = affine ? gain->data : nullptr;
    detail::attach(out, tape, detail::live_parents({nx, ng, nb}),
                   [nx, ng, nb, xhat, inv_std, dgain, R, D](Tape<Real>& t, int self) {
                     const Real* go = t.grad_of(self)->data();
                     if (ng >= 0 && t.wants_grad(ng)) {
                       Real* g = t.grad_acc(ng).data();
                       for (int r = 0; r < R; ++r)
                         for (int j = 0; j < D; ++j)
                           g[j] += go[static_cast<size_t>(r) * D + j] * (*xhat)[static_cast<size_t>(r) * D + j];
                     }
                     if (nb >= 0 && t.wants_grad(nb)) {
                       Real* g = t.grad_acc(nb).data();
                       for (int r = 0; r < R; ++r)
                         for (int j = 0; j < D; ++j) g[j] += go[static_cast<size_t>(r) * D + j];
                     }
                     if (t.wants_grad(nx)) {
                       Real* g = t.grad_acc(nx).data();
                       std::vector<Real> dh(static_cast<size_t>(D));
                       for (int r = 0; r < R; ++r) {
                         const Real* grow = go + static_cast<size_t>(r) * D;
                         const Real* hrow = xhat->data() + static_cast<size_t>(r) * D;
                         Real m1 = 0, m2 = 0;
                         for (int j = 0; j < D; ++j) {
                           dh[static_cast<size_t>(j)] =
                               dgain ? grow[j] * (*dgain)[static_cast<size_t>(j)] : grow[j];
                           m1 += dh[static_cast<size_t>(j)];
                           m2 += dh[static_cast<size_t>(j)] * hrow[j];
                         }
                         m1 /= Real(D);
                         m2 /= Real(D);
                         const Real is = (*inv_std)[static_cast<size_t>(r)];
                         Real* gx = g + static_cast<size_t>(r) * D;
                         for (int j = 0; j < D; ++j)
                           gx[j] += is * (dh[static_cast<size_t>(j)] - m1 - hrow[j] * m2);
                       }
                     }
                   });
  }
  return out;
}

namespace detail {
// stable per-row softmax into `out`, row length D
template <class Real>
void softmax_row(const Real* row, Real* out, int D) {
  Real mx = row[0];
  for (int j = 1; j < D; ++j) mx = std::max(mx, row[j]);
  Real sum = 0;
  for (int j = 0; j < D; ++j) {
    out[j] = std::exp(row[j] - mx);
    sum += out[j];
  }
  const Real inv = Real(1) / sum;
  for (int j = 0; j < D; ++j) out[j] *= inv;
}
}  // namespace detail

template <class Real>
Tensor<Real> softmax_lastdim(const Tensor<Real>& x) {
  if (x.ndim() < 1 || x.shape.back() < 1)
    throw std::invalid_argument("softmax_lastdim: need last dimension >= 1");
  const int D = x.shape.back();
  const int R = static_cast<int>(x.numel() / D);
  Tensor<Real> out = Tensor<Real>::zeros(x.shape);
  for (int r = 0; r < R; ++r)
    detail::softmax_row(x.data->data() + static_cast<size_t>(r) * D,
                        out.data->data() + static_cast<size_t>(r) * D, D);
  detail::check_finite(out, "softmax_lastdim");
  if (Tape<Real>* tape = detail::result_tape<Real>({&x})) {
    const int nx = x.node;
    auto p = out.data;
    detail::attach(out, tape, {nx}, [nx, p, R, D](Tape<Real>& t, int self) {
      if (!t.wants_grad(nx)) return;
      const Real* go = t.grad_of(self)->data();
      Real* g = t.grad_acc(nx).data();
      for (int r = 0; r < R; ++r) {
        const Real* prow = p->data() + static_cast<size_t>(r) * D;
        const Real* grow = go + static_cast<size_t>(r) * D;
        Real dot = 0;
        for (int j = 0; j < D; ++j) dot += grow[j] * prow[j];
        Real* gx = g + static_cast<size_t>(r) * D;
        for (int j = 0; j < D; ++j) gx[j] += prow[j] * (grow[j] - dot);
      }
    });
  }
  return out;
}

template <class Real>
Tensor<Real> log_softmax_lastdim(const Tensor<Real>& x) {
  if (x.ndim() < 1 || x.shape.back() < 1)
    throw std::invalid_argument("log_softmax_lastdim: need last dimension >= 1");
  const int D = x.shape.back();
  const int R = static_cast<int>(x.numel() / D);
  Tensor<Real> out = Tensor<Real>::zeros(x.shape);
  for (int r = 0; r < R; ++r) {
    const Real* row = x.data->data() + static_cast<size_t>(r) * D;
    Real* orow = out.data->data() + static_cast<size_t>(r) * D;
    Real mx = row[0];
    for (int j = 1; j < D; ++j) mx = std::max(mx, row[j]);
    Real sum = 0;
    for (int j = 0; j < D; ++j) sum += std::exp(row[j] - mx);
    const Real lse = mx + std::log(sum);
    for (int j = 0; j < D; ++j) orow[j] = row[j] - lse;
  }
  detail::check_finite(out, "log_softmax_lastdim");
  if (Tape<Real>* tape = detail::result_tape<Real>({&x})) {
    const int nx = x.node;
    auto lp = out.data;
    detail::attach(out, tape, {nx}, [nx, lp, R, D](Tape<Real>& t, int self) {
      if (!t.wants_grad(nx)) return;
      const Real* go = t.grad_of(self)->data();
      Real* g = t.grad_acc(nx).data();
      for (int r = 0; r < R; ++r) {
        const Real* lrow = lp->data() + static_cast<size_t>(r) * D;
        const Real* grow = go + static_cast<size_t>(r) * D;
        Real gsum = 0;
        for (int j = 0; j < D; ++j) gsum += grow[j];
        Real* gx = g + static_cast<size_t>(r) * D;
        for (int j = 0; j < D; ++j) gx[j] += grow[j] - std::exp(lrow[j]) * gsum;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// gather / scatter style shape ops
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> embedding_gather(const Tensor<Real>& table, const std::vector<int>& ids) {
  if (table.ndim() != 2) throw std::invalid_argument("embedding_gather: table must be 2-d");
  const int V = table.rows(), D = table.cols();
  const int n = static_cast<int>(ids.size());
  if (n == 0) throw std::invalid_argument("embedding_gather: empty id list");
  for (int id : ids)
    if (id < 0 || id >= V)
      throw std::out_of_range("embedding_gather: id " + std::to_string(id) + " out of range [0," +
                              std::to_string(V) + ")");
  Tensor<Real> out = Tensor<Real>::zeros({n, D});
  for (int i = 0; i < n; ++i)
    std::copy_n(table.data->data() + static_cast<size_t>(ids[static_cast<size_t>(i)]) * D, D,
                out.data->data() + static_cast<size_t>(i) * D);
  if (Tape<Real>* tape = detail::result_tape<Real>({&table})) {
    const int nt = table.node;
    detail::attach(out, tape, {nt}, [nt, ids, D, n](Tape<Real>& t, int self) {
      if (!t.wants_grad(nt)) return;
      const Real* go = t.grad_of(self)->data();
      Real* g = t.grad_acc(nt).data();
      for (int i = 0; i < n; ++i) {
        Real* grow = g + static_cast<size_t>(ids[static_cast<size_t>(i)]) * D;
        const Real* orow = go + static_cast<size_t>(i) * D;
        for (int j = 0; j < D; ++j) grow[j] += orow[j];
      }
    });
  }
  return out;
}

template <class Real>
Tensor<Real> concat_rows(const std::vector<Tensor<Real>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty part list");
  const int C = parts.front().cols();
  int R = 0;
  for (const auto& p : parts) {
    if (p.ndim() != 2 || p.cols() != C)
      throw std::invalid_argument("concat_rows: column mismatch, expected " + std::to_string(C) + " got " +
                                  shape_str(p.shape));
    R += p.rows();
  }
  Tensor<Real> out = Tensor<Real>::zeros({R, C});
  int r0 = 0;
  for (const auto& p : parts) {
    std::copy_n(p.data->data(), p.data->size(), out.data->data() + static_cast<size_t>(r0) * C);
    r0 += p.rows();
  }
  std::vector<const Tensor<Real>*> ptrs;
  Tape<Real>* tape = nullptr;
  for (const auto& p : parts) {
    if (!p.on_tape()) continue;
    if (tape && tape != p.tape) throw std::logic_error("concat_rows: operands belong to different tapes");
    tape = p.tape;
  }
  if (tape) {
    std::vector<int> nodes, offsets, sizes;
    std::vector<int> parents;
    int off = 0;
    for (const auto& p : parts) {
      nodes.push_back(p.node);
      offsets.push_back(off);
      sizes.push_back(static_cast<int>(p.numel()));
      off += static_cast<int>(p.numel());
      if (p.node >= 0) parents.push_back(p.node);
    }
    detail::attach(out, tape, parents, [nodes, offsets, sizes](Tape<Real>& t, int self) {
      const Real* go = t.grad_of(self)->data();
      for (size_t k = 0; k < nodes.size(); ++k) {
        if (nodes[k] < 0 || !t.wants_grad(nodes[k])) continue;
        Real* g = t.grad_acc(nodes[k]).data();
        for (int i = 0; i < sizes[k]; ++i) g[i] += go[offsets[k] + i];
      }
    });
  }
  return out;
}

template <class Real>
Tensor<Real> concat_rows(const Tensor<Real>& a, const Tensor<Real>& b) {
  return concat_rows(std::vector<Tensor<Real>>{a, b});
}

template <class Real>
Tensor<Real> slice_rows(const Tensor<Real>& x, int r0, int r1) {
  if (x.ndim() != 2 || r0 < 0 || r1 > x.rows() || r0 >= r1)
    throw std::invalid_argument("slice_rows: invalid range [" + std::to_string(r0) + "," + std::to_string(r1) +
                                ") for " + shape_str(x.shape));
  const int C = x.cols(), R = r1 - r0;
  Tensor<Real> out = Tensor<Real>::zeros({R, C});
  std::copy_n(x.data->data() + static_cast<size_t>(r0) * C, static_cast<size_t>(R) * C, out.data->data());
  if (Tape<Real>* tape = detail::result_tape<Real>({&x})) {
    const int nx = x.node;
    detail::attach(out, tape, {nx}, [nx, r0, R, C](Tape<Real>& t, int self) {
      if (!t.wants_grad(nx)) return;
      const Real* go = t.grad_of(self)->data();
      Real* g = t.grad_acc(nx).data() + static_cast<size_t>(r0) * C;
      for (size_t i = 0; i < static_cast<size_t>(R) * C; ++i) g[i] += go[i];
    });
  }
  return out;
}

template <class Real>
Tensor<Real> slice_cols(const Tensor<Real>& x, int c0, int c1) {
  if (x.ndim() != 2 || c0 < 0 || c1 > x.cols() || c0 >= c1)
    throw std::invalid_argument("slice_cols: invalid range [" + std::to_string(c0) + "," + std::to_string(c1) +
                                ") for " + shape_str(x.shape));
  const int R = x.rows(), C = x.cols(), W = c1 - c0;
  Tensor<Real> out = Tensor<Real>::zeros({R, W});
  for (int i = 0; i < R; ++i)
    std::copy_n(x.data->data() + static_cast<size_t>(i) * C + c0, W,
                out.data->data() + static_cast<size_t>(i) * W);
  if (Tape<Real>* tape = detail::result_tape<Real>({&x})) {
    const int nx = x.node;
    detail::attach(out, tape, {nx}, [nx, c0, R, C, W](Tape<Real>& t, int self) {
      if (!t.wants_grad(nx)) return;
      const Real* go = t.grad_of(self)->data();
      Real* g = t.grad_acc(nx).data();
      for (int i = 0; i < R; ++i)
        for (int j = 0; j < W; ++j) g[static_cast<size_t>(i) * C + c0 + j] += go[static_cast<size_t>(i) * W + j];
    });
  }
  return out;
}

template <class Real>
Tensor<Real> concat_cols(const std::vector<Tensor<Real>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty part list");
  const int R = parts.front().rows();
  int C = 0;
  for (const auto& p : parts) {
    if (p.ndim() != 2 || p.rows() != R)
      throw std::invalid_argument("concat_cols: row mismatch, expected " + std::to_string(R) + " got " +
                                  shape_str(p.shape));
    C += p.cols();
  }
  Tensor<Real> out = Tensor<Real>::zeros({R, C});
  int c0 = 0;
  for (const auto& p : parts) {
    const int W = p.cols();
    for (int i = 0; i < R; ++i)
      std::copy_n(p.data->data() + static_cast<size_t>(i) * W, W,
                  out.data->data() + static_cast<size_t>(i) * C + c0);
    c0 += W;
  }
  Tape<Real>* tape = nullptr;
  for (const auto& p : parts) {
    if (!p.on_tape()) continue;
    if (tape && tape != p.tape) throw std::logic_error("concat_cols: operands belong to different tapes");
    tape = p.tape;
  }
  if (tape) {
    std::vector<int> nodes, col0, widths;
    std::vector<int> parents;
    int off = 0;
    for (const auto& p : parts) {
      nodes.push_back(p.node);
      col0.push_back(off);
      widths.push_back(p.cols());
      off += p.cols();
      if (p.node >= 0) parents.push_back(p.node);
    }
    detail::attach(out, tape, parents, [nodes, col0, widths, R, C](Tape<Real>& t, int self) {
      const Real* go = t.grad_of(self)->data();
      for (size_t k = 0; k < nodes.size(); ++k) {
        if (nodes[k] < 0 || !t.wants_grad(nodes[k])) continue;
        Real* g = t.grad_acc(nodes[k]).data();
        const int W = widths[k];
        for (int i = 0; i < R; ++i)
          for (int j = 0; j < W; ++j)
            g[static_cast<size_t>(i) * W + j] += go[static_cast<size_t>(i) * C + col0[k] + j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions and losses
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> sum(const Tensor<Real>& x) {
  Real s = 0;
  for (Real v : *x.data) s += v;
  Tensor<Real> out = Tensor<Real>::scalar(s);
  if (Tape<Real>* tape = detail::result_tape<Real>({&x})) {
    const int nx = x.node;
    const size_t n = x.data->size();
    detail::attach(out, tape, {nx}, [nx, n](Tape<Real>& t, int self) {
      if (!t.wants_grad(nx)) return;
      const Real go = (*t.grad_of(self))[0];
      Real* g = t.grad_acc(nx).data();
      for (size_t i = 0; i < n; ++i) g[i] += go;
    });
  }
  return out;
}

template <class Real>
Tensor<Real> mean(const Tensor<Real>& x) {
  const size_t n = x.data->size();
  Real s = 0;
  for (Real v : *x.data) s += v;
  Tensor<Real> out = Tensor<Real>::scalar(s / Real(n));
  if (Tape<Real>* tape = detail::result_tape<Real>({&x})) {
    const int nx = x.node;
    detail::attach(out, tape, {nx}, [nx, n](Tape<Real>& t, int self) {
      if (!t.wants_grad(nx)) return;
      const Real go = (*t.grad_of(self))[0] / Real(n);
      Real* g = t.grad_acc(nx).data();
      for (size_t i = 0; i < n; ++i) g[i] += go;
    });
  }
  return out;
}

// out[r] = x[r, idx[r]]
template <class Real>
Tensor<Real> pick_per_row(const Tensor<Real>& x, const std::vector<int>& idx) {
  if (x.ndim() != 2 || static_cast<int>(idx.size()) != x.rows())
    throw std::invalid_argument("pick_per_row: need one index per row of " + shape_str(x.shape));
  const int R = x.rows(), C = x.cols();
  for (int i : idx)
    if (i < 0 || i >= C) throw std::out_of_range("pick_per_row: column index " + std::to_string(i) + " out of range");
  Tensor<Real> out = Tensor<Real>::zeros({R});
  for (int r = 0; r < R; ++r) (*out.data)[static_cast<size_t>(r)] = x.at(r, idx[static_cast<size_t>(r)]);
  if (Tape<Real>* tape = detail::result_tape<Real>({&x})) {
    const int nx = x.node;
    detail::attach(out, tape, {nx}, [nx, idx, R, C](Tape<Real>& t, int self) {
      if (!t.wants_grad(nx)) return;
      const Real* go = t.grad_of(self)->data();
      Real* g = t.grad_acc(nx).data();
      for (int r = 0; r < R; ++r) g[static_cast<size_t>(r) * C + idx[static_cast<size_t>(r)]] += go[r];
    });
  }
  return out;
}

// mean over rows of -log softmax(logits)[r, target_r]
template <class Real>
Tensor<Real> cross_entropy_from_logits(const Tensor<Real>& logits, const std::vector<int>& targets) {
  if (logits.ndim() != 2 || static_cast<int>(targets.size()) != logits.rows())
    throw std::invalid_argument("cross_entropy_from_logits: need one target per row of " +
                                shape_str(logits.shape));
  const int T = logits.rows(), V = logits.cols();
  for (int t : targets)
    if (t < 0 || t >= V)
      throw std::out_of_range("cross_entropy_from_logits: target " + std::to_string(t) + " out of range [0," +
                              std::to_string(V) + ")");
  auto probs = std::make_shared<std::vector<Real>>(logits.data->size());
  Real loss = 0;
  for (int r = 0; r < T; ++r) {
    const Real* row = logits.data->data() + static_cast<size_t>(r) * V;
    Real* prow = probs->data() + static_cast<size_t>(r) * V;
    detail::softmax_row(row, prow, V);
    const Real p = prow[targets[static_cast<size_t>(r)]];
    loss -= std::log(std::max(p, Real(1e-30)));
  }
  loss /= Real(T);
  Tensor<Real> out = Tensor<Real>::scalar(loss);
  detail::check_finite(out, "cross_entropy_from_logits");
  if (Tape<Real>* tape = detail::result_tape<Real>({&logits})) {
    const int nl = logits.node;
    detail::attach(out, tape, {nl}, [nl, probs, targets, T, V](Tape<Real>& t, int self) {
      if (!t.wants_grad(nl)) return;
      const Real go = (*t.grad_of(self))[0] / Real(T);
      Real* g = t.grad_acc(nl).data();
      for (int r = 0; r < T; ++r) {
        const Real* prow = probs->data() + static_cast<size_t>(r) * V;
        Real* grow = g + static_cast<size_t>(r) * V;
        for (int j = 0; j < V; ++j) grow[j] += go * prow[j];
        grow[targets[static_cast<size_t>(r)]] -= go;
      }
    });
  }
  return out;
}

}  // namespace latentmem

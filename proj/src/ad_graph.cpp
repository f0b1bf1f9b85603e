#include "betail/ad/graph.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <type_traits>
#include <limits>
#include <memory>
#include <sstream>

namespace betail::ad {

// ---- Shape ----------------------------------------------------------------

Shape::Shape(std::initializer_list<int> dims) : Shape(std::span<const int>(dims.begin(), dims.size())) {}

Shape::Shape(std::span<const int> dims) {
  if (dims.size() > 3) throw TensorError("Shape: rank " + std::to_string(dims.size()) + " > 3");
  rank_ = static_cast<int>(dims.size());
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (dims[i] <= 0) throw TensorError("Shape: non-positive dimension");
    dims_[i] = dims[i];
  }
}

std::size_t Shape::numel() const {
  std::size_t n = 1;
  for (int i = 0; i < rank_; ++i) n *= static_cast<std::size_t>(dims_[i]);
  return n;
}

std::string Shape::str() const {
  std::ostringstream os;
  os << '(';
  for (int i = 0; i < rank_; ++i) os << (i ? "," : "") << dims_[i];
  os << ')';
  return os.str();
}

namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<Mat<T>>;
template <typename T>
using CMapM = Eigen::Map<const Mat<T>>;

template <typename T>
CMapM<T> as_mat(const Tensor<T>& t) {
  return CMapM<T>(t.data(), static_cast<Eigen::Index>(t.rows()), t.cols());
}
template <typename T>
MapM<T> as_mat(Tensor<T>& t) {
  return MapM<T>(t.data(), static_cast<Eigen::Index>(t.rows()), t.cols());
}

[[noreturn]] void fail(std::string_view op, const std::string& what) {
  throw TensorError(std::string(op) + ": " + what);
}

std::string shapes(const Shape& a, const Shape& b) { return a.str() + " vs " + b.str(); }

template <typename T>
Graph<T>* graph_of(Var<T> a) {
  if (!a.valid()) throw TensorError("op on an invalid Var");
  return a.graph;
}

template <typename T>
Graph<T>* graph_of(Var<T> a, Var<T> b) {
  auto* g = graph_of(a);
  if (graph_of(b) != g) throw TensorError("op mixes Vars from different graphs");
  return g;
}

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  T* d = dst.data();
  const T* s = src.data();
  for (std::size_t i = 0, n = dst.size(); i < n; ++i) d[i] += s[i];
}

// Elementwise unary op with derivative dy/dx = df(x, y).
template <typename T, typename F, typename DF>
Var<T> unary(std::string_view op, Var<T> a, F f, DF df,
             typename Graph<T>::TapedFn taped = {}) {
  auto* g = graph_of(a);
  const auto& x = a.value();
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  const int ia = a.id;
  return g->emit(
      op, std::move(y), {ia},
      [ia, df](Graph<T>& gr, int self) {
        if (!gr.needs_grad(ia)) return;
        const auto& gy = gr.adj(self);
        const auto& xv = gr.value(ia);
        const auto& yv = gr.value(self);
        auto& gx = gr.adj(ia);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * df(xv[i], yv[i]);
      },
      std::move(taped));
}

template <typename T>
Var<T> self_var(Graph<T>& g, int id) {
  return Var<T>{&g, id};
}

template <typename T>
Var<T> reshape_var(Var<T> a, Shape shape);

template <typename T>
Var<T> flat2d(Var<T> a) {
  if (a.shape().rank() <= 2) return a;
  const Shape s{static_cast<int>(a.shape().rows()), a.shape().cols()};
  return reshape_var(a, s);
}

template <typename T>
Var<T> reshape_var(Var<T> a, Shape shape) {
  auto* g = graph_of(a);
  const auto& av = a.value();
  if (av.size() != shape.numel()) fail("reshape", shapes(av.shape(), shape));
  const int ia = a.id;
  const Shape in_shape = av.shape();
  return g->emit(
      "reshape", av.reshaped(shape), {ia},
      [ia](Graph<T>& gr, int self) {
        if (!gr.needs_grad(ia)) return;
        add_into(gr.adj(ia), gr.adj(self));
      },
      [in_shape](Graph<T>&, int, Var<T> gy, const std::vector<bool>& need) {
        std::vector<Var<T>> out(1);
        if (need[0]) out[0] = reshape_var(gy, in_shape);
        return out;
      });
}

// Exponent-bit test; vectorizes where a std::isfinite loop does not.
template <typename T>
bool all_finite(const Tensor<T>& t) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  constexpr U mask = sizeof(T) == 4 ? U(0x7f800000u) : U(0x7ff0000000000000ull);
  const T* p = t.data();
  U bad = 0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    U bits;
    std::memcpy(&bits, p + i, sizeof(T));
    bad |= static_cast<U>((bits & mask) == mask);
  }
  return bad == 0;
}

// Adds the n-element block `b` onto every consecutive block of `a`.
template <typename T>
void add_blocks(T* a, std::size_t total, const T* b, std::size_t n) {
  for (std::size_t off = 0; off < total; off += n) {
    for (std::size_t j = 0; j < n; ++j) a[off + j] += b[j];
  }
}

// Accumulates every consecutive n-element block of `src` into `acc`.
template <typename T>
void add_blocks_rev(T* acc, const T* src, std::size_t total, std::size_t n) {
  for (std::size_t off = 0; off < total; off += n) {
    for (std::size_t j = 0; j < n; ++j) acc[j] += src[off + j];
  }
}

// Sum of `a` over leading blocks down to `target` (trailing-dims shape).
template <typename T>
Var<T> sum_leading(Var<T> a, Shape target) {
  auto* g = graph_of(a);
  const auto& av = a.value();
  const std::size_t n = target.numel();
  Tensor<T> out(target);
  add_blocks_rev(out.data(), av.data(), av.size(), n);
  const int ia = a.id;
  return g->emit("sum_leading", std::move(out), {ia}, [ia, n](Graph<T>& gr, int self) {
    if (!gr.needs_grad(ia)) return;
    const auto& gy = gr.adj(self);
    auto& ga = gr.adj(ia);
    add_blocks(ga.data(), ga.size(), gy.data(), n);
  });
}

template <typename T>
Var<T> broadcast_scalar(Var<T> s, const Shape& shape) {
  auto* g = graph_of(s);
  return add_broadcast(g->constant(Tensor<T>(shape)), s);
}

template <typename T>
T softplus_scalar(T x) {
  return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace

// ---- Graph ----------------------------------------------------------------

template <typename T>
Var<T> Graph<T>::emit(std::string_view op, Tensor<T> value, std::vector<int> inputs,
                      BackwardFn backward, TapedFn taped) {
  if (!all_finite(value)) {
    std::string msg = std::string(op) + ": non-finite output of shape " + value.shape().str();
    if (!inputs.empty()) {
      msg += " from inputs";
      for (int id : inputs) msg += " " + nodes_[static_cast<std::size_t>(id)].value.shape().str();
    }
    throw TensorError(msg);
  }
  Node n;
  n.op = op;
  n.value = std::move(value);
  if (grad_enabled_) {
    for (int id : inputs) n.needs_grad = n.needs_grad || nodes_[static_cast<std::size_t>(id)].needs_grad;
  }
  if (n.needs_grad) {
    n.backward = std::move(backward);
    n.taped = std::move(taped);
  }
  n.inputs = std::move(inputs);
  nodes_.push_back(std::move(n));
  return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var<T> Graph<T>::constant(Tensor<T> value) {
  return emit("constant", std::move(value), {}, {});
}

template <typename T>
Var<T> Graph<T>::input(Tensor<T> value) {
  auto v = emit("input", std::move(value), {}, {});
  nodes_.back().needs_grad = grad_enabled_;
  return v;
}

template <typename T>
Var<T> Graph<T>::param(const Parameter<T>& p) {
  auto v = emit("param", p.value, {}, {});
  nodes_.back().needs_grad = grad_enabled_;
  if (grad_enabled_) nodes_.back().param = &p;
  return v;
}

template <typename T>
Tensor<T>& Graph<T>::adj(int id) {
  auto& a = adj_[static_cast<std::size_t>(id)];
  if (a.empty()) a = Tensor<T>(nodes_[static_cast<std::size_t>(id)].value.shape());
  return a;
}

template <typename T>
bool Graph<T>::has_adj(int id) const {
  return !adj_[static_cast<std::size_t>(id)].empty();
}

template <typename T>
void Graph<T>::sweep(int root) {
  for (int i = root; i >= 0; --i) {
    const auto& n = nodes_[static_cast<std::size_t>(i)];
    if (n.needs_grad && n.backward && has_adj(i)) n.backward(*this, i);
  }
}

template <typename T>
void Graph<T>::backward(Var<T> loss) {
  if (loss.graph != this) throw TensorError("backward: loss is not on this graph");
  if (value(loss.id).size() != 1) {
    throw TensorError("backward: loss of shape " + value(loss.id).shape().str() + " is not scalar");
  }
  adj_.assign(nodes_.size(), Tensor<T>());
  if (!needs_grad(loss.id)) return;
  adj(loss.id).fill(T(1));
  sweep(loss.id);
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    auto& n = nodes_[i];
    if (n.param != nullptr && has_adj(static_cast<int>(i))) {
      if (n.param->grad.shape() != n.value.shape()) n.param->zero_grad();
      add_into(n.param->grad, adj_[i]);
    }
  }
  adj_.clear();
}

template <typename T>
Tensor<T> Graph<T>::grad_wrt_input(Var<T> output, Var<T> in) {
  if (output.graph != this || in.graph != this) throw TensorError("grad_wrt_input: foreign Var");
  adj_.assign(nodes_.size(), Tensor<T>());
  Tensor<T> result(value(in.id).shape());
  if (needs_grad(output.id)) {
    adj(output.id).fill(T(1));
    sweep(output.id);
    if (has_adj(in.id)) result = adj_[static_cast<std::size_t>(in.id)];
  }
  adj_.clear();
  return result;
}

template <typename T>
Var<T> Graph<T>::grad_wrt_input_taped(Var<T> output, Var<T> in) {
  if (output.graph != this || in.graph != this) throw TensorError("grad_wrt_input_taped: foreign Var");
  if (!grad_enabled_) throw TensorError("grad_wrt_input_taped: graph has gradients disabled");
  const int out = output.id;
  const int root = in.id;
  std::vector<bool> dep(static_cast<std::size_t>(out) + 1, false);
  dep[static_cast<std::size_t>(root)] = true;
  for (int i = root + 1; i <= out; ++i) {
    for (int j : nodes_[static_cast<std::size_t>(i)].inputs) {
      if (dep[static_cast<std::size_t>(j)]) {
        dep[static_cast<std::size_t>(i)] = true;
        break;
      }
    }
  }
  if (!dep[static_cast<std::size_t>(out)]) return constant(Tensor<T>(value(root).shape()));

  std::vector<Var<T>> adjv(static_cast<std::size_t>(out) + 1);
  adjv[static_cast<std::size_t>(out)] = constant(Tensor<T>(value(out).shape(), T(1)));
  for (int i = out; i > root; --i) {
    if (!dep[static_cast<std::size_t>(i)] || !adjv[static_cast<std::size_t>(i)].valid()) continue;
    // Copy what we need: emitting nodes below may reallocate nodes_.
    const std::vector<int> inputs = nodes_[static_cast<std::size_t>(i)].inputs;
    TapedFn fn = nodes_[static_cast<std::size_t>(i)].taped;
    if (!fn) {
      throw TensorError("grad_wrt_input_taped: op '" + std::string(nodes_[static_cast<std::size_t>(i)].op) +
                        "' has no taped adjoint");
    }
    std::vector<bool> need(inputs.size());
    for (std::size_t k = 0; k < inputs.size(); ++k) need[k] = dep[static_cast<std::size_t>(inputs[k])];
    auto in_adj = fn(*this, i, adjv[static_cast<std::size_t>(i)], need);
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      if (!need[k]) continue;
      auto& slot = adjv[static_cast<std::size_t>(inputs[k])];
      slot = slot.valid() ? add(slot, in_adj[k]) : in_adj[k];
    }
  }
  auto r = adjv[static_cast<std::size_t>(root)];
  return r.valid() ? r : constant(Tensor<T>(value(root).shape()));
}

// ---- ops ------------------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b, bool trans_a, bool trans_b) {
  auto* g = graph_of(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (bv.shape().rank() != 2) fail("matmul", "rhs must be rank 2, got " + shapes(av.shape(), bv.shape()));
  if (trans_a && av.shape().rank() != 2) fail("matmul", "transposed lhs must be rank 2, got " + av.shape().str());
  const auto A = as_mat(av);
  const auto B = as_mat(bv);
  const Eigen::Index m = trans_a ? A.cols() : A.rows();
  const Eigen::Index k = trans_a ? A.rows() : A.cols();
  const Eigen::Index kb = trans_b ? B.cols() : B.rows();
  const Eigen::Index n = trans_b ? B.rows() : B.cols();
  if (k != kb) fail("matmul", "inner dimensions differ: " + shapes(av.shape(), bv.shape()));

  Shape out_shape = (!trans_a && av.shape().rank() == 3)
                        ? Shape{av.shape()[0], av.shape()[1], static_cast<int>(n)}
                        : Shape{static_cast<int>(m), static_cast<int>(n)};
  Tensor<T> out(out_shape);
  auto C = as_mat(out);
  if (!trans_a && !trans_b) C.noalias() = A * B;
  else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
  else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
  else C.noalias() = A.transpose() * B.transpose();

  const int ia = a.id, ib = b.id;
  return g->emit(
      "matmul", std::move(out), {ia, ib},
      [ia, ib, trans_a, trans_b](Graph<T>& gr, int self) {
        const auto G = as_mat(gr.adj(self));
        const auto Av = as_mat(gr.value(ia));
        const auto Bv = as_mat(gr.value(ib));
        if (gr.needs_grad(ia)) {
          auto dA = as_mat(gr.adj(ia));
          if (!trans_a) {
            if (!trans_b) dA.noalias() += G * Bv.transpose();
            else dA.noalias() += G * Bv;
          } else {
            if (!trans_b) dA.noalias() += Bv * G.transpose();
            else dA.noalias() += Bv.transpose() * G.transpose();
          }
        }
        if (gr.needs_grad(ib)) {
          auto dB = as_mat(gr.adj(ib));
          if (!trans_b) {
            if (!trans_a) dB.noalias() += Av.transpose() * G;
            else dB.noalias() += Av * G;
          } else {
            if (!trans_a) dB.noalias() += G.transpose() * Av;
            else dB.noalias() += G.transpose() * Av.transpose();
          }
        }
      },
      [ia, ib, trans_a, trans_b](Graph<T>& gr, int, Var<T> gy, const std::vector<bool>& need) {
        std::vector<Var<T>> out(2);
        Var<T> av{&gr, ia}, bv{&gr, ib};
        const Shape a_shape = av.shape();
        Var<T> g2 = flat2d(gy);
        if (need[0]) {
          Var<T> da = !trans_a ? matmul(g2, bv, false, !trans_b) : matmul(bv, g2, trans_b, true);
          out[0] = da.shape() == a_shape ? da : reshape_var(da, a_shape);
        }
        if (need[1]) {
          Var<T> a2 = flat2d(av);
          out[1] = !trans_b ? matmul(a2, g2, !trans_a, false) : matmul(g2, a2, true, trans_a);
        }
        return out;
      });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  auto* g = graph_of(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.shape() != bv.shape()) fail("add", shapes(av.shape(), bv.shape()));
  Tensor<T> out = av;
  add_into(out, bv);
  const int ia = a.id, ib = b.id;
  return g->emit(
      "add", std::move(out), {ia, ib},
      [ia, ib](Graph<T>& gr, int self) {
        if (gr.needs_grad(ia)) add_into(gr.adj(ia), gr.adj(self));
        if (gr.needs_grad(ib)) add_into(gr.adj(ib), gr.adj(self));
      },
      [](Graph<T>&, int, Var<T> gy, const std::vector<bool>& need) {
        std::vector<Var<T>> out(2);
        if (need[0]) out[0] = gy;
        if (need[1]) out[1] = gy;
        return out;
      });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  auto* g = graph_of(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.shape() != bv.shape()) fail("sub", shapes(av.shape(), bv.shape()));
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const int ia = a.id, ib = b.id;
  return g->emit(
      "sub", std::move(out), {ia, ib},
      [ia, ib](Graph<T>& gr, int self) {
        const auto& gy = gr.adj(self);
        if (gr.needs_grad(ia)) add_into(gr.adj(ia), gy);
        if (gr.needs_grad(ib)) {
          auto& gb = gr.adj(ib);
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= gy[i];
        }
      },
      [](Graph<T>&, int, Var<T> gy, const std::vector<bool>& need) {
        std::vector<Var<T>> out(2);
        if (need[0]) out[0] = gy;
        if (need[1]) out[1] = scale(gy, T(-1));
        return out;
      });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  auto* g = graph_of(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.shape() != bv.shape()) fail("mul", shapes(av.shape(), bv.shape()));
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const int ia = a.id, ib = b.id;
  return g->emit(
      "mul", std::move(out), {ia, ib},
      [ia, ib](Graph<T>& gr, int self) {
        const auto& gy = gr.adj(self);
        if (gr.needs_grad(ia)) {
          auto& ga = gr.adj(ia);
          const auto& bv2 = gr.value(ib);
          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * bv2[i];
        }
        if (gr.needs_grad(ib)) {
          auto& gb = gr.adj(ib);
          const auto& av2 = gr.value(ia);
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i] * av2[i];
        }
      },
      [ia, ib](Graph<T>& gr, int, Var<T> gy, const std::vector<bool>& need) {
        std::vector<Var<T>> out(2);
        if (need[0]) out[0] = mul(gy, Var<T>{&gr, ib});
        if (need[1]) out[1] = mul(gy, Var<T>{&gr, ia});
        return out;
      });
}

template <typename T>
Var<T> add_broadcast(Var<T> a, Var<T> b) {
  auto* g = graph_of(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  const Shape& sa = av.shape();
  const Shape& sb = bv.shape();
  bool ok = sb.rank() <= sa.rank();
  for (int i = 0; ok && i < sb.rank(); ++i) ok = sb[sb.rank() - 1 - i] == sa[sa.rank() - 1 - i];
  if (!ok) fail("add_broadcast", shapes(sa, sb));
  const std::size_t n = bv.size();
  Tensor<T> out = av;
  add_blocks(out.data(), out.size(), bv.data(), n);
  const int ia = a.id, ib = b.id;
  return g->emit(
      "add_broadcast", std::move(out), {ia, ib},
      [ia, ib, n](Graph<T>& gr, int self) {
        const auto& gy = gr.adj(self);
        if (gr.needs_grad(ia)) add_into(gr.adj(ia), gy);
        if (gr.needs_grad(ib)) {
          auto& gb = gr.adj(ib);
          add_blocks_rev(gb.data(), gy.data(), gy.size(), n);
        }
      },
      [sb](Graph<T>&, int, Var<T> gy, const std::vector<bool>& need) {
        std::vector<Var<T>> out(2);
        if (need[0]) out[0] = gy;
        if (need[1]) out[1] = sum_leading(gy, sb);
        return out;
      });
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
  return unary<T>(
      "scale", a, [c](T x) { return c * x; }, [c](T, T) { return c; },
      [c](Graph<T>&, int, Var<T> gy, const std::vector<bool>&) {
        return std::vector<Var<T>>{scale(gy, c)};
      });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T c) {
  return unary<T>(
      "add_scalar", a, [c](T x) { return x + c; }, [](T, T) { return T(1); },
      [](Graph<T>&, int, Var<T> gy, const std::vector<bool>&) { return std::vector<Var<T>>{gy}; });
}

template <typename T>
Var<T> concat(Var<T> a, Var<T> b) {
  auto* g = graph_of(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.shape().rank() != 2 || bv.shape().rank() != 2 || av.rows() != bv.rows()) {
    fail("concat", "expects rank-2 tensors with equal rows, got " + shapes(av.shape(), bv.shape()));
  }
  const int ca = av.cols(), cb = bv.cols();
  const std::size_t r = av.rows();
  Tensor<T> out(Shape{static_cast<int>(r), ca + cb});
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(av.data() + i * ca, ca, out.data() + i * (ca + cb));
    std::copy_n(bv.data() + i * cb, cb, out.data() + i * (ca + cb) + ca);
  }
  const int ia = a.id, ib = b.id;
  return g->emit("concat", std::move(out), {ia, ib}, [ia, ib, ca, cb, r](Graph<T>& gr, int self) {
    const auto& gy = gr.adj(self);
    if (gr.needs_grad(ia)) {
      auto& ga = gr.adj(ia);
      for (std::size_t i = 0; i < r; ++i) {
        for (int j = 0; j < ca; ++j) ga[i * ca + j] += gy[i * (ca + cb) + j];
      }
    }
    if (gr.needs_grad(ib)) {
      auto& gb = gr.adj(ib);
      for (std::size_t i = 0; i < r; ++i) {
        for (int j = 0; j < cb; ++j) gb[i * cb + j] += gy[i * (ca + cb) + ca + j];
      }
    }
  });
}

template <typename T>
Var<T> slice(Var<T> a, int begin, int end) {
  auto* g = graph_of(a);
  const auto& av = a.value();
  const int c = av.cols();
  if (begin < 0 || end > c || begin >= end) {
    fail("slice", "range [" + std::to_string(begin) + "," + std::to_string(end) + ") of " + av.shape().str());
  }
  const int w = end - begin;
  const std::size_t r = av.rows();
  auto dims = av.shape().dims();
  if (dims.empty()) dims.push_back(1);
  dims.back() = w;
  Tensor<T> out{Shape(std::span<const int>(dims))};
  for (std::size_t i = 0; i < r; ++i) std::copy_n(av.data() + i * c + begin, w, out.data() + i * w);
  const int ia = a.id;
  return g->emit("slice", std::move(out), {ia}, [ia, begin, w, c, r](Graph<T>& gr, int self) {
    if (!gr.needs_grad(ia)) return;
    const auto& gy = gr.adj(self);
    auto& ga = gr.adj(ia);
    for (std::size_t i = 0; i < r; ++i) {
      for (int j = 0; j < w; ++j) ga[i * c + begin + j] += gy[i * w + j];
    }
  });
}

template <typename T>
Var<T> tanh(Var<T> a) {
  return unary<T>(
      "tanh", a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; },
      [](Graph<T>& gr, int self, Var<T> gy, const std::vector<bool>&) {
        auto y = self_var(gr, self);
        return std::vector<Var<T>>{mul(gy, add_scalar(scale(square(y), T(-1)), T(1)))};
      });
}

template <typename T>
Var<T> relu(Var<T> a) {
  return unary<T>(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  return unary<T>(
      "sigmoid", a, [](T x) { return sigmoid_scalar(x); }, [](T, T y) { return y * (T(1) - y); },
      [](Graph<T>& gr, int self, Var<T> gy, const std::vector<bool>&) {
        auto y = self_var(gr, self);
        return std::vector<Var<T>>{mul(gy, sub(y, square(y)))};
      });
}

template <typename T>
Var<T> softplus(Var<T> a) {
  return unary<T>(
      "softplus", a, [](T x) { return softplus_scalar(x); }, [](T x, T) { return sigmoid_scalar(x); });
}

template <typename T>
Var<T> log(Var<T> a) {
  for (T x : a.value().vec()) {
    if (!(x > T(0))) fail("log", "non-positive input in tensor of shape " + a.shape().str());
  }
  return unary<T>("log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Var<T> exp(Var<T> a) {
  return unary<T>("exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> square(Var<T> a) {
  return unary<T>(
      "square", a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; },
      [](Graph<T>& gr, int self, Var<T> gy, const std::vector<bool>&) {
        Var<T> x{&gr, gr.node(self).inputs[0]};
        return std::vector<Var<T>>{mul(gy, scale(x, T(2)))};
      });
}

template <typename T>
Var<T> sqrt(Var<T> a) {
  for (T x : a.value().vec()) {
    if (!(x > T(0))) fail("sqrt", "non-positive input in tensor of shape " + a.shape().str());
  }
  return unary<T>("sqrt", a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Var<T> clip(Var<T> a, T lo, T hi) {
  if (!(lo <= hi)) fail("clip", "empty interval");
  return unary<T>(
      "clip", a, [lo, hi](T x) { return std::clamp(x, lo, hi); },
      [lo, hi](T x, T) { return (x > lo && x < hi) ? T(1) : T(0); });
}

template <typename T>
Var<T> minimum(Var<T> a, Var<T> b) {
  auto* g = graph_of(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.shape() != bv.shape()) fail("minimum", shapes(av.shape(), bv.shape()));
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(av[i], bv[i]);
  const int ia = a.id, ib = b.id;
  return g->emit("minimum", std::move(out), {ia, ib}, [ia, ib](Graph<T>& gr, int self) {
    const auto& gy = gr.adj(self);
    const auto& x = gr.value(ia);
    const auto& y = gr.value(ib);
    for (std::size_t i = 0; i < gy.size(); ++i) {
      const bool to_a = x[i] <= y[i];
      if (to_a && gr.needs_grad(ia)) gr.adj(ia)[i] += gy[i];
      if (!to_a && gr.needs_grad(ib)) gr.adj(ib)[i] += gy[i];
    }
  });
}

template <typename T>
Var<T> row_softmax(Var<T> a) {
  auto* g = graph_of(a);
  const auto& av = a.value();
  const std::size_t r = av.rows();
  const int c = av.cols();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < r; ++i) {
    const T* x = av.data() + i * c;
    T* y = out.data() + i * c;
    const T mx = *std::max_element(x, x + c);
    T s = 0;
    for (int j = 0; j < c; ++j) s += (y[j] = std::exp(x[j] - mx));
    for (int j = 0; j < c; ++j) y[j] /= s;
  }
  const int ia = a.id;
  return g->emit("row_softmax", std::move(out), {ia}, [ia, r, c](Graph<T>& gr, int self) {
    if (!gr.needs_grad(ia)) return;
    const auto& gy = gr.adj(self);
    const auto& y = gr.value(self);
    auto& ga = gr.adj(ia);
    for (std::size_t i = 0; i < r; ++i) {
      T dot = 0;
      for (int j = 0; j < c; ++j) dot += gy[i * c + j] * y[i * c + j];
      for (int j = 0; j < c; ++j) ga[i * c + j] += y[i * c + j] * (gy[i * c + j] - dot);
    }
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  auto* g = graph_of(x, gamma);
  graph_of(x, beta);
  const auto& xv = x.value();
  const int c = xv.cols();
  if (gamma.value().size() != static_cast<std::size_t>(c) || beta.value().size() != static_cast<std::size_t>(c)) {
    fail("layer_norm", "affine size mismatch: " + shapes(xv.shape(), gamma.shape()));
  }
  const std::size_t r = xv.rows();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  Tensor<T> out(xv.shape());
  // xhat and 1/std per row, kept for the adjoint.
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  auto rstd = std::make_shared<std::vector<T>>(r);
  for (std::size_t i = 0; i < r; ++i) {
    const T* xi = xv.data() + i * c;
    T mu = 0;
    for (int j = 0; j < c; ++j) mu += xi[j];
    mu /= T(c);
    T var = 0;
    for (int j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= T(c);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[i] = rs;
    for (int j = 0; j < c; ++j) {
      const T h = (xi[j] - mu) * rs;
      (*xhat)[i * c + j] = h;
      out[i * c + j] = h * gv[j] + bv[j];
    }
  }
  const int ix = x.id, ig = gamma.id, ib = beta.id;
  return g->emit("layer_norm", std::move(out), {ix, ig, ib},
                 [ix, ig, ib, xhat, rstd, r, c](Graph<T>& gr, int self) {
                   const auto& gy = gr.adj(self);
                   const auto& gv2 = gr.value(ig);
                   if (gr.needs_grad(ig) || gr.needs_grad(ib)) {
                     for (std::size_t i = 0; i < r; ++i) {
                       for (int j = 0; j < c; ++j) {
                         if (gr.needs_grad(ig)) gr.adj(ig)[j] += gy[i * c + j] * (*xhat)[i * c + j];
                         if (gr.needs_grad(ib)) gr.adj(ib)[j] += gy[i * c + j];
                       }
                     }
                   }
                   if (!gr.needs_grad(ix)) return;
                   auto& gx = gr.adj(ix);
                   std::vector<T> dh(static_cast<std::size_t>(c));
                   for (std::size_t i = 0; i < r; ++i) {
                     T m1 = 0, m2 = 0;
                     for (int j = 0; j < c; ++j) {
                       dh[j] = gy[i * c + j] * gv2[j];
                       m1 += dh[j];
                       m2 += dh[j] * (*xhat)[i * c + j];
                     }
                     m1 /= T(c);
                     m2 /= T(c);
                     for (int j = 0; j < c; ++j) {
                       gx[i * c + j] += (*rstd)[i] * (dh[j] - m1 - (*xhat)[i * c + j] * m2);
                     }
                   }
                 });
}

template <typename T>
Var<T> dropout(Var<T> a, T p) {
  auto* g = graph_of(a);
  if (!(p >= T(0) && p < T(1))) fail("dropout", "p must lie in [0, 1)");
  if (!g->train() || p == T(0)) return a;
  const auto& av = a.value();
  auto mask = std::make_shared<std::vector<T>>(av.size());
  // Keep when a raw 64-bit draw falls below (1 - p) * 2^64.
  const auto threshold = static_cast<std::uint64_t>((1.0 - static_cast<double>(p)) * 18446744073709551616.0);
  const T s = T(1) / (T(1) - p);
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) {
    (*mask)[i] = g->rng()() < threshold ? s : T(0);
    out[i] = av[i] * (*mask)[i];
  }
  const int ia = a.id;
  return g->emit("dropout", std::move(out), {ia}, [ia, mask](Graph<T>& gr, int self) {
    if (!gr.needs_grad(ia)) return;
    const auto& gy = gr.adj(self);
    auto& ga = gr.adj(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * (*mask)[i];
  });
}

template <typename T>
Var<T> embedding_gather(Var<T> table, std::vector<int> indices) {
  auto* g = graph_of(table);
  const auto& tv = table.value();
  if (tv.shape().rank() != 2 || indices.empty()) fail("embedding_gather", "table " + tv.shape().str());
  const int e = tv.cols();
  const int v = static_cast<int>(tv.rows());
  Tensor<T> out(Shape{static_cast<int>(indices.size()), e});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= v) {
      fail("embedding_gather", "index " + std::to_string(indices[i]) + " out of range for " + tv.shape().str());
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(indices[i]) * e, e, out.data() + i * e);
  }
  const int it = table.id;
  return g->emit("embedding_gather", std::move(out), {it},
                 [it, e, idx = std::move(indices)](Graph<T>& gr, int self) {
                   if (!gr.needs_grad(it)) return;
                   const auto& gy = gr.adj(self);
                   auto& gt = gr.adj(it);
                   for (std::size_t i = 0; i < idx.size(); ++i) {
                     for (int j = 0; j < e; ++j) gt[static_cast<std::size_t>(idx[i]) * e + j] += gy[i * e + j];
                   }
                 });
}

template <typename T>
Var<T> sum(Var<T> a) {
  auto* g = graph_of(a);
  const auto& av = a.value();
  T s = 0;
  for (T x : av.vec()) s += x;
  const int ia = a.id;
  const Shape in_shape = av.shape();
  return g->emit(
      "sum", Tensor<T>::scalar(s), {ia},
      [ia](Graph<T>& gr, int self) {
        if (!gr.needs_grad(ia)) return;
        const T gy = gr.adj(self)[0];
        auto& ga = gr.adj(ia);
        for (auto& v : ga.vec()) v += gy;
      },
      [in_shape](Graph<T>&, int, Var<T> gy, const std::vector<bool>&) {
        return std::vector<Var<T>>{broadcast_scalar(gy, in_shape)};
      });
}

template <typename T>
Var<T> mean(Var<T> a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

template <typename T>
Var<T> sum_cols(Var<T> a) {
  auto* g = graph_of(a);
  const auto& av = a.value();
  const std::size_t r = av.rows();
  const int c = av.cols();
  Tensor<T> out(Shape{static_cast<int>(r), 1});
  for (std::size_t i = 0; i < r; ++i) {
    T s = 0;
    for (int j = 0; j < c; ++j) s += av[i * c + j];
    out[i] = s;
  }
  const int ia = a.id;
  const Shape in_shape = av.shape();
  return g->emit(
      "sum_cols", std::move(out), {ia},
      [ia, r, c](Graph<T>& gr, int self) {
        if (!gr.needs_grad(ia)) return;
        const auto& gy = gr.adj(self);
        auto& ga = gr.adj(ia);
        for (std::size_t i = 0; i < r; ++i) {
          for (int j = 0; j < c; ++j) ga[i * c + j] += gy[i];
        }
      },
      [in_shape, c](Graph<T>& gr, int, Var<T> gy, const std::vector<bool>&) {
        auto ones = gr.constant(Tensor<T>(Shape{1, c}, T(1)));
        Var<T> e = matmul(gy, ones);
        return std::vector<Var<T>>{e.shape() == in_shape ? e : reshape_var(e, in_shape)};
      });
}

template <typename T>
Var<T> mse(Var<T> pred, Var<T> target) {
  auto* g = graph_of(pred, target);
  const auto& pv = pred.value();
  const auto& tv = target.value();
  if (pv.shape() != tv.shape()) fail("mse", shapes(pv.shape(), tv.shape()));
  const T n = static_cast<T>(pv.size());
  T s = 0;
  for (std::size_t i = 0; i < pv.size(); ++i) s += (pv[i] - tv[i]) * (pv[i] - tv[i]);
  const int ip = pred.id, it = target.id;
  return g->emit("mse", Tensor<T>::scalar(s / n), {ip, it}, [ip, it, n](Graph<T>& gr, int self) {
    const T gy = gr.adj(self)[0];
    const auto& p = gr.value(ip);
    const auto& t = gr.value(it);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const T d = T(2) * (p[i] - t[i]) / n * gy;
      if (gr.needs_grad(ip)) gr.adj(ip)[i] += d;
      if (gr.needs_grad(it)) gr.adj(it)[i] -= d;
    }
  });
}

template <typename T>
Var<T> bce_with_logits(Var<T> logits, Var<T> targets) {
  auto* g = graph_of(logits, targets);
  const auto& lv = logits.value();
  const auto& tv = targets.value();
  if (lv.shape() != tv.shape()) fail("bce_with_logits", shapes(lv.shape(), tv.shape()));
  const T n = static_cast<T>(lv.size());
  T s = 0;
  for (std::size_t i = 0; i < lv.size(); ++i) {
    const T l = lv[i];
    s += std::max(l, T(0)) - l * tv[i] + std::log1p(std::exp(-std::abs(l)));
  }
  const int il = logits.id, it = targets.id;
  return g->emit(
      "bce_with_logits", Tensor<T>::scalar(s / n), {il, it},
      [il, it, n](Graph<T>& gr, int self) {
        const T gy = gr.adj(self)[0];
        const auto& l = gr.value(il);
        const auto& t = gr.value(it);
        for (std::size_t i = 0; i < l.size(); ++i) {
          if (gr.needs_grad(il)) gr.adj(il)[i] += (sigmoid_scalar(l[i]) - t[i]) / n * gy;
          if (gr.needs_grad(it)) gr.adj(it)[i] -= l[i] / n * gy;
        }
      },
      [il, it, n](Graph<T>& gr, int, Var<T> gy, const std::vector<bool>& need) {
        std::vector<Var<T>> out(2);
        Var<T> l{&gr, il}, t{&gr, it};
        auto gb = broadcast_scalar(gy, l.shape());
        if (need[0]) out[0] = mul(scale(sub(sigmoid(l), t), T(1) / n), gb);
        if (need[1]) out[1] = mul(scale(l, T(-1) / n), gb);
        return out;
      });
}

template <typename T>
Var<T> causal_attention(Var<T> qkv, int heads) {
  auto* g = graph_of(qkv);
  const auto& xv = qkv.value();
  const Shape& s = xv.shape();
  if (s.rank() != 3 || heads <= 0 || s[2] % (3 * heads) != 0) {
    fail("causal_attention", "expects (B,T,3E) with E divisible by heads, got " + s.str());
  }
  const int B = s[0], Tn = s[1], E = s[2] / 3, d = E / heads;
  const T inv = T(1) / std::sqrt(static_cast<T>(d));
  Tensor<T> out(Shape{B, Tn, E});
  // Attention probabilities, (B, H, T, T) with zeros above the diagonal.
  auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(B) * heads * Tn * Tn, T(0));
  const int row = 3 * E;
  for (int b = 0; b < B; ++b) {
    const T* base = xv.data() + static_cast<std::size_t>(b) * Tn * row;
    for (int h = 0; h < heads; ++h) {
      T* P = probs->data() + (static_cast<std::size_t>(b) * heads + h) * Tn * Tn;
      for (int i = 0; i < Tn; ++i) {
        const T* q = base + i * row + h * d;
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j <= i; ++j) {
          const T* k = base + j * row + E + h * d;
          T dot = 0;
          for (int t = 0; t < d; ++t) dot += q[t] * k[t];
          P[i * Tn + j] = dot * inv;
          mx = std::max(mx, P[i * Tn + j]);
        }
        T z = 0;
        for (int j = 0; j <= i; ++j) z += (P[i * Tn + j] = std::exp(P[i * Tn + j] - mx));
        for (int j = 0; j <= i; ++j) P[i * Tn + j] /= z;
        T* o = out.data() + (static_cast<std::size_t>(b) * Tn + i) * E + h * d;
        for (int j = 0; j <= i; ++j) {
          const T* v = base + j * row + 2 * E + h * d;
          const T p = P[i * Tn + j];
          for (int t = 0; t < d; ++t) o[t] += p * v[t];
        }
      }
    }
  }
  const int ix = qkv.id;
  return g->emit("causal_attention", std::move(out), {ix},
                 [ix, probs, B, Tn, E, d, heads, inv, row](Graph<T>& gr, int self) {
                   if (!gr.needs_grad(ix)) return;
                   const auto& gy = gr.adj(self);
                   const auto& xv2 = gr.value(ix);
                   auto& gx = gr.adj(ix);
                   std::vector<T> dP(static_cast<std::size_t>(Tn));
                   for (int b = 0; b < B; ++b) {
                     const T* base = xv2.data() + static_cast<std::size_t>(b) * Tn * row;
                     T* gbase = gx.data() + static_cast<std::size_t>(b) * Tn * row;
                     for (int h = 0; h < heads; ++h) {
                       const T* P = probs->data() + (static_cast<std::size_t>(b) * heads + h) * Tn * Tn;
                       for (int i = 0; i < Tn; ++i) {
                         const T* go = gy.data() + (static_cast<std::size_t>(b) * Tn + i) * E + h * d;
                         T dot = 0;
                         for (int j = 0; j <= i; ++j) {
                           const T* v = base + j * row + 2 * E + h * d;
                           T* gv = gbase + j * row + 2 * E + h * d;
                           T acc = 0;
                           for (int t = 0; t < d; ++t) {
                             acc += go[t] * v[t];
                             gv[t] += P[i * Tn + j] * go[t];
                           }
                           dP[j] = acc;
                           dot += acc * P[i * Tn + j];
                         }
                         const T* q = base + i * row + h * d;
                         T* gq = gbase + i * row + h * d;
                         for (int j = 0; j <= i; ++j) {
                           const T ds = P[i * Tn + j] * (dP[j] - dot) * inv;
                           const T* k = base + j * row + E + h * d;
                           T* gk = gbase + j * row + E + h * d;
                           for (int t = 0; t < d; ++t) {
                             gq[t] += ds * k[t];
                             gk[t] += ds * q[t];
                           }
                         }
                       }
                     }
                   }
                 });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  return reshape_var(a, shape);
}

// ---- explicit instantiation ----------------------------------------------

#define BETAIL_INSTANTIATE_OPS(T)                                                  \
  template class Graph<T>;                                                         \
  template Var<T> matmul<T>(Var<T>, Var<T>, bool, bool);                           \
  template Var<T> add<T>(Var<T>, Var<T>);                                          \
  template Var<T> sub<T>(Var<T>, Var<T>);                                          \
  template Var<T> mul<T>(Var<T>, Var<T>);                                          \
  template Var<T> add_broadcast<T>(Var<T>, Var<T>);                                \
  template Var<T> scale<T>(Var<T>, T);                                             \
  template Var<T> add_scalar<T>(Var<T>, T);                                        \
  template Var<T> concat<T>(Var<T>, Var<T>);                                       \
  template Var<T> slice<T>(Var<T>, int, int);                                      \
  template Var<T> tanh<T>(Var<T>);                                                 \
  template Var<T> relu<T>(Var<T>);                                                 \
  template Var<T> sigmoid<T>(Var<T>);                                              \
  template Var<T> softplus<T>(Var<T>);                                             \
  template Var<T> log<T>(Var<T>);                                                  \
  template Var<T> exp<T>(Var<T>);                                                  \
  template Var<T> square<T>(Var<T>);                                               \
  template Var<T> sqrt<T>(Var<T>);                                                 \
  template Var<T> clip<T>(Var<T>, T, T);                                           \
  template Var<T> minimum<T>(Var<T>, Var<T>);                                      \
  template Var<T> row_softmax<T>(Var<T>);                                          \
  template Var<T> layer_norm<T>(Var<T>, Var<T>, Var<T>, T);                        \
  template Var<T> dropout<T>(Var<T>, T);                                           \
  template Var<T> embedding_gather<T>(Var<T>, std::vector<int>);                   \
  template Var<T> sum<T>(Var<T>);                                                  \
  template Var<T> mean<T>(Var<T>);                                                 \
  template Var<T> sum_cols<T>(Var<T>);                                             \
  template Var<T> mse<T>(Var<T>, Var<T>);                                          \
  template Var<T> bce_with_logits<T>(Var<T>, Var<T>);                              \
  template Var<T> causal_attention<T>(Var<T>, int);                                \
  template Var<T> reshape<T>(Var<T>, Shape);

BETAIL_INSTANTIATE_OPS(float)
BETAIL_INSTANTIATE_OPS(double)

}  // namespace betail::ad

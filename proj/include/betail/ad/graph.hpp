#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "betail/ad/tensor.hpp"

namespace betail::ad {

/// A trainable tensor with its accumulated gradient.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  // Accumulator written by Graph::backward; mutable so a const model can be
  // bound to a graph.
  mutable Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() const { grad = Tensor<T>(value.shape()); }
};

/// Ordered parameter registry. Order is the checkpoint order.
template <typename T>
using ParameterSet = std::vector<Parameter<T>*>;

template <typename T>
using ConstParameterSet = std::vector<const Parameter<T>*>;

template <typename T>
void zero_grad(const ParameterSet<T>& params) {
  for (auto* p : params) p->zero_grad();
}

template <typename T>
class Graph;

/// Handle to a node on a Graph.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  int id = -1;

  bool valid() const { return graph != nullptr && id >= 0; }
  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Append-only tape. Nodes are topologically ordered by construction, so
/// backward() walks them once in reverse.
///
/// Each op stores a first-order adjoint routine. Ops in the discriminator
/// closure (matmul, add, add_broadcast, mul, scale, add_scalar, square, tanh,
/// sigmoid, sum, mean, sum_cols, bce_with_logits) also store a taped adjoint
/// that emits the adjoint computation as new differentiable nodes; this is
/// what grad_wrt_input_taped() uses for penalties on input gradients.
template <typename T>
class Graph {
 public:
  // Adds adjoint contributions of node `self` into its inputs' adjoints.
  using BackwardFn = std::function<void(Graph&, int self)>;
  // Returns one adjoint Var per input (invalid where `need` is false).
  using TapedFn = std::function<std::vector<Var<T>>(Graph&, int self, Var<T> out_adj,
                                                    const std::vector<bool>& need)>;

  struct Node {
    std::string_view op;
    Tensor<T> value;
    std::vector<int> inputs;
    BackwardFn backward;
    TapedFn taped;
    const Parameter<T>* param = nullptr;
    bool needs_grad = false;
  };

  explicit Graph(bool grad_enabled = true, bool train = false, std::uint64_t seed = 0)
      : grad_enabled_(grad_enabled), train_(train), rng_(seed) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  bool train() const { return train_; }
  void set_train(bool train) { train_ = train; }
  std::mt19937_64& rng() { return rng_; }

  /// Leaf that is never differentiated.
  Var<T> constant(Tensor<T> value);
  /// Leaf whose adjoint can be requested with grad_wrt_input().
  Var<T> input(Tensor<T> value);
  /// Leaf bound to a parameter; backward() accumulates into param.grad.
  /// With gradients disabled this is a plain constant.
  Var<T> param(const Parameter<T>& p);

  /// Reverse sweep from a scalar loss; accumulates into every reachable
  /// parameter's grad. Parameters not reached are left untouched.
  void backward(Var<T> loss);

  /// First-order gradient of sum(output) w.r.t. an input leaf.
  Tensor<T> grad_wrt_input(Var<T> output, Var<T> input);

  /// Same gradient, but recorded on the tape so a later backward() through
  /// any function of it reaches the parameters. Throws if a node between
  /// input and output lacks a taped adjoint.
  Var<T> grad_wrt_input_taped(Var<T> output, Var<T> input);

  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  const Tensor<T>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  std::size_t size() const { return nodes_.size(); }

  // Used by op implementations.
  Var<T> emit(std::string_view op, Tensor<T> value, std::vector<int> inputs, BackwardFn backward,
              TapedFn taped = {});
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
  Tensor<T>& adj(int id);
  bool has_adj(int id) const;

 private:
  void sweep(int root);

  std::vector<Node> nodes_;
  std::vector<Tensor<T>> adj_;
  bool grad_enabled_;
  bool train_;
  std::mt19937_64 rng_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return graph->value(id);
}

// ---- op suite -------------------------------------------------------------

/// a·b where a is (..., K) flattened to rows and b is (K, N). Transpose
/// flags apply to the 2D views; a transposed operand must be rank 2.
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b, bool trans_a = false, bool trans_b = false);
template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> sub(Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
/// a + b where b's shape equals the trailing dims of a (bias, positions).
template <typename T>
Var<T> add_broadcast(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> a, T c);
template <typename T>
Var<T> add_scalar(Var<T> a, T c);
/// Concatenation along the last dimension of two rank-2 tensors.
template <typename T>
Var<T> concat(Var<T> a, Var<T> b);
/// Columns [begin, end) of the last dimension.
template <typename T>
Var<T> slice(Var<T> a, int begin, int end);
template <typename T>
Var<T> tanh(Var<T> a);
/// Subgradient at 0 is 0.
template <typename T>
Var<T> relu(Var<T> a);
template <typename T>
Var<T> sigmoid(Var<T> a);
template <typename T>
Var<T> softplus(Var<T> a);
/// Requires strictly positive input.
template <typename T>
Var<T> log(Var<T> a);
template <typename T>
Var<T> exp(Var<T> a);
template <typename T>
Var<T> square(Var<T> a);
/// Requires strictly positive input.
template <typename T>
Var<T> sqrt(Var<T> a);
/// Gradient is 1 strictly inside (lo, hi) and 0 elsewhere, boundary included.
template <typename T>
Var<T> clip(Var<T> a, T lo, T hi);
/// Elementwise minimum; ties route the gradient to a.
template <typename T>
Var<T> minimum(Var<T> a, Var<T> b);
template <typename T>
Var<T> row_softmax(Var<T> a);
/// Normalizes over the last dim, then applies gamma and beta (both of size
/// cols).
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5));
/// Inverted dropout; identity unless the graph is in train mode.
template <typename T>
Var<T> dropout(Var<T> a, T p);
/// Rows of a (V, E) table.
template <typename T>
Var<T> embedding_gather(Var<T> table, std::vector<int> indices);
template <typename T>
Var<T> sum(Var<T> a);
template <typename T>
Var<T> mean(Var<T> a);
/// Sum over the last dim: (..., C) -> (rows, 1).
template <typename T>
Var<T> sum_cols(Var<T> a);
template <typename T>
Var<T> mse(Var<T> pred, Var<T> target);
/// Mean binary cross-entropy of logits against targets in [0, 1].
template <typename T>
Var<T> bce_with_logits(Var<T> logits, Var<T> targets);
/// Multi-head causal self-attention over packed qkv of shape (B, T, 3E).
/// Returns (B, T, E). Position t attends to positions <= t only.
template <typename T>
Var<T> causal_attention(Var<T> qkv, int heads);
template <typename T>
Var<T> reshape(Var<T> a, Shape shape);

template <typename T>
Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <typename T>
Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <typename T>
Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }

}  // namespace betail::ad

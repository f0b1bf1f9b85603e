#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "betail/ad/graph.hpp"

namespace betail::ad {

enum class Activation { relu, tanh };

enum class Init {
  fan_in_uniform,  // U(-1/sqrt(in), 1/sqrt(in)) weights and biases
  normal_002,      // truncated N(0, 0.02^2) weights (|z| <= 2 sigma), zero biases
  zeros,
};

/// Fills a tensor according to `init` for a layer with `fan_in` inputs.
template <typename T>
void initialize(Tensor<T>& t, Init init, int fan_in, bool is_bias, std::mt19937_64& rng);

/// y = x W + b with W of shape (in, out).
template <typename T>
struct Linear {
  Parameter<T> weight;
  Parameter<T> bias;

  Linear() = default;
  Linear(const std::string& name, int in, int out, Init init, std::mt19937_64& rng);

  /// frozen: weights enter the graph as constants and receive no gradient.
  Var<T> operator()(Graph<T>& g, Var<T> x, bool frozen = false) const;
  int in_dim() const { return weight.value.shape()[0]; }
  int out_dim() const { return weight.value.shape()[1]; }
};

/// Fully connected stack: hidden layers use `act`, the output layer is
/// affine.
template <typename T>
class Mlp {
 public:
  Mlp() = default;
  Mlp(const std::string& name, std::vector<int> sizes, Activation act, Init init, std::mt19937_64& rng);

  Var<T> forward(Graph<T>& g, Var<T> x, bool frozen = false) const;

  ParameterSet<T> parameters();
  ConstParameterSet<T> parameters() const;
  const std::vector<int>& sizes() const { return sizes_; }
  Activation activation() const { return act_; }
  int in_dim() const { return sizes_.front(); }
  int out_dim() const { return sizes_.back(); }
  Linear<T>& output_layer() { return layers_.back(); }

 private:
  std::vector<int> sizes_;
  Activation act_ = Activation::relu;
  std::vector<Linear<T>> layers_;
};

/// Copies values between parameter sets of identical shapes.
template <typename T>
void copy_values(const ConstParameterSet<T>& from, const ParameterSet<T>& to);

/// target <- (1 - tau) target + tau source.
template <typename T>
void polyak_update(const ConstParameterSet<T>& source, const ParameterSet<T>& target, double tau);

/// FNV-1a over the raw bytes of every parameter value; used to verify that
/// frozen models stay frozen.
template <typename T>
std::uint64_t checksum(const ConstParameterSet<T>& params);

template <typename T>
ConstParameterSet<T> as_const(const ParameterSet<T>& p) {
  return ConstParameterSet<T>(p.begin(), p.end());
}

}  // namespace betail::ad

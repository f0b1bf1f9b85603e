#pragma once

#include <cstdint>
#include <vector>

#include "betail/ad/graph.hpp"

namespace betail::ad {

enum class OptimizerKind { adam, lamb };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Decoupled (AdamW style) for adam; part of the trust-ratio direction for lamb.
  double weight_decay = 0.0;
};

template <typename T>
struct OptimizerState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::int64_t step = 0;
};

/// Bias-corrected Adam. Accumulators are created on first use.
template <typename T>
void adam_step(OptimizerState<T>& state, const ParameterSet<T>& params, const OptimizerConfig& cfg);

/// LAMB: the Adam direction u plus weight decay, rescaled per parameter
/// tensor by r = |theta| / |u + wd theta| (r = 1 when either norm is 0).
template <typename T>
void lamb_step(OptimizerState<T>& state, const ParameterSet<T>& params, const OptimizerConfig& cfg);

/// Trust ratio as used by lamb_step for one parameter tensor.
template <typename T>
double lamb_trust_ratio(const std::vector<T>& theta, const std::vector<T>& direction);

/// Owns the state for one parameter group.
template <typename T>
class Optimizer {
 public:
  Optimizer() = default;
  Optimizer(ParameterSet<T> params, OptimizerConfig cfg) : params_(std::move(params)), cfg_(cfg) {}

  void step();
  void zero_grad() const { ad::zero_grad(params_); }

  const OptimizerConfig& config() const { return cfg_; }
  OptimizerState<T>& state() { return state_; }
  const OptimizerState<T>& state() const { return state_; }
  const ParameterSet<T>& params() const { return params_; }

 private:
  ParameterSet<T> params_;
  OptimizerConfig cfg_;
  OptimizerState<T> state_;
};

}  // namespace betail::ad

#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <random>
#include <vector>

#include <nlohmann/json.hpp>

#include "betail/ad/nn.hpp"
#include "betail/ad/optim.hpp"
#include "betail/env.hpp"
#include "betail/expert.hpp"

namespace betail {

struct BetConfig {
  int layers = 4;
  int heads = 4;
  int embed = 64;
  int k_train = 20;
  int k_eval = 5;
  double dropout = 0.1;
  int batch = 32;
  int updates = 5000;
  double lr = 1e-4;
  double weight_decay = 5e-4;
  ad::Activation activation = ad::Activation::relu;
  bool loss_all_positions = true;  // false: final position only

  /// Full-scale sizes; the defaults above are the desk profile.
  static BetConfig paper_profile();
  void validate() const;
};

nlohmann::json to_json(const BetConfig& c);
BetConfig bet_config_from_json(const nlohmann::json& j);

/// Pre-norm GPT over state tokens with a tanh action head.
template <typename T>
class BetModel {
 public:
  BetModel() = default;
  BetModel(const BetConfig& cfg, int obs_dim, std::uint64_t seed);

  /// states: (B, T, obs_dim) normalized, T <= k_train. Returns (B, T, 2).
  ad::Var<T> forward(ad::Graph<T>& g, const ad::Tensor<T>& states) const;

  ad::ParameterSet<T> parameters();
  ad::ConstParameterSet<T> parameters() const;
  std::size_t parameter_count() const;
  const BetConfig& config() const { return cfg_; }
  int obs_dim() const { return obs_dim_; }
  nlohmann::json descriptor() const;

  /// Zeroes every parameter (used to check the zero-weight identity).
  void zero_all();

 private:
  struct Block {
    ad::Parameter<T> ln1_g, ln1_b, ln2_g, ln2_b;
    ad::Linear<T> qkv, proj, fc1, fc2;
  };
  BetConfig cfg_;
  int obs_dim_ = 0;
  ad::Linear<T> embed_;
  ad::Parameter<T> pos_;
  std::vector<Block> blocks_;
  ad::Parameter<T> lnf_g_, lnf_b_;
  ad::Linear<T> head_;
};

/// Normalized demonstration windows for pretraining.
struct BetDataset {
  int dim = 0;
  std::vector<std::vector<float>> states;   // per demo, steps x dim
  std::vector<std::vector<float>> actions;  // per demo, steps x 2
  std::vector<int> lengths;
  std::size_t skipped = 0;  // demos shorter than the context

  static BetDataset from_demos(const DemoSet& demos, const Normalizer& norm, int k_train);
  std::size_t window_count(int k) const;
};

class BetTrainer {
 public:
  BetTrainer(BetModel<float>& model, const BetDataset& data, std::uint64_t seed);

  /// One Lamb step on a batch of uniformly sampled windows; returns the loss.
  double train_step();
  /// Mean squared error of the eval-mode model over every window start.
  double dataset_mse(int max_windows = 0) const;

  std::int64_t steps() const { return step_; }
  ad::Optimizer<float>& optimizer() { return opt_; }
  void set_steps(std::int64_t s) { step_ = s; }

 private:
  BetModel<float>& model_;
  const BetDataset& data_;
  std::uint64_t seed_;
  ad::Optimizer<float> opt_;
  std::int64_t step_ = 0;
  std::vector<std::size_t> cumulative_;  // window counts per demo
};

/// Frozen-model inference over the last min(len, k_eval) states of each car.
class BetPredictor {
 public:
  explicit BetPredictor(const BetModel<float>& model) : model_(model) {}
  void reset(int n_cars);
  /// Appends one normalized observation per car and returns â per car.
  std::vector<Action2> push_and_predict(std::span<const float> obs_norm, int dim);

 private:
  const BetModel<float>& model_;
  std::vector<std::deque<std::vector<float>>> history_;
};

/// Last-position prediction for a single window (T x dim).
Action2 bet_predict(const BetModel<float>& model, const std::vector<std::vector<float>>& history);

void save_bet(const std::filesystem::path& path, const BetModel<float>& model);
BetModel<float> load_bet(const std::filesystem::path& path);

}  // namespace betail

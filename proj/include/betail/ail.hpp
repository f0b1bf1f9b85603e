#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "betail/ad/nn.hpp"
#include "betail/ad/optim.hpp"
#include "betail/env.hpp"
#include "betail/expert.hpp"

namespace betail {

/// Hyperparameters of the residual/discriminator/SAC stage. Defaults are the
/// desk profile; paper_profile() returns the full-scale values.
struct AilConfig {
  double alpha = 0.05;
  std::vector<int> hidden{256, 256};
  double gamma = 0.99;
  double tau = 0.002;
  double lr = 3e-4;
  double lambda = 0.01;  // entropy temperature
  bool auto_lambda = false;
  double residual_init = 1e-3;  // scale of the residual output layer at init
  int batch = 1024;
  int grad_steps = 250;  // per iteration
  int replay_capacity = 200000;

  std::vector<int> disc_hidden{32, 32};
  double disc_lr = 0.005;
  int disc_updates = 32;  // per iteration
  int disc_batch = 500;   // expert rows per update (agent rows match)
  double gp_scale = 10.0;
  double gp_target = 1.0;
  double disc_entropy = 0.001;

  double c_w = 0.01;  // wall penalty of the RL reward

  std::vector<int> bc_hidden{256, 256};
  int bc_steps = 3000;
  int bc_batch = 256;
  double bc_lr = 1e-3;

  static AilConfig paper_profile();
  void validate() const;
};

nlohmann::json to_json(const AilConfig& c);
/// Strict: unknown keys raise ConfigError. Missing keys keep `base`'s values.
AilConfig ail_config_from_json(const nlohmann::json& j, AilConfig base = {});

// ---- composition and reward --------------------------------------------------

/// clip(base + alpha * residual_raw, -1, 1), rounded so that the result never
/// lies farther than alpha from base when both are read as doubles.
float compose_component(float base, float residual_raw, float alpha);
Action2 compose_action(const Action2& base, const Action2& residual_raw, float alpha);

inline constexpr double kRewardEps = 1e-6;

/// -log(1 - D) with D = sigmoid(logit) clamped to [eps, 1 - eps].
double ail_reward_from_logit(double logit);

// ---- networks ----------------------------------------------------------------

/// Binary classifier over (normalized obs, env action) rows.
template <typename T>
class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(int obs_dim, std::vector<int> hidden, std::uint64_t seed);

  ad::Var<T> logits(ad::Graph<T>& g, ad::Var<T> x) const { return net_.forward(g, x); }
  int input_dim() const { return net_.in_dim(); }
  ad::Mlp<T>& net() { return net_; }
  const ad::Mlp<T>& net() const { return net_; }
  ad::ParameterSet<T> parameters() { return net_.parameters(); }
  ad::ConstParameterSet<T> parameters() const { return net_.parameters(); }
  nlohmann::json descriptor() const;

 private:
  ad::Mlp<T> net_;
};

struct DiscRegularizer {
  double gp_scale = 10.0;
  double gp_target = 1.0;
  double entropy_scale = 0.001;
};

template <typename T>
struct DiscLossTerms {
  ad::Var<T> total, bce, gp, entropy;
  ad::Var<T> logits_expert, logits_agent;
};

/// BCE(expert -> 1) + BCE(agent -> 0) + gradient penalty on per-row
/// interpolates eps*expert + (1-eps)*agent + entropy bonus. Both batches are
/// (B, obs+2) with the same B; mix is (B, 1).
template <typename T>
DiscLossTerms<T> disc_loss(ad::Graph<T>& g, const Discriminator<T>& disc, const ad::Tensor<T>& expert,
                           const ad::Tensor<T>& agent, const ad::Tensor<T>& mix, const DiscRegularizer& reg);

struct DiscStats {
  double total = 0, bce = 0, gp = 0, entropy = 0;
  double d_expert = 0, d_agent = 0;  // mean D on each batch
};

/// One Adam step of disc_loss; mix is drawn from `seed`.
DiscStats disc_update(Discriminator<float>& disc, ad::Optimizer<float>& opt, const ad::Tensor<float>& expert,
                      const ad::Tensor<float>& agent, const DiscRegularizer& reg, std::uint64_t seed);

/// Logits and rewards for a batch of (obs, action) rows.
std::vector<float> disc_logits(const Discriminator<float>& disc, const ad::Tensor<float>& x);
std::vector<double> ail_rewards(const Discriminator<float>& disc, const ad::Tensor<float>& x);

/// Tanh-squashed diagonal Gaussian, scaled by alpha.
template <typename T>
class GaussianPolicy {
 public:
  static constexpr T kLogStdMin = T(-20);
  static constexpr T kLogStdMax = T(2);

  struct Sample {
    ad::Var<T> action_raw;  // tanh(u) in (-1, 1), shape (B, act)
    ad::Var<T> log_prob;    // density of alpha * action_raw, shape (B, 1)
  };

  GaussianPolicy() = default;
  GaussianPolicy(const std::string& name, int in_dim, const std::vector<int>& hidden, int act_dim, double alpha,
                 double init_scale, std::uint64_t seed);

  /// Reparameterized sample with standard-normal `noise` (B, act).
  Sample sample(ad::Graph<T>& g, ad::Var<T> s, const ad::Tensor<T>& noise, bool frozen = false) const;
  /// tanh(mean), the deterministic action.
  ad::Var<T> mean_action(ad::Graph<T>& g, ad::Var<T> s) const;

  int in_dim() const { return net_.in_dim(); }
  int act_dim() const { return act_dim_; }
  double alpha() const { return alpha_; }
  ad::ParameterSet<T> parameters() { return net_.parameters(); }
  ad::ConstParameterSet<T> parameters() const { return net_.parameters(); }
  nlohmann::json descriptor() const;

 private:
  ad::Mlp<T> net_;
  int act_dim_ = 2;
  double alpha_ = 1.0;
};

/// Q(s, a) network: concat(s, a) -> hidden -> 1.
template <typename T>
ad::Mlp<T> make_critic(const std::string& name, int state_dim, int act_dim, const std::vector<int>& hidden,
                       std::uint64_t seed);

template <typename T>
ad::Var<T> critic_value(ad::Graph<T>& g, const ad::Mlp<T>& q, ad::Var<T> s, ad::Var<T> a, bool frozen = false);

// ---- replay --------------------------------------------------------------------

/// FIFO ring of transitions. No reward is stored: AIL rewards are recomputed
/// from (obs, env action) with the current discriminator at sampling time,
/// and RL rewards from the stored progress/penalty features.
class ReplayBuffer {
 public:
  struct Batch {
    int n = 0;
    ad::Tensor<float> s_aug, a_res, s_aug_next, done;  // done (n, 1)
    ad::Tensor<float> disc_x;                          // (n, obs_dim + 2): obs, env action
    std::vector<float> progress, penalty;
  };

  ReplayBuffer() = default;
  ReplayBuffer(std::size_t capacity, int obs_dim, int aug_dim);

  void push(std::span<const float> s_aug, const Action2& a_res, std::span<const float> s_aug_next, bool done,
            const Action2& a_env, float progress, float penalty);

  std::size_t size() const { return size_; }
  std::size_t capacity() const { return capacity_; }
  std::uint64_t pushed() const { return pushed_; }
  int obs_dim() const { return obs_dim_; }
  int aug_dim() const { return aug_dim_; }
  /// Insertion serial of the i-th oldest stored transition.
  std::uint64_t serial(std::size_t i) const;

  /// Uniform indices (logical, oldest = 0) from a seeded stream.
  std::vector<std::size_t> sample_indices(std::size_t n, std::uint64_t seed) const;
  Batch gather(std::span<const std::size_t> idx) const;

  void save(const std::filesystem::path& path) const;
  static ReplayBuffer load(const std::filesystem::path& path);

 private:
  std::size_t slot(std::size_t logical) const;

  std::size_t capacity_ = 0, size_ = 0, head_ = 0;  // head_: next write slot
  std::uint64_t pushed_ = 0;
  int obs_dim_ = 0, aug_dim_ = 0;
  std::vector<float> s_aug_, s_next_, a_res_, a_env_, done_, progress_, penalty_;
  std::vector<std::uint64_t> serial_;
};

/// Batch with rewards from the current discriminator.
struct RewardedBatch {
  ReplayBuffer::Batch batch;
  std::vector<double> reward;
};
RewardedBatch replay_sample_recompute(const ReplayBuffer& replay, const Discriminator<float>& disc, std::size_t n,
                                      std::uint64_t seed);

/// Progress minus c_w times the stored off-course speed penalty.
std::vector<double> rl_rewards(const ReplayBuffer::Batch& b, double c_w);

// ---- SAC -------------------------------------------------------------------------

/// y = r + gamma (1 - done) (min_q_next - lambda log_pi_next).
double sac_target(double r, double gamma, bool done, double min_q_next, double lambda, double log_pi_next);

struct SacStats {
  double q_loss = 0, pi_loss = 0, log_pi = 0, q_mean = 0, lambda = 0, reward = 0;
};

class SacTrainer {
 public:
  // Optimizers hold pointers into the member networks, so a trainer stays put.
  SacTrainer(GaussianPolicy<float>& policy, int state_dim, const AilConfig& cfg, std::uint64_t seed);
  SacTrainer(const SacTrainer&) = delete;
  SacTrainer& operator=(const SacTrainer&) = delete;

  /// One gradient step on a batch with externally computed rewards.
  SacStats update(const ReplayBuffer::Batch& b, std::span<const double> reward, std::uint64_t seed);

  double lambda() const;
  std::int64_t steps() const { return steps_; }
  void set_steps(std::int64_t s) { steps_ = s; }

  ad::Mlp<float>& q1() { return q1_; }
  ad::Mlp<float>& q2() { return q2_; }
  ad::Mlp<float>& q1_target() { return q1t_; }
  ad::Mlp<float>& q2_target() { return q2t_; }
  ad::Optimizer<float>& policy_optimizer() { return pi_opt_; }
  ad::Optimizer<float>& critic_optimizer() { return q_opt_; }
  ad::Optimizer<float>& lambda_optimizer() { return lam_opt_; }
  ad::Parameter<float>& log_lambda() { return log_lambda_; }

 private:
  GaussianPolicy<float>* policy_;
  AilConfig cfg_;
  ad::Mlp<float> q1_, q2_, q1t_, q2t_;
  ad::Optimizer<float> pi_opt_, q_opt_, lam_opt_;
  ad::Parameter<float> log_lambda_;
  std::int64_t steps_ = 0;
};

/// Rows (normalized obs, action) of every demo step, (rows, dim + 2).
std::vector<float> expert_pairs(const DemoSet& demos, const Normalizer& norm);
/// n rows drawn uniformly from a row-major pair table.
ad::Tensor<float> sample_rows(std::span<const float> table, int width, int n, std::uint64_t seed);

}  // namespace betail

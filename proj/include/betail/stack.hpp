#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "betail/ail.hpp"
#include "betail/bet.hpp"

namespace betail {

/// bet: the frozen transformer alone (evaluation only).
enum class StackMode { bet, betail, ail, bc, bcail, sac, betsac };

struct ModeInfo {
  bool bet_base = false;
  bool bc_base = false;
  bool residual = false;    // alpha-scaled residual on a base action
  bool markov = false;      // single Gaussian policy on s, no base
  bool ail_reward = false;  // otherwise the progress/wall reward
};

ModeInfo mode_info(StackMode m);
std::string mode_name(StackMode m);
/// Throws ConfigError for unknown names.
StackMode parse_mode(const std::string& name);
/// True for modes that train online with SAC.
inline bool trains_online(StackMode m) {
  const auto i = mode_info(m);
  return i.residual || i.markov;
}

// ---- behavior cloning -------------------------------------------------------------

/// Markov regression policy s -> tanh(mlp(s)).
ad::Mlp<float> make_bc_net(int obs_dim, const std::vector<int>& hidden, std::uint64_t seed);
std::vector<Action2> bc_predict(const ad::Mlp<float>& net, std::span<const float> obs_norm, int dim);

/// Adam on the MSE to demo actions. `table` holds (obs, action) rows as from
/// expert_pairs(); batch >= rows uses the whole table every step. Returns the
/// loss of each step.
std::vector<double> train_bc(ad::Mlp<float>& net, std::span<const float> table, int obs_dim, int steps, int batch,
                             double lr, std::uint64_t seed);

// ---- composed policy --------------------------------------------------------------

/// Base (BeT, BC or none) plus residual/Markov Gaussian, composed per car.
class StackPolicy : public Policy {
 public:
  StackPolicy(StackMode mode, const BetModel<float>* bet, const ad::Mlp<float>* bc,
              const GaussianPolicy<float>* gaussian);
  void begin_episode(int n_cars, std::uint64_t seed, bool stochastic) override;
  void act(const PolicyInput& in, PolicyOutput& out) override;

 private:
  StackMode mode_;
  ModeInfo info_;
  const BetModel<float>* bet_;
  const ad::Mlp<float>* bc_;
  const GaussianPolicy<float>* gaussian_;
  std::optional<BetPredictor> predictor_;
  std::mt19937_64 rng_;
  bool stochastic_ = false;
};

// ---- online training ----------------------------------------------------------------

struct TrainContext {
  const Track* track = nullptr;
  const DemoSet* demos = nullptr;
  Normalizer norm;
  VehicleParams vp;
  ObsConfig oc;
  EpisodeConfig ep;
};

struct IterationLog {
  std::int64_t iteration = 0;
  std::int64_t env_steps = 0;
  DiscStats disc;  // averaged over the iteration's updates
  SacStats sac;    // averaged over the iteration's gradient steps
  int disc_updates = 0;
  int sac_steps = 0;
  bool sac_skipped = false;      // replay smaller than one batch
  double rollout_progress = 0;   // mean metres per car
  double rollout_wall = 0;       // fraction of steps off course
  double max_residual_dev = 0;   // max |a - clip(base)| over the rollout

  nlohmann::json to_json() const;
};

/// Owns every trainable piece of a stack (BC base, Gaussian policy, critics,
/// discriminator, replay). BeT, track and demos are borrowed and frozen.
class StackTrainer {
 public:
  StackTrainer(StackMode mode, const AilConfig& cfg, TrainContext ctx, const BetModel<float>* bet,
               std::uint64_t seed);
  StackTrainer(const StackTrainer&) = delete;
  StackTrainer& operator=(const StackTrainer&) = delete;

  /// Rollout -> replay -> discriminator updates -> SAC steps.
  IterationLog iterate();

  StackPolicy policy() const;
  StackMode mode() const { return mode_; }
  const AilConfig& config() const { return cfg_; }
  std::int64_t iteration() const { return iteration_; }
  std::int64_t env_steps() const { return env_steps_; }
  const ReplayBuffer& replay() const { return replay_; }
  const Discriminator<float>& discriminator() const { return disc_; }
  const GaussianPolicy<float>* gaussian() const { return gaussian_.get(); }
  const ad::Mlp<float>* bc() const { return bc_ ? &*bc_ : nullptr; }
  const std::vector<double>& bc_losses() const { return bc_losses_; }
  /// Checksum over every trainable parameter.
  std::uint64_t parameter_checksum() const;

  /// Writes or restores every piece of trainer state in `dir`.
  void save(const std::filesystem::path& dir) const;
  void load(const std::filesystem::path& dir);

 private:
  StackMode mode_;
  ModeInfo info_;
  AilConfig cfg_;
  TrainContext ctx_;
  const BetModel<float>* bet_;
  std::uint64_t seed_;
  SpeedReference ref_;
  std::vector<float> expert_table_;
  int state_dim_ = 0;

  std::optional<ad::Mlp<float>> bc_;
  std::vector<double> bc_losses_;
  std::unique_ptr<GaussianPolicy<float>> gaussian_;
  std::unique_ptr<SacTrainer> sac_;
  Discriminator<float> disc_;
  ad::Optimizer<float> disc_opt_;
  ReplayBuffer replay_;

  std::int64_t iteration_ = 0;
  std::int64_t env_steps_ = 0;
  std::int64_t disc_steps_ = 0;
};

}  // namespace betail

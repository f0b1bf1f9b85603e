#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

#include <nlohmann/json.hpp>

#include "betail/env.hpp"

namespace betail {

struct ExpertParams {
  double preview_gain = 0.6;     // preview distance per m/s of speed
  double min_preview = 6.0;      // metres
  double lateral_gain = 0.02;    // rad of extra steering per metre of offset
  double k_v = 0.95;             // corner-speed safety factor
  double tau_s = 0.25;           // steering low-pass time constant (s)
  double kp = 0.5;               // throttle per m/s of speed error
  double kd = 0.05;              // throttle per m/s^2 of speed-error rate
  double brake_fraction = 0.6;   // share of b_max assumed when looking for corners
  double noise = 0.02;           // std of raw steering noise (agent units)
  double jitter_kv = 0.008;      // per-lap uniform jitter of k_v
  double jitter_tau = 0.05;      // per-lap uniform jitter of tau_s

  void validate() const;
};

nlohmann::json to_json(const ExpertParams& p);
ExpertParams expert_params_from_json(const nlohmann::json& j);

struct ExpertMemory {
  double steer = 0.0;       // filtered steering command, agent units
  double prev_error = 0.0;  // previous speed error
  bool started = false;
};

/// k_v * min(v_cap, sqrt(mu_g / max(|kappa|, 1e-4))).
double expert_target_speed(double kappa_preview, const ExpertParams& p, const VehicleParams& vp);

/// Largest |curvature| within the distance the expert needs to react at speed v.
double expert_preview_curvature(const Track& track, double s, double v, const ExpertParams& p,
                                const VehicleParams& vp);

/// Agent action in [-1, 1]^2. `noise` is a standard normal draw (0 for none).
Action2 expert_action(const VehicleState& state, const TrackFrame& frame, const Track& track, ExpertMemory& memory,
                      const ExpertParams& p, const VehicleParams& vp, double dt, double noise = 0.0);

/// Expert as a batched policy (one filter memory per car).
class ExpertPolicy : public Policy {
 public:
  ExpertPolicy(ExpertParams p, VehicleParams vp, double dt) : p_(p), vp_(vp), dt_(dt) {}
  void begin_episode(int n_cars, std::uint64_t seed, bool stochastic) override;
  void act(const PolicyInput& in, PolicyOutput& out) override;

 private:
  ExpertParams p_;
  VehicleParams vp_;
  double dt_;
  bool stochastic_ = false;
  std::vector<ExpertMemory> memory_;
  std::vector<std::mt19937_64> rng_;
};

/// One lap per demonstration.
struct DemoSet {
  std::string track_id;
  ExpertParams params;
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> lap_seeds;
  std::vector<Trajectory> demos;

  std::size_t total_steps() const;
  std::vector<double> lap_times() const;
  SpeedReference speed_reference(const Track& track) const;

  /// Directory with manifest.json and lap_NNN.bin trajectory logs.
  void save(const std::filesystem::path& dir) const;
  static DemoSet load(const std::filesystem::path& dir);
};

DemoSet generate_demos(const Track& track, int n_laps, const ExpertParams& params, const VehicleParams& vp,
                       const ObsConfig& oc, std::uint64_t seed);

/// Statistics over every (state, action) row of the set.
Normalizer fit_normalizer(const DemoSet& demos);

/// Replays the stored actions open-loop from each demo's first state and
/// returns the largest deviation from the stored states.
double demo_replay_error(const DemoSet& demos, const Track& track, const VehicleParams& vp, double dt);

}  // namespace betail

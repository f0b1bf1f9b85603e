#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "betail/track.hpp"
#include "betail/vehicle.hpp"

namespace betail {

/// Feature extraction settings.
struct ObsConfig {
  int n_curvature = 10;        // N
  double curvature_horizon = 5.0;  // seconds at current speed
  int n_lookahead = 5;         // n
  double lookahead_time = 2.0;  // seconds
  double dt = 0.1;

  int dim() const { return 3 + 3 + 1 + 1 + n_curvature + 2 + 6 * n_lookahead; }
};

/// Observation layout (offsets into the feature vector):
///   [0, 3)    body velocity (v_x, v_y, 0)
///   [3, 6)    body acceleration, backward difference over one step
///   6         heading error theta to the centerline tangent, wrapped
///   7         wall contact flag
///   [8, 8+N)  centerline curvature samples ahead
///   8+N       cos(yaw)
///   9+N       sin(yaw)
///   then n look-ahead points, each (left.x, left.y, right.x, right.y,
///   center.x, center.y) in the body frame.
struct ObsLayout {
  static constexpr int velocity = 0;
  static constexpr int accel = 3;
  static constexpr int theta = 6;
  static constexpr int wall = 7;
  static constexpr int curvature = 8;
  static int cos_yaw(const ObsConfig& c) { return 8 + c.n_curvature; }
  static int sin_yaw(const ObsConfig& c) { return 9 + c.n_curvature; }
  static int lookahead(const ObsConfig& c) { return 10 + c.n_curvature; }
};

std::vector<double> observe(const VehicleState& vehicle, Vec2 prev_v_body, const Track& track, const TrackFrame& frame,
                            const ObsConfig& cfg);
std::vector<double> observe(const VehicleState& vehicle, Vec2 prev_v_body, const Track& track, const ObsConfig& cfg);

/// Per-feature affine normalization.
struct Normalizer {
  std::vector<double> mean;
  std::vector<double> std;

  static constexpr double kStdFloor = 1e-6;
  /// Network inputs are clamped to +-kInputClip. Features that never vary in
  /// the demos (the wall flag) would otherwise reach 1e6 once they do.
  static constexpr double kInputClip = 10.0;

  std::size_t dim() const { return mean.size(); }
  std::vector<double> normalize(std::span<const double> x) const;
  std::vector<double> denormalize(std::span<const double> z) const;
  /// normalize() followed by the network-input clamp, in float.
  void normalize_into(std::span<const float> x, std::span<float> out) const;

  nlohmann::json to_json() const;
  static Normalizer from_json(const nlohmann::json& j);
};

/// Population mean and standard deviation of the rows of a row-major
/// (rows x dim) buffer, std floored at 1e-6.
Normalizer fit_normalizer_rows(std::span<const float> rows, std::size_t dim);

/// Agent action in [-1, 1]^2 to physical steering/throttle.
RawAction scale_action(std::array<double, 2> agent);
std::array<double, 2> unscale_action(const RawAction& raw);

struct EpisodeConfig {
  double dt = 0.1;
  int train_steps = 500;
  int eval_steps = 5000;
  int n_cars = 20;
};

/// Arclength/speed samples used to initialize car speeds.
struct SpeedReference {
  std::vector<double> s;  // sorted ascending
  std::vector<double> v;

  /// Index of the sample nearest in wrapped arclength (ties: lower index).
  std::size_t nearest(double s_query, double length) const;
};

/// Cars evenly spaced in arclength from a seeded random offset, on the
/// centerline, aligned with the tangent, at the reference speed.
std::vector<VehicleState> reset_eval(const Track& track, const SpeedReference& ref, int n_cars, std::uint64_t seed);

/// RL reward: progress minus the off-course speed penalty.
double rl_reward(const TrackFrame& prev, const TrackFrame& now, Vec2 v_body, bool off_course, double c_w,
                 double length);

// ---- policies and rollouts -------------------------------------------------

using Action2 = std::array<float, 2>;

struct PolicyInput {
  const Track* track = nullptr;
  std::span<const VehicleState> states;
  std::span<const float> obs_raw;   // n_cars x dim
  std::span<const float> obs_norm;  // n_cars x dim
  int dim = 0;
  int step = 0;
};

struct PolicyOutput {
  std::vector<Action2> base;      // â, before the final clip
  std::vector<Action2> residual;  // squashed residual sample in (-1, 1)
  std::vector<Action2> action;    // env action a in [-1, 1]

  void resize(int n) {
    base.assign(static_cast<std::size_t>(n), {0.f, 0.f});
    residual.assign(static_cast<std::size_t>(n), {0.f, 0.f});
    action.assign(static_cast<std::size_t>(n), {0.f, 0.f});
  }
};

/// Batched policy over all cars of a rollout. Cars that have finished are
/// still passed in (their state is frozen) so batch shapes never change.
class Policy {
 public:
  virtual ~Policy() = default;
  virtual void begin_episode(int n_cars, std::uint64_t seed, bool stochastic) = 0;
  virtual void act(const PolicyInput& in, PolicyOutput& out) = 0;
};

/// One car's rollout. Observations, base and residual actions have one more
/// row than env actions: row T is the state after the last action.
struct Trajectory {
  int dim = 0;
  int steps = 0;  // env actions taken
  std::vector<float> obs_raw, obs_norm;  // (steps+1) x dim
  std::vector<float> base, residual;     // (steps+1) x 2
  std::vector<float> action;             // steps x 2
  std::vector<TrackFrame> frames;        // steps+1
  std::vector<VehicleState> states;      // steps+1
  std::vector<std::uint8_t> off_course;  // steps (flag after each action)
  std::vector<double> progress;          // steps, signed metres per action
  bool finished = false;
  double lap_time = 0.0;
  double total_progress = 0.0;

  std::span<const float> obs_norm_row(int t) const {
    return {obs_norm.data() + static_cast<std::size_t>(t) * dim, static_cast<std::size_t>(dim)};
  }
  double steering_rad(int t) const { return action[2 * static_cast<std::size_t>(t)] * kMaxSteer; }
};

enum class RolloutMode { train, eval };

struct RolloutSpec {
  RolloutMode mode = RolloutMode::train;
  int steps = 500;          // train: fixed length; eval: budget
  bool stop_on_lap = false;  // eval: car stops after one completed lap
  bool stochastic = true;    // sample residuals (training) or use the mean
};

std::vector<Trajectory> rollout(Policy& policy, const Track& track, const std::vector<VehicleState>& initial,
                                const VehicleParams& vp, const ObsConfig& oc, const Normalizer& norm,
                                const RolloutSpec& spec, std::uint64_t seed);

// ---- trajectory logs -------------------------------------------------------

struct LogMeta {
  std::string track_id;
  std::uint64_t seed = 0;
  nlohmann::json extra = nlohmann::json::object();
};

/// Binary log (archive format): JSON header {version, dims, dt, track_id,
/// seed, ...} followed by little-endian arrays:
///   obs_raw, obs_norm  f32 (T+1, dim)
///   base, residual     f32 (T+1, 2)
///   action             f32 (T, 2)
///   frame              f64 (T+1, 4)   s, e, phi_c, kappa
///   state              f64 (T+1, 8)   x, y, yaw, v_x, v_y, a_x, a_y, wall
///   off_course         u8  (T)
///   progress           f64 (T)
void write_trajectory(const std::filesystem::path& path, const Trajectory& traj, const LogMeta& meta, double dt);
Trajectory read_trajectory(const std::filesystem::path& path, LogMeta* meta = nullptr);

/// Per-car CSV summary: car,steps,finished,lap_time,progress,wall_steps,mean_abs_dsteer_rad.
void write_trajectory_summary_csv(const std::filesystem::path& path, const std::vector<Trajectory>& trajs);

}  // namespace betail

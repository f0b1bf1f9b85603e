#pragma once

#include <nlohmann/json.hpp>

#include "betail/common.hpp"
#include "betail/track.hpp"

namespace betail {

struct VehicleParams {
  double wheelbase = 2.5;
  double rear_ratio = 0.5;  // l_r / l
  double a_max = 6.0;
  double b_max = 10.0;
  double c_drag = 0.003;
  double mu_g = 9.8;
  double v_cap = 45.0;
  double wall_speed_loss = 0.9;  // fraction of speed retained on wall contact

  void validate() const;
};

nlohmann::json to_json(const VehicleParams& p);
VehicleParams vehicle_params_from_json(const nlohmann::json& j);

struct VehicleState {
  Vec2 position;
  double yaw = 0.0;
  Vec2 v_body;  // (v_x, v_y); v_z is identically 0
  Vec2 a_body;
  bool wall_contact = false;
};

/// Physical actuation: steering angle (rad) and throttle-brake in [-1, 1].
struct RawAction {
  double delta = 0.0;
  double omega_tau = 0.0;
};

constexpr double kMaxSteer = std::numbers::pi / 6.0;

/// One kinematic-bicycle step with a grip-limited yaw rate. Does not apply
/// track limits.
VehicleState step(const VehicleState& state, const RawAction& action, const VehicleParams& params, double dt);

/// Yaw rate the step would realize for speed v_x and steering delta.
double realized_yaw_rate(double v_x, double delta, const VehicleParams& params);

struct LimitResult {
  VehicleState state;
  bool off_course = false;
  TrackFrame frame;  // projection of the returned state
};

/// Clamps the car back onto the boundary when |e| > half_width and applies the
/// wall speed loss.
LimitResult enforce_track_limits(const VehicleState& state, const Track& track, const VehicleParams& params);

}  // namespace betail

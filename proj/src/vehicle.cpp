#include "betail/vehicle.hpp"

#include <algorithm>

namespace betail {

void VehicleParams::validate() const {
  if (!(wheelbase > 0 && rear_ratio > 0 && a_max > 0 && b_max > 0 && c_drag > 0 && mu_g > 0 && v_cap > 0)) {
    throw ConfigError("vehicle parameters must be strictly positive");
  }
  if (!(wall_speed_loss > 0.0 && wall_speed_loss <= 1.0)) throw ConfigError("wall_speed_loss must lie in (0, 1]");
}

nlohmann::json to_json(const VehicleParams& p) {
  return {{"wheelbase", p.wheelbase}, {"rear_ratio", p.rear_ratio}, {"a_max", p.a_max},
          {"b_max", p.b_max},         {"c_drag", p.c_drag},         {"mu_g", p.mu_g},
          {"v_cap", p.v_cap},         {"wall_speed_loss", p.wall_speed_loss}};
}

VehicleParams vehicle_params_from_json(const nlohmann::json& j) {
  VehicleParams p;
  for (const auto& [key, value] : j.items()) {
    double v = value.get<double>();
    if (key == "wheelbase") p.wheelbase = v;
    else if (key == "rear_ratio") p.rear_ratio = v;
    else if (key == "a_max") p.a_max = v;
    else if (key == "b_max") p.b_max = v;
    else if (key == "c_drag") p.c_drag = v;
    else if (key == "mu_g") p.mu_g = v;
    else if (key == "v_cap") p.v_cap = v;
    else if (key == "wall_speed_loss") p.wall_speed_loss = v;
    else throw ConfigError("unknown vehicle key '" + key + "'");
  }
  p.validate();
  return p;
}

double realized_yaw_rate(double v_x, double delta, const VehicleParams& p) {
  const double beta = std::atan(p.rear_ratio * std::tan(delta));
  const double demanded = v_x / p.wheelbase * std::tan(delta) * std::cos(beta);
  const double lateral = std::abs(v_x * demanded);
  if (lateral > p.mu_g) return demanded * (p.mu_g / lateral);
  return demanded;
}

VehicleState step(const VehicleState& s, const RawAction& a, const VehicleParams& p, double dt) {
  if (!std::isfinite(a.delta) || !std::isfinite(a.omega_tau) || !std::isfinite(s.position.x) ||
      !std::isfinite(s.position.y) || !std::isfinite(s.yaw) || !std::isfinite(s.v_body.x) || !std::isfinite(dt)) {
    throw std::invalid_argument("vehicle step: non-finite input");
  }
  const double vx = s.v_body.x;
  const double beta = std::atan(p.rear_ratio * std::tan(a.delta));
  const double omega = realized_yaw_rate(vx, a.delta, p);
  const double drive = a.omega_tau >= 0.0 ? a.omega_tau * p.a_max : a.omega_tau * p.b_max;
  const double vx_next = std::clamp(vx + (drive - p.c_drag * vx * vx) * dt, 0.0, p.v_cap);

  VehicleState n;
  const double mid_yaw = s.yaw + 0.5 * omega * dt;
  const double v_mean = 0.5 * (vx + vx_next);
  n.position = s.position + rotate({v_mean, v_mean * std::tan(beta)}, mid_yaw) * dt;
  n.yaw = wrap_angle(s.yaw + omega * dt);
  n.v_body = {vx_next, vx_next * std::tan(beta)};
  n.a_body = (n.v_body - s.v_body) * (1.0 / dt);
  n.wall_contact = false;
  return n;
}

LimitResult enforce_track_limits(const VehicleState& state, const Track& track, const VehicleParams& params) {
  LimitResult r{state, false, track.project(state.position)};
  const double hw = track.half_width();
  if (std::abs(r.frame.e) <= hw) {
    r.state.wall_contact = false;
    return r;
  }
  const Vec2 foot = track.point_at(r.frame.s);
  // Slightly inside the boundary so re-projection never exceeds it.
  const double k = hw * (1.0 - 1e-9) / std::abs(r.frame.e);
  r.state.position = foot + (state.position - foot) * k;
  r.state.v_body = state.v_body * params.wall_speed_loss;
  r.state.wall_contact = true;
  r.off_course = true;
  r.frame = track.project(r.state.position);
  return r;
}

}  // namespace betail

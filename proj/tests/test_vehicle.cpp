#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "betail/vehicle.hpp"

namespace betail {
namespace {

constexpr double kDt = 0.1;

// Throttle that exactly cancels drag at speed v.
double cruise_throttle(double v, const VehicleParams& p) { return p.c_drag * v * v / p.a_max; }

// Circumradius of three points.
double circumradius(Vec2 a, Vec2 b, Vec2 c) {
  const double ab = (b - a).norm(), bc = (c - b).norm(), ca = (a - c).norm();
  const double area2 = std::abs((b - a).cross(c - a));
  return ab * bc * ca / (2.0 * area2);
}

TEST(Vehicle, StraightCruiseAtConstantSpeed) {
  const VehicleParams p;
  VehicleState s;
  s.v_body = {10.0, 0.0};
  s.yaw = 0.7;
  const RawAction a{0.0, cruise_throttle(10.0, p)};
  for (int t = 0; t < 100; ++t) s = step(s, a, p, kDt);
  EXPECT_NEAR(s.v_body.x, 10.0, 1e-9);
  EXPECT_NEAR(s.position.x, 100.0 * std::cos(0.7), 1e-6);
  EXPECT_NEAR(s.position.y, 100.0 * std::sin(0.7), 1e-6);
  EXPECT_DOUBLE_EQ(s.yaw, 0.7);
}

TEST(Vehicle, ConstantSteerTracesTheBicycleCircle) {
  const VehicleParams p;
  const double v = 5.0, delta = 0.1;
  VehicleState s;
  s.v_body = {v, 0.0};
  std::vector<Vec2> path{s.position};
  for (int t = 0; t < 400; ++t) {
    s = step(s, {delta, cruise_throttle(v, p)}, p, kDt);
    path.push_back(s.position);
  }
  const double beta = std::atan(p.rear_ratio * std::tan(delta));
  const double expected = p.wheelbase / (std::tan(delta) * std::cos(beta) * std::cos(beta));
  for (std::size_t i = 0; i + 20 < path.size(); i += 37) {
    EXPECT_NEAR(circumradius(path[i], path[i + 10], path[i + 20]), expected, 1e-3 * expected);
  }
  EXPECT_NEAR(expected, 24.98, 0.01);
}

TEST(Vehicle, LateralAccelerationIsGripLimited) {
  const VehicleParams p;
  EXPECT_NEAR(std::abs(30.0 * realized_yaw_rate(30.0, kMaxSteer, p)), p.mu_g, 1e-9);
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> uv(0.0, p.v_cap), ud(-kMaxSteer, kMaxSteer);
  for (int k = 0; k < 10000; ++k) {
    const double v = uv(rng), d = ud(rng);
    const double w = realized_yaw_rate(v, d, p);
    EXPECT_LE(std::abs(v * w), p.mu_g * (1.0 + 1e-12));
    // Sign follows the steering input.
    if (d != 0.0 && v > 0.0) EXPECT_EQ(std::signbit(w), std::signbit(d));
  }
}

TEST(Vehicle, CoastingNeverGainsSpeed) {
  const VehicleParams p;
  VehicleState s;
  s.v_body = {40.0, 0.0};
  double prev = s.v_body.x;
  for (int t = 0; t < 500; ++t) {
    s = step(s, {0.2 * std::sin(0.1 * t), 0.0}, p, kDt);
    EXPECT_LE(s.v_body.x, prev);
    EXPECT_GE(s.v_body.x, 0.0);
    prev = s.v_body.x;
  }
}

TEST(Vehicle, SpeedStaysInBoundsAndStepIsDeterministic) {
  const VehicleParams p;
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  VehicleState a, b;
  for (int t = 0; t < 3000; ++t) {
    const RawAction act{u(rng) * kMaxSteer, u(rng) > -0.3 ? 1.0 : -1.0};
    a = step(a, act, p, kDt);
    b = step(b, act, p, kDt);
    ASSERT_EQ(a.position, b.position);
    ASSERT_EQ(a.yaw, b.yaw);
    ASSERT_GE(a.v_body.x, 0.0);
    ASSERT_LE(a.v_body.x, p.v_cap);
    ASSERT_GT(a.yaw, -std::numbers::pi - 1e-12);
    ASSERT_LE(a.yaw, std::numbers::pi);
  }
}

TEST(Vehicle, AccelerationIsTheBackwardDifference) {
  const VehicleParams p;
  VehicleState s;
  s.v_body = {12.0, 0.0};
  const VehicleState n = step(s, {0.2, 1.0}, p, kDt);
  EXPECT_NEAR(n.a_body.x, (n.v_body.x - 12.0) / kDt, 1e-12);
  EXPECT_NEAR(n.a_body.y, n.v_body.y / kDt, 1e-12);
}

TEST(Vehicle, NonFiniteInputThrows) {
  const VehicleParams p;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(step({}, {nan, 0.0}, p, kDt), std::invalid_argument);
  EXPECT_THROW(step({}, {0.0, std::numeric_limits<double>::infinity()}, p, kDt), std::invalid_argument);
  VehicleState s;
  s.position.x = nan;
  EXPECT_THROW(step(s, {}, p, kDt), std::invalid_argument);
}

TEST(Vehicle, ParamsValidateAndRoundTrip) {
  VehicleParams p;
  p.mu_g = 12.0;
  const auto q = vehicle_params_from_json(to_json(p));
  EXPECT_EQ(q.mu_g, 12.0);
  EXPECT_THROW(vehicle_params_from_json({{"mu_g", -1.0}}), ConfigError);
  EXPECT_THROW(vehicle_params_from_json({{"grip", 1.0}}), ConfigError);
}

TEST(Vehicle, WallClampPullsBackAndSlows) {
  const Track t = gen_track(0, TrackPreset::circle(100));
  const VehicleParams p;
  const double s0 = 30.0;
  VehicleState s;
  s.position = t.point_at(s0) + t.normal_at(s0) * (t.half_width() + 2.0);
  s.v_body = {20.0, 1.0};
  const LimitResult r = enforce_track_limits(s, t, p);
  EXPECT_TRUE(r.off_course);
  EXPECT_TRUE(r.state.wall_contact);
  EXPECT_LE(std::abs(r.frame.e), t.half_width());
  EXPECT_NEAR(r.frame.e, t.half_width(), 1e-6);
  EXPECT_NEAR(r.state.v_body.x, 18.0, 1e-12);
  EXPECT_NEAR(r.state.v_body.y, 0.9, 1e-12);

  VehicleState inside;
  inside.position = t.point_at(s0) + t.normal_at(s0) * 1.0;
  inside.v_body = {20.0, 0.0};
  const LimitResult q = enforce_track_limits(inside, t, p);
  EXPECT_FALSE(q.off_course);
  EXPECT_EQ(q.state.position, inside.position);
  EXPECT_EQ(q.state.v_body, inside.v_body);
}

TEST(Vehicle, HardSteeringAgainstTheWallStaysOnCourse) {
  const Track t = gen_track(2, TrackPreset::random(12, 0.3));
  const VehicleParams p;
  for (double sign : {-1.0, 1.0}) {
    VehicleState s;
    s.position = t.point_at(0.0);
    s.yaw = t.heading_at(0.0);
    s.v_body = {25.0, 0.0};
    int hits = 0;
    for (int k = 0; k < 600; ++k) {
      const LimitResult r = enforce_track_limits(step(s, {sign * kMaxSteer, 1.0}, p, kDt), t, p);
      ASSERT_LE(std::abs(r.frame.e), t.half_width() * (1 + 1e-9));
      hits += r.off_course;
      s = r.state;
    }
    EXPECT_GT(hits, 0);
  }
}

}  // namespace
}  // namespace betail

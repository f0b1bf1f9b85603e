#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include "betail/track.hpp"

namespace betail {
namespace {

// Independent nearest-point search: every segment, exhaustive.
struct Nearest {
  double s = 0.0, e = 0.0, dist = 0.0;
  std::size_t seg = 0;
};

Nearest brute_force_nearest(const Track& t, Vec2 p) {
  const auto& pts = t.points();
  const std::size_t n = pts.size();
  Nearest best{0.0, 0.0, 1e300, 0};
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 a = pts[i], b = pts[(i + 1) % n];
    const double len = (b - a).norm();
    const Vec2 u = (b - a) * (1.0 / len);
    const double along = std::clamp((p - a).dot(u), 0.0, len);
    const Vec2 foot = a + u * along;
    const double d = (p - foot).norm();
    if (d < best.dist) {
      best = {acc + along, u.cross(p - foot) >= 0.0 ? d : -d, d, i};
    }
    acc += len;
  }
  return best;
}

// Curvature at arclength s by walking the polyline from point 0.
double walked_kappa(const Track& t, double s) {
  const auto& pts = t.points();
  const auto& k = t.curvatures();
  const std::size_t n = pts.size();
  double L = 0.0;
  for (std::size_t i = 0; i < n; ++i) L += (pts[(i + 1) % n] - pts[i]).norm();
  s = std::fmod(s, L);
  if (s < 0) s += L;
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double len = (pts[(i + 1) % n] - pts[i]).norm();
    if (s <= acc + len || i + 1 == n) {
      const double f = (s - acc) / len;
      return (1 - f) * k[i] + f * k[(i + 1) % n];
    }
    acc += len;
  }
  return k.back();
}

double wrapped_gap(double a, double b, double L) {
  const double d = std::abs(a - b);
  return std::min(d, L - d);
}

TEST(Track, CircleLengthAndCurvature) {
  const Track t = gen_track(0, TrackPreset::circle(100));
  EXPECT_NEAR(t.length(), 2 * std::numbers::pi * 100, 2 * std::numbers::pi * 100 * 1e-3);
  for (double k : t.curvatures()) EXPECT_NEAR(k, 0.01, 1e-9);
  EXPECT_EQ(t.check_invariants(), "");
}

TEST(Track, RandomTrackIsDeterministic) {
  const Track a = gen_track(3, TrackPreset::random(12, 0.3));
  const Track b = gen_track(3, TrackPreset::random(12, 0.3));
  EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
  EXPECT_EQ(a.id(), b.id());
  const Track c = gen_track(4, TrackPreset::random(12, 0.3));
  EXPECT_NE(a.id(), c.id());
}

TEST(Track, InvariantsHoldForGeneratedTracks) {
  EXPECT_EQ(gen_track(7, TrackPreset::random(12, 0.3)).check_invariants(), "");
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Track t = gen_track(seed, TrackPreset::random(12, 0.3));
    const auto& s = t.arclengths();
    EXPECT_EQ(t.check_invariants(), "") << "seed " << seed;
    EXPECT_GE(t.size(), 64u);
    EXPECT_EQ(s.front(), 0.0);
    double sum = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) sum += (t.points()[(i + 1) % t.size()] - t.points()[i]).norm();
    EXPECT_NEAR(sum, t.length(), 1e-9 * t.length());
    for (double k : t.curvatures()) EXPECT_LT(std::abs(k) * t.half_width(), 1.0);
  }
  EXPECT_EQ(gen_track(1, TrackPreset::oval()).check_invariants(), "");
}

TEST(Track, BadPresetIsRejected) {
  EXPECT_THROW(gen_track(0, TrackPreset::circle(-5)), std::exception);
  // Too rough to ever satisfy the invariants.
  EXPECT_THROW(gen_track(0, TrackPreset::random(40, 0.95, 20)), TrackError);
}

TEST(Track, ProjectionOfCenterlinePoints) {
  const Track t = gen_track(5, TrackPreset::random(12, 0.3));
  const TrackFrame f50 = t.project(t.point_at(50.0));
  EXPECT_NEAR(f50.s, 50.0, 1e-6);
  EXPECT_NEAR(f50.e, 0.0, 1e-6);
  for (double s = 0.0; s < t.length(); s += 7.3) {
    const TrackFrame f = t.project(t.point_at(s));
    EXPECT_LT(wrapped_gap(f.s, s, t.length()), 1e-6) << s;
    EXPECT_LT(std::abs(f.e), 1e-6) << s;
  }
}

TEST(Track, ConcentricCircleOffset) {
  const Track t = gen_track(0, TrackPreset::circle(100));
  Vec2 centre{0, 0};
  for (const auto& p : t.points()) centre = centre + p * (1.0 / static_cast<double>(t.size()));
  for (double ang : {0.3, 1.7, 4.0}) {
    const Vec2 p = centre + Vec2{95 * std::cos(ang), 95 * std::sin(ang)};
    const TrackFrame f = t.project(p);
    // Counter-clockwise travel: the centre lies to the left.
    EXPECT_NEAR(f.e, 5.0, 2e-3);
  }
}

TEST(Track, ProjectionMatchesBruteForce) {
  const Track t = gen_track(9, TrackPreset::random(12, 0.3));
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> us(0.0, t.length()), ue(-1.5 * t.half_width(), 1.5 * t.half_width());
  double max_seg = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) max_seg = std::max(max_seg, (t.points()[(i + 1) % t.size()] - t.points()[i]).norm());
  for (int k = 0; k < 1000; ++k) {
    const double s = us(rng);
    const Vec2 p = t.point_at(s) + t.normal_at(s) * ue(rng);
    const TrackFrame f = t.project(p);
    const Nearest ref = brute_force_nearest(t, p);
    EXPECT_LE(wrapped_gap(f.s, ref.s, t.length()), max_seg) << k;
    EXPECT_NEAR(f.e, ref.e, 1e-6) << k;
  }
}

TEST(Track, ProjectionFarAwayThrows) {
  const Track t = gen_track(0, TrackPreset::circle(100));
  EXPECT_THROW(t.project({0.0, 0.0}), TrackError);
}

TEST(Track, CurvatureSamples) {
  const Track circle = gen_track(0, TrackPreset::circle(100));
  for (double k : curvature_samples(circle, 123.0, 20.0, 10, 5.0)) EXPECT_NEAR(k, 0.01, 1e-9);

  const Track oval = gen_track(0, TrackPreset::oval(50, 200));
  // Find a point with 60 m of straight ahead.
  double s0 = -1;
  for (double s = 0; s < oval.length() && s0 < 0; s += 1.0) {
    bool straight = true;
    for (double d = -2; d <= 62 && straight; d += 0.5) straight = std::abs(oval.kappa_at(s + d)) < 1e-12;
    if (straight) s0 = s;
  }
  ASSERT_GE(s0, 0.0);
  for (double k : curvature_samples(oval, s0, 10.0, 10, 5.0)) EXPECT_EQ(k, 0.0);

  const Track t = gen_track(2, TrackPreset::random(12, 0.3));
  for (double s : {0.0, 100.0, t.length() - 3.0}) {
    const auto c = curvature_samples(t, s, 10.0, 10, 5.0);
    for (int i = 1; i <= 10; ++i) EXPECT_NEAR(c[static_cast<std::size_t>(i - 1)], walked_kappa(t, s + 5.0 * i), 1e-9);
    const auto periodic = curvature_samples(t, s + t.length(), 10.0, 10, 5.0);
    for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(c[i], periodic[i], 1e-12);
    for (double k : curvature_samples(t, s, 0.0, 4, 5.0)) EXPECT_EQ(k, t.kappa_at(s));
  }
  EXPECT_THROW(curvature_samples(t, 0.0, 1.0, 0, 5.0), std::invalid_argument);
}

TEST(Track, LookaheadSpacingAndStraightSymmetry) {
  const Track circle = gen_track(0, TrackPreset::circle(100));
  const double s = 40.0;
  const Vec2 pos = circle.point_at(s);
  const double yaw = circle.heading_at(s);
  const auto la = lookahead_points(circle, pos, yaw, 10.0, 5, 2.0);
  ASSERT_EQ(la.size(), 5u);
  for (int i = 1; i <= 5; ++i) {
    // Chord to the point 4i metres ahead on a radius-100 circle (polyline
    // discretisation costs a few parts per million).
    const double d = 4.0 * i;
    EXPECT_NEAR(la[static_cast<std::size_t>(i - 1)].center.norm(), 2 * 100 * std::sin(d / 200.0), 1e-4);
  }

  const Track oval = gen_track(0, TrackPreset::oval(50, 200));
  double s0 = -1;
  for (double q = 0; q < oval.length() && s0 < 0; q += 1.0) {
    bool straight = true;
    for (double d = -2; d <= 30 && straight; d += 0.5) straight = std::abs(oval.kappa_at(q + d)) < 1e-12;
    if (straight) s0 = q;
  }
  ASSERT_GE(s0, 0.0);
  const auto st = lookahead_points(oval, oval.point_at(s0), oval.heading_at(s0), 10.0, 5, 2.0);
  const double hw = oval.half_width();
  for (int i = 1; i <= 5; ++i) {
    const auto& p = st[static_cast<std::size_t>(i - 1)];
    const double d = 4.0 * i;
    EXPECT_NEAR(p.center.x, d, 1e-9);
    EXPECT_NEAR(p.center.y, 0.0, 1e-9);
    EXPECT_NEAR(p.left.x, d, 1e-9);
    EXPECT_NEAR(p.left.y, hw, 1e-9);
    EXPECT_NEAR(p.right.x, d, 1e-9);
    EXPECT_NEAR(p.right.y, -hw, 1e-9);
  }
}

TEST(Track, LookaheadIsFrameInvariant) {
  const Track t = gen_track(4, TrackPreset::random(12, 0.3));
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> ang(-std::numbers::pi, std::numbers::pi), shift(-500, 500);
  for (int k = 0; k < 5; ++k) {
    const double rot = ang(rng);
    const Vec2 off{shift(rng), shift(rng)};
    std::vector<Vec2> moved;
    for (const auto& p : t.points()) moved.push_back(rotate(p, rot) + off);
    const Track tm(moved, t.half_width());
    const double s = 37.0 + 60.0 * k;
    const Vec2 pos = t.point_at(s) + t.normal_at(s) * 1.3;
    const double yaw = t.heading_at(s) + 0.1;
    const auto a = lookahead_points(t, pos, yaw, 23.0, 5, 2.0);
    const auto b = lookahead_points(tm, rotate(pos, rot) + off, yaw + rot, 23.0, 5, 2.0);
    for (std::size_t i = 0; i < a.size(); ++i) {
      for (auto [p, q] : {std::pair{a[i].left, b[i].left}, {a[i].right, b[i].right}, {a[i].center, b[i].center}}) {
        EXPECT_NEAR(p.x, q.x, 1e-9);
        EXPECT_NEAR(p.y, q.y, 1e-9);
      }
    }
  }
}

TEST(Track, ProgressDelta) {
  EXPECT_DOUBLE_EQ(progress_delta(100, 105, 600), 5.0);
  EXPECT_DOUBLE_EQ(progress_delta(599, 1, 600), 2.0);
  EXPECT_DOUBLE_EQ(progress_delta(1, 599, 600), -2.0);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 600.0);
  for (int k = 0; k < 1000; ++k) {
    const double a = u(rng), b = u(rng);
    EXPECT_EQ(progress_delta(a, b, 600), -progress_delta(b, a, 600));
    EXPECT_LE(std::abs(progress_delta(a, b, 600)), 300.0);
  }
  // Telescoping sum over a full lap of projected positions.
  const Track t = gen_track(6, TrackPreset::random(12, 0.3));
  double sum = 0.0, prev = t.project(t.point_at(0.0)).s;
  for (double s = 3.7; s < t.length() + 3.7; s += 3.7) {
    const double now = t.project(t.point_at(s)).s;
    sum += progress_delta(prev, now, t.length());
    prev = now;
  }
  const double back = progress_delta(prev, t.project(t.point_at(0.0)).s, t.length());
  EXPECT_NEAR(sum + back, t.length(), 1e-6);
}

TEST(Track, JsonRoundTripAndVersionCheck) {
  const Track t = gen_track(8, TrackPreset::random(12, 0.3));
  const auto path = std::filesystem::temp_directory_path() / "betail_track_rt.json";
  t.save(path);
  const Track u = Track::load(path);
  EXPECT_EQ(t.id(), u.id());
  EXPECT_EQ(t.length(), u.length());
  EXPECT_EQ(t.curvatures(), u.curvatures());
  auto j = t.to_json();
  j["version"] = 99;
  EXPECT_THROW(Track::from_json(j), std::exception);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace betail

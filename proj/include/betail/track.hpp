#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "betail/common.hpp"

namespace betail {

class TrackError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrackPreset {
  enum class Kind { circle, oval, random };
  Kind kind = Kind::random;
  double radius = 100.0;       // circle radius, oval end radius, random mean radius
  double straight = 200.0;     // oval straight length
  int n_control = 12;          // random: control radii around the loop
  double roughness = 0.3;      // random: relative radius perturbation
  double half_width = 6.0;
  bool clockwise = false;      // traverse direction

  static TrackPreset circle(double r) { return {Kind::circle, r}; }
  static TrackPreset oval(double r = 50.0, double straight = 200.0) { return {Kind::oval, r, straight}; }
  static TrackPreset random(int n_control, double roughness, double mean_radius = 100.0) {
    return {Kind::random, mean_radius, 200.0, n_control, roughness};
  }
};

nlohmann::json to_json(const TrackPreset& p);
TrackPreset preset_from_json(const nlohmann::json& j);

/// Projection of a point onto the centerline.
struct TrackFrame {
  double s = 0.0;      // arclength in [0, L)
  double e = 0.0;      // lateral offset, left of travel direction positive
  double phi_c = 0.0;  // centerline tangent heading
  double kappa = 0.0;  // signed curvature, left turns positive
};

/// Closed centerline polyline. Point i sits at arclength s[i]; segment i runs
/// from point i to point i+1 (mod n). Tangent heading and curvature are stored
/// per point and interpolated linearly in arclength.
class Track {
 public:
  Track() = default;
  Track(std::vector<Vec2> points, double half_width, std::uint64_t seed = 0, TrackPreset preset = {});

  std::size_t size() const { return points_.size(); }
  const std::vector<Vec2>& points() const { return points_; }
  const std::vector<double>& arclengths() const { return s_; }
  const std::vector<double>& curvatures() const { return kappa_; }
  double half_width() const { return half_width_; }
  double length() const { return length_; }
  std::uint64_t seed() const { return seed_; }
  const TrackPreset& preset() const { return preset_; }

  double wrap_s(double s) const;
  Vec2 point_at(double s) const;
  double heading_at(double s) const;
  double kappa_at(double s) const;
  Vec2 normal_at(double s) const;  // unit left normal

  /// Global nearest point over all segments (ties: smallest s). Throws if p
  /// is farther than 10 half-widths from every centerline point.
  TrackFrame project(Vec2 p) const;

  /// Returns an empty string when every invariant holds, otherwise the first
  /// violation.
  std::string check_invariants() const;

  nlohmann::json to_json() const;
  static Track from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static Track load(const std::filesystem::path& path);

  /// Content identifier (hash of the serialized form).
  std::string id() const;

 private:
  // Index of the segment containing arclength s (already wrapped) and the
  // fraction along it.
  std::size_t locate(double s, double& frac) const;

  std::vector<Vec2> points_;
  std::vector<double> s_;
  std::vector<double> seg_len_;
  std::vector<double> heading_;  // per point, unwrapped relative to segment
  std::vector<double> kappa_;
  double half_width_ = 0.0;
  double length_ = 0.0;
  std::uint64_t seed_ = 0;
  TrackPreset preset_;
};

Track gen_track(std::uint64_t seed, const TrackPreset& preset);

/// Curvature at s + i * v * horizon / n for i = 1..n (wrapping).
std::vector<double> curvature_samples(const Track& track, double s, double v, int n, double horizon);

struct LookaheadPoint {
  Vec2 left, right, center;  // body-frame offsets
};

/// n points spread over v * T metres of arclength ahead of the projection of
/// `position`, expressed in the body frame of (position, heading).
std::vector<LookaheadPoint> lookahead_points(const Track& track, Vec2 position, double heading, double v, int n,
                                             double T);
/// Same, reusing a known projection arclength.
std::vector<LookaheadPoint> lookahead_points_from(const Track& track, double s, Vec2 position, double heading,
                                                  double v, int n, double T);

/// Signed shortest wrapped difference s_now - s_prev.
double progress_delta(double s_prev, double s_now, double length);

}  // namespace betail

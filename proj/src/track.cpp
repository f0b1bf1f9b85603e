#include "betail/track.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <limits>
#include <random>

namespace betail {

namespace {

constexpr int kTrackVersion = 1;
constexpr int kMaxAttempts = 200;

const char* kind_name(TrackPreset::Kind k) {
  switch (k) {
    case TrackPreset::Kind::circle: return "circle";
    case TrackPreset::Kind::oval: return "oval";
    case TrackPreset::Kind::random: return "random";
  }
  return "?";
}

// Signed curvature of the circle through a, b, c (left turns positive).
double menger(Vec2 a, Vec2 b, Vec2 c) {
  const double ab = (b - a).norm(), bc = (c - b).norm(), ca = (a - c).norm();
  const double denom = ab * bc * ca;
  if (denom <= 0.0) return 0.0;
  return 2.0 * (b - a).cross(c - b) / denom;
}

// Resamples a dense closed polyline at near-uniform spacing.
std::vector<Vec2> resample(const std::vector<Vec2>& dense, double spacing) {
  const std::size_t m = dense.size();
  std::vector<double> cum(m + 1, 0.0);
  for (std::size_t i = 0; i < m; ++i) cum[i + 1] = cum[i] + (dense[(i + 1) % m] - dense[i]).norm();
  const double total = cum[m];
  const auto n = static_cast<std::size_t>(std::max(64.0, std::round(total / spacing)));
  std::vector<Vec2> out;
  out.reserve(n);
  std::size_t j = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const double s = total * static_cast<double>(k) / static_cast<double>(n);
    while (j + 1 < m && cum[j + 1] <= s) ++j;
    const double t = (s - cum[j]) / (cum[j + 1] - cum[j]);
    out.push_back(dense[j] + (dense[(j + 1) % m] - dense[j]) * t);
  }
  return out;
}

std::vector<Vec2> circle_points(double r) {
  const auto n = static_cast<std::size_t>(std::max(64.0, std::ceil(2.0 * std::numbers::pi * r)));
  std::vector<Vec2> pts(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double a = 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n);
    pts[i] = {r * std::cos(a), r * std::sin(a)};
  }
  return pts;
}

std::vector<Vec2> oval_points(double r, double straight) {
  std::vector<Vec2> dense;
  const int ns = std::max(2, static_cast<int>(std::ceil(straight / 0.25)));
  const int na = std::max(8, static_cast<int>(std::ceil(std::numbers::pi * r / 0.25)));
  const double h = straight / 2.0;
  for (int i = 0; i < ns; ++i) dense.push_back({-h + straight * i / ns, -r});
  for (int i = 0; i < na; ++i) {
    const double a = -std::numbers::pi / 2 + std::numbers::pi * i / na;
    dense.push_back({h + r * std::cos(a), r * std::sin(a)});
  }
  for (int i = 0; i < ns; ++i) dense.push_back({h - straight * i / ns, r});
  for (int i = 0; i < na; ++i) {
    const double a = std::numbers::pi / 2 + std::numbers::pi * i / na;
    dense.push_back({-h + r * std::cos(a), r * std::sin(a)});
  }
  return resample(dense, 1.0);
}

// Star-shaped loop: radius as a band-limited periodic function of angle,
// interpolating n_control random radii.
std::vector<Vec2> random_points(const TrackPreset& p, std::mt19937_64& rng) {
  const int n = p.n_control;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> radii(static_cast<std::size_t>(n));
  for (auto& r : radii) r = p.radius * (1.0 + p.roughness * u(rng));
  const double phase = 2.0 * std::numbers::pi * (u(rng) + 1.0) / 2.0;

  // Trigonometric interpolation coefficients.
  const int harmonics = n / 2;
  std::vector<double> a(static_cast<std::size_t>(harmonics + 1), 0.0), b(a.size(), 0.0);
  for (int m = 0; m <= harmonics; ++m) {
    for (int k = 0; k < n; ++k) {
      const double th = 2.0 * std::numbers::pi * k / n;
      a[static_cast<std::size_t>(m)] += radii[static_cast<std::size_t>(k)] * std::cos(m * th);
      b[static_cast<std::size_t>(m)] += radii[static_cast<std::size_t>(k)] * std::sin(m * th);
    }
    const double w = (m == 0 || (n % 2 == 0 && m == harmonics)) ? 1.0 / n : 2.0 / n;
    a[static_cast<std::size_t>(m)] *= w;
    b[static_cast<std::size_t>(m)] *= w;
  }
  const int dense_n = 4096;
  std::vector<Vec2> dense(dense_n);
  for (int i = 0; i < dense_n; ++i) {
    const double th = 2.0 * std::numbers::pi * i / dense_n;
    double r = 0.0;
    for (int m = 0; m <= harmonics; ++m) {
      r += a[static_cast<std::size_t>(m)] * std::cos(m * th) + b[static_cast<std::size_t>(m)] * std::sin(m * th);
    }
    dense[static_cast<std::size_t>(i)] = {r * std::cos(th + phase), r * std::sin(th + phase)};
  }
  return resample(dense, 2.0);
}

}  // namespace

nlohmann::json to_json(const TrackPreset& p) {
  nlohmann::json j = {{"kind", kind_name(p.kind)}, {"half_width", p.half_width}, {"clockwise", p.clockwise}};
  switch (p.kind) {
    case TrackPreset::Kind::circle:
      j["radius"] = p.radius;
      break;
    case TrackPreset::Kind::oval:
      j["radius"] = p.radius;
      j["straight"] = p.straight;
      break;
    case TrackPreset::Kind::random:
      j["radius"] = p.radius;
      j["n_control"] = p.n_control;
      j["roughness"] = p.roughness;
      break;
  }
  return j;
}

TrackPreset preset_from_json(const nlohmann::json& j) {
  TrackPreset p;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "circle") p.kind = TrackPreset::Kind::circle;
  else if (kind == "oval") p.kind = TrackPreset::Kind::oval;
  else if (kind == "random") p.kind = TrackPreset::Kind::random;
  else throw ConfigError("unknown track preset kind '" + kind + "'");
  for (const auto& [key, value] : j.items()) {
    if (key == "kind") continue;
    if (key == "radius") p.radius = value.get<double>();
    else if (key == "straight") p.straight = value.get<double>();
    else if (key == "n_control") p.n_control = value.get<int>();
    else if (key == "roughness") p.roughness = value.get<double>();
    else if (key == "half_width") p.half_width = value.get<double>();
    else if (key == "clockwise") p.clockwise = value.get<bool>();
    else throw ConfigError("unknown track preset key '" + key + "'");
  }
  return p;
}

Track::Track(std::vector<Vec2> points, double half_width, std::uint64_t seed, TrackPreset preset)
    : points_(std::move(points)), half_width_(half_width), seed_(seed), preset_(preset) {
  const std::size_t n = points_.size();
  if (n < 3) throw TrackError("track needs at least 3 points");
  s_.assign(n, 0.0);
  seg_len_.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    seg_len_[i] = (points_[(i + 1) % n] - points_[i]).norm();
    if (i + 1 < n) s_[i + 1] = s_[i] + seg_len_[i];
  }
  length_ = s_[n - 1] + seg_len_[n - 1];
  heading_.assign(n, 0.0);
  kappa_.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 prev = points_[(i + n - 1) % n], cur = points_[i], next = points_[(i + 1) % n];
    const Vec2 d = next - prev;
    heading_[i] = std::atan2(d.y, d.x);
    kappa_[i] = menger(prev, cur, next);
  }
}

double Track::wrap_s(double s) const {
  s = std::fmod(s, length_);
  if (s < 0.0) s += length_;
  if (s >= length_) s = 0.0;
  return s;
}

std::size_t Track::locate(double s, double& frac) const {
  auto it = std::upper_bound(s_.begin(), s_.end(), s);
  const auto i = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, (it - s_.begin()) - 1));
  frac = seg_len_[i] > 0.0 ? (s - s_[i]) / seg_len_[i] : 0.0;
  frac = std::clamp(frac, 0.0, 1.0);
  return i;
}

Vec2 Track::point_at(double s) const {
  double t;
  const std::size_t i = locate(wrap_s(s), t);
  return points_[i] + (points_[(i + 1) % size()] - points_[i]) * t;
}

double Track::heading_at(double s) const {
  double t;
  const std::size_t i = locate(wrap_s(s), t);
  const double h0 = heading_[i];
  return wrap_angle(h0 + t * wrap_angle(heading_[(i + 1) % size()] - h0));
}

double Track::kappa_at(double s) const {
  double t;
  const std::size_t i = locate(wrap_s(s), t);
  return kappa_[i] + t * (kappa_[(i + 1) % size()] - kappa_[i]);
}

Vec2 Track::normal_at(double s) const {
  const double h = heading_at(s);
  return {-std::sin(h), std::cos(h)};
}

TrackFrame Track::project(Vec2 p) const {
  const std::size_t n = size();
  double best = std::numeric_limits<double>::infinity();
  std::size_t best_i = 0;
  double best_t = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 a = points_[i];
    const Vec2 ab = points_[(i + 1) % n] - a;
    const double l2 = ab.dot(ab);
    double t = l2 > 0.0 ? (p - a).dot(ab) / l2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const Vec2 d = p - (a + ab * t);
    const double d2 = d.dot(d);
    if (d2 < best) {
      best = d2;
      best_i = i;
      best_t = t;
    }
  }
  const double dist = std::sqrt(best);
  if (!(dist <= 10.0 * half_width_)) {
    throw TrackError("point (" + std::to_string(p.x) + ", " + std::to_string(p.y) + ") is " + std::to_string(dist) +
                     " m from the track centerline");
  }
  const Vec2 a = points_[best_i];
  const Vec2 ab = points_[(best_i + 1) % n] - a;
  TrackFrame f;
  f.s = wrap_s(s_[best_i] + best_t * seg_len_[best_i]);
  f.e = ab.cross(p - a) >= 0.0 ? dist : -dist;
  f.phi_c = heading_at(f.s);
  f.kappa = kappa_at(f.s);
  return f;
}

std::string Track::check_invariants() const {
  const std::size_t n = size();
  if (n < 64) return "fewer than 64 centerline points";
  if (!(half_width_ >= 3.0)) return "half width below 3 m";
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (seg_len_[i] < 0.5 || seg_len_[i] > 10.0) {
      return "segment " + std::to_string(i) + " length " + std::to_string(seg_len_[i]) + " outside [0.5, 10]";
    }
    if (i > 0 && !(s_[i] > s_[i - 1])) return "arclengths not strictly increasing";
    if (!(std::abs(kappa_[i]) * half_width_ < 1.0)) {
      return "curvature " + std::to_string(kappa_[i]) + " at point " + std::to_string(i) + " too tight for half width";
    }
    sum += seg_len_[i];
  }
  if (s_[0] != 0.0) return "arclengths[0] != 0";
  if (std::abs(sum - length_) > 1e-9 * length_) return "total length mismatch";
  // Boundaries of distant parts of the loop must not overlap.
  const double min_gap = 2.0 * half_width_ + 2.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double along = s_[j] - s_[i];
      along = std::min(along, length_ - along);
      if (along < 2.0 * min_gap) continue;
      if ((points_[i] - points_[j]).norm() < min_gap) {
        return "loop passes within " + std::to_string(min_gap) + " m of itself";
      }
    }
  }
  return {};
}

nlohmann::json Track::to_json() const {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : points_) pts.push_back({p.x, p.y});
  return {{"version", kTrackVersion},
          {"seed", seed_},
          {"preset", betail::to_json(preset_)},
          {"points", pts},
          {"half_width", half_width_}};
}

Track Track::from_json(const nlohmann::json& j) {
  if (!j.contains("version") || j.at("version").get<int>() != kTrackVersion) {
    throw TrackError("unsupported track file version " + (j.contains("version") ? j.at("version").dump() : "<none>"));
  }
  std::vector<Vec2> pts;
  for (const auto& p : j.at("points")) pts.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
  return Track(std::move(pts), j.at("half_width").get<double>(), j.at("seed").get<std::uint64_t>(),
               preset_from_json(j.at("preset")));
}

void Track::save(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw TrackError("cannot write " + path.string());
  os << to_json().dump() << "\n";
}

Track Track::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw TrackError("cannot read track file " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw TrackError("malformed track file " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

std::string Track::id() const {
  const std::string text = to_json().dump();
  std::uint64_t h = 1469598103934665603ull;
  for (char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

Track gen_track(std::uint64_t seed, const TrackPreset& preset) {
  if (!(preset.radius > 0.0) || !(preset.half_width > 0.0)) throw TrackError("track preset parameters must be positive");
  auto finish = [&](std::vector<Vec2> pts) {
    if (preset.clockwise) std::reverse(pts.begin(), pts.end());
    return Track(std::move(pts), preset.half_width, seed, preset);
  };
  switch (preset.kind) {
    case TrackPreset::Kind::circle: {
      Track t = finish(circle_points(preset.radius));
      if (auto err = t.check_invariants(); !err.empty()) throw TrackError("circle track invalid: " + err);
      return t;
    }
    case TrackPreset::Kind::oval: {
      if (!(preset.straight > 0.0)) throw TrackError("oval straight length must be positive");
      Track t = finish(oval_points(preset.radius, preset.straight));
      if (auto err = t.check_invariants(); !err.empty()) throw TrackError("oval track invalid: " + err);
      return t;
    }
    case TrackPreset::Kind::random: {
      if (preset.n_control < 3 || !(preset.roughness > 0.0) || preset.roughness >= 1.0) {
        throw TrackError("random track needs n_control >= 3 and roughness in (0, 1)");
      }
      std::string last;
      for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
        std::mt19937_64 rng(derive_seed(seed, "track", static_cast<std::uint64_t>(attempt)));
        Track t = finish(random_points(preset, rng));
        last = t.check_invariants();
        if (last.empty()) return t;
      }
      throw TrackError("random track generation failed after " + std::to_string(kMaxAttempts) +
                       " attempts (last: " + last + ")");
    }
  }
  throw TrackError("unknown preset");
}

std::vector<double> curvature_samples(const Track& track, double s, double v, int n, double horizon) {
  if (n < 1 || v < 0.0 || !(horizon > 0.0)) throw std::invalid_argument("curvature_samples: bad arguments");
  std::vector<double> out(static_cast<std::size_t>(n));
  const double step = v * horizon / n;
  for (int i = 1; i <= n; ++i) out[static_cast<std::size_t>(i - 1)] = track.kappa_at(s + i * step);
  return out;
}

std::vector<LookaheadPoint> lookahead_points_from(const Track& track, double s, Vec2 position, double heading,
                                                  double v, int n, double T) {
  if (n < 1 || !(T > 0.0)) throw std::invalid_argument("lookahead_points: bad arguments");
  std::vector<LookaheadPoint> out(static_cast<std::size_t>(n));
  const double step = v * T / n;
  const double hw = track.half_width();
  for (int i = 1; i <= n; ++i) {
    const double si = s + i * step;
    const Vec2 c = track.point_at(si);
    const Vec2 nrm = track.normal_at(si);
    auto body = [&](Vec2 w) { return rotate(w - position, -heading); };
    out[static_cast<std::size_t>(i - 1)] = {body(c + nrm * hw), body(c - nrm * hw), body(c)};
  }
  return out;
}

std::vector<LookaheadPoint> lookahead_points(const Track& track, Vec2 position, double heading, double v, int n,
                                             double T) {
  return lookahead_points_from(track, track.project(position).s, position, heading, v, n, T);
}

double progress_delta(double s_prev, double s_now, double length) {
  double d = s_now - s_prev;
  if (d > 0.5 * length) d -= length;
  else if (d < -0.5 * length) d += length;
  return d;
}

}  // namespace betail

#include "betail/env.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <random>

#include "betail/ad/archive.hpp"

namespace betail {

std::vector<double> observe(const VehicleState& v, Vec2 prev_v_body, const Track& track, const TrackFrame& frame,
                            const ObsConfig& cfg) {
  std::vector<double> o(static_cast<std::size_t>(cfg.dim()), 0.0);
  o[0] = v.v_body.x;
  o[1] = v.v_body.y;
  o[3] = (v.v_body.x - prev_v_body.x) / cfg.dt;
  o[4] = (v.v_body.y - prev_v_body.y) / cfg.dt;
  o[ObsLayout::theta] = wrap_angle(v.yaw - frame.phi_c);
  o[ObsLayout::wall] = v.wall_contact ? 1.0 : 0.0;
  const double speed = v.v_body.norm();
  const auto c = curvature_samples(track, frame.s, speed, cfg.n_curvature, cfg.curvature_horizon);
  std::copy(c.begin(), c.end(), o.begin() + ObsLayout::curvature);
  o[static_cast<std::size_t>(ObsLayout::cos_yaw(cfg))] = std::cos(v.yaw);
  o[static_cast<std::size_t>(ObsLayout::sin_yaw(cfg))] = std::sin(v.yaw);
  const auto la = lookahead_points_from(track, frame.s, v.position, v.yaw, speed, cfg.n_lookahead, cfg.lookahead_time);
  auto it = o.begin() + ObsLayout::lookahead(cfg);
  for (const auto& p : la) {
    for (Vec2 q : {p.left, p.right, p.center}) {
      *it++ = q.x;
      *it++ = q.y;
    }
  }
  for (double x : o) {
    if (!std::isfinite(x)) throw std::runtime_error("observe: non-finite feature");
  }
  return o;
}

std::vector<double> observe(const VehicleState& v, Vec2 prev_v_body, const Track& track, const ObsConfig& cfg) {
  return observe(v, prev_v_body, track, track.project(v.position), cfg);
}

// ---- normalizer -------------------------------------------------------------

std::vector<double> Normalizer::normalize(std::span<const double> x) const {
  if (x.size() != dim()) {
    throw std::invalid_argument("normalize: observation has " + std::to_string(x.size()) + " features, normalizer " +
                                std::to_string(dim()));
  }
  std::vector<double> z(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) z[i] = (x[i] - mean[i]) / std[i];
  return z;
}

std::vector<double> Normalizer::denormalize(std::span<const double> z) const {
  if (z.size() != dim()) throw std::invalid_argument("denormalize: dimension mismatch");
  std::vector<double> x(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) x[i] = z[i] * std[i] + mean[i];
  return x;
}

void Normalizer::normalize_into(std::span<const float> x, std::span<float> out) const {
  if (x.size() != dim() || out.size() != dim()) throw std::invalid_argument("normalize: dimension mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = static_cast<float>(std::clamp((x[i] - mean[i]) / std[i], -kInputClip, kInputClip));
  }
}

nlohmann::json Normalizer::to_json() const { return {{"mean", mean}, {"std", std}}; }

Normalizer Normalizer::from_json(const nlohmann::json& j) {
  Normalizer n{j.at("mean").get<std::vector<double>>(), j.at("std").get<std::vector<double>>()};
  if (n.mean.size() != n.std.size()) throw std::invalid_argument("normalizer: mean/std size mismatch");
  for (double s : n.std) {
    if (!(s > 0.0)) throw std::invalid_argument("normalizer: non-positive std");
  }
  return n;
}

Normalizer fit_normalizer_rows(std::span<const float> rows, std::size_t dim) {
  if (dim == 0 || rows.size() % dim != 0) throw std::invalid_argument("fit_normalizer: ragged rows");
  const std::size_t n = rows.size() / dim;
  if (n < 2) throw std::invalid_argument("fit_normalizer: need at least 2 samples");
  Normalizer out{std::vector<double>(dim, 0.0), std::vector<double>(dim, 0.0)};
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < dim; ++c) out.mean[c] += rows[r * dim + c];
  }
  for (auto& m : out.mean) m /= static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < dim; ++c) {
      const double d = rows[r * dim + c] - out.mean[c];
      out.std[c] += d * d;
    }
  }
  for (auto& s : out.std) s = std::max(std::sqrt(s / static_cast<double>(n)), Normalizer::kStdFloor);
  return out;
}

// ---- actions, resets, rewards -----------------------------------------------

RawAction scale_action(std::array<double, 2> a) { return {a[0] * kMaxSteer, a[1]}; }

std::array<double, 2> unscale_action(const RawAction& raw) { return {raw.delta / kMaxSteer, raw.omega_tau}; }

std::size_t SpeedReference::nearest(double q, double length) const {
  if (s.empty()) throw std::invalid_argument("speed reference is empty");
  auto dist = [&](std::size_t i) {
    const double d = std::abs(s[i] - q);
    return std::min(d, length - d);
  };
  // Candidates: neighbours of q in sorted order plus both ends (wrap).
  auto it = std::lower_bound(s.begin(), s.end(), q);
  const std::size_t k = static_cast<std::size_t>(it - s.begin());
  std::vector<std::size_t> cand = {0, s.size() - 1};
  if (k < s.size()) cand.push_back(k);
  if (k > 0) cand.push_back(k - 1);
  std::size_t best = cand[0];
  for (std::size_t c : cand) {
    const double dc = dist(c), db = dist(best);
    if (dc < db || (dc == db && c < best)) best = c;
  }
  // Equal arclengths may repeat; the lowest index of a run wins.
  while (best > 0 && s[best - 1] == s[best]) --best;
  return best;
}

std::vector<VehicleState> reset_eval(const Track& track, const SpeedReference& ref, int n_cars, std::uint64_t seed) {
  if (ref.s.empty()) throw std::invalid_argument("reset_eval: demonstration set is empty");
  if (n_cars < 1) throw std::invalid_argument("reset_eval: need at least one car");
  std::mt19937_64 rng(derive_seed(seed, "placement"));
  const double L = track.length();
  const double offset = std::uniform_real_distribution<double>(0.0, L / n_cars)(rng);
  std::vector<VehicleState> cars(static_cast<std::size_t>(n_cars));
  for (int i = 0; i < n_cars; ++i) {
    const double s = track.wrap_s(offset + i * L / n_cars);
    auto& c = cars[static_cast<std::size_t>(i)];
    c.position = track.point_at(s);
    c.yaw = track.heading_at(s);
    c.v_body = {ref.v[ref.nearest(s, L)], 0.0};
  }
  return cars;
}

double rl_reward(const TrackFrame& prev, const TrackFrame& now, Vec2 v_body, bool off_course, double c_w,
                 double length) {
  const double r = progress_delta(prev.s, now.s, length);
  return off_course ? r - c_w * v_body.dot(v_body) : r;
}

// ---- rollout ----------------------------------------------------------------

std::vector<Trajectory> rollout(Policy& policy, const Track& track, const std::vector<VehicleState>& initial,
                                const VehicleParams& vp, const ObsConfig& oc, const Normalizer& norm,
                                const RolloutSpec& spec, std::uint64_t seed) {
  const int n = static_cast<int>(initial.size());
  const int dim = oc.dim();
  if (norm.dim() != static_cast<std::size_t>(dim)) throw std::invalid_argument("rollout: normalizer dimension mismatch");
  std::vector<Trajectory> trajs(static_cast<std::size_t>(n));
  std::vector<VehicleState> states = initial;
  std::vector<Vec2> prev_v(static_cast<std::size_t>(n));
  std::vector<TrackFrame> frames(static_cast<std::size_t>(n));
  std::vector<bool> active(static_cast<std::size_t>(n), true);
  for (int i = 0; i < n; ++i) {
    auto& tr = trajs[static_cast<std::size_t>(i)];
    tr.dim = dim;
    frames[static_cast<std::size_t>(i)] = track.project(states[static_cast<std::size_t>(i)].position);
  }
  std::vector<float> raw(static_cast<std::size_t>(n * dim)), nrm(raw.size());
  PolicyOutput out;
  out.resize(n);
  policy.begin_episode(n, seed, spec.stochastic);

  for (int t = 0; t <= spec.steps; ++t) {
    for (int i = 0; i < n; ++i) {
      if (!active[static_cast<std::size_t>(i)]) continue;
      const auto o = observe(states[static_cast<std::size_t>(i)], prev_v[static_cast<std::size_t>(i)], track,
                             frames[static_cast<std::size_t>(i)], oc);
      auto row = std::span<float>(raw).subspan(static_cast<std::size_t>(i * dim), static_cast<std::size_t>(dim));
      for (int k = 0; k < dim; ++k) row[static_cast<std::size_t>(k)] = static_cast<float>(o[static_cast<std::size_t>(k)]);
      norm.normalize_into(row, std::span<float>(nrm).subspan(static_cast<std::size_t>(i * dim), static_cast<std::size_t>(dim)));
    }
    PolicyInput in{&track, states, raw, nrm, dim, t};
    policy.act(in, out);

    bool any_active = false;
    for (int i = 0; i < n; ++i) {
      const auto ci = static_cast<std::size_t>(i);
      if (!active[ci]) continue;
      auto& tr = trajs[ci];
      tr.obs_raw.insert(tr.obs_raw.end(), raw.begin() + i * dim, raw.begin() + (i + 1) * dim);
      tr.obs_norm.insert(tr.obs_norm.end(), nrm.begin() + i * dim, nrm.begin() + (i + 1) * dim);
      tr.base.insert(tr.base.end(), out.base[ci].begin(), out.base[ci].end());
      tr.residual.insert(tr.residual.end(), out.residual[ci].begin(), out.residual[ci].end());
      tr.frames.push_back(frames[ci]);
      tr.states.push_back(states[ci]);
      if (t == spec.steps) continue;

      const Action2 a = out.action[ci];
      if (!std::isfinite(a[0]) || !std::isfinite(a[1])) {
        throw std::runtime_error("policy returned a non-finite action for car " + std::to_string(i) + " at step " +
                                 std::to_string(t));
      }
      const Action2 ac = {std::clamp(a[0], -1.0f, 1.0f), std::clamp(a[1], -1.0f, 1.0f)};
      tr.action.insert(tr.action.end(), ac.begin(), ac.end());
      prev_v[ci] = states[ci].v_body;
      const VehicleState moved = step(states[ci], scale_action({ac[0], ac[1]}), vp, oc.dt);
      const LimitResult lim = enforce_track_limits(moved, track, vp);
      const double ds = progress_delta(frames[ci].s, lim.frame.s, track.length());
      states[ci] = lim.state;
      frames[ci] = lim.frame;
      tr.off_course.push_back(lim.off_course ? 1 : 0);
      tr.progress.push_back(ds);
      tr.total_progress += ds;
      ++tr.steps;
      if (spec.stop_on_lap && !tr.finished && tr.total_progress >= track.length()) {
        tr.finished = true;
        tr.lap_time = tr.steps * oc.dt;
        // Record the terminal state row, then freeze the car.
        const auto o = observe(states[ci], prev_v[ci], track, frames[ci], oc);
        std::vector<float> r(o.begin(), o.end()), z(r.size());
        norm.normalize_into(r, z);
        tr.obs_raw.insert(tr.obs_raw.end(), r.begin(), r.end());
        tr.obs_norm.insert(tr.obs_norm.end(), z.begin(), z.end());
        tr.base.insert(tr.base.end(), {0.f, 0.f});
        tr.residual.insert(tr.residual.end(), {0.f, 0.f});
        tr.frames.push_back(frames[ci]);
        tr.states.push_back(states[ci]);
        active[ci] = false;
        continue;
      }
      any_active = true;
    }
    if (t < spec.steps && !any_active) break;
  }
  if (!spec.stop_on_lap) {
    for (auto& tr : trajs) {
      if (tr.total_progress >= track.length()) {
        // Lap time for fixed-length rollouts: first step where progress reached L.
        double acc = 0.0;
        for (int k = 0; k < tr.steps; ++k) {
          acc += tr.progress[static_cast<std::size_t>(k)];
          if (acc >= track.length()) {
            tr.finished = true;
            tr.lap_time = (k + 1) * oc.dt;
            break;
          }
        }
      }
    }
  }
  return trajs;
}

// ---- logs --------------------------------------------------------------------

void write_trajectory(const std::filesystem::path& path, const Trajectory& tr, const LogMeta& meta, double dt) {
  ad::Archive ar;
  ar.meta = meta.extra;
  ar.meta["version"] = 1;
  ar.meta["kind"] = "trajectory";
  ar.meta["dims"] = {{"obs", tr.dim}, {"action", 2}, {"steps", tr.steps}};
  ar.meta["dt"] = dt;
  ar.meta["track_id"] = meta.track_id;
  ar.meta["seed"] = meta.seed;
  ar.meta["finished"] = tr.finished;
  ar.meta["lap_time"] = tr.lap_time;
  ar.meta["total_progress"] = tr.total_progress;
  const int rows = tr.steps + 1;
  ar.add("obs_raw", {rows, tr.dim}, tr.obs_raw);
  ar.add("obs_norm", {rows, tr.dim}, tr.obs_norm);
  ar.add("base", {rows, 2}, tr.base);
  ar.add("residual", {rows, 2}, tr.residual);
  ar.add("action", {tr.steps, 2}, tr.action);
  std::vector<double> fr, st;
  for (const auto& f : tr.frames) fr.insert(fr.end(), {f.s, f.e, f.phi_c, f.kappa});
  for (const auto& s : tr.states) {
    st.insert(st.end(), {s.position.x, s.position.y, s.yaw, s.v_body.x, s.v_body.y, s.a_body.x, s.a_body.y,
                         s.wall_contact ? 1.0 : 0.0});
  }
  ar.add("frame", {rows, 4}, fr);
  ar.add("state", {rows, 8}, st);
  ar.add("off_course", {tr.steps}, tr.off_course);
  ar.add("progress", {tr.steps}, tr.progress);
  ad::write_archive(path, ar);
}

Trajectory read_trajectory(const std::filesystem::path& path, LogMeta* meta) {
  const ad::Archive ar = ad::read_archive(path);
  if (ar.meta.value("version", 0) != 1 || ar.meta.value("kind", "") != "trajectory") {
    throw ad::ArchiveError(path.string() + " is not a version-1 trajectory log");
  }
  Trajectory tr;
  tr.dim = ar.meta.at("dims").at("obs").get<int>();
  tr.steps = ar.meta.at("dims").at("steps").get<int>();
  tr.finished = ar.meta.at("finished").get<bool>();
  tr.lap_time = ar.meta.at("lap_time").get<double>();
  tr.total_progress = ar.meta.at("total_progress").get<double>();
  const int rows = tr.steps + 1;
  tr.obs_raw = ar.get<float>("obs_raw", {rows, tr.dim});
  tr.obs_norm = ar.get<float>("obs_norm", {rows, tr.dim});
  tr.base = ar.get<float>("base", {rows, 2});
  tr.residual = ar.get<float>("residual", {rows, 2});
  tr.action = ar.get<float>("action", {tr.steps, 2});
  const auto fr = ar.get<double>("frame", {rows, 4});
  const auto st = ar.get<double>("state", {rows, 8});
  for (int r = 0; r < rows; ++r) {
    const double* f = fr.data() + 4 * r;
    tr.frames.push_back({f[0], f[1], f[2], f[3]});
    const double* s = st.data() + 8 * r;
    tr.states.push_back({{s[0], s[1]}, s[2], {s[3], s[4]}, {s[5], s[6]}, s[7] != 0.0});
  }
  tr.off_course = ar.get<std::uint8_t>("off_course", {tr.steps});
  tr.progress = ar.get<double>("progress", {tr.steps});
  if (meta) {
    meta->track_id = ar.meta.at("track_id").get<std::string>();
    meta->seed = ar.meta.at("seed").get<std::uint64_t>();
    meta->extra = ar.meta;
  }
  return tr;
}

void write_trajectory_summary_csv(const std::filesystem::path& path, const std::vector<Trajectory>& trajs) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "car,steps,finished,lap_time,progress,wall_steps,mean_abs_dsteer_rad\n";
  char buf[256];
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    const auto& t = trajs[i];
    int wall = 0;
    for (auto f : t.off_course) wall += f;
    double ds = 0.0;
    for (int k = 1; k < t.steps; ++k) ds += std::abs(t.steering_rad(k) - t.steering_rad(k - 1));
    const double mean_ds = t.steps > 1 ? ds / (t.steps - 1) : 0.0;
    std::snprintf(buf, sizeof(buf), "%zu,%d,%d,%.1f,%.6f,%d,%.9g\n", i, t.steps, t.finished ? 1 : 0, t.lap_time,
                  t.total_progress, wall, mean_ds);
    os << buf;
  }
}

}  // namespace betail

#include "betail/expert.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "betail/ad/archive.hpp"

namespace betail {

void ExpertParams::validate() const {
  if (!(tau_s > 0.0)) throw ConfigError("expert tau_s must be positive");
  if (!(k_v > 0.0 && k_v <= 1.0)) throw ConfigError("expert k_v must lie in (0, 1]");
  if (!(preview_gain > 0.0 && min_preview > 0.0 && brake_fraction > 0.0)) {
    throw ConfigError("expert preview and braking parameters must be positive");
  }
  if (noise < 0.0 || jitter_kv < 0.0 || jitter_tau < 0.0) throw ConfigError("expert noise/jitter must be >= 0");
}

nlohmann::json to_json(const ExpertParams& p) {
  return {{"preview_gain", p.preview_gain}, {"min_preview", p.min_preview}, {"lateral_gain", p.lateral_gain},
          {"k_v", p.k_v},                   {"tau_s", p.tau_s},             {"kp", p.kp},
          {"kd", p.kd},                     {"brake_fraction", p.brake_fraction}, {"noise", p.noise},
          {"jitter_kv", p.jitter_kv},       {"jitter_tau", p.jitter_tau}};
}

ExpertParams expert_params_from_json(const nlohmann::json& j) {
  ExpertParams p;
  for (const auto& [key, value] : j.items()) {
    const double v = value.get<double>();
    if (key == "preview_gain") p.preview_gain = v;
    else if (key == "min_preview") p.min_preview = v;
    else if (key == "lateral_gain") p.lateral_gain = v;
    else if (key == "k_v") p.k_v = v;
    else if (key == "tau_s") p.tau_s = v;
    else if (key == "kp") p.kp = v;
    else if (key == "kd") p.kd = v;
    else if (key == "brake_fraction") p.brake_fraction = v;
    else if (key == "noise") p.noise = v;
    else if (key == "jitter_kv") p.jitter_kv = v;
    else if (key == "jitter_tau") p.jitter_tau = v;
    else throw ConfigError("unknown expert key '" + key + "'");
  }
  p.validate();
  return p;
}

double expert_target_speed(double kappa_preview, const ExpertParams& p, const VehicleParams& vp) {
  return p.k_v * std::min(vp.v_cap, std::sqrt(vp.mu_g / std::max(std::abs(kappa_preview), 1e-4)));
}

double expert_preview_curvature(const Track& track, double s, double v, const ExpertParams& p,
                                const VehicleParams& vp) {
  const double preview = std::max(p.min_preview, p.preview_gain * v);
  const double window = preview + v * v / (2.0 * p.brake_fraction * vp.b_max);
  double k = 0.0;
  for (double d = 0.0; d <= window; d += 1.0) k = std::max(k, std::abs(track.kappa_at(s + d)));
  return k;
}

Action2 expert_action(const VehicleState& state, const TrackFrame& frame, const Track& track, ExpertMemory& mem,
                      const ExpertParams& p, const VehicleParams& vp, double dt, double noise) {
  const double v = state.v_body.x;
  // Pure pursuit on a speed-scaled centerline preview point.
  const double preview = std::max(p.min_preview, p.preview_gain * v);
  const Vec2 target = rotate(track.point_at(frame.s + preview) - state.position, -state.yaw);
  const double ld = std::max(target.norm(), 1e-3);
  const double alpha = std::atan2(target.y, target.x);
  double delta = std::atan(2.0 * vp.wheelbase * std::sin(alpha) / ld) - p.lateral_gain * frame.e;
  const double u = std::clamp(delta / kMaxSteer + p.noise * noise, -1.0, 1.0);
  const double k = 1.0 - std::exp(-dt / p.tau_s);
  const bool first = !mem.started;
  if (first) mem.steer = u;
  else mem.steer += k * (u - mem.steer);
  mem.started = true;

  const double v_tgt = expert_target_speed(expert_preview_curvature(track, frame.s, v, p, vp), p, vp);
  const double err = v_tgt - v;
  const double derr = first ? 0.0 : (err - mem.prev_error) / dt;
  mem.prev_error = err;
  const double throttle = std::clamp(p.kp * err + p.kd * derr, -1.0, 1.0);
  return {static_cast<float>(std::clamp(mem.steer, -1.0, 1.0)), static_cast<float>(throttle)};
}

void ExpertPolicy::begin_episode(int n_cars, std::uint64_t seed, bool stochastic) {
  stochastic_ = stochastic;
  memory_.assign(static_cast<std::size_t>(n_cars), {});
  rng_.clear();
  for (int i = 0; i < n_cars; ++i) rng_.emplace_back(derive_seed(seed, "expert-car", static_cast<std::uint64_t>(i)));
}

void ExpertPolicy::act(const PolicyInput& in, PolicyOutput& out) {
  const auto n = in.states.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = in.states[i];
    const TrackFrame f = in.track->project(s.position);
    double z = 0.0;
    if (stochastic_) z = std::normal_distribution<double>(0.0, 1.0)(rng_[i]);
    const Action2 a = expert_action(s, f, *in.track, memory_[i], p_, vp_, dt_, z);
    out.base[i] = a;
    out.residual[i] = {0.f, 0.f};
    out.action[i] = a;
  }
}

// ---- demo sets ------------------------------------------------------------------

std::size_t DemoSet::total_steps() const {
  std::size_t n = 0;
  for (const auto& d : demos) n += static_cast<std::size_t>(d.steps);
  return n;
}

std::vector<double> DemoSet::lap_times() const {
  std::vector<double> t;
  for (const auto& d : demos) t.push_back(d.lap_time);
  return t;
}

SpeedReference DemoSet::speed_reference(const Track& track) const {
  std::vector<std::pair<double, double>> pts;
  for (const auto& d : demos) {
    for (int t = 0; t < d.steps; ++t) {
      const auto& st = d.states[static_cast<std::size_t>(t)];
      pts.emplace_back(track.wrap_s(d.frames[static_cast<std::size_t>(t)].s), st.v_body.x);
    }
  }
  std::stable_sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  SpeedReference ref;
  for (const auto& [s, v] : pts) {
    ref.s.push_back(s);
    ref.v.push_back(v);
  }
  return ref;
}

void DemoSet::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::json files = nlohmann::json::array();
  for (std::size_t i = 0; i < demos.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "lap_%03zu.bin", i);
    write_trajectory(dir / name, demos[i], {track_id, lap_seeds[i], {{"source", "expert"}}}, 0.1);
    files.push_back(name);
  }
  nlohmann::json manifest = {{"version", 1},          {"track_id", track_id}, {"n_laps", demos.size()},
                             {"expert", to_json(params)}, {"seed", seed},      {"seeds", lap_seeds},
                             {"lap_times", lap_times()},  {"files", files}};
  const auto tmp = dir / "manifest.json.tmp";
  {
    std::ofstream os(tmp);
    os << manifest.dump(2) << "\n";
    if (!os) throw std::runtime_error("cannot write demo manifest in " + dir.string());
  }
  std::filesystem::rename(tmp, dir / "manifest.json");
}

DemoSet DemoSet::load(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw std::runtime_error("no demo manifest in " + dir.string());
  nlohmann::json m;
  is >> m;
  if (m.value("version", 0) != 1) throw std::runtime_error("unsupported demo manifest version in " + dir.string());
  DemoSet set;
  set.track_id = m.at("track_id").get<std::string>();
  set.params = expert_params_from_json(m.at("expert"));
  set.seed = m.at("seed").get<std::uint64_t>();
  set.lap_seeds = m.at("seeds").get<std::vector<std::uint64_t>>();
  for (const auto& f : m.at("files")) set.demos.push_back(read_trajectory(dir / f.get<std::string>()));
  if (set.demos.size() != set.lap_seeds.size()) throw std::runtime_error("demo manifest/file count mismatch");
  return set;
}

DemoSet generate_demos(const Track& track, int n_laps, const ExpertParams& params, const VehicleParams& vp,
                       const ObsConfig& oc, std::uint64_t seed) {
  if (n_laps < 1) throw std::invalid_argument("generate_demos: n_laps must be >= 1");
  params.validate();
  DemoSet set;
  set.track_id = track.id();
  set.params = params;
  set.seed = seed;
  // Demonstrations are stored unnormalized; the normalizer is fit afterwards.
  Normalizer identity{std::vector<double>(static_cast<std::size_t>(oc.dim()), 0.0),
                      std::vector<double>(static_cast<std::size_t>(oc.dim()), 1.0)};
  const int budget = static_cast<int>(std::ceil(500.0 / oc.dt));
  for (int lap = 0; lap < n_laps; ++lap) {
    const std::uint64_t lap_seed = derive_seed(seed, "demo-lap", static_cast<std::uint64_t>(lap));
    std::mt19937_64 rng(lap_seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    ExpertParams p = params;
    p.k_v = std::clamp(p.k_v + p.jitter_kv * u(rng), 0.05, 1.0);
    p.tau_s = std::max(0.02, p.tau_s + p.jitter_tau * u(rng));
    const double s0 = std::uniform_real_distribution<double>(0.0, track.length())(rng);
    VehicleState start;
    start.position = track.point_at(s0);
    start.yaw = track.heading_at(s0);
    start.v_body = {expert_target_speed(expert_preview_curvature(track, s0, 0.0, p, vp), p, vp), 0.0};

    ExpertPolicy policy(p, vp, oc.dt);
    RolloutSpec spec{RolloutMode::eval, budget, true, p.noise > 0.0};
    auto trajs = rollout(policy, track, {start}, vp, oc, identity, spec, lap_seed);
    if (!trajs[0].finished) {
      throw std::runtime_error("expert failed to complete a lap on track " + track.id());
    }
    set.lap_seeds.push_back(lap_seed);
    set.demos.push_back(std::move(trajs[0]));
  }
  return set;
}

Normalizer fit_normalizer(const DemoSet& demos) {
  if (demos.demos.empty()) throw std::invalid_argument("fit_normalizer: empty demonstration set");
  const auto dim = static_cast<std::size_t>(demos.demos.front().dim);
  std::vector<float> rows;
  for (const auto& d : demos.demos) rows.insert(rows.end(), d.obs_raw.begin(), d.obs_raw.begin() + d.steps * static_cast<std::ptrdiff_t>(dim));
  return fit_normalizer_rows(rows, dim);
}

double demo_replay_error(const DemoSet& demos, const Track& track, const VehicleParams& vp, double dt) {
  double worst = 0.0;
  for (const auto& d : demos.demos) {
    VehicleState s = d.states.front();
    for (int t = 0; t < d.steps; ++t) {
      const float* a = d.action.data() + 2 * t;
      s = enforce_track_limits(step(s, scale_action({a[0], a[1]}), vp, dt), track, vp).state;
      const auto& ref = d.states[static_cast<std::size_t>(t + 1)];
      worst = std::max({worst, (s.position - ref.position).norm(), std::abs(wrap_angle(s.yaw - ref.yaw)),
                        (s.v_body - ref.v_body).norm()});
    }
  }
  return worst;
}

}  // namespace betail

#include "betail/eval.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace betail {

namespace {

// Running sums for a population mean/std.
struct Moments {
  std::int64_t n = 0;
  double sum = 0.0, sum_sq = 0.0;

  void add(double x) {
    ++n;
    sum += x;
    sum_sq += x * x;
  }
  MeanStd get() const {
    if (n == 0) return {};
    const double m = sum / static_cast<double>(n);
    return {m, std::sqrt(std::max(0.0, sum_sq / static_cast<double>(n) - m * m))};
  }
};

MeanStd two_pass(std::span<const double> x) {
  if (x.empty()) return {};
  double m = 0.0;
  for (double v : x) m += v;
  m /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - m) * (v - m);
  return {m, std::sqrt(var / static_cast<double>(x.size()))};
}

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", x);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary);
    os << text;
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

nlohmann::json mean_std_json(const MeanStd& m) { return {{"mean", m.mean}, {"std", m.std}}; }

MeanStd mean_std_from(const nlohmann::json& j) { return {j.at("mean").get<double>(), j.at("std").get<double>()}; }

}  // namespace

MeanStd steering_change(std::span<const double> delta) {
  if (delta.size() < 2) throw std::invalid_argument("steering_change: need at least 2 steps");
  std::vector<double> d(delta.size() - 1);
  for (std::size_t t = 1; t < delta.size(); ++t) d[t - 1] = std::abs(delta[t] - delta[t - 1]);
  return two_pass(d);
}

MeanStd pooled_steering_change(const std::vector<std::vector<double>>& traces) {
  std::vector<double> d;
  for (const auto& tr : traces) {
    for (std::size_t t = 1; t < tr.size(); ++t) d.push_back(std::abs(tr[t] - tr[t - 1]));
  }
  return two_pass(d);
}

EvalReport make_report(const std::vector<Trajectory>& trajs, double dt, std::string policy_id, std::string track_id,
                       std::uint64_t seed, std::int64_t env_steps) {
  EvalReport r;
  r.policy_id = std::move(policy_id);
  r.track_id = std::move(track_id);
  r.seed = seed;
  r.env_steps = env_steps;
  r.dt = dt;
  std::vector<double> laps;
  std::vector<std::vector<double>> traces;
  for (const auto& tr : trajs) {
    CarOutcome c;
    c.finished = tr.finished;
    c.lap_time = tr.finished ? tr.lap_time : 0.0;
    c.steps = tr.steps;
    c.progress = tr.total_progress;
    for (auto f : tr.off_course) c.wall_steps += f;
    if (c.finished) laps.push_back(c.lap_time);
    r.cars.push_back(c);
    std::vector<double> delta(static_cast<std::size_t>(tr.steps));
    for (int t = 0; t < tr.steps; ++t) delta[static_cast<std::size_t>(t)] = tr.steering_rad(t);
    if (tr.steps >= 2) r.steering_pairs += tr.steps - 1;
    traces.push_back(std::move(delta));
  }
  r.success_rate = r.cars.empty() ? 0.0 : static_cast<double>(laps.size()) / static_cast<double>(r.cars.size());
  if (!laps.empty()) r.lap_time = two_pass(laps);
  r.steering_change = pooled_steering_change(traces);
  return r;
}

EvalReport evaluate(Policy& policy, const Track& track, const SpeedReference& ref, const VehicleParams& vp,
                    const ObsConfig& oc, const Normalizer& norm, const EpisodeConfig& ep, std::uint64_t seed,
                    std::string policy_id, std::int64_t env_steps) {
  const auto initial = reset_eval(track, ref, ep.n_cars, seed);
  const RolloutSpec spec{RolloutMode::eval, ep.eval_steps, true, false};
  const auto trajs = rollout(policy, track, initial, vp, oc, norm, spec, derive_seed(seed, "eval-rollout"));
  return make_report(trajs, oc.dt, std::move(policy_id), track.id(), seed, env_steps);
}

EvalReport pool_reports(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw std::invalid_argument("pool_reports: nothing to pool");
  EvalReport out = reports.front();
  out.cars.clear();
  std::vector<double> laps;
  // Total variance from per-report moments: E[x^2] = std^2 + mean^2.
  double n = 0.0, s1 = 0.0, s2 = 0.0;
  for (const auto& r : reports) {
    for (const auto& c : r.cars) {
      out.cars.push_back(c);
      if (c.finished) laps.push_back(c.lap_time);
    }
    const auto k = static_cast<double>(r.steering_pairs);
    n += k;
    s1 += k * r.steering_change.mean;
    s2 += k * (r.steering_change.std * r.steering_change.std + r.steering_change.mean * r.steering_change.mean);
  }
  out.success_rate = out.cars.empty() ? 0.0 : static_cast<double>(laps.size()) / static_cast<double>(out.cars.size());
  out.lap_time = laps.empty() ? std::nullopt : std::optional<MeanStd>(two_pass(laps));
  out.steering_pairs = static_cast<std::int64_t>(n);
  if (n > 0) {
    const double m = s1 / n;
    out.steering_change = {m, std::sqrt(std::max(0.0, s2 / n - m * m))};
  }
  return out;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json cars_json = nlohmann::json::array();
  for (const auto& c : cars) {
    nlohmann::json cj = {{"finished", c.finished}, {"steps", c.steps}, {"progress", c.progress},
                         {"wall_steps", c.wall_steps}};
    cj["lap_time"] = c.finished ? nlohmann::json(c.lap_time) : nlohmann::json(nullptr);
    cars_json.push_back(cj);
  }
  nlohmann::json j = {{"policy_id", policy_id},
                      {"track_id", track_id},
                      {"seed", seed},
                      {"env_steps", env_steps},
                      {"dt", dt},
                      {"n_cars", cars.size()},
                      {"success_rate", success_rate},
                      {"steering_change", mean_std_json(steering_change)},
                      {"steering_pairs", steering_pairs},
                      {"cars", cars_json}};
  j["lap_time"] = lap_time ? mean_std_json(*lap_time) : nlohmann::json("unfinished");
  return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  r.policy_id = j.at("policy_id").get<std::string>();
  r.track_id = j.at("track_id").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.env_steps = j.at("env_steps").get<std::int64_t>();
  r.dt = j.at("dt").get<double>();
  r.success_rate = j.at("success_rate").get<double>();
  r.steering_change = mean_std_from(j.at("steering_change"));
  r.steering_pairs = j.at("steering_pairs").get<std::int64_t>();
  if (j.at("lap_time").is_object()) r.lap_time = mean_std_from(j.at("lap_time"));
  for (const auto& cj : j.at("cars")) {
    CarOutcome c;
    c.finished = cj.at("finished").get<bool>();
    c.lap_time = c.finished ? cj.at("lap_time").get<double>() : 0.0;
    c.steps = cj.at("steps").get<int>();
    c.progress = cj.at("progress").get<double>();
    c.wall_steps = cj.at("wall_steps").get<int>();
    r.cars.push_back(c);
  }
  if (r.cars.size() != j.at("n_cars").get<std::size_t>()) throw std::runtime_error("report: n_cars mismatch");
  return r;
}

void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  write_text(path, j.dump(2) + "\n");
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void emit_report(const std::filesystem::path& dir, const EvalReport& report, const std::vector<CurvePoint>& curve,
                 const nlohmann::json& provenance) {
  std::filesystem::create_directories(dir);
  std::string cars = "car,finished,lap_time,steps,progress,wall_steps\n";
  for (std::size_t i = 0; i < report.cars.size(); ++i) {
    const auto& c = report.cars[i];
    cars += std::to_string(i) + "," + (c.finished ? "1" : "0") + "," + (c.finished ? fmt(c.lap_time) : "") + "," +
            std::to_string(c.steps) + "," + fmt(c.progress) + "," + std::to_string(c.wall_steps) + "\n";
  }
  write_text(dir / "cars.csv", cars);

  std::string curves = "env_steps,success_rate,lap_time_mean,steering_change_mean\n";
  for (const auto& p : curve) {
    curves += std::to_string(p.env_steps) + "," + fmt(p.success_rate) + "," +
              (p.lap_time_mean ? fmt(*p.lap_time_mean) : "") + "," + fmt(p.steering_change_mean) + "\n";
  }
  write_text(dir / "curve.csv", curves);

  nlohmann::json summary = report.to_json();
  if (!provenance.empty()) summary["provenance"] = provenance;
  write_json_file(dir / "summary.json", summary);
}

EvalReport load_report(const std::filesystem::path& summary_json) {
  return EvalReport::from_json(read_json_file(summary_json));
}

}  // namespace betail

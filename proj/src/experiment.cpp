#include "betail/experiment.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "betail/ad/archive.hpp"

namespace betail {

namespace fs = std::filesystem;

// ---- track specs and sub-configs ---------------------------------------------------

nlohmann::json to_json(const TrackSpec& t) { return {{"preset", to_json(t.preset)}, {"seed", t.seed}}; }

TrackSpec track_spec_from_json(const nlohmann::json& j) {
  TrackSpec t;
  for (const auto& [key, v] : j.items()) {
    if (key == "preset") t.preset = preset_from_json(v);
    else if (key == "seed") t.seed = v.get<std::uint64_t>();
    else throw ConfigError("unknown track key '" + key + "'");
  }
  return t;
}

namespace {

nlohmann::json obs_to_json(const ObsConfig& c) {
  return {{"n_curvature", c.n_curvature},
          {"curvature_horizon", c.curvature_horizon},
          {"n_lookahead", c.n_lookahead},
          {"lookahead_time", c.lookahead_time},
          {"dt", c.dt}};
}

ObsConfig obs_from_json(const nlohmann::json& j, ObsConfig c) {
  for (const auto& [key, v] : j.items()) {
    if (key == "n_curvature") c.n_curvature = v.get<int>();
    else if (key == "curvature_horizon") c.curvature_horizon = v.get<double>();
    else if (key == "n_lookahead") c.n_lookahead = v.get<int>();
    else if (key == "lookahead_time") c.lookahead_time = v.get<double>();
    else if (key == "dt") c.dt = v.get<double>();
    else throw ConfigError("unknown obs key '" + key + "'");
  }
  if (c.n_curvature < 1 || c.n_lookahead < 1 || !(c.curvature_horizon > 0) || !(c.lookahead_time > 0) || !(c.dt > 0)) {
    throw ConfigError("obs: counts must be >= 1 and horizons/dt positive");
  }
  return c;
}

nlohmann::json episode_to_json(const EpisodeConfig& c) {
  return {{"dt", c.dt}, {"train_steps", c.train_steps}, {"eval_steps", c.eval_steps}, {"n_cars", c.n_cars}};
}

EpisodeConfig episode_from_json(const nlohmann::json& j, EpisodeConfig c) {
  for (const auto& [key, v] : j.items()) {
    if (key == "dt") c.dt = v.get<double>();
    else if (key == "train_steps") c.train_steps = v.get<int>();
    else if (key == "eval_steps") c.eval_steps = v.get<int>();
    else if (key == "n_cars") c.n_cars = v.get<int>();
    else throw ConfigError("unknown episode key '" + key + "'");
  }
  if (c.train_steps < 1 || c.eval_steps < 1 || c.n_cars < 1 || !(c.dt > 0)) {
    throw ConfigError("episode: steps and n_cars must be >= 1");
  }
  return c;
}

template <typename T, typename ToJson, typename FromJson>
T merge(const T& base, const nlohmann::json& patch, ToJson to, FromJson from, const char* what) {
  if (!patch.is_object()) throw ConfigError(std::string(what) + " must be an object");
  nlohmann::json j = to(base);
  for (const auto& [key, v] : patch.items()) {
    if (!j.contains(key)) throw ConfigError("unknown " + std::string(what) + " key '" + key + "'");
    j[key] = v;
  }
  return from(j);
}

bool is_residual(StackMode m) { return mode_info(m).residual; }

double challenge_alpha(const std::string& name) {
  if (name == "dragontail") return 0.10;
  if (name == "panorama") return 0.2;
  return 0.05;
}

std::string fmt_g(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", x);
  return buf;
}

}  // namespace

// ---- ExperimentConfig ---------------------------------------------------------------

std::vector<TrackSpec> ExperimentConfig::pretrain_set() const {
  if (!pretrain_tracks.empty()) return pretrain_tracks;
  if (!track) throw ConfigError("config has no track");
  return {*track};
}

bool ExperimentConfig::cross_track() const {
  const auto set = pretrain_set();
  return set.size() != 1 || to_json(set[0]) != to_json(*track);
}

int ExperimentConfig::iterations() const {
  const std::int64_t per = static_cast<std::int64_t>(episode.n_cars) * episode.train_steps;
  return static_cast<int>((env_steps + per - 1) / per);
}

AilConfig ExperimentConfig::ail_for_mode() const {
  AilConfig c = ail;
  if (mode && is_residual(*mode)) c.alpha = alpha.value_or(challenge_alpha(challenge));
  return c;
}

std::string ExperimentConfig::run_name() const {
  if (!mode) throw ConfigError("config has no mode");
  std::string name = mode_name(*mode);
  if (is_residual(*mode)) name += "-a" + fmt_g(ail_for_mode().alpha);
  return name + "-s" + std::to_string(seed);
}

std::uint64_t ExperimentConfig::hash() const {
  auto j = to_json(*this);
  j.erase("out");
  return fnv1a(j.dump());
}

void ExperimentConfig::validate_for_training() const {
  if (!track) throw ConfigError("config needs a track (or a challenge)");
  if (!mode) throw ConfigError("config needs a mode");
  if (is_residual(*mode)) {
    if (!alpha && challenge.empty()) throw ConfigError("mode " + mode_name(*mode) + " needs alpha");
  } else if (alpha) {
    throw ConfigError("alpha only applies to residual modes, not " + mode_name(*mode));
  }
  ail_for_mode().validate();
  bet.validate();
  if (env_steps < 0 || eval_every < 1) throw ConfigError("need env_steps >= 0 and eval_every >= 1");
  if (pretrain_demo_laps < 1 || demo_laps < 1) throw ConfigError("demo lap counts must be >= 1");
  if (stop_at_success && !(*stop_at_success > 0.0 && *stop_at_success <= 1.0)) {
    throw ConfigError("stop_at_success must lie in (0, 1]");
  }
}

ExperimentConfig profile_defaults(const std::string& profile) {
  ExperimentConfig c;
  c.profile = profile;
  if (profile == "desk") return c;
  if (profile == "paper") {
    c.ail = AilConfig::paper_profile();
    c.bet = BetConfig::paper_profile();
    c.env_steps = 8000000;
    c.eval_every = 20;
    return c;
  }
  if (profile == "smoke") {
    c.pretrain_demo_laps = 2;
    c.demo_laps = 2;
    c.bet.embed = 16;
    c.bet.layers = 1;
    c.bet.heads = 2;
    c.bet.updates = 200;
    c.ail.hidden = {64, 64};
    c.ail.disc_hidden = {16, 16};
    c.ail.bc_hidden = {64, 64};
    c.ail.batch = 128;
    c.ail.grad_steps = 20;
    c.ail.disc_updates = 4;
    c.ail.disc_batch = 128;
    c.ail.replay_capacity = 20000;
    c.ail.bc_steps = 100;
    c.episode.n_cars = 4;
    c.episode.eval_steps = 2000;
    c.env_steps = 2000;
    c.eval_every = 1;
    return c;
  }
  throw ConfigError("unknown profile '" + profile + "' (expected desk, paper or smoke)");
}

void apply_challenge(ExperimentConfig& cfg, const std::string& name) {
  auto rnd = [](std::uint64_t seed) { return TrackSpec{TrackPreset::random(12, 0.3), seed}; };
  if (name == "maggiore") {
    cfg.pretrain_tracks.clear();
    cfg.track = rnd(1);
  } else if (name == "dragontail") {
    cfg.pretrain_tracks = {rnd(1)};
    cfg.track = rnd(5);
  } else if (name == "panorama") {
    cfg.pretrain_tracks = {rnd(2), rnd(3), rnd(4)};
    cfg.track = rnd(5);
  } else {
    throw ConfigError("unknown challenge '" + name + "' (expected maggiore, dragontail or panorama)");
  }
  // Demo counts: one target lap on panorama; full-scale counts in the paper profile.
  if (name == "panorama") cfg.demo_laps = 1;
  if (cfg.profile == "paper") {
    cfg.pretrain_demo_laps = name == "panorama" ? 26 : 49;
    cfg.demo_laps = name == "maggiore" ? 49 : name == "dragontail" ? 12 : 1;
  }
  cfg.challenge = name;
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  ExperimentConfig c = profile_defaults(j.value("profile", std::string("desk")));
  if (j.contains("challenge") && !j.at("challenge").get<std::string>().empty()) {
    apply_challenge(c, j.at("challenge").get<std::string>());
  }
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "profile" || key == "challenge") continue;
      if (key == "pretrain_tracks") {
        c.pretrain_tracks.clear();
        for (const auto& t : v) c.pretrain_tracks.push_back(track_spec_from_json(t));
      } else if (key == "track") c.track = track_spec_from_json(v);
      else if (key == "pretrain_demo_laps") c.pretrain_demo_laps = v.get<int>();
      else if (key == "demo_laps") c.demo_laps = v.get<int>();
      else if (key == "demo_seed") c.demo_seed = v.get<std::uint64_t>();
      else if (key == "mode") c.mode = v.is_null() ? std::nullopt : std::optional(parse_mode(v.get<std::string>()));
      else if (key == "alpha") c.alpha = v.is_null() ? std::nullopt : std::optional(v.get<double>());
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "bet_seed") c.bet_seed = v.get<std::uint64_t>();
      else if (key == "env_steps") c.env_steps = v.get<std::int64_t>();
      else if (key == "eval_every") c.eval_every = v.get<int>();
      else if (key == "out") c.out = v.get<std::string>();
      else if (key == "stop_at_success") {
        c.stop_at_success = v.is_null() ? std::nullopt : std::optional(v.get<double>());
      } else if (key == "vehicle") {
        c.vehicle = merge(c.vehicle, v, [](const VehicleParams& p) { return to_json(p); }, vehicle_params_from_json, "vehicle");
      } else if (key == "expert") {
        c.expert = merge(c.expert, v, [](const ExpertParams& p) { return to_json(p); }, expert_params_from_json, "expert");
      } else if (key == "bet") {
        c.bet = merge(c.bet, v, [](const BetConfig& p) { return to_json(p); }, bet_config_from_json, "bet");
      } else if (key == "ail") {
        c.ail = ail_config_from_json(v, c.ail);
      } else if (key == "obs") {
        c.obs = obs_from_json(v, c.obs);
      } else if (key == "episode") {
        c.episode = episode_from_json(v, c.episode);
      } else {
        throw ConfigError("unknown config key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json pre = nlohmann::json::array();
  for (const auto& t : c.pretrain_tracks) pre.push_back(to_json(t));
  nlohmann::json j = {{"profile", c.profile},
                      {"challenge", c.challenge},
                      {"pretrain_tracks", pre},
                      {"pretrain_demo_laps", c.pretrain_demo_laps},
                      {"demo_laps", c.demo_laps},
                      {"demo_seed", c.demo_seed},
                      {"seed", c.seed},
                      {"bet_seed", c.bet_seed},
                      {"env_steps", c.env_steps},
                      {"eval_every", c.eval_every},
                      {"vehicle", to_json(c.vehicle)},
                      {"expert", to_json(c.expert)},
                      {"obs", obs_to_json(c.obs)},
                      {"episode", episode_to_json(c.episode)},
                      {"bet", to_json(c.bet)},
                      {"ail", to_json(c.ail)}};
  j["track"] = c.track ? to_json(*c.track) : nlohmann::json(nullptr);
  j["mode"] = c.mode ? nlohmann::json(mode_name(*c.mode)) : nlohmann::json(nullptr);
  j["alpha"] = c.alpha ? nlohmann::json(*c.alpha) : nlohmann::json(nullptr);
  j["stop_at_success"] = c.stop_at_success ? nlohmann::json(*c.stop_at_success) : nlohmann::json(nullptr);
  if (!c.out.empty()) j["out"] = c.out;
  return j;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return experiment_config_from_json(j);
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 1469598103934665603ull;
  for (char ch : text) {
    h ^= static_cast<unsigned char>(ch);
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex64(std::uint64_t x) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(x));
  return buf;
}

// ---- lock ---------------------------------------------------------------------------

DirectoryLock::DirectoryLock(const fs::path& dir) : path_(dir / ".lock") {
  fs::create_directories(dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    throw std::runtime_error("output directory " + dir.string() + " is locked by another run (remove " +
                             path_.string() + " if that run is gone)");
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

DirectoryLock::~DirectoryLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

// ---- pipeline -----------------------------------------------------------------------

namespace {

// Stage fingerprints: an artifact is reused only if its stage inputs match.
std::string tracks_key(const ExperimentConfig& c) {
  nlohmann::json pre = nlohmann::json::array();
  for (const auto& t : c.pretrain_set()) pre.push_back(to_json(t));
  return hex64(fnv1a(nlohmann::json{{"pretrain", pre}, {"track", to_json(*c.track)}}.dump()));
}

std::string demos_key(const ExperimentConfig& c) {
  return hex64(fnv1a(nlohmann::json{{"tracks", tracks_key(c)},
                                    {"expert", to_json(c.expert)},
                                    {"vehicle", to_json(c.vehicle)},
                                    {"obs", obs_to_json(c.obs)},
                                    {"pretrain_demo_laps", c.pretrain_demo_laps},
                                    {"demo_laps", c.demo_laps},
                                    {"demo_seed", c.demo_seed}}
                         .dump()));
}

// The BeT depends on the pretraining side only, so one checkpoint serves every
// fine-tuning track built from the same pretraining set.
std::string bet_key(const ExperimentConfig& c) {
  nlohmann::json pre = nlohmann::json::array();
  for (const auto& t : c.pretrain_set()) pre.push_back(to_json(t));
  return hex64(fnv1a(nlohmann::json{{"pretrain", pre},
                                    {"expert", to_json(c.expert)},
                                    {"vehicle", to_json(c.vehicle)},
                                    {"obs", obs_to_json(c.obs)},
                                    {"pretrain_demo_laps", c.pretrain_demo_laps},
                                    {"demo_seed", c.demo_seed},
                                    {"bet", to_json(c.bet)},
                                    {"bet_seed", c.bet_seed}}
                         .dump()));
}

DemoSet merge_demos(const std::vector<DemoSet>& sets) {
  DemoSet out = sets.front();
  if (sets.size() > 1) out.track_id = "pretrain-set";
  for (std::size_t i = 1; i < sets.size(); ++i) {
    out.demos.insert(out.demos.end(), sets[i].demos.begin(), sets[i].demos.end());
    out.lap_seeds.insert(out.lap_seeds.end(), sets[i].lap_seeds.begin(), sets[i].lap_seeds.end());
  }
  return out;
}

void check_stage(const fs::path& provenance_file, const std::string& key, const std::string& stage) {
  const auto j = read_json_file(provenance_file);
  if (j.value("stage_key", std::string()) != key) {
    throw ConfigError(stage + " artifacts in " + provenance_file.parent_path().string() +
                      " come from a different configuration; use a fresh --out");
  }
}

std::vector<CurvePoint> curve_from_json(const nlohmann::json& j) {
  std::vector<CurvePoint> c;
  for (const auto& p : j) {
    CurvePoint q;
    q.env_steps = p.at("env_steps").get<std::int64_t>();
    q.success_rate = p.at("success_rate").get<double>();
    if (!p.at("lap_time_mean").is_null()) q.lap_time_mean = p.at("lap_time_mean").get<double>();
    q.steering_change_mean = p.at("steering_change_mean").get<double>();
    c.push_back(q);
  }
  return c;
}

nlohmann::json curve_to_json(const std::vector<CurvePoint>& c) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& p : c) {
    j.push_back({{"env_steps", p.env_steps},
                 {"success_rate", p.success_rate},
                 {"lap_time_mean", p.lap_time_mean ? nlohmann::json(*p.lap_time_mean) : nlohmann::json(nullptr)},
                 {"steering_change_mean", p.steering_change_mean}});
  }
  return j;
}

CurvePoint curve_point(const EvalReport& r) {
  return {r.env_steps, r.success_rate, r.lap_time ? std::optional(r.lap_time->mean) : std::nullopt,
          r.steering_change.mean};
}

}  // namespace

Pipeline::Pipeline(ExperimentConfig cfg, fs::path root) : cfg_(std::move(cfg)), root_(std::move(root)) {
  if (!cfg_.track) throw ConfigError("config needs a track (or a challenge)");
}

nlohmann::json Pipeline::provenance() const {
  return {{"config_hash", hex64(cfg_.hash())}, {"content_version", kContentVersion}, {"seed", cfg_.seed}};
}

void Pipeline::write_artifact_json(const fs::path& path, nlohmann::json j) const {
  fs::create_directories(path.parent_path());
  j["provenance"] = provenance();
  write_json_file(path, j);
}

fs::path Pipeline::require(const fs::path& rel) const {
  const fs::path p = root_ / rel;
  if (!fs::exists(p)) throw MissingArtifact(p);
  return p;
}

std::uint64_t Pipeline::eval_seed() const { return derive_seed(cfg_.seed, "eval"); }

void Pipeline::gen_tracks() {
  const std::string key = tracks_key(cfg_);
  if (fs::exists(root_ / "tracks" / "provenance.json")) {
    check_stage(root_ / "tracks" / "provenance.json", key, "track");
    return;
  }
  const auto pre = cfg_.pretrain_set();
  for (std::size_t i = 0; i < pre.size(); ++i) {
    write_artifact_json(root_ / "tracks" / ("pretrain_" + std::to_string(i) + ".json"), pre[i].generate().to_json());
  }
  write_artifact_json(root_ / "tracks" / "target.json", cfg_.track->generate().to_json());
  write_artifact_json(root_ / "tracks" / "provenance.json", {{"stage_key", key}});
}

void Pipeline::gen_demos() {
  const std::string key = demos_key(cfg_);
  if (fs::exists(root_ / "demos" / "provenance.json")) {
    check_stage(root_ / "demos" / "provenance.json", key, "demo");
    return;
  }
  require("tracks/provenance.json");
  check_stage(root_ / "tracks" / "provenance.json", tracks_key(cfg_), "track");
  std::vector<DemoSet> pre;
  const auto specs = cfg_.pretrain_set();
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const Track t = Track::from_json(read_json_file(require("tracks/pretrain_" + std::to_string(i) + ".json")));
    pre.push_back(generate_demos(t, cfg_.pretrain_demo_laps, cfg_.expert, cfg_.vehicle, cfg_.obs,
                                 derive_seed(cfg_.demo_seed, "pretrain-demos", i)));
    pre.back().save(root_ / "demos" / ("pretrain_" + std::to_string(i)));
  }
  const Track target = target_track();
  const DemoSet tgt = cfg_.cross_track()
                          ? generate_demos(target, cfg_.demo_laps, cfg_.expert, cfg_.vehicle, cfg_.obs,
                                           derive_seed(cfg_.demo_seed, "target-demos"))
                          : generate_demos(target, cfg_.demo_laps, cfg_.expert, cfg_.vehicle, cfg_.obs,
                                           derive_seed(cfg_.demo_seed, "pretrain-demos", 0));
  tgt.save(root_ / "demos" / "target");
  write_artifact_json(root_ / "demos" / "pretrain_normalizer.json", fit_normalizer(merge_demos(pre)).to_json());
  write_artifact_json(root_ / "demos" / "target_normalizer.json", fit_normalizer(tgt).to_json());
  write_artifact_json(root_ / "demos" / "provenance.json", {{"stage_key", key}});
}

Track Pipeline::target_track() const { return Track::from_json(read_json_file(require("tracks/target.json"))); }

DemoSet Pipeline::target_demos() const {
  require("demos/provenance.json");
  return DemoSet::load(root_ / "demos" / "target");
}

Normalizer Pipeline::normalizer() const {
  // The BeT sees states through the statistics of its own training data.
  const bool bet = cfg_.mode && mode_info(*cfg_.mode).bet_base;
  return Normalizer::from_json(
      read_json_file(require(bet ? "demos/pretrain_normalizer.json" : "demos/target_normalizer.json")));
}

BetModel<float> Pipeline::bet_model() const {
  require("bet_train.json");
  check_stage(root_ / "bet_train.json", bet_key(cfg_), "BeT");
  return load_bet(require("bet.ckpt"));
}

double Pipeline::pretrain_bet() {
  const std::string key = bet_key(cfg_);
  if (fs::exists(root_ / "bet_train.json") && fs::exists(root_ / "bet.ckpt")) {
    check_stage(root_ / "bet_train.json", key, "BeT");
    return read_json_file(root_ / "bet_train.json").at("dataset_mse").get<double>();
  }
  require("demos/provenance.json");
  check_stage(root_ / "demos" / "provenance.json", demos_key(cfg_), "demo");
  std::vector<DemoSet> sets;
  for (std::size_t i = 0; i < cfg_.pretrain_set().size(); ++i) {
    sets.push_back(DemoSet::load(root_ / "demos" / ("pretrain_" + std::to_string(i))));
  }
  const DemoSet all = merge_demos(sets);
  const Normalizer norm = Normalizer::from_json(read_json_file(require("demos/pretrain_normalizer.json")));
  const BetDataset data = BetDataset::from_demos(all, norm, cfg_.bet.k_train);
  BetModel<float> model(cfg_.bet, cfg_.obs.dim(), cfg_.bet_seed);
  BetTrainer trainer(model, data, cfg_.bet_seed);
  nlohmann::json losses = nlohmann::json::array();
  for (int k = 0; k < cfg_.bet.updates; ++k) {
    const double l = trainer.train_step();
    if (k % 100 == 99) losses.push_back({{"update", k + 1}, {"loss", l}});
  }
  const double mse = trainer.dataset_mse();
  const fs::path tmp = root_ / "bet.ckpt.tmp";
  save_bet(tmp, model);
  fs::rename(tmp, root_ / "bet.ckpt");
  write_artifact_json(root_ / "bet_train.json", {{"stage_key", key},
                                                 {"updates", cfg_.bet.updates},
                                                 {"dataset_mse", mse},
                                                 {"parameter_count", model.parameter_count()},
                                                 {"windows", data.window_count(cfg_.bet.k_train)},
                                                 {"losses", losses}});
  return mse;
}

EvalReport Pipeline::train(const std::function<void(const TrainProgress&)>& on_iteration) {
  cfg_.validate_for_training();
  const StackMode mode = *cfg_.mode;
  const Track track = target_track();
  const DemoSet demos = target_demos();
  const Normalizer norm = normalizer();
  std::optional<BetModel<float>> bet;
  if (mode_info(mode).bet_base) {
    if (!fs::exists(root_ / "bet.ckpt")) throw MissingArtifact(root_ / "bet.ckpt");
    bet = bet_model();
  }
  const TrainContext ctx{&track, &demos, norm, cfg_.vehicle, cfg_.obs, cfg_.episode};
  StackTrainer trainer(mode, cfg_.ail_for_mode(), ctx, bet ? &*bet : nullptr, cfg_.seed);
  const SpeedReference ref = demos.speed_reference(track);
  const fs::path dir = run_dir();
  const fs::path ckpt = dir / "checkpoint";
  fs::create_directories(dir);

  std::vector<CurvePoint> curve;
  nlohmann::json logs = nlohmann::json::array();
  std::optional<EvalReport> last;
  if (fs::exists(ckpt / "progress.json")) {
    const auto p = read_json_file(ckpt / "progress.json");
    if (p.at("provenance").at("config_hash") != hex64(cfg_.hash())) {
      throw ConfigError("checkpoint in " + ckpt.string() + " was written by a different configuration");
    }
    trainer.load(ckpt);
    curve = curve_from_json(p.at("curve"));
    logs = p.at("logs");
    if (p.contains("last_report")) last = EvalReport::from_json(p.at("last_report"));
  }

  auto eval_now = [&] {
    StackPolicy pol = trainer.policy();
    return evaluate(pol, track, ref, cfg_.vehicle, cfg_.obs, norm, cfg_.episode, eval_seed(), cfg_.run_name(),
                    trainer.env_steps());
  };
  auto save_checkpoint = [&] {
    const fs::path tmp = dir / "checkpoint.tmp";
    fs::remove_all(tmp);
    trainer.save(tmp);
    nlohmann::json p = {{"curve", curve_to_json(curve)}, {"logs", logs}, {"provenance", provenance()}};
    if (last) p["last_report"] = last->to_json();
    write_json_file(tmp / "progress.json", p);
    fs::remove_all(ckpt);
    fs::rename(tmp, ckpt);
  };
  auto reached = [&] { return cfg_.stop_at_success && last && last->success_rate >= *cfg_.stop_at_success; };

  if (trains_online(mode)) {
    const int total = cfg_.iterations();
    if (curve.empty()) {
      last = eval_now();
      curve.push_back(curve_point(*last));
      if (on_iteration) on_iteration({IterationLog{}, last});
    }
    while (trainer.iteration() < total && !reached()) {
      TrainProgress prog{trainer.iterate(), std::nullopt};
      const bool eval_iter = trainer.iteration() % cfg_.eval_every == 0 || trainer.iteration() == total;
      nlohmann::json line = prog.log.to_json();
      if (eval_iter) {
        last = eval_now();
        prog.report = last;
        curve.push_back(curve_point(*last));
        write_artifact_json(dir / "reports" / ("step_" + std::to_string(trainer.env_steps()) + ".json"),
                            last->to_json());
        line["eval"] = {{"success_rate", last->success_rate},
                        {"lap_time_mean", last->lap_time ? nlohmann::json(last->lap_time->mean) : nlohmann::json(nullptr)},
                        {"steering_change_mean", last->steering_change.mean}};
      }
      logs.push_back(line);
      if (on_iteration) on_iteration(prog);
      if (eval_iter) save_checkpoint();
    }
  } else {
    last = eval_now();
    curve = {curve_point(*last)};
    save_checkpoint();
  }

  std::string jsonl;
  for (const auto& l : logs) jsonl += l.dump() + "\n";
  {
    std::ofstream os(dir / "log.jsonl", std::ios::binary);
    os << jsonl;
  }
  nlohmann::json prov = provenance();
  prov["run"] = cfg_.run_name();
  prov["iterations"] = trainer.iteration();
  prov["stopped_at_success"] = reached();
  emit_report(dir, *last, curve, prov);
  return *last;
}

EvalReport Pipeline::evaluate_checkpoint(const fs::path& out_dir) {
  cfg_.validate_for_training();
  const StackMode mode = *cfg_.mode;
  const Track track = target_track();
  const DemoSet demos = target_demos();
  const Normalizer norm = normalizer();
  std::optional<BetModel<float>> bet;
  if (mode_info(mode).bet_base) bet = bet_model();
  const TrainContext ctx{&track, &demos, norm, cfg_.vehicle, cfg_.obs, cfg_.episode};
  StackTrainer trainer(mode, cfg_.ail_for_mode(), ctx, bet ? &*bet : nullptr, cfg_.seed);
  if (mode != StackMode::bet) trainer.load(require(fs::relative(run_dir() / "checkpoint", root_)));
  StackPolicy pol = trainer.policy();
  const EvalReport r = evaluate(pol, track, demos.speed_reference(track), cfg_.vehicle, cfg_.obs, norm, cfg_.episode,
                                eval_seed(), cfg_.run_name(), trainer.env_steps());
  nlohmann::json prov = provenance();
  prov["run"] = cfg_.run_name();
  emit_report(out_dir, r, {curve_point(r)}, prov);
  return r;
}

EvalReport Pipeline::run(const std::function<void(const TrainProgress&)>& on_iteration) {
  cfg_.validate_for_training();
  gen_tracks();
  gen_demos();
  if (mode_info(*cfg_.mode).bet_base) pretrain_bet();
  return train(on_iteration);
}

}  // namespace betail

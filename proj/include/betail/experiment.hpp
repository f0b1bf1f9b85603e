#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "betail/eval.hpp"
#include "betail/stack.hpp"

namespace betail {

/// Bumped whenever an artifact format or pipeline semantics change.
inline constexpr int kContentVersion = 1;

struct TrackSpec {
  TrackPreset preset;
  std::uint64_t seed = 1;

  Track generate() const { return gen_track(seed, preset); }
};

nlohmann::json to_json(const TrackSpec& t);
TrackSpec track_spec_from_json(const nlohmann::json& j);

/// A single file fully determines a run. Defaults follow the profile; keys
/// present in the file override them.
struct ExperimentConfig {
  std::string profile = "desk";  // desk | paper | smoke
  std::string challenge;         // empty, maggiore, dragontail or panorama
  std::vector<TrackSpec> pretrain_tracks;  // empty: the fine-tuning track
  std::optional<TrackSpec> track;          // fine-tuning / evaluation track
  int pretrain_demo_laps = 8;  // per pretraining track
  int demo_laps = 8;           // on the fine-tuning track, used by the discriminator and BC
  std::uint64_t demo_seed = 11;
  std::optional<StackMode> mode;
  std::optional<double> alpha;
  std::uint64_t seed = 1;      // fine-tuning seed
  std::uint64_t bet_seed = 1;  // pretraining seed, shared across fine-tuning seeds
  std::int64_t env_steps = 200000;
  int eval_every = 2;  // iterations between periodic evaluations (and checkpoints)
  std::optional<double> stop_at_success;  // end training at the first evaluation at or above this
  std::string out;  // output root; --out wins, empty falls back to $BETAIL_OUT_ROOT

  VehicleParams vehicle;
  ExpertParams expert;
  ObsConfig obs;
  EpisodeConfig episode;
  BetConfig bet;
  AilConfig ail;

  /// Pretraining tracks with the empty default resolved.
  std::vector<TrackSpec> pretrain_set() const;
  bool cross_track() const;
  int iterations() const;
  /// Residual modes take alpha from here; others ignore it.
  AilConfig ail_for_mode() const;
  /// Name of the training run directory, e.g. "betail-a0.05".
  std::string run_name() const;
  /// Content hash; the output root is not part of it.
  std::uint64_t hash() const;
  void validate_for_training() const;
};

/// Defaults for a profile (desk, paper, smoke).
ExperimentConfig profile_defaults(const std::string& profile);
/// Track layout, demo counts and alpha of a named challenge.
void apply_challenge(ExperimentConfig& cfg, const std::string& name);
/// Strict parse: unknown keys raise ConfigError naming the key.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// Content hash used in artifact provenance.
std::uint64_t fnv1a(const std::string& text);
std::string hex64(std::uint64_t x);

/// Prerequisite artifact absent; the message names it.
class MissingArtifact : public std::runtime_error {
 public:
  explicit MissingArtifact(const std::filesystem::path& p)
      : std::runtime_error("missing artifact " + p.string()), path(p) {}
  std::filesystem::path path;
};

/// One run per output directory.
class DirectoryLock {
 public:
  explicit DirectoryLock(const std::filesystem::path& dir);
  ~DirectoryLock();
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  std::filesystem::path path_;
};

struct TrainProgress {
  IterationLog log;
  std::optional<EvalReport> report;  // set on evaluation iterations
};

/// Artifact layout under one output root:
///   tracks/pretrain_N.json, tracks/target.json
///   demos/pretrain_N/, demos/target/, normalizer.json
///   bet.ckpt, bet_train.json
///   runs/<run>/{checkpoint/, log.jsonl, curve.json, summary.json, cars.csv, curve.csv}
///   eval/<run>/...
class Pipeline {
 public:
  Pipeline(ExperimentConfig cfg, std::filesystem::path root);

  const ExperimentConfig& config() const { return cfg_; }
  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path run_dir() const { return root_ / "runs" / cfg_.run_name(); }
  nlohmann::json provenance() const;

  void gen_tracks();
  void gen_demos();
  /// Trains the BeT unless bet.ckpt exists; returns the final dataset MSE.
  double pretrain_bet();
  /// Fine-tunes from the latest checkpoint of run_dir() (or from scratch) to
  /// the step budget. Returns the final report.
  EvalReport train(const std::function<void(const TrainProgress&)>& on_iteration = {});
  /// Evaluates the run's checkpoint (or the BeT alone in mode bet).
  EvalReport evaluate_checkpoint(const std::filesystem::path& out_dir);
  /// Every stage in order, reusing artifacts that already exist.
  EvalReport run(const std::function<void(const TrainProgress&)>& on_iteration = {});

  Track target_track() const;
  DemoSet target_demos() const;
  Normalizer normalizer() const;
  BetModel<float> bet_model() const;

 private:
  ExperimentConfig cfg_;
  std::filesystem::path root_;

  std::filesystem::path require(const std::filesystem::path& rel) const;
  std::uint64_t eval_seed() const;
  void write_artifact_json(const std::filesystem::path& path, nlohmann::json j) const;
};

}  // namespace betail

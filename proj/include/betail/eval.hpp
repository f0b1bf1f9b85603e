#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "betail/env.hpp"

namespace betail {

struct CarOutcome {
  bool finished = false;
  double lap_time = 0.0;  // seconds, valid when finished
  int steps = 0;
  double progress = 0.0;
  int wall_steps = 0;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population
};

struct EvalReport {
  std::string policy_id;
  std::string track_id;
  std::uint64_t seed = 0;
  std::int64_t env_steps = 0;  // training steps behind the evaluated policy
  double dt = 0.1;
  std::vector<CarOutcome> cars;
  double success_rate = 0.0;
  std::optional<MeanStd> lap_time;  // absent with zero finishers
  MeanStd steering_change;           // |delta_t - delta_{t-1}| in rad
  std::int64_t steering_pairs = 0;   // samples behind steering_change

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

/// Statistics of |delta_t - delta_{t-1}| for one steering trace (rad).
MeanStd steering_change(std::span<const double> delta);

/// Same statistics pooled over every consecutive pair of every trace.
MeanStd pooled_steering_change(const std::vector<std::vector<double>>& traces);

/// Builds the report from evaluation trajectories.
EvalReport make_report(const std::vector<Trajectory>& trajs, double dt, std::string policy_id, std::string track_id,
                       std::uint64_t seed, std::int64_t env_steps);

/// Evenly spaced cars with one seeded offset, each with the eval step budget
/// and one lap to complete. Residual policies act on their mean.
EvalReport evaluate(Policy& policy, const Track& track, const SpeedReference& ref, const VehicleParams& vp,
                    const ObsConfig& oc, const Normalizer& norm, const EpisodeConfig& ep, std::uint64_t seed,
                    std::string policy_id, std::int64_t env_steps = 0);

/// Pools several reports (e.g. seeds) into one: outcomes are concatenated
/// and the total mean/std is taken over the union of cars and steering pairs.
EvalReport pool_reports(const std::vector<EvalReport>& reports);

struct CurvePoint {
  std::int64_t env_steps = 0;
  double success_rate = 0.0;
  std::optional<double> lap_time_mean;
  double steering_change_mean = 0.0;
};

/// Writes cars.csv, curve.csv and summary.json into `dir`. Output depends
/// only on the inputs (fixed column order and number formatting).
void emit_report(const std::filesystem::path& dir, const EvalReport& report, const std::vector<CurvePoint>& curve,
                 const nlohmann::json& provenance = nlohmann::json::object());
EvalReport load_report(const std::filesystem::path& summary_json);

/// Writes a JSON document with sorted keys, 2-space indent and a trailing
/// newline, through a temporary file.
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json_file(const std::filesystem::path& path);

}  // namespace betail

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "betail/experiment.hpp"

namespace fs = std::filesystem;
using namespace betail;

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;

struct CommonArgs {
  std::string config;
  std::string challenge;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string mode;
  std::optional<double> alpha;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config, "experiment config (JSON)");
  cmd->add_option("--challenge", a.challenge, "named layout: maggiore, dragontail or panorama");
  cmd->add_option("--seed", a.seed, "fine-tuning seed");
  cmd->add_option("--out", a.out, "output root (default: the config's \"out\", then $BETAIL_OUT_ROOT, then ./betail-out)");
}

void add_mode(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--mode", a.mode, "betail, ail, bc, bcail, sac, betsac (eval also accepts bet)");
  cmd->add_option("--alpha", a.alpha, "residual scale, residual modes only");
}

ExperimentConfig resolve_config(const CommonArgs& a) {
  ExperimentConfig c = a.config.empty() ? profile_defaults("desk") : load_experiment_config(a.config);
  if (!a.challenge.empty()) {
    // Layout, demo counts and (when unset) alpha.
    apply_challenge(c, a.challenge);
  }
  if (a.seed) c.seed = *a.seed;
  if (!a.mode.empty()) c.mode = parse_mode(a.mode);
  if (a.alpha) {
    if (!c.mode || !mode_info(*c.mode).residual) throw ConfigError("--alpha needs a residual --mode");
    c.alpha = *a.alpha;
  }
  return c;
}

fs::path out_root(const CommonArgs& a, const std::string& from_config) {
  if (!a.out.empty()) return a.out;
  if (!from_config.empty()) return from_config;
  if (const char* env = std::getenv("BETAIL_OUT_ROOT"); env != nullptr && *env != '\0') return env;
  return "betail-out";
}

void print_report(const std::string& label, const EvalReport& r) {
  std::printf("%-24s success %.2f  lap %s  steering %.4f +- %.4f rad  (%zu cars, %lld env steps)\n", label.c_str(),
              r.success_rate,
              r.lap_time ? (std::to_string(r.lap_time->mean).substr(0, 6) + " s").c_str() : "unfinished",
              r.steering_change.mean, r.steering_change.std, r.cars.size(), static_cast<long long>(r.env_steps));
}

void log_progress(const TrainProgress& p) {
  if (p.log.iteration > 0) {
    std::fprintf(stderr, "iter %lld  steps %lld  disc %.3f  q %.3f  reward %.3f  progress %.0f m  wall %.3f\n",
                 static_cast<long long>(p.log.iteration), static_cast<long long>(p.log.env_steps), p.log.disc.total,
                 p.log.sac.q_loss, p.log.sac.reward, p.log.rollout_progress, p.log.rollout_wall);
  }
  if (p.report) {
    std::fprintf(stderr, "  eval  success %.2f  lap %.1f  steering %.4f\n", p.report->success_rate,
                 p.report->lap_time ? p.report->lap_time->mean : -1.0, p.report->steering_change.mean);
  }
}

void write_config(const fs::path& root, const ExperimentConfig& c) {
  fs::create_directories(root);
  write_json_file(root / "config.json", to_json(c));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Residual imitation learning laboratory on a 2D racing simulator"};
  app.require_subcommand(1);
  CommonArgs a;
  std::vector<std::string> runs;
  std::string ckpt;

  auto* gen_track_cmd = app.add_subcommand("gen-track", "generate the pretraining and target tracks");
  auto* gen_demos_cmd = app.add_subcommand("gen-demos", "record expert demonstrations on every track");
  auto* pretrain_cmd = app.add_subcommand("pretrain-bet", "train the sequence model on the pretraining demos");
  auto* train_cmd = app.add_subcommand("train", "fine-tune a policy online (resumes from the latest checkpoint)");
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a trained checkpoint on the target track");
  auto* report_cmd = app.add_subcommand("report", "pool run summaries (e.g. seeds) into one report");
  auto* info_cmd = app.add_subcommand("bet-info", "print a BeT checkpoint's configuration and size");
  auto* run_cmd = app.add_subcommand("run", "every stage in order, reusing existing artifacts");
  for (auto* c : {gen_track_cmd, gen_demos_cmd, pretrain_cmd, train_cmd, eval_cmd, report_cmd, info_cmd, run_cmd}) {
    add_common(c, a);
  }
  for (auto* c : {train_cmd, eval_cmd, run_cmd}) add_mode(c, a);
  report_cmd->add_option("--runs", runs, "run directories holding summary.json")->required();
  info_cmd->add_option("--ckpt", ckpt, "checkpoint path (default <out>/bet.ckpt)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitConfig;
  }

  try {
    if (info_cmd->parsed()) {
      const fs::path root = out_root(a, a.config.empty() ? "" : load_experiment_config(a.config).out);
      const BetModel<float> m = load_bet(ckpt.empty() ? root / "bet.ckpt" : fs::path(ckpt));
      std::cout << m.descriptor().dump(2) << "\nparameters: " << m.parameter_count() << "\n";
      return 0;
    }
    if (report_cmd->parsed()) {
      const fs::path root = out_root(a, a.config.empty() ? "" : load_experiment_config(a.config).out);
      std::vector<EvalReport> reports;
      for (const auto& r : runs) {
        const fs::path p = fs::is_directory(r) ? fs::path(r) / "summary.json" : fs::path(r);
        if (!fs::exists(p)) throw MissingArtifact(p);
        reports.push_back(load_report(p));
        print_report(reports.back().policy_id, reports.back());
      }
      const EvalReport pooled = pool_reports(reports);
      print_report("pooled", pooled);
      emit_report(root, pooled, {}, {{"content_version", kContentVersion}, {"pooled_from", runs}});
      return 0;
    }

    const ExperimentConfig cfg = resolve_config(a);
    const fs::path root = out_root(a, cfg.out);
    if ((train_cmd->parsed() || run_cmd->parsed() || eval_cmd->parsed())) cfg.validate_for_training();
    DirectoryLock lock(root);
    Pipeline pipe(cfg, root);
    if (gen_track_cmd->parsed()) {
      write_config(root, cfg);
      pipe.gen_tracks();
      const Track t = pipe.target_track();
      std::printf("target track %s  length %.1f m\n", t.id().c_str(), t.length());
    } else if (gen_demos_cmd->parsed()) {
      pipe.gen_demos();
      const DemoSet d = pipe.target_demos();
      double mean = 0;
      for (double l : d.lap_times()) mean += l / static_cast<double>(d.demos.size());
      std::printf("%zu target demos, mean lap %.1f s\n", d.demos.size(), mean);
    } else if (pretrain_cmd->parsed()) {
      const double mse = pipe.pretrain_bet();
      std::printf("bet.ckpt written, dataset mse %.6f\n", mse);
    } else if (train_cmd->parsed()) {
      print_report(cfg.run_name(), pipe.train(log_progress));
    } else if (eval_cmd->parsed()) {
      print_report(cfg.run_name(), pipe.evaluate_checkpoint(root / "eval" / cfg.run_name()));
    } else if (run_cmd->parsed()) {
      write_config(root, cfg);
      print_report(cfg.run_name(), pipe.run(log_progress));
    }
    return 0;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
}

#include "betail/stack.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "betail/ad/archive.hpp"
#include "betail/eval.hpp"

namespace betail {

using ad::Graph;
using ad::Tensor;
using ad::Var;

ModeInfo mode_info(StackMode m) {
  switch (m) {
    case StackMode::bet: return {true, false, false, false, false};
    case StackMode::betail: return {true, false, true, false, true};
    case StackMode::ail: return {false, false, false, true, true};
    case StackMode::bc: return {false, true, false, false, false};
    case StackMode::bcail: return {false, true, true, false, true};
    case StackMode::sac: return {false, false, false, true, false};
    case StackMode::betsac: return {true, false, true, false, false};
  }
  throw std::logic_error("mode_info: bad mode");
}

std::string mode_name(StackMode m) {
  switch (m) {
    case StackMode::bet: return "bet";
    case StackMode::betail: return "betail";
    case StackMode::ail: return "ail";
    case StackMode::bc: return "bc";
    case StackMode::bcail: return "bcail";
    case StackMode::sac: return "sac";
    case StackMode::betsac: return "betsac";
  }
  throw std::logic_error("mode_name: bad mode");
}

StackMode parse_mode(const std::string& name) {
  for (auto m : {StackMode::bet, StackMode::betail, StackMode::ail, StackMode::bc, StackMode::bcail, StackMode::sac,
                 StackMode::betsac}) {
    if (mode_name(m) == name) return m;
  }
  throw ConfigError("unknown mode '" + name + "' (expected bet, betail, ail, bc, bcail, sac or betsac)");
}

// ---- behavior cloning ------------------------------------------------------------------

ad::Mlp<float> make_bc_net(int obs_dim, const std::vector<int>& hidden, std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, "bc-init"));
  std::vector<int> sizes{obs_dim};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(2);
  return ad::Mlp<float>("bc", sizes, ad::Activation::relu, ad::Init::fan_in_uniform, rng);
}

std::vector<Action2> bc_predict(const ad::Mlp<float>& net, std::span<const float> obs_norm, int dim) {
  const int n = static_cast<int>(obs_norm.size()) / dim;
  Graph<float> g(false);
  Tensor<float> s(ad::Shape{n, dim}, std::vector<float>(obs_norm.begin(), obs_norm.end()));
  const auto& y = ad::tanh(net.forward(g, g.constant(std::move(s)))).value();
  std::vector<Action2> out(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = {y[2 * i], y[2 * i + 1]};
  return out;
}

std::vector<double> train_bc(ad::Mlp<float>& net, std::span<const float> table, int obs_dim, int steps, int batch,
                             double lr, std::uint64_t seed) {
  const int width = obs_dim + 2;
  const auto rows = static_cast<int>(table.size() / static_cast<std::size_t>(width));
  if (rows == 0) throw std::invalid_argument("train_bc: empty demonstration table");
  ad::Optimizer<float> opt(net.parameters(), {ad::OptimizerKind::adam, lr, 0.9, 0.999, 1e-8, 0.0});
  std::vector<double> losses;
  for (int k = 0; k < steps; ++k) {
    const Tensor<float> xy = batch >= rows
                                 ? Tensor<float>(ad::Shape{rows, width}, std::vector<float>(table.begin(), table.end()))
                                 : sample_rows(table, width, batch, derive_seed(seed, "bc-batch", static_cast<std::uint64_t>(k)));
    Graph<float> g(true);
    Var<float> v = g.constant(xy);
    Var<float> loss = ad::mse(ad::tanh(net.forward(g, ad::slice(v, 0, obs_dim))), ad::slice(v, obs_dim, width));
    opt.zero_grad();
    g.backward(loss);
    opt.step();
    losses.push_back(loss.value().item());
  }
  return losses;
}

// ---- composed policy -----------------------------------------------------------------

StackPolicy::StackPolicy(StackMode mode, const BetModel<float>* bet, const ad::Mlp<float>* bc,
                         const GaussianPolicy<float>* gaussian)
    : mode_(mode), info_(mode_info(mode)), bet_(bet), bc_(bc), gaussian_(gaussian) {
  if (info_.bet_base && bet_ == nullptr) throw std::invalid_argument(mode_name(mode) + " needs a BeT model");
  if (info_.bc_base && bc_ == nullptr) throw std::invalid_argument(mode_name(mode) + " needs a BC network");
  if ((info_.residual || info_.markov) && gaussian_ == nullptr) {
    throw std::invalid_argument(mode_name(mode) + " needs a Gaussian policy");
  }
}

void StackPolicy::begin_episode(int n_cars, std::uint64_t seed, bool stochastic) {
  stochastic_ = stochastic;
  rng_.seed(derive_seed(seed, "policy-noise"));
  if (info_.bet_base) {
    predictor_.emplace(*bet_);
    predictor_->reset(n_cars);
  }
}

void StackPolicy::act(const PolicyInput& in, PolicyOutput& out) {
  const auto n = in.states.size();
  const int dim = in.dim;
  std::vector<Action2> base(n, Action2{0.f, 0.f});
  if (info_.bet_base) base = predictor_->push_and_predict(in.obs_norm, dim);
  else if (info_.bc_base) base = bc_predict(*bc_, in.obs_norm, dim);

  std::vector<Action2> raw(n, Action2{0.f, 0.f});
  if (gaussian_ != nullptr && (info_.residual || info_.markov)) {
    const int width = gaussian_->in_dim();
    Tensor<float> s(ad::Shape{static_cast<int>(n), width});
    for (std::size_t i = 0; i < n; ++i) {
      float* row = s.data() + i * static_cast<std::size_t>(width);
      std::copy_n(in.obs_norm.begin() + static_cast<std::ptrdiff_t>(i) * dim, dim, row);
      if (info_.residual) {
        row[dim] = base[i][0];
        row[dim + 1] = base[i][1];
      }
    }
    Graph<float> g(false);
    Var<float> sv = g.constant(std::move(s));
    const Tensor<float>* a = nullptr;
    Var<float> av;
    if (stochastic_) {
      Tensor<float> z(ad::Shape{static_cast<int>(n), 2});
      std::normal_distribution<float> nd(0.f, 1.f);
      for (std::size_t i = 0; i < z.size(); ++i) z[i] = nd(rng_);
      av = gaussian_->sample(g, sv, z).action_raw;
    } else {
      av = gaussian_->mean_action(g, sv);
    }
    a = &av.value();
    for (std::size_t i = 0; i < n; ++i) raw[i] = {(*a)[2 * i], (*a)[2 * i + 1]};
  }

  const float alpha = info_.residual ? static_cast<float>(gaussian_->alpha()) : 1.f;
  for (std::size_t i = 0; i < n; ++i) {
    out.base[i] = base[i];
    out.residual[i] = raw[i];
    if (info_.residual || info_.markov) out.action[i] = compose_action(base[i], raw[i], alpha);
    else out.action[i] = {std::clamp(base[i][0], -1.f, 1.f), std::clamp(base[i][1], -1.f, 1.f)};
  }
}

// ---- trainer --------------------------------------------------------------------------

nlohmann::json IterationLog::to_json() const {
  return {{"iteration", iteration},
          {"env_steps", env_steps},
          {"disc_updates", disc_updates},
          {"disc_loss", disc.total},
          {"disc_bce", disc.bce},
          {"disc_gp", disc.gp},
          {"disc_entropy", disc.entropy},
          {"d_expert", disc.d_expert},
          {"d_agent", disc.d_agent},
          {"sac_steps", sac_steps},
          {"sac_skipped", sac_skipped},
          {"q_loss", sac.q_loss},
          {"pi_loss", sac.pi_loss},
          {"log_pi", sac.log_pi},
          {"q_mean", sac.q_mean},
          {"lambda", sac.lambda},
          {"mean_reward", sac.reward},
          {"rollout_progress", rollout_progress},
          {"rollout_wall", rollout_wall},
          {"max_residual_dev", max_residual_dev}};
}

StackTrainer::StackTrainer(StackMode mode, const AilConfig& cfg, TrainContext ctx, const BetModel<float>* bet,
                           std::uint64_t seed)
    : mode_(mode), info_(mode_info(mode)), cfg_(cfg), ctx_(std::move(ctx)), bet_(bet), seed_(seed) {
  cfg_.validate();
  if (ctx_.track == nullptr || ctx_.demos == nullptr) throw std::invalid_argument("StackTrainer: missing track/demos");
  if (info_.bet_base && bet_ == nullptr) throw std::invalid_argument("mode " + mode_name(mode) + " needs bet.ckpt");
  const int dim = ctx_.oc.dim();
  ref_ = ctx_.demos->speed_reference(*ctx_.track);
  expert_table_ = expert_pairs(*ctx_.demos, ctx_.norm);

  if (info_.bc_base) {
    bc_ = make_bc_net(dim, cfg_.bc_hidden, seed_);
    bc_losses_ = train_bc(*bc_, expert_table_, dim, cfg_.bc_steps, cfg_.bc_batch, cfg_.bc_lr, seed_);
  }
  if (!trains_online(mode_)) return;

  state_dim_ = info_.residual ? dim + 2 : dim;
  const double alpha = info_.residual ? cfg_.alpha : 1.0;
  const double init = info_.residual ? cfg_.residual_init : 1.0;
  gaussian_ = std::make_unique<GaussianPolicy<float>>("policy", state_dim_, cfg_.hidden, 2, alpha, init, seed_);
  sac_ = std::make_unique<SacTrainer>(*gaussian_, state_dim_, cfg_, derive_seed(seed_, "critics"));
  disc_ = Discriminator<float>(dim, cfg_.disc_hidden, seed_);
  disc_opt_ = ad::Optimizer<float>(disc_.parameters(), {ad::OptimizerKind::adam, cfg_.disc_lr, 0.9, 0.999, 1e-8, 0.0});
  replay_ = ReplayBuffer(static_cast<std::size_t>(cfg_.replay_capacity), dim, state_dim_);
}

StackPolicy StackTrainer::policy() const {
  return StackPolicy(mode_, bet_, bc(), gaussian_.get());
}

IterationLog StackTrainer::iterate() {
  if (!trains_online(mode_)) throw std::logic_error("mode " + mode_name(mode_) + " has no online training");
  IterationLog log;
  const auto it = static_cast<std::uint64_t>(iteration_);
  const int dim = ctx_.oc.dim();

  // Collect.
  StackPolicy pol = policy();
  const auto initial = reset_eval(*ctx_.track, ref_, ctx_.ep.n_cars, derive_seed(seed_, "train-reset", it));
  const RolloutSpec spec{RolloutMode::train, ctx_.ep.train_steps, false, true};
  const auto trajs = rollout(pol, *ctx_.track, initial, ctx_.vp, ctx_.oc, ctx_.norm, spec,
                             derive_seed(seed_, "train-rollout", it));
  std::vector<float> s(static_cast<std::size_t>(state_dim_)), s_next(s.size());
  auto fill = [&](const Trajectory& tr, int t, std::vector<float>& dst) {
    const auto row = tr.obs_norm_row(t);
    std::copy(row.begin(), row.end(), dst.begin());
    if (info_.residual) {
      dst[static_cast<std::size_t>(dim)] = tr.base[2 * static_cast<std::size_t>(t)];
      dst[static_cast<std::size_t>(dim) + 1] = tr.base[2 * static_cast<std::size_t>(t) + 1];
    }
  };
  std::int64_t wall = 0, steps = 0;
  for (const auto& tr : trajs) {
    for (int t = 0; t < tr.steps; ++t) {
      const auto k = static_cast<std::size_t>(t);
      fill(tr, t, s);
      fill(tr, t + 1, s_next);
      const Action2 a_res{tr.residual[2 * k], tr.residual[2 * k + 1]};
      const Action2 a_env{tr.action[2 * k], tr.action[2 * k + 1]};
      const Vec2 v = tr.states[k + 1].v_body;
      const float penalty = tr.off_course[k] ? static_cast<float>(v.dot(v)) : 0.f;
      // Truncation at the step limit is bootstrapped: done stays 0.
      replay_.push(s, a_res, s_next, false, a_env, static_cast<float>(tr.progress[k]), penalty);
      for (int c = 0; c < 2; ++c) {
        const double dev = std::abs(static_cast<double>(a_env[static_cast<std::size_t>(c)]) -
                                    std::clamp(static_cast<double>(tr.base[2 * k + static_cast<std::size_t>(c)]), -1.0, 1.0));
        log.max_residual_dev = std::max(log.max_residual_dev, dev);
      }
      wall += tr.off_course[k];
    }
    steps += tr.steps;
    log.rollout_progress += tr.total_progress;
  }
  log.rollout_progress /= static_cast<double>(trajs.size());
  log.rollout_wall = steps > 0 ? static_cast<double>(wall) / static_cast<double>(steps) : 0.0;
  env_steps_ += steps;

  // Discriminator.
  if (info_.ail_reward) {
    const DiscRegularizer reg{cfg_.gp_scale, cfg_.gp_target, cfg_.disc_entropy};
    const int b = std::min<int>(cfg_.disc_batch, static_cast<int>(replay_.size()));
    for (int u = 0; u < cfg_.disc_updates; ++u) {
      const auto k = static_cast<std::uint64_t>(disc_steps_);
      const auto expert = sample_rows(expert_table_, dim + 2, b, derive_seed(seed_, "disc-expert", k));
      const auto idx = replay_.sample_indices(static_cast<std::size_t>(b), derive_seed(seed_, "disc-agent", k));
      const auto agent = replay_.gather(idx).disc_x;
      const auto st = disc_update(disc_, disc_opt_, expert, agent, reg, derive_seed(seed_, "disc-mix", k));
      log.disc.total += st.total;
      log.disc.bce += st.bce;
      log.disc.gp += st.gp;
      log.disc.entropy += st.entropy;
      log.disc.d_expert += st.d_expert;
      log.disc.d_agent += st.d_agent;
      ++disc_steps_;
      ++log.disc_updates;
    }
    if (log.disc_updates > 0) {
      const double inv = 1.0 / log.disc_updates;
      for (double* x : {&log.disc.total, &log.disc.bce, &log.disc.gp, &log.disc.entropy, &log.disc.d_expert,
                        &log.disc.d_agent}) {
        *x *= inv;
      }
    }
  }

  // SAC.
  if (replay_.size() < static_cast<std::size_t>(cfg_.batch)) {
    log.sac_skipped = true;
    std::fprintf(stderr, "iteration %lld: replay holds %zu < batch %d transitions, SAC skipped\n",
                 static_cast<long long>(iteration_), replay_.size(), cfg_.batch);
  } else {
    for (int k = 0; k < cfg_.grad_steps; ++k) {
      const auto step = static_cast<std::uint64_t>(sac_->steps());
      const auto bseed = derive_seed(seed_, "sac-batch", step);
      SacStats st;
      const auto nseed = derive_seed(seed_, "sac-noise", step);
      if (info_.ail_reward) {
        const auto rb = replay_sample_recompute(replay_, disc_, static_cast<std::size_t>(cfg_.batch), bseed);
        st = sac_->update(rb.batch, rb.reward, nseed);
      } else {
        const auto b = replay_.gather(replay_.sample_indices(static_cast<std::size_t>(cfg_.batch), bseed));
        st = sac_->update(b, rl_rewards(b, cfg_.c_w), nseed);
      }
      log.sac.q_loss += st.q_loss;
      log.sac.pi_loss += st.pi_loss;
      log.sac.log_pi += st.log_pi;
      log.sac.q_mean += st.q_mean;
      log.sac.reward += st.reward;
      log.sac.lambda = st.lambda;
      ++log.sac_steps;
    }
    if (log.sac_steps > 0) {
      const double inv = 1.0 / log.sac_steps;
      for (double* x : {&log.sac.q_loss, &log.sac.pi_loss, &log.sac.log_pi, &log.sac.q_mean, &log.sac.reward}) {
        *x *= inv;
      }
    }
  }
  ++iteration_;
  log.iteration = iteration_;
  log.env_steps = env_steps_;
  return log;
}

std::uint64_t StackTrainer::parameter_checksum() const {
  ad::ConstParameterSet<float> all;
  auto append = [&](const ad::ConstParameterSet<float>& p) { all.insert(all.end(), p.begin(), p.end()); };
  if (bet_ != nullptr) append(bet_->parameters());
  if (bc_) append(bc_->parameters());
  if (gaussian_) {
    append(ad::as_const(gaussian_->parameters()));
    append(ad::as_const(sac_->q1().parameters()));
    append(ad::as_const(sac_->q2().parameters()));
    append(disc_.parameters());
  }
  return ad::checksum(all);
}

namespace {

nlohmann::json mlp_descriptor(const std::string& kind, const ad::Mlp<float>& m) {
  return {{"kind", kind}, {"sizes", m.sizes()}};
}

}  // namespace

void StackTrainer::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  if (bc_) ad::save_parameters<float>(dir / "bc.ckpt", mlp_descriptor("bc", *bc_), bc_->parameters());
  nlohmann::json counters = {{"mode", mode_name(mode_)},  {"iteration", iteration_}, {"env_steps", env_steps_},
                             {"disc_steps", disc_steps_}, {"seed", seed_}};
  if (gaussian_) {
    ad::save_parameters<float>(dir / "residual.ckpt", gaussian_->descriptor(), ad::as_const(gaussian_->parameters()));
    ad::save_parameters<float>(dir / "q1.ckpt", mlp_descriptor("critic", sac_->q1()), ad::as_const(sac_->q1().parameters()));
    ad::save_parameters<float>(dir / "q2.ckpt", mlp_descriptor("critic", sac_->q2()), ad::as_const(sac_->q2().parameters()));
    ad::save_parameters<float>(dir / "q1_target.ckpt", mlp_descriptor("critic", sac_->q1_target()),
                               ad::as_const(sac_->q1_target().parameters()));
    ad::save_parameters<float>(dir / "q2_target.ckpt", mlp_descriptor("critic", sac_->q2_target()),
                               ad::as_const(sac_->q2_target().parameters()));
    ad::save_parameters<float>(dir / "disc.ckpt", disc_.descriptor(), disc_.parameters());
    ad::Archive opt;
    opt.meta = {{"kind", "optimizers"}, {"version", 1}};
    ad::add_optimizer_state(opt, "policy", sac_->policy_optimizer().state());
    ad::add_optimizer_state(opt, "critic", sac_->critic_optimizer().state());
    ad::add_optimizer_state(opt, "lambda", sac_->lambda_optimizer().state());
    ad::add_optimizer_state(opt, "disc", disc_opt_.state());
    opt.add("log_lambda", {1}, sac_->log_lambda().value.vec());
    ad::write_archive(dir / "optimizers.bin", opt);
    replay_.save(dir / "replay.bin");
    counters["sac_steps"] = sac_->steps();
  }
  write_json_file(dir / "trainer.json", counters);
}

void StackTrainer::load(const std::filesystem::path& dir) {
  const auto counters = read_json_file(dir / "trainer.json");
  if (counters.at("mode").get<std::string>() != mode_name(mode_)) {
    throw std::runtime_error("checkpoint in " + dir.string() + " is for mode " + counters.at("mode").get<std::string>());
  }
  if (bc_) ad::load_parameters<float>(dir / "bc.ckpt", mlp_descriptor("bc", *bc_), bc_->parameters());
  iteration_ = counters.at("iteration").get<std::int64_t>();
  env_steps_ = counters.at("env_steps").get<std::int64_t>();
  disc_steps_ = counters.at("disc_steps").get<std::int64_t>();
  if (!gaussian_) return;
  ad::load_parameters<float>(dir / "residual.ckpt", gaussian_->descriptor(), gaussian_->parameters());
  ad::load_parameters<float>(dir / "q1.ckpt", mlp_descriptor("critic", sac_->q1()), sac_->q1().parameters());
  ad::load_parameters<float>(dir / "q2.ckpt", mlp_descriptor("critic", sac_->q2()), sac_->q2().parameters());
  ad::load_parameters<float>(dir / "q1_target.ckpt", mlp_descriptor("critic", sac_->q1_target()),
                             sac_->q1_target().parameters());
  ad::load_parameters<float>(dir / "q2_target.ckpt", mlp_descriptor("critic", sac_->q2_target()),
                             sac_->q2_target().parameters());
  ad::load_parameters<float>(dir / "disc.ckpt", disc_.descriptor(), disc_.parameters());
  const auto opt = ad::read_archive(dir / "optimizers.bin");
  ad::read_optimizer_state(opt, "policy", sac_->policy_optimizer().state());
  ad::read_optimizer_state(opt, "critic", sac_->critic_optimizer().state());
  ad::read_optimizer_state(opt, "lambda", sac_->lambda_optimizer().state());
  ad::read_optimizer_state(opt, "disc", disc_opt_.state());
  sac_->log_lambda().value.vec() = opt.get<float>("log_lambda", {1});
  replay_ = ReplayBuffer::load(dir / "replay.bin");
  if (replay_.aug_dim() != state_dim_) throw std::runtime_error("replay buffer in " + dir.string() + " has wrong width");
  sac_->set_steps(counters.at("sac_steps").get<std::int64_t>());
}

}  // namespace betail

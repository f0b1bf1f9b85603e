#include <gtest/gtest.h>

#include <cfloat>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "betail/ail.hpp"
#include "fd_check.hpp"

namespace betail {
namespace {

using ad::Graph;
using ad::Shape;
using ad::Tensor;
using ad::Var;

constexpr double kFdTol = 1e-5;

template <typename T>
void zero_parameters(const ad::ParameterSet<T>& ps) {
  for (auto* p : ps) {
    for (auto& v : p->value.vec()) v = T(0);
  }
}

Tensor<float> random_rows(int n, int w, std::mt19937_64& rng) {
  std::normal_distribution<float> nd(0.f, 1.f);
  Tensor<float> t(Shape{n, w});
  for (auto& v : t.vec()) v = nd(rng);
  return t;
}

// ---- composition -----------------------------------------------------------------

TEST(Compose, Examples) {
  EXPECT_NEAR(compose_component(0.9f, 0.5f, 0.05f), 0.925f, 1e-7);
  EXPECT_EQ(compose_component(0.99f, 1.0f, 0.05f), 1.0f);
  EXPECT_EQ(compose_component(-0.99f, -1.0f, 0.05f), -1.0f);
  EXPECT_EQ(compose_component(0.3f, 0.0f, 0.05f), 0.3f);
  // With no residual scale the composed action is the clipped base.
  for (float b : {-1.5f, -0.7f, 0.f, 0.42f, 1.2f}) {
    EXPECT_EQ(compose_component(b, 0.9f, 0.0f), std::clamp(b, -1.f, 1.f));
  }
}

TEST(Compose, RandomizedBoundHoldsExactly) {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<float> ub(-1.f, 1.f), ur(-1.f, 1.f), ua(0.f, 1.f);
  int nudged = 0;
  for (int k = 0; k < 1000000; ++k) {
    const float b = ub(rng), r = ur(rng);
    const float alpha = std::max(ua(rng), FLT_MIN);
    const float a = compose_component(b, r, alpha);
    const double exact = std::clamp(static_cast<double>(b) + static_cast<double>(alpha) * r, -1.0, 1.0);
    ASSERT_LE(std::abs(static_cast<double>(a) - std::clamp(static_cast<double>(b), -1.0, 1.0)),
              static_cast<double>(alpha));
    ASSERT_LE(a, 1.0f);
    ASSERT_GE(a, -1.0f);
    // Correctly rounded, or one float step toward the base to honour the bound.
    ASSERT_LE(std::abs(static_cast<double>(a) - exact), FLT_EPSILON);
    nudged += a != static_cast<float>(exact);
  }
  EXPECT_LT(nudged, 1000000 / 100);
}

// ---- reward ----------------------------------------------------------------------------

TEST(AilReward, ValuesAndBounds) {
  EXPECT_NEAR(ail_reward_from_logit(0.0), 0.6931, 1e-4);
  EXPECT_NEAR(ail_reward_from_logit(100.0), -std::log(kRewardEps), 1e-6);
  EXPECT_NEAR(ail_reward_from_logit(100.0), 13.82, 5e-3);
  EXPECT_NEAR(ail_reward_from_logit(-100.0), kRewardEps, 1e-9);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 20.0);
  double prev_logit = -1e9, prev = 0.0;
  std::vector<double> logits(10000);
  for (auto& l : logits) l = n(rng);
  std::sort(logits.begin(), logits.end());
  for (double l : logits) {
    const double r = ail_reward_from_logit(l);
    ASSERT_TRUE(std::isfinite(r));
    ASSERT_GT(r, 0.0);
    if (prev_logit > -1e9) ASSERT_GE(r, prev);
    prev_logit = l;
    prev = r;
  }
}

// ---- discriminator ----------------------------------------------------------------------

TEST(Discriminator, ZeroWeightsGiveTwoLn2) {
  Discriminator<double> d(3, {8, 8}, 1);
  zero_parameters(d.parameters());
  std::mt19937_64 rng(2);
  const auto e = testing::random_tensor(Shape{6, 5}, rng);
  const auto a = testing::random_tensor(Shape{6, 5}, rng);
  const auto mix = testing::random_tensor(Shape{6, 1}, rng, 0.0, 1.0);
  Graph<double> g(true);
  const auto t = disc_loss(g, d, e, a, mix, DiscRegularizer{10.0, 1.0, 0.001});
  EXPECT_NEAR(t.bce.value().item(), 2.0 * std::log(2.0), 1e-12);
  // Zero gradient: the norm is sqrt(1e-12), so the penalty is 10 (1 - 1e-6)^2.
  EXPECT_NEAR(t.gp.value().item(), 10.0 * (1.0 - 1e-6) * (1.0 - 1e-6), 1e-12);
  EXPECT_NEAR(t.entropy.value().item(), -0.001 * std::log(2.0), 1e-12);
}

TEST(Discriminator, LinearPenaltyIs160) {
  Discriminator<double> d(2, {}, 1);
  auto& out = d.net().output_layer();
  ASSERT_EQ(out.in_dim(), 4);
  out.weight.value.vec() = {3.0, 4.0, 0.0, 0.0};
  out.bias.value.vec() = {0.0};
  std::mt19937_64 rng(3);
  const auto e = testing::random_tensor(Shape{5, 4}, rng);
  const auto a = testing::random_tensor(Shape{5, 4}, rng);
  const auto mix = testing::random_tensor(Shape{5, 1}, rng, 0.0, 1.0);
  Graph<double> g(true);
  const auto t = disc_loss(g, d, e, a, mix, DiscRegularizer{10.0, 1.0, 0.0});
  EXPECT_NEAR(t.gp.value().item(), 160.0, 1e-9);
}

TEST(Discriminator, RejectsMismatchedBatches) {
  Discriminator<float> d(3, {4}, 1);
  ad::Optimizer<float> opt(d.parameters(), {ad::OptimizerKind::adam, 0.005, 0.9, 0.999, 1e-8, 0.0});
  std::mt19937_64 rng(1);
  EXPECT_THROW(disc_update(d, opt, random_rows(4, 5, rng), random_rows(3, 5, rng), {}, 1), std::invalid_argument);
  EXPECT_THROW(disc_update(d, opt, random_rows(4, 5, rng), random_rows(4, 6, rng), {}, 1), std::invalid_argument);
}

TEST(Discriminator, AgentLossFromComposedActionsIsBitIdentical) {
  const int obs = 6;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> u(-1.f, 1.f);
  ReplayBuffer rb(64, obs, obs + 2);
  Tensor<float> manual(Shape{32, obs + 2});
  for (int i = 0; i < 32; ++i) {
    std::vector<float> s(static_cast<std::size_t>(obs + 2));
    for (auto& v : s) v = u(rng);
    const Action2 base{u(rng) * 1.1f, u(rng)}, res{u(rng), u(rng)};
    s[obs] = base[0];
    s[obs + 1] = base[1];
    // Environment action as logged by a rollout.
    const Action2 env = compose_action(base, res, 0.05f);
    rb.push(s, res, s, false, env, 0.f, 0.f);
    // The same row rebuilt from (s, base + residual).
    const Action2 rebuilt = {compose_component(base[0], res[0], 0.05f), compose_component(base[1], res[1], 0.05f)};
    std::copy_n(s.begin(), obs, manual.data() + i * (obs + 2));
    manual[static_cast<std::size_t>(i * (obs + 2) + obs)] = rebuilt[0];
    manual[static_cast<std::size_t>(i * (obs + 2) + obs + 1)] = rebuilt[1];
  }
  std::vector<std::size_t> idx(32);
  std::iota(idx.begin(), idx.end(), 0);
  const auto stored = rb.gather(idx).disc_x;
  ASSERT_EQ(stored.vec(), manual.vec());
  const Discriminator<float> d(obs, {32, 32}, 4);
  const auto expert = random_rows(32, obs + 2, rng);
  Tensor<float> mix(Shape{32, 1}, 0.5f);
  Graph<float> g1(true), g2(true);
  const auto l1 = disc_loss(g1, d, expert, stored, mix, {}).total.value().item();
  const auto l2 = disc_loss(g2, d, expert, manual, mix, {}).total.value().item();
  EXPECT_EQ(l1, l2);
}

// A 16-point support in 4 dims (the corners of a hypercube) with integer
// counts standing in for the two densities. Full-batch training reaches the
// optimum c_E / (c_E + c_A) of the unregularized objective.
TEST(Discriminator, ToyOptimumMatchesDensityRatio) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> w(1, 10);
  std::vector<int> ce(16), ca(16);
  for (int i = 0; i < 16; ++i) {
    ce[static_cast<std::size_t>(i)] = w(rng);
    ca[static_cast<std::size_t>(i)] = w(rng);
  }
  // Equal batch sizes: pad the smaller total on the point with the most mass.
  int se = std::accumulate(ce.begin(), ce.end(), 0), sa = std::accumulate(ca.begin(), ca.end(), 0);
  if (se < sa) ce[0] += sa - se;
  else ca[0] += se - sa;
  const int n = std::max(se, sa);
  auto corner = [](int i, float* x) {
    for (int b = 0; b < 4; ++b) x[b] = (i >> b) & 1 ? 1.f : -1.f;
  };
  Tensor<float> e(Shape{n, 4}), a(Shape{n, 4});
  for (int i = 0, re = 0, ra = 0; i < 16; ++i) {
    for (int k = 0; k < ce[static_cast<std::size_t>(i)]; ++k) corner(i, e.data() + 4 * re++);
    for (int k = 0; k < ca[static_cast<std::size_t>(i)]; ++k) corner(i, a.data() + 4 * ra++);
  }
  Discriminator<float> d(2, {32, 32}, 1);
  ad::Optimizer<float> opt(d.parameters(), {ad::OptimizerKind::adam, 0.005, 0.9, 0.999, 1e-8, 0.0});
  const DiscRegularizer none{0.0, 1.0, 0.0};
  for (int s = 0; s < 3000; ++s) disc_update(d, opt, e, a, none, static_cast<std::uint64_t>(s));
  Tensor<float> pts(Shape{16, 4});
  for (int i = 0; i < 16; ++i) corner(i, pts.data() + 4 * i);
  const auto logits = disc_logits(d, pts);
  double worst = 0.0;
  for (int i = 0; i < 16; ++i) {
    const auto k = static_cast<std::size_t>(i);
    const double target = static_cast<double>(ce[k]) / (ce[k] + ca[k]);
    const double got = 1.0 / (1.0 + std::exp(-static_cast<double>(logits[k])));
    worst = std::max(worst, std::abs(got - target));
  }
  EXPECT_LE(worst, 0.05);
}

// ---- replay ------------------------------------------------------------------------

TEST(Replay, FifoEviction) {
  ReplayBuffer rb(3, 1, 1);
  for (int i = 0; i < 4; ++i) {
    const std::vector<float> s{static_cast<float>(i)};
    rb.push(s, {0.f, 0.f}, s, false, {0.f, 0.f}, static_cast<float>(i), 0.f);
  }
  EXPECT_EQ(rb.size(), 3u);
  EXPECT_EQ(rb.pushed(), 4u);
  EXPECT_EQ(rb.serial(0), 1u);
  EXPECT_EQ(rb.serial(2), 3u);
  const std::vector<std::size_t> all{0, 1, 2};
  const auto b = rb.gather(all);
  EXPECT_EQ(b.progress, (std::vector<float>{1.f, 2.f, 3.f}));
  EXPECT_THROW(rb.sample_indices(4, 1), std::invalid_argument);
  EXPECT_THROW(rb.serial(3), std::out_of_range);
}

TEST(Replay, SaveLoadRoundTrip) {
  ReplayBuffer rb(5, 2, 4);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(-1.f, 1.f);
  for (int i = 0; i < 7; ++i) {
    const std::vector<float> s{u(rng), u(rng), u(rng), u(rng)}, sn{u(rng), u(rng), u(rng), u(rng)};
    rb.push(s, {u(rng), u(rng)}, sn, i % 3 == 0, {u(rng), u(rng)}, u(rng), u(rng));
  }
  const auto path = std::filesystem::temp_directory_path() / "betail_replay_rt.bin";
  rb.save(path);
  const ReplayBuffer lb = ReplayBuffer::load(path);
  EXPECT_EQ(lb.size(), rb.size());
  EXPECT_EQ(lb.pushed(), rb.pushed());
  const auto idx = rb.sample_indices(5, 9);
  EXPECT_EQ(idx, lb.sample_indices(5, 9));
  const auto a = rb.gather(idx), b = lb.gather(idx);
  EXPECT_EQ(a.s_aug.vec(), b.s_aug.vec());
  EXPECT_EQ(a.disc_x.vec(), b.disc_x.vec());
  EXPECT_EQ(a.done.vec(), b.done.vec());
  EXPECT_EQ(a.penalty, b.penalty);
  std::filesystem::remove(path);
}

TEST(Replay, RewardsAreRecomputedFromTheCurrentDiscriminator) {
  const int obs = 5;
  std::mt19937_64 rng(11);
  std::normal_distribution<float> n(0.f, 1.f);
  ReplayBuffer rb(500, obs, obs + 2);
  for (int i = 0; i < 400; ++i) {
    std::vector<float> s(obs + 2);
    for (auto& v : s) v = n(rng);
    rb.push(s, {n(rng), n(rng)}, s, false, {std::tanh(n(rng)), std::tanh(n(rng))}, 0.f, 0.f);
  }
  Discriminator<float> d(obs, {32, 32}, 3);
  const auto before = replay_sample_recompute(rb, d, 128, 42);
  // Direct pass over the same stored pairs.
  const auto batch = rb.gather(rb.sample_indices(128, 42));
  const auto logits = disc_logits(d, batch.disc_x);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    ASSERT_EQ(before.reward[i], ail_reward_from_logit(logits[i]));
  }
  ad::Optimizer<float> opt(d.parameters(), {ad::OptimizerKind::adam, 0.005, 0.9, 0.999, 1e-8, 0.0});
  disc_update(d, opt, random_rows(64, obs + 2, rng), rb.gather(rb.sample_indices(64, 1)).disc_x, {}, 5);
  const auto after = replay_sample_recompute(rb, d, 128, 42);
  int changed = 0;
  for (std::size_t i = 0; i < after.reward.size(); ++i) changed += after.reward[i] != before.reward[i];
  EXPECT_GT(changed, 0);
}

TEST(Replay, RlRewardUsesStoredPenalty) {
  ReplayBuffer rb(4, 1, 1);
  const std::vector<float> s{0.f};
  rb.push(s, {0.f, 0.f}, s, false, {0.f, 0.f}, 5.f, 0.f);
  rb.push(s, {0.f, 0.f}, s, false, {0.f, 0.f}, 5.f, 100.f);
  const std::vector<std::size_t> idx{0, 1};
  const auto r = rl_rewards(rb.gather(idx), 0.01);
  EXPECT_DOUBLE_EQ(r[0], 5.0);
  EXPECT_DOUBLE_EQ(r[1], 4.0);
}

// ---- SAC ---------------------------------------------------------------------------

TEST(Sac, TargetArithmetic) {
  EXPECT_NEAR(sac_target(0.6931, 0.99, false, 1.0, 0.2, -1.0), 1.8811, 1e-12);
  EXPECT_EQ(sac_target(0.6931, 0.99, true, 1.0, 0.2, -1.0), 0.6931);
}

TEST(Sac, PolyakStep) {
  ad::Parameter<float> src("w", Tensor<float>(Shape{3}, 1.f)), dst("w", Tensor<float>(Shape{3}, 0.f));
  ad::polyak_update<float>({&src}, {&dst}, 0.002);
  for (float v : dst.value.vec()) EXPECT_NEAR(v, 0.002f, 1e-9);
}

// Scalar quadratic bandit with gamma = 0: larger temperatures must leave the
// policy at least as spread out.
TEST(Sac, EntropyGrowsWithTemperature) {
  ReplayBuffer rb(4000, 1, 1);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(-0.999f, 0.999f);
  const std::vector<float> s{0.f};
  std::vector<double> reward_of;
  for (int i = 0; i < 4000; ++i) rb.push(s, {u(rng), u(rng)}, s, true, {0.f, 0.f}, 0.f, 0.f);
  std::vector<double> entropy;
  for (double lam : {0.01, 0.1, 1.0}) {
    AilConfig cfg;
    cfg.hidden = {32, 32};
    cfg.lambda = lam;
    cfg.lr = 3e-3;
    cfg.gamma = 0.0;
    cfg.batch = 256;
    GaussianPolicy<float> pi("pi", 1, {32, 32}, 2, 1.0, 1.0, 3);
    SacTrainer tr(pi, 1, cfg, 3);
    double h = 0.0;
    for (int k = 0; k < 600; ++k) {
      const auto b = rb.gather(rb.sample_indices(256, static_cast<std::uint64_t>(k)));
      std::vector<double> r(256);
      for (int i = 0; i < 256; ++i) {
        const double a0 = b.a_res[2 * static_cast<std::size_t>(i)], a1 = b.a_res[2 * static_cast<std::size_t>(i) + 1];
        r[static_cast<std::size_t>(i)] = -4.0 * ((a0 - 0.3) * (a0 - 0.3) + (a1 + 0.2) * (a1 + 0.2));
      }
      const auto st = tr.update(b, r, static_cast<std::uint64_t>(1000 + k));
      if (k >= 500) h -= st.log_pi / 100.0;
    }
    entropy.push_back(h);
  }
  EXPECT_LE(entropy[0], entropy[1]);
  EXPECT_LE(entropy[1], entropy[2]);
}

TEST(Sac, AutoTemperatureMovesTowardTargetEntropy) {
  ReplayBuffer rb(600, 1, 1);
  const std::vector<float> s{0.f};
  for (int i = 0; i < 600; ++i) rb.push(s, {0.f, 0.f}, s, true, {0.f, 0.f}, 0.f, 0.f);
  AilConfig cfg;
  cfg.hidden = {8};
  cfg.auto_lambda = true;
  cfg.lambda = 0.5;
  cfg.batch = 64;
  GaussianPolicy<float> pi("pi", 1, {8}, 2, 1.0, 1.0, 1);
  SacTrainer tr(pi, 1, cfg, 1);
  const auto b = rb.gather(rb.sample_indices(64, 0));
  const std::vector<double> r(64, 0.0);
  const auto st = tr.update(b, r, 1);
  // log_pi above the target -dim shrinks the temperature.
  if (st.log_pi > -2.0) EXPECT_LT(tr.lambda(), 0.5);
  else EXPECT_GT(tr.lambda(), 0.5);
}

// ---- finite-difference checks (double) ------------------------------------------------

TEST(Gradients, ResidualLogProb) {
  for (double alpha : {0.05, 1.0}) {
    GaussianPolicy<double> pi("res", 6, {8, 8}, 2, alpha, 1.0, 5);
    std::mt19937_64 rng(9);
    const auto s = testing::random_tensor(Shape{4, 6}, rng);
    const auto z = testing::random_tensor(Shape{4, 2}, rng);
    const auto r = testing::check_parameter_gradient(
        [&](Graph<double>& g) {
          auto smp = pi.sample(g, g.constant(s), z);
          return ad::add(ad::sum(smp.log_prob), testing::weighted_sum(g, smp.action_raw));
        },
        pi.parameters());
    EXPECT_LT(r.rel_error, kFdTol) << alpha;
  }
}

TEST(Gradients, Critic) {
  auto q = make_critic<double>("q", 6, 2, {8, 8}, 3);
  std::mt19937_64 rng(4);
  const auto s = testing::random_tensor(Shape{5, 6}, rng);
  const auto a = testing::random_tensor(Shape{5, 2}, rng);
  const auto y = testing::random_tensor(Shape{5, 1}, rng);
  const auto r = testing::check_parameter_gradient(
      [&](Graph<double>& g) { return ad::mse(critic_value(g, q, g.constant(s), g.constant(a)), g.constant(y)); },
      q.parameters());
  EXPECT_LT(r.rel_error, kFdTol);
}

TEST(Gradients, DiscriminatorWithPenalty) {
  Discriminator<double> d(4, {8, 8}, 6);
  std::mt19937_64 rng(8);
  const auto e = testing::random_tensor(Shape{5, 6}, rng);
  const auto a = testing::random_tensor(Shape{5, 6}, rng);
  const auto mix = testing::random_tensor(Shape{5, 1}, rng, 0.0, 1.0);
  const auto r = testing::check_parameter_gradient(
      [&](Graph<double>& g) { return disc_loss(g, d, e, a, mix, DiscRegularizer{10.0, 1.0, 0.001}).total; },
      d.parameters());
  EXPECT_LT(r.rel_error, kFdTol);
}

// ---- configuration -----------------------------------------------------------------

TEST(AilConfigTest, StrictJsonAndProfiles) {
  const AilConfig p = AilConfig::paper_profile();
  EXPECT_EQ(p.batch, 4096);
  EXPECT_EQ(p.grad_steps, 2500);
  EXPECT_EQ(p.replay_capacity, 1000000);
  EXPECT_EQ(p.disc_batch, 2000);
  const AilConfig c = ail_config_from_json({{"alpha", 0.1}});
  EXPECT_EQ(c.alpha, 0.1);
  EXPECT_EQ(c.batch, AilConfig{}.batch);
  EXPECT_EQ(ail_config_from_json(to_json(p)).batch, 4096);
  EXPECT_THROW(ail_config_from_json({{"alpah", 0.1}}), ConfigError);
  EXPECT_THROW(ail_config_from_json({{"alpha", 0.0}}), ConfigError);
  EXPECT_THROW(ail_config_from_json({{"alpha", 1.5}}), ConfigError);
  EXPECT_THROW(GaussianPolicy<float>("p", 3, {4}, 2, 0.0, 1.0, 1), ConfigError);
}

TEST(ExpertTable, SampleRowsDrawsWholeRows) {
  std::vector<float> table;
  for (int r = 0; r < 10; ++r) {
    for (int c = 0; c < 4; ++c) table.push_back(static_cast<float>(10 * r + c));
  }
  const auto t = sample_rows(table, 4, 50, 3);
  for (int r = 0; r < 50; ++r) {
    const float first = t[static_cast<std::size_t>(4 * r)];
    for (int c = 1; c < 4; ++c) EXPECT_EQ(t[static_cast<std::size_t>(4 * r + c)], first + c);
  }
  EXPECT_EQ(sample_rows(table, 4, 50, 3).vec(), t.vec());
}

}  // namespace
}  // namespace betail

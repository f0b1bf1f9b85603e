#include "betail/ail.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "betail/ad/archive.hpp"

namespace betail {

using ad::Graph;
using ad::Tensor;
using ad::Var;

namespace {

std::vector<int> int_list(const nlohmann::json& v, const char* key) {
  auto out = v.get<std::vector<int>>();
  for (int x : out) {
    if (x < 1) throw ConfigError(std::string(key) + ": layer widths must be >= 1");
  }
  return out;
}

std::vector<int> layer_sizes(int in, const std::vector<int>& hidden, int out) {
  std::vector<int> s{in};
  s.insert(s.end(), hidden.begin(), hidden.end());
  s.push_back(out);
  return s;
}

}  // namespace

AilConfig AilConfig::paper_profile() {
  AilConfig c;
  c.batch = 4096;
  c.grad_steps = 2500;
  c.replay_capacity = 1000000;
  c.disc_batch = 2000;
  return c;
}

void AilConfig::validate() const {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in (0, 1]");
  if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("gamma must lie in [0, 1)");
  if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in (0, 1]");
  if (!(lr > 0.0 && disc_lr > 0.0 && bc_lr > 0.0)) throw ConfigError("learning rates must be positive");
  if (lambda < 0.0) throw ConfigError("lambda must be >= 0");
  if (!(residual_init > 0.0)) throw ConfigError("residual_init must be positive");
  if (batch < 1 || grad_steps < 0 || replay_capacity < batch) {
    throw ConfigError("need batch >= 1, grad_steps >= 0 and replay_capacity >= batch");
  }
  if (disc_updates < 0 || disc_batch < 1) throw ConfigError("need disc_updates >= 0 and disc_batch >= 1");
  if (gp_scale < 0.0 || disc_entropy < 0.0 || c_w < 0.0) throw ConfigError("regularizer weights must be >= 0");
  if (bc_steps < 0 || bc_batch < 1) throw ConfigError("need bc_steps >= 0 and bc_batch >= 1");
  if (hidden.empty() || bc_hidden.empty()) throw ConfigError("policy and critic need at least one hidden layer");
}

nlohmann::json to_json(const AilConfig& c) {
  return {{"alpha", c.alpha},
          {"hidden", c.hidden},
          {"gamma", c.gamma},
          {"tau", c.tau},
          {"lr", c.lr},
          {"lambda", c.lambda},
          {"auto_lambda", c.auto_lambda},
          {"residual_init", c.residual_init},
          {"batch", c.batch},
          {"grad_steps", c.grad_steps},
          {"replay_capacity", c.replay_capacity},
          {"disc_hidden", c.disc_hidden},
          {"disc_lr", c.disc_lr},
          {"disc_updates", c.disc_updates},
          {"disc_batch", c.disc_batch},
          {"gp_scale", c.gp_scale},
          {"gp_target", c.gp_target},
          {"disc_entropy", c.disc_entropy},
          {"c_w", c.c_w},
          {"bc_hidden", c.bc_hidden},
          {"bc_steps", c.bc_steps},
          {"bc_batch", c.bc_batch},
          {"bc_lr", c.bc_lr}};
}

AilConfig ail_config_from_json(const nlohmann::json& j, AilConfig c) {
  for (const auto& [key, v] : j.items()) {
    if (key == "alpha") c.alpha = v.get<double>();
    else if (key == "hidden") c.hidden = int_list(v, "hidden");
    else if (key == "gamma") c.gamma = v.get<double>();
    else if (key == "tau") c.tau = v.get<double>();
    else if (key == "lr") c.lr = v.get<double>();
    else if (key == "lambda") c.lambda = v.get<double>();
    else if (key == "auto_lambda") c.auto_lambda = v.get<bool>();
    else if (key == "residual_init") c.residual_init = v.get<double>();
    else if (key == "batch") c.batch = v.get<int>();
    else if (key == "grad_steps") c.grad_steps = v.get<int>();
    else if (key == "replay_capacity") c.replay_capacity = v.get<int>();
    else if (key == "disc_hidden") c.disc_hidden = int_list(v, "disc_hidden");
    else if (key == "disc_lr") c.disc_lr = v.get<double>();
    else if (key == "disc_updates") c.disc_updates = v.get<int>();
    else if (key == "disc_batch") c.disc_batch = v.get<int>();
    else if (key == "gp_scale") c.gp_scale = v.get<double>();
    else if (key == "gp_target") c.gp_target = v.get<double>();
    else if (key == "disc_entropy") c.disc_entropy = v.get<double>();
    else if (key == "c_w") c.c_w = v.get<double>();
    else if (key == "bc_hidden") c.bc_hidden = int_list(v, "bc_hidden");
    else if (key == "bc_steps") c.bc_steps = v.get<int>();
    else if (key == "bc_batch") c.bc_batch = v.get<int>();
    else if (key == "bc_lr") c.bc_lr = v.get<double>();
    else throw ConfigError("unknown ail key '" + key + "'");
  }
  c.validate();
  return c;
}

// ---- composition and reward ----------------------------------------------------

float compose_component(float base, float residual_raw, float alpha) {
  const double b = base;
  const double exact = std::clamp(b + static_cast<double>(alpha) * residual_raw, -1.0, 1.0);
  float a = static_cast<float>(exact);
  // Float rounding may step past base +- alpha; pull back toward base.
  while (std::abs(static_cast<double>(a) - std::clamp(b, -1.0, 1.0)) > static_cast<double>(alpha)) {
    a = std::nextafter(a, base);
  }
  return a;
}

Action2 compose_action(const Action2& base, const Action2& residual_raw, float alpha) {
  return {compose_component(base[0], residual_raw[0], alpha), compose_component(base[1], residual_raw[1], alpha)};
}

double ail_reward_from_logit(double logit) {
  const double d = std::clamp(1.0 / (1.0 + std::exp(-logit)), kRewardEps, 1.0 - kRewardEps);
  return -std::log1p(-d);
}

// ---- discriminator ---------------------------------------------------------------

template <typename T>
Discriminator<T>::Discriminator(int obs_dim, std::vector<int> hidden, std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, "disc-init"));
  net_ = ad::Mlp<T>("disc", layer_sizes(obs_dim + 2, hidden, 1), ad::Activation::tanh, ad::Init::fan_in_uniform, rng);
}

template <typename T>
nlohmann::json Discriminator<T>::descriptor() const {
  return {{"kind", "discriminator"}, {"sizes", net_.sizes()}, {"activation", "tanh"}};
}

template <typename T>
DiscLossTerms<T> disc_loss(Graph<T>& g, const Discriminator<T>& disc, const Tensor<T>& expert, const Tensor<T>& agent,
                           const Tensor<T>& mix, const DiscRegularizer& reg) {
  if (expert.rows() == 0 || agent.rows() == 0) throw std::invalid_argument("disc_loss: empty batch");
  if (!(expert.shape() == agent.shape())) {
    throw std::invalid_argument("disc_loss: expert " + expert.shape().str() + " and agent " + agent.shape().str() +
                                " batches differ");
  }
  const std::size_t rows = expert.rows();
  const auto cols = static_cast<std::size_t>(expert.cols());
  if (mix.size() != rows) throw std::invalid_argument("disc_loss: mix must have one entry per row");

  DiscLossTerms<T> out;
  out.logits_expert = disc.logits(g, g.constant(expert));
  out.logits_agent = disc.logits(g, g.constant(agent));
  const ad::Shape ls = out.logits_expert.shape();
  out.bce = ad::add(ad::bce_with_logits(out.logits_expert, g.constant(Tensor<T>(ls, T(1)))),
                    ad::bce_with_logits(out.logits_agent, g.constant(Tensor<T>(ls, T(0)))));

  Tensor<T> xhat(expert.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T m = mix[r];
    for (std::size_t c = 0; c < cols; ++c) {
      xhat[r * cols + c] = m * expert[r * cols + c] + (T(1) - m) * agent[r * cols + c];
    }
  }
  Var<T> xi = g.input(std::move(xhat));
  Var<T> grad = g.grad_wrt_input_taped(disc.logits(g, xi), xi);
  Var<T> norm = ad::sqrt(ad::add_scalar(ad::sum_cols(ad::square(grad)), T(1e-12)));
  out.gp = ad::scale(ad::mean(ad::square(ad::add_scalar(norm, static_cast<T>(-reg.gp_target)))),
                     static_cast<T>(reg.gp_scale));

  // Bernoulli entropy from a logit x: softplus(x) - x sigmoid(x).
  auto entropy = [](Var<T> x) { return ad::mean(ad::sub(ad::softplus(x), ad::mul(x, ad::sigmoid(x)))); };
  out.entropy = ad::scale(ad::add(entropy(out.logits_expert), entropy(out.logits_agent)),
                          static_cast<T>(-0.5 * reg.entropy_scale));
  out.total = ad::add(ad::add(out.bce, out.gp), out.entropy);
  return out;
}

DiscStats disc_update(Discriminator<float>& disc, ad::Optimizer<float>& opt, const Tensor<float>& expert,
                      const Tensor<float>& agent, const DiscRegularizer& reg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.f, 1.f);
  Tensor<float> mix(ad::Shape{static_cast<int>(expert.rows()), 1});
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = u(rng);

  Graph<float> g(true);
  auto terms = disc_loss(g, disc, expert, agent, mix, reg);
  opt.zero_grad();
  g.backward(terms.total);
  opt.step();

  DiscStats s;
  s.total = terms.total.value().item();
  s.bce = terms.bce.value().item();
  s.gp = terms.gp.value().item();
  s.entropy = terms.entropy.value().item();
  auto mean_d = [](const Tensor<float>& l) {
    double acc = 0.0;
    for (std::size_t i = 0; i < l.size(); ++i) acc += 1.0 / (1.0 + std::exp(-static_cast<double>(l[i])));
    return acc / static_cast<double>(l.size());
  };
  s.d_expert = mean_d(terms.logits_expert.value());
  s.d_agent = mean_d(terms.logits_agent.value());
  return s;
}

std::vector<float> disc_logits(const Discriminator<float>& disc, const Tensor<float>& x) {
  Graph<float> g(false);
  const auto& l = disc.logits(g, g.constant(x)).value();
  return {l.data(), l.data() + l.size()};
}

std::vector<double> ail_rewards(const Discriminator<float>& disc, const Tensor<float>& x) {
  const auto logits = disc_logits(disc, x);
  std::vector<double> r(logits.size());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = ail_reward_from_logit(logits[i]);
  return r;
}

// ---- policy and critics ------------------------------------------------------------

template <typename T>
GaussianPolicy<T>::GaussianPolicy(const std::string& name, int in_dim, const std::vector<int>& hidden, int act_dim,
                                  double alpha, double init_scale, std::uint64_t seed)
    : act_dim_(act_dim), alpha_(alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("policy alpha must lie in (0, 1]");
  std::mt19937_64 rng(derive_seed(seed, "policy-init"));
  net_ = ad::Mlp<T>(name, layer_sizes(in_dim, hidden, 2 * act_dim), ad::Activation::relu, ad::Init::fan_in_uniform,
                    rng);
  auto& out = net_.output_layer();
  for (auto* t : {&out.weight.value, &out.bias.value}) {
    for (std::size_t i = 0; i < t->size(); ++i) (*t)[i] *= static_cast<T>(init_scale);
  }
}

template <typename T>
typename GaussianPolicy<T>::Sample GaussianPolicy<T>::sample(Graph<T>& g, Var<T> s, const Tensor<T>& noise,
                                                             bool frozen) const {
  Var<T> h = net_.forward(g, s, frozen);
  Var<T> mu = ad::slice(h, 0, act_dim_);
  Var<T> log_std = ad::clip(ad::slice(h, act_dim_, 2 * act_dim_), kLogStdMin, kLogStdMax);
  Var<T> u = ad::add(mu, ad::mul(ad::exp(log_std), g.constant(noise)));
  Sample out;
  out.action_raw = ad::tanh(u);

  // log N(u) = -z^2/2 - log_std - log(2 pi)/2; log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u)).
  Tensor<T> gauss(noise.shape());
  const T half_log_2pi = static_cast<T>(0.5 * std::log(2.0 * std::numbers::pi));
  for (std::size_t i = 0; i < gauss.size(); ++i) gauss[i] = T(-0.5) * noise[i] * noise[i] - half_log_2pi;
  Var<T> squash = ad::scale(ad::add_scalar(ad::scale(ad::add(u, ad::softplus(ad::scale(u, T(-2)))), T(-1)),
                                           static_cast<T>(std::numbers::ln2)),
                            T(2));
  Var<T> per_dim = ad::sub(ad::sub(g.constant(std::move(gauss)), log_std), squash);
  out.log_prob = ad::sum_cols(per_dim);
  if (alpha_ != 1.0) out.log_prob = ad::add_scalar(out.log_prob, static_cast<T>(-act_dim_ * std::log(alpha_)));
  return out;
}

template <typename T>
Var<T> GaussianPolicy<T>::mean_action(Graph<T>& g, Var<T> s) const {
  return ad::tanh(ad::slice(net_.forward(g, s), 0, act_dim_));
}

template <typename T>
nlohmann::json GaussianPolicy<T>::descriptor() const {
  return {{"kind", "gaussian_policy"}, {"sizes", net_.sizes()}, {"act_dim", act_dim_}, {"alpha", alpha_}};
}

template <typename T>
ad::Mlp<T> make_critic(const std::string& name, int state_dim, int act_dim, const std::vector<int>& hidden,
                       std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, "critic-init:" + name));
  return ad::Mlp<T>(name, layer_sizes(state_dim + act_dim, hidden, 1), ad::Activation::relu,
                    ad::Init::fan_in_uniform, rng);
}

template <typename T>
Var<T> critic_value(Graph<T>& g, const ad::Mlp<T>& q, Var<T> s, Var<T> a, bool frozen) {
  return q.forward(g, ad::concat(s, a), frozen);
}

// ---- replay ------------------------------------------------------------------------

ReplayBuffer::ReplayBuffer(std::size_t capacity, int obs_dim, int aug_dim)
    : capacity_(capacity), obs_dim_(obs_dim), aug_dim_(aug_dim) {
  if (capacity == 0 || obs_dim < 1 || aug_dim < obs_dim) throw std::invalid_argument("ReplayBuffer: bad dimensions");
  s_aug_.resize(capacity * static_cast<std::size_t>(aug_dim));
  s_next_.resize(s_aug_.size());
  a_res_.resize(2 * capacity);
  a_env_.resize(2 * capacity);
  done_.resize(capacity);
  progress_.resize(capacity);
  penalty_.resize(capacity);
  serial_.resize(capacity);
}

void ReplayBuffer::push(std::span<const float> s_aug, const Action2& a_res, std::span<const float> s_aug_next,
                        bool done, const Action2& a_env, float progress, float penalty) {
  const auto d = static_cast<std::size_t>(aug_dim_);
  if (s_aug.size() != d || s_aug_next.size() != d) throw std::invalid_argument("ReplayBuffer::push: state width");
  const std::size_t k = head_;
  std::copy(s_aug.begin(), s_aug.end(), s_aug_.begin() + static_cast<std::ptrdiff_t>(k * d));
  std::copy(s_aug_next.begin(), s_aug_next.end(), s_next_.begin() + static_cast<std::ptrdiff_t>(k * d));
  a_res_[2 * k] = a_res[0];
  a_res_[2 * k + 1] = a_res[1];
  a_env_[2 * k] = a_env[0];
  a_env_[2 * k + 1] = a_env[1];
  done_[k] = done ? 1.f : 0.f;
  progress_[k] = progress;
  penalty_[k] = penalty;
  serial_[k] = pushed_++;
  head_ = (head_ + 1) % capacity_;
  size_ = std::min(size_ + 1, capacity_);
}

std::size_t ReplayBuffer::slot(std::size_t logical) const {
  return (head_ + capacity_ - size_ + logical) % capacity_;
}

std::uint64_t ReplayBuffer::serial(std::size_t i) const {
  if (i >= size_) throw std::out_of_range("ReplayBuffer::serial");
  return serial_[slot(i)];
}

std::vector<std::size_t> ReplayBuffer::sample_indices(std::size_t n, std::uint64_t seed) const {
  if (n > size_) throw std::invalid_argument("ReplayBuffer: batch larger than buffer");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> u(0, size_ - 1);
  std::vector<std::size_t> idx(n);
  for (auto& i : idx) i = u(rng);
  return idx;
}

ReplayBuffer::Batch ReplayBuffer::gather(std::span<const std::size_t> idx) const {
  const int n = static_cast<int>(idx.size());
  const auto d = static_cast<std::size_t>(aug_dim_);
  const auto od = static_cast<std::size_t>(obs_dim_);
  Batch b;
  b.n = n;
  b.s_aug = Tensor<float>(ad::Shape{n, aug_dim_});
  b.s_aug_next = Tensor<float>(ad::Shape{n, aug_dim_});
  b.a_res = Tensor<float>(ad::Shape{n, 2});
  b.done = Tensor<float>(ad::Shape{n, 1});
  b.disc_x = Tensor<float>(ad::Shape{n, obs_dim_ + 2});
  b.progress.resize(idx.size());
  b.penalty.resize(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= size_) throw std::out_of_range("ReplayBuffer::gather");
    const std::size_t k = slot(idx[r]);
    std::copy_n(s_aug_.begin() + static_cast<std::ptrdiff_t>(k * d), d, b.s_aug.data() + r * d);
    std::copy_n(s_next_.begin() + static_cast<std::ptrdiff_t>(k * d), d, b.s_aug_next.data() + r * d);
    b.a_res[2 * r] = a_res_[2 * k];
    b.a_res[2 * r + 1] = a_res_[2 * k + 1];
    b.done[r] = done_[k];
    float* x = b.disc_x.data() + r * (od + 2);
    std::copy_n(s_aug_.begin() + static_cast<std::ptrdiff_t>(k * d), od, x);
    x[od] = a_env_[2 * k];
    x[od + 1] = a_env_[2 * k + 1];
    b.progress[r] = progress_[k];
    b.penalty[r] = penalty_[k];
  }
  return b;
}

void ReplayBuffer::save(const std::filesystem::path& path) const {
  ad::Archive ar;
  ar.meta = {{"kind", "replay"},       {"version", 1},         {"capacity", capacity_}, {"size", size_},
             {"head", head_},          {"pushed", pushed_},    {"obs_dim", obs_dim_},   {"aug_dim", aug_dim_}};
  const int cap = static_cast<int>(capacity_);
  ar.add("s_aug", {cap, aug_dim_}, s_aug_);
  ar.add("s_aug_next", {cap, aug_dim_}, s_next_);
  ar.add("a_res", {cap, 2}, a_res_);
  ar.add("a_env", {cap, 2}, a_env_);
  ar.add("done", {cap}, done_);
  ar.add("progress", {cap}, progress_);
  ar.add("penalty", {cap}, penalty_);
  ar.add("serial", {cap}, std::vector<std::int64_t>(serial_.begin(), serial_.end()));
  ad::write_archive(path, ar);
}

ReplayBuffer ReplayBuffer::load(const std::filesystem::path& path) {
  const auto ar = ad::read_archive(path);
  if (ar.meta.value("kind", "") != "replay" || ar.meta.value("version", 0) != 1) {
    throw ad::ArchiveError(path.string() + " is not a replay buffer archive");
  }
  ReplayBuffer b(ar.meta.at("capacity").get<std::size_t>(), ar.meta.at("obs_dim").get<int>(),
                 ar.meta.at("aug_dim").get<int>());
  b.size_ = ar.meta.at("size").get<std::size_t>();
  b.head_ = ar.meta.at("head").get<std::size_t>();
  b.pushed_ = ar.meta.at("pushed").get<std::uint64_t>();
  const int cap = static_cast<int>(b.capacity_);
  b.s_aug_ = ar.get<float>("s_aug", {cap, b.aug_dim_});
  b.s_next_ = ar.get<float>("s_aug_next", {cap, b.aug_dim_});
  b.a_res_ = ar.get<float>("a_res", {cap, 2});
  b.a_env_ = ar.get<float>("a_env", {cap, 2});
  b.done_ = ar.get<float>("done", {cap});
  b.progress_ = ar.get<float>("progress", {cap});
  b.penalty_ = ar.get<float>("penalty", {cap});
  const auto serial = ar.get<std::int64_t>("serial", {cap});
  b.serial_.assign(serial.begin(), serial.end());
  return b;
}

RewardedBatch replay_sample_recompute(const ReplayBuffer& replay, const Discriminator<float>& disc, std::size_t n,
                                      std::uint64_t seed) {
  RewardedBatch out;
  const auto idx = replay.sample_indices(n, seed);
  out.batch = replay.gather(idx);
  out.reward = ail_rewards(disc, out.batch.disc_x);
  return out;
}

std::vector<double> rl_rewards(const ReplayBuffer::Batch& b, double c_w) {
  std::vector<double> r(b.progress.size());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = static_cast<double>(b.progress[i]) - c_w * b.penalty[i];
  return r;
}

// ---- SAC ---------------------------------------------------------------------------

double sac_target(double r, double gamma, bool done, double min_q_next, double lambda, double log_pi_next) {
  if (done) return r;
  return r + gamma * (min_q_next - lambda * log_pi_next);
}

namespace {

ad::OptimizerConfig adam(double lr) { return {ad::OptimizerKind::adam, lr, 0.9, 0.999, 1e-8, 0.0}; }

ad::ParameterSet<float> joined(ad::Mlp<float>& a, ad::Mlp<float>& b) {
  auto p = a.parameters();
  const auto q = b.parameters();
  p.insert(p.end(), q.begin(), q.end());
  return p;
}

Tensor<float> normal_tensor(int rows, int cols, std::mt19937_64& rng) {
  std::normal_distribution<float> n(0.f, 1.f);
  Tensor<float> t(ad::Shape{rows, cols});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = n(rng);
  return t;
}

}  // namespace

SacTrainer::SacTrainer(GaussianPolicy<float>& policy, int state_dim, const AilConfig& cfg, std::uint64_t seed)
    : policy_(&policy),
      cfg_(cfg),
      q1_(make_critic<float>("q1", state_dim, policy.act_dim(), cfg.hidden, seed)),
      q2_(make_critic<float>("q2", state_dim, policy.act_dim(), cfg.hidden, seed)),
      q1t_(q1_),
      q2t_(q2_),
      log_lambda_("log_lambda", Tensor<float>::scalar(static_cast<float>(std::log(std::max(cfg.lambda, 1e-12))))) {
  if (policy.in_dim() != state_dim) throw std::invalid_argument("SacTrainer: policy input width mismatch");
  pi_opt_ = ad::Optimizer<float>(policy.parameters(), adam(cfg.lr));
  q_opt_ = ad::Optimizer<float>(joined(q1_, q2_), adam(cfg.lr));
  lam_opt_ = ad::Optimizer<float>({&log_lambda_}, adam(cfg.lr));
}

double SacTrainer::lambda() const {
  return cfg_.auto_lambda ? std::exp(static_cast<double>(log_lambda_.value[0])) : cfg_.lambda;
}

SacStats SacTrainer::update(const ReplayBuffer::Batch& b, std::span<const double> reward, std::uint64_t seed) {
  if (reward.size() != static_cast<std::size_t>(b.n)) throw std::invalid_argument("SacTrainer: reward count");
  const int n = b.n;
  const int a_dim = policy_->act_dim();
  std::mt19937_64 rng(seed);
  const Tensor<float> z_next = normal_tensor(n, a_dim, rng);
  const Tensor<float> z_now = normal_tensor(n, a_dim, rng);
  const double lam = lambda();
  SacStats st;
  st.lambda = lam;

  Tensor<float> y(ad::Shape{n, 1});
  {
    Graph<float> g(false);
    Var<float> sn = g.constant(b.s_aug_next);
    auto next = policy_->sample(g, sn, z_next, true);
    const auto& q1 = critic_value(g, q1t_, sn, next.action_raw, true).value();
    const auto& q2 = critic_value(g, q2t_, sn, next.action_raw, true).value();
    const auto& lp = next.log_prob.value();
    for (int i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>(i);
      y[k] = static_cast<float>(
          sac_target(reward[k], cfg_.gamma, b.done[k] > 0.5f, std::min(q1[k], q2[k]), lam, lp[k]));
      st.reward += reward[k];
    }
    st.reward /= n;
  }
  {
    Graph<float> g(true);
    Var<float> s = g.constant(b.s_aug);
    Var<float> a = g.constant(b.a_res);
    Var<float> target = g.constant(y);
    Var<float> q1 = critic_value(g, q1_, s, a);
    Var<float> loss = ad::add(ad::mse(q1, target), ad::mse(critic_value(g, q2_, s, a), target));
    q_opt_.zero_grad();
    g.backward(loss);
    q_opt_.step();
    st.q_loss = loss.value().item();
    double acc = 0.0;
    for (std::size_t i = 0; i < q1.value().size(); ++i) acc += q1.value()[i];
    st.q_mean = acc / n;
  }
  double mean_log_pi = 0.0;
  {
    Graph<float> g(true);
    Var<float> s = g.constant(b.s_aug);
    auto now = policy_->sample(g, s, z_now);
    Var<float> q = ad::minimum(critic_value(g, q1_, s, now.action_raw, true),
                               critic_value(g, q2_, s, now.action_raw, true));
    Var<float> loss = ad::mean(ad::sub(ad::scale(now.log_prob, static_cast<float>(lam)), q));
    pi_opt_.zero_grad();
    g.backward(loss);
    pi_opt_.step();
    st.pi_loss = loss.value().item();
    const auto& lp = now.log_prob.value();
    for (std::size_t i = 0; i < lp.size(); ++i) mean_log_pi += lp[i];
    mean_log_pi /= n;
    st.log_pi = mean_log_pi;
  }
  if (cfg_.auto_lambda) {
    // d/d(log lambda) of -log_lambda * (log_pi + target_entropy), target = -act_dim.
    lam_opt_.zero_grad();
    log_lambda_.grad[0] = static_cast<float>(-(mean_log_pi - a_dim));
    lam_opt_.step();
  }
  ad::polyak_update(ad::as_const(q1_.parameters()), q1t_.parameters(), cfg_.tau);
  ad::polyak_update(ad::as_const(q2_.parameters()), q2t_.parameters(), cfg_.tau);
  ++steps_;
  return st;
}

// ---- expert pairs --------------------------------------------------------------------

std::vector<float> expert_pairs(const DemoSet& demos, const Normalizer& norm) {
  std::vector<float> table;
  for (const auto& d : demos.demos) {
    const auto dim = static_cast<std::size_t>(d.dim);
    std::vector<float> z(dim);
    for (int t = 0; t < d.steps; ++t) {
      const auto row = std::span<const float>(d.obs_raw).subspan(static_cast<std::size_t>(t) * dim, dim);
      norm.normalize_into(row, z);
      table.insert(table.end(), z.begin(), z.end());
      table.push_back(d.action[2 * static_cast<std::size_t>(t)]);
      table.push_back(d.action[2 * static_cast<std::size_t>(t) + 1]);
    }
  }
  return table;
}

Tensor<float> sample_rows(std::span<const float> table, int width, int n, std::uint64_t seed) {
  const std::size_t rows = table.size() / static_cast<std::size_t>(width);
  if (rows == 0) throw std::invalid_argument("sample_rows: empty table");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> u(0, rows - 1);
  Tensor<float> out(ad::Shape{n, width});
  for (int r = 0; r < n; ++r) {
    const std::size_t k = u(rng);
    std::copy_n(table.begin() + static_cast<std::ptrdiff_t>(k * static_cast<std::size_t>(width)), width,
                out.data() + static_cast<std::size_t>(r) * static_cast<std::size_t>(width));
  }
  return out;
}

#define BETAIL_INSTANTIATE(T)                                                                                  \
  template class Discriminator<T>;                                                                             \
  template class GaussianPolicy<T>;                                                                            \
  template DiscLossTerms<T> disc_loss<T>(Graph<T>&, const Discriminator<T>&, const Tensor<T>&,                 \
                                         const Tensor<T>&, const Tensor<T>&, const DiscRegularizer&);          \
  template ad::Mlp<T> make_critic<T>(const std::string&, int, int, const std::vector<int>&, std::uint64_t);   \
  template Var<T> critic_value<T>(Graph<T>&, const ad::Mlp<T>&, Var<T>, Var<T>, bool);

BETAIL_INSTANTIATE(float)
BETAIL_INSTANTIATE(double)
#undef BETAIL_INSTANTIATE

}  // namespace betail

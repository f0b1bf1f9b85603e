#include "betail/bet.hpp"

#include <algorithm>

#include "betail/ad/archive.hpp"

namespace betail {

using ad::Graph;
using ad::Parameter;
using ad::Shape;
using ad::Tensor;
using ad::Var;

BetConfig BetConfig::paper_profile() {
  BetConfig c;
  c.embed = 512;
  c.batch = 256;
  c.updates = 500000;
  return c;
}

void BetConfig::validate() const {
  if (layers < 1 || heads < 1 || embed < 1) throw ConfigError("bet: layers, heads and embed must be >= 1");
  if (embed % heads != 0) throw ConfigError("bet: embed must be divisible by heads");
  if (k_train < 1 || k_eval < 1 || k_eval > k_train) throw ConfigError("bet: need 1 <= k_eval <= k_train");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("bet: dropout must lie in [0, 1)");
  if (batch < 1 || updates < 0 || !(lr > 0.0) || weight_decay < 0.0) throw ConfigError("bet: bad optimization settings");
}

nlohmann::json to_json(const BetConfig& c) {
  return {{"layers", c.layers},
          {"heads", c.heads},
          {"embed", c.embed},
          {"k_train", c.k_train},
          {"k_eval", c.k_eval},
          {"dropout", c.dropout},
          {"batch", c.batch},
          {"updates", c.updates},
          {"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"activation", c.activation == ad::Activation::relu ? "relu" : "tanh"},
          {"loss_all_positions", c.loss_all_positions}};
}

BetConfig bet_config_from_json(const nlohmann::json& j) {
  BetConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "layers") c.layers = v.get<int>();
    else if (key == "heads") c.heads = v.get<int>();
    else if (key == "embed") c.embed = v.get<int>();
    else if (key == "k_train") c.k_train = v.get<int>();
    else if (key == "k_eval") c.k_eval = v.get<int>();
    else if (key == "dropout") c.dropout = v.get<double>();
    else if (key == "batch") c.batch = v.get<int>();
    else if (key == "updates") c.updates = v.get<int>();
    else if (key == "lr") c.lr = v.get<double>();
    else if (key == "weight_decay") c.weight_decay = v.get<double>();
    else if (key == "activation") {
      const auto a = v.get<std::string>();
      if (a == "relu") c.activation = ad::Activation::relu;
      else if (a == "tanh") c.activation = ad::Activation::tanh;
      else throw ConfigError("bet: unknown activation '" + a + "'");
    } else if (key == "loss_all_positions") c.loss_all_positions = v.get<bool>();
    else throw ConfigError("unknown bet key '" + key + "'");
  }
  c.validate();
  return c;
}

// ---- model ---------------------------------------------------------------------

template <typename T>
BetModel<T>::BetModel(const BetConfig& cfg, int obs_dim, std::uint64_t seed) : cfg_(cfg), obs_dim_(obs_dim) {
  cfg.validate();
  std::mt19937_64 rng(derive_seed(seed, "bet-init"));
  const int E = cfg.embed;
  const auto init = ad::Init::normal_002;
  embed_ = ad::Linear<T>("embed", obs_dim, E, init, rng);
  pos_ = Parameter<T>("pos", Tensor<T>(Shape{cfg.k_train, E}));
  ad::initialize(pos_.value, init, E, false, rng);
  auto ones = [&](const std::string& n) { return Parameter<T>(n, Tensor<T>(Shape{E}, T(1))); };
  auto zeros = [&](const std::string& n) { return Parameter<T>(n, Tensor<T>(Shape{E})); };
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "block" + std::to_string(l);
    Block b;
    b.ln1_g = ones(p + ".ln1.gamma");
    b.ln1_b = zeros(p + ".ln1.beta");
    b.qkv = ad::Linear<T>(p + ".qkv", E, 3 * E, init, rng);
    b.proj = ad::Linear<T>(p + ".proj", E, E, init, rng);
    b.ln2_g = ones(p + ".ln2.gamma");
    b.ln2_b = zeros(p + ".ln2.beta");
    b.fc1 = ad::Linear<T>(p + ".fc1", E, 4 * E, init, rng);
    b.fc2 = ad::Linear<T>(p + ".fc2", 4 * E, E, init, rng);
    blocks_.push_back(std::move(b));
  }
  lnf_g_ = ones("lnf.gamma");
  lnf_b_ = zeros("lnf.beta");
  head_ = ad::Linear<T>("head", E, 2, init, rng);
}

template <typename T>
Var<T> BetModel<T>::forward(Graph<T>& g, const Tensor<T>& states) const {
  const Shape& s = states.shape();
  if (s.rank() != 3 || s[2] != obs_dim_) {
    throw std::invalid_argument("bet_forward: expected (B, T, " + std::to_string(obs_dim_) + "), got " + s.str());
  }
  const int Tn = s[1];
  if (Tn < 1 || Tn > cfg_.k_train) {
    throw std::invalid_argument("bet_forward: sequence length " + std::to_string(Tn) + " exceeds k_train " +
                                std::to_string(cfg_.k_train));
  }
  const T p = static_cast<T>(cfg_.dropout);
  std::vector<int> positions(static_cast<std::size_t>(Tn));
  for (int t = 0; t < Tn; ++t) positions[static_cast<std::size_t>(t)] = t;

  Var<T> h = embed_(g, g.constant(states));
  h = add_broadcast(h, embedding_gather(g.param(pos_), positions));
  h = dropout(h, p);
  for (const auto& b : blocks_) {
    Var<T> a = layer_norm(h, g.param(b.ln1_g), g.param(b.ln1_b));
    a = causal_attention(b.qkv(g, a), cfg_.heads);
    h = add(h, dropout(b.proj(g, a), p));
    Var<T> m = layer_norm(h, g.param(b.ln2_g), g.param(b.ln2_b));
    m = b.fc1(g, m);
    m = cfg_.activation == ad::Activation::relu ? relu(m) : tanh(m);
    h = add(h, dropout(b.fc2(g, m), p));
  }
  h = layer_norm(h, g.param(lnf_g_), g.param(lnf_b_));
  return tanh(head_(g, h));
}

template <typename T>
ad::ParameterSet<T> BetModel<T>::parameters() {
  ad::ParameterSet<T> out = {&embed_.weight, &embed_.bias, &pos_};
  for (auto& b : blocks_) {
    for (auto* p : {&b.ln1_g, &b.ln1_b, &b.qkv.weight, &b.qkv.bias, &b.proj.weight, &b.proj.bias, &b.ln2_g, &b.ln2_b,
                    &b.fc1.weight, &b.fc1.bias, &b.fc2.weight, &b.fc2.bias}) {
      out.push_back(p);
    }
  }
  for (auto* p : {&lnf_g_, &lnf_b_, &head_.weight, &head_.bias}) out.push_back(p);
  return out;
}

template <typename T>
ad::ConstParameterSet<T> BetModel<T>::parameters() const {
  auto ps = const_cast<BetModel*>(this)->parameters();
  return ad::ConstParameterSet<T>(ps.begin(), ps.end());
}

template <typename T>
std::size_t BetModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto* p : parameters()) n += p->value.size();
  return n;
}

template <typename T>
nlohmann::json BetModel<T>::descriptor() const {
  nlohmann::json c = to_json(cfg_);
  // Optimization settings do not change the architecture.
  for (const char* k : {"batch", "updates", "lr", "weight_decay"}) c.erase(k);
  return {{"kind", "bet"}, {"obs_dim", obs_dim_}, {"config", c}};
}

template <typename T>
void BetModel<T>::zero_all() {
  for (auto* p : parameters()) p->value.fill(T(0));
}

template class BetModel<float>;
template class BetModel<double>;

// ---- dataset and training -----------------------------------------------------------

BetDataset BetDataset::from_demos(const DemoSet& demos, const Normalizer& norm, int k_train) {
  BetDataset d;
  for (const auto& tr : demos.demos) {
    d.dim = tr.dim;
    if (tr.steps < k_train) {
      ++d.skipped;
      continue;
    }
    std::vector<float> s(static_cast<std::size_t>(tr.steps) * static_cast<std::size_t>(tr.dim));
    for (int t = 0; t < tr.steps; ++t) {
      const auto off = static_cast<std::size_t>(t) * static_cast<std::size_t>(tr.dim);
      norm.normalize_into(std::span<const float>(tr.obs_raw).subspan(off, static_cast<std::size_t>(tr.dim)),
                          std::span<float>(s).subspan(off, static_cast<std::size_t>(tr.dim)));
    }
    d.states.push_back(std::move(s));
    d.actions.emplace_back(tr.action.begin(), tr.action.begin() + 2 * tr.steps);
    d.lengths.push_back(tr.steps);
  }
  if (d.lengths.empty()) {
    throw std::invalid_argument("bet: no demonstration is at least " + std::to_string(k_train) + " steps long");
  }
  return d;
}

std::size_t BetDataset::window_count(int k) const {
  std::size_t n = 0;
  for (int len : lengths) n += static_cast<std::size_t>(len - k + 1);
  return n;
}

namespace {

ad::OptimizerConfig lamb_config(const BetConfig& c) {
  return {ad::OptimizerKind::lamb, c.lr, 0.9, 0.999, 1e-8, c.weight_decay};
}

// Fills (B, K, dim) states and (B, K, 2) actions for the given window starts.
void gather_windows(const BetDataset& data, int k, const std::vector<std::pair<std::size_t, int>>& windows,
                    Tensor<float>& states, Tensor<float>& actions) {
  const int B = static_cast<int>(windows.size());
  const int D = data.dim;
  states = Tensor<float>(Shape{B, k, D});
  actions = Tensor<float>(Shape{B, k, 2});
  for (int b = 0; b < B; ++b) {
    const auto [demo, start] = windows[static_cast<std::size_t>(b)];
    const auto& s = data.states[demo];
    const auto& a = data.actions[demo];
    std::copy_n(s.begin() + static_cast<std::ptrdiff_t>(start) * D, static_cast<std::ptrdiff_t>(k) * D,
                states.data() + static_cast<std::ptrdiff_t>(b) * k * D);
    std::copy_n(a.begin() + static_cast<std::ptrdiff_t>(start) * 2, static_cast<std::ptrdiff_t>(k) * 2,
                actions.data() + static_cast<std::ptrdiff_t>(b) * k * 2);
  }
}

}  // namespace

BetTrainer::BetTrainer(BetModel<float>& model, const BetDataset& data, std::uint64_t seed)
    : model_(model), data_(data), seed_(seed), opt_(model.parameters(), lamb_config(model.config())) {
  const int k = model.config().k_train;
  std::size_t acc = 0;
  for (int len : data.lengths) {
    acc += static_cast<std::size_t>(len - k + 1);
    cumulative_.push_back(acc);
  }
}

double BetTrainer::train_step() {
  const auto& cfg = model_.config();
  const int k = cfg.k_train;
  std::mt19937_64 rng(derive_seed(seed_, "bet-batch", static_cast<std::uint64_t>(step_)));
  std::uniform_int_distribution<std::size_t> pick(0, cumulative_.back() - 1);
  std::vector<std::pair<std::size_t, int>> windows;
  for (int b = 0; b < cfg.batch; ++b) {
    const std::size_t w = pick(rng);
    const auto demo = static_cast<std::size_t>(std::upper_bound(cumulative_.begin(), cumulative_.end(), w) -
                                               cumulative_.begin());
    const std::size_t before = demo == 0 ? 0 : cumulative_[demo - 1];
    windows.emplace_back(demo, static_cast<int>(w - before));
  }
  Tensor<float> states, actions;
  gather_windows(data_, k, windows, states, actions);

  opt_.zero_grad();
  Graph<float> g(true, true, derive_seed(seed_, "bet-dropout", static_cast<std::uint64_t>(step_)));
  Var<float> pred = model_.forward(g, states);
  Var<float> target = g.constant(actions);
  Var<float> loss;
  if (cfg.loss_all_positions) {
    loss = mse(pred, target);
  } else {
    auto last = [&](Var<float> v) {
      return slice(reshape(v, Shape{cfg.batch, k * 2}), 2 * (k - 1), 2 * k);
    };
    loss = mse(last(pred), last(target));
  }
  g.backward(loss);
  opt_.step();
  ++step_;
  return loss.value().item();
}

double BetTrainer::dataset_mse(int max_windows) const {
  const int k = model_.config().k_train;
  std::vector<std::pair<std::size_t, int>> all;
  for (std::size_t d = 0; d < data_.lengths.size(); ++d) {
    for (int s = 0; s + k <= data_.lengths[d]; ++s) all.emplace_back(d, s);
  }
  if (max_windows > 0 && all.size() > static_cast<std::size_t>(max_windows)) {
    std::vector<std::pair<std::size_t, int>> sub;
    const double stride = static_cast<double>(all.size()) / max_windows;
    for (int i = 0; i < max_windows; ++i) sub.push_back(all[static_cast<std::size_t>(i * stride)]);
    all.swap(sub);
  }
  double sum = 0.0;
  std::size_t count = 0;
  const bool all_pos = model_.config().loss_all_positions;
  for (std::size_t i = 0; i < all.size(); i += 64) {
    std::vector<std::pair<std::size_t, int>> chunk(all.begin() + static_cast<std::ptrdiff_t>(i),
                                                   all.begin() + static_cast<std::ptrdiff_t>(std::min(all.size(), i + 64)));
    Tensor<float> states, actions;
    gather_windows(data_, k, chunk, states, actions);
    Graph<float> g(false);
    const auto& pred = model_.forward(g, states).value();
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      for (int t = all_pos ? 0 : k - 1; t < k; ++t) {
        for (int c = 0; c < 2; ++c) {
          const std::size_t idx = (b * static_cast<std::size_t>(k) + static_cast<std::size_t>(t)) * 2 + c;
          const double d = static_cast<double>(pred[idx]) - actions[idx];
          sum += d * d;
          ++count;
        }
      }
    }
  }
  return sum / static_cast<double>(count);
}

// ---- inference --------------------------------------------------------------------

void BetPredictor::reset(int n_cars) { history_.assign(static_cast<std::size_t>(n_cars), {}); }

std::vector<Action2> BetPredictor::push_and_predict(std::span<const float> obs_norm, int dim) {
  const auto n = history_.size();
  const auto k_eval = static_cast<std::size_t>(model_.config().k_eval);
  for (std::size_t i = 0; i < n; ++i) {
    auto& h = history_[i];
    h.emplace_back(obs_norm.begin() + static_cast<std::ptrdiff_t>(i) * dim,
                   obs_norm.begin() + static_cast<std::ptrdiff_t>(i + 1) * dim);
    while (h.size() > k_eval) h.pop_front();
  }
  const int Tn = static_cast<int>(history_.front().size());
  Tensor<float> states(Shape{static_cast<int>(n), Tn, dim});
  for (std::size_t i = 0; i < n; ++i) {
    if (history_[i].size() != static_cast<std::size_t>(Tn)) throw std::logic_error("bet: ragged histories");
    for (int t = 0; t < Tn; ++t) {
      std::copy(history_[i][static_cast<std::size_t>(t)].begin(), history_[i][static_cast<std::size_t>(t)].end(),
                states.data() + (i * static_cast<std::size_t>(Tn) + static_cast<std::size_t>(t)) * dim);
    }
  }
  Graph<float> g(false);
  const auto& out = model_.forward(g, states).value();
  std::vector<Action2> a(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t idx = (i * static_cast<std::size_t>(Tn) + static_cast<std::size_t>(Tn - 1)) * 2;
    a[i] = {out[idx], out[idx + 1]};
  }
  return a;
}

Action2 bet_predict(const BetModel<float>& model, const std::vector<std::vector<float>>& history) {
  if (history.empty()) throw std::invalid_argument("bet_predict: empty history");
  const int dim = model.obs_dim();
  const std::size_t k = std::min(history.size(), static_cast<std::size_t>(model.config().k_eval));
  const int Tn = static_cast<int>(k);
  Tensor<float> states(Shape{1, Tn, dim});
  for (std::size_t t = 0; t < k; ++t) {
    const auto& row = history[history.size() - k + t];
    if (row.size() != static_cast<std::size_t>(dim)) throw std::invalid_argument("bet_predict: bad state size");
    std::copy(row.begin(), row.end(), states.data() + t * static_cast<std::size_t>(dim));
  }
  Graph<float> g(false);
  const auto& out = model.forward(g, states).value();
  return {out[2 * (k - 1)], out[2 * (k - 1) + 1]};
}

void save_bet(const std::filesystem::path& path, const BetModel<float>& model) {
  ad::save_parameters<float>(path, model.descriptor(), model.parameters());
}

BetModel<float> load_bet(const std::filesystem::path& path) {
  const ad::Archive ar = ad::read_archive(path);
  const auto& arch = ar.meta.at("architecture");
  if (arch.value("kind", "") != "bet") throw ad::ArchiveError(path.string() + " is not a BeT checkpoint");
  BetConfig cfg = bet_config_from_json(arch.at("config"));
  BetModel<float> model(cfg, arch.at("obs_dim").get<int>(), 0);
  ad::load_parameters<float>(path, model.descriptor(), model.parameters());
  return model;
}

}  // namespace betail

#include "betail/ad/nn.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "betail/ad/optim.hpp"

namespace betail::ad {

template <typename T>
void initialize(Tensor<T>& t, Init init, int fan_in, bool is_bias, std::mt19937_64& rng) {
  switch (init) {
    case Init::zeros:
      t.fill(T(0));
      return;
    case Init::fan_in_uniform: {
      const double b = 1.0 / std::sqrt(static_cast<double>(fan_in));
      std::uniform_real_distribution<double> u(-b, b);
      for (auto& x : t.vec()) x = static_cast<T>(u(rng));
      return;
    }
    case Init::normal_002: {
      if (is_bias) {
        t.fill(T(0));
        return;
      }
      std::normal_distribution<double> n(0.0, 1.0);
      for (auto& x : t.vec()) {
        double z;
        do {
          z = n(rng);
        } while (std::abs(z) > 2.0);
        x = static_cast<T>(0.02 * z);
      }
      return;
    }
  }
}

template <typename T>
Linear<T>::Linear(const std::string& name, int in, int out, Init init, std::mt19937_64& rng)
    : weight(name + ".weight", Tensor<T>(Shape{in, out})), bias(name + ".bias", Tensor<T>(Shape{out})) {
  initialize(weight.value, init, in, false, rng);
  initialize(bias.value, init, in, true, rng);
}

template <typename T>
Var<T> Linear<T>::operator()(Graph<T>& g, Var<T> x, bool frozen) const {
  if (frozen) return add_broadcast(matmul(x, g.constant(weight.value)), g.constant(bias.value));
  return add_broadcast(matmul(x, g.param(weight)), g.param(bias));
}

template <typename T>
Mlp<T>::Mlp(const std::string& name, std::vector<int> sizes, Activation act, Init init, std::mt19937_64& rng)
    : sizes_(std::move(sizes)), act_(act) {
  if (sizes_.size() < 2) throw std::invalid_argument("Mlp: need at least input and output sizes");
  for (std::size_t i = 0; i + 1 < sizes_.size(); ++i) {
    layers_.emplace_back(name + ".l" + std::to_string(i), sizes_[i], sizes_[i + 1], init, rng);
  }
}

template <typename T>
Var<T> Mlp<T>::forward(Graph<T>& g, Var<T> x, bool frozen) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    x = layers_[i](g, x, frozen);
    if (i + 1 < layers_.size()) x = act_ == Activation::relu ? relu(x) : tanh(x);
  }
  return x;
}

template <typename T>
ParameterSet<T> Mlp<T>::parameters() {
  ParameterSet<T> out;
  for (auto& l : layers_) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  return out;
}

template <typename T>
ConstParameterSet<T> Mlp<T>::parameters() const {
  ConstParameterSet<T> out;
  for (const auto& l : layers_) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  return out;
}

template <typename T>
void copy_values(const ConstParameterSet<T>& from, const ParameterSet<T>& to) {
  if (from.size() != to.size()) throw std::invalid_argument("copy_values: parameter count mismatch");
  for (std::size_t i = 0; i < from.size(); ++i) {
    if (from[i]->value.shape() != to[i]->value.shape()) {
      throw std::invalid_argument("copy_values: shape mismatch for " + to[i]->name);
    }
    to[i]->value = from[i]->value;
  }
}

template <typename T>
void polyak_update(const ConstParameterSet<T>& source, const ParameterSet<T>& target, double tau) {
  if (source.size() != target.size()) throw std::invalid_argument("polyak_update: parameter count mismatch");
  const T t = static_cast<T>(tau);
  for (std::size_t i = 0; i < source.size(); ++i) {
    auto& dst = target[i]->value;
    const auto& src = source[i]->value;
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = (T(1) - t) * dst[k] + t * src[k];
  }
}

template <typename T>
std::uint64_t checksum(const ConstParameterSet<T>& params) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto* p : params) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p->value.data());
    for (std::size_t i = 0; i < p->value.size() * sizeof(T); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  }
  return h;
}

// ---- optimizers -------------------------------------------------------------

namespace {

template <typename T>
void ensure_state(OptimizerState<T>& st, const ParameterSet<T>& params) {
  if (st.m.size() == params.size()) return;
  st.m.clear();
  st.v.clear();
  for (const auto* p : params) {
    st.m.emplace_back(p->value.size(), T(0));
    st.v.emplace_back(p->value.size(), T(0));
  }
}

// Updates moments and writes the bias-corrected Adam direction into `dir`.
template <typename T>
void adam_direction(OptimizerState<T>& st, std::size_t i, const Parameter<T>& p, const OptimizerConfig& cfg,
                    std::vector<T>& dir) {
  auto& m = st.m[i];
  auto& v = st.v[i];
  if (m.size() != p.value.size() || p.grad.size() != p.value.size()) {
    throw std::invalid_argument("optimizer: shape mismatch for " + p.name);
  }
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  dir.resize(m.size());
  for (std::size_t k = 0; k < m.size(); ++k) {
    const double g = p.grad[k];
    m[k] = static_cast<T>(cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g);
    v[k] = static_cast<T>(cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g);
    const double mh = m[k] / c1;
    const double vh = v[k] / c2;
    dir[k] = static_cast<T>(mh / (std::sqrt(vh) + cfg.eps));
  }
}

}  // namespace

template <typename T>
void adam_step(OptimizerState<T>& st, const ParameterSet<T>& params, const OptimizerConfig& cfg) {
  ensure_state(st, params);
  ++st.step;
  std::vector<T> dir;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    adam_direction(st, i, p, cfg, dir);
    for (std::size_t k = 0; k < dir.size(); ++k) {
      const double th = p.value[k];
      p.value[k] = static_cast<T>(th - cfg.lr * (dir[k] + cfg.weight_decay * th));
    }
  }
}

template <typename T>
double lamb_trust_ratio(const std::vector<T>& theta, const std::vector<T>& direction) {
  double nt = 0, nd = 0;
  for (std::size_t k = 0; k < theta.size(); ++k) {
    nt += static_cast<double>(theta[k]) * theta[k];
    nd += static_cast<double>(direction[k]) * direction[k];
  }
  nt = std::sqrt(nt);
  nd = std::sqrt(nd);
  return (nt == 0.0 || nd == 0.0) ? 1.0 : nt / nd;
}

template <typename T>
void lamb_step(OptimizerState<T>& st, const ParameterSet<T>& params, const OptimizerConfig& cfg) {
  ensure_state(st, params);
  ++st.step;
  std::vector<T> dir;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    adam_direction(st, i, p, cfg, dir);
    for (std::size_t k = 0; k < dir.size(); ++k) dir[k] += static_cast<T>(cfg.weight_decay * p.value[k]);
    const double r = lamb_trust_ratio(p.value.vec(), dir);
    for (std::size_t k = 0; k < dir.size(); ++k) {
      p.value[k] = static_cast<T>(p.value[k] - cfg.lr * r * dir[k]);
    }
  }
}

template <typename T>
void Optimizer<T>::step() {
  if (cfg_.kind == OptimizerKind::adam) adam_step(state_, params_, cfg_);
  else lamb_step(state_, params_, cfg_);
}

#define BETAIL_INSTANTIATE_NN(T)                                                             \
  template void initialize<T>(Tensor<T>&, Init, int, bool, std::mt19937_64&);                \
  template struct Linear<T>;                                                                 \
  template class Mlp<T>;                                                                     \
  template void copy_values<T>(const ConstParameterSet<T>&, const ParameterSet<T>&);         \
  template void polyak_update<T>(const ConstParameterSet<T>&, const ParameterSet<T>&, double); \
  template std::uint64_t checksum<T>(const ConstParameterSet<T>&);                           \
  template void adam_step<T>(OptimizerState<T>&, const ParameterSet<T>&, const OptimizerConfig&); \
  template void lamb_step<T>(OptimizerState<T>&, const ParameterSet<T>&, const OptimizerConfig&); \
  template double lamb_trust_ratio<T>(const std::vector<T>&, const std::vector<T>&);         \
  template class Optimizer<T>;

BETAIL_INSTANTIATE_NN(float)
BETAIL_INSTANTIATE_NN(double)

}  // namespace betail::ad

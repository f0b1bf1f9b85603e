#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "betail/ad/archive.hpp"
#include "betail/ad/graph.hpp"
#include "betail/ad/nn.hpp"
#include "betail/ad/optim.hpp"
#include "fd_check.hpp"

namespace betail {
namespace {

using namespace ad;
using testing::check_gradient;
using testing::random_tensor;
using testing::weighted_sum;
using V = Var<double>;
using Vs = std::vector<V>;

constexpr double kOpTol = 1e-6;

class OpGradient : public ::testing::Test {
 protected:
  std::mt19937_64 rng{1234};
};

TEST_F(OpGradient, Matmul) {
  for (bool ta : {false, true}) {
    for (bool tb : {false, true}) {
      auto a = random_tensor(ta ? Shape{4, 3} : Shape{3, 4}, rng);
      auto b = random_tensor(tb ? Shape{5, 4} : Shape{4, 5}, rng);
      auto r = check_gradient(
          [&](Graph<double>& g, const Vs& x) { return weighted_sum(g, matmul(x[0], x[1], ta, tb)); }, {a, b});
      EXPECT_LT(r.rel_error, kOpTol) << ta << tb;
    }
  }
  auto a3 = random_tensor(Shape{2, 3, 4}, rng);
  auto b = random_tensor(Shape{4, 5}, rng);
  auto r = check_gradient([](Graph<double>& g, const Vs& x) { return weighted_sum(g, matmul(x[0], x[1])); },
                          {a3, b});
  EXPECT_LT(r.rel_error, kOpTol);
}

TEST_F(OpGradient, ElementwiseBinary) {
  auto a = random_tensor(Shape{3, 5}, rng);
  auto b = random_tensor(Shape{3, 5}, rng);
  for (auto op : {+[](V x, V y) { return add(x, y); }, +[](V x, V y) { return sub(x, y); },
                  +[](V x, V y) { return mul(x, y); }}) {
    auto r = check_gradient([&](Graph<double>& g, const Vs& x) { return weighted_sum(g, op(x[0], x[1])); }, {a, b});
    EXPECT_LT(r.rel_error, kOpTol);
  }
  // minimum away from ties
  auto c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = b[i] + (i % 2 ? 0.3 : -0.3);
  auto r = check_gradient([&](Graph<double>& g, const Vs& x) { return weighted_sum(g, minimum(x[0], x[1])); },
                          {c, b});
  EXPECT_LT(r.rel_error, kOpTol);
}

TEST_F(OpGradient, Broadcasts) {
  auto a = random_tensor(Shape{2, 3, 4}, rng);
  auto bias = random_tensor(Shape{4}, rng);
  auto pos = random_tensor(Shape{3, 4}, rng);
  EXPECT_LT(check_gradient([](Graph<double>& g, const Vs& x) { return weighted_sum(g, add_broadcast(x[0], x[1])); },
                           {a, bias})
                .rel_error,
            kOpTol);
  EXPECT_LT(check_gradient([](Graph<double>& g, const Vs& x) { return weighted_sum(g, add_broadcast(x[0], x[1])); },
                           {a, pos})
                .rel_error,
            kOpTol);
}

TEST_F(OpGradient, Unary) {
  auto a = random_tensor(Shape{4, 6}, rng, -2.0, 2.0);
  // keep relu/clip inputs off their kinks
  for (auto& x : a.vec()) {
    if (std::abs(x) < 0.05) x += 0.2;
    if (std::abs(std::abs(x) - 1.0) < 0.05) x += 0.2;
  }
  auto pos = random_tensor(Shape{4, 6}, rng, 0.2, 3.0);
  using F = V (*)(V);
  std::vector<std::pair<const char*, F>> ops = {
      {"tanh", +[](V x) { return ad::tanh(x); }},
      {"relu", +[](V x) { return relu(x); }},
      {"sigmoid", +[](V x) { return sigmoid(x); }},
      {"softplus", +[](V x) { return softplus(x); }},
      {"exp", +[](V x) { return ad::exp(x); }},
      {"square", +[](V x) { return square(x); }},
      {"scale", +[](V x) { return scale(x, -1.7); }},
      {"add_scalar", +[](V x) { return add_scalar(x, 0.4); }},
      {"clip", +[](V x) { return clip(x, -1.0, 1.0); }},
      {"row_softmax", +[](V x) { return row_softmax(x); }},
      {"sum_cols", +[](V x) { return sum_cols(x); }},
      {"slice", +[](V x) { return slice(x, 1, 4); }},
  };
  for (auto& [name, op] : ops) {
    auto r = check_gradient([&](Graph<double>& g, const Vs& x) { return weighted_sum(g, op(x[0])); }, {a});
    EXPECT_LT(r.rel_error, kOpTol) << name;
  }
  for (auto op : {+[](V x) { return ad::log(x); }, +[](V x) { return ad::sqrt(x); }}) {
    auto r = check_gradient([&](Graph<double>& g, const Vs& x) { return weighted_sum(g, op(x[0])); }, {pos});
    EXPECT_LT(r.rel_error, kOpTol);
  }
}

TEST_F(OpGradient, ReductionsAndLosses) {
  auto a = random_tensor(Shape{3, 4}, rng);
  auto b = random_tensor(Shape{3, 4}, rng);
  auto t = random_tensor(Shape{3, 4}, rng, 0.0, 1.0);
  EXPECT_LT(check_gradient([](Graph<double>&, const Vs& x) { return sum(x[0]); }, {a}).rel_error, kOpTol);
  EXPECT_LT(check_gradient([](Graph<double>&, const Vs& x) { return mean(x[0]); }, {a}).rel_error, kOpTol);
  EXPECT_LT(check_gradient([](Graph<double>&, const Vs& x) { return mse(x[0], x[1]); }, {a, b}).rel_error, kOpTol);
  EXPECT_LT(check_gradient([](Graph<double>&, const Vs& x) { return bce_with_logits(x[0], x[1]); }, {a, t})
                .rel_error,
            kOpTol);
}

TEST_F(OpGradient, StructuralOps) {
  auto a = random_tensor(Shape{3, 2}, rng);
  auto b = random_tensor(Shape{3, 5}, rng);
  EXPECT_LT(check_gradient([](Graph<double>& g, const Vs& x) { return weighted_sum(g, concat(x[0], x[1])); }, {a, b})
                .rel_error,
            kOpTol);
  auto table = random_tensor(Shape{6, 4}, rng);
  EXPECT_LT(check_gradient(
                [](Graph<double>& g, const Vs& x) { return weighted_sum(g, embedding_gather(x[0], {0, 3, 3, 5})); },
                {table})
                .rel_error,
            kOpTol);
  auto x3 = random_tensor(Shape{2, 3, 4}, rng);
  EXPECT_LT(check_gradient([](Graph<double>& g, const Vs& x) { return weighted_sum(g, reshape(x[0], Shape{6, 4})); },
                           {x3})
                .rel_error,
            kOpTol);
}

TEST_F(OpGradient, LayerNorm) {
  auto x = random_tensor(Shape{2, 3, 8}, rng, -2.0, 2.0);
  auto gamma = random_tensor(Shape{8}, rng, 0.5, 1.5);
  auto beta = random_tensor(Shape{8}, rng);
  auto r = check_gradient(
      [](Graph<double>& g, const Vs& v) { return weighted_sum(g, layer_norm(v[0], v[1], v[2])); }, {x, gamma, beta});
  EXPECT_LT(r.rel_error, kOpTol);
}

TEST_F(OpGradient, CausalAttention) {
  auto qkv = random_tensor(Shape{2, 5, 3 * 8}, rng);
  auto r = check_gradient(
      [](Graph<double>& g, const Vs& v) { return weighted_sum(g, causal_attention(v[0], 2)); }, {qkv});
  EXPECT_LT(r.rel_error, kOpTol);
}

TEST_F(OpGradient, DropoutWithFixedMask) {
  // Same graph seed -> same mask in every evaluation of the objective.
  auto a = random_tensor(Shape{4, 4}, rng);
  auto f = [](Graph<double>& g, const Vs& v) {
    g.set_train(true);
    return weighted_sum(g, dropout(v[0], 0.3));
  };
  EXPECT_LT(check_gradient(f, {a}).rel_error, kOpTol);
}

TEST(Ops, RowSoftmaxRowsSumToOne) {
  std::mt19937_64 rng(5);
  Graph<float> g(false);
  Tensor<float> t(Shape{7, 11});
  std::uniform_real_distribution<float> u(-20.f, 20.f);
  for (auto& x : t.vec()) x = u(rng);
  auto y = row_softmax(g.constant(t)).value();
  for (int r = 0; r < 7; ++r) {
    float s = 0;
    for (int c = 0; c < 11; ++c) s += y.at(r, c);
    EXPECT_NEAR(s, 1.0f, 1e-6f);
  }
}

TEST(Ops, LayerNormRowStatistics) {
  std::mt19937_64 rng(6);
  Graph<double> g(false);
  auto x = random_tensor(Shape{5, 32}, rng, -10.0, 10.0);
  auto y = layer_norm(g.constant(x), g.constant(Tensor<double>(Shape{32}, 1.0)), g.constant(Tensor<double>(Shape{32})))
               .value();
  for (int r = 0; r < 5; ++r) {
    double m = 0, v = 0;
    for (int c = 0; c < 32; ++c) m += y.at(r, c);
    m /= 32;
    for (int c = 0; c < 32; ++c) v += (y.at(r, c) - m) * (y.at(r, c) - m);
    v /= 32;
    EXPECT_LE(std::abs(m), 1e-6);
    EXPECT_NEAR(v, 1.0, 1e-5);
  }
}

TEST(Ops, DropoutEvalIsIdentityTrainIsUnbiased) {
  Graph<double> eval_graph(false, false, 1);
  auto x = eval_graph.constant(Tensor<double>(Shape{10}, 2.0));
  EXPECT_EQ(dropout(x, 0.5).value().vec(), x.value().vec());

  Graph<double> g(false, true, 2);
  const int n = 100000;
  auto y = dropout(g.constant(Tensor<double>(Shape{n}, 1.0)), 0.1).value();
  const double m = std::accumulate(y.vec().begin(), y.vec().end(), 0.0) / n;
  EXPECT_NEAR(m, 1.0, 0.01);
}

TEST(Ops, DropoutMasksReplayWithSameSeed) {
  Graph<float> g1(false, true, 77), g2(false, true, 77);
  auto a = dropout(g1.constant(Tensor<float>(Shape{64}, 1.f)), 0.5f).value();
  auto b = dropout(g2.constant(Tensor<float>(Shape{64}, 1.f)), 0.5f).value();
  EXPECT_EQ(a.vec(), b.vec());
}

TEST(Ops, ClipAndReluSubgradients) {
  Parameter<double> p("p", Tensor<double>(Shape{5}, std::vector<double>{-2.0, -1.0, 0.0, 1.0, 2.0}));
  {
    Graph<double> g;
    g.backward(sum(clip(g.param(p), -1.0, 1.0)));
  }
  EXPECT_EQ(p.grad.vec(), (std::vector<double>{0, 0, 1, 0, 0}));
  p.zero_grad();
  {
    Graph<double> g;
    g.backward(sum(relu(g.param(p))));
  }
  EXPECT_EQ(p.grad.vec(), (std::vector<double>{0, 0, 0, 1, 1}));
}

TEST(Ops, ErrorsNameOpAndShapes) {
  Graph<float> g;
  auto a = g.constant(Tensor<float>(Shape{2, 3}));
  auto b = g.constant(Tensor<float>(Shape{4, 2}));
  try {
    matmul(a, b);
    FAIL();
  } catch (const TensorError& e) {
    EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("(2,3)"), std::string::npos);
  }
  EXPECT_THROW(add(a, b), TensorError);
  EXPECT_THROW(ad::log(g.constant(Tensor<float>(Shape{2}, -1.f))), TensorError);
  EXPECT_THROW(ad::sqrt(g.constant(Tensor<float>(Shape{2}, 0.f))), TensorError);
  EXPECT_THROW(ad::exp(g.constant(Tensor<float>(Shape{1}, 1000.f))), TensorError);
  EXPECT_THROW(dropout(a, 1.0f), TensorError);
}

// ---- backward ----------------------------------------------------------------

TEST(Backward, SumGivesOnes) {
  Parameter<double> th("theta", Tensor<double>(Shape{3, 2}, 0.7));
  Graph<double> g;
  g.backward(sum(g.param(th)));
  for (double x : th.grad.vec()) EXPECT_EQ(x, 1.0);
}

TEST(Backward, TanhClosedForm) {
  const double x = 0.8, w0 = -1.3;
  Parameter<double> w("w", Tensor<double>(Shape{1, 1}, w0));
  Graph<double> g;
  auto xv = g.constant(Tensor<double>(Shape{1, 1}, x));
  g.backward(sum(ad::tanh(matmul(xv, g.param(w)))));
  const double t = std::tanh(w0 * x);
  EXPECT_NEAR(w.grad[0], x * (1 - t * t), 1e-15);
}

TEST(Backward, UntouchedParametersStayZero) {
  Parameter<double> used("a", Tensor<double>(Shape{2}, 1.0));
  Parameter<double> unused("b", Tensor<double>(Shape{2}, 1.0));
  Graph<double> g;
  g.param(unused);
  g.backward(sum(square(g.param(used))));
  for (double x : unused.grad.vec()) EXPECT_EQ(x, 0.0);
}

TEST(Backward, RejectsNonScalarLoss) {
  Parameter<double> p("p", Tensor<double>(Shape{2}, 1.0));
  Graph<double> g;
  EXPECT_THROW(g.backward(g.param(p)), TensorError);
}

// ---- input gradients --------------------------------------------------------

TEST(InputGradient, LinearLogitNormIsFive) {
  Graph<double> g;
  Parameter<double> w("w", Tensor<double>(Shape{2, 1}, std::vector<double>{3, 4}));
  auto x = g.input(Tensor<double>(Shape{1, 2}, std::vector<double>{0.1, -0.2}));
  auto logit = matmul(x, g.param(w));
  auto grad = g.grad_wrt_input(logit, x);
  EXPECT_NEAR(std::hypot(grad[0], grad[1]), 5.0, 1e-12);
}

struct TinyMlp {
  std::mt19937_64 rng{42};
  Mlp<double> net{"d", {3, 6, 6, 1}, Activation::tanh, Init::fan_in_uniform, rng};
};

TEST(InputGradient, OrderOneMatchesFiniteDifferences) {
  TinyMlp m;
  std::mt19937_64 rng(3);
  auto x0 = random_tensor(Shape{4, 3}, rng);
  Graph<double> g;
  auto x = g.input(x0);
  auto grad = g.grad_wrt_input(m.net.forward(g, x), x);
  auto r = check_gradient([&](Graph<double>& gg, const Vs& v) { return sum(m.net.forward(gg, v[0])); }, {x0});
  // check_gradient computes the same quantity by finite differences; compare
  // values directly as well.
  EXPECT_LT(r.rel_error, 1e-6);
  const double h = 1e-6;
  for (std::size_t k = 0; k < x0.size(); ++k) {
    auto xp = x0, xm = x0;
    xp[k] += h;
    xm[k] -= h;
    Graph<double> a(false), b(false);
    const double fd =
        (sum(m.net.forward(a, a.constant(xp))).value().item() - sum(m.net.forward(b, b.constant(xm))).value().item()) /
        (2 * h);
    EXPECT_NEAR(grad[k], fd, 1e-6 * std::max(1.0, std::abs(fd)));
  }
}

TEST(InputGradient, OrderTwoPenaltyParameterGradient) {
  TinyMlp m;
  std::mt19937_64 rng(8);
  auto x0 = random_tensor(Shape{5, 3}, rng);
  auto penalty = [&](Graph<double>& g) {
    auto x = g.input(x0);
    auto grad = g.grad_wrt_input_taped(m.net.forward(g, x), x);
    auto norm = ad::sqrt(add_scalar(sum_cols(square(grad)), 1e-12));
    return mean(square(add_scalar(norm, -1.0)));
  };
  // Finite differences run on gradient-free graphs, where the taped adjoint is
  // unavailable, so evaluate the oracle with an order-1 gradient instead.
  auto params = m.net.parameters();
  for (auto* p : params) p->zero_grad();
  {
    Graph<double> g;
    g.backward(penalty(g));
  }
  auto eval = [&] {
    Graph<double> g;
    auto x = g.input(x0);
    auto grad = g.grad_wrt_input(m.net.forward(g, x), x);
    double s = 0;
    for (int r = 0; r < 5; ++r) {
      double n2 = 1e-12;
      for (int c = 0; c < 3; ++c) n2 += grad.at(r, c) * grad.at(r, c);
      s += (std::sqrt(n2) - 1) * (std::sqrt(n2) - 1);
    }
    return s / 5;
  };
  double num2 = 0, den = 0;
  const double h = 1e-5;
  for (auto* p : params) {
    for (std::size_t k = 0; k < p->value.size(); ++k) {
      const double x = p->value[k];
      p->value[k] = x + h;
      const double fp = eval();
      p->value[k] = x - h;
      const double fm = eval();
      p->value[k] = x;
      const double fd = (fp - fm) / (2 * h);
      num2 += (fd - p->grad[k]) * (fd - p->grad[k]);
      den += fd * fd;
    }
  }
  EXPECT_GT(den, 0.0);
  EXPECT_LT(std::sqrt(num2 / den), 1e-5);
}

TEST(InputGradient, OrderTwoRejectsUnsupportedOp) {
  std::mt19937_64 rng(1);
  Mlp<double> net("r", {2, 4, 1}, Activation::relu, Init::fan_in_uniform, rng);
  Graph<double> g;
  auto x = g.input(Tensor<double>(Shape{1, 2}, 0.5));
  try {
    g.grad_wrt_input_taped(net.forward(g, x), x);
    FAIL();
  } catch (const TensorError& e) {
    EXPECT_NE(std::string(e.what()).find("relu"), std::string::npos);
  }
}

// ---- optimizers ------------------------------------------------------------

TEST(Adam, FirstStepIsSignedLearningRate) {
  Parameter<double> p("p", Tensor<double>(Shape{3}, std::vector<double>{1, 2, 3}));
  p.grad = Tensor<double>(Shape{3}, std::vector<double>{0.3, -7.0, 1e-3});
  OptimizerState<double> st;
  OptimizerConfig cfg{OptimizerKind::adam, 0.01, 0.9, 0.999, 1e-12, 0.0};
  adam_step<double>(st, {&p}, cfg);
  EXPECT_NEAR(p.value[0], 1 - 0.01, 1e-9);
  EXPECT_NEAR(p.value[1], 2 + 0.01, 1e-9);
  EXPECT_NEAR(p.value[2], 3 - 0.01, 1e-8);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  Parameter<double> p("p", Tensor<double>(Shape{4}, 0.5));
  OptimizerState<double> st;
  for (int i = 0; i < 5; ++i) adam_step<double>(st, {&p}, OptimizerConfig{});
  for (double x : p.value.vec()) EXPECT_EQ(x, 0.5);
}

TEST(Adam, TwoStepHandTable) {
  // Hand-computed: lr=0.1, betas (0.9, 0.999), eps=1e-8, g1=1, g2=-1.
  //   step1: m=0.1 v=0.001  mhat=1 vhat=1           dtheta=-0.1/(1+1e-8)
  //   step2: m=-0.01 v=0.001999 mhat=-0.01/0.19 vhat=0.001999/0.001999=1
  //          dtheta=+0.1*(0.0526315789...)/(1+1e-8)
  Parameter<double> p("p", Tensor<double>(Shape{1}, 0.0));
  OptimizerState<double> st;
  OptimizerConfig cfg{OptimizerKind::adam, 0.1, 0.9, 0.999, 1e-8, 0.0};
  p.grad[0] = 1.0;
  adam_step<double>(st, {&p}, cfg);
  const double s1 = -0.1 / (1 + 1e-8);
  EXPECT_NEAR(p.value[0], s1, 1e-12);
  p.grad[0] = -1.0;
  adam_step<double>(st, {&p}, cfg);
  const double s2 = 0.1 * (0.01 / 0.19) / (1 + 1e-8);
  EXPECT_NEAR(p.value[0], s1 + s2, 1e-12);
}

TEST(Lamb, ZeroLayerUsesUnitRatio) {
  Parameter<double> p("p", Tensor<double>(Shape{2}, 0.0));
  p.grad = Tensor<double>(Shape{2}, std::vector<double>{1.0, -2.0});
  OptimizerState<double> st;
  OptimizerConfig cfg{OptimizerKind::lamb, 0.01, 0.9, 0.999, 1e-12, 0.0005};
  lamb_step<double>(st, {&p}, cfg);
  EXPECT_NEAR(p.value[0], -0.01, 1e-9);
  EXPECT_NEAR(p.value[1], 0.01, 1e-9);
}

TEST(Lamb, UnitRatioMatchesAdamStepLength) {
  // theta chosen so |theta| = |u + wd theta| on the first step (u = sign(g)).
  const double wd = 0.0;
  Parameter<double> p("p", Tensor<double>(Shape{2}, std::vector<double>{1.0, 1.0}));
  p.grad = Tensor<double>(Shape{2}, std::vector<double>{0.5, -0.5});
  OptimizerState<double> st;
  lamb_step<double>(st, {&p}, OptimizerConfig{OptimizerKind::lamb, 0.1, 0.9, 0.999, 1e-12, wd});
  EXPECT_NEAR(p.value[0], 0.9, 1e-9);
  EXPECT_NEAR(p.value[1], 1.1, 1e-9);
}

TEST(Lamb, TrustRatioMatchesIndependentNorms) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> th(17 + trial), d(17 + trial);
    for (auto& x : th) x = n(rng);
    for (auto& x : d) x = n(rng) * 3;
    long double a = 0, b = 0;
    for (double x : th) a += static_cast<long double>(x) * x;
    for (double x : d) b += static_cast<long double>(x) * x;
    const double expected = static_cast<double>(std::sqrt(a) / std::sqrt(b));
    EXPECT_NEAR(lamb_trust_ratio(th, d), expected, 1e-7);
  }
}

// ---- checkpoints -----------------------------------------------------------

TEST(Checkpoint, RoundTripAndRejectsMismatch) {
  std::mt19937_64 rng(4);
  Mlp<float> a("net", {3, 5, 2}, Activation::relu, Init::fan_in_uniform, rng);
  Mlp<float> b("net", {3, 5, 2}, Activation::relu, Init::fan_in_uniform, rng);
  const auto dir = std::filesystem::temp_directory_path() / "betail_ckpt_test";
  std::filesystem::create_directories(dir);
  const nlohmann::json desc = {{"kind", "mlp"}, {"sizes", {3, 5, 2}}};
  save_parameters<float>(dir / "a.ckpt", desc, ad::as_const(a.parameters()));
  load_parameters<float>(dir / "a.ckpt", desc, b.parameters());
  EXPECT_EQ(checksum<float>(ad::as_const(a.parameters())), checksum<float>(ad::as_const(b.parameters())));

  Mlp<float> c("net", {3, 6, 2}, Activation::relu, Init::fan_in_uniform, rng);
  EXPECT_THROW(load_parameters<float>(dir / "a.ckpt", desc, c.parameters()), ArchiveError);
  EXPECT_THROW(load_parameters<float>(dir / "a.ckpt", nlohmann::json{{"kind", "other"}}, b.parameters()),
               ArchiveError);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace betail

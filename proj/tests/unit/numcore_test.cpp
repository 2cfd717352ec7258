#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <numbers>

#include "incomes/core/functional.hpp"
#include "incomes/core/gradcheck.hpp"
#include "incomes/core/ops.hpp"
#include "incomes/core/optim.hpp"
#include "incomes/core/rng.hpp"

using namespace incomes;

namespace {

Tensor<double> random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(s));
  for (auto& x : t.vec()) x = rng.normal(0.0, scale);
  return t;
}

using Builder = std::function<Var<double>(Graph<double>&, const std::vector<Var<double>>&)>;

// Scalar loss sum(op(inputs) * R) for a fixed random R, checked against
// central differences on every input coordinate.
double max_rel_error(std::vector<Tensor<double>> inputs, const Builder& op, Rng& rng) {
  Tensor<double> weights;
  auto loss_of = [&](Graph<double>& g, std::vector<Var<double>>& leaves) {
    leaves.clear();
    for (auto& t : inputs) leaves.push_back(g.leaf(t));
    Var<double> out = op(g, leaves);
    if (weights.shape() != out.shape()) weights = random_tensor(out.shape(), rng);
    return sum(mul(out, g.constant(weights)));
  };
  Graph<double> g;
  std::vector<Var<double>> leaves;
  Var<double> loss = loss_of(g, leaves);
  g.backward(loss);
  double worst = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor<double> analytic = leaves[i].grad();
    auto f = [&]() {
      Graph<double> h(false);
      std::vector<Var<double>> lv;
      return loss_of(h, lv).value()[0];
    };
    auto numeric = finite_diff_grad<double>(f, inputs[i].span(), 1e-5);
    worst = std::max(worst, compare_gradients<double>(analytic.span(), numeric).max_rel_error);
  }
  return worst;
}

}  // namespace

TEST(Matmul, IdentityAndHandComputed) {
  Graph<double> g(false);
  Tensor<double> eye({3, 3});
  for (int i = 0; i < 3; ++i) eye.at(i, i) = 1;
  Rng rng(1);
  auto m = random_tensor({3, 4}, rng);
  EXPECT_EQ(matmul(g.constant(eye), g.constant(m)).value(), m);

  auto c = matmul(g.constant(Tensor<double>({2, 2}, {1, 2, 3, 4})), g.constant(Tensor<double>({2, 1}, {1, 1})));
  EXPECT_EQ(c.value(), Tensor<double>({2, 1}, {3, 7}));
}

TEST(Matmul, GradientOfSumIsOnesTimesBTransposed) {
  Rng rng(2);
  auto a = random_tensor({4, 5}, rng), b = random_tensor({5, 3}, rng);
  Graph<double> g;
  auto va = g.leaf(a);
  g.backward(sum(matmul(va, g.constant(b))));
  auto f = [&]() {
    Graph<double> h(false);
    return sum(matmul(h.constant(a), h.constant(b))).value()[0];
  };
  auto numeric = finite_diff_grad<double>(f, a.span(), 1e-5);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t k = 0; k < 5; ++k) {
      double expect = 0;
      for (std::size_t j = 0; j < 3; ++j) expect += b.at(k, j);
      EXPECT_NEAR(va.grad().at(i, k), expect, 1e-12);
      EXPECT_NEAR(numeric[i * 5 + k], expect, 1e-8);
    }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Graph<double> g;
  try {
    matmul(g.constant(Tensor<double>({2, 3})), g.constant(Tensor<double>({4, 2})));
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[4,2]"), std::string::npos);
  }
}

TEST(SoftmaxT, Examples) {
  auto p = softmax_t(Tensor<double>({2}, {0, 0}), 1.0);
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
  EXPECT_GT(softmax_t(Tensor<double>({2}, {2, 0}), 1e-3)[0], 0.999);
  EXPECT_THROW(softmax_t(Tensor<double>({2}, {1, 2}), 0.0), ParameterError);
  EXPECT_THROW(softmax_t(Tensor<double>({2}, {1, 2}), -1.0), ParameterError);
}

TEST(SoftmaxT, MatchesScalarOracle) {
  // independent long-double evaluation of exp(x/T) / sum exp(x/T)
  const long double T = 0.45L;
  const long double xs[3] = {1, 2, 3};
  long double z = 0;
  for (auto x : xs) z += std::exp(x / T);
  auto p = softmax_t(Tensor<double>({3}, {1, 2, 3}), 0.45);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(p[i], static_cast<double>(std::exp(xs[i] / T) / z), 1e-15);
}

TEST(SoftmaxT, RowsNormalizedAndSharperAtLowerTemperature) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    auto logits = random_tensor({3, 7}, rng, 3.0);
    const double T = std::exp(std::log(1e-3) + rng.uniform() * (std::log(10.0) - std::log(1e-3)));
    auto p = softmax_t(logits, T);
    auto sharper = softmax_t(logits, T * 0.5);
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0;
      for (double v : p.row(r)) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
      const double m1 = *std::max_element(p.row(r).begin(), p.row(r).end());
      const double m2 = *std::max_element(sharper.row(r).begin(), sharper.row(r).end());
      if (m1 < 1.0) EXPECT_GT(m2, m1);
    }
  }
}

TEST(CrossEntropy, Examples) {
  std::vector<double> uniform(4, 0.3);
  EXPECT_NEAR(cross_entropy<double>(uniform, 2), std::log(4.0), 1e-12);
  std::vector<double> peaked{20, 0, 0, 0};
  EXPECT_LT(cross_entropy<double>(peaked, 0), 1e-6);
  EXPECT_THROW(cross_entropy<double>(peaked, 4), IndexError);
  EXPECT_THROW(cross_entropy<double>(peaked, -1), IndexError);

  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> x(9);
    for (auto& v : x) v = rng.normal(0, 2);
    const int target = static_cast<int>(rng.below(9));
    long double z = 0;
    for (double v : x) z += std::exp(static_cast<long double>(v));
    const double oracle = static_cast<double>(-(x[target] - std::log(z)));
    EXPECT_NEAR(cross_entropy<double>(x, target), oracle, 1e-10);
  }
}

TEST(KlDivergence, Examples) {
  std::vector<double> q{0.2, 0.3, 0.5};
  std::vector<double> lq{std::log(0.2), std::log(0.3), std::log(0.5)};
  EXPECT_NEAR(kl_divergence<double>(q, lq), 0.0, 1e-9);
  std::vector<double> p{1, 0};
  std::vector<double> half{std::log(0.5), std::log(0.5)};
  EXPECT_NEAR(kl_divergence<double>(p, half), std::log(2.0), 1e-12);
  std::vector<double> bad{0.7, 0.7};
  EXPECT_THROW(kl_divergence<double>(bad, half), ContractError);
}

TEST(KlDivergence, GibbsInequalityOverRandomPairs) {
  Rng rng(5);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.below(10);
    Tensor<double> a({n}), b({n});
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = rng.normal(0, 2);
      b[i] = rng.normal(0, 2);
    }
    auto p = softmax_t(a, 1.0);
    auto lq = log_softmax<double>(b.span());
    EXPECT_GE(kl_divergence<double>(p.span(), lq), -1e-9);
  }
}

TEST(Backward, SumAndSquare) {
  Rng rng(6);
  auto x = random_tensor({3, 4}, rng);
  {
    Graph<double> g;
    auto v = g.leaf(x);
    g.backward(sum(v));
    for (double d : v.grad().vec()) EXPECT_EQ(d, 1.0);
  }
  {
    Graph<double> g;
    auto v = g.leaf(x);
    g.backward(sum(mul(v, v)));
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(v.grad()[i], 2 * x[i]);
  }
}

TEST(Backward, RejectsNonScalarLoss) {
  Graph<double> g;
  auto v = g.leaf(Tensor<double>({2, 2}, 1.0));
  EXPECT_THROW(g.backward(scale(v, 2.0)), ContractError);
}

TEST(Backward, VisitsInReverseTopologicalOrder) {
  Graph<double> g;
  auto x = g.leaf(Tensor<double>({2}, {1, 2}));
  auto a = scale(x, 3.0);
  auto b = mul(a, x);
  auto l = sum(add(a, b));
  g.backward(l);
  const auto& order = g.last_backward_order();
  ASSERT_FALSE(order.empty());
  for (std::size_t i = 1; i < order.size(); ++i) EXPECT_GT(order[i - 1], order[i]);
  for (std::size_t id = 0; id < g.size(); ++id)
    for (auto in : g.inputs_of(id)) EXPECT_LT(in, id);
}

TEST(Backward, GradientsAccumulateAcrossConsumersAndCalls) {
  Parameter<double> p(Tensor<double>({2}, {1.0, -2.0}));
  for (int call = 0; call < 2; ++call) {
    Graph<double> g;
    auto v = g.param(p);
    g.backward(sum(add(v, v)));
  }
  EXPECT_EQ(p.grad[0], 4.0);
  p.zero_grad();
  EXPECT_EQ(p.grad[0], 0.0);
}

TEST(FiniteDiff, Examples) {
  std::vector<double> x{3.0};
  auto g = finite_diff_grad<double>([&] { return x[0] * x[0]; }, x, 1e-5);
  EXPECT_NEAR(g[0], 6.0, 1e-6);
  std::vector<double> y{1.0, 2.0};
  for (double d : finite_diff_grad<double>([] { return 7.0; }, y, 1e-5)) EXPECT_NEAR(d, 0.0, 1e-8);
  EXPECT_THROW(finite_diff_grad<double>([] { return 0.0; }, y, 0.0), ParameterError);
}

// Every differentiable op against central differences, 10 random instances each.
TEST(GradCheck, AllOps) {
  Rng rng(7);
  const double tol = 1e-4;
  for (int trial = 0; trial < 10; ++trial) {
    EXPECT_LT(max_rel_error({random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)},
                            [](auto&, const auto& v) { return matmul(v[0], v[1]); }, rng),
              tol);
    EXPECT_LT(max_rel_error({random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)},
                            [](auto&, const auto& v) { return silu_gate(v[0], v[1]); }, rng),
              tol);
    EXPECT_LT(max_rel_error({random_tensor({3, 6}, rng), random_tensor({6}, rng)},
                            [](auto&, const auto& v) { return rms_norm(v[0], v[1]); }, rng),
              tol);
    EXPECT_LT(max_rel_error({random_tensor({4, 8}, rng)},
                            [](auto&, const auto& v) { return rope(v[0], std::vector<int>{0, 3, 1, 7}, 2); }, rng),
              tol);
    EXPECT_LT(max_rel_error({random_tensor({5, 3}, rng)},
                            [](auto&, const auto& v) { return gather_rows(v[0], std::vector<int>{4, 0, 4, 2}); }, rng),
              tol);
    EXPECT_LT(max_rel_error({random_tensor({2, 5}, rng)},
                            [](auto&, const auto& v) { return softmax_rows(v[0], 0.7); }, rng),
              tol);
    auto layout = SeqLayout::packed({3, 2});
    EXPECT_LT(max_rel_error({random_tensor({5, 4}, rng), random_tensor({5, 4}, rng), random_tensor({5, 4}, rng)},
                            [&](auto&, const auto& v) { return causal_attention(v[0], v[1], v[2], layout, 2); }, rng),
              tol);
    Tensor<double> zero_value({4});
    EXPECT_LT(max_rel_error({random_tensor({3, 4}, rng), random_tensor({2, 4}, rng), random_tensor({2, 4}, rng),
                             random_tensor({4}, rng)},
                            [&](auto&, const auto& v) {
                              return cross_attention<double>(v[0], v[1], v[2], v[3], zero_value, 2, 0.8);
                            },
                            rng),
              tol);
    EXPECT_LT(max_rel_error({random_tensor({3, 4}, rng), random_tensor({2, 4}, rng), random_tensor({4}, rng)},
                            [&](auto& g, const auto& v) {
                              return neg_log(cross_attention_mass<double>(v[0], v[1], v[2], 2, 0.9, {{0, 1}, {2, 2}}));
                            },
                            rng),
              tol);
    std::vector<int> targets{1, -1, 3};
    std::vector<double> w{0.5, 1.0, 2.0};
    EXPECT_LT(max_rel_error({random_tensor({3, 5}, rng)},
                            [&](auto&, const auto& v) { return weighted_cross_entropy(v[0], targets, w); }, rng),
              tol);
    auto ref = softmax_t(random_tensor({3, 5}, rng), 1.0);
    EXPECT_LT(max_rel_error({random_tensor({3, 5}, rng)},
                            [&](auto&, const auto& v) { return weighted_kl(v[0], ref, w); }, rng),
              tol);
  }
}

TEST(CrossAttention, ZeroOnlyPoolGivesZeros) {
  Graph<double> g(false);
  Rng rng(8);
  auto q = g.constant(random_tensor({3, 4}, rng));
  auto zk = g.constant(random_tensor({4}, rng));
  CrossAttnTrace<double> trace;
  auto out = cross_attention<double>(q, std::nullopt, std::nullopt, zk, Tensor<double>({4}), 2, 1.0, &trace);
  for (double v : out.value().vec()) EXPECT_EQ(v, 0.0);
  for (double p : trace.probs.vec()) EXPECT_EQ(p, 1.0);
  EXPECT_THROW(cross_attention<double>(q, std::nullopt, std::nullopt, std::nullopt, Tensor<double>({4}), 2, 1.0),
               ContractError);
}

TEST(Schedule, WarmupCosineEndpointsAndMidpoint) {
  LrSchedule s{1e-3, 1e-6, 10, 110};
  EXPECT_DOUBLE_EQ(s.at(0), 1e-6);
  EXPECT_DOUBLE_EQ(s.at(10), 1e-3);
  EXPECT_NEAR(s.at(60), (1e-3 + 1e-6) / 2, 1e-15);
  EXPECT_NEAR(s.at(110), 1e-6, 1e-18);
  EXPECT_NEAR(s.at(500), 1e-6, 1e-18);
  for (int i = 0; i < 200; ++i) {
    EXPECT_GE(s.at(i), 1e-6 - 1e-18);
    EXPECT_LE(s.at(i), 1e-3 + 1e-18);
  }
}

TEST(Adam, ShapeMismatchAndDeterminism) {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    Parameter<float> p(Tensor<float>({4}, {1, 2, 3, 4}));
    Adam<float> opt({&p}, LrSchedule{0.1, 0.001, 2, 20});
    std::vector<float> trail;
    for (int step = 0; step < 20; ++step) {
      p.zero_grad();
      Graph<float> g;
      auto v = g.param(p);
      auto noise = Tensor<float>({4});
      for (auto& x : noise.vec()) x = static_cast<float>(rng.normal());
      g.backward(sum(mul(mul(v, v), g.constant(noise))));
      opt.step();
      trail.insert(trail.end(), p.value.vec().begin(), p.value.vec().end());
    }
    return trail;
  };
  EXPECT_EQ(run(11), run(11));
  EXPECT_NE(run(11), run(12));

  Parameter<float> p(Tensor<float>({2}));
  p.grad = Tensor<float>({3});
  Adam<float> opt({&p}, LrSchedule{});
  EXPECT_THROW(opt.step(), DimensionError);
}

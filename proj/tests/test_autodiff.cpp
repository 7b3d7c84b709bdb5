#include <gtest/gtest.h>

#include "kfatt/attention.hpp"
#include "kfatt/autodiff.hpp"
#include "gradcheck.hpp"

using namespace kfatt;
using ad::NodeId;

using namespace kfatt::gradcheck;

namespace kfatt::gradcheck {
void PrintTo(const OpCase& c, std::ostream* os) { *os << c.name; }
}  // namespace kfatt::gradcheck

class OpGradient : public ::testing::TestWithParam<OpCase> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
  const auto& c = GetParam();
  EXPECT_LE(worst_gradient_error(c.sample, c.build, std::hash<std::string>{}(c.name)), 1e-4) << c.name;
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::ValuesIn(op_cases()),
                         [](const auto& info) { return info.param.name; });

TEST(Backward, SumOfParametersHasUnitGradients) {
  ad::Tape t;
  const NodeId a = t.variable(Tensor({2, 3}, 0.5)), b = t.variable(Tensor({4}, -1.0));
  t.backward(t.add(t.sum(a), t.sum(b)));
  const Tensor ga = t.grad(a), gb = t.grad(b);
  for (double g : ga.data()) EXPECT_EQ(g, 1.0);
  for (double g : gb.data()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, LogisticRegressionTextbookGradient) {
  const Tensor x = Tensor::matrix(3, 1, {0.5, -1.2, 2.0});
  const Tensor w = Tensor::matrix(1, 3, {0.3, 0.1, -0.4});
  ad::Tape t;
  const NodeId wi = t.variable(w);
  const double y = 1.0;
  t.backward(t.bce(t.sigmoid(t.matmul(wi, t.constant(x))), y));
  const double z = 0.3 * 0.5 + 0.1 * -1.2 + -0.4 * 2.0;
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(t.grad(wi)[i], (sigmoid(z) - y) * x[i], 1e-14);
}

TEST(Backward, NonScalarLossRejected) {
  ad::Tape t;
  const NodeId a = t.variable(Tensor({2}, 1.0));
  try {
    t.backward(a);
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "loss must be scalar");
  }
}

TEST(Backward, UnreachedNodesHaveZeroGradient) {
  ad::Tape t;
  const NodeId a = t.variable(Tensor({2}, 1.0)), b = t.variable(Tensor({2}, 3.0));
  (void)t.exp(b);
  t.backward(t.sum(a));
  const Tensor gb = t.grad(b);
  for (double g : gb.data()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, ParameterLeavesAccumulateIntoExternalBuffers) {
  const Tensor w = Tensor::vec({1.0, 2.0});
  Tensor g({2});
  for (int rep = 0; rep < 2; ++rep) {
    ad::Tape t;
    t.backward(t.sum(t.scale(t.parameter(w, g), 3.0)));
  }
  EXPECT_EQ(g[0], 6.0);
  EXPECT_EQ(g[1], 6.0);
}

TEST(Forward, IdentityReturnsInput) {
  ad::Expression e{{{"identity", {"x"}, "y", {}}}, "y"};
  const Tensor x = Tensor::matrix(2, 2, {1, 2, 3, 4});
  EXPECT_EQ(ad::forward(e, {{"x", x}}).value().values(), x.values());
}

TEST(Forward, SoftmaxOfMatmulEqualsDirectComposition) {
  Rng rng(3);
  const Tensor a = rng.normal_tensor({3, 4}), b = rng.normal_tensor({4, 5});
  ad::Expression e{{{"matmul", {"a", "b"}, "ab", {}}, {"softmax", {"ab"}, "p", {}}}, "p"};
  EXPECT_LE(max_abs_diff(ad::forward(e, {{"a", a}, {"b", b}}).value(), softmax_rows(matmul(a, b))), 1e-12);
}

TEST(Forward, KfattBaseHeadEqualsAttentionKernel) {
  Rng rng(4);
  const std::size_t d = 4, T = 6;
  const Tensor mu = rng.normal_tensor({1, d}), vals = rng.normal_tensor({T, d}), q = rng.normal_tensor({1, d}),
               keys = rng.normal_tensor({T, d});
  ad::Expression e{{{"matmul_nt", {"q", "k"}, "logit", {}},
                    {"exp", {"logit"}, "prec", {}},
                    {"kfatt_base", {"mu", "pq", "v", "prec"}, "out", {}}},
                   "out"};
  const Tensor got =
      ad::forward(e, {{"q", q}, {"k", keys}, {"mu", mu}, {"pq", Tensor({1, 1}, 0.7)}, {"v", vals}}).value();
  QueryPrior prior{mu.reshaped({d}), 0.7};
  std::vector<Measurement> ms;
  for (std::size_t t = 0; t < T; ++t)
    ms.push_back({Tensor::vec(std::vector<double>(vals.row_span(t).begin(), vals.row_span(t).end())),
                  std::exp(dot(q.data(), keys.row_span(t)))});
  const Tensor want = kfatt_base(prior, ms).estimate;
  for (std::size_t i = 0; i < d; ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
}

TEST(Forward, UnsupportedOpNamed) {
  ad::Expression e{{{"conv2d", {"x"}, "y", {}}}, "y"};
  try {
    ad::forward(e, {{"x", Tensor({1}, 1.0)}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("conv2d"), std::string::npos);
  }
}

TEST(Forward, DeterministicTapes) {
  Rng rng(8);
  const Tensor a = rng.normal_tensor({3, 3});
  ad::Expression e{{{"exp", {"a"}, "b", {}}, {"softmax", {"b"}, "c", {}}, {"sum", {"c"}, "s", {}}}, "s"};
  auto r1 = ad::forward(e, {{"a", a}}), r2 = ad::forward(e, {{"a", a}});
  ASSERT_EQ(r1.tape.size(), r2.tape.size());
  for (std::size_t i = 0; i < r1.tape.size(); ++i) EXPECT_EQ(r1.tape.value(i).values(), r2.tape.value(i).values());
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  std::vector<Tensor> p{Tensor::vec({1.0, -2.0})};
  const std::vector<Tensor> g{Tensor({2})};
  ad::Adam opt;
  for (int i = 0; i < 10; ++i) opt.step(p, g);
  EXPECT_EQ(p[0][0], 1.0);
  EXPECT_EQ(p[0][1], -2.0);
}

TEST(Adam, ConstantGradientStepsApproachLr) {
  ad::AdamConfig cfg;
  cfg.lr = 0.01;
  ad::Adam opt(cfg);
  std::vector<Tensor> p{Tensor::vec({0.0, 0.0})};
  const std::vector<Tensor> g{Tensor::vec({3.0, -0.2})};
  for (int i = 0; i < 200; ++i) {
    const Tensor before = p[0];
    opt.step(p, g);
    EXPECT_LE(std::abs(p[0][0] - before[0]), cfg.lr * (1 + 1e-9));
    if (i == 199) {
      EXPECT_NEAR(p[0][0] - before[0], -cfg.lr, 1e-8);
      EXPECT_NEAR(p[0][1] - before[1], cfg.lr, 1e-8);
    }
  }
}

TEST(Adam, QuadraticBowlConverges) {
  ad::AdamConfig cfg;
  cfg.lr = 0.05;
  ad::Adam opt(cfg);
  std::vector<Tensor> w{Tensor::vec({1.0, -0.5, 0.25})};
  for (int i = 0; i < 500; ++i) {
    std::vector<Tensor> g{w[0]};
    for (auto& x : g[0].data()) x *= 2.0;
    opt.step(w, g);
  }
  EXPECT_LT(std::sqrt(squared_norm(w[0].data())), 1e-3);
}

TEST(Adam, ShapeMismatchRejected) {
  ad::Adam opt;
  std::vector<Tensor> p{Tensor({2})};
  const std::vector<Tensor> g{Tensor({3})};
  EXPECT_THROW(opt.step(p, g), Error);
  ad::AdamConfig bad;
  bad.lr = 0.0;
  EXPECT_THROW(ad::Adam{bad}, Error);
}

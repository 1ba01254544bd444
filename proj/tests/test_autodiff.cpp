#include <gtest/gtest.h>

#include <cmath>

#include "dso/autodiff.hpp"
#include "dso/errors.hpp"
#include "support/oracles.hpp"

using namespace dso;
using ad::Graph;
using ad::Tensor;
using ad::Var;
using oracle::check_gradient;
using oracle::random_tensor;

namespace {

constexpr double kTol = 1e-4;

void expect_grad(const oracle::ScalarFn& fn, const std::vector<Tensor>& inputs) {
  const auto r = check_gradient(fn, inputs);
  EXPECT_LT(r.rel_error, kTol) << "analytic norm " << r.analytic_norm;
}

}  // namespace

TEST(Autodiff, MatmulForward) {
  Graph g;
  Var a = g.constant(Tensor::matrix({{1, 2}, {3, 4}}));
  Var b = g.constant(Tensor::matrix({{5}, {6}}));
  Var c = ad::matmul(a, b);
  EXPECT_EQ(c.value().shape(), (std::vector<std::size_t>{2, 1}));
  EXPECT_DOUBLE_EQ(c.value()[0], 17);
  EXPECT_DOUBLE_EQ(c.value()[1], 39);
}

TEST(Autodiff, MatmulShapeMismatchThrows) {
  Graph g;
  Var a = g.constant(Tensor({2, 3}));
  Var b = g.constant(Tensor({2, 3}));
  EXPECT_THROW(ad::matmul(a, b), ShapeError);
}

TEST(Autodiff, GradientAccumulatesOverConsumers) {
  Graph g;
  Var x = g.parameter(Tensor::scalar(3.0));
  Var y = ad::add(ad::mul(x, x), x);  // x^2 + x
  g.backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
}

TEST(Autodiff, ConstantsGetNoGradient) {
  Graph g;
  Var c = g.constant(Tensor::scalar(2.0));
  Var x = g.parameter(Tensor::scalar(5.0));
  g.backward(ad::mul(c, x));
  EXPECT_FALSE(g.requires_grad(c));
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
}

TEST(Autodiff, LeafGradientsAccumulateAcrossPasses) {
  Graph g;
  Var x = g.parameter(Tensor::vector({1.0, -2.0}));
  Var y = ad::sum(ad::mul(x, x));
  g.backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[1], -4.0);
  g.backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -8.0);
  g.zero_grad();
  g.backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
}

TEST(Autodiff, BackwardNeedsScalarRoot) {
  Graph g;
  Var x = g.parameter(Tensor::vector({1.0, 2.0}));
  EXPECT_THROW(g.backward(x), ShapeError);
}

TEST(Autodiff, AbsSubgradientAtZeroIsZero) {
  Graph g;
  Var x = g.parameter(Tensor::vector({0.0, 2.0, -3.0}));
  g.backward(ad::sum(ad::abs(x)));
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 1.0);
  EXPECT_EQ(x.grad()[2], -1.0);
}

TEST(Autodiff, SoftmaxRowsSumToOne) {
  Rng rng(3);
  Graph g;
  Var x = g.constant(random_tensor(rng, {4, 5}, 10.0));
  const Tensor p = ad::softmax_rows(x).value();
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 5; ++c) s += p.at(r, c);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Autodiff, CrossEntropyStableForLargeLogits) {
  Graph g;
  Var x = g.constant(Tensor::matrix({{1000.0, 0.0}}));
  const std::size_t label = 1;
  const double loss = ad::softmax_cross_entropy(x, std::span(&label, 1)).item();
  EXPECT_TRUE(std::isfinite(loss));
  EXPECT_NEAR(loss, 1000.0, 1e-9);
}

TEST(Autodiff, CrossEntropyRejectsBadLabel) {
  Graph g;
  Var x = g.constant(Tensor({1, 2}));
  const std::size_t label = 2;
  EXPECT_THROW(ad::softmax_cross_entropy(x, std::span(&label, 1)), IndexError);
}

TEST(Autodiff, LayerNormNormalizesRows) {
  Rng rng(4);
  Graph g;
  Var x = g.constant(random_tensor(rng, {3, 8}, 5.0));
  Var gain = g.constant(Tensor({8}, 1.0));
  Var shift = g.constant(Tensor({8}, 0.0));
  const Tensor y = ad::layer_norm(x, gain, shift).value();
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 8; ++c) m += y.at(r, c) / 8;
    for (std::size_t c = 0; c < 8; ++c) v += (y.at(r, c) - m) * (y.at(r, c) - m) / 8;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-5);
  }
}

TEST(Autodiff, SteerWithZeroLambdaIsIdentity) {
  Rng rng(5);
  Graph g;
  const Tensor h = random_tensor(rng, {3, 4});
  Var out = ad::steer(g.constant(h), g.constant(random_tensor(rng, {4})),
                      g.constant(random_tensor(rng, {4})), g.constant(Tensor::scalar(0.0)));
  EXPECT_EQ(out.value(), h);
}

// ---- finite-difference oracles --------------------------------------------

class GradientOracle : public ::testing::TestWithParam<int> {};

TEST_P(GradientOracle, Matmul) {
  Rng rng(100 + GetParam());
  const std::size_t m = 1 + rng.below(4), k = 1 + rng.below(4), n = 1 + rng.below(4);
  expect_grad([&, r = rng](Graph& g, const std::vector<Var>& v) mutable {
    return oracle::project(g, ad::matmul(v[0], v[1]), r);
  }, {random_tensor(rng, {m, k}), random_tensor(rng, {k, n})});
}

TEST_P(GradientOracle, LayerNorm) {
  Rng rng(200 + GetParam());
  const std::size_t rows = 1 + rng.below(4), width = 2 + rng.below(6);
  expect_grad([&, r = rng](Graph& g, const std::vector<Var>& v) mutable {
    return oracle::project(g, ad::layer_norm(v[0], v[1], v[2]), r);
  }, {random_tensor(rng, {rows, width}), random_tensor(rng, {width}), random_tensor(rng, {width})});
}

TEST_P(GradientOracle, Attention) {
  Rng rng(300 + GetParam());
  const std::size_t t = 1 + rng.below(5), d = 1 + rng.below(4);
  expect_grad([&, r = rng](Graph& g, const std::vector<Var>& v) mutable {
    return oracle::project(g, ad::attention(v[0], v[1], v[2]), r);
  }, {random_tensor(rng, {t, d}), random_tensor(rng, {t, d}), random_tensor(rng, {t, d})});
}

TEST_P(GradientOracle, SoftmaxCrossEntropy) {
  Rng rng(400 + GetParam());
  const std::size_t rows = 1 + rng.below(4), classes = 2 + rng.below(4);
  std::vector<std::size_t> labels;
  for (std::size_t i = 0; i < rows; ++i) labels.push_back(rng.below(classes));
  expect_grad([&](Graph&, const std::vector<Var>& v) {
    return ad::softmax_cross_entropy(v[0], labels);
  }, {random_tensor(rng, {rows, classes}, 3.0)});
}

TEST_P(GradientOracle, Steer) {
  Rng rng(500 + GetParam());
  const std::size_t rows = 1 + rng.below(4), width = 1 + rng.below(5);
  expect_grad([&, r = rng](Graph& g, const std::vector<Var>& v) mutable {
    return oracle::project(g, ad::steer(v[0], v[1], v[2], v[3]), r);
  }, {random_tensor(rng, {rows, width}), random_tensor(rng, {width}), random_tensor(rng, {width}),
      Tensor::scalar(rng.uniform() * 2)});
}

TEST_P(GradientOracle, ElementwiseChain) {
  Rng rng(600 + GetParam());
  const std::size_t rows = 1 + rng.below(3), width = 1 + rng.below(5);
  expect_grad([&, r = rng](Graph& g, const std::vector<Var>& v) mutable {
    Var x = ad::gelu(v[0]);
    x = ad::add_row(ad::mul(x, ad::exp(ad::scale(v[0], 0.3))), v[1]);
    x = ad::log_softmax_rows(ad::sub(x, ad::add_scalar(v[0], 0.5)));
    return oracle::project(g, ad::mean_rows(x), r);
  }, {random_tensor(rng, {rows, width}), random_tensor(rng, {width})});
}

TEST_P(GradientOracle, GatherTransposeSoftmax) {
  Rng rng(700 + GetParam());
  std::vector<std::size_t> idx = {rng.below(4), rng.below(4), rng.below(4)};
  expect_grad([&, r = rng](Graph& g, const std::vector<Var>& v) mutable {
    Var x = ad::gather_rows(v[0], idx);
    return oracle::project(g, ad::softmax_rows(ad::transpose(x)), r);
  }, {random_tensor(rng, {4, 3})});
}

TEST_P(GradientOracle, ClampMinimumAbsAwayFromKinks) {
  Rng rng(800 + GetParam());
  // Values kept away from the clamp bounds, ties and zero.
  Tensor a({5}), b({5});
  for (std::size_t i = 0; i < 5; ++i) {
    a[i] = (rng.bernoulli(0.5) ? 1 : -1) * (0.1 + rng.uniform());
    b[i] = a[i] + (rng.bernoulli(0.5) ? 0.3 : -0.3);
  }
  expect_grad([&, r = rng](Graph& g, const std::vector<Var>& v) mutable {
    Var x = ad::minimum(ad::clamp(v[0], -0.75, 0.75), v[1]);
    return ad::add(oracle::project(g, x, r), ad::sum(ad::abs(v[0])));
  }, {a, b});
}

INSTANTIATE_TEST_SUITE_P(Random, GradientOracle, ::testing::Range(0, 10));

#include <gtest/gtest.h>

#include <cmath>

#include "dso/errors.hpp"
#include "dso/optimizer.hpp"
#include "support/oracles.hpp"

using namespace dso;
using ad::Tensor;

TEST(AdamW, ZeroGradientZeroDecayLeavesParamsUnchanged) {
  Tensor p = Tensor::vector({0.5, -1.5, 2.0});
  const Tensor before = p;
  optim::AdamW opt({.lr = 1e-3, .weight_decay = 0.0});
  Tensor* params[] = {&p};
  const Tensor grads[] = {Tensor({3}, 0.0)};
  for (int i = 0; i < 5; ++i) opt.step(params, grads);
  EXPECT_EQ(p, before);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  Tensor p = Tensor::vector({0.0, 0.0});
  optim::AdamW opt({.lr = 1e-3});
  Tensor* params[] = {&p};
  const Tensor grads[] = {Tensor::vector({0.7, -3.0})};
  opt.step(params, grads);
  // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
  EXPECT_NEAR(p[0], -1e-3 * 0.7 / (0.7 + 1e-8), 1e-15);
  EXPECT_NEAR(p[1], 1e-3 * 3.0 / (3.0 + 1e-8), 1e-15);
  EXPECT_EQ(opt.step_count(), 1u);
}

TEST(AdamW, DecayIsDecoupledFromGradient) {
  Tensor p = Tensor::vector({2.0});
  optim::AdamW opt({.lr = 0.1, .weight_decay = 0.5});
  Tensor* params[] = {&p};
  const Tensor grads[] = {Tensor::vector({0.0})};
  opt.step(params, grads);
  EXPECT_DOUBLE_EQ(p[0], 2.0 * (1.0 - 0.1 * 0.5));
}

TEST(AdamW, MomentsKeepParameterShapes) {
  Tensor a({2, 3}, 1.0), b({4}, 1.0);
  optim::AdamW opt;
  Tensor* params[] = {&a, &b};
  const Tensor grads[] = {Tensor({2, 3}, 0.1), Tensor({4}, 0.2)};
  opt.step(params, grads);
  ASSERT_EQ(opt.first_moments().size(), 2u);
  EXPECT_EQ(opt.first_moments()[0].shape(), a.shape());
  EXPECT_EQ(opt.second_moments()[1].shape(), b.shape());
}

TEST(AdamW, ShapeMismatchThrows) {
  Tensor p({3});
  optim::AdamW opt;
  Tensor* params[] = {&p};
  const Tensor grads[] = {Tensor({2})};
  EXPECT_THROW(opt.step(params, grads), ShapeError);
}

TEST(AdamW, MatchesReferenceImplementation) {
  for (int trial = 0; trial < 20; ++trial) {
    Rng rng(Rng(77).split(trial));
    const double lr = 1e-4 + rng.uniform() * 1e-2;
    const double wd = rng.uniform() * 0.1;
    std::vector<std::vector<double>> ref_params = {std::vector<double>(5), std::vector<double>(3)};
    for (auto& p : ref_params) {
      for (double& x : p) x = rng.normal();
    }
    std::vector<Tensor> tensors = {Tensor::vector(ref_params[0]), Tensor::vector(ref_params[1])};
    Tensor* ptrs[] = {&tensors[0], &tensors[1]};
    optim::AdamW opt({.lr = lr, .weight_decay = wd});
    oracle::ReferenceAdamW ref{lr, wd};
    for (int step = 0; step < 25; ++step) {
      std::vector<std::vector<double>> g = {std::vector<double>(5), std::vector<double>(3)};
      for (auto& v : g) {
        for (double& x : v) x = rng.normal() * (step % 3 == 0 ? 10.0 : 0.1);
      }
      const Tensor grads[] = {Tensor::vector(g[0]), Tensor::vector(g[1])};
      opt.step(ptrs, grads);
      ref.step(ref_params, g);
    }
    for (std::size_t i = 0; i < 2; ++i) {
      for (std::size_t j = 0; j < ref_params[i].size(); ++j) {
        EXPECT_NEAR(tensors[i][j], ref_params[i][j], 1e-12);
      }
    }
  }
}

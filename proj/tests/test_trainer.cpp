#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "dso/dso_trainer.hpp"
#include "dso/errors.hpp"

using namespace dso;
using train::TrainConfig;

namespace {

struct Fixture {
  data::DatasetBundle world;
  policy::PolicyModel model;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    data::WorldConfig wc;
    wc.n_occupations = 4;
    wc.train_per_occupation = 16;
    wc.eval_per_occupation = 4;
    wc.unambiguous_eval_per_occupation = 4;
    wc.pretrain_ambiguous_per_occupation = 30;
    wc.pretrain_unambiguous_per_occupation = 30;
    wc.vocab_size = 24;
    wc.seed = 5;
    auto world = data::generate(wc);
    policy::PolicyConfig pc;
    pc.vocab_size = 24;
    pc.d_model = 8;
    pc.num_blocks = 2;
    pc.mlp_hidden = 16;
    pc.seed = 5;
    policy::PolicyModel model(pc);
    policy::PretrainConfig pre;
    pre.epochs = 4;
    policy::pretrain_biased(model, world.pretrain, pre);
    return Fixture{std::move(world), std::move(model)};
  }();
  return f;
}

TrainConfig small_train() {
  TrainConfig c;
  c.train_samples = 64;
  c.batch_size = 16;
  c.lr = 5e-3;
  c.seed = 17;
  return c;
}

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

double l1(const std::vector<std::vector<double>>& blocks) {
  double s = 0.0;
  for (const auto& v : blocks) {
    for (double x : v) s += std::abs(x);
  }
  return s;
}

steer::InterventionParams random_params(const policy::PolicyModel& m, Rng& rng, double scale) {
  auto p = steer::InterventionParams::zeros(m.hook_widths());
  for (auto* side : {&p.a, &p.b}) {
    for (auto& v : *side) {
      for (double& x : v) x = scale * rng.normal();
    }
  }
  return p;
}

}  // namespace

TEST(Trainer, ConfigValidation) {
  EXPECT_NO_THROW(TrainConfig{}.validate());
  auto bad = [](auto mutate) {
    TrainConfig c;
    mutate(c);
    return c;
  };
  EXPECT_THROW(bad([](TrainConfig& c) { c.clip = 0.0; }).validate(), PreconditionError);
  EXPECT_THROW(bad([](TrainConfig& c) { c.clip = 1.0; }).validate(), PreconditionError);
  EXPECT_THROW(bad([](TrainConfig& c) { c.alpha = -1.0; }).validate(), PreconditionError);
  EXPECT_THROW(bad([](TrainConfig& c) { c.lr = 0.0; }).validate(), PreconditionError);
  EXPECT_THROW(bad([](TrainConfig& c) { c.batch_size = 0; }).validate(), PreconditionError);
  EXPECT_THROW(bad([](TrainConfig& c) { c.kl_budget = -0.1; }).validate(), PreconditionError);
}

TEST(Trainer, ConfigJsonRoundTrip) {
  TrainConfig c = small_train();
  c.kl_budget = 0.25;
  c.exact_majority = true;
  const auto back = train::train_config_from_json(train::to_json(c));
  EXPECT_EQ(train::to_json(back), train::to_json(c));
  EXPECT_EQ(back.batch_size, 16u);
  EXPECT_EQ(*back.kl_budget, 0.25);
  EXPECT_THROW(train::train_config_from_json({{"batchsize", 3}}), PreconditionError);
  EXPECT_THROW(train::train_config_from_json({{"clip", 2.0}}), PreconditionError);
  const auto partial = train::train_config_from_json({{"lr", 0.01}});
  EXPECT_EQ(partial.lr, 0.01);
  EXPECT_EQ(partial.batch_size, TrainConfig{}.batch_size);
}

TEST(Trainer, BalancedSubset) {
  const auto& f = fixture();
  const auto subset = train::balanced_subset(f.world.ambiguous_train, 40, 4);
  ASSERT_EQ(subset.size(), 40u);
  std::map<std::size_t, int> counts;
  for (const auto& s : subset) ++counts[s.occupation];
  for (const auto& [o, n] : counts) EXPECT_EQ(n, 10) << o;
  EXPECT_THROW(train::balanced_subset(f.world.ambiguous_train, 42, 4), PreconditionError);
  EXPECT_THROW(train::balanced_subset(f.world.ambiguous_train, 80, 4), PreconditionError);
}

TEST(Trainer, RolloutsAreSeededAndScoredAgainstBatchMajority) {
  const auto& f = fixture();
  const auto& samples = f.world.ambiguous_train;
  const auto params = steer::InterventionParams::zeros(f.model.hook_widths());
  const auto idx = iota(samples.size());
  std::vector<fair::Stereotype> maj1(4, fair::Stereotype::pro), maj2 = maj1;
  Rng r1(3), r2(3);
  const auto b1 = train::collect_rollouts(f.model, params, samples, idx, f.world.table, r1, maj1);
  const auto b2 = train::collect_rollouts(f.model, params, samples, idx, f.world.table, r2, maj2);
  EXPECT_EQ(b1.action, b2.action);
  EXPECT_EQ(b1.reward, b2.reward);

  std::vector<std::size_t> pro(4, 0), anti(4, 0);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto label = fair::stereotype_of(b1.action[k], samples[idx[k]], f.world.table);
    (label == fair::Stereotype::pro ? pro : anti)[samples[idx[k]].occupation]++;
  }
  for (std::size_t o = 0; o < 4; ++o) {
    EXPECT_EQ(maj1[o], pro[o] >= anti[o] ? fair::Stereotype::pro : fair::Stereotype::anti);
  }
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto& s = samples[idx[k]];
    EXPECT_EQ(b1.reward[k], fair::fairness_reward(b1.action[k], s, f.world.table, maj1[s.occupation]));
    const auto probs = policy::forward(f.model, data::encode(s), &params);
    EXPECT_NEAR(b1.old_log_prob[k], std::log(probs[b1.action[k]]), 1e-12);
  }
}

TEST(Trainer, FixedMajorityOverridesBatchEstimate) {
  const auto& f = fixture();
  const auto params = steer::InterventionParams::zeros(f.model.hook_widths());
  const auto idx = iota(8);
  std::vector<fair::Stereotype> majority(4, fair::Stereotype::pro);
  const std::vector<fair::Stereotype> fixed(4, fair::Stereotype::anti);
  Rng rng(4);
  const auto b = train::collect_rollouts(f.model, params, f.world.ambiguous_train, idx,
                                         f.world.table, rng, majority, &fixed);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto& s = f.world.ambiguous_train[idx[k]];
    EXPECT_EQ(b.reward[k], fair::fairness_reward(b.action[k], s, f.world.table, fair::Stereotype::anti));
  }
}

TEST(Trainer, RolloutsRequireUnitStrength) {
  const auto& f = fixture();
  auto params = steer::InterventionParams::zeros(f.model.hook_widths());
  params.lambda = 0.5;
  std::vector<fair::Stereotype> majority(4);
  Rng rng(1);
  EXPECT_THROW(train::collect_rollouts(f.model, params, f.world.ambiguous_train, iota(4),
                                       f.world.table, rng, majority),
               PreconditionError);
}

TEST(Trainer, RatioIsOneAtRolloutParameters) {
  const auto& f = fixture();
  Rng prng(8);
  const auto params = random_params(f.model, prng, 0.2);
  std::vector<fair::Stereotype> majority(4, fair::Stereotype::pro);
  Rng rng(9);
  const auto batch = train::collect_rollouts(f.model, params, f.world.ambiguous_train, iota(32),
                                             f.world.table, rng, majority);
  TrainConfig c = small_train();
  const auto s = train::surrogate_loss(f.model, params, f.world.ambiguous_train, batch, c);
  double mean_reward = 0.0;
  for (double r : batch.reward) mean_reward += r / static_cast<double>(batch.reward.size());
  EXPECT_NEAR(s.policy_term, mean_reward, 1e-12);
  EXPECT_EQ(s.clip_fraction, 0.0);

  // Clipping only matters away from the rollout parameters.
  TrainConfig wide = c;
  wide.clip = 0.9;
  const auto w = train::surrogate_loss(f.model, params, f.world.ambiguous_train, batch, wide);
  EXPECT_EQ(w.loss, s.loss);
  EXPECT_EQ(w.grad_a, s.grad_a);
  EXPECT_EQ(w.grad_b, s.grad_b);
}

TEST(Trainer, SurrogateGradientMatchesFiniteDifferences) {
  const auto& f = fixture();
  Rng prng(10);
  const auto rollout_params = random_params(f.model, prng, 0.2);
  std::vector<fair::Stereotype> majority(4, fair::Stereotype::pro);
  Rng rng(11);
  const auto batch = train::collect_rollouts(f.model, rollout_params, f.world.ambiguous_train,
                                             iota(16), f.world.table, rng, majority);
  TrainConfig c = small_train();
  c.alpha = 0.01;
  c.clip = 0.9;  // keep every ratio inside the clip window at the probe point
  auto params = rollout_params;
  for (auto& v : params.b) {
    for (double& x : v) x += 0.02 * prng.normal();
  }
  const auto s = train::surrogate_loss(f.model, params, f.world.ambiguous_train, batch, c);
  EXPECT_EQ(s.clip_fraction, 0.0);
  const double h = 1e-6;
  double diff = 0, na = 0, nn = 0;
  auto check = [&](double analytic, double& slot) {
    const double orig = slot;
    slot = orig + h;
    const double up = train::surrogate_loss(f.model, params, f.world.ambiguous_train, batch, c).loss;
    slot = orig - h;
    const double down = train::surrogate_loss(f.model, params, f.world.ambiguous_train, batch, c).loss;
    slot = orig;
    const double numeric = (up - down) / (2 * h);
    diff += (analytic - numeric) * (analytic - numeric);
    na += analytic * analytic;
    nn += numeric * numeric;
  };
  for (std::size_t l = 0; l < params.blocks(); ++l) {
    for (std::size_t j = 0; j < params.a[l].size(); ++j) {
      check(s.grad_a[l][j], params.a[l][j]);
      check(s.grad_b[l][j], params.b[l][j]);
    }
  }
  EXPECT_LT(std::sqrt(diff) / (std::sqrt(na) + std::sqrt(nn)), 1e-5);
}

TEST(Trainer, SurrogateL1TermMatchesDefinition) {
  const auto& f = fixture();
  Rng prng(12);
  const auto params = random_params(f.model, prng, 0.5);
  std::vector<fair::Stereotype> majority(4, fair::Stereotype::pro);
  Rng rng(13);
  const auto batch = train::collect_rollouts(f.model, params, f.world.ambiguous_train, iota(8),
                                             f.world.table, rng, majority);
  TrainConfig c = small_train();
  c.alpha = 0.0;
  const auto s0 = train::surrogate_loss(f.model, params, f.world.ambiguous_train, batch, c);
  c.alpha = 0.3;
  const auto s1 = train::surrogate_loss(f.model, params, f.world.ambiguous_train, batch, c);
  const double expected_l1 = l1(params.a) + l1(params.b);
  EXPECT_NEAR(s1.l1, expected_l1, 1e-12);
  EXPECT_NEAR(s1.loss - s0.loss, 0.3 * expected_l1, 1e-10);
}

TEST(Trainer, TrainingIsDeterministicAndLeavesModelFrozen) {
  const auto& f = fixture();
  const auto before = f.model.checksum();
  const auto r1 = train::train(f.model, f.world.ambiguous_train, f.world.table, small_train());
  const auto r2 = train::train(f.model, f.world.ambiguous_train, f.world.table, small_train());
  EXPECT_EQ(f.model.checksum(), before);
  EXPECT_EQ(r1.params.a, r2.params.a);
  EXPECT_EQ(r1.params.b, r2.params.b);
  EXPECT_EQ(r1.params.lambda, 1.0);
  EXPECT_EQ(r1.log.size(), 64u / 16u);
  auto other = small_train();
  other.seed = 18;
  const auto r3 = train::train(f.model, f.world.ambiguous_train, f.world.table, other);
  EXPECT_NE(r1.params.b, r3.params.b);
}

TEST(Trainer, LoggedRewardIsNegativeLoggedBias) {
  const auto& f = fixture();
  auto c = small_train();
  c.epochs = 2;
  const auto r = train::train(f.model, f.world.ambiguous_train, f.world.table, c);
  ASSERT_EQ(r.log.size(), 8u);
  for (std::size_t i = 0; i < r.log.size(); ++i) {
    EXPECT_EQ(r.log[i].iteration, i + 1);
    EXPECT_NEAR(r.log[i].exact_expected_reward, -r.log[i].exact_bias, 1e-9);
    EXPECT_GE(r.log[i].kl, 0.0);
  }
  EXPECT_NEAR(r.log.back().l1_a, l1(r.params.a), 1e-12);
  EXPECT_NEAR(r.log.back().l1_b, l1(r.params.b), 1e-12);
}

TEST(Trainer, HeavyL1KeepsVectorsNearZero) {
  const auto& f = fixture();
  auto light = small_train();
  light.alpha = 0.0;
  auto heavy = small_train();
  heavy.alpha = 1e3;
  const auto rl = train::train(f.model, f.world.ambiguous_train, f.world.table, light);
  const auto rh = train::train(f.model, f.world.ambiguous_train, f.world.table, heavy);
  std::size_t n = 0;
  for (const auto& v : rh.params.b) n += v.size();
  const double l1_heavy = l1(rh.params.a) + l1(rh.params.b);
  const double l1_light = l1(rl.params.a) + l1(rl.params.b);
  // Adam moves each coordinate by at most about lr per step.
  EXPECT_LT(l1_heavy / static_cast<double>(2 * n), 2 * heavy.lr);
  EXPECT_LT(l1_heavy, l1_light);
}

TEST(Trainer, KlBudgetStopsAtLastIterateWithinBudget) {
  const auto& f = fixture();
  auto c = small_train();
  c.lr = 0.05;
  c.epochs = 2;
  const auto free_run = train::train(f.model, f.world.ambiguous_train, f.world.table, c);
  ASSERT_GT(free_run.log.back().kl, 0.0);
  c.kl_budget = 0.0;
  const auto zero = train::train(f.model, f.world.ambiguous_train, f.world.table, c);
  EXPECT_TRUE(zero.stopped_by_budget);
  EXPECT_EQ(l1(zero.params.a) + l1(zero.params.b), 0.0);

  c.kl_budget = free_run.log.front().kl * 1.0000001;
  const auto partial = train::train(f.model, f.world.ambiguous_train, f.world.table, c);
  for (const auto& row : partial.log) EXPECT_LE(row.kl, *c.kl_budget);
}

TEST(Trainer, LogCsvHasSchemaAndRows) {
  const auto& f = fixture();
  const auto r = train::train(f.model, f.world.ambiguous_train, f.world.table, small_train());
  const auto path = std::filesystem::temp_directory_path() / "dso_train_log_test.csv";
  train::write_log_csv(r.log, path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "#dso-train-log-v1");
  std::getline(in, line);
  EXPECT_EQ(line, "iteration,exact_bias,exact_expected_reward,kl,l1_a,l1_b,loss,reward_plus_bias");
  std::size_t rows = 0;
  while (std::getline(in, line)) rows += !line.empty();
  EXPECT_EQ(rows, r.log.size());
  std::filesystem::remove(path);
}

#include "dso/dso_trainer.hpp"

#include <cmath>
#include <numeric>

#include "dso/csv.hpp"
#include "dso/evaluation.hpp"
#include "dso/optimizer.hpp"

namespace dso::train {

void TrainConfig::validate() const {
  if (!(alpha >= 0.0)) throw PreconditionError("train: alpha must be >= 0");
  if (!(clip > 0.0 && clip < 1.0)) throw PreconditionError("train: clip must lie in (0, 1)");
  if (!(entropy_coef >= 0.0)) throw PreconditionError("train: entropy_coef must be >= 0");
  if (!(lr > 0.0)) throw PreconditionError("train: lr must be > 0");
  if (!(weight_decay >= 0.0)) throw PreconditionError("train: weight_decay must be >= 0");
  if (updates_per_iteration == 0 || epochs == 0 || train_samples == 0 || batch_size == 0) {
    throw PreconditionError("train: counts must be >= 1");
  }
  if (kl_budget && !(*kl_budget >= 0.0)) throw PreconditionError("train: kl_budget must be >= 0");
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  if (!j.is_object()) throw PreconditionError("train config: expected an object");
  for (const auto& [key, value] : j.items()) {
    if (key == "alpha") c.alpha = value.get<double>();
    else if (key == "clip") c.clip = value.get<double>();
    else if (key == "entropy_coef") c.entropy_coef = value.get<double>();
    else if (key == "lr") c.lr = value.get<double>();
    else if (key == "weight_decay") c.weight_decay = value.get<double>();
    else if (key == "updates_per_iteration") c.updates_per_iteration = value.get<std::size_t>();
    else if (key == "epochs") c.epochs = value.get<std::size_t>();
    else if (key == "train_samples") c.train_samples = value.get<std::size_t>();
    else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else if (key == "kl_budget") {
      if (value.is_null()) c.kl_budget.reset();
      else c.kl_budget = value.get<double>();
    } else if (key == "exact_majority") c.exact_majority = value.get<bool>();
    else throw PreconditionError("train config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j = {{"alpha", c.alpha},
                      {"clip", c.clip},
                      {"entropy_coef", c.entropy_coef},
                      {"lr", c.lr},
                      {"weight_decay", c.weight_decay},
                      {"updates_per_iteration", c.updates_per_iteration},
                      {"epochs", c.epochs},
                      {"train_samples", c.train_samples},
                      {"batch_size", c.batch_size},
                      {"seed", c.seed},
                      {"exact_majority", c.exact_majority}};
  j["kl_budget"] = c.kl_budget ? nlohmann::json(*c.kl_budget) : nlohmann::json(nullptr);
  return j;
}

RolloutBatch collect_rollouts(const policy::PolicyModel& model,
                              const steer::InterventionParams& params,
                              std::span<const Sample> samples, std::span<const std::size_t> indices,
                              const OccupationTable& table, Rng& rng,
                              std::vector<fair::Stereotype>& majority,
                              const std::vector<fair::Stereotype>* fixed_majority) {
  if (params.lambda != 1.0) throw PreconditionError("collect_rollouts: lambda must be 1");
  if (majority.size() != table.size()) {
    throw ShapeError("collect_rollouts: majority table has wrong size");
  }
  RolloutBatch batch;
  std::vector<fair::Stereotype> labels;
  ad::Graph g;
  const policy::BoundModel bm = policy::bind(g, model, false);
  const policy::BoundIntervention bi = policy::bind(g, params, false);
  for (std::size_t idx : indices) {
    const Sample& s = samples[idx];
    const auto tokens = data::encode(s);
    // Same graph ops as the surrogate, so the first update sees ratio 1.
    const ad::Tensor lsm = ad::log_softmax_rows(policy::logits(bm, tokens, &bi)).value();
    const double u = rng.uniform();
    std::size_t action = 0;
    double cum = std::exp(lsm[0]);
    while (u >= cum && action + 1 < lsm.size()) cum += std::exp(lsm[++action]);
    batch.sample_index.push_back(idx);
    batch.action.push_back(action);
    batch.old_log_prob.push_back(lsm[action]);
    labels.push_back(fair::stereotype_of(action, s, table));
  }
  if (fixed_majority) {
    majority = *fixed_majority;
  } else {
    std::vector<std::size_t> pro(table.size(), 0), total(table.size(), 0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const std::size_t o = samples[batch.sample_index[i]].occupation;
      pro[o] += labels[i] == fair::Stereotype::pro;
      ++total[o];
    }
    for (std::size_t o = 0; o < table.size(); ++o) {
      if (total[o]) majority[o] = fair::majority_stereotype(pro[o], total[o] - pro[o]);
    }
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::size_t o = samples[batch.sample_index[i]].occupation;
    batch.reward.push_back(fair::fairness_reward(labels[i], majority[o]));
  }
  return batch;
}

Surrogate surrogate_loss(const policy::PolicyModel& model, const steer::InterventionParams& params,
                         std::span<const Sample> samples, const RolloutBatch& batch,
                         const TrainConfig& config) {
  const std::size_t n = batch.sample_index.size();
  if (n == 0) throw PreconditionError("surrogate_loss: empty batch");
  ad::Graph g;
  const policy::BoundModel bm = policy::bind(g, model, false);
  const policy::BoundIntervention bi = policy::bind(g, params, true);
  std::vector<ad::Var> objective, entropy;
  Surrogate out;
  std::size_t clipped = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto tokens = data::encode(samples[batch.sample_index[i]]);
    const ad::Var lsm = ad::log_softmax_rows(policy::logits(bm, tokens, &bi));
    const ad::Var ratio =
        ad::exp(ad::add_scalar(ad::pick(lsm, batch.action[i]), -batch.old_log_prob[i]));
    const double adv = batch.reward[i];
    objective.push_back(ad::minimum(ad::scale(ratio, adv),
                                    ad::scale(ad::clamp(ratio, 1.0 - config.clip, 1.0 + config.clip), adv)));
    entropy.push_back(ad::scale(ad::sum(ad::mul(ad::exp(lsm), lsm)), -1.0));
    clipped += std::abs(ratio.item() - 1.0) > config.clip;
  }
  const ad::Var policy_term = ad::mean(ad::stack(objective));
  const ad::Var mean_entropy = ad::mean(ad::stack(entropy));
  std::vector<ad::Var> norms;
  for (std::size_t l = 0; l < bi.a.size(); ++l) {
    norms.push_back(ad::sum(ad::abs(bi.a[l])));
    norms.push_back(ad::sum(ad::abs(bi.b[l])));
  }
  const ad::Var l1 = ad::sum(ad::stack(norms));
  const ad::Var loss = ad::add(ad::sub(ad::scale(policy_term, -1.0),
                                       ad::scale(mean_entropy, config.entropy_coef)),
                               ad::scale(l1, config.alpha));
  out.loss = loss.item();
  out.policy_term = policy_term.item();
  out.entropy = mean_entropy.item();
  out.l1 = l1.item();
  out.clip_fraction = static_cast<double>(clipped) / static_cast<double>(n);
  if (!std::isfinite(out.loss)) {
    throw DivergenceError("surrogate_loss: non-finite loss (policy term " +
                          csv::format_number(out.policy_term) + ", entropy " +
                          csv::format_number(out.entropy) + ", l1 " + csv::format_number(out.l1) + ")");
  }
  g.backward(loss);
  for (std::size_t l = 0; l < bi.a.size(); ++l) {
    const auto ga = bi.a[l].grad().data();
    const auto gb = bi.b[l].grad().data();
    out.grad_a.emplace_back(ga.begin(), ga.end());
    out.grad_b.emplace_back(gb.begin(), gb.end());
  }
  return out;
}

std::vector<Sample> balanced_subset(std::span<const Sample> samples, std::size_t n,
                                    std::size_t n_occupations) {
  if (n_occupations == 0 || n % n_occupations != 0) {
    throw PreconditionError("train: train_samples " + std::to_string(n) +
                            " is not a multiple of the occupation count");
  }
  const std::size_t per = n / n_occupations;
  std::vector<std::size_t> taken(n_occupations, 0);
  std::vector<Sample> out;
  for (const Sample& s : samples) {
    if (!s.ambiguous) throw PreconditionError("train: training samples must be ambiguous");
    if (s.occupation >= n_occupations) throw PreconditionError("train: occupation out of range");
    if (taken[s.occupation] < per) {
      ++taken[s.occupation];
      out.push_back(s);
    }
  }
  if (out.size() != n) {
    throw PreconditionError("train: cannot draw " + std::to_string(per) +
                            " samples for every occupation");
  }
  return out;
}

namespace {

struct PolicyStats {
  double bias = 0.0;
  double reward = 0.0;
  double kl = 0.0;
  std::vector<fair::Stereotype> majority;
};

PolicyStats policy_stats(const policy::PolicyModel& model, const steer::InterventionParams& params,
                         std::span<const Sample> samples, const OccupationTable& table,
                         std::span<const eval::Distribution> base) {
  const auto dists = eval::distributions(model, samples, &params);
  const auto decisions = eval::exact_decisions(dists, samples, table);
  PolicyStats st;
  st.bias = fair::exact_bias_report(decisions, table.size()).per_occupation_bias;
  st.reward = fair::expected_reward_exact(decisions, table.size());
  st.kl = eval::mean_kl(dists, base).value;
  std::vector<double> sum(table.size(), 0.0);
  std::vector<std::size_t> count(table.size(), 0);
  for (const auto& d : decisions) {
    sum[d.occupation] += d.p_pro;
    ++count[d.occupation];
  }
  for (std::size_t o = 0; o < table.size(); ++o) {
    st.majority.push_back(fair::majority_stereotype(sum[o] / static_cast<double>(count[o])));
  }
  return st;
}

}  // namespace

TrainResult train(const policy::PolicyModel& model, std::span<const Sample> ambiguous_train,
                  const OccupationTable& table, const TrainConfig& config) {
  config.validate();
  const std::vector<Sample> data = balanced_subset(ambiguous_train, config.train_samples, table.size());
  const auto base = eval::distributions(model, data, nullptr);

  TrainResult result;
  result.params = steer::InterventionParams::zeros(model.hook_widths(), steer::Method::dso);
  const std::size_t blocks = result.params.blocks();

  std::vector<ad::Tensor> tensors;
  for (const auto& v : result.params.a) tensors.push_back(ad::Tensor::vector(v));
  for (const auto& v : result.params.b) tensors.push_back(ad::Tensor::vector(v));
  std::vector<ad::Tensor*> ptrs;
  for (auto& t : tensors) ptrs.push_back(&t);
  optim::AdamW opt({.lr = config.lr, .weight_decay = config.weight_decay});

  const Rng root = Rng(config.seed).split("dso-train");
  std::vector<fair::Stereotype> majority(table.size(), fair::Stereotype::pro);
  PolicyStats stats = policy_stats(model, result.params, data, table, base);
  result.initial_bias = stats.bias;

  std::vector<std::size_t> order(data.size());
  std::size_t iteration = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng = root.split("epoch").split(epoch);
    shuffle_rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      ++iteration;
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const std::span<const std::size_t> indices(order.data() + start, end - start);
      Rng rollout_rng = root.split("rollout").split(iteration);
      const RolloutBatch batch =
          collect_rollouts(model, result.params, data, indices, table, rollout_rng, majority,
                           config.exact_majority ? &stats.majority : nullptr);

      const steer::InterventionParams last_good = result.params;
      double loss_sum = 0.0;
      for (std::size_t u = 0; u < config.updates_per_iteration; ++u) {
        Surrogate s;
        try {
          s = surrogate_loss(model, result.params, data, batch, config);
        } catch (const DivergenceError& e) {
          throw TrainingDiverged(std::string(e.what()) + " at iteration " + std::to_string(iteration),
                                 last_good);
        }
        loss_sum += s.loss;
        std::vector<ad::Tensor> grads;
        for (const auto& v : s.grad_a) grads.push_back(ad::Tensor::vector(v));
        for (const auto& v : s.grad_b) grads.push_back(ad::Tensor::vector(v));
        opt.step(ptrs, grads);
        for (std::size_t l = 0; l < blocks; ++l) {
          const auto a = tensors[l].data();
          const auto b = tensors[blocks + l].data();
          result.params.a[l].assign(a.begin(), a.end());
          result.params.b[l].assign(b.begin(), b.end());
        }
        if (!result.params.all_finite()) {
          throw TrainingDiverged("train: non-finite intervention at iteration " +
                                     std::to_string(iteration),
                                 last_good);
        }
      }

      const PolicyStats next = policy_stats(model, result.params, data, table, base);
      if (config.kl_budget && next.kl > *config.kl_budget) {
        result.params = last_good;
        result.stopped_by_budget = true;
        return result;
      }
      stats = next;
      result.log.push_back({.iteration = iteration,
                            .exact_bias = stats.bias,
                            .exact_expected_reward = stats.reward,
                            .kl = stats.kl,
                            .l1_a = result.params.l1_a(),
                            .l1_b = result.params.l1_b(),
                            .loss = loss_sum / static_cast<double>(config.updates_per_iteration)});
    }
  }
  return result;
}

void write_log_csv(std::span<const IterationLog> log, const std::filesystem::path& path) {
  csv::Table t("dso-train-log-v1", {"iteration", "exact_bias", "exact_expected_reward", "kl", "l1_a",
                                    "l1_b", "loss", "reward_plus_bias"});
  for (const auto& r : log) {
    t.add_row({std::to_string(r.iteration), csv::format_number(r.exact_bias),
               csv::format_number(r.exact_expected_reward), csv::format_number(r.kl),
               csv::format_number(r.l1_a), csv::format_number(r.l1_b), csv::format_number(r.loss),
               csv::format_number(r.exact_expected_reward + r.exact_bias)});
  }
  t.write(path);
}

}  // namespace dso::train

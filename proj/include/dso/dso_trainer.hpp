#pragma once

// Trains steering vectors (a, b) against the fairness reward with a clipped
// policy-gradient objective. Model weights stay frozen; lambda is fixed at 1.
//
//   loss = -mean[min(rho * A, clip(rho, 1 - c, 1 + c) * A)]
//          - e * mean H(pi_steered(. | x)) + alpha * (|a|_1 + |b|_1)
//
// rho = pi_new / pi_old on the sampled action and the advantage A is the raw
// reward. Each iteration draws one batch of rollouts and takes several
// optimizer steps on it.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <span>
#include <vector>

#include "json.hpp"
#include "dso/errors.hpp"
#include "dso/fairness.hpp"
#include "dso/policy.hpp"
#include "dso/rng.hpp"
#include "dso/steering.hpp"

namespace dso::train {

struct TrainConfig {
  double alpha = 1e-6;            ///< l1 weight
  double clip = 0.3;
  double entropy_coef = 0.1;
  double lr = 1e-3;
  double weight_decay = 5e-7;
  std::size_t updates_per_iteration = 5;
  std::size_t epochs = 1;
  std::size_t train_samples = 600;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  /// When set, training stops at the last iterate whose KL to the base model
  /// on the training inputs is within the budget.
  std::optional<double> kl_budget;
  /// Majority stereotype from the exact policy over the whole training set
  /// instead of the sampled decisions of the current batch.
  bool exact_majority = false;

  void validate() const;
};

/// Keys mirror the field names; absent keys keep the value in `base`, unknown
/// keys are rejected with PreconditionError.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
nlohmann::json to_json(const TrainConfig& c);

struct RolloutBatch {
  std::vector<std::size_t> sample_index;  ///< into the training span
  std::vector<std::size_t> action;
  std::vector<double> old_log_prob;
  std::vector<double> reward;
};

/// Samples one action per index from the current steered policy and scores
/// it. `majority` (one entry per occupation) is updated from the batch's
/// decisions for every occupation the batch contains; other occupations keep
/// their previous value.
RolloutBatch collect_rollouts(const policy::PolicyModel& model,
                              const steer::InterventionParams& params,
                              std::span<const Sample> samples, std::span<const std::size_t> indices,
                              const OccupationTable& table, Rng& rng,
                              std::vector<fair::Stereotype>& majority,
                              const std::vector<fair::Stereotype>* fixed_majority = nullptr);

struct Surrogate {
  double loss = 0.0;
  double policy_term = 0.0;  ///< mean clipped objective (before negation)
  double entropy = 0.0;      ///< mean entropy of the steered policy
  double l1 = 0.0;
  double clip_fraction = 0.0;
  std::vector<std::vector<double>> grad_a, grad_b;
};

/// Loss value and its gradient with respect to (a, b).
Surrogate surrogate_loss(const policy::PolicyModel& model, const steer::InterventionParams& params,
                         std::span<const Sample> samples, const RolloutBatch& batch,
                         const TrainConfig& config);

struct IterationLog {
  std::size_t iteration = 0;
  double exact_bias = 0.0;
  double exact_expected_reward = 0.0;
  double kl = 0.0;
  double l1_a = 0.0;
  double l1_b = 0.0;
  double loss = 0.0;  ///< mean surrogate loss over the iteration's updates
};

struct TrainResult {
  steer::InterventionParams params;
  std::vector<IterationLog> log;
  double initial_bias = 0.0;
  bool stopped_by_budget = false;
};

/// Training set restricted to `train_samples` entries with equal counts per
/// occupation, in dataset order. Throws unless that is possible.
std::vector<Sample> balanced_subset(std::span<const Sample> samples, std::size_t n,
                                    std::size_t n_occupations);

/// Runs training on ambiguous samples. Throws DivergenceError if the
/// parameters become non-finite; the error carries the last finite params.
TrainResult train(const policy::PolicyModel& model, std::span<const Sample> ambiguous_train,
                  const OccupationTable& table, const TrainConfig& config);

/// Schema dso-train-log-v1. Columns: iteration, exact_bias,
/// exact_expected_reward, kl, l1_a, l1_b, loss, reward_plus_bias (should be 0
/// on balanced data).
void write_log_csv(std::span<const IterationLog> log, const std::filesystem::path& path);

class TrainingDiverged : public DivergenceError {
 public:
  TrainingDiverged(const std::string& what, steer::InterventionParams last_good)
      : DivergenceError(what), last_good_(std::move(last_good)) {}
  const steer::InterventionParams& last_good() const noexcept { return last_good_; }

 private:
  steer::InterventionParams last_good_;
};

}  // namespace dso::train

#pragma once

// Model-level evaluation: runs the (optionally steered) policy over sample
// sets and feeds the exact action distributions into the fairness metrics.

#include <cstdint>
#include <span>
#include <vector>

#include "dso/fairness.hpp"
#include "dso/policy.hpp"
#include "dso/rng.hpp"

namespace dso::eval {

using Distribution = std::vector<double>;

std::vector<Distribution> distributions(const policy::PolicyModel& model,
                                        std::span<const Sample> samples,
                                        const steer::InterventionParams* intervention = nullptr);

/// Pro-stereotypical probability per ambiguous sample.
std::vector<fair::ExactDecision> exact_decisions(std::span<const Distribution> dists,
                                                 std::span<const Sample> samples,
                                                 const OccupationTable& table);

fair::BiasReport exact_bias(const policy::PolicyModel& model, std::span<const Sample> samples,
                            const OccupationTable& table,
                            const steer::InterventionParams* intervention = nullptr);

/// Exact expected fairness reward of the steered policy on balanced data.
double expected_reward_exact(const policy::PolicyModel& model, std::span<const Sample> samples,
                             const OccupationTable& table,
                             const steer::InterventionParams* intervention = nullptr);

/// Mean over inputs of KL(steered || base) on the action distribution.
fair::KlResult mean_kl(std::span<const Distribution> steered, std::span<const Distribution> base);

fair::KlResult kl_divergence(const policy::PolicyModel& model,
                             const steer::InterventionParams& intervention,
                             std::span<const Sample> samples);

/// Exact accuracy: mean probability assigned to the gold slot.
fair::CapabilityReport capability(std::span<const Distribution> dists,
                                  std::span<const Sample> unambiguous);

/// One decision per sample, drawn with a uniform from `stream.split(i)`, so
/// different policies evaluated with the same stream share random numbers.
std::vector<fair::SampledDecision> sample_decisions(std::span<const Distribution> dists,
                                                    std::span<const Sample> samples,
                                                    const OccupationTable& table, const Rng& stream);

struct Evaluation {
  fair::BiasReport exact_bias;
  fair::BiasReport sampled_bias;
  fair::CapabilityReport capability;
  double kl_ambiguous = 0.0;   ///< f(lambda) on the ambiguous eval inputs
  double kl_capability = 0.0;  ///< KL on the capability inputs (used by the bound)
  bool kl_infinite = false;
  fair::BoundCheck bound;
};

/// Base-model distributions computed once and reused across evaluations.
struct EvalContext {
  const policy::PolicyModel* model = nullptr;
  std::span<const Sample> ambiguous;
  std::span<const Sample> unambiguous;
  const OccupationTable* table = nullptr;
  std::vector<Distribution> base_ambiguous;
  std::vector<Distribution> base_unambiguous;
  fair::CapabilityReport base_capability;
  std::uint64_t sampling_seed = 0;
};

EvalContext make_context(const policy::PolicyModel& model, std::span<const Sample> ambiguous,
                         std::span<const Sample> unambiguous, const OccupationTable& table,
                         std::uint64_t sampling_seed);

/// Evaluates the policy under `intervention` (nullptr = base model).
Evaluation evaluate(const EvalContext& ctx, const steer::InterventionParams* intervention);

}  // namespace dso::eval

#pragma once

// Bias measurement for two-candidate decisions on ambiguous samples.
//
// A decision is pro-stereotypical when the chosen candidate's gender matches
// the occupation's stereotyped gender. Per occupation o:
//
//   delta(o)             = Pr[pro] - Pr[anti]
//   per-occupation bias  = mean_o |delta(o)|
//   stereotype gap       = sum_o Pr[Ocp = o] * delta(o)
//
// The fairness reward is -1 when a decision repeats the occupation's majority
// stereotype under the current policy and +1 otherwise. On occupation-balanced
// data its exact expectation is -(per-occupation bias).

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "dso/world.hpp"

namespace dso::fair {

enum class Stereotype : unsigned char { pro, anti };
std::string_view to_string(Stereotype s) noexcept;

/// pro iff the selected candidate's gender equals the stereotyped gender of
/// the sample's occupation. Throws PreconditionError for an unambiguous sample
/// or an occupation missing from the table, IndexError for a bad slot.
Stereotype stereotype_of(std::size_t decision, const Sample& sample, const OccupationTable& table);

/// Pr[pro] - Pr[anti] over one occupation's decisions. Throws on empty input.
double occupation_gap(std::span<const Stereotype> decisions);
double occupation_gap(std::size_t n_pro, std::size_t n_anti);

/// Unweighted mean of |delta(o)|. Throws on empty input.
double per_occupation_bias(std::span<const double> deltas);

/// sum_o frequency(o) * delta(o). Frequencies must match in length and sum
/// to 1 (within 1e-9).
double stereotype_gap(std::span<const double> deltas, std::span<const double> frequencies);

/// More frequent label; an exact tie resolves to pro.
Stereotype majority_stereotype(std::size_t n_pro, std::size_t n_anti) noexcept;
Stereotype majority_stereotype(std::span<const Stereotype> decisions);
/// Majority under an exact pro probability (tie at 0.5 -> pro).
Stereotype majority_stereotype(double p_pro) noexcept;

/// -1 when `label` equals `majority`, +1 otherwise.
double fairness_reward(Stereotype label, Stereotype majority) noexcept;
double fairness_reward(std::size_t decision, const Sample& sample, const OccupationTable& table,
                       Stereotype majority);

struct BiasReport {
  std::vector<double> delta_by_occupation;
  std::vector<std::size_t> count_by_occupation;
  std::vector<double> delta_sem;
  double per_occupation_bias = 0.0;
  double stereotype_gap = 0.0;
  double per_occupation_bias_sem = 0.0;
  double stereotype_gap_sem = 0.0;
};

/// Keys: delta_by_occupation, per_occupation_bias, stereotype_gap, sem,
/// count_by_occupation.
nlohmann::json to_json(const BiasReport& r);

/// One decision-time view of a policy on an ambiguous sample: the
/// probability of the pro-stereotypical action.
struct ExactDecision {
  std::size_t occupation = 0;
  double p_pro = 0.0;
};

/// delta(o) = 2 * mean p_pro - 1 over each occupation's samples. Standard
/// errors are the normal approximation for n draws at that rate. Throws
/// PreconditionError when an occupation in [0, n_occupations) has no samples.
BiasReport exact_bias_report(std::span<const ExactDecision> decisions, std::size_t n_occupations);

struct SampledDecision {
  std::size_t occupation = 0;
  Stereotype label = Stereotype::pro;
};
BiasReport sampled_bias_report(std::span<const SampledDecision> decisions,
                               std::size_t n_occupations);

/// Exact expected fairness reward: sum over samples and both actions of
/// pi(action | x) * r(action), with the majority taken from the same exact
/// distribution. Throws PreconditionError unless every occupation has the
/// same number of samples.
double expected_reward_exact(std::span<const ExactDecision> decisions, std::size_t n_occupations);

struct CapabilityReport {
  double accuracy = 0.0;      ///< mean utility u in [u_min, u_max]
  double accuracy_sem = 0.0;
  std::size_t m = 0;          ///< capability set size
  double u_min = 0.0;
  double u_max = 1.0;
  /// Sub-Gaussian constant of a bounded utility.
  double sigma() const noexcept { return (u_max - u_min) / 2.0; }
};

/// Divergence clamp for distributions where the reference puts zero mass on
/// an outcome the other distribution can produce.
inline constexpr double kMaxKl = 1e6;

struct KlResult {
  double value = 0.0;  ///< nats
  bool infinite = false;
};
/// KL(p || q) for categorical distributions.
KlResult categorical_kl(std::span<const double> p, std::span<const double> q);

struct BoundCheck {
  bool pass = true;
  double difference = 0.0;  ///< |E_base[u] - E_steered[u]|
  double bound = 0.0;       ///< sigma * sqrt(2 * kl)
  double slack = 0.0;       ///< bound - difference
};
/// Checks |base - steered| <= sigma * sqrt(2 * kl).
BoundCheck capability_bound_check(double base_utility, double steered_utility, double kl,
                                  double sigma);

}  // namespace dso::fair

#pragma once

// Comparison steering methods built from contrastive activation statistics.
// Both produce ordinary InterventionParams with a = 0, so they run through
// the same steering and evaluation path as trained vectors.
//
// Activations are block LayerNorm outputs averaged over token positions.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "dso/policy.hpp"
#include "dso/rng.hpp"
#include "dso/steering.hpp"

namespace dso::baselines {

/// Inputs split by the base model's sampled decision on them.
struct ContrastiveSets {
  std::vector<Sample> positive;  ///< pro-stereotypical decision
  std::vector<Sample> negative;  ///< anti-stereotypical decision
};

/// Samples one base-model decision per ambiguous input. Throws
/// PreconditionError if either set ends up empty.
ContrastiveSets build_contrastive_sets(const policy::PolicyModel& model,
                                       std::span<const Sample> ambiguous,
                                       const OccupationTable& table, const Rng& rng);

/// Position-averaged LayerNorm output of every block: [block][width].
std::vector<std::vector<double>> block_features(const policy::PolicyModel& model, const Sample& s);

/// b = mean(negative) - mean(positive) per block, a = 0, lambda = 1.
steer::InterventionParams caa_vector(const policy::PolicyModel& model, const ContrastiveSets& sets);

struct ProbeConfig {
  std::size_t steps = 500;
  double lr = 0.5;
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
};

/// Logistic classifier p(anti | x) = sigmoid(w.x + bias).
struct Probe {
  std::vector<double> weight;
  double bias = 0.0;
  double accuracy = 0.0;           ///< on the held-out split
  std::vector<double> direction;   ///< weight / |weight|, points toward anti
  double projection_std = 0.0;     ///< std of x.direction over all inputs
};

/// Full-batch gradient descent on mean cross-entropy. labels: 1 = anti.
/// Accuracy is measured on the last (1 - train_fraction) of a seeded shuffle.
Probe fit_probe(std::span<const std::vector<double>> features, std::span<const int> labels,
                const ProbeConfig& config);

struct ProbeSet {
  std::vector<Probe> probes;  ///< one per block
};

ProbeSet train_probes(const policy::PolicyModel& model, const ContrastiveSets& sets,
                      const ProbeConfig& config);

/// b = direction * projection_std at the top_k blocks by probe accuracy (ties
/// go to the earlier block), zero elsewhere; a = 0, lambda = 1.
steer::InterventionParams iti_shift(const policy::PolicyModel& model, const ProbeSet& probes,
                                    std::size_t top_k);

}  // namespace dso::baselines

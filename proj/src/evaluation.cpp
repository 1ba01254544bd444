#include "dso/evaluation.hpp"

#include <cmath>

#include "dso/errors.hpp"
#include "dso/rng.hpp"

namespace dso::eval {

std::vector<Distribution> distributions(const policy::PolicyModel& model,
                                        std::span<const Sample> samples,
                                        const steer::InterventionParams* intervention) {
  std::vector<std::vector<std::size_t>> seqs;
  seqs.reserve(samples.size());
  for (const Sample& s : samples) seqs.push_back(data::encode(s));
  return policy::forward_batch(model, seqs, intervention);
}

std::vector<fair::ExactDecision> exact_decisions(std::span<const Distribution> dists,
                                                 std::span<const Sample> samples,
                                                 const OccupationTable& table) {
  if (dists.size() != samples.size()) throw ShapeError("exact_decisions: size mismatch");
  std::vector<fair::ExactDecision> out;
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = samples[i];
    double p_pro = 0.0;
    for (std::size_t action = 0; action < dists[i].size(); ++action) {
      if (fair::stereotype_of(action, s, table) == fair::Stereotype::pro) p_pro += dists[i][action];
    }
    out.push_back({s.occupation, p_pro});
  }
  return out;
}

fair::BiasReport exact_bias(const policy::PolicyModel& model, std::span<const Sample> samples,
                            const OccupationTable& table,
                            const steer::InterventionParams* intervention) {
  const auto dists = distributions(model, samples, intervention);
  return fair::exact_bias_report(exact_decisions(dists, samples, table), table.size());
}

double expected_reward_exact(const policy::PolicyModel& model, std::span<const Sample> samples,
                             const OccupationTable& table,
                             const steer::InterventionParams* intervention) {
  const auto dists = distributions(model, samples, intervention);
  return fair::expected_reward_exact(exact_decisions(dists, samples, table), table.size());
}

fair::KlResult mean_kl(std::span<const Distribution> steered, std::span<const Distribution> base) {
  if (steered.size() != base.size()) throw ShapeError("mean_kl: input counts differ");
  fair::KlResult total;
  if (steered.empty()) return total;
  for (std::size_t i = 0; i < steered.size(); ++i) {
    const fair::KlResult k = fair::categorical_kl(steered[i], base[i]);
    if (k.infinite) return k;
    total.value += k.value;
  }
  total.value /= static_cast<double>(steered.size());
  return total;
}

fair::KlResult kl_divergence(const policy::PolicyModel& model,
                             const steer::InterventionParams& intervention,
                             std::span<const Sample> samples) {
  const auto base = distributions(model, samples, nullptr);
  const auto steered = distributions(model, samples, &intervention);
  return mean_kl(steered, base);
}

fair::CapabilityReport capability(std::span<const Distribution> dists,
                                  std::span<const Sample> unambiguous) {
  if (dists.size() != unambiguous.size()) throw ShapeError("capability: size mismatch");
  fair::CapabilityReport r;
  r.m = unambiguous.size();
  if (r.m == 0) return r;
  double total = 0.0;
  for (std::size_t i = 0; i < unambiguous.size(); ++i) {
    if (!unambiguous[i].gold) throw PreconditionError("capability: sample without gold answer");
    total += dists[i][*unambiguous[i].gold];
  }
  r.accuracy = total / static_cast<double>(r.m);
  r.accuracy_sem = std::sqrt(std::max(0.0, r.accuracy * (1.0 - r.accuracy)) /
                             static_cast<double>(r.m));
  return r;
}

std::vector<fair::SampledDecision> sample_decisions(std::span<const Distribution> dists,
                                                    std::span<const Sample> samples,
                                                    const OccupationTable& table,
                                                    const Rng& stream) {
  std::vector<fair::SampledDecision> out;
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Rng r = stream.split(i);
    const double u = r.uniform();
    std::size_t action = 0;
    double cum = dists[i][0];
    while (u >= cum && action + 1 < dists[i].size()) cum += dists[i][++action];
    out.push_back({samples[i].occupation, fair::stereotype_of(action, samples[i], table)});
  }
  return out;
}

EvalContext make_context(const policy::PolicyModel& model, std::span<const Sample> ambiguous,
                         std::span<const Sample> unambiguous, const OccupationTable& table,
                         std::uint64_t sampling_seed) {
  EvalContext ctx;
  ctx.model = &model;
  ctx.ambiguous = ambiguous;
  ctx.unambiguous = unambiguous;
  ctx.table = &table;
  ctx.base_ambiguous = distributions(model, ambiguous, nullptr);
  ctx.base_unambiguous = distributions(model, unambiguous, nullptr);
  ctx.base_capability = capability(ctx.base_unambiguous, unambiguous);
  ctx.sampling_seed = sampling_seed;
  return ctx;
}

Evaluation evaluate(const EvalContext& ctx, const steer::InterventionParams* intervention) {
  Evaluation e;
  const auto amb = intervention ? distributions(*ctx.model, ctx.ambiguous, intervention)
                                : ctx.base_ambiguous;
  const auto unamb = intervention ? distributions(*ctx.model, ctx.unambiguous, intervention)
                                  : ctx.base_unambiguous;
  e.exact_bias = fair::exact_bias_report(exact_decisions(amb, ctx.ambiguous, *ctx.table),
                                         ctx.table->size());
  const Rng stream = Rng(ctx.sampling_seed).split("eval-decisions");
  e.sampled_bias = fair::sampled_bias_report(
      sample_decisions(amb, ctx.ambiguous, *ctx.table, stream), ctx.table->size());
  e.capability = capability(unamb, ctx.unambiguous);
  const fair::KlResult ka = mean_kl(amb, ctx.base_ambiguous);
  const fair::KlResult kc = mean_kl(unamb, ctx.base_unambiguous);
  e.kl_ambiguous = ka.value;
  e.kl_capability = kc.value;
  e.kl_infinite = ka.infinite || kc.infinite;
  e.bound = fair::capability_bound_check(ctx.base_capability.accuracy, e.capability.accuracy,
                                         e.kl_capability, e.capability.sigma());
  return e;
}

}  // namespace dso::eval

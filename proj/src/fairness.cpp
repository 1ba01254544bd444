#include "dso/fairness.hpp"

#include <cmath>
#include <string>

#include "dso/errors.hpp"

namespace dso::fair {

std::string_view to_string(Stereotype s) noexcept { return s == Stereotype::pro ? "pro" : "anti"; }

Stereotype stereotype_of(std::size_t decision, const Sample& sample, const OccupationTable& table) {
  if (!sample.ambiguous) throw PreconditionError("stereotype_of: sample is not ambiguous");
  if (decision >= kNumActions) {
    throw IndexError("stereotype_of: decision " + std::to_string(decision) + " is not a slot");
  }
  const Gender chosen = sample.candidate_gender[decision];
  return chosen == table.stereotype(sample.occupation) ? Stereotype::pro : Stereotype::anti;
}

double occupation_gap(std::size_t n_pro, std::size_t n_anti) {
  const std::size_t n = n_pro + n_anti;
  if (n == 0) throw PreconditionError("occupation_gap: no decisions for occupation");
  return (static_cast<double>(n_pro) - static_cast<double>(n_anti)) / static_cast<double>(n);
}

double occupation_gap(std::span<const Stereotype> decisions) {
  std::size_t pro = 0;
  for (Stereotype s : decisions) pro += (s == Stereotype::pro);
  return occupation_gap(pro, decisions.size() - pro);
}

double per_occupation_bias(std::span<const double> deltas) {
  if (deltas.empty()) throw PreconditionError("per_occupation_bias: no occupations");
  double s = 0.0;
  for (double d : deltas) s += std::abs(d);
  return s / static_cast<double>(deltas.size());
}

double stereotype_gap(std::span<const double> deltas, std::span<const double> frequencies) {
  if (deltas.size() != frequencies.size()) {
    throw ShapeError("stereotype_gap: " + std::to_string(frequencies.size()) +
                            " frequencies for " + std::to_string(deltas.size()) + " occupations");
  }
  double total = 0.0, gap = 0.0;
  for (std::size_t o = 0; o < deltas.size(); ++o) {
    total += frequencies[o];
    gap += frequencies[o] * deltas[o];
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw PreconditionError("stereotype_gap: frequencies sum to " + std::to_string(total));
  }
  return gap;
}

Stereotype majority_stereotype(std::size_t n_pro, std::size_t n_anti) noexcept {
  return n_pro >= n_anti ? Stereotype::pro : Stereotype::anti;
}

Stereotype majority_stereotype(std::span<const Stereotype> decisions) {
  std::size_t pro = 0;
  for (Stereotype s : decisions) pro += (s == Stereotype::pro);
  return majority_stereotype(pro, decisions.size() - pro);
}

Stereotype majority_stereotype(double p_pro) noexcept {
  return p_pro >= 0.5 ? Stereotype::pro : Stereotype::anti;
}

double fairness_reward(Stereotype label, Stereotype majority) noexcept {
  return label == majority ? -1.0 : 1.0;
}

double fairness_reward(std::size_t decision, const Sample& sample, const OccupationTable& table,
                       Stereotype majority) {
  return fairness_reward(stereotype_of(decision, sample, table), majority);
}

nlohmann::json to_json(const BiasReport& r) {
  return {{"delta_by_occupation", r.delta_by_occupation},
          {"per_occupation_bias", r.per_occupation_bias},
          {"stereotype_gap", r.stereotype_gap},
          {"sem",
           {{"delta_by_occupation", r.delta_sem},
            {"per_occupation_bias", r.per_occupation_bias_sem},
            {"stereotype_gap", r.stereotype_gap_sem}}},
          {"count_by_occupation", r.count_by_occupation}};
}

namespace {

// Fills gap statistics from per-occupation pro rates and counts.
BiasReport summarize(const std::vector<double>& p_pro, const std::vector<std::size_t>& counts) {
  BiasReport r;
  r.count_by_occupation = counts;
  std::size_t total = 0;
  for (std::size_t o = 0; o < counts.size(); ++o) {
    if (counts[o] == 0) {
      throw PreconditionError("bias: occupation " + std::to_string(o) + " has no decisions");
    }
    total += counts[o];
  }
  std::vector<double> freq;
  double bias_var = 0.0, gap_var = 0.0;
  for (std::size_t o = 0; o < counts.size(); ++o) {
    const double n = static_cast<double>(counts[o]);
    const double p = p_pro[o];
    r.delta_by_occupation.push_back(2.0 * p - 1.0);
    const double se = 2.0 * std::sqrt(std::max(0.0, p * (1.0 - p)) / n);
    r.delta_sem.push_back(se);
    const double w = n / static_cast<double>(total);
    freq.push_back(w);
    bias_var += se * se;
    gap_var += w * w * se * se;
  }
  const double n_occ = static_cast<double>(counts.size());
  r.per_occupation_bias = per_occupation_bias(r.delta_by_occupation);
  r.stereotype_gap = stereotype_gap(r.delta_by_occupation, freq);
  r.per_occupation_bias_sem = std::sqrt(bias_var) / n_occ;
  r.stereotype_gap_sem = std::sqrt(gap_var);
  return r;
}

}  // namespace

BiasReport exact_bias_report(std::span<const ExactDecision> decisions, std::size_t n_occupations) {
  std::vector<double> sum(n_occupations, 0.0);
  std::vector<std::size_t> counts(n_occupations, 0);
  for (const ExactDecision& d : decisions) {
    if (d.occupation >= n_occupations) {
      throw PreconditionError("bias: occupation " + std::to_string(d.occupation) + " out of range");
    }
    sum[d.occupation] += d.p_pro;
    ++counts[d.occupation];
  }
  std::vector<double> p(n_occupations, 0.0);
  for (std::size_t o = 0; o < n_occupations; ++o) {
    if (counts[o]) p[o] = sum[o] / static_cast<double>(counts[o]);
  }
  return summarize(p, counts);
}

BiasReport sampled_bias_report(std::span<const SampledDecision> decisions,
                               std::size_t n_occupations) {
  std::vector<std::size_t> pro(n_occupations, 0), counts(n_occupations, 0);
  for (const SampledDecision& d : decisions) {
    if (d.occupation >= n_occupations) {
      throw PreconditionError("bias: occupation " + std::to_string(d.occupation) + " out of range");
    }
    pro[d.occupation] += (d.label == Stereotype::pro);
    ++counts[d.occupation];
  }
  std::vector<double> p(n_occupations, 0.0);
  for (std::size_t o = 0; o < n_occupations; ++o) {
    if (counts[o]) p[o] = static_cast<double>(pro[o]) / static_cast<double>(counts[o]);
  }
  return summarize(p, counts);
}

double expected_reward_exact(std::span<const ExactDecision> decisions, std::size_t n_occupations) {
  std::vector<double> sum(n_occupations, 0.0);
  std::vector<std::size_t> counts(n_occupations, 0);
  for (const ExactDecision& d : decisions) {
    if (d.occupation >= n_occupations) {
      throw PreconditionError("expected_reward_exact: occupation out of range");
    }
    sum[d.occupation] += d.p_pro;
    ++counts[d.occupation];
  }
  for (std::size_t o = 0; o < n_occupations; ++o) {
    if (counts[o] != counts[0] || counts[o] == 0) {
      throw PreconditionError(
          "expected_reward_exact: occupations must have equal, nonzero sample counts");
    }
  }
  std::vector<Stereotype> majority(n_occupations);
  for (std::size_t o = 0; o < n_occupations; ++o) {
    majority[o] = majority_stereotype(sum[o] / static_cast<double>(counts[o]));
  }
  double total = 0.0;
  for (const ExactDecision& d : decisions) {
    const Stereotype m = majority[d.occupation];
    total += d.p_pro * fairness_reward(Stereotype::pro, m) +
             (1.0 - d.p_pro) * fairness_reward(Stereotype::anti, m);
  }
  return total / static_cast<double>(decisions.size());
}

KlResult categorical_kl(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw ShapeError("categorical_kl: distributions differ in size");
  KlResult r;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    if (q[i] <= 0.0) {
      r.infinite = true;
      r.value = kMaxKl;
      return r;
    }
    r.value += p[i] * (std::log(p[i]) - std::log(q[i]));
  }
  r.value = std::max(0.0, r.value);
  return r;
}

BoundCheck capability_bound_check(double base_utility, double steered_utility, double kl,
                                  double sigma) {
  BoundCheck c;
  c.difference = std::abs(base_utility - steered_utility);
  c.bound = sigma * std::sqrt(2.0 * std::max(0.0, kl));
  c.slack = c.bound - c.difference;
  c.pass = c.difference <= c.bound;
  return c;
}

}  // namespace dso::fair

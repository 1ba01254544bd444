#include "dso/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dso/errors.hpp"
#include "dso/fairness.hpp"

namespace dso::baselines {

ContrastiveSets build_contrastive_sets(const policy::PolicyModel& model,
                                       std::span<const Sample> ambiguous,
                                       const OccupationTable& table, const Rng& rng) {
  ContrastiveSets sets;
  for (std::size_t i = 0; i < ambiguous.size(); ++i) {
    const Sample& s = ambiguous[i];
    const auto p = policy::forward(model, data::encode(s));
    Rng r = rng.split(i);
    const std::size_t action = r.uniform() < p[0] ? 0 : 1;
    if (fair::stereotype_of(action, s, table) == fair::Stereotype::pro) {
      sets.positive.push_back(s);
    } else {
      sets.negative.push_back(s);
    }
  }
  if (sets.positive.empty() || sets.negative.empty()) {
    throw PreconditionError("contrastive sets: base decisions are all one stereotype");
  }
  return sets;
}

std::vector<std::vector<double>> block_features(const policy::PolicyModel& model, const Sample& s) {
  const policy::ActivationTrace trace = policy::trace_activations(model, data::encode(s));
  std::vector<std::vector<double>> out;
  for (const ad::Tensor& h : trace.ln_output) {
    std::vector<double> mean(h.cols(), 0.0);
    for (std::size_t r = 0; r < h.rows(); ++r) {
      for (std::size_t c = 0; c < h.cols(); ++c) mean[c] += h.at(r, c);
    }
    for (double& v : mean) v /= static_cast<double>(h.rows());
    out.push_back(std::move(mean));
  }
  return out;
}

namespace {

std::vector<std::vector<double>> mean_features(const policy::PolicyModel& model,
                                               std::span<const Sample> set) {
  std::vector<std::vector<double>> sum;
  for (const Sample& s : set) {
    auto f = block_features(model, s);
    if (sum.empty()) {
      sum = std::move(f);
      continue;
    }
    for (std::size_t l = 0; l < f.size(); ++l) {
      for (std::size_t j = 0; j < f[l].size(); ++j) sum[l][j] += f[l][j];
    }
  }
  for (auto& block : sum) {
    for (double& v : block) v /= static_cast<double>(set.size());
  }
  return sum;
}

double sigmoid(double z) {
  return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

}  // namespace

steer::InterventionParams caa_vector(const policy::PolicyModel& model, const ContrastiveSets& sets) {
  if (sets.positive.empty() || sets.negative.empty()) {
    throw PreconditionError("caa_vector: contrastive sets must be nonempty");
  }
  const auto pos = mean_features(model, sets.positive);
  const auto neg = mean_features(model, sets.negative);
  auto params = steer::InterventionParams::zeros(model.hook_widths(), steer::Method::caa);
  for (std::size_t l = 0; l < params.blocks(); ++l) {
    for (std::size_t j = 0; j < params.b[l].size(); ++j) params.b[l][j] = neg[l][j] - pos[l][j];
  }
  return params;
}

Probe fit_probe(std::span<const std::vector<double>> features, std::span<const int> labels,
                const ProbeConfig& config) {
  if (features.size() != labels.size() || features.empty()) {
    throw PreconditionError("fit_probe: need one label per feature vector");
  }
  if (!(config.train_fraction > 0.0 && config.train_fraction < 1.0)) {
    throw PreconditionError("fit_probe: train_fraction must lie in (0, 1)");
  }
  const std::size_t n = features.size();
  const std::size_t dim = features[0].size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng(config.seed).split("probe-split").shuffle(order);
  const std::size_t n_train =
      std::clamp<std::size_t>(static_cast<std::size_t>(config.train_fraction * n), 1, n - 1);

  Probe p;
  p.weight.assign(dim, 0.0);
  std::vector<double> gw(dim);
  for (std::size_t step = 0; step < config.steps; ++step) {
    std::fill(gw.begin(), gw.end(), 0.0);
    double gb = 0.0;
    for (std::size_t k = 0; k < n_train; ++k) {
      const auto& x = features[order[k]];
      const double z = std::inner_product(x.begin(), x.end(), p.weight.begin(), p.bias);
      const double err = sigmoid(z) - labels[order[k]];
      for (std::size_t j = 0; j < dim; ++j) gw[j] += err * x[j];
      gb += err;
    }
    for (std::size_t j = 0; j < dim; ++j) p.weight[j] -= config.lr * gw[j] / n_train;
    p.bias -= config.lr * gb / n_train;
  }

  std::size_t correct = 0;
  for (std::size_t k = n_train; k < n; ++k) {
    const auto& x = features[order[k]];
    const double z = std::inner_product(x.begin(), x.end(), p.weight.begin(), p.bias);
    correct += (z > 0.0) == (labels[order[k]] == 1);
  }
  p.accuracy = static_cast<double>(correct) / static_cast<double>(n - n_train);

  const double norm = std::sqrt(std::inner_product(p.weight.begin(), p.weight.end(),
                                                   p.weight.begin(), 0.0));
  p.direction.assign(dim, 0.0);
  if (norm > 0.0) {
    for (std::size_t j = 0; j < dim; ++j) p.direction[j] = p.weight[j] / norm;
  }
  double mean = 0.0, sq = 0.0;
  for (const auto& x : features) {
    const double proj = std::inner_product(x.begin(), x.end(), p.direction.begin(), 0.0);
    mean += proj;
    sq += proj * proj;
  }
  mean /= static_cast<double>(n);
  p.projection_std = std::sqrt(std::max(0.0, sq / static_cast<double>(n) - mean * mean));
  return p;
}

ProbeSet train_probes(const policy::PolicyModel& model, const ContrastiveSets& sets,
                      const ProbeConfig& config) {
  if (sets.positive.empty() || sets.negative.empty()) {
    throw PreconditionError("train_probes: contrastive sets must be nonempty");
  }
  const std::size_t blocks = model.config().num_blocks;
  std::vector<std::vector<std::vector<double>>> per_block(blocks);
  std::vector<int> labels;
  auto add = [&](std::span<const Sample> set, int label) {
    for (const Sample& s : set) {
      auto f = block_features(model, s);
      for (std::size_t l = 0; l < blocks; ++l) per_block[l].push_back(std::move(f[l]));
      labels.push_back(label);
    }
  };
  add(sets.positive, 0);
  add(sets.negative, 1);
  ProbeSet set;
  for (std::size_t l = 0; l < blocks; ++l) {
    ProbeConfig c = config;
    c.seed = Rng(config.seed).split(l).next_u64();
    set.probes.push_back(fit_probe(per_block[l], labels, c));
  }
  return set;
}

steer::InterventionParams iti_shift(const policy::PolicyModel& model, const ProbeSet& probes,
                                    std::size_t top_k) {
  const std::size_t blocks = model.config().num_blocks;
  if (top_k > blocks) throw PreconditionError("iti_shift: top_k exceeds the block count");
  auto params = steer::InterventionParams::zeros(model.hook_widths(), steer::Method::iti);
  if (top_k == 0) return params;
  if (probes.probes.size() != blocks) throw PreconditionError("iti_shift: probes are not trained");
  std::vector<std::size_t> rank(blocks);
  std::iota(rank.begin(), rank.end(), std::size_t{0});
  std::stable_sort(rank.begin(), rank.end(), [&](std::size_t x, std::size_t y) {
    return probes.probes[x].accuracy > probes.probes[y].accuracy;
  });
  for (std::size_t k = 0; k < top_k; ++k) {
    const Probe& p = probes.probes[rank[k]];
    if (p.direction.size() != params.b[rank[k]].size()) {
      throw ShapeError("iti_shift: probe width does not match the hook site");
    }
    for (std::size_t j = 0; j < p.direction.size(); ++j) {
      params.b[rank[k]][j] = p.direction[j] * p.projection_std;
    }
  }
  return params;
}

}  // namespace dso::baselines

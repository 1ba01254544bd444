#include "dso/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

#include "dso/binary_io.hpp"
#include "dso/csv.hpp"
#include "dso/errors.hpp"
#include "dso/evaluation.hpp"

#ifndef DSO_VERSION
#define DSO_VERSION "dev"
#endif

namespace dso::harness {

namespace fs = std::filesystem;
using nlohmann::json;
using csv::format_number;
using io::file_hash;
using io::fnv1a64;
using io::hex64;

namespace {

constexpr double kBaseBiasGate = 0.5;
constexpr double kBaseAccuracyGate = 0.9;
constexpr double kMitigationRatioGate = 0.5;
constexpr double kSpearmanGate = -0.8;
constexpr double kKlSlack = 1e-6;
constexpr double kSparsityGateFraction = 0.6;
constexpr double kSparsityTolerance = 0.05;

void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write " + path.string());
  f << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingArtifact("missing " + path.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void require(const fs::path& path, const std::string& producer) {
  if (!fs::exists(path)) {
    throw MissingArtifact("missing " + path.string() + " (run '" + producer + "' first)");
  }
}

std::string bool_cell(bool b) { return b ? "1" : "0"; }

// Runs fn(i) for i in [0, n) on a small worker pool. Results are stored by
// index, so the thread count never changes the output.
template <class Fn>
void parallel_for(std::size_t n, Fn fn) {
  const std::size_t workers =
      std::min<std::size_t>(n, std::max(1u, std::thread::hardware_concurrency()));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

std::string method_file(steer::Method m) { return std::string(steer::to_string(m)) + ".bin"; }

// Stops a command from mixing artifacts built under different settings.
void check_compatible(const fs::path& dir, const ExperimentConfig& c,
                      std::initializer_list<const char*> sections) {
  if (!fs::exists(dir / "manifest.json")) return;
  const json recorded = read_json(dir / "manifest.json").value("config", json::object());
  const json current = to_json(c);
  for (const char* s : sections) {
    if (recorded.contains(s) && recorded[s] != current[s]) {
      throw PreconditionError(std::string("config section '") + s +
                              "' differs from the one this run directory was built with");
    }
  }
}

json capability_json(const fair::CapabilityReport& r) {
  return {{"accuracy", r.accuracy}, {"accuracy_sem", r.accuracy_sem}, {"m", r.m}};
}

}  // namespace

// ---------------------------------------------------------------- config

void ExperimentConfig::validate() const {
  policy.validate();
  train.validate();
  if (world.vocab_size != policy.vocab_size) {
    throw PreconditionError("config: world.vocab_size and policy.vocab_size differ");
  }
  if (lambda_grid.empty() || sparsity_grid.empty() || methods.empty()) {
    throw PreconditionError("config: grids and method list must be nonempty");
  }
  for (double g : lambda_grid) {
    if (!(g >= 0.0 && g <= 1.0)) {
      throw PreconditionError("config: lambda_grid entries are fractions of lambda_max in [0, 1]");
    }
  }
  for (double f : sparsity_grid) {
    if (!(f > 0.0 && f <= 1.0)) throw PreconditionError("config: sparsity_grid entries must lie in (0, 1]");
  }
  if (iti_top_k > policy.num_blocks) throw PreconditionError("config: iti_top_k exceeds num_blocks");
}

json to_json(const ExperimentConfig& c) {
  json methods = json::array();
  for (auto m : c.methods) methods.push_back(std::string(steer::to_string(m)));
  json train = train::to_json(c.train);
  train.erase("seed");
  return {
      {"world",
       {{"n_occupations", c.world.n_occupations},
        {"train_per_occupation", c.world.train_per_occupation},
        {"eval_per_occupation", c.world.eval_per_occupation},
        {"unambiguous_eval_per_occupation", c.world.unambiguous_eval_per_occupation},
        {"pretrain_ambiguous_per_occupation", c.world.pretrain_ambiguous_per_occupation},
        {"pretrain_unambiguous_per_occupation", c.world.pretrain_unambiguous_per_occupation},
        {"p_skew", c.world.p_skew},
        {"vocab_size", c.world.vocab_size}}},
      {"policy",
       {{"vocab_size", c.policy.vocab_size},
        {"d_model", c.policy.d_model},
        {"num_blocks", c.policy.num_blocks},
        {"mlp_hidden", c.policy.mlp_hidden},
        {"num_actions", c.policy.num_actions}}},
      {"pretrain",
       {{"epochs", c.pretrain.epochs},
        {"lr", c.pretrain.lr},
        {"weight_decay", c.pretrain.weight_decay},
        {"batch_size", c.pretrain.batch_size}}},
      {"train", train},
      {"probe",
       {{"steps", c.probe.steps}, {"lr", c.probe.lr}, {"train_fraction", c.probe.train_fraction}}},
      {"iti_top_k", c.iti_top_k},
      {"lambda_grid", c.lambda_grid},
      {"sparsity_grid", c.sparsity_grid},
      {"methods", methods},
      {"master_seed", c.master_seed},
      {"verify_trials", c.verify_trials},
      {"verify_pairs", c.verify_pairs},
  };
}

namespace {

template <class T>
void set_field(const json& obj, const std::string& section, const std::string& key, T& field) {
  try {
    field = obj.get<T>();
  } catch (const json::exception&) {
    throw PreconditionError("config: bad value for " + section + (section.empty() ? "" : ".") + key);
  }
}

void check_object(const json& j, const std::string& section) {
  if (!j.is_object()) throw PreconditionError("config: '" + section + "' must be an object");
}

}  // namespace

ExperimentConfig config_from_json(const json& j, ExperimentConfig c) {
  check_object(j, "<root>");
  for (const auto& [key, value] : j.items()) {
    if (key == "world") {
      check_object(value, key);
      for (const auto& [k, v] : value.items()) {
        auto& w = c.world;
        if (k == "n_occupations") set_field(v, key, k, w.n_occupations);
        else if (k == "train_per_occupation") set_field(v, key, k, w.train_per_occupation);
        else if (k == "eval_per_occupation") set_field(v, key, k, w.eval_per_occupation);
        else if (k == "unambiguous_eval_per_occupation") set_field(v, key, k, w.unambiguous_eval_per_occupation);
        else if (k == "pretrain_ambiguous_per_occupation") set_field(v, key, k, w.pretrain_ambiguous_per_occupation);
        else if (k == "pretrain_unambiguous_per_occupation") set_field(v, key, k, w.pretrain_unambiguous_per_occupation);
        else if (k == "p_skew") set_field(v, key, k, w.p_skew);
        else if (k == "vocab_size") set_field(v, key, k, w.vocab_size);
        else throw PreconditionError("config: unknown key world." + k);
      }
    } else if (key == "policy") {
      check_object(value, key);
      for (const auto& [k, v] : value.items()) {
        auto& p = c.policy;
        if (k == "vocab_size") set_field(v, key, k, p.vocab_size);
        else if (k == "d_model") set_field(v, key, k, p.d_model);
        else if (k == "num_blocks") set_field(v, key, k, p.num_blocks);
        else if (k == "mlp_hidden") set_field(v, key, k, p.mlp_hidden);
        else if (k == "num_actions") set_field(v, key, k, p.num_actions);
        else throw PreconditionError("config: unknown key policy." + k);
      }
    } else if (key == "pretrain") {
      check_object(value, key);
      for (const auto& [k, v] : value.items()) {
        auto& p = c.pretrain;
        if (k == "epochs") set_field(v, key, k, p.epochs);
        else if (k == "lr") set_field(v, key, k, p.lr);
        else if (k == "weight_decay") set_field(v, key, k, p.weight_decay);
        else if (k == "batch_size") set_field(v, key, k, p.batch_size);
        else throw PreconditionError("config: unknown key pretrain." + k);
      }
    } else if (key == "train") {
      check_object(value, key);
      if (value.contains("seed")) throw PreconditionError("config: train.seed is derived from master_seed");
      try {
        c.train = train::train_config_from_json(value, c.train);
      } catch (const json::exception&) {
        throw PreconditionError("config: bad value in section train");
      }
    } else if (key == "probe") {
      check_object(value, key);
      for (const auto& [k, v] : value.items()) {
        if (k == "steps") set_field(v, key, k, c.probe.steps);
        else if (k == "lr") set_field(v, key, k, c.probe.lr);
        else if (k == "train_fraction") set_field(v, key, k, c.probe.train_fraction);
        else throw PreconditionError("config: unknown key probe." + k);
      }
    } else if (key == "iti_top_k") set_field(value, "", key, c.iti_top_k);
    else if (key == "lambda_grid") set_field(value, "", key, c.lambda_grid);
    else if (key == "sparsity_grid") set_field(value, "", key, c.sparsity_grid);
    else if (key == "master_seed") set_field(value, "", key, c.master_seed);
    else if (key == "verify_trials") set_field(value, "", key, c.verify_trials);
    else if (key == "verify_pairs") set_field(value, "", key, c.verify_pairs);
    else if (key == "methods") {
      std::vector<std::string> names;
      set_field(value, "", key, names);
      c.methods.clear();
      for (const auto& n : names) c.methods.push_back(steer::method_from_string(n));
    } else {
      throw PreconditionError("config: unknown key " + key);
    }
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const fs::path& path, ExperimentConfig base) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw PreconditionError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw PreconditionError("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j, std::move(base));
}

ExperimentConfig resolve_seeds(ExperimentConfig c) {
  const Rng root(c.master_seed);
  c.world.seed = root.split("world").next_u64();
  c.policy.seed = root.split("policy-init").next_u64();
  c.pretrain.seed = root.split("pretrain").next_u64();
  c.train.seed = root.split("dso-train").next_u64();
  c.probe.seed = root.split("probe").next_u64();
  return c;
}

std::map<std::string, std::uint64_t> seed_table(const ExperimentConfig& config) {
  const ExperimentConfig c = resolve_seeds(config);
  const Rng root(c.master_seed);
  return {{"master", c.master_seed},
          {"world", c.world.seed},
          {"policy_init", c.policy.seed},
          {"pretrain", c.pretrain.seed},
          {"dso_train", c.train.seed},
          {"probe", c.probe.seed},
          {"contrastive_sampling", root.split("contrastive").next_u64()},
          {"eval_sampling", root.split("eval-sampling").next_u64()},
          {"verify", root.split("verify").next_u64()}};
}

std::string config_hash(const ExperimentConfig& c) {
  const std::string text = to_json(c).dump();
  return hex64(fnv1a64({reinterpret_cast<const std::uint8_t*>(text.data()), text.size()}));
}

// ---------------------------------------------------------------- manifest

json to_json(const RunManifest& m) {
  return {{"code_version", m.code_version}, {"config_hash", m.config_hash}, {"config", m.config},
          {"seeds", m.seeds},               {"artifacts", m.artifacts},    {"timestamps", m.timestamps}};
}

RunManifest load_manifest(const fs::path& dir) {
  RunManifest m;
  if (!fs::exists(dir / "manifest.json")) return m;
  const json j = read_json(dir / "manifest.json");
  m.code_version = j.value("code_version", "");
  m.config_hash = j.value("config_hash", "");
  m.config = j.value("config", json::object());
  m.seeds = j.value("seeds", std::map<std::string, std::uint64_t>{});
  m.artifacts = j.value("artifacts", std::map<std::string, std::string>{});
  m.timestamps = j.value("timestamps", std::map<std::string, std::string>{});
  return m;
}

void record(const fs::path& dir, const ExperimentConfig& config, const std::string& command,
            const std::vector<std::string>& artifacts) {
  RunManifest m = load_manifest(dir);
  m.code_version = DSO_VERSION;
  m.config_hash = config_hash(config);
  m.config = to_json(config);
  m.seeds = seed_table(config);
  for (const auto& a : artifacts) m.artifacts[a] = hex64(file_hash(dir / a));
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm utc{};
  gmtime_r(&now, &utc);
  std::ostringstream ts;
  ts << std::put_time(&utc, "%Y-%m-%dT%H:%M:%SZ");
  m.timestamps[command] = ts.str();
  write_json(dir / "manifest.json", to_json(m));
}

// ---------------------------------------------------------------- commands

data::DatasetBundle load_world(const ExperimentConfig& config) {
  return data::generate(resolve_seeds(config).world);
}

namespace {

struct Loaded {
  data::DatasetBundle world;
  policy::PolicyModel model;
};

Loaded load_model_and_world(const ExperimentConfig& c, const fs::path& dir) {
  require(dir / "model.bin", "pretrain");
  check_compatible(dir, c, {"world", "policy", "pretrain"});
  return {load_world(c), policy::load_model(dir / "model.bin")};
}

eval::EvalContext context_for(const ExperimentConfig& c, const Loaded& l) {
  return eval::make_context(l.model, l.world.ambiguous_eval, l.world.unambiguous_eval, l.world.table,
                            seed_table(c).at("eval_sampling"));
}

}  // namespace

CommandResult cmd_pretrain(const ExperimentConfig& config, const fs::path& dir) {
  const ExperimentConfig c = resolve_seeds(config);
  c.validate();
  fs::create_directories(dir);
  CommandResult result;
  const data::DatasetBundle world = data::generate(c.world);
  data::write_jsonl(world, dir / "dataset.jsonl");
  policy::PolicyModel model(c.policy);
  const policy::PretrainLog log = policy::pretrain_biased(model, world.pretrain, c.pretrain);
  policy::save_model(model, dir / "model.bin");

  const auto ctx = eval::make_context(model, world.ambiguous_eval, world.unambiguous_eval,
                                      world.table, seed_table(c).at("eval_sampling"));
  const eval::Evaluation base = eval::evaluate(ctx, nullptr);
  const bool bias_ok = base.exact_bias.per_occupation_bias >= kBaseBiasGate;
  const bool acc_ok = base.capability.accuracy >= kBaseAccuracyGate;
  json report = {{"exact_bias", fair::to_json(base.exact_bias)},
                 {"sampled_bias", fair::to_json(base.sampled_bias)},
                 {"capability", capability_json(base.capability)},
                 {"pretrain_epoch_loss", log.epoch_loss},
                 {"model_checksum", hex64(model.checksum())},
                 {"parameter_count", model.parameter_count()},
                 {"gates",
                  {{"min_per_occupation_bias", kBaseBiasGate},
                   {"min_accuracy", kBaseAccuracyGate},
                   {"bias_ok", bias_ok},
                   {"accuracy_ok", acc_ok}}}};
  write_json(dir / "base_report.json", report);
  record(dir, config, "pretrain", {"dataset.jsonl", "model.bin", "base_report.json"});

  result.messages.push_back("base per-occupation bias " +
                            format_number(base.exact_bias.per_occupation_bias) +
                            ", unambiguous accuracy " + format_number(base.capability.accuracy));
  if (!bias_ok || !acc_ok) {
    result.exit_code = kGateFailed;
    result.messages.push_back("base model gate failed (need bias >= 0.5 and accuracy >= 0.9); "
                              "try another --master_seed");
  }
  return result;
}

CommandResult cmd_train_dso(const ExperimentConfig& config, const fs::path& dir) {
  const ExperimentConfig c = resolve_seeds(config);
  c.validate();
  const Loaded l = load_model_and_world(c, dir);
  CommandResult result;
  const std::uint64_t checksum = l.model.checksum();
  train::TrainResult trained;
  try {
    trained = train::train(l.model, l.world.ambiguous_train, l.world.table, c.train);
  } catch (const train::TrainingDiverged& e) {
    steer::save(e.last_good(), dir / "dso.last_good.bin");
    result.exit_code = kDiverged;
    result.messages.push_back(std::string(e.what()) + "; last finite vectors in dso.last_good.bin");
    return result;
  }
  if (l.model.checksum() != checksum) throw std::logic_error("train-dso modified model weights");
  steer::save(trained.params, dir / "dso.bin");
  train::write_log_csv(trained.log, dir / "dso_train_log.csv");

  const auto ctx = context_for(c, l);
  const double base_bias = eval::evaluate(ctx, nullptr).exact_bias.per_occupation_bias;
  const eval::Evaluation steered = eval::evaluate(ctx, &trained.params);
  const double ratio = steered.exact_bias.per_occupation_bias / base_bias;
  double max_residual = 0.0;
  for (const auto& r : trained.log) {
    max_residual = std::max(max_residual, std::abs(r.exact_expected_reward + r.exact_bias));
  }
  const bool gate = ratio <= kMitigationRatioGate;
  json summary = {{"iterations", trained.log.size()},
                  {"stopped_by_budget", trained.stopped_by_budget},
                  {"initial_train_bias", trained.initial_bias},
                  {"final_train_bias", trained.log.empty() ? trained.initial_bias
                                                           : trained.log.back().exact_bias},
                  {"max_reward_plus_bias", max_residual},
                  {"eval_base_bias", base_bias},
                  {"eval_steered_bias", steered.exact_bias.per_occupation_bias},
                  {"eval_bias_ratio", ratio},
                  {"eval_accuracy", steered.capability.accuracy},
                  {"eval_kl", steered.kl_ambiguous},
                  {"gates", {{"max_bias_ratio", kMitigationRatioGate}, {"bias_ratio_ok", gate}}}};
  write_json(dir / "dso_summary.json", summary);
  record(dir, config, "train-dso", {"dso.bin", "dso_train_log.csv", "dso_summary.json"});
  result.messages.push_back("held-out bias " + format_number(base_bias) + " -> " +
                            format_number(steered.exact_bias.per_occupation_bias) + " (ratio " +
                            format_number(ratio) + ")");
  if (!gate) {
    result.exit_code = kGateFailed;
    result.messages.push_back("bias reduction gate failed (need ratio <= 0.5)");
  }
  return result;
}

CommandResult cmd_train_baseline(const ExperimentConfig& config, const fs::path& dir,
                                 const std::vector<steer::Method>& methods) {
  const ExperimentConfig c = resolve_seeds(config);
  c.validate();
  const Loaded l = load_model_and_world(c, dir);
  CommandResult result;
  const baselines::ContrastiveSets sets = baselines::build_contrastive_sets(
      l.model, l.world.ambiguous_train, l.world.table, Rng(seed_table(c).at("contrastive_sampling")));
  json info = {{"positive_count", sets.positive.size()}, {"negative_count", sets.negative.size()}};
  std::vector<std::string> artifacts;
  for (steer::Method m : methods) {
    if (m == steer::Method::caa) {
      steer::save(baselines::caa_vector(l.model, sets), dir / "caa.bin");
      artifacts.push_back("caa.bin");
    } else if (m == steer::Method::iti) {
      const baselines::ProbeSet probes = baselines::train_probes(l.model, sets, c.probe);
      steer::save(baselines::iti_shift(l.model, probes, c.iti_top_k), dir / "iti.bin");
      json acc = json::array(), sd = json::array();
      for (const auto& p : probes.probes) {
        acc.push_back(p.accuracy);
        sd.push_back(p.projection_std);
      }
      info["probe_accuracy"] = acc;
      info["projection_std"] = sd;
      info["iti_top_k"] = c.iti_top_k;
      artifacts.push_back("iti.bin");
    } else {
      throw PreconditionError("train-baseline: method must be caa or iti");
    }
  }
  write_json(dir / "baselines.json", info);
  artifacts.push_back("baselines.json");
  record(dir, config, "train-baseline", artifacts);
  result.messages.push_back("contrastive sets: " + std::to_string(sets.positive.size()) + " pro, " +
                            std::to_string(sets.negative.size()) + " anti");
  return result;
}

const std::vector<std::string>& sweep_columns() {
  static const std::vector<std::string> cols = {
      "method", "lambda", "lambda_normalized", "per_occupation_bias", "per_occupation_bias_sem",
      "stereotype_gap", "stereotype_gap_sem", "sampled_per_occupation_bias",
      "sampled_stereotype_gap", "accuracy", "accuracy_sem", "kl", "kl_capability",
      "accuracy_change", "bound", "slack", "bound_ok"};
  return cols;
}

const std::vector<std::string>& sparsity_columns() {
  static const std::vector<std::string> cols = {
      "keep_fraction", "neurons_kept", "neurons_total", "parameter_fraction",
      "per_occupation_bias", "stereotype_gap", "accuracy", "kl", "bias_gap_pp", "within_5pp"};
  return cols;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw PreconditionError("spearman: need >= 2 pairs");
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

CommandResult cmd_sweep(const ExperimentConfig& config, const fs::path& dir) {
  const ExperimentConfig c = resolve_seeds(config);
  c.validate();
  const Loaded l = load_model_and_world(c, dir);
  std::vector<steer::InterventionParams> trained;
  for (steer::Method m : c.methods) {
    require(dir / method_file(m), m == steer::Method::dso ? "train-dso" : "train-baseline");
    trained.push_back(steer::load(dir / method_file(m)));
    if (trained.back().method != m) throw FormatError(method_file(m) + " holds another method");
  }
  const auto ctx = context_for(c, l);

  struct Point {
    std::size_t method;
    double lambda, fraction;
    eval::Evaluation e;
  };
  std::vector<Point> points;
  for (std::size_t mi = 0; mi < c.methods.size(); ++mi) {
    for (double g : c.lambda_grid) points.push_back({mi, g * steer::lambda_max(c.methods[mi]), g, {}});
  }
  parallel_for(points.size(), [&](std::size_t i) {
    const auto p = steer::scale(trained[points[i].method], points[i].lambda);
    points[i].e = eval::evaluate(ctx, &p);
  });

  csv::Table table(kSweepSchema, sweep_columns());
  std::size_t violations = 0;
  for (const Point& p : points) {
    const auto& e = p.e;
    violations += !e.bound.pass;
    table.add_row({std::string(steer::to_string(c.methods[p.method])), format_number(p.lambda),
                   format_number(p.fraction), format_number(e.exact_bias.per_occupation_bias),
                   format_number(e.exact_bias.per_occupation_bias_sem),
                   format_number(e.exact_bias.stereotype_gap),
                   format_number(e.exact_bias.stereotype_gap_sem),
                   format_number(e.sampled_bias.per_occupation_bias),
                   format_number(e.sampled_bias.stereotype_gap), format_number(e.capability.accuracy),
                   format_number(e.capability.accuracy_sem), format_number(e.kl_ambiguous),
                   format_number(e.kl_capability),
                   format_number(e.capability.accuracy - ctx.base_capability.accuracy),
                   format_number(e.bound.bound), format_number(e.bound.slack), bool_cell(e.bound.pass)});
  }
  table.write(dir / "sweep.csv");

  // Gates: controllability and KL monotonicity along each method's grid.
  CommandResult result;
  json methods = json::object();
  std::vector<std::string> warnings;
  bool gates_ok = violations == 0;
  for (std::size_t mi = 0; mi < c.methods.size(); ++mi) {
    std::vector<double> lambdas, bias, kl;
    for (const Point& p : points) {
      if (p.method != mi) continue;
      lambdas.push_back(p.lambda);
      bias.push_back(p.e.exact_bias.per_occupation_bias);
      kl.push_back(p.e.kl_ambiguous);
    }
    std::vector<std::size_t> order(lambdas.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return lambdas[a] < lambdas[b]; });
    bool monotone = true;
    for (std::size_t k = 1; k < order.size(); ++k) {
      if (kl[order[k]] < kl[order[k - 1]] - kKlSlack) monotone = false;
    }
    const double rho = lambdas.size() >= 2 ? spearman(lambdas, bias) : 0.0;
    json entry = {{"spearman_lambda_bias", rho}, {"kl_nondecreasing", monotone}};
    if (c.methods[mi] == steer::Method::dso) {
      const bool rho_ok = rho <= kSpearmanGate;
      entry["spearman_ok"] = rho_ok;
      gates_ok = gates_ok && rho_ok && monotone;
      if (!rho_ok) result.messages.push_back("DSO Spearman(lambda, bias) " + format_number(rho) + " > -0.8");
      if (!monotone) result.messages.push_back("DSO KL is not nondecreasing in lambda");
    }
    methods[std::string(steer::to_string(c.methods[mi]))] = entry;
  }

  // Soft comparison: for each baseline point, the best DSO point with at
  // least its accuracy should have lower bias.
  const auto dso_it = std::find(c.methods.begin(), c.methods.end(), steer::Method::dso);
  if (dso_it != c.methods.end()) {
    const std::size_t dso_index = dso_it - c.methods.begin();
    for (const Point& b : points) {
      if (b.method == dso_index || b.lambda == 0.0) continue;
      std::optional<double> best;
      for (const Point& d : points) {
        if (d.method != dso_index || d.e.capability.accuracy < b.e.capability.accuracy) continue;
        const double v = d.e.exact_bias.per_occupation_bias;
        if (!best || v < *best) best = v;
      }
      const std::string where = std::string(steer::to_string(c.methods[b.method])) +
                                " at lambda " + format_number(b.lambda);
      if (!best) {
        warnings.push_back(where + ": no DSO point with equal or higher accuracy");
      } else if (!(*best < b.e.exact_bias.per_occupation_bias)) {
        warnings.push_back(where + ": bias " + format_number(b.e.exact_bias.per_occupation_bias) +
                           " not above best comparable DSO bias " + format_number(*best));
      }
    }
  }

  json summary = {{"base_accuracy", ctx.base_capability.accuracy},
                  {"base_accuracy_sem", ctx.base_capability.accuracy_sem},
                  {"bound_violations", violations},
                  {"methods", methods},
                  {"pareto_warnings", warnings},
                  {"gates_ok", gates_ok}};
  write_json(dir / "sweep_summary.json", summary);
  record(dir, config, "sweep", {"sweep.csv", "sweep_summary.json"});
  result.messages.push_back(std::to_string(points.size()) + " sweep rows, " +
                            std::to_string(violations) + " capability-bound violations, " +
                            std::to_string(warnings.size()) + " comparison warnings");
  for (const auto& w : warnings) result.messages.push_back("warning: " + w);
  if (!gates_ok) result.exit_code = kGateFailed;
  return result;
}

CommandResult cmd_sparsity(const ExperimentConfig& config, const fs::path& dir) {
  const ExperimentConfig c = resolve_seeds(config);
  c.validate();
  const Loaded l = load_model_and_world(c, dir);
  require(dir / "dso.bin", "train-dso");
  const steer::InterventionParams full = steer::load(dir / "dso.bin");
  const auto ctx = context_for(c, l);
  const double full_bias = eval::evaluate(ctx, &full).exact_bias.per_occupation_bias;

  std::vector<std::pair<steer::InterventionParams, steer::SparsityMask>> masked;
  for (double f : c.sparsity_grid) masked.push_back(steer::sparsify(full, f));
  std::vector<eval::Evaluation> evals(masked.size());
  parallel_for(masked.size(), [&](std::size_t i) { evals[i] = eval::evaluate(ctx, &masked[i].first); });

  csv::Table table(kSparsitySchema, sparsity_columns());
  const double total_params = static_cast<double>(l.model.parameter_count());
  std::optional<double> smallest;
  std::optional<bool> gate;
  for (std::size_t i = 0; i < masked.size(); ++i) {
    std::size_t kept = 0;
    for (const auto& block : masked[i].second.keep) kept += std::count(block.begin(), block.end(), true);
    const double bias = evals[i].exact_bias.per_occupation_bias;
    const double gap = bias - full_bias;
    const bool within = std::abs(gap) <= kSparsityTolerance;
    if (within && (!smallest || c.sparsity_grid[i] < *smallest)) smallest = c.sparsity_grid[i];
    if (c.sparsity_grid[i] == kSparsityGateFraction) gate = within;
    table.add_row({format_number(c.sparsity_grid[i]), std::to_string(kept),
                   std::to_string(full.neuron_count()),
                   format_number(static_cast<double>(kept) / total_params), format_number(bias),
                   format_number(evals[i].exact_bias.stereotype_gap),
                   format_number(evals[i].capability.accuracy), format_number(evals[i].kl_ambiguous),
                   format_number(gap * 100.0), bool_cell(within)});
  }
  table.write(dir / "sparsity.csv");
  json summary = {{"full_bias", full_bias},
                  {"tolerance", kSparsityTolerance},
                  {"smallest_fraction_within_tolerance", smallest ? json(*smallest) : json(nullptr)},
                  {"gate_fraction", kSparsityGateFraction},
                  {"gate_ok", gate ? json(*gate) : json(nullptr)}};
  write_json(dir / "sparsity_summary.json", summary);
  record(dir, config, "sparsity", {"sparsity.csv", "sparsity_summary.json"});
  CommandResult result;
  result.messages.push_back(smallest ? "smallest keep fraction within 5 pp: " + format_number(*smallest)
                                     : std::string("no keep fraction within 5 pp"));
  if (gate && !*gate) {
    result.exit_code = kGateFailed;
    result.messages.push_back("keep fraction 0.6 is more than 5 pp from the full intervention");
  }
  return result;
}

CommandResult cmd_verify(const ExperimentConfig& config, const fs::path& dir) {
  const ExperimentConfig c = resolve_seeds(config);
  const Rng root(seed_table(c).at("verify"));
  json counterexamples = json::array();

  // Expected reward vs bias on random balanced decision tables.
  std::size_t t1_violations = 0;
  double t1_max = 0.0;
  for (std::size_t t = 0; t < c.verify_trials; ++t) {
    Rng r = root.split("reward-identity").split(t);
    const std::size_t n_occ = 2 + r.below(9);
    const std::size_t per = 1 + r.below(20);
    std::vector<fair::ExactDecision> table;
    for (std::size_t o = 0; o < n_occ; ++o) {
      const bool tie = r.bernoulli(0.1);
      for (std::size_t k = 0; k < per; ++k) {
        const double p = tie ? 0.5 : (r.bernoulli(0.1) ? static_cast<double>(r.below(2)) : r.uniform());
        table.push_back({o, p});
      }
    }
    const double reward = fair::expected_reward_exact(table, n_occ);
    const double bias = fair::exact_bias_report(table, n_occ).per_occupation_bias;
    const double residual = std::abs(reward + bias);
    t1_max = std::max(t1_max, residual);
    if (!(residual < 1e-9)) {
      ++t1_violations;
      if (counterexamples.size() < 10) {
        counterexamples.push_back({{"check", "reward_identity"}, {"trial", t}, {"reward", reward},
                                   {"bias", bias}, {"occupations", n_occ}, {"per_occupation", per}});
      }
    }
  }

  // Per-occupation expected reward over a grid of pro rates.
  std::size_t l1_violations = 0;
  json lemma_rows = json::array();
  for (int k = 0; k <= 10; ++k) {
    const double p = k / 10.0;
    const fair::Stereotype m = fair::majority_stereotype(p);
    const double er = p * fair::fairness_reward(fair::Stereotype::pro, m) +
                      (1.0 - p) * fair::fairness_reward(fair::Stereotype::anti, m);
    const double target = -std::abs(2.0 * p - 1.0);
    const bool ok = std::abs(er - target) < 1e-12;
    l1_violations += !ok;
    lemma_rows.push_back({{"p_pro", p}, {"expected_reward", er}, {"minus_abs_delta", target}, {"ok", ok}});
    if (!ok) counterexamples.push_back({{"check", "per_occupation_reward"}, {"p_pro", p}, {"expected_reward", er}});
  }

  // Capability bound on random categorical pairs with bounded utilities.
  std::size_t t2_violations = 0;
  double t2_min_slack = INFINITY;
  for (std::size_t t = 0; t < c.verify_pairs; ++t) {
    Rng r = root.split("capability-bound").split(t);
    const std::size_t k = 2 + r.below(7);
    std::vector<double> p(k), q(k), u(k);
    double sp = 0, sq = 0;
    const double spread = 0.2 + 4.0 * r.uniform();
    for (std::size_t i = 0; i < k; ++i) {
      p[i] = std::exp(spread * r.normal());
      q[i] = std::exp(spread * r.normal());
      u[i] = r.uniform();
      sp += p[i];
      sq += q[i];
    }
    double ep = 0, eq = 0;
    for (std::size_t i = 0; i < k; ++i) {
      p[i] /= sp;
      q[i] /= sq;
      ep += p[i] * u[i];
      eq += q[i] * u[i];
    }
    const fair::KlResult kl = fair::categorical_kl(p, q);
    const fair::BoundCheck b = fair::capability_bound_check(eq, ep, kl.value, 0.5);
    t2_min_slack = std::min(t2_min_slack, b.slack);
    if (!b.pass) {
      ++t2_violations;
      if (counterexamples.size() < 20) {
        counterexamples.push_back({{"check", "capability_bound"}, {"pair", t}, {"p", p}, {"q", q},
                                   {"u", u}, {"difference", b.difference}, {"bound", b.bound}});
      }
    }
  }

  // Rows of an existing sweep.
  json sweep = nullptr;
  std::size_t sweep_violations = 0;
  if (!dir.empty() && fs::exists(dir / "sweep.csv")) {
    const csv::Table t = csv::Table::read(dir / "sweep.csv", kSweepSchema, sweep_columns());
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double diff = std::abs(t.number(i, "accuracy_change"));
      const double bound = 0.5 * std::sqrt(2.0 * std::max(0.0, t.number(i, "kl_capability")));
      if (!(diff <= bound)) {
        ++sweep_violations;
        counterexamples.push_back({{"check", "capability_bound_sweep"}, {"row", i},
                                   {"method", t.cell(i, "method")}, {"lambda", t.number(i, "lambda")},
                                   {"difference", diff}, {"bound", bound}});
      }
    }
    sweep = {{"rows", t.size()}, {"violations", sweep_violations}};
  }

  const std::size_t total = t1_violations + l1_violations + t2_violations + sweep_violations;
  json report = {{"reward_identity", {{"trials", c.verify_trials}, {"violations", t1_violations},
                                      {"max_abs_residual", t1_max}, {"tolerance", 1e-9}}},
                 {"per_occupation_reward", {{"rows", lemma_rows}, {"violations", l1_violations},
                                            {"tolerance", 1e-12}}},
                 {"capability_bound", {{"pairs", c.verify_pairs}, {"violations", t2_violations},
                                       {"min_slack", t2_min_slack}, {"sweep", sweep}}},
                 {"counterexamples", counterexamples},
                 {"total_violations", total}};
  CommandResult result;
  if (!dir.empty()) {
    fs::create_directories(dir);
    write_json(dir / "verify.json", report);
    record(dir, config, "verify", {"verify.json"});
  }
  result.messages.push_back("reward identity: " + std::to_string(t1_violations) + "/" +
                            std::to_string(c.verify_trials) + " violations (max residual " +
                            format_number(t1_max) + ")");
  result.messages.push_back("per-occupation reward: " + std::to_string(l1_violations) + " violations");
  result.messages.push_back("capability bound: " + std::to_string(t2_violations) + "/" +
                            std::to_string(c.verify_pairs) + " random pairs, " +
                            std::to_string(sweep_violations) + " sweep rows violated");
  if (total) {
    result.exit_code = kVerifyFailed;
    for (const auto& ce : counterexamples) result.messages.push_back("counterexample: " + ce.dump());
  }
  return result;
}

CommandResult cmd_report(const fs::path& dir) {
  std::vector<std::string> missing;
  for (const char* f : {"sweep.csv"}) {
    if (!fs::exists(dir / f)) missing.push_back(f);
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += " " + m;
    throw MissingArtifact("report: " + dir.string() + " lacks expected files:" + list);
  }
  const csv::Table t = csv::Table::read(dir / "sweep.csv", kSweepSchema, sweep_columns());
  std::optional<std::size_t> base_row;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t.number(i, "lambda") == 0.0) {
      base_row = i;
      break;
    }
  }
  if (!base_row) throw FormatError("report: sweep.csv has no lambda = 0 row");
  const double base_acc = t.number(*base_row, "accuracy");
  const double base_sem = t.number(*base_row, "accuracy_sem");

  auto row_json = [&](std::size_t i, const std::string& label) {
    return json{{"method", label},
                {"lambda", t.number(i, "lambda")},
                {"per_occupation_bias", t.number(i, "per_occupation_bias")},
                {"per_occupation_bias_sem", t.number(i, "per_occupation_bias_sem")},
                {"stereotype_gap", t.number(i, "stereotype_gap")},
                {"stereotype_gap_sem", t.number(i, "stereotype_gap_sem")},
                {"accuracy", t.number(i, "accuracy")},
                {"accuracy_sem", t.number(i, "accuracy_sem")}};
  };
  json rows = json::array();
  rows.push_back(row_json(*base_row, "base"));
  std::vector<std::string> order;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const std::string& m = t.cell(i, "method");
    if (std::find(order.begin(), order.end(), m) == order.end()) order.push_back(m);
  }
  for (const std::string& m : order) {
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (t.cell(i, "method") != m || t.number(i, "accuracy") < base_acc - base_sem) continue;
      if (!best || t.number(i, "per_occupation_bias") < t.number(*best, "per_occupation_bias")) best = i;
    }
    if (best) rows.push_back(row_json(*best, m));
  }
  json report = {{"selection_rule", "lowest per-occupation bias with accuracy within one SEM of base"},
                 {"rows", rows}};
  write_json(dir / "report.json", report);

  std::ostringstream txt;
  txt << std::left << std::setw(8) << "method" << std::right << std::setw(8) << "lambda"
      << std::setw(22) << "per-occ bias" << std::setw(22) << "stereotype gap" << std::setw(22)
      << "accuracy" << '\n';
  auto pm = [](double v, double s) {
    std::ostringstream o;
    o << std::fixed << std::setprecision(2) << 100.0 * v << " +- " << 100.0 * s;
    return o.str();
  };
  for (const json& r : rows) {
    std::ostringstream lam;
    lam << std::fixed << std::setprecision(2) << r["lambda"].get<double>();
    txt << std::left << std::setw(8) << r["method"].get<std::string>() << std::right << std::setw(8)
        << lam.str() << std::setw(22)
        << pm(r["per_occupation_bias"].get<double>(), r["per_occupation_bias_sem"].get<double>())
        << std::setw(22) << pm(r["stereotype_gap"].get<double>(), r["stereotype_gap_sem"].get<double>())
        << std::setw(22) << pm(r["accuracy"].get<double>(), r["accuracy_sem"].get<double>()) << '\n';
  }
  txt << "(percentages; best lambda = lowest bias with accuracy within one SEM of base)\n";
  {
    std::ofstream f(dir / "report.txt", std::ios::binary);
    f << txt.str();
  }
  CommandResult result;
  result.messages.push_back(txt.str());
  return result;
}

CommandResult cmd_all(const ExperimentConfig& config, const fs::path& dir) {
  CommandResult all;
  auto merge = [&](const std::string& name, CommandResult r) {
    for (auto& m : r.messages) all.messages.push_back(name + ": " + m);
    if (r.exit_code != kOk && all.exit_code == kOk) all.exit_code = r.exit_code;
    return r.exit_code;
  };
  merge("pretrain", cmd_pretrain(config, dir));
  if (merge("train-dso", cmd_train_dso(config, dir)) == kDiverged) return all;
  std::vector<steer::Method> bl;
  for (auto m : config.methods) {
    if (m != steer::Method::dso) bl.push_back(m);
  }
  if (!bl.empty()) merge("train-baseline", cmd_train_baseline(config, dir, bl));
  merge("sweep", cmd_sweep(config, dir));
  merge("sparsity", cmd_sparsity(config, dir));
  merge("verify", cmd_verify(config, dir));
  merge("report", cmd_report(dir));
  return all;
}

}  // namespace dso::harness

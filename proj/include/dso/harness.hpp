#pragma once

// Experiment driver behind the command-line tool. Every command reads its
// inputs from a run directory and writes its outputs there, so commands can
// run independently once their input artifacts exist.
//
// Run directory contents:
//   dataset.jsonl          generated world (pretrain)
//   model.bin              pretrained policy (pretrain)
//   base_report.json       base-model bias and accuracy (pretrain)
//   dso.bin, dso_train_log.csv, dso_summary.json            (train-dso)
//   caa.bin, iti.bin, baselines.json                         (train-baseline)
//   sweep.csv, sweep_summary.json                            (sweep)
//   sparsity.csv, sparsity_summary.json                      (sparsity)
//   verify.json                                              (verify)
//   report.json, report.txt                                  (report)
//   manifest.json          config, seeds, artifact hashes, timestamps

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "dso/baselines.hpp"
#include "dso/data.hpp"
#include "dso/dso_trainer.hpp"
#include "dso/policy.hpp"
#include "dso/steering.hpp"

namespace dso::harness {

/// Process exit codes.
enum ExitCode : int {
  kOk = 0,
  kUsageError = 1,      ///< bad flags or config
  kMissingInput = 2,    ///< artifact absent or unreadable
  kGateFailed = 3,      ///< an empirical gate was not met
  kVerifyFailed = 4,    ///< a theorem check found a violation
  kDiverged = 5,
};

struct ExperimentConfig {
  data::WorldConfig world;
  policy::PolicyConfig policy;
  policy::PretrainConfig pretrain;
  train::TrainConfig train;
  baselines::ProbeConfig probe;
  std::size_t iti_top_k = 2;
  /// Strengths as fractions of each method's lambda_max.
  std::vector<double> lambda_grid{0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
  std::vector<double> sparsity_grid{0.2, 0.4, 0.6, 0.8, 1.0};
  std::vector<steer::Method> methods{steer::Method::dso, steer::Method::caa, steer::Method::iti};
  std::uint64_t master_seed = 0;
  std::size_t verify_trials = 1000;
  std::size_t verify_pairs = 500;

  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& c);
/// Applies the keys present in `j` on top of `base`. Unknown keys throw
/// PreconditionError.
ExperimentConfig config_from_json(const nlohmann::json& j, ExperimentConfig base = {});
ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base = {});

/// Every seed is derived from the master seed by label; the per-component
/// seed fields of the returned config are overwritten.
ExperimentConfig resolve_seeds(ExperimentConfig c);
std::map<std::string, std::uint64_t> seed_table(const ExperimentConfig& c);

/// Hash of the canonical JSON form (seeds resolved).
std::string config_hash(const ExperimentConfig& c);

struct RunManifest {
  std::string code_version;
  std::string config_hash;
  nlohmann::json config;
  std::map<std::string, std::uint64_t> seeds;
  std::map<std::string, std::string> artifacts;   ///< file name -> content hash
  std::map<std::string, std::string> timestamps;  ///< command -> UTC time
};

nlohmann::json to_json(const RunManifest& m);
/// Loads `dir`/manifest.json if present, else an empty manifest.
RunManifest load_manifest(const std::filesystem::path& dir);
/// Hashes the named artifacts, stamps the command and writes manifest.json.
void record(const std::filesystem::path& dir, const ExperimentConfig& config,
            const std::string& command, const std::vector<std::string>& artifacts);

/// Thrown when a command's input artifact is missing.
class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Outcome of a command: exit code plus a short human-readable summary.
struct CommandResult {
  int exit_code = kOk;
  std::vector<std::string> messages;
};

CommandResult cmd_pretrain(const ExperimentConfig& config, const std::filesystem::path& dir);
CommandResult cmd_train_dso(const ExperimentConfig& config, const std::filesystem::path& dir);
CommandResult cmd_train_baseline(const ExperimentConfig& config, const std::filesystem::path& dir,
                                 const std::vector<steer::Method>& methods);
CommandResult cmd_sweep(const ExperimentConfig& config, const std::filesystem::path& dir);
CommandResult cmd_sparsity(const ExperimentConfig& config, const std::filesystem::path& dir);
/// Theorem checks on random instances; also checks sweep.csv in `dir` when
/// present. `dir` may be empty.
CommandResult cmd_verify(const ExperimentConfig& config, const std::filesystem::path& dir);
CommandResult cmd_report(const std::filesystem::path& dir);
/// pretrain, train-dso, train-baseline, sweep, sparsity, verify, report.
CommandResult cmd_all(const ExperimentConfig& config, const std::filesystem::path& dir);

// CSV schemas written by the commands above.
inline constexpr const char* kSweepSchema = "dso-sweep-v1";
const std::vector<std::string>& sweep_columns();
inline constexpr const char* kSparsitySchema = "dso-sparsity-v1";
const std::vector<std::string>& sparsity_columns();

/// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

/// Re-creates the dataset a run directory was built from.
data::DatasetBundle load_world(const ExperimentConfig& config);

}  // namespace dso::harness

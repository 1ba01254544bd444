#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dso/binary_io.hpp"
#include "dso/csv.hpp"
#include "dso/errors.hpp"
#include "dso/harness.hpp"

namespace fs = std::filesystem;
using namespace dso;
using namespace dso::harness;

namespace {

ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.world.n_occupations = 4;
  c.world.train_per_occupation = 8;
  c.world.eval_per_occupation = 4;
  c.world.unambiguous_eval_per_occupation = 4;
  c.world.pretrain_ambiguous_per_occupation = 10;
  c.world.pretrain_unambiguous_per_occupation = 10;
  c.world.vocab_size = 24;
  c.policy.vocab_size = 24;
  c.policy.d_model = 8;
  c.policy.num_blocks = 2;
  c.policy.mlp_hidden = 16;
  c.pretrain.epochs = 2;
  c.train.train_samples = 32;
  c.train.batch_size = 16;
  c.probe.steps = 20;
  c.lambda_grid = {0.0, 0.5, 1.0};
  c.sparsity_grid = {0.5, 1.0};
  c.verify_trials = 20;
  c.verify_pairs = 20;
  c.master_seed = 11;
  return c;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Csv, NumbersRoundTrip) {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const double x = rng.normal() * std::pow(10.0, static_cast<double>(rng.below(20)) - 10.0);
    EXPECT_EQ(csv::parse_number(csv::format_number(x)), x);
  }
  EXPECT_TRUE(std::isnan(csv::parse_number(csv::format_number(std::nan("")))));
  EXPECT_EQ(csv::parse_number(csv::format_number(INFINITY)), INFINITY);
  EXPECT_THROW(csv::parse_number("1.5x"), FormatError);
}

TEST(Csv, TableRoundTripAndSchemaChecks) {
  const fs::path path = fs::temp_directory_path() / "dso_csv_test.csv";
  csv::Table t("demo-v1", {"name", "value"});
  t.add_row({"a", csv::format_number(0.1)});
  t.add_row({"b", csv::format_number(-2.5)});
  EXPECT_THROW(t.add_row({"only-one"}), ShapeError);
  t.write(path);
  const auto back = csv::Table::read(path, "demo-v1", {"name", "value"});
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back.cell(0, "name"), "a");
  EXPECT_EQ(back.number(1, "value"), -2.5);
  EXPECT_THROW(back.column_index("missing"), FormatError);
  EXPECT_THROW(csv::Table::read(path, "demo-v2", {"name", "value"}), FormatError);
  EXPECT_THROW(csv::Table::read(path, "demo-v1", {"value", "name"}), FormatError);
  fs::remove(path);
}

TEST(Config, JsonRoundTripAndErrors) {
  const ExperimentConfig c = tiny_config();
  const auto back = config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_THROW(config_from_json({{"bogus", 1}}), PreconditionError);
  EXPECT_THROW(config_from_json({{"world", {{"bogus", 1}}}}), PreconditionError);
  EXPECT_THROW(config_from_json({{"train", {{"seed", 3}}}}), PreconditionError);
  EXPECT_THROW(config_from_json({{"lambda_grid", {0.0, 1.5}}}), PreconditionError);
  EXPECT_THROW(config_from_json({{"iti_top_k", 9}}), PreconditionError);
  EXPECT_THROW(config_from_json({{"world", {{"p_skew", "high"}}}}), PreconditionError);
  EXPECT_THROW(load_config("/nonexistent/config.json"), PreconditionError);
}

TEST(Config, SeedsDeriveFromMasterSeed) {
  ExperimentConfig a = tiny_config(), b = tiny_config();
  EXPECT_EQ(seed_table(a), seed_table(b));
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.master_seed = 12;
  const auto ta = seed_table(a), tb = seed_table(b);
  for (const auto& [label, seed] : ta) EXPECT_NE(seed, tb.at(label)) << label;
  EXPECT_NE(config_hash(a), config_hash(b));
  const auto r = resolve_seeds(a);
  EXPECT_EQ(r.world.seed, ta.at("world"));
  EXPECT_EQ(r.train.seed, ta.at("dso_train"));
}

TEST(Spearman, KnownValues) {
  EXPECT_NEAR(spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0, 1e-15);
  EXPECT_NEAR(spearman({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0, 1e-15);
  // Average ranks for ties: x ranks 1..4, y ranks 1.5, 1.5, 3, 4.
  EXPECT_NEAR(spearman({1, 2, 3, 4}, {5, 5, 6, 7}), 0.9486832980505138, 1e-12);
  EXPECT_THROW(spearman({1}, {1}), PreconditionError);
}

TEST(Commands, MissingInputsAreReported) {
  const fs::path dir = fresh_dir("dso_harness_missing");
  EXPECT_THROW(cmd_report(dir), MissingArtifact);
  EXPECT_THROW(cmd_train_dso(tiny_config(), dir), MissingArtifact);
  EXPECT_THROW(cmd_sweep(tiny_config(), dir), MissingArtifact);
  const auto v = cmd_verify(tiny_config(), dir);
  EXPECT_EQ(v.exit_code, kOk);
  fs::remove_all(dir);
}

TEST(Commands, CorruptCheckpointIsAFormatError) {
  const fs::path dir = fresh_dir("dso_harness_corrupt");
  const auto c = tiny_config();
  cmd_pretrain(c, dir);
  std::ofstream(dir / "model.bin", std::ios::trunc) << "garbage";
  EXPECT_THROW(cmd_train_dso(c, dir), FormatError);
  fs::remove_all(dir);
}

TEST(Commands, TinyPipelineIsDeterministic) {
  const auto c = tiny_config();
  const fs::path d1 = fresh_dir("dso_harness_run1"), d2 = fresh_dir("dso_harness_run2");
  const auto r1 = cmd_all(c, d1);
  const auto r2 = cmd_all(c, d2);
  EXPECT_EQ(r1.exit_code, r2.exit_code);
  std::size_t compared = 0;
  for (const auto& entry : fs::directory_iterator(d1)) {
    const auto name = entry.path().filename().string();
    ASSERT_TRUE(fs::exists(d2 / name)) << name;
    if (name == "manifest.json") continue;
    EXPECT_EQ(slurp(entry.path()), slurp(d2 / name)) << name;
    ++compared;
  }
  EXPECT_GE(compared, 15u);
  const auto m1 = load_manifest(d1), m2 = load_manifest(d2);
  EXPECT_EQ(m1.artifacts, m2.artifacts);
  EXPECT_EQ(m1.config_hash, m2.config_hash);
  EXPECT_EQ(m1.seeds, m2.seeds);
  EXPECT_EQ(m1.artifacts.at("sweep.csv"), io::hex64(io::file_hash(d1 / "sweep.csv")));

  const auto sweep = csv::Table::read(d1 / "sweep.csv", kSweepSchema, sweep_columns());
  EXPECT_EQ(sweep.size(), c.methods.size() * c.lambda_grid.size());
  for (std::size_t i = 0; i < sweep.size(); ++i) EXPECT_EQ(sweep.cell(i, "bound_ok"), "1");
  const auto sparsity = csv::Table::read(d1 / "sparsity.csv", kSparsitySchema, sparsity_columns());
  EXPECT_EQ(sparsity.size(), c.sparsity_grid.size());

  // Rerunning the report on the same inputs rewrites identical files.
  const std::string report = slurp(d1 / "report.json");
  cmd_report(d1);
  EXPECT_EQ(slurp(d1 / "report.json"), report);
  fs::remove_all(d1);
  fs::remove_all(d2);
}

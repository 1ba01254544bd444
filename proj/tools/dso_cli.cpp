// Command-line driver: dso <command> [options]
//
// Every config field is available as --<section>.<field> (for example
// --world.p_skew 0.7 or --train.batch_size 32); lists are comma separated.
// A --config JSON file is applied after the flags and wins over them.
// Without --run-dir, outputs go to $DSO_OUTPUT_ROOT/seed-<master_seed>
// (default root: ./runs).

#include <cstdlib>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "dso/errors.hpp"
#include "dso/harness.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dso;

namespace {

void flatten(const json& j, const std::string& prefix, std::map<std::string, json>& out) {
  for (const auto& [k, v] : j.items()) {
    const std::string key = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object()) flatten(v, key, out);
    else out[key] = v;
  }
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// Parses a flag value using the type of the default it replaces.
json parse_like(const json& def, const std::string& key, const std::string& text) {
  try {
    if (def.is_array()) {
      json arr = json::array();
      const bool strings = !def.empty() && def[0].is_string();
      for (const auto& item : split_list(text)) {
        if (strings) arr.push_back(item);
        else arr.push_back(std::stod(item));
      }
      return arr;
    }
    if (def.is_boolean()) {
      if (text == "true" || text == "1") return true;
      if (text == "false" || text == "0") return false;
      throw std::invalid_argument(text);
    }
    if (def.is_string()) return text;
    if (def.is_number_unsigned() || def.is_number_integer()) {
      std::size_t pos = 0;
      const unsigned long long v = std::stoull(text, &pos);
      if (pos != text.size()) throw std::invalid_argument(text);
      return v;
    }
    if (text == "null" || text == "none") return nullptr;
    std::size_t pos = 0;
    const double v = std::stod(text, &pos);
    if (pos != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::logic_error&) {
    throw PreconditionError("bad value '" + text + "' for --" + key);
  }
}

void set_path(json& root, const std::string& key, json value) {
  json* node = &root;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) node = &(*node)[parts[i]];
  (*node)[parts.back()] = std::move(value);
}

fs::path default_run_dir(const harness::ExperimentConfig& c) {
  const char* root = std::getenv("DSO_OUTPUT_ROOT");
  return fs::path(root && *root ? root : "runs") / ("seed-" + std::to_string(c.master_seed));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Steering-vector bias mitigation experiments on a synthetic decision task"};
  app.require_subcommand(1);

  std::map<std::string, json> defaults;
  flatten(harness::to_json(harness::ExperimentConfig{}), "", defaults);
  // train.kl_budget defaults to null; accept a number.
  std::map<std::string, std::string> flag_values;
  std::string config_path, run_dir;
  std::vector<std::string> baseline_methods;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file (overrides flags)");
    sub->add_option("--run-dir", run_dir, "Run directory (default $DSO_OUTPUT_ROOT/seed-<seed>)");
    for (const auto& [key, def] : defaults) {
      sub->add_option("--" + key, flag_values[key], "default: " + def.dump())->group("Config fields");
    }
  };

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"pretrain", "Generate the world, pretrain the biased policy, check base gates"},
      {"train-dso", "Train steering vectors against the fairness reward"},
      {"train-baseline", "Build contrastive (caa) and probe-based (iti) interventions"},
      {"sweep", "Evaluate every method over the strength grid"},
      {"sparsity", "Evaluate magnitude-pruned DSO vectors over the keep-fraction grid"},
      {"verify", "Check the reward identity and capability bound on random instances"},
      {"report", "Summarize the sweep into best-strength rows per method"},
      {"all", "Run every command in order"}};
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    subs[name] = app.add_subcommand(name, help);
    add_common(subs[name]);
  }
  subs["train-baseline"]->add_option("--method", baseline_methods, "caa and/or iti (default: both)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? harness::kOk : harness::kUsageError;
  }

  harness::ExperimentConfig config;
  try {
    json overrides = json::object();
    for (const auto& [key, text] : flag_values) {
      if (!text.empty()) set_path(overrides, key, parse_like(defaults.at(key), key, text));
    }
    config = harness::config_from_json(overrides);
    if (!config_path.empty()) config = harness::load_config(config_path, config);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return harness::kUsageError;
  }
  const fs::path dir = run_dir.empty() ? default_run_dir(config) : fs::path(run_dir);

  std::string command;
  for (const auto& [name, sub] : subs) {
    if (sub->parsed()) command = name;
  }
  try {
    harness::CommandResult r;
    if (command == "pretrain") r = harness::cmd_pretrain(config, dir);
    else if (command == "train-dso") r = harness::cmd_train_dso(config, dir);
    else if (command == "train-baseline") {
      std::vector<steer::Method> methods;
      for (const auto& m : baseline_methods) methods.push_back(steer::method_from_string(m));
      if (methods.empty()) methods = {steer::Method::caa, steer::Method::iti};
      r = harness::cmd_train_baseline(config, dir, methods);
    } else if (command == "sweep") r = harness::cmd_sweep(config, dir);
    else if (command == "sparsity") r = harness::cmd_sparsity(config, dir);
    else if (command == "verify") r = harness::cmd_verify(config, dir);
    else if (command == "report") r = harness::cmd_report(dir);
    else r = harness::cmd_all(config, dir);
    for (const auto& m : r.messages) std::cout << m << '\n';
    std::cout << "run directory: " << dir.string() << '\n';
    return r.exit_code;
  } catch (const harness::MissingArtifact& e) {
    std::cerr << "error: " << e.what() << '\n';
    return harness::kMissingInput;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return harness::kMissingInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return harness::kUsageError;
  }
}

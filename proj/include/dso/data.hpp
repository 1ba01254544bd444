#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "dso/world.hpp"

namespace dso::data {

struct WorldConfig {
  std::size_t n_occupations = 10;
  /// Ambiguous DSO training samples per occupation (10 x 60 = 600).
  std::size_t train_per_occupation = 60;
  std::size_t eval_per_occupation = 40;
  std::size_t unambiguous_eval_per_occupation = 40;
  std::size_t pretrain_ambiguous_per_occupation = 100;
  std::size_t pretrain_unambiguous_per_occupation = 200;
  /// Probability that a pretraining label on an ambiguous sample picks the
  /// stereotyped-gender candidate.
  double p_skew = 0.8;
  std::size_t vocab_size = 64;
  std::uint64_t seed = 0;

  friend bool operator==(const WorldConfig&, const WorldConfig&) = default;
};

struct LabeledSample {
  Sample sample;
  std::size_t label = 0;  ///< action (slot) used as pretraining target

  friend bool operator==(const LabeledSample&, const LabeledSample&) = default;
};

struct DatasetBundle {
  WorldConfig config;
  OccupationTable table;
  std::vector<Sample> ambiguous_train;
  std::vector<Sample> ambiguous_eval;
  std::vector<Sample> unambiguous_eval;  ///< capability set
  std::vector<LabeledSample> pretrain;

  friend bool operator==(const DatasetBundle&, const DatasetBundle&) = default;
};

/// Deterministic world for a fixed config. Ambiguous partitions hold exactly
/// `*_per_occupation` samples per occupation, with half of each occupation's
/// samples putting the male candidate in slot A. Every token sequence in the
/// bundle is unique, so splits are disjoint.
DatasetBundle generate(const WorldConfig& config);

/// Fixed-length token sequence; see world.hpp for the layout.
std::vector<std::size_t> encode(const Sample& s);

struct DecodedFields {
  std::size_t occupation;
  std::array<std::size_t, 2> candidate_occupation;
  std::array<Gender, 2> candidate_gender;

  friend bool operator==(const DecodedFields&, const DecodedFields&) = default;
};
/// Recovers the structural fields of an encoded sample.
DecodedFields decode(std::span<const std::size_t> tokens, std::size_t n_occupations);

/// Line-delimited JSON: a header line followed by one sample per line.
void write_jsonl(const DatasetBundle& bundle, const std::filesystem::path& path);

}  // namespace dso::data

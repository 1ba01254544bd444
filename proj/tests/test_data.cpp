#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "dso/data.hpp"
#include "dso/errors.hpp"
#include "json.hpp"

using namespace dso;
using data::WorldConfig;

namespace {

WorldConfig small_world(std::uint64_t seed = 1) {
  WorldConfig c;
  c.n_occupations = 4;
  c.train_per_occupation = 6;
  c.eval_per_occupation = 4;
  c.unambiguous_eval_per_occupation = 8;
  c.pretrain_ambiguous_per_occupation = 10;
  c.pretrain_unambiguous_per_occupation = 10;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(Data, SameSeedGivesIdenticalBundles) {
  EXPECT_EQ(data::generate(small_world(5)), data::generate(small_world(5)));
  EXPECT_NE(data::generate(small_world(5)).ambiguous_train,
            data::generate(small_world(6)).ambiguous_train);
}

TEST(Data, DefaultWorldHas600TrainingSamples) {
  const auto b = data::generate(WorldConfig{});
  EXPECT_EQ(b.ambiguous_train.size(), 600u);
  EXPECT_EQ(b.table.size(), 10u);
}

TEST(Data, AmbiguousPartitionsAreBalancedAndCounterbalanced) {
  const auto b = data::generate(small_world());
  for (const auto* part : {&b.ambiguous_train, &b.ambiguous_eval}) {
    std::map<std::size_t, int> per_occ;
    std::map<std::pair<std::size_t, Gender>, int> slot_a;
    for (const Sample& s : *part) {
      ASSERT_TRUE(s.ambiguous);
      EXPECT_EQ(s.candidate_occupation[0], s.occupation);
      EXPECT_EQ(s.candidate_occupation[1], s.occupation);
      EXPECT_NE(s.candidate_gender[0], s.candidate_gender[1]);
      EXPECT_FALSE(s.gold.has_value());
      ++per_occ[s.occupation];
      ++slot_a[{s.occupation, s.candidate_gender[0]}];
    }
    ASSERT_EQ(per_occ.size(), 4u);
    for (const auto& [o, n] : per_occ) EXPECT_EQ(n, per_occ.begin()->second);
    for (const auto& [k, n] : slot_a) EXPECT_EQ(n, per_occ[k.first] / 2);
  }
}

TEST(Data, UnambiguousSamplesHaveUniqueGoldSpreadOverSlots) {
  const auto b = data::generate(small_world());
  int slot_counts[2] = {0, 0};
  for (const Sample& s : b.unambiguous_eval) {
    ASSERT_FALSE(s.ambiguous);
    ASSERT_TRUE(s.gold.has_value());
    EXPECT_NE(s.candidate_occupation[0], s.candidate_occupation[1]);
    EXPECT_EQ(s.candidate_occupation[*s.gold], s.occupation);
    ++slot_counts[*s.gold];
  }
  EXPECT_EQ(slot_counts[0], slot_counts[1]);
}

TEST(Data, SplitsAreDisjoint) {
  const auto b = data::generate(small_world());
  std::set<std::vector<std::size_t>> train, eval;
  for (const auto& s : b.ambiguous_train) train.insert(data::encode(s));
  for (const auto& s : b.ambiguous_eval) eval.insert(data::encode(s));
  for (const auto& s : b.unambiguous_eval) eval.insert(data::encode(s));
  for (const auto& e : eval) EXPECT_FALSE(train.count(e));
}

TEST(Data, SkewOfOnePicksStereotypedSlotAlways) {
  auto c = small_world();
  c.p_skew = 1.0;
  const auto b = data::generate(c);
  for (const auto& ls : b.pretrain) {
    if (ls.sample.ambiguous) EXPECT_EQ(ls.label, stereotyped_slot(ls.sample, b.table));
    else EXPECT_EQ(ls.label, *ls.sample.gold);
  }
}

TEST(Data, EncodingPutsFieldsAtFixedPositions) {
  const auto b = data::generate(small_world());
  Sample s = b.ambiguous_train.front();
  const auto t1 = data::encode(s);
  ASSERT_EQ(t1.size(), kSequenceLength);
  std::swap(s.candidate_gender[0], s.candidate_gender[1]);
  const auto t2 = data::encode(s);
  for (std::size_t i = 0; i < kSequenceLength; ++i) {
    const bool gender_pos = i == kGenderPos[0] || i == kGenderPos[1];
    EXPECT_EQ(t1[i] != t2[i], gender_pos) << "position " << i;
  }
}

TEST(Data, DecodeRecoversStructuralFields) {
  const auto b = data::generate(small_world());
  for (const auto* part : {&b.ambiguous_train, &b.unambiguous_eval}) {
    for (const Sample& s : *part) {
      const auto d = data::decode(data::encode(s), b.table.size());
      EXPECT_EQ(d.occupation, s.occupation);
      EXPECT_EQ(d.candidate_occupation, s.candidate_occupation);
      EXPECT_EQ(d.candidate_gender, s.candidate_gender);
    }
  }
}

TEST(Data, InvalidCountsThrow) {
  auto c = small_world();
  c.n_occupations = 1;
  EXPECT_THROW(data::generate(c), PreconditionError);
  c = small_world();
  c.train_per_occupation = 0;
  EXPECT_THROW(data::generate(c), PreconditionError);
  c = small_world();
  c.p_skew = 1.5;
  EXPECT_THROW(data::generate(c), PreconditionError);
}

TEST(Data, JsonlHasHeaderAndOneLinePerSample) {
  const auto b = data::generate(small_world());
  const auto path = std::filesystem::temp_directory_path() / "dso_test_dataset.jsonl";
  data::write_jsonl(b, path);
  std::ifstream f(path);
  std::string line;
  std::getline(f, line);
  const auto header = nlohmann::json::parse(line);
  EXPECT_EQ(header["kind"], "header");
  std::size_t n = 0;
  while (std::getline(f, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["tokens"].size(), kSequenceLength);
    ++n;
  }
  EXPECT_EQ(n, b.ambiguous_train.size() + b.ambiguous_eval.size() + b.unambiguous_eval.size() +
                   b.pretrain.size());
  std::filesystem::remove(path);
}

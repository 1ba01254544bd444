#include "dso/data.hpp"

#include <fstream>
#include <set>

#include "json.hpp"

#include "dso/errors.hpp"
#include "dso/rng.hpp"

namespace dso::data {

namespace {

void validate(const WorldConfig& c) {
  if (c.n_occupations < 2) throw PreconditionError("generate: need at least 2 occupations");
  if (c.train_per_occupation < 1 || c.eval_per_occupation < 1 ||
      c.unambiguous_eval_per_occupation < 1) {
    throw PreconditionError("generate: per-occupation counts must be >= 1");
  }
  if (!(c.p_skew >= 0.0 && c.p_skew <= 1.0)) {
    throw PreconditionError("generate: p_skew must lie in [0, 1]");
  }
  if (c.vocab_size < kOccupationTokenBase + c.n_occupations + kNoiseTokens) {
    throw PreconditionError("generate: vocabulary too small for occupations and noise tokens");
  }
}

class Generator {
 public:
  Generator(const WorldConfig& c, Rng rng) : config_(c), rng_(rng) {}

  // Ambiguous samples for one split: both candidates share the queried
  // occupation and have opposite genders. Slot-A gender alternates so each
  // (occupation, slot-A gender) pair is equally frequent; the final shuffle
  // randomises order.
  std::vector<Sample> ambiguous(std::size_t per_occupation, Split split) {
    std::vector<Sample> out;
    for (std::size_t o = 0; o < config_.n_occupations; ++o) {
      for (std::size_t i = 0; i < per_occupation; ++i) {
        Sample s;
        s.occupation = o;
        s.candidate_occupation = {o, o};
        const Gender a = (i % 2 == 0) ? Gender::male : Gender::female;
        s.candidate_gender = {a, opposite(a)};
        s.ambiguous = true;
        s.split = split;
        draw_unique_noise(s);
        out.push_back(s);
      }
    }
    rng_.shuffle(out);
    return out;
  }

  // Unambiguous samples: the queried occupation sits in the gold slot, the
  // other slot holds a different occupation. Gold alternates over slots.
  std::vector<Sample> unambiguous(std::size_t per_occupation, Split split) {
    std::vector<Sample> out;
    const std::size_t n = config_.n_occupations;
    for (std::size_t o = 0; o < n; ++o) {
      for (std::size_t i = 0; i < per_occupation; ++i) {
        Sample s;
        s.occupation = o;
        const std::size_t gold = i % 2;
        const std::size_t other = (o + 1 + rng_.below(n - 1)) % n;
        s.candidate_occupation[gold] = o;
        s.candidate_occupation[1 - gold] = other;
        s.candidate_gender = {rng_.bernoulli(0.5) ? Gender::male : Gender::female,
                              rng_.bernoulli(0.5) ? Gender::male : Gender::female};
        s.ambiguous = false;
        s.gold = gold;
        s.split = split;
        draw_unique_noise(s);
        out.push_back(s);
      }
    }
    rng_.shuffle(out);
    return out;
  }

  Rng& rng() { return rng_; }

 private:
  void draw_unique_noise(Sample& s) {
    const std::size_t base = kOccupationTokenBase + config_.n_occupations;
    const std::size_t span = config_.vocab_size - base;
    do {
      for (auto& t : s.noise) t = base + rng_.below(span);
    } while (!seen_.insert(encode(s)).second);
  }

  WorldConfig config_;
  Rng rng_;
  std::set<std::vector<std::size_t>> seen_;
};

}  // namespace

DatasetBundle generate(const WorldConfig& config) {
  validate(config);
  DatasetBundle b;
  b.config = config;
  b.table = OccupationTable::make_default(config.n_occupations);
  Rng root(config.seed);
  Generator gen(config, root.split("world"));
  b.ambiguous_train = gen.ambiguous(config.train_per_occupation, Split::train);
  b.ambiguous_eval = gen.ambiguous(config.eval_per_occupation, Split::eval);
  b.unambiguous_eval = gen.unambiguous(config.unambiguous_eval_per_occupation, Split::eval);

  Rng label_rng = root.split("pretrain-labels");
  for (const Sample& s : gen.ambiguous(config.pretrain_ambiguous_per_occupation, Split::train)) {
    const std::size_t stereo = stereotyped_slot(s, b.table);
    const std::size_t label = label_rng.bernoulli(config.p_skew) ? stereo : 1 - stereo;
    b.pretrain.push_back({s, label});
  }
  for (const Sample& s :
       gen.unambiguous(config.pretrain_unambiguous_per_occupation, Split::train)) {
    b.pretrain.push_back({s, *s.gold});
  }
  gen.rng().shuffle(b.pretrain);
  return b;
}

std::vector<std::size_t> encode(const Sample& s) {
  std::vector<std::size_t> t(kSequenceLength);
  t[kQueryPos] = kOccupationTokenBase + s.occupation;
  for (std::size_t slot = 0; slot < 2; ++slot) {
    t[kGenderPos[slot]] = kGenderTokenBase + static_cast<std::size_t>(s.candidate_gender[slot]);
    t[kOccupationPos[slot]] = kOccupationTokenBase + s.candidate_occupation[slot];
  }
  for (std::size_t i = 0; i < kNoiseTokens; ++i) t[kNoisePos + i] = s.noise[i];
  return t;
}

DecodedFields decode(std::span<const std::size_t> tokens, std::size_t n_occupations) {
  if (tokens.size() != kSequenceLength) {
    throw FormatError("decode: expected " + std::to_string(kSequenceLength) + " tokens");
  }
  auto occ = [&](std::size_t tok) {
    if (tok < kOccupationTokenBase || tok >= kOccupationTokenBase + n_occupations) {
      throw FormatError("decode: token " + std::to_string(tok) + " is not an occupation");
    }
    return tok - kOccupationTokenBase;
  };
  auto gender = [](std::size_t tok) {
    if (tok > 1) throw FormatError("decode: token " + std::to_string(tok) + " is not a gender");
    return static_cast<Gender>(tok);
  };
  DecodedFields f;
  f.occupation = occ(tokens[kQueryPos]);
  for (std::size_t slot = 0; slot < 2; ++slot) {
    f.candidate_gender[slot] = gender(tokens[kGenderPos[slot]]);
    f.candidate_occupation[slot] = occ(tokens[kOccupationPos[slot]]);
  }
  return f;
}

void write_jsonl(const DatasetBundle& bundle, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  using nlohmann::json;
  const WorldConfig& c = bundle.config;
  json header = {{"kind", "header"},
                 {"format", "dso-dataset/1"},
                 {"n_occupations", c.n_occupations},
                 {"p_skew", c.p_skew},
                 {"seed", c.seed},
                 {"vocab_size", c.vocab_size}};
  json occupations = json::array();
  for (std::size_t o = 0; o < bundle.table.size(); ++o) {
    occupations.push_back(
        {{"name", bundle.table.name(o)}, {"stereotype", to_string(bundle.table.stereotype(o))}});
  }
  header["occupations"] = occupations;
  out << header.dump() << '\n';

  auto line = [&](const Sample& s, const char* partition, const std::size_t* label) {
    json j = {{"kind", "sample"},
              {"partition", partition},
              {"occupation", s.occupation},
              {"candidate_occupations", s.candidate_occupation},
              {"candidate_genders", {to_string(s.candidate_gender[0]), to_string(s.candidate_gender[1])}},
              {"ambiguous", s.ambiguous},
              {"gold", s.gold ? json(*s.gold) : json(nullptr)},
              {"label", label ? json(*label) : json(nullptr)},
              {"tokens", encode(s)}};
    out << j.dump() << '\n';
  };
  for (const auto& s : bundle.ambiguous_train) line(s, "ambiguous_train", nullptr);
  for (const auto& s : bundle.ambiguous_eval) line(s, "ambiguous_eval", nullptr);
  for (const auto& s : bundle.unambiguous_eval) line(s, "unambiguous_eval", nullptr);
  for (const auto& ls : bundle.pretrain) line(ls.sample, "pretrain", &ls.label);
}

}  // namespace dso::data

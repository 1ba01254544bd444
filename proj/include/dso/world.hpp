#pragma once

// Core vocabulary of the toy occupation/gender world shared by the data
// generator, the fairness metrics and the policy.

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace dso {

enum class Gender : unsigned char { male = 0, female = 1 };

constexpr Gender opposite(Gender g) noexcept {
  return g == Gender::male ? Gender::female : Gender::male;
}
std::string_view to_string(Gender g) noexcept;
Gender gender_from_string(std::string_view s);

/// Decisions are single categorical picks between two candidate slots.
inline constexpr std::size_t kSlotA = 0;
inline constexpr std::size_t kSlotB = 1;
inline constexpr std::size_t kNumActions = 2;

/// Scene-noise tokens per sample.
inline constexpr std::size_t kNoiseTokens = 4;

/// Fixed token layout: [query occupation, gender A, occupation A, gender B,
/// occupation B, noise x kNoiseTokens].
inline constexpr std::size_t kSequenceLength = 5 + kNoiseTokens;
inline constexpr std::size_t kQueryPos = 0;
inline constexpr std::array<std::size_t, 2> kGenderPos = {1, 3};
inline constexpr std::array<std::size_t, 2> kOccupationPos = {2, 4};
inline constexpr std::size_t kNoisePos = 5;

/// Token ids: 0 = male, 1 = female, 2..2+n_occ = occupations, the rest noise.
inline constexpr std::size_t kGenderTokenBase = 0;
inline constexpr std::size_t kOccupationTokenBase = 2;

enum class Split : unsigned char { train, eval };

struct Sample {
  std::size_t occupation = 0;                     ///< queried occupation
  std::array<std::size_t, 2> candidate_occupation{};
  std::array<Gender, 2> candidate_gender{};       ///< indexed by slot
  bool ambiguous = true;
  std::optional<std::size_t> gold;                ///< unambiguous only
  std::array<std::size_t, kNoiseTokens> noise{};  ///< token ids
  Split split = Split::train;

  friend bool operator==(const Sample&, const Sample&) = default;
};

/// Occupation -> stereotyped gender. Total over [0, size()).
class OccupationTable {
 public:
  OccupationTable() = default;
  OccupationTable(std::vector<std::string> names, std::vector<Gender> stereotype);

  /// Default toy table: the first half (rounded up) male-stereotyped.
  static OccupationTable make_default(std::size_t n_occupations);

  std::size_t size() const noexcept { return stereotype_.size(); }
  bool contains(std::size_t occupation) const noexcept { return occupation < size(); }
  /// Throws PreconditionError for unknown occupations.
  Gender stereotype(std::size_t occupation) const;
  const std::string& name(std::size_t occupation) const;

  friend bool operator==(const OccupationTable&, const OccupationTable&) = default;

 private:
  std::vector<std::string> names_;
  std::vector<Gender> stereotype_;
};

/// Slot holding the candidate whose gender matches the occupation stereotype
/// (ambiguous samples only).
std::size_t stereotyped_slot(const Sample& s, const OccupationTable& table);

}  // namespace dso

#include "dso/world.hpp"

#include "dso/errors.hpp"

namespace dso {

std::string_view to_string(Gender g) noexcept { return g == Gender::male ? "male" : "female"; }

Gender gender_from_string(std::string_view s) {
  if (s == "male") return Gender::male;
  if (s == "female") return Gender::female;
  throw FormatError("unknown gender '" + std::string(s) + "'");
}

OccupationTable::OccupationTable(std::vector<std::string> names, std::vector<Gender> stereotype)
    : names_(std::move(names)), stereotype_(std::move(stereotype)) {
  if (names_.size() != stereotype_.size()) {
    throw PreconditionError("occupation table: names and stereotypes differ in length");
  }
}

OccupationTable OccupationTable::make_default(std::size_t n_occupations) {
  static const std::vector<std::string> known = {
      "doctor", "engineer",  "pilot",     "carpenter",    "mechanic",
      "nurse",  "secretary", "librarian", "receptionist", "hairdresser"};
  const std::size_t n_male = (n_occupations + 1) / 2;
  std::vector<std::string> names;
  std::vector<Gender> stereotype;
  for (std::size_t i = 0; i < n_occupations; ++i) {
    stereotype.push_back(i < n_male ? Gender::male : Gender::female);
    if (n_occupations == known.size()) {
      names.push_back(known[i]);
    } else {
      names.push_back("occupation_" + std::to_string(i));
    }
  }
  return OccupationTable(std::move(names), std::move(stereotype));
}

Gender OccupationTable::stereotype(std::size_t occupation) const {
  if (!contains(occupation)) {
    throw PreconditionError("occupation " + std::to_string(occupation) +
                            " missing from occupation table");
  }
  return stereotype_[occupation];
}

const std::string& OccupationTable::name(std::size_t occupation) const {
  if (!contains(occupation)) {
    throw PreconditionError("occupation " + std::to_string(occupation) +
                            " missing from occupation table");
  }
  return names_[occupation];
}

std::size_t stereotyped_slot(const Sample& s, const OccupationTable& table) {
  const Gender g = table.stereotype(s.occupation);
  return s.candidate_gender[kSlotA] == g ? kSlotA : kSlotB;
}

}  // namespace dso

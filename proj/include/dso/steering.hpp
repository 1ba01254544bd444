#pragma once

// Linear interventions on LayerNorm outputs:
//
//   h_hat = h + lambda * (a .* h + b)
//
// One (a, b) pair per transformer block. lambda is a runtime knob: the same
// trained vectors are evaluated at any strength in [0, lambda_max].

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

namespace dso::steer {

/// Which construction produced an intervention. Stored in checkpoints.
enum class Method : std::uint32_t { dso = 0, caa = 1, iti = 2 };

std::string_view to_string(Method m) noexcept;
Method method_from_string(std::string_view s);
/// Largest strength swept for a method (1 for DSO and CAA, 30 for ITI).
double lambda_max(Method m) noexcept;

struct InterventionParams {
  std::vector<std::vector<double>> a;  ///< per block, activation width
  std::vector<std::vector<double>> b;
  double lambda = 1.0;
  Method method = Method::dso;

  /// a = b = 0 for every block, so the steered model equals the base model.
  static InterventionParams zeros(std::span<const std::size_t> widths, Method m = Method::dso);

  std::size_t blocks() const noexcept { return a.size(); }
  std::vector<std::size_t> widths() const;
  std::size_t neuron_count() const;
  double l1_a() const;
  double l1_b() const;
  bool all_finite() const;

  friend bool operator==(const InterventionParams&, const InterventionParams&) = default;
};

struct SparsityMask {
  std::vector<std::vector<bool>> keep;  ///< per block, per neuron
  double fraction_retained = 1.0;
};

/// Element-wise h + lambda * (a .* h + b). Throws ShapeError on width mismatch.
std::vector<double> apply(std::span<const double> h, std::span<const double> a,
                          std::span<const double> b, double lambda);

/// Copy of `params` with the strength replaced. Throws for lambda < 0.
InterventionParams scale(const InterventionParams& params, double lambda);

/// Keeps the round(keep_fraction * N) neurons with the largest |a_i| + |b_i|
/// ranked globally across blocks (ties broken by block, then index), and
/// zeroes the rest. Throws for keep_fraction outside (0, 1].
std::pair<InterventionParams, SparsityMask> sparsify(const InterventionParams& params,
                                                     double keep_fraction);

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary layout (little-endian):
///   "DSOI" | u32 version | u32 method | u32 blocks | u32 width[blocks] |
///   f64 lambda | f64 a[block][width]... | f64 b[block][width]... |
///   u64 FNV-1a checksum of all preceding bytes
void save(const InterventionParams& params, const std::filesystem::path& path);
/// Throws VersionError for an unknown version, FormatError for a corrupt or
/// truncated file.
InterventionParams load(const std::filesystem::path& path);

}  // namespace dso::steer

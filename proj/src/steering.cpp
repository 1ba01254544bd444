#include "dso/steering.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "dso/binary_io.hpp"
#include "dso/errors.hpp"

namespace dso::steer {

std::string_view to_string(Method m) noexcept {
  switch (m) {
    case Method::dso: return "dso";
    case Method::caa: return "caa";
    case Method::iti: return "iti";
  }
  return "unknown";
}

Method method_from_string(std::string_view s) {
  if (s == "dso") return Method::dso;
  if (s == "caa") return Method::caa;
  if (s == "iti") return Method::iti;
  throw PreconditionError("unknown steering method '" + std::string(s) + "'");
}

double lambda_max(Method m) noexcept { return m == Method::iti ? 30.0 : 1.0; }

InterventionParams InterventionParams::zeros(std::span<const std::size_t> widths, Method m) {
  InterventionParams p;
  for (std::size_t w : widths) {
    p.a.emplace_back(w, 0.0);
    p.b.emplace_back(w, 0.0);
  }
  p.method = m;
  return p;
}

std::vector<std::size_t> InterventionParams::widths() const {
  std::vector<std::size_t> w;
  for (const auto& v : a) w.push_back(v.size());
  return w;
}

std::size_t InterventionParams::neuron_count() const {
  std::size_t n = 0;
  for (const auto& v : a) n += v.size();
  return n;
}

namespace {
double l1(const std::vector<std::vector<double>>& vs) {
  double s = 0.0;
  for (const auto& v : vs)
    for (double x : v) s += std::abs(x);
  return s;
}
}  // namespace

double InterventionParams::l1_a() const { return l1(a); }
double InterventionParams::l1_b() const { return l1(b); }

bool InterventionParams::all_finite() const {
  auto finite = [](const std::vector<std::vector<double>>& vs) {
    for (const auto& v : vs)
      for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
  };
  return std::isfinite(lambda) && finite(a) && finite(b);
}

std::vector<double> apply(std::span<const double> h, std::span<const double> a,
                          std::span<const double> b, double lambda) {
  if (a.size() != h.size() || b.size() != h.size()) {
    throw ShapeError("apply: widths a=" + std::to_string(a.size()) + ", b=" +
                     std::to_string(b.size()) + " for activation of width " +
                     std::to_string(h.size()));
  }
  std::vector<double> out(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) out[i] = h[i] + lambda * (a[i] * h[i] + b[i]);
  return out;
}

InterventionParams scale(const InterventionParams& params, double lambda) {
  if (!(lambda >= 0.0)) throw PreconditionError("scale: lambda must be non-negative");
  InterventionParams out = params;
  out.lambda = lambda;
  return out;
}

std::pair<InterventionParams, SparsityMask> sparsify(const InterventionParams& params,
                                                     double keep_fraction) {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
    throw PreconditionError("sparsify: keep_fraction must lie in (0, 1]");
  }
  struct Neuron {
    double magnitude;
    std::size_t block, index;
  };
  std::vector<Neuron> ranked;
  for (std::size_t l = 0; l < params.blocks(); ++l) {
    for (std::size_t i = 0; i < params.a[l].size(); ++i) {
      ranked.push_back({std::abs(params.a[l][i]) + std::abs(params.b[l][i]), l, i});
    }
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const Neuron& x, const Neuron& y) { return x.magnitude > y.magnitude; });
  const std::size_t total = ranked.size();
  const auto keep = std::min<std::size_t>(
      total, static_cast<std::size_t>(std::floor(keep_fraction * static_cast<double>(total) + 0.5)));

  SparsityMask mask;
  for (const auto& v : params.a) mask.keep.emplace_back(v.size(), false);
  for (std::size_t r = 0; r < keep; ++r) mask.keep[ranked[r].block][ranked[r].index] = true;
  mask.fraction_retained = total == 0 ? 1.0 : static_cast<double>(keep) / static_cast<double>(total);

  InterventionParams out = params;
  for (std::size_t l = 0; l < out.blocks(); ++l) {
    for (std::size_t i = 0; i < out.a[l].size(); ++i) {
      if (!mask.keep[l][i]) {
        out.a[l][i] = 0.0;
        out.b[l][i] = 0.0;
      }
    }
  }
  return {std::move(out), std::move(mask)};
}

namespace {
constexpr std::uint8_t kMagic[4] = {'D', 'S', 'O', 'I'};
}

void save(const InterventionParams& params, const std::filesystem::path& path) {
  if (params.b.size() != params.a.size()) throw ShapeError("save: a and b block counts differ");
  io::ByteWriter w;
  w.bytes(kMagic);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(params.method));
  w.u32(static_cast<std::uint32_t>(params.blocks()));
  for (std::size_t l = 0; l < params.blocks(); ++l) {
    if (params.b[l].size() != params.a[l].size()) {
      throw ShapeError("save: a and b widths differ at block " + std::to_string(l));
    }
    w.u32(static_cast<std::uint32_t>(params.a[l].size()));
  }
  w.f64(params.lambda);
  for (const auto& v : params.a)
    for (double x : v) w.f64(x);
  for (const auto& v : params.b)
    for (double x : v) w.f64(x);
  w.finish(path);
}

InterventionParams load(const std::filesystem::path& path) {
  io::ByteReader r = io::ByteReader::open(path);
  const auto magic = r.bytes(4);
  if (!std::equal(magic.begin(), magic.end(), std::begin(kMagic))) {
    throw FormatError(path.string() + ": not an intervention checkpoint");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw VersionError(path.string() + ": unsupported intervention checkpoint version " +
                       std::to_string(version) + " (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint32_t method = r.u32();
  if (method > static_cast<std::uint32_t>(Method::iti)) {
    throw FormatError(path.string() + ": unknown method tag " + std::to_string(method));
  }
  InterventionParams p;
  p.method = static_cast<Method>(method);
  const std::uint32_t blocks = r.u32();
  std::vector<std::size_t> widths(blocks);
  for (auto& w : widths) w = r.u32();
  p.lambda = r.f64();
  for (std::size_t w : widths) {
    p.a.emplace_back(w);
    for (double& x : p.a.back()) x = r.f64();
  }
  for (std::size_t w : widths) {
    p.b.emplace_back(w);
    for (double& x : p.b.back()) x = r.f64();
  }
  if (!r.at_end()) throw FormatError(path.string() + ": trailing bytes in checkpoint");
  return p;
}

}  // namespace dso::steer

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "dso/binary_io.hpp"
#include "dso/errors.hpp"
#include "dso/steering.hpp"

using namespace dso;
using steer::InterventionParams;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("dso_steer_" + name);
}

InterventionParams sample_params() {
  InterventionParams p;
  p.a = {{0.5, -1.0, 0.0}, {2.0, 0.25, -0.125}};
  p.b = {{0.1, 0.2, 0.3}, {-0.4, 0.0, 1e-300}};
  p.lambda = 0.75;
  p.method = steer::Method::caa;
  return p;
}

}  // namespace

TEST(Steering, ApplyMatchesFormula) {
  const std::vector<double> h = {1.0, -2.0}, a = {0.5, 1.0}, b = {0.25, -1.0};
  const auto out = steer::apply(h, a, b, 2.0);
  EXPECT_DOUBLE_EQ(out[0], 1.0 + 2.0 * (0.5 * 1.0 + 0.25));
  EXPECT_DOUBLE_EQ(out[1], -2.0 + 2.0 * (1.0 * -2.0 - 1.0));
}

TEST(Steering, ApplyWithZeroLambdaIsIdentity) {
  const std::vector<double> h = {1.5, -0.25, 3.0}, a = {9, 9, 9}, b = {-7, 7, 1};
  EXPECT_EQ(steer::apply(h, a, b, 0.0), h);
}

TEST(Steering, ApplyWidthMismatchThrows) {
  const std::vector<double> h = {1.0, 2.0}, a = {1.0}, b = {1.0, 2.0};
  EXPECT_THROW(steer::apply(h, a, b, 1.0), ShapeError);
}

TEST(Steering, ZerosHaveRequestedWidths) {
  const std::vector<std::size_t> widths = {4, 2};
  const auto p = InterventionParams::zeros(widths);
  EXPECT_EQ(p.widths(), widths);
  EXPECT_EQ(p.neuron_count(), 6u);
  EXPECT_EQ(p.l1_a(), 0.0);
  EXPECT_EQ(p.l1_b(), 0.0);
}

TEST(Steering, ScaleReplacesLambdaOnly) {
  const auto p = sample_params();
  const auto q = steer::scale(p, 3.0);
  EXPECT_EQ(q.lambda, 3.0);
  EXPECT_EQ(q.a, p.a);
  EXPECT_EQ(q.b, p.b);
  EXPECT_THROW(steer::scale(p, -0.1), PreconditionError);
}

TEST(Steering, SparsifyKeepsLargestMagnitude) {
  InterventionParams p;
  p.a = {{3.0, 1.0}};
  p.b = {{0.0, 0.0}};
  const auto [q, mask] = steer::sparsify(p, 0.5);
  EXPECT_EQ(q.a[0], (std::vector<double>{3.0, 0.0}));
  EXPECT_EQ(mask.keep[0], (std::vector<bool>{true, false}));
  EXPECT_DOUBLE_EQ(mask.fraction_retained, 0.5);
}

TEST(Steering, SparsifyRanksGloballyAcrossBlocks) {
  InterventionParams p;
  p.a = {{0.1, 0.2}, {5.0, 0.0}};
  p.b = {{0.0, 0.0}, {0.0, 4.0}};
  const auto [q, mask] = steer::sparsify(p, 0.5);
  EXPECT_EQ(mask.keep[0], (std::vector<bool>{false, false}));
  EXPECT_EQ(mask.keep[1], (std::vector<bool>{true, true}));
  EXPECT_EQ(q.b[1][1], 4.0);
}

TEST(Steering, SparsifyFullFractionIsIdentityAndBadFractionThrows) {
  const auto p = sample_params();
  EXPECT_EQ(steer::sparsify(p, 1.0).first, p);
  EXPECT_THROW(steer::sparsify(p, 0.0), PreconditionError);
  EXPECT_THROW(steer::sparsify(p, 1.5), PreconditionError);
}

TEST(Steering, MethodNamesRoundTrip) {
  for (auto m : {steer::Method::dso, steer::Method::caa, steer::Method::iti}) {
    EXPECT_EQ(steer::method_from_string(steer::to_string(m)), m);
  }
  EXPECT_THROW(steer::method_from_string("prompting"), PreconditionError);
  EXPECT_EQ(steer::lambda_max(steer::Method::iti), 30.0);
  EXPECT_EQ(steer::lambda_max(steer::Method::dso), 1.0);
}

TEST(Steering, CheckpointRoundTripIsBitExact) {
  const auto p = sample_params();
  const auto path = temp_file("roundtrip.bin");
  steer::save(p, path);
  EXPECT_EQ(steer::load(path), p);
  std::filesystem::remove(path);
}

TEST(Steering, TruncatedCheckpointIsRejected) {
  const auto path = temp_file("truncated.bin");
  steer::save(sample_params(), path);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 9);
  EXPECT_THROW(steer::load(path), FormatError);
  std::filesystem::remove(path);
}

TEST(Steering, CorruptedCheckpointIsRejected) {
  const auto path = temp_file("corrupt.bin");
  steer::save(sample_params(), path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(30);
    f.put('\x7f');
  }
  EXPECT_THROW(steer::load(path), FormatError);
  std::filesystem::remove(path);
}

TEST(Steering, UnknownVersionIsRejected) {
  const auto path = temp_file("version.bin");
  io::ByteWriter w;
  const std::uint8_t magic[] = {'D', 'S', 'O', 'I'};
  w.bytes(magic);
  w.u32(steer::kCheckpointVersion + 1);
  w.u32(0);
  w.u32(0);
  w.f64(1.0);
  w.finish(path);
  EXPECT_THROW(steer::load(path), VersionError);
  std::filesystem::remove(path);
}

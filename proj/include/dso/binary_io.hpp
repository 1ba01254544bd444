#pragma once

// Little-endian byte encoding shared by the checkpoint formats. Every file
// ends with an FNV-1a 64-bit checksum of the bytes before it.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace dso::io {

class ByteWriter {
 public:
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  /// Appends the checksum trailer and writes the buffer to `path`.
  void finish(const std::filesystem::path& path);
  const std::vector<std::uint8_t>& buffer() const noexcept { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  /// Reads `path` and verifies the checksum trailer; throws FormatError on a
  /// truncated or corrupt file.
  static ByteReader open(const std::filesystem::path& path);
  explicit ByteReader(std::vector<std::uint8_t> payload) : buf_(std::move(payload)) {}

  std::uint32_t u32();
  std::uint64_t u64();
  double f64() { return std::bit_cast<double>(u64()); }
  std::span<const std::uint8_t> bytes(std::size_t n);
  bool at_end() const noexcept { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const;
  std::vector<std::uint8_t> buf_;
  std::size_t pos_ = 0;
};

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);
std::string hex64(std::uint64_t v);
/// Checksum of a whole file's bytes (empty file -> offset basis).
std::uint64_t file_hash(const std::filesystem::path& path);

}  // namespace dso::io

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qkdnet/errors.hpp"

namespace qkdnet {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

std::string to_hex(ByteView bytes);
Bytes from_hex(std::string_view hex);

inline ByteView as_bytes(std::string_view s) {
  return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

/// Append-only big-endian encoder used by every canonical serialization.
class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  // Octet string with a 32-bit big-endian length prefix.
  void bytes(ByteView v);
  void str(std::string_view v) { bytes(as_bytes(v)); }
  // Fixed-width field, no prefix.
  void raw(ByteView v) { out_.insert(out_.end(), v.begin(), v.end()); }

  const Bytes& data() const& { return out_; }
  Bytes take() && { return std::move(out_); }

 private:
  Bytes out_;
};

/// Bounds-checked decoder; every read past the end throws DecodeError.
class Reader {
 public:
  explicit Reader(ByteView in) : in_(in) {}

  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  Bytes bytes(std::size_t max_len = 1u << 24);
  std::string str(std::size_t max_len = 1u << 16);
  Bytes raw(std::size_t n);

  bool done() const { return pos_ == in_.size(); }
  std::size_t remaining() const { return in_.size() - pos_; }
  void expect_done() const;

 private:
  void need(std::size_t n) const;

  ByteView in_;
  std::size_t pos_ = 0;
};

}  // namespace qkdnet

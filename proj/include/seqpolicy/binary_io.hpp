#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "seqpolicy/error.hpp"

namespace seqpolicy {

inline uint32_t crc32_of(std::span<const uint8_t> bytes) {
  return static_cast<uint32_t>(
      ::crc32(::crc32(0L, Z_NULL, 0), bytes.data(), static_cast<uInt>(bytes.size())));
}

inline uint32_t crc32_of(std::string_view bytes) {
  return crc32_of(std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(bytes.data()), bytes.size()));
}

// Little-endian writer regardless of host byte order.
class ByteWriter {
 public:
  void u8(uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(uint32_t v) { put_le(v); }
  void u64(uint64_t v) { put_le(v); }
  void i32(int32_t v) { put_le(static_cast<uint32_t>(v)); }
  void i64(int64_t v) { put_le(static_cast<uint64_t>(v)); }
  void f32(float v) { put_le(std::bit_cast<uint32_t>(v)); }
  void f64(double v) { put_le(std::bit_cast<uint64_t>(v)); }
  void bytes(std::string_view b) { buf_.append(b); }
  void bytes(std::span<const uint8_t> b) { buf_.append(reinterpret_cast<const char*>(b.data()), b.size()); }
  void str(std::string_view s) {
    require(s.size() <= UINT32_MAX, ErrorCode::kRange, "string too long to serialize");
    u32(static_cast<uint32_t>(s.size()));
    bytes(s);
  }

  const std::string& data() const { return buf_; }
  std::string take() { return std::move(buf_); }
  size_t size() const { return buf_.size(); }

 private:
  template <typename U>
  void put_le(U v) {
    for (size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }

  std::string buf_;
};

// Bounds-checked little-endian reader; running off the end is a truncated
// record.
class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  uint8_t u8() { return static_cast<uint8_t>(take(1)[0]); }
  uint32_t u32() { return get_le<uint32_t>(); }
  uint64_t u64() { return get_le<uint64_t>(); }
  int32_t i32() { return static_cast<int32_t>(get_le<uint32_t>()); }
  int64_t i64() { return static_cast<int64_t>(get_le<uint64_t>()); }
  float f32() { return std::bit_cast<float>(get_le<uint32_t>()); }
  double f64() { return std::bit_cast<double>(get_le<uint64_t>()); }
  std::string_view bytes(size_t n) { return take(n); }
  std::string str() {
    const uint32_t n = u32();
    return std::string(take(n));
  }

  size_t position() const { return pos_; }
  size_t remaining() const { return data_.size() - pos_; }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::string_view take(size_t n) {
    if (!(n <= remaining()))
      fail(ErrorCode::kTruncatedRecord, "record truncated: needed " + std::to_string(n) +
                                            " bytes at offset " + std::to_string(pos_) + ", " +
                                            std::to_string(remaining()) + " left");
    auto out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  template <typename U>
  U get_le() {
    auto b = take(sizeof(U));
    U v = 0;
    for (size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<uint8_t>(b[i])) << (8 * i);
    return v;
  }

  std::string_view data_;
  size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!(in.good())) fail(ErrorCode::kIo, "cannot open '" + path + "'");
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (!(!in.bad())) fail(ErrorCode::kIo, "failed reading '" + path + "'");
  return data;
}

inline void write_file(const std::string& path, std::string_view data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!(out.good())) fail(ErrorCode::kIo, "cannot open '" + path + "' for writing");
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!(out.good())) fail(ErrorCode::kIo, "failed writing '" + path + "'");
}

}  // namespace seqpolicy

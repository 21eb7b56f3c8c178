#pragma once

// Little-endian byte packing shared by the plan, ledger and checkpoint codecs.

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "wtrace/error.hpp"

namespace wtrace::detail {

class ByteWriter {
 public:
  std::vector<std::byte>& buffer() noexcept { return buf_; }
  const std::vector<std::byte>& buffer() const noexcept { return buf_; }

  template <typename T>
  void put(T value) {
    using U = std::make_unsigned_t<T>;
    const auto u = static_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<std::byte>((u >> (8 * i)) & 0xFF));
  }
  void put_f32(float v) { put(std::bit_cast<std::uint32_t>(v)); }
  void put_f32s(std::span<const float> values) {
    for (float v : values) put_f32(v);
  }
  void put_bytes(std::span<const std::byte> bytes) { buf_.insert(buf_.end(), bytes.begin(), bytes.end()); }
  void put_string(const std::string& s) {
    put_bytes(std::as_bytes(std::span(s.data(), s.size())));
  }

 private:
  std::vector<std::byte> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::byte> bytes) : bytes_(bytes) {}

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

  template <typename T>
  T get() {
    need(sizeof(T));
    std::make_unsigned_t<T> u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      u |= static_cast<std::make_unsigned_t<T>>(std::to_integer<unsigned>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(u);
  }
  float get_f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
  void get_f32s(std::span<float> out) {
    need(out.size() * 4);
    for (auto& v : out) v = get_f32();
  }
  std::span<const std::byte> get_bytes(std::size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (n > remaining()) {
      throw FormatError("truncated data at offset " + std::to_string(pos_) + ": need " + std::to_string(n) +
                        " bytes, have " + std::to_string(remaining()));
    }
  }

  std::span<const std::byte> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace wtrace::detail

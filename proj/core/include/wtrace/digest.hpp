#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace wtrace {

/// Lowercase hex SHA-256 of a byte range.
std::string sha256_hex(std::span<const std::byte> bytes);
std::string sha256_hex(std::string_view text);

std::uint32_t crc32(std::span<const std::byte> bytes);

}  // namespace wtrace

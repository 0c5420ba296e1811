#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace ipx {

/// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view data);

/// Continues `previous` (the CRC of the preceding bytes, 0 for none).
std::uint32_t crc32(std::span<const std::uint8_t> data, std::uint32_t previous = 0);

}  // namespace ipx

#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>

namespace zskd {

// CRC-32 (IEEE 802.3 polynomial, reflected). Used as the integrity trailer of
// checkpoint and transfer-set files.
uint32_t crc32(const void* data, size_t len, uint32_t seed = 0);

// FNV-1a 64-bit. Used for provenance hashes (parameter blobs, config text).
uint64_t fnv1a64(const void* data, size_t len, uint64_t seed = 0xcbf29ce484222325ull);
uint64_t fnv1a64(std::string_view text);

}  // namespace zskd

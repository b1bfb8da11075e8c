#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ttb {

// Raised for user-facing configuration problems; the CLI maps it to exit code 2.
class config_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class shape_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class numeric_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class io_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Hashing

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ull;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ull;

inline std::uint64_t fnv1a64(const void* bytes, std::size_t n,
                             std::uint64_t h = kFnvOffset) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = kFnvOffset) {
  return fnv1a64(s.data(), s.size(), h);
}

std::string to_hex(std::uint64_t v);

// Standard CRC-32 (IEEE, reflected, poly 0xEDB88320).
std::uint32_t crc32(const void* bytes, std::size_t n, std::uint32_t seed = 0);

// ---------------------------------------------------------------------------
// Little-endian scalar IO helpers (the model file format is little-endian).

void put_u16le(std::string& out, std::uint16_t v);
void put_u32le(std::string& out, std::uint32_t v);
std::uint16_t get_u16le(const unsigned char* p);
std::uint32_t get_u32le(const unsigned char* p);

// ---------------------------------------------------------------------------
// Files

std::string read_file(const std::filesystem::path& path);

// Writes via a sibling temp file then renames, so readers never observe a
// partially written file.
void atomic_write_file(const std::filesystem::path& path,
                       std::string_view content);

double wall_seconds();
double process_cpu_seconds();
std::int64_t process_peak_rss_bytes();

}  // namespace ttb

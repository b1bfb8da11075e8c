#include "ttabench/alloc.hpp"

#include "ttabench/util.hpp"

#include <cstring>
#include <ctime>
#include <fstream>
#include <random>
#include <sys/resource.h>

namespace ttb {

namespace {

std::shared_ptr<AllocStats>& global_stats() {
  static std::shared_ptr<AllocStats> g = std::make_shared<AllocStats>();
  return g;
}

thread_local std::shared_ptr<AllocStats> t_active;

}  // namespace

std::shared_ptr<AllocStats> active_alloc_stats() {
  return t_active ? t_active : global_stats();
}

MemoryScope::MemoryScope(std::shared_ptr<AllocStats> stats) : prev_(t_active) {
  t_active = std::move(stats);
}

MemoryScope::~MemoryScope() { t_active = std::move(prev_); }

AllocSnapshot alloc_stats() {
  const auto s = active_alloc_stats();
  AllocSnapshot out;
  out.live_bytes = s->live_bytes.load(std::memory_order_relaxed);
  out.peak_bytes = s->peak_bytes.load(std::memory_order_relaxed);
  out.alloc_events = s->alloc_events.load(std::memory_order_relaxed);
  return out;
}

void reset_peak() { active_alloc_stats()->reset_peak(); }

Buffer::Buffer(std::size_t n)
    : p_(new float[n]()), n_(n), stats_(active_alloc_stats()) {
  stats_->on_alloc(bytes());
}

Buffer::~Buffer() { stats_->on_free(bytes()); }

// ---------------------------------------------------------------------------
// util.cpp-ish pieces that need platform headers live here to keep the
// source list short.

std::string to_hex(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

std::uint32_t crc32(const void* bytes, std::size_t n, std::uint32_t seed) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) {
        c = (c & 1) ? (0xEDB88320u ^ (c >> 1)) : (c >> 1);
      }
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t c = seed ^ 0xFFFFFFFFu;
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) {
    c = table[(c ^ p[i]) & 0xFF] ^ (c >> 8);
  }
  return c ^ 0xFFFFFFFFu;
}

void put_u16le(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
}

void put_u32le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) {
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
}

std::uint16_t get_u16le(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

std::uint32_t get_u32le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) |
         (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open file: " + path.string());
  std::string content((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
  if (in.bad()) throw io_error("read failed: " + path.string());
  return content;
}

void atomic_write_file(const std::filesystem::path& path,
                       std::string_view content) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot open for write: " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw io_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

double wall_seconds() {
  timespec ts{};
  clock_gettime(CLOCK_MONOTONIC, &ts);
  return static_cast<double>(ts.tv_sec) + 1e-9 * static_cast<double>(ts.tv_nsec);
}

double process_cpu_seconds() {
  timespec ts{};
  clock_gettime(CLOCK_PROCESS_CPUTIME_ID, &ts);
  return static_cast<double>(ts.tv_sec) + 1e-9 * static_cast<double>(ts.tv_nsec);
}

std::int64_t process_peak_rss_bytes() {
  rusage ru{};
  if (getrusage(RUSAGE_SELF, &ru) != 0) return 0;
  return static_cast<std::int64_t>(ru.ru_maxrss) * 1024;  // linux: KiB
}

}  // namespace ttb

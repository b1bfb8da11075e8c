#pragma once

#include <atomic>
#include <cstdint>
#include <memory>

namespace ttb {

// Instrumented tensor allocator counters. Every Buffer registers its bytes
// against the AllocStats that was active on its allocating thread, and
// deregisters on destruction, so live_bytes/peak_bytes track exactly the
// engine's tensor storage.
struct AllocStats {
  std::atomic<std::int64_t> live_bytes{0};
  std::atomic<std::int64_t> peak_bytes{0};
  std::atomic<std::int64_t> alloc_events{0};

  void on_alloc(std::int64_t n) {
    alloc_events.fetch_add(1, std::memory_order_relaxed);
    const std::int64_t live =
        live_bytes.fetch_add(n, std::memory_order_relaxed) + n;
    std::int64_t peak = peak_bytes.load(std::memory_order_relaxed);
    while (live > peak &&
           !peak_bytes.compare_exchange_weak(peak, live,
                                             std::memory_order_relaxed)) {
    }
  }

  void on_free(std::int64_t n) {
    live_bytes.fetch_sub(n, std::memory_order_relaxed);
  }

  // Peak resets to the current live level, never below it.
  void reset_peak() {
    peak_bytes.store(live_bytes.load(std::memory_order_relaxed),
                     std::memory_order_relaxed);
  }

  void reset_all() {
    live_bytes.store(0, std::memory_order_relaxed);
    peak_bytes.store(0, std::memory_order_relaxed);
    alloc_events.store(0, std::memory_order_relaxed);
  }
};

// Plain snapshot, safe to copy around and serialize.
struct AllocSnapshot {
  std::int64_t live_bytes = 0;
  std::int64_t peak_bytes = 0;
  std::int64_t alloc_events = 0;
};

// The active counter instance is per-thread so that distinct runs executing
// on distinct threads keep isolated counters.
std::shared_ptr<AllocStats> active_alloc_stats();

class MemoryScope {
 public:
  explicit MemoryScope(std::shared_ptr<AllocStats> stats);
  ~MemoryScope();
  MemoryScope(const MemoryScope&) = delete;
  MemoryScope& operator=(const MemoryScope&) = delete;

 private:
  std::shared_ptr<AllocStats> prev_;
};

AllocSnapshot alloc_stats();
void reset_peak();

// Counted float storage. Zero-initialized.
class Buffer {
 public:
  explicit Buffer(std::size_t n);
  ~Buffer();
  Buffer(const Buffer&) = delete;
  Buffer& operator=(const Buffer&) = delete;

  float* data() { return p_.get(); }
  const float* data() const { return p_.get(); }
  std::size_t size() const { return n_; }
  std::int64_t bytes() const { return static_cast<std::int64_t>(n_ * 4); }

 private:
  std::unique_ptr<float[]> p_;
  std::size_t n_;
  std::shared_ptr<AllocStats> stats_;
};

}  // namespace ttb

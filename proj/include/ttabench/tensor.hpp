#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ttabench/alloc.hpp"
#include "ttabench/util.hpp"

namespace ttb {

using Shape = std::vector<int>;

std::int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major float32 tensor. Copies share storage (and gradient);
// clone() makes a deep copy. Gradients live next to the data so every view
// of the same storage observes accumulation during backward.
class Tensor {
 public:
  Tensor() = default;
  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, float value);
  static Tensor from_data(const Shape& shape, const std::vector<float>& data);
  static Tensor scalar(float value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int dim(int i) const { return shape().at(static_cast<std::size_t>(i)); }
  int ndim() const { return static_cast<int>(shape().size()); }
  std::int64_t numel() const;

  float* data();
  const float* data() const;
  std::span<float> span() { return {data(), static_cast<std::size_t>(numel())}; }
  std::span<const float> span() const {
    return {data(), static_cast<std::size_t>(numel())};
  }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool v);

  bool has_grad() const;
  // Allocates a zero gradient buffer if absent.
  void ensure_grad();
  float* grad();
  const float* grad() const;
  void zero_grad();
  void drop_grad();
  Tensor grad_tensor() const;  // same-shape tensor viewing the grad buffer

  Tensor clone() const;
  float item() const;  // scalar tensors only
  bool same_storage(const Tensor& other) const;

  bool all_finite() const;
  std::uint64_t content_hash() const;

 private:
  struct Impl {
    Shape shape;
    std::shared_ptr<Buffer> data;
    std::shared_ptr<Buffer> grad;  // null until needed
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

// ---------------------------------------------------------------------------
// Op bookkeeping

enum class OpKind {
  kMatmul,
  kConv2d,
  kRelu,
  kMaxPool,
  kGlobalAvgPool,
  kBatchNorm,
  kLinearBiasAdd,
  kSoftmax,
  kLogSoftmax,
  kElementwiseAdd,
  kScalarScale,
  kMeanEntropy,
  kCrossEntropyMean,
  kMeanSoftmaxEntropy,
  kCount
};

const char* op_kind_name(OpKind k);

struct OpCounters {
  std::array<std::int64_t, static_cast<std::size_t>(OpKind::kCount)> forward{};
  std::int64_t backward_passes = 0;
  std::int64_t tape_nodes = 0;
  // Batch sizes seen by model-level forward calls, adapt mode only.
  std::map<int, std::int64_t> adapt_forward_batches;

  std::int64_t forward_total() const;
  void reset();
};

OpCounters& active_op_counters();

class CounterScope {
 public:
  explicit CounterScope(OpCounters& counters);
  ~CounterScope();
  CounterScope(const CounterScope&) = delete;
  CounterScope& operator=(const CounterScope&) = delete;

 private:
  OpCounters* prev_;
};

// ---------------------------------------------------------------------------
// Tape

// Reverse-mode tape. Nodes are recorded in forward order; backward_from
// visits them exactly once in reverse and then consumes the tape.
class Tape {
 public:
  void record(std::function<void()> backward_fn);
  void backward_from(Tensor& loss);
  // Backward from an arbitrary output with an explicit output gradient.
  void backward_seeded(Tensor& out, const std::vector<float>& grad_out);
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

 private:
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
};

Tape* active_tape();

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

// backward(loss, tape): loss must be a scalar recorded on `tape`.
void backward(Tensor& loss, Tape& tape);

}  // namespace ttb

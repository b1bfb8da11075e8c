#include "ttabench/tensor.hpp"

#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace ttb {

std::int64_t numel_of(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw shape_error("non-positive extent in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor Tensor::zeros(const Shape& shape) {
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->shape = shape;
  t.impl_->data = std::make_shared<Buffer>(
      static_cast<std::size_t>(numel_of(shape)));
  return t;
}

Tensor Tensor::full(const Shape& shape, float value) {
  Tensor t = zeros(shape);
  std::fill_n(t.data(), t.numel(), value);
  return t;
}

Tensor Tensor::from_data(const Shape& shape, const std::vector<float>& data) {
  Tensor t = zeros(shape);
  if (static_cast<std::int64_t>(data.size()) != t.numel()) {
    throw shape_error("data length " + std::to_string(data.size()) +
                      " does not match shape " + shape_str(shape));
  }
  std::memcpy(t.data(), data.data(), data.size() * sizeof(float));
  return t;
}

Tensor Tensor::scalar(float value) { return full({1}, value); }

const Shape& Tensor::shape() const {
  if (!impl_) throw shape_error("undefined tensor");
  return impl_->shape;
}

std::int64_t Tensor::numel() const {
  return static_cast<std::int64_t>(impl_->data->size());
}

float* Tensor::data() { return impl_->data->data(); }
const float* Tensor::data() const { return impl_->data->data(); }

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool v) {
  impl_->requires_grad = v;
  return *this;
}

bool Tensor::has_grad() const { return impl_ && impl_->grad != nullptr; }

void Tensor::ensure_grad() {
  if (!impl_->grad) {
    impl_->grad = std::make_shared<Buffer>(impl_->data->size());
  }
}

float* Tensor::grad() {
  ensure_grad();
  return impl_->grad->data();
}

const float* Tensor::grad() const {
  if (!impl_->grad) throw shape_error("tensor has no gradient");
  return impl_->grad->data();
}

void Tensor::zero_grad() {
  if (impl_->grad) {
    std::fill_n(impl_->grad->data(), impl_->grad->size(), 0.0f);
  }
}

void Tensor::drop_grad() { impl_->grad.reset(); }

Tensor Tensor::grad_tensor() const {
  if (!impl_->grad) throw shape_error("tensor has no gradient");
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->shape = impl_->shape;
  t.impl_->data = impl_->grad;
  return t;
}

Tensor Tensor::clone() const {
  Tensor t = zeros(shape());
  std::memcpy(t.data(), data(), static_cast<std::size_t>(numel()) * 4);
  t.impl_->requires_grad = impl_->requires_grad;
  return t;
}

float Tensor::item() const {
  if (numel() != 1) {
    throw shape_error("item() on non-scalar tensor " + shape_str(shape()));
  }
  return data()[0];
}

bool Tensor::same_storage(const Tensor& other) const {
  return impl_ && other.impl_ && impl_->data == other.impl_->data;
}

bool Tensor::all_finite() const {
  const float* p = data();
  const std::int64_t n = numel();
  for (std::int64_t i = 0; i < n; ++i) {
    if (!std::isfinite(p[i])) return false;
  }
  return true;
}

std::uint64_t Tensor::content_hash() const {
  return fnv1a64(data(), static_cast<std::size_t>(numel()) * 4);
}

// ---------------------------------------------------------------------------
// Counters

const char* op_kind_name(OpKind k) {
  switch (k) {
    case OpKind::kMatmul: return "matmul";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kRelu: return "relu";
    case OpKind::kMaxPool: return "max_pool";
    case OpKind::kGlobalAvgPool: return "global_avg_pool";
    case OpKind::kBatchNorm: return "batch_norm";
    case OpKind::kLinearBiasAdd: return "linear_bias_add";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLogSoftmax: return "log_softmax";
    case OpKind::kElementwiseAdd: return "elementwise_add";
    case OpKind::kScalarScale: return "scalar_scale";
    case OpKind::kMeanEntropy: return "mean_entropy";
    case OpKind::kCrossEntropyMean: return "cross_entropy_mean";
    case OpKind::kMeanSoftmaxEntropy: return "mean_softmax_entropy";
    case OpKind::kCount: break;
  }
  return "?";
}

std::int64_t OpCounters::forward_total() const {
  return std::accumulate(forward.begin(), forward.end(), std::int64_t{0});
}

void OpCounters::reset() {
  forward.fill(0);
  backward_passes = 0;
  tape_nodes = 0;
  adapt_forward_batches.clear();
}

namespace {
OpCounters g_counters;
thread_local OpCounters* t_counters = nullptr;
}  // namespace

OpCounters& active_op_counters() {
  return t_counters ? *t_counters : g_counters;
}

CounterScope::CounterScope(OpCounters& counters) : prev_(t_counters) {
  t_counters = &counters;
}

CounterScope::~CounterScope() { t_counters = prev_; }

// ---------------------------------------------------------------------------
// Tape

namespace {
thread_local Tape* t_tape = nullptr;
}  // namespace

Tape* active_tape() { return t_tape; }

TapeScope::TapeScope(Tape& tape) : prev_(t_tape) { t_tape = &tape; }

TapeScope::~TapeScope() { t_tape = prev_; }

void Tape::record(std::function<void()> backward_fn) {
  if (consumed_) throw numeric_error("recording on a consumed tape");
  nodes_.push_back(std::move(backward_fn));
  active_op_counters().tape_nodes += 1;
}

void Tape::backward_from(Tensor& loss) {
  if (consumed_) throw numeric_error("tape already consumed");
  loss.ensure_grad();
  loss.grad()[0] = 1.0f;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    (*it)();
  }
  consumed_ = true;
  nodes_.clear();
  active_op_counters().backward_passes += 1;
}

void Tape::backward_seeded(Tensor& out, const std::vector<float>& grad_out) {
  if (consumed_) throw numeric_error("tape already consumed");
  if (static_cast<std::int64_t>(grad_out.size()) != out.numel()) {
    throw shape_error("seeded gradient size mismatch");
  }
  out.ensure_grad();
  std::memcpy(out.grad(), grad_out.data(), grad_out.size() * sizeof(float));
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    (*it)();
  }
  consumed_ = true;
  nodes_.clear();
  active_op_counters().backward_passes += 1;
}

void backward(Tensor& loss, Tape& tape) {
  if (loss.numel() != 1) {
    throw numeric_error("backward requires a scalar loss, got shape " +
                        shape_str(loss.shape()));
  }
  tape.backward_from(loss);
}

}  // namespace ttb

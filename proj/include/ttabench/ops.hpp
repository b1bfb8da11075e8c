#pragma once

#include <optional>
#include <span>
#include <vector>

#include "ttabench/tensor.hpp"

namespace ttb {

// Forward operators over the fixed set the engine supports. Every function
// records a backward node on the active tape when an input requires grad.

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false,
              bool trans_b = false);

// x: [B, Cin, H, W], w: [Cout, Cin, kh, kw]
Tensor conv2d(const Tensor& x, const Tensor& w, int stride = 1, int pad = 1);

Tensor relu(const Tensor& x);

// kernel k, stride s, no padding; x: [B, C, H, W]
Tensor max_pool(const Tensor& x, int k = 2, int s = 2);

// [B, C, H, W] -> [B, C]
Tensor global_avg_pool(const Tensor& x);

enum class NormMode {
  kBatchStats,     // normalize by current-batch statistics
  kRunningStats,   // normalize by stored running statistics (pure)
  kInstanceAware,  // per-sample statistics corrected toward running stats
};

struct BatchNormOpts {
  NormMode mode = NormMode::kRunningStats;
  float momentum = 0.1f;  // running-stats EMA factor in kBatchStats mode
  float eps = 1e-5f;
  bool update_running = true;  // only honored in kBatchStats mode
  float iabn_alpha = 4.0f;     // soft-shrink width in kInstanceAware mode
};

// Per-channel batch normalization over (batch, spatial) axes.
// running_mean/running_var are read in kRunningStats/kInstanceAware modes and
// updated in place in kBatchStats mode when update_running is set.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var,
                  const BatchNormOpts& opts);

// x: [B, C] + bias[C]
Tensor linear_bias_add(const Tensor& x, const Tensor& bias);

Tensor softmax(const Tensor& logits);
Tensor log_softmax(const Tensor& logits);

Tensor elementwise_add(const Tensor& a, const Tensor& b);
Tensor scalar_scale(const Tensor& a, float s);

// (1/B) sum_b H(softmax(logits_b)), computed via log-softmax.
Tensor mean_entropy(const Tensor& logits);

// Weighted variant used by entropy filtering: sum_b w_b H_b / sum_b w_b.
// Weights are treated as constants. sum of weights must be positive.
Tensor mean_entropy_weighted(const Tensor& logits,
                             const std::vector<float>& row_weights);

// (1/B) sum_b -log softmax(logits_b)[labels_b], with optional label smoothing.
Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& labels,
                          float label_smoothing = 0.0f);

// H(mean_b softmax(logits_b)): entropy of the batch-averaged distribution.
Tensor mean_softmax_entropy(const Tensor& logits);

// Non-differentiable helpers.
std::vector<float> row_entropies(const Tensor& logits);
std::vector<int> argmax_rows(const Tensor& logits);
float soft_shrink(float x, float lambda);

// ---------------------------------------------------------------------------
// Generic dispatcher: the documented operation surface. Validates input
// finiteness and shape contracts, then forwards to the typed operator.
struct OpCtx {
  bool trans_a = false;
  bool trans_b = false;
  int stride = 1;
  int pad = 1;
  int kernel = 2;
  float scale = 1.0f;
  BatchNormOpts bn{};
};

Tensor forward_op(OpKind kind, std::span<Tensor> inputs, const OpCtx& ctx);

// Raw GEMM used by the operators; exposed for the test suite's
// reference-vs-optimized comparisons.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
          const float* a, int lda, const float* b, int ldb, float beta,
          float* c, int ldc);

}  // namespace ttb

#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ttabench/dataset.hpp"
#include "ttabench/model.hpp"
#include "ttabench/rng.hpp"

namespace ttb {

// Raised by a method when a run must be aborted (e.g. non-finite loss); the
// periodic-adaptation driver records the failure and falls back to theta_S.
class method_failure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Optimizer { kSgd, kSgdMomentum, kAdam };

struct TentCfg {};

struct ShotCfg {
  float beta = 0.3f;   // pseudo-label cross-entropy weight
  int pl_rounds = 2;   // nearest-centroid refinement rounds per epoch
};

struct SarCfg {
  float e0_factor = 0.4f;      // entropy filter at e0_factor * ln C
  float rho = 0.05f;           // sharpness-aware perturbation radius
  float reset_factor = 0.2f;   // model recovery at reset_factor * ln C
};

struct NoteCfg {
  float alpha = 4.0f;          // instance-aware soft-shrink width
  int reservoir = 64;          // prediction-balanced reservoir capacity
  float stats_momentum = 0.01f;
  bool affine_tune = false;    // optional entropy fine-tune of norm_affine
};

struct T3aCfg {
  int support_m = 20;  // support entries kept per class
};

struct AdaptConfig {
  int batch_size = 64;
  int epochs = 1;
  Optimizer optimizer = Optimizer::kSgdMomentum;
  float lr = 1e-3f;
  float momentum = 0.9f;
  float bn_momentum = 0.1f;
  std::uint64_t seed = 0;
  std::filesystem::path storage_dir;  // model save/reload location

  TentCfg tent;
  ShotCfg shot;
  SarCfg sar;
  NoteCfg note;
  T3aCfg t3a;
};

// Method-specific state surfaced for inspection and tests.
struct T3aSupportEntry {
  std::vector<float> embedding;
  float entropy = 0.0f;
};

struct MethodState {
  // T3A: per-class support lists, entropy-ascending.
  std::vector<std::vector<T3aSupportEntry>> t3a_supports;
  // NOTE: reservoir of (delta position, predicted class).
  std::vector<std::pair<int, int>> note_reservoir;
  // SAR: running loss average and reset count.
  float sar_loss_avg = 0.0f;
  int sar_resets = 0;
  // SHOT: final centroids [C x F], empty when unused.
  Tensor shot_centroids;
};

const std::vector<std::string>& method_registry();  // none, tent, sar, ...
bool is_known_method(const std::string& id);

// Prediction-balanced reservoir (NOTE): bounded by capacity; when full, an
// insertion evicts a random member of the majority predicted class.
class BalancedReservoir {
 public:
  BalancedReservoir(int capacity, std::uint64_t seed);

  void insert(int item, int predicted_class);
  const std::vector<std::pair<int, int>>& items() const { return items_; }
  int size() const { return static_cast<int>(items_.size()); }
  // max - min per-class count over classes present in the reservoir
  int count_spread() const;

 private:
  int capacity_;
  Rng rng_;
  std::vector<std::pair<int, int>> items_;  // (item, predicted class)
};

// Per-batch callback: positions index into delta_t; the model reference is
// the current (post-update) adaptation state, evaluate-only.
using BatchHook =
    std::function<void(int batch_index, const std::vector<int>& positions,
                       const Model& current)>;

// A: theta_S x Delta_T -> theta_Delta_T (end-of-adaptation model, in memory).
Model adapt_tent(const Model& model, const AdaptationSet& delta_t,
                 const AdaptConfig& cfg);
Model adapt_shot(const Model& model, const AdaptationSet& delta_t,
                 const AdaptConfig& cfg);
Model adapt_sar(const Model& model, const AdaptationSet& delta_t,
                const AdaptConfig& cfg, MethodState* state = nullptr);
Model adapt_note(const Model& model, const AdaptationSet& delta_t,
                 const AdaptConfig& cfg, MethodState* state = nullptr);
Model adapt_t3a(const Model& model, const AdaptationSet& delta_t,
                const AdaptConfig& cfg, MethodState* state = nullptr);

// Dispatch by method id with an optional per-batch hook.
Model adapt_method(const std::string& method, const Model& model,
                   const AdaptationSet& delta_t, const AdaptConfig& cfg,
                   const BatchHook& hook = nullptr,
                   MethodState* state = nullptr);

struct AdaptOutcome {
  Model model;          // reloaded from storage; frozen thereafter
  bool failed = false;  // method aborted; model is theta_S reloaded
  std::string failure_message;
  std::filesystem::path model_path;
  int batches = 0;
  MethodState state;
};

// Periodic-adaptation protocol: adapt on delta_t, save the end-of-adaptation
// model to storage, reload it, and return the reloaded model.
AdaptOutcome run_periodic_adaptation(const std::string& method,
                                     const Model& model,
                                     const ScenarioSplit& split,
                                     const AdaptConfig& cfg,
                                     const BatchHook& hook = nullptr);

}  // namespace ttb

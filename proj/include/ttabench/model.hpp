#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ttabench/ops.hpp"
#include "ttabench/tensor.hpp"

namespace ttb {

struct LabeledDataset;

// Parameter group names. Every parameter belongs to exactly one group.
inline constexpr const char* kGroupNormAffine = "norm_affine";
inline constexpr const char* kGroupNormStats = "norm_stats";
inline constexpr const char* kGroupFeatureWeights = "feature_weights";
inline constexpr const char* kGroupClassifierHead = "classifier_head";

enum class ForwardMode { kEval, kAdapt, kInstanceAware };

struct ForwardOpts {
  ForwardMode mode = ForwardMode::kEval;
  float bn_momentum = 0.1f;        // running-stats EMA in adapt mode
  bool update_running = true;      // adapt mode only
  float iabn_alpha = 4.0f;         // instance-aware mode only
};

struct ForwardOutput {
  Tensor logits;      // [B, C]
  Tensor embeddings;  // [B, F] penultimate features
};

class Model {
 public:
  std::string arch_id;
  int class_count = 0;
  int feature_dim = 0;

  Tensor& param(const std::string& name);
  const Tensor& param(const std::string& name) const;
  bool has_param(const std::string& name) const;
  void add_param(const std::string& name, Tensor t, const std::string& group);

  const std::vector<std::string>& param_order() const { return order_; }
  const std::map<std::string, std::vector<std::string>>& groups() const {
    return groups_;
  }
  std::vector<std::string> group_params(const std::string& group) const;

  Model clone() const;

  // Content digest over architecture metadata and all parameter bytes
  // (including running statistics).
  std::string digest() const;

 private:
  std::map<std::string, Tensor> params_;
  std::vector<std::string> order_;
  std::map<std::string, std::vector<std::string>> groups_;
};

// smallcnn-32: 3x[conv3x3 -> batch-norm -> relu -> max-pool 2x2] with widths
// (32, 64, 128), global average pool, linear head 128 -> C.
Model build_model(const std::string& arch_id, int class_count,
                  std::uint64_t seed);

ForwardOutput forward(const Model& model, const Tensor& batch,
                      const ForwardOpts& opts);

// Convenience: frozen inference.
ForwardOutput forward_eval(const Model& model, const Tensor& batch);

struct PretrainOpts {
  int epochs = 15;
  float lr = 0.05f;
  float momentum = 0.9f;
  int batch_size = 64;
  float label_smoothing = 0.0f;
  std::uint64_t seed = 0;
};

struct PretrainLog {
  std::vector<double> epoch_losses;
};

// Cross-entropy SGD (momentum) source training on a clean dataset.
// Returns the trained copy; the input model is not modified.
Model pretrain_source(const Model& model, const LabeledDataset& train,
                      const PretrainOpts& opts, PretrainLog* log = nullptr);

// Model file: magic "BOTA", u16 version, u32 header length, JSON header
// (arch, shapes, groups), raw little-endian f32 payload, trailing CRC32.
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

std::string serialize_model(const Model& model);
Model deserialize_model(const std::string& bytes);

}  // namespace ttb

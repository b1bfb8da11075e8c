#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ttabench/corruptions.hpp"
#include "ttabench/tensor.hpp"

namespace ttb {

struct LabeledDataset {
  Tensor images;                         // [N, 3, 32, 32] in [0, 1]
  std::vector<int> labels;               // [N), values in [0, class_count)
  int class_count = 0;
  std::vector<int> domain_ids;           // per-sample index into `domains`
  std::vector<std::string> domains;      // domain tag strings

  int size() const { return static_cast<int>(labels.size()); }
  std::vector<int> category_set() const;   // distinct labels present
  std::vector<std::string> domain_set() const;

  Tensor image(int i) const;  // [3, 32, 32] copy
  Tensor gather_images(const std::vector<int>& indices) const;
  std::vector<int> gather_labels(const std::vector<int>& indices) const;

  std::string digest() const;
  void validate() const;
};

namespace detail {
struct LabelOracleKey;  // eval-protocol's key to sealed labels
}

// Unlabeled view over a dataset: adaptation code sees images only. Labels are
// reachable solely via the eval-protocol oracle (detail::LabelOracleKey).
class AdaptationSet {
 public:
  AdaptationSet() = default;
  AdaptationSet(std::shared_ptr<const LabeledDataset> base,
                std::vector<int> indices);

  int size() const { return static_cast<int>(indices_.size()); }
  Tensor image(int i) const;
  Tensor gather_images(const std::vector<int>& positions) const;
  const std::vector<int>& indices() const { return indices_; }
  std::string domain_tag(int i) const;
  std::string digest() const;

 private:
  std::shared_ptr<const LabeledDataset> base_;
  std::vector<int> indices_;

  friend struct detail::LabelOracleKey;
};

namespace detail {
struct LabelOracleKey {
  // Only eval-protocol code calls this; adaptation methods must not.
  static std::vector<int> labels(const AdaptationSet& set);
};
}  // namespace detail

struct ScenarioDescriptor {
  std::string scenario_id;       // s1..s4
  std::string params_json;       // canonical JSON of the parameters
  std::uint64_t seed = 0;
};

struct ScenarioSplit {
  AdaptationSet delta_t;
  std::optional<AdaptationSet> delta_ood;
  std::shared_ptr<const LabeledDataset> d_t;
  ScenarioDescriptor descriptor;
};

// ---------------------------------------------------------------------------
// corpora

// 32x32 renders of 10 parametric shape classes with seeded jitter in
// position, scale, rotation and color; class-balanced.
LabeledDataset generate_synthshapes(int classes, int per_class,
                                    std::uint64_t seed);

const std::vector<std::string>& synthshapes_class_names();

// Classic CIFAR-10 binary layout: 3073-byte records (label + 3072 pixels).
// `path` may be a single .bin file or a directory of them. subset_per_class=0
// loads everything.
LabeledDataset load_cifar10_binary(const std::filesystem::path& path,
                                   int subset_per_class, std::uint64_t seed);

// Applies the corruption stack to every image; labels are copied untouched.
LabeledDataset make_target_domain(const LabeledDataset& source,
                                  const std::vector<CorruptionSpec>& specs,
                                  std::uint64_t seed);

// ---------------------------------------------------------------------------
// scenario samplers (pure functions of inputs + seed)

ScenarioSplit scenario1(std::shared_ptr<const LabeledDataset> d_t, int size,
                        std::uint64_t seed);

ScenarioSplit scenario2(std::shared_ptr<const LabeledDataset> d_t, int k,
                        int per_class, std::uint64_t seed);

ScenarioSplit scenario3(const std::vector<LabeledDataset>& domains, int k,
                        int per_domain, std::uint64_t seed);

ScenarioSplit scenario4(const LabeledDataset& source,
                        const std::vector<CorruptionSpec>& stack, int n,
                        std::uint64_t seed);

// Default |Delta_T| sweep for scenario 1: powers of two 1..8192.
std::vector<int> default_s1_sweep();

}  // namespace ttb

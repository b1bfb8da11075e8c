#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ttabench/tensor.hpp"

namespace ttb {

struct CorruptionSpec {
  std::string tau;  // registry name
  int mu = 1;       // severity 1..5

  bool operator==(const CorruptionSpec&) const = default;
};

// Stable identifier, e.g. "gaussian_noise@5"; composed stacks join with '+'.
std::string spec_id(const CorruptionSpec& spec);
std::string stack_id(const std::vector<CorruptionSpec>& specs);

const std::vector<std::string>& corruption_registry();
bool is_known_corruption(const std::string& tau);
void validate_spec(const CorruptionSpec& spec);

// Per-corruption 5-vector of strength parameters, strictly increasing in mu.
struct SeverityTable {
  int version = 0;
  std::vector<std::pair<std::string, std::array<float, 5>>> entries;

  float strength(const std::string& tau, int mu) const;
};

// Built-in table; identical to the repo's data/severity_tables.json.
const SeverityTable& default_severity_table();
SeverityTable parse_severity_table(const std::string& json_text);
const std::string& embedded_severity_table_json();

// image: [3, 32, 32] with values in [0, 1]; output clamped to [0, 1].
// Deterministic given (image, spec, rng_seed).
Tensor apply_corruption(const Tensor& image, const CorruptionSpec& spec,
                        std::uint64_t rng_seed);

// Left-to-right nesting; per-stage sub-seeds split from rng_seed.
Tensor compose(const Tensor& image, const std::vector<CorruptionSpec>& specs,
               std::uint64_t rng_seed);

std::vector<std::vector<CorruptionSpec>> default_pairs();
std::vector<std::vector<CorruptionSpec>> default_triplets();

// 10 log10(1 / MSE) for [0,1] images.
double psnr(const Tensor& clean, const Tensor& corrupted);

}  // namespace ttb

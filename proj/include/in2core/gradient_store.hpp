#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "in2core/types.hpp"

namespace in2core {

enum class Split { train, validation, test, train_mean };

const char* to_string(Split split);
Split split_from_string(const std::string& name);

struct LayerSpec {
  int32_t layer_index = 0;
  std::string name;
  int64_t dim = 0;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct ExampleGradient {
  std::string example_id;
  std::vector<VecF> per_layer;  // one block per layer, layer order
  float loss_value = 0.0f;
  uint32_t token_count = 1;
};

bool operator==(const ExampleGradient& a, const ExampleGradient& b);

struct GradientManifest {
  Split split = Split::train;
  std::vector<LayerSpec> layers;
  std::vector<ExampleGradient> examples;
  std::string model_tag;
  std::string created_at;

  int layer_count() const { return static_cast<int>(layers.size()); }
  int64_t size() const { return static_cast<int64_t>(examples.size()); }
  int64_t total_dim() const;       // sum over all layers
  int64_t total_dim(int k) const;  // sum over the first k layers
};

bool operator==(const GradientManifest& a, const GradientManifest& b);

// Throws invariant_violation naming the offending example/layer when ids
// repeat, payload shapes disagree with the layer table, or values are
// non-finite.
void validate_manifest(const GradientManifest& m);

// Binary layout, little endian throughout:
//   magic "IN2G" | u16 version | u16 layer_count
//   per layer:   u16 name_len | name bytes | u32 dim
//   u64 example_count
//   per example: u16 id_len | id bytes | f32 loss | u32 token_count
//                | f32 payload, concatenated in layer order
// A JSON sidecar "<path>.meta.json" carries split, model_tag, created_at.
// Returns the number of bytes written to the binary file.
uint64_t write_manifest(const GradientManifest& m, const std::filesystem::path& path);

// Validates before returning. Error taxonomy: corrupt_header for a bad
// magic/version or a header that ends early, truncated_payload when the file
// ends inside an example record, dimension_mismatch when bytes remain after
// the declared example count has been read.
GradientManifest read_manifest(const std::filesystem::path& path);

// First k layers, k in [1, layer_count]; payload vectors are copied, so the
// retained footprint scales with the retained dims only.
GradientManifest restrict_layers(const GradientManifest& m, int k);

// Per-layer arithmetic mean. Sums are accumulated in f64 in ascending
// example_id order regardless of storage order, then rounded once to f32.
// loss_value is averaged the same way; token_count is 1; id is "mean".
ExampleGradient mean_gradient(const GradientManifest& m);

// [layer 0; layer 1; ...] upcast to f64. k < 0 means all layers.
VecD concat_gradient(const ExampleGradient& g, int k = -1);

// Index order that visits examples by ascending example_id.
std::vector<int64_t> ascending_id_order(const GradientManifest& m);

inline constexpr uint16_t kManifestFormatVersion = 1;

// Size of the fixed header + layer table + per-example id fields for this
// manifest; write_manifest output minus this is pure example payload
// (loss + token_count + gradient floats).
uint64_t manifest_overhead_bytes(const GradientManifest& m);

}  // namespace in2core

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "in2core/gradient_store.hpp"
#include "in2core/types.hpp"

namespace in2core {

enum class Task { cluster_classification, markov_next_token };

const char* to_string(Task t);
Task task_from_string(const std::string& name);

struct ToyExample {
  std::string example_id;
  VecD features;                // cluster_classification input
  int32_t label = 0;            // cluster_classification target
  std::vector<int32_t> tokens;  // markov_next_token sequence, length >= 2
};

struct DatasetParams {
  Task task = Task::cluster_classification;
  int64_t n = 1;
  uint64_t seed = 0;                   // example draws
  std::optional<uint64_t> world_seed;  // centers / transition matrix; defaults to seed
  // cluster_classification
  int32_t classes = 3;
  int32_t feature_dim = 4;
  double center_spread = 2.0;
  double cluster_noise = 0.5;
  double shift = 0.0;        // offset added to every center, along the unit diagonal
  double label_noise = 0.0;  // probability a label is redrawn uniformly
  // markov_next_token
  int32_t vocab = 6;
  int32_t min_len = 2;
  int32_t max_len = 20;
  std::string id_prefix = "ex";
};

struct ToyDataset {
  Task task = Task::cluster_classification;
  std::vector<ToyExample> examples;
  int32_t vocab_or_classes = 0;
  int32_t feature_dim = 0;  // 0 for token tasks
  uint64_t seed = 0;

  int64_t size() const { return static_cast<int64_t>(examples.size()); }
  // model input width: feature_dim, or vocab for one-hot token input
  int64_t input_dim() const;
};

ToyDataset generate_dataset(Task task, int64_t n, uint64_t seed);
ToyDataset generate_dataset(const DatasetParams& params);

// Concatenation; example ids must not collide.
ToyDataset concat_datasets(const ToyDataset& a, const ToyDataset& b);

std::string dataset_to_json(const ToyDataset& data);
ToyDataset dataset_from_json(const std::string& text);

// Low-rank adapter on top of a frozen weight: effective W = W0 + A * B,
// A is out x rank, B is rank x in. Only A and B train.
struct AdapterPair {
  MatD a;
  MatD b;
};

struct ToyModel {
  std::vector<MatD> frozen;           // W0 per layer, out x in
  std::vector<AdapterPair> adapters;  // same layer order
  int32_t rank = 2;

  int32_t layer_count() const { return static_cast<int32_t>(frozen.size()); }
  MatD effective_weight(int l) const { return frozen[l] + adapters[l].a * adapters[l].b; }
  int64_t adapter_dim(int l) const;  // flattened (A, B) length for one layer
  int64_t total_adapter_dim() const;
  int64_t input_dim() const { return frozen.empty() ? 0 : frozen.front().cols(); }
  int64_t output_dim() const { return frozen.empty() ? 0 : frozen.back().rows(); }
};

struct ModelConfig {
  int32_t layers = 3;
  int32_t hidden = 8;
  int32_t rank = 2;
  uint64_t seed = 0;
};

ToyModel make_toy_model(int64_t input_dim, int64_t output_dim, const ModelConfig& cfg);
ToyModel make_toy_model(const ToyDataset& data, const ModelConfig& cfg);

std::string model_to_json(const ToyModel& model);
ToyModel model_from_json(const std::string& text);

// Stable content hash over dims and parameter bytes; identical models get
// identical tags.
std::string model_tag(const ToyModel& model);

struct TrainConfig {
  double learning_rate = 0.1;
  int32_t epochs = 100;
  uint64_t seed = 0;  // used by callers that also construct the model
  double l2_damping = 0.01;
};

// Full-batch gradient descent on mean data loss + (l2_damping/2)*||adapters||^2.
// Deterministic; throws a numerical error naming the epoch if the objective
// goes non-finite.
ToyModel train(const ToyModel& model, const ToyDataset& data, const TrainConfig& cfg);

// Token-averaged negative log likelihood of one example (plain NLL for
// cluster examples).
double example_loss(const ToyModel& model, const ToyExample& ex, Task task);
double mean_loss(const ToyModel& model, const ToyDataset& data);
double training_objective(const ToyModel& model, const ToyDataset& data, double l2_damping);
double accuracy(const ToyModel& model, const ToyDataset& data);  // cluster task

// Flattened per-layer adapter gradient [vec(dA); vec(dB)] of one example's
// token-averaged loss.
std::vector<VecD> example_adapter_gradients(const ToyModel& model, const ToyExample& ex, Task task);

// One entry per predicted token of a markov_next_token example; the example
// gradient is the arithmetic mean of these.
std::vector<std::vector<VecD>> per_token_gradients(const ToyModel& model, const ToyExample& ex);

// Manifest with one layer block per model layer; loss_value and token_count
// come from the example. model_tag is derived from the model.
GradientManifest per_example_gradients(const ToyModel& model, const ToyDataset& data,
                                       Split split = Split::train);

// Gradient of mean data loss over all adapters, flattened in layer order.
VecD objective_gradient(const ToyModel& model, const ToyDataset& data);

// Central finite differences of objective_gradient, symmetrized. The l2 term
// is not included; damping is added separately by consumers.
MatD hessian_of_mean_loss(const ToyModel& model, const ToyDataset& data, double step = 1e-5);

// exp(mean over examples of token-averaged NLL)
double perplexity(const ToyModel& model, const ToyDataset& data);

// Retrains from base_model once per removed example and reports
// loss(val; without z) - loss(val; full), ordered by example_id. Positive
// means removing z hurt. Runs workers in parallel; results are deterministic
// regardless of worker count.
std::vector<std::pair<std::string, double>> loo_oracle(const ToyDataset& data,
                                                       const ToyDataset& val,
                                                       const TrainConfig& cfg,
                                                       const ToyModel& base_model);

// Adapter parameters as one vector (layer order; vec(A) then vec(B),
// column-major within each).
VecD flatten_adapters(const ToyModel& model);
void unflatten_adapters(ToyModel& model, const VecD& theta);

// min(IN2CORE_THREADS, hardware_concurrency), at least 1.
int worker_count();

}  // namespace in2core

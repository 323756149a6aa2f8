#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "in2core/gradient_store.hpp"
#include "in2core/types.hpp"

namespace in2core {

// exact:    -(grad val)^T (H + damping I)^-1 (grad z), dense solve
// identity: the Hessian term replaced by I, i.e. negated dot product
// datainf:  per-layer averaged rank-one inverse (see datainf_apply_inverse)
enum class Estimator { exact, identity, datainf };

const char* to_string(Estimator e);
Estimator estimator_from_string(const std::string& name);

enum class DampingMode { fixed, datainf_scaled };

const char* to_string(DampingMode m);
DampingMode damping_mode_from_string(const std::string& name);

struct InfluenceConfig {
  Estimator estimator = Estimator::datainf;
  DampingMode damping_mode = DampingMode::datainf_scaled;
  double damping_value = 0.01;
  std::optional<int32_t> layer_limit;  // keep only the first k layers
};

struct InfluenceRecord {
  std::string example_id;
  double influence = 0.0;
  int64_t rank = 0;  // 1 = most negative (strongest proponent)
};

// Ranks ascending by influence, ties broken by example_id; output is sorted
// by rank. Errors on non-finite values or duplicate ids.
std::vector<InfluenceRecord> rank_records(
    const std::vector<std::pair<std::string, double>>& values);

std::vector<InfluenceRecord> influence_exact(const GradientManifest& train,
                                             const ExampleGradient& val_grad,
                                             const MatD& hessian, double damping);

std::vector<InfluenceRecord> influence_identity(const GradientManifest& train,
                                                const ExampleGradient& val_grad);

std::vector<InfluenceRecord> influence_datainf(const GradientManifest& train,
                                               const ExampleGradient& val_grad,
                                               const InfluenceConfig& cfg);

// Averages the validation gradient first, then scores every training point.
// layer_limit restricts both manifests (and the leading block of the Hessian,
// whose parameter order matches layer order) before anything else runs.
// estimator = exact requires hessian.
std::vector<InfluenceRecord> influence_against_set(const GradientManifest& train,
                                                   const GradientManifest& val,
                                                   const InfluenceConfig& cfg,
                                                   const MatD* hessian = nullptr);

// Per-layer damping used by the datainf estimator: the fixed value, or
// 0.1 * (sum of squared layer gradient norms) / (n * layer dim).
std::vector<double> datainf_layer_damping(const GradientManifest& train,
                                          const InfluenceConfig& cfg);

// (1/(n*lambda)) * sum_i [ v - (g_i^T v) / (lambda + ||g_i||^2) * g_i ],
// the averaged rank-one Sherman-Morrison inverse applied to v. grads must
// already be in the caller's fixed accumulation order. Never materializes a
// dim x dim matrix; scratch is O(dim) and instrumented.
VecD datainf_apply_inverse(const std::vector<const VecF*>& grads, const VecD& v, double lambda);

// Peak number of live f64 scratch elements allocated by estimator internals
// since the last reset. Lets tests pin the O(total dim) memory behaviour.
void reset_scratch_stats();
uint64_t peak_scratch_doubles();

// example_id,influence,rank ordered by rank; lines in header_comments are
// emitted first, prefixed with "# ".
std::string records_to_csv(const std::vector<InfluenceRecord>& records,
                           const std::vector<std::string>& header_comments = {});
std::vector<InfluenceRecord> records_from_csv(const std::string& text);
std::string records_to_json(const std::vector<InfluenceRecord>& records);

}  // namespace in2core

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "in2core/gradient_store.hpp"
#include "in2core/influence.hpp"
#include "in2core/stats.hpp"
#include "in2core/types.hpp"

namespace in2core {

// Everything scoring needs that can be amortized over one pass of the
// training manifest: the mean training gradient plus the per-layer scaled
// damping values. Identity scoring needs nothing else; datainf additionally
// needs the training gradients themselves and exact needs a precomputed
// damped-curvature matrix.
struct GradientCache {
  std::string model_tag;
  std::vector<LayerSpec> layers;
  ExampleGradient train_mean;
  int64_t n_train = 0;
  std::string created_at;
  std::vector<double> datainf_damping;  // 0 for a layer whose gradients are all zero
};

GradientCache build_cache(const GradientManifest& train);

// Serialized as a one-example manifest with split = train_mean; the sidecar
// additionally carries n_train and the damping list. Rebuilding from the same
// manifest produces identical bytes.
void write_cache(const GradientCache& cache, const std::filesystem::path& path);
GradientCache read_cache(const std::filesystem::path& path);

// Influence of the averaged training set on one test point: negative means
// the training data covers it (training reduced its loss). The roles are
// swapped relative to influence_against_set: the cached mean plays the train
// side, the test gradient is the query.
//   identity: needs only the cache
//   datainf:  needs train (scaled damping comes from the cache)
//   exact:    needs hessian (damping_value is used as the fixed damping)
double coverage_score(const GradientCache& cache, const ExampleGradient& test_grad,
                      const InfluenceConfig& cfg, const GradientManifest* train = nullptr,
                      const MatD* hessian = nullptr);

// Mean cosine similarity between the test embedding and every training
// embedding. Embeddings are caller-supplied; nothing here depends on the
// gradient pipeline.
double similarity_baseline(const std::vector<VecD>& train_embeddings,
                           const VecD& test_embedding);

struct CoverageRow {
  std::string test_id;
  double influence = 0.0;
  int64_t influence_rank = 0;  // ascending influence, 1 = best covered
  std::optional<double> similarity;
  std::optional<int64_t> similarity_rank;  // ascending similarity
  double loss = 0.0;
  uint32_t token_count = 1;
};

struct CoverageReport {
  std::vector<CoverageRow> rows;  // ordered by test_id
  // Pearson of signal rank against loss; unset when the signal is constant
  // (undefined, never reported as 0).
  std::optional<double> influence_loss_corr;
  std::optional<double> similarity_loss_corr;
  // Tie-aware rank correlation of the raw signal values against loss.
  std::optional<double> influence_loss_spearman;
  std::optional<double> similarity_loss_spearman;
  // loss ~ rank least squares fits
  std::optional<stats::OlsFit> influence_fit;
  std::optional<stats::OlsFit> similarity_fit;
};

struct EmbeddingSet {
  std::vector<VecD> train;
  std::map<std::string, VecD> test;  // keyed by test example_id
};

// losses must cover every test id (pass the manifest's stored loss_value if
// no fresher numbers exist). Refuses a cache whose model_tag disagrees with
// the test manifest's.
CoverageReport coverage_report(const GradientCache& cache, const GradientManifest& test,
                               const std::vector<std::pair<std::string, double>>& losses,
                               const InfluenceConfig& cfg,
                               const EmbeddingSet* embeddings = nullptr,
                               const GradientManifest* train = nullptr,
                               const MatD* hessian = nullptr);

// Tie-aware rank correlation between |influence| and token count. Errors when
// every token count is equal. Strong magnitudes (|corr| > ~0.3) hint the
// averaged-token-gradient convention is biasing scores by sequence length.
double length_bias_diagnostic(const std::vector<InfluenceRecord>& records,
                              const std::vector<std::pair<std::string, int64_t>>& token_counts);

// Counts training-example gradient reads performed by coverage scoring since
// the last reset; identity scoring from a cache must leave it at zero.
void reset_train_read_counter();
uint64_t train_read_count();

std::string coverage_to_csv(const CoverageReport& r);
std::string coverage_to_json(const CoverageReport& r);
// rank,loss rows for one signal; set similarity = true for the baseline
std::string scatter_csv(const CoverageReport& r, bool similarity);

}  // namespace in2core

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "in2core/gradient_store.hpp"
#include "in2core/influence.hpp"

namespace in2core {

// proponents: most negative influence first (rank order)
// opponents:  most positive influence first (reverse rank order)
// minimum:    smallest |influence| first, ties by example_id
// random:     seeded draw without replacement
enum class Strategy { proponents, opponents, minimum, random };

const char* to_string(Strategy s);
Strategy strategy_from_string(const std::string& name);

struct CoresetSpec {
  Strategy strategy = Strategy::proponents;
  std::optional<double> fraction;  // (0, 1]; floor(fraction * n) points
  std::optional<int64_t> count;    // exactly one of fraction/count is set
  uint64_t seed = 0;               // random strategy only
};

struct DistributionStats {
  int64_t n = 0;
  double min_influence = 0.0;
  double max_influence = 0.0;
  double mean = 0.0;
  double median = 0.0;
  std::optional<double> skewness;  // needs n >= 3
  std::vector<int64_t> bins;       // histogram counts over [bin_low, bin_high]
  double bin_low = 0.0;
  double bin_high = 0.0;
};

struct CoresetResult {
  std::vector<std::string> selected_ids;  // in selection order
  CoresetSpec spec;
  DistributionStats stats;  // over the full ranked input, not the subset
};

// Size a spec resolves to for n records; errors when it comes out as 0 or
// exceeds n, or when not exactly one of fraction/count is set.
int64_t resolve_count(const CoresetSpec& spec, int64_t n);

// records must carry permutation ranks 1..n (the output of rank_records).
CoresetResult select_coreset(const std::vector<InfluenceRecord>& records,
                             const CoresetSpec& spec);

// |A intersect B| / min(|A|, |B|); errors when either side is empty.
double overlap_coefficient(const std::vector<std::string>& a,
                           const std::vector<std::string>& b);

DistributionStats distribution_stats(const std::vector<InfluenceRecord>& records,
                                     int bin_count = 50);

struct In2CoreResult {
  std::vector<InfluenceRecord> records;  // full ranking, rank order
  CoresetResult coreset;
  // Filled for proponents runs: the equal-size contrast selections.
  std::optional<std::vector<std::string>> opponents_ids;
  std::optional<std::vector<std::string>> minimum_ids;
};

// Scores the training set against the validation set, ranks, selects. The
// hessian is only consulted for the exact estimator.
In2CoreResult run_in2core(const GradientManifest& train_grads,
                          const GradientManifest& val_grads,
                          const InfluenceConfig& cfg, const CoresetSpec& spec,
                          const MatD* hessian = nullptr);

std::string coreset_to_json(const CoresetResult& r);
// bin_low,bin_high,count rows
std::string histogram_to_csv(const DistributionStats& s);
std::string id_list_to_text(const std::vector<std::string>& ids);

}  // namespace in2core

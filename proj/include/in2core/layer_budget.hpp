#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "in2core/gradient_store.hpp"
#include "in2core/influence.hpp"

namespace in2core {

struct LayerBudgetEntry {
  int32_t k = 0;
  double rho = 0.0;            // rank agreement with the all-layer baseline
  uint64_t memory_bytes = 0;   // estimated gradient payload held at this k
  double s = 0.0;              // rho / k, agreement per layer stored
  bool feasible = false;       // within budget (and min_rho when given)
};

struct LayerBudgetReport {
  std::vector<LayerBudgetEntry> entries;  // ascending k, deduplicated
  int32_t chosen_k = 0;
  uint64_t budget_bytes = 0;
  std::optional<double> min_rho;
};

// Rank agreement between two rankings over the same ids. Both inputs carry
// tie-broken permutation ranks, so the closed form
// 1 - 6 * sum d^2 / (n (n^2 - 1)) is exact. Errors on mismatched id sets or
// n < 2.
double spearman_rho(const std::vector<InfluenceRecord>& a,
                    const std::vector<InfluenceRecord>& b);

// n * (8 + 4 * sum of the first k layer dims): the f32 payload plus the
// fixed 8 bytes per example (loss + token count) an influence pass holds.
uint64_t estimate_memory(const GradientManifest& m, int k);

// Scores every requested k against the all-layer ranking, then picks the
// feasible k with maximal s (ties -> smaller k). Duplicate ks are collapsed;
// every k must lie in [1, layer count]. Errors with "no feasible k" when the
// budget (or min_rho floor) excludes everything.
LayerBudgetReport profile_layer_budget(const GradientManifest& train,
                                       const GradientManifest& val,
                                       const InfluenceConfig& cfg,
                                       const std::vector<int32_t>& ks,
                                       uint64_t budget_bytes,
                                       const MatD* hessian = nullptr,
                                       std::optional<double> min_rho = std::nullopt);

std::string report_to_csv(const LayerBudgetReport& r);
std::string report_to_json(const LayerBudgetReport& r);
// k,s,memory_bytes rows, ready to plot
std::string report_to_plot_csv(const LayerBudgetReport& r);

}  // namespace in2core

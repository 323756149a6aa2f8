#include "in2core/layer_budget.hpp"

#include <algorithm>
#include <map>
#include <set>

#include <nlohmann/json.hpp>

#include "in2core/error.hpp"
#include "in2core/text.hpp"

namespace in2core {

double spearman_rho(const std::vector<InfluenceRecord>& a,
                    const std::vector<InfluenceRecord>& b) {
  if (a.size() != b.size())
    fail(ErrorCode::invalid_argument, "spearman_rho: size mismatch");
  if (a.size() < 2) fail(ErrorCode::invalid_argument, "spearman_rho needs n >= 2");

  std::map<std::string, int64_t> rank_b;
  for (const auto& r : b) rank_b[r.example_id] = r.rank;
  if (rank_b.size() != b.size())
    fail(ErrorCode::invalid_argument, "spearman_rho: duplicate ids");

  double sum_d2 = 0.0;
  for (const auto& r : a) {
    auto it = rank_b.find(r.example_id);
    if (it == rank_b.end())
      fail(ErrorCode::invalid_argument, "spearman_rho: id sets differ (" + r.example_id + ")");
    const double d = static_cast<double>(r.rank - it->second);
    sum_d2 += d * d;
  }
  const double n = static_cast<double>(a.size());
  return 1.0 - 6.0 * sum_d2 / (n * (n * n - 1.0));
}

uint64_t estimate_memory(const GradientManifest& m, int k) {
  if (k < 1 || k > m.layer_count())
    fail(ErrorCode::invalid_argument,
         "estimate_memory: k = " + std::to_string(k) + " outside [1, " +
             std::to_string(m.layer_count()) + "]");
  const uint64_t per_example = 8 + 4 * static_cast<uint64_t>(m.total_dim(k));
  return static_cast<uint64_t>(m.size()) * per_example;
}

LayerBudgetReport profile_layer_budget(const GradientManifest& train,
                                       const GradientManifest& val,
                                       const InfluenceConfig& cfg,
                                       const std::vector<int32_t>& ks,
                                       uint64_t budget_bytes, const MatD* hessian,
                                       std::optional<double> min_rho) {
  if (ks.empty()) fail(ErrorCode::invalid_argument, "ks must be non-empty");
  std::set<int32_t> unique_ks(ks.begin(), ks.end());
  for (int32_t k : unique_ks)
    if (k < 1 || k > train.layer_count())
      fail(ErrorCode::invalid_argument,
           "k = " + std::to_string(k) + " outside [1, " +
               std::to_string(train.layer_count()) + "]");

  InfluenceConfig base_cfg = cfg;
  base_cfg.layer_limit.reset();
  const auto baseline = influence_against_set(train, val, base_cfg, hessian);

  LayerBudgetReport report;
  report.budget_bytes = budget_bytes;
  report.min_rho = min_rho;

  for (int32_t k : unique_ks) {
    InfluenceConfig k_cfg = cfg;
    k_cfg.layer_limit = k;
    const auto ranking = influence_against_set(train, val, k_cfg, hessian);

    LayerBudgetEntry entry;
    entry.k = k;
    entry.rho = spearman_rho(ranking, baseline);
    entry.memory_bytes = estimate_memory(train, k);
    entry.s = entry.rho / static_cast<double>(k);
    entry.feasible = entry.memory_bytes <= budget_bytes &&
                     (!min_rho || entry.rho >= *min_rho);
    report.entries.push_back(entry);
  }

  const LayerBudgetEntry* best = nullptr;
  for (const auto& e : report.entries) {
    if (!e.feasible) continue;
    if (!best || e.s > best->s || (e.s == best->s && e.k < best->k)) best = &e;
  }
  if (!best) fail(ErrorCode::invalid_argument, "no feasible k under the given budget");
  report.chosen_k = best->k;
  return report;
}

std::string report_to_csv(const LayerBudgetReport& r) {
  std::string out = "k,rho,memory_bytes,s,chosen\n";
  for (const auto& e : r.entries) {
    out += std::to_string(e.k) + "," + fmt_double(e.rho) + "," +
           std::to_string(e.memory_bytes) + "," + fmt_double(e.s) + "," +
           (e.k == r.chosen_k ? "1" : "0") + "\n";
  }
  return out;
}

std::string report_to_json(const LayerBudgetReport& r) {
  nlohmann::json j;
  j["budget_bytes"] = r.budget_bytes;
  j["chosen_k"] = r.chosen_k;
  if (r.min_rho) j["min_rho"] = *r.min_rho;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : r.entries) {
    nlohmann::json o;
    o["k"] = e.k;
    o["rho"] = e.rho;
    o["memory_bytes"] = e.memory_bytes;
    o["s"] = e.s;
    o["feasible"] = e.feasible;
    entries.push_back(std::move(o));
  }
  j["entries"] = std::move(entries);
  return j.dump(2) + "\n";
}

std::string report_to_plot_csv(const LayerBudgetReport& r) {
  std::string out = "k,s,memory_bytes\n";
  for (const auto& e : r.entries)
    out += std::to_string(e.k) + "," + fmt_double(e.s) + "," +
           std::to_string(e.memory_bytes) + "\n";
  return out;
}

}  // namespace in2core

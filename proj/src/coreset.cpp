#include "in2core/coreset.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <nlohmann/json.hpp>

#include "in2core/error.hpp"
#include "in2core/rng.hpp"
#include "in2core/stats.hpp"
#include "in2core/text.hpp"

namespace in2core {

namespace {

void check_ranked(const std::vector<InfluenceRecord>& records) {
  const int64_t n = static_cast<int64_t>(records.size());
  std::vector<bool> seen(static_cast<size_t>(n), false);
  for (const auto& r : records) {
    if (r.rank < 1 || r.rank > n || seen[static_cast<size_t>(r.rank - 1)])
      fail(ErrorCode::invariant_violation,
           "unranked input: ranks must be a permutation of 1.." + std::to_string(n));
    seen[static_cast<size_t>(r.rank - 1)] = true;
  }
}

std::vector<const InfluenceRecord*> by_rank(const std::vector<InfluenceRecord>& records) {
  std::vector<const InfluenceRecord*> out(records.size());
  for (const auto& r : records) out[static_cast<size_t>(r.rank - 1)] = &r;
  return out;
}

}  // namespace

const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::proponents: return "proponents";
    case Strategy::opponents: return "opponents";
    case Strategy::minimum: return "minimum";
    case Strategy::random: return "random";
  }
  return "proponents";
}

Strategy strategy_from_string(const std::string& name) {
  if (name == "proponents") return Strategy::proponents;
  if (name == "opponents") return Strategy::opponents;
  if (name == "minimum") return Strategy::minimum;
  if (name == "random") return Strategy::random;
  fail(ErrorCode::invalid_argument, "unknown strategy: " + name);
}

int64_t resolve_count(const CoresetSpec& spec, int64_t n) {
  if (n < 1) fail(ErrorCode::invalid_argument, "no records to select from");
  if (spec.fraction.has_value() == spec.count.has_value())
    fail(ErrorCode::invalid_argument, "exactly one of fraction/count must be set");
  int64_t count = 0;
  if (spec.fraction) {
    if (*spec.fraction <= 0.0 || *spec.fraction > 1.0)
      fail(ErrorCode::invalid_argument, "fraction must lie in (0, 1]");
    count = static_cast<int64_t>(std::floor(*spec.fraction * static_cast<double>(n)));
  } else {
    count = *spec.count;
  }
  if (count < 1)
    fail(ErrorCode::invalid_argument, "selection resolves to 0 points");
  if (count > n)
    fail(ErrorCode::invalid_argument, "selection of " + std::to_string(count) +
                                          " points exceeds the " + std::to_string(n) +
                                          " available");
  return count;
}

CoresetResult select_coreset(const std::vector<InfluenceRecord>& records,
                             const CoresetSpec& spec) {
  check_ranked(records);
  const int64_t n = static_cast<int64_t>(records.size());
  const int64_t count = resolve_count(spec, n);
  const auto ranked = by_rank(records);

  CoresetResult out;
  out.spec = spec;
  out.stats = distribution_stats(records);
  out.selected_ids.reserve(count);

  switch (spec.strategy) {
    case Strategy::proponents:
      for (int64_t i = 0; i < count; ++i) out.selected_ids.push_back(ranked[i]->example_id);
      break;
    case Strategy::opponents:
      for (int64_t i = 0; i < count; ++i)
        out.selected_ids.push_back(ranked[n - 1 - i]->example_id);
      break;
    case Strategy::minimum: {
      std::vector<const InfluenceRecord*> order(ranked);
      std::sort(order.begin(), order.end(),
                [](const InfluenceRecord* a, const InfluenceRecord* b) {
                  const double ma = std::fabs(a->influence);
                  const double mb = std::fabs(b->influence);
                  if (ma != mb) return ma < mb;
                  return a->example_id < b->example_id;
                });
      for (int64_t i = 0; i < count; ++i) out.selected_ids.push_back(order[i]->example_id);
      break;
    }
    case Strategy::random: {
      std::vector<const InfluenceRecord*> pool(ranked);
      Rng rng(spec.seed);
      for (int64_t i = 0; i < count; ++i) {
        const int64_t j = i + static_cast<int64_t>(rng.bounded(static_cast<uint64_t>(n - i)));
        std::swap(pool[i], pool[j]);
        out.selected_ids.push_back(pool[i]->example_id);
      }
      break;
    }
  }
  return out;
}

double overlap_coefficient(const std::vector<std::string>& a,
                           const std::vector<std::string>& b) {
  if (a.empty() || b.empty())
    fail(ErrorCode::invalid_argument, "overlap of an empty selection");
  const std::set<std::string> sa(a.begin(), a.end());
  const std::set<std::string> sb(b.begin(), b.end());
  int64_t common = 0;
  for (const auto& id : sa) common += sb.count(id);
  return static_cast<double>(common) /
         static_cast<double>(std::min(sa.size(), sb.size()));
}

DistributionStats distribution_stats(const std::vector<InfluenceRecord>& records,
                                     int bin_count) {
  if (records.empty()) fail(ErrorCode::invalid_argument, "no records");
  if (bin_count < 1) fail(ErrorCode::invalid_argument, "bin_count must be >= 1");

  std::vector<double> values;
  values.reserve(records.size());
  for (const auto& r : records) values.push_back(r.influence);

  DistributionStats s;
  s.n = static_cast<int64_t>(values.size());
  s.min_influence = *std::min_element(values.begin(), values.end());
  s.max_influence = *std::max_element(values.begin(), values.end());
  s.mean = stats::mean(values);
  s.median = stats::median(values);
  if (s.n >= 3) s.skewness = stats::sample_skewness(values);

  s.bin_low = s.min_influence;
  s.bin_high = s.max_influence;
  s.bins.assign(static_cast<size_t>(bin_count), 0);
  const double width = (s.bin_high - s.bin_low) / static_cast<double>(bin_count);
  for (double v : values) {
    int64_t idx = 0;
    if (width > 0.0)
      idx = std::min<int64_t>(static_cast<int64_t>((v - s.bin_low) / width), bin_count - 1);
    ++s.bins[static_cast<size_t>(idx)];
  }
  return s;
}

In2CoreResult run_in2core(const GradientManifest& train_grads,
                          const GradientManifest& val_grads, const InfluenceConfig& cfg,
                          const CoresetSpec& spec, const MatD* hessian) {
  In2CoreResult out;
  out.records = influence_against_set(train_grads, val_grads, cfg, hessian);
  out.coreset = select_coreset(out.records, spec);
  if (spec.strategy == Strategy::proponents) {
    CoresetSpec contrast = spec;
    contrast.fraction.reset();
    contrast.count = static_cast<int64_t>(out.coreset.selected_ids.size());
    contrast.strategy = Strategy::opponents;
    out.opponents_ids = select_coreset(out.records, contrast).selected_ids;
    contrast.strategy = Strategy::minimum;
    out.minimum_ids = select_coreset(out.records, contrast).selected_ids;
  }
  return out;
}

std::string coreset_to_json(const CoresetResult& r) {
  nlohmann::json j;
  j["strategy"] = to_string(r.spec.strategy);
  if (r.spec.fraction) j["fraction"] = *r.spec.fraction;
  if (r.spec.count) j["count"] = *r.spec.count;
  if (r.spec.strategy == Strategy::random) j["seed"] = r.spec.seed;
  j["selected_ids"] = r.selected_ids;
  nlohmann::json st;
  st["n"] = r.stats.n;
  st["min_influence"] = r.stats.min_influence;
  st["max_influence"] = r.stats.max_influence;
  st["mean"] = r.stats.mean;
  st["median"] = r.stats.median;
  if (r.stats.skewness) st["skewness"] = *r.stats.skewness;
  j["stats"] = std::move(st);
  return j.dump(2) + "\n";
}

std::string histogram_to_csv(const DistributionStats& s) {
  std::string out = "bin_low,bin_high,count\n";
  const double width =
      (s.bin_high - s.bin_low) / static_cast<double>(s.bins.empty() ? 1 : s.bins.size());
  for (size_t i = 0; i < s.bins.size(); ++i) {
    const double lo = s.bin_low + width * static_cast<double>(i);
    const double hi = (i + 1 == s.bins.size()) ? s.bin_high : lo + width;
    out += fmt_double(lo) + "," + fmt_double(hi) + "," + std::to_string(s.bins[i]) + "\n";
  }
  return out;
}

std::string id_list_to_text(const std::vector<std::string>& ids) {
  std::string out;
  for (const auto& id : ids) out += id + "\n";
  return out;
}

}  // namespace in2core

#pragma once

#include <optional>
#include <vector>

namespace in2core::stats {

double mean(const std::vector<double>& v);
double sample_variance(const std::vector<double>& v);  // n-1 denominator
double median(std::vector<double> v);

// 1-based average ranks; tied values share the mean of their positions.
std::vector<double> fractional_ranks(const std::vector<double>& v);

// nullopt when either side is constant: the correlation is undefined, not 0.
std::optional<double> pearson(const std::vector<double>& a,
                              const std::vector<double>& b);

// Tie-aware: Pearson over fractional ranks.
std::optional<double> spearman(const std::vector<double>& a,
                               const std::vector<double>& b);

// Adjusted Fisher-Pearson sample skewness, G1 = g1 * sqrt(n(n-1)) / (n-2).
// Requires n >= 3; returns 0 when the values are constant.
double sample_skewness(const std::vector<double>& v);

struct OlsFit {
  double slope = 0.0;
  double intercept = 0.0;
};

// Least squares fit y = slope*x + intercept; nullopt when x is constant.
std::optional<OlsFit> ols(const std::vector<double>& x,
                          const std::vector<double>& y);

}  // namespace in2core::stats

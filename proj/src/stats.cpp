#include "in2core/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "in2core/error.hpp"

namespace in2core::stats {

double mean(const std::vector<double>& v) {
  if (v.empty()) fail(ErrorCode::invalid_argument, "mean of empty vector");
  double acc = 0.0;
  for (double x : v) acc += x;
  return acc / static_cast<double>(v.size());
}

double sample_variance(const std::vector<double>& v) {
  if (v.size() < 2) fail(ErrorCode::invalid_argument, "sample variance needs n >= 2");
  const double m = mean(v);
  double acc = 0.0;
  for (double x : v) acc += (x - m) * (x - m);
  return acc / static_cast<double>(v.size() - 1);
}

double median(std::vector<double> v) {
  if (v.empty()) fail(ErrorCode::invalid_argument, "median of empty vector");
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  if (n % 2 == 1) return v[n / 2];
  return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<double> fractional_ranks(const std::vector<double>& v) {
  const size_t n = v.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n, 0.0);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    // positions i..j (0-based) share the average 1-based rank
    const double shared = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
    for (size_t k = i; k <= j; ++k) ranks[order[k]] = shared;
    i = j + 1;
  }
  return ranks;
}

std::optional<double> pearson(const std::vector<double>& a,
                              const std::vector<double>& b) {
  if (a.size() != b.size())
    fail(ErrorCode::invalid_argument, "pearson: length mismatch");
  if (a.size() < 2)
    fail(ErrorCode::invalid_argument, "pearson: need at least two points");
  const double ma = mean(a);
  const double mb = mean(b);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma;
    const double db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) return std::nullopt;
  return sab / std::sqrt(saa * sbb);
}

std::optional<double> spearman(const std::vector<double>& a,
                               const std::vector<double>& b) {
  if (a.size() != b.size())
    fail(ErrorCode::invalid_argument, "spearman: length mismatch");
  return pearson(fractional_ranks(a), fractional_ranks(b));
}

double sample_skewness(const std::vector<double>& v) {
  const size_t n = v.size();
  if (n < 3) fail(ErrorCode::invalid_argument, "skewness needs n >= 3");
  const double m = mean(v);
  double m2 = 0.0, m3 = 0.0;
  for (double x : v) {
    const double d = x - m;
    m2 += d * d;
    m3 += d * d * d;
  }
  m2 /= static_cast<double>(n);
  m3 /= static_cast<double>(n);
  if (m2 == 0.0) return 0.0;
  const double g1 = m3 / std::pow(m2, 1.5);
  const double nd = static_cast<double>(n);
  return g1 * std::sqrt(nd * (nd - 1.0)) / (nd - 2.0);
}

std::optional<OlsFit> ols(const std::vector<double>& x,
                          const std::vector<double>& y) {
  if (x.size() != y.size())
    fail(ErrorCode::invalid_argument, "ols: length mismatch");
  if (x.size() < 2) return std::nullopt;
  const double mx = mean(x);
  const double my = mean(y);
  double sxy = 0.0, sxx = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  if (sxx == 0.0) return std::nullopt;
  OlsFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  return fit;
}

}  // namespace in2core::stats

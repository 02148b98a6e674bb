#pragma once

// Summary statistics and the goodness-of-fit tests used by the verification battery.

#include "willow/core.hpp"

#include <boost/math/distributions/chi_squared.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

namespace willow {

struct Summary {
  long n = 0;
  double mean = 0.0;
  double variance = 0.0;  // unbiased
  double se() const { return n > 1 ? std::sqrt(variance / static_cast<double>(n)) : 0.0; }
};

/// Welford accumulation.
inline Summary summarize(const std::vector<double>& xs) {
  Summary s;
  double m2 = 0.0;
  for (double x : xs) {
    ++s.n;
    const double d = x - s.mean;
    s.mean += d / static_cast<double>(s.n);
    m2 += d * (x - s.mean);
  }
  s.variance = s.n > 1 ? m2 / static_cast<double>(s.n - 1) : 0.0;
  return s;
}

/// P(sup |B| > lambda) for the Brownian bridge: 2 sum (-1)^{k-1} exp(-2 k^2 lambda^2).
inline double kolmogorov_tail(double lambda) {
  if (lambda < 0.2) return 1.0;
  double sum = 0.0, sign = 1.0;
  for (int k = 1; k <= 200; ++k) {
    const double term = std::exp(-2.0 * k * k * lambda * lambda);
    sum += sign * term;
    if (term < 1e-16 * std::abs(sum)) break;
    sign = -sign;
  }
  return std::clamp(2.0 * sum, 0.0, 1.0);
}

struct TestResult {
  double statistic = 0.0;
  double pvalue = 1.0;
  double df = 0.0;  // chi-square only
};

/// One-sample KS against a continuous CDF; observations above `censor` are only
/// known to exceed it and the supremum runs over t <= censor.
inline TestResult ks_one_sample(std::vector<double> xs, const std::function<double(double)>& cdf,
                                double censor = std::numeric_limits<double>::infinity()) {
  if (xs.empty()) throw PreconditionError("KS test needs observations");
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0.0;
  std::size_t i = 0;
  for (; i < xs.size() && xs[i] <= censor; ++i) {
    const double F = cdf(xs[i]);
    d = std::max({d, static_cast<double>(i + 1) / n - F, F - static_cast<double>(i) / n});
  }
  if (std::isfinite(censor)) d = std::max(d, std::abs(static_cast<double>(i) / n - cdf(censor)));
  const double sn = std::sqrt(n);
  return {d, kolmogorov_tail((sn + 0.12 + 0.11 / sn) * d)};
}

inline TestResult ks_two_sample(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw PreconditionError("KS test needs observations");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= x) ++i;
    while (j < b.size() && b[j] <= x) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  const double ne = std::sqrt(na * nb / (na + nb));
  return {d, kolmogorov_tail((ne + 0.12 + 0.11 / ne) * d)};
}

/// Pearson chi-square of observed counts against cell probabilities.
inline TestResult chi_square(const std::vector<long>& observed, const std::vector<double>& probs) {
  if (observed.size() != probs.size() || observed.size() < 2)
    throw PreconditionError("chi-square needs matching cells (at least two)");
  double n = 0.0;
  for (long o : observed) n += static_cast<double>(o);
  if (!(n > 0)) throw PreconditionError("chi-square needs observations");
  double stat = 0.0;
  int cells = 0;
  for (std::size_t k = 0; k < observed.size(); ++k) {
    const double e = n * probs[k];
    if (e <= 0.0) {
      if (observed[k] > 0) return {std::numeric_limits<double>::infinity(), 0.0, 0.0};
      continue;
    }
    stat += (static_cast<double>(observed[k]) - e) * (static_cast<double>(observed[k]) - e) / e;
    ++cells;
  }
  const double df = cells - 1;
  if (cells < 2) return {stat, 1.0, df};  // a single possible cell fits trivially
  const boost::math::chi_squared dist(df);
  return {stat, boost::math::cdf(boost::math::complement(dist, stat)), df};
}

}  // namespace willow

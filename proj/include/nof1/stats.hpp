// Small statistical helpers: Gaussian quantile/log-density and sample
// quantiles. Kept header-only; everything here is deterministic.
#ifndef NOF1_STATS_HPP
#define NOF1_STATS_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "nof1/common.hpp"

namespace nof1 {

inline double gaussian_log_density(double x, double mean, double variance) {
  const double d = x - mean;
  return -0.5 * (std::log(6.283185307179586476925286766559 * variance) +
                 d * d / variance);
}

// Inverse standard normal CDF. Acklam's rational approximation refined by
// one Halley step against erfc, accurate to ~1e-15 over (0,1).
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0))
    throw ValidationError("normal_quantile: p must lie in (0,1)");

  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425;
  double x;
  if (p < plow) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - plow) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) *
        q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  // Halley refinement.
  const double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
  const double u =
      e * std::sqrt(6.283185307179586476925286766559) * std::exp(x * x / 2.0);
  x = x - u / (1.0 + x * u / 2.0);
  return x;
}

// Sample quantile with linear interpolation between order statistics
// (the common "type 7" definition). Input need not be sorted.
inline double sample_quantile(std::vector<double> xs, double p) {
  if (xs.empty()) throw ValidationError("sample_quantile: empty sample");
  if (!(p >= 0.0 && p <= 1.0))
    throw ValidationError("sample_quantile: p must lie in [0,1]");
  std::sort(xs.begin(), xs.end());
  const double h = (static_cast<double>(xs.size()) - 1.0) * p;
  const std::size_t lo = static_cast<std::size_t>(h);
  if (lo + 1 >= xs.size()) return xs.back();
  const double frac = h - static_cast<double>(lo);
  return xs[lo] + frac * (xs[lo + 1] - xs[lo]);
}

inline double mean_of(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

inline double variance_of(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean_of(xs);
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return s / static_cast<double>(xs.size() - 1);
}

inline double sd_of(const std::vector<double>& xs) {
  return std::sqrt(variance_of(xs));
}

}  // namespace nof1

#endif  // NOF1_STATS_HPP

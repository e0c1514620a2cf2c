#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "saff/tensor.hpp"

namespace saff {

// Regularized incomplete gamma functions, series + Lentz continued
// fraction (accuracy ~1e-14 for the arguments used here).
namespace detail {

inline double gamma_p_series(double a, double x) {
  double term = 1.0 / a;
  double sum = term;
  double ap = a;
  for (int n = 0; n < 500; ++n) {
    ap += 1.0;
    term *= x / ap;
    sum += term;
    if (std::abs(term) < std::abs(sum) * 1e-16) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

inline double gamma_q_cf(double a, double x) {
  const double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i <= 500; ++i) {
    const double an = -static_cast<double>(i) * (static_cast<double>(i) - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < 1e-16) break;
  }
  return h * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

}  // namespace detail

// upper regularized incomplete gamma Q(a, x)
inline double gamma_q(double a, double x) {
  if (a <= 0.0 || x < 0.0) throw usage_error("gamma_q: invalid arguments");
  if (x == 0.0) return 1.0;
  if (x < a + 1.0) return 1.0 - detail::gamma_p_series(a, x);
  return detail::gamma_q_cf(a, x);
}

// survival function of the chi-squared distribution with k dof
inline double chi2_sf(double x, double dof = 1.0) {
  if (x <= 0.0) return 1.0;
  return gamma_q(dof / 2.0, x / 2.0);
}

// Per-query correctness of two models on the same episode stream.
struct PairedPredictions {
  std::vector<std::uint8_t> a;
  std::vector<std::uint8_t> b;
  std::uint64_t seed = 0;  // provenance of the shared stream
};

struct McNemarResult {
  std::size_t b = 0;  // A correct, B wrong
  std::size_t c = 0;  // A wrong, B correct
  double chi2 = 0.0;
  double p_value = 0.0;
};

// continuity-corrected chi^2 = (|b-c| - 1)^2 / (b+c)
inline McNemarResult mcnemar_counts(std::size_t b, std::size_t c) {
  if (b + c == 0) throw usage_error("mcnemar: no discordant pairs, test undefined");
  McNemarResult r;
  r.b = b;
  r.c = c;
  const double diff = std::abs(static_cast<double>(b) - static_cast<double>(c)) - 1.0;
  r.chi2 = diff * diff / static_cast<double>(b + c);
  r.p_value = chi2_sf(r.chi2, 1.0);
  return r;
}

inline McNemarResult mcnemar(const PairedPredictions& pairs) {
  if (pairs.a.size() != pairs.b.size())
    throw usage_error("mcnemar: prediction streams differ in length");
  std::size_t b = 0, c = 0;
  for (std::size_t i = 0; i < pairs.a.size(); ++i) {
    if (pairs.a[i] && !pairs.b[i]) ++b;
    if (!pairs.a[i] && pairs.b[i]) ++c;
  }
  return mcnemar_counts(b, c);
}

struct SeedStats {
  double median = 0.0;
  double mean = 0.0;
  double stddev = 0.0;  // sample (n-1); 0 for a single value
};

// statistics over per-seed mean accuracies
inline SeedStats aggregate_seeds(std::vector<double> accuracies) {
  if (accuracies.empty()) throw usage_error("aggregate_seeds: empty input");
  SeedStats s;
  std::sort(accuracies.begin(), accuracies.end());
  const std::size_t n = accuracies.size();
  s.median = (n % 2 == 1) ? accuracies[n / 2]
                          : 0.5 * (accuracies[n / 2 - 1] + accuracies[n / 2]);
  for (double a : accuracies) s.mean += a;
  s.mean /= static_cast<double>(n);
  if (n > 1) {
    double var = 0.0;
    for (double a : accuracies) var += (a - s.mean) * (a - s.mean);
    s.stddev = std::sqrt(var / static_cast<double>(n - 1));
  }
  return s;
}

}  // namespace saff

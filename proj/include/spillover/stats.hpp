#pragma once

#include <cmath>
#include <limits>
#include <numeric>
#include <span>

#include "spillover/common.hpp"

namespace spillover::stats {

inline constexpr double kBetaTolerance = 1e-12;
inline constexpr int kBetaMaxIterations = 300;

namespace detail {

// Continued fraction for I_x(a, b), modified Lentz.
inline double beta_continued_fraction(double a, double b, double x) {
  constexpr double tiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kBetaMaxIterations; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kBetaTolerance) return h;
  }
  throw Error("incomplete beta continued fraction did not converge");
}

}  // namespace detail

// Regularized incomplete beta I_x(a, b). `y` must equal 1 - x; passing it
// separately keeps precision when x is close to 1.
inline double regularized_incomplete_beta(double x, double y, double a, double b) {
  if (!(a > 0.0) || !(b > 0.0)) throw Error("incomplete beta needs a, b > 0");
  if (x <= 0.0) return 0.0;
  if (y <= 0.0) return 1.0;
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log(y);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * detail::beta_continued_fraction(b, a, y) / b;
}

inline double regularized_incomplete_beta(double x, double a, double b) {
  return regularized_incomplete_beta(x, 1.0 - x, a, b);
}

// P(|T| >= |t|) for Student's t with `df` degrees of freedom.
inline double student_t_two_sided_p(double t, double df) {
  if (!(df > 0.0)) throw Error("degrees of freedom must be positive");
  if (std::isnan(t)) throw Error("t statistic is NaN");
  if (t == 0.0) return 1.0;
  if (std::isinf(t)) return 0.0;
  const double t2 = t * t;
  const double x = df / (df + t2);
  const double y = t2 / (df + t2);
  return regularized_incomplete_beta(x, y, df / 2.0, 0.5);
}

inline double student_t_cdf(double t, double df) {
  const double tail = 0.5 * student_t_two_sided_p(t, df);
  return t > 0.0 ? 1.0 - tail : tail;
}

struct TTestResult {
  double mean = 0.0;
  std::size_t n = 0;
  double t = 0.0;
  std::size_t df = 0;
  double p_two_sided = 1.0;
  bool significant_at_05 = false;

  bool operator==(const TTestResult&) const = default;
};

inline double mean(std::span<const double> xs) {
  if (xs.empty()) throw Error("mean of an empty sequence");
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

inline double sample_sd(std::span<const double> xs) {
  if (xs.size() < 2) throw Error("sample standard deviation needs n >= 2");
  const double m = mean(xs);
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

// One-sample t-test of H0: mean = 0.
inline TTestResult one_sample_ttest(std::span<const double> deltas, double alpha = 0.05) {
  if (deltas.size() < 2) throw Error("t-test needs at least 2 observations");
  const double sd = sample_sd(deltas);
  if (!(sd > 0.0)) throw Error("t-test undefined for zero variance");
  TTestResult r;
  r.n = deltas.size();
  r.df = r.n - 1;
  r.mean = mean(deltas);
  r.t = r.mean / (sd / std::sqrt(static_cast<double>(r.n)));
  r.p_two_sided = student_t_two_sided_p(r.t, static_cast<double>(r.df));
  r.significant_at_05 = r.p_two_sided < alpha;
  return r;
}

}  // namespace spillover::stats

#pragma once

#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

namespace baaf {

inline double sample_mean(std::span<const double> x) {
  if (x.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

/// Unbiased (n - 1) variance; zero for fewer than two values.
inline double sample_variance(std::span<const double> x) {
  if (x.size() < 2) return 0.0;
  const double m = sample_mean(x);
  double ss = 0;
  for (double v : x) ss += (v - m) * (v - m);
  return ss / static_cast<double>(x.size() - 1);
}

inline double sample_std(std::span<const double> x) { return std::sqrt(sample_variance(x)); }

namespace detail {

// Continued fraction for I_x(a, b), modified Lentz.
inline double beta_cf(double a, double b, double x) {
  constexpr int kMaxIter = 500;
  constexpr double kEps = 1e-16, kTiny = 1e-300;
  const double qab = a + b, qap = a + 1, qam = a - 1;
  double c = 1, d = 1 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1) < kEps) break;
  }
  return h;
}

}  // namespace detail

/// Regularized incomplete beta function I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
  if (a <= 0 || b <= 0) throw std::domain_error("incomplete_beta needs a, b > 0");
  if (x <= 0) return 0;
  if (x >= 1) return 1;
  const double lbt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double bt = std::exp(lbt);
  if (x < (a + 1) / (a + b + 2)) return bt * detail::beta_cf(a, b, x) / a;
  return 1 - bt * detail::beta_cf(b, a, 1 - x) / b;
}

/// Two-sided tail probability of Student's t with `dof` degrees of freedom.
inline double student_t_two_sided(double t, double dof) {
  if (!std::isfinite(t)) return 0.0;
  return incomplete_beta(dof / 2, 0.5, dof / (dof + t * t));
}

struct WelchResult {
  double t = 0;
  double dof = 0;
  double p = 1;
};

/// Welch's unequal-variance t-test with Welch-Satterthwaite degrees of freedom.
/// When both samples have zero variance: p = 1 for equal means, p = 0 otherwise.
inline WelchResult welch_ttest(std::span<const double> x, std::span<const double> y) {
  if (x.size() < 2 || y.size() < 2) throw std::invalid_argument("welch_ttest needs at least two values per sample");
  const double mx = sample_mean(x), my = sample_mean(y);
  const double vx = sample_variance(x) / static_cast<double>(x.size());
  const double vy = sample_variance(y) / static_cast<double>(y.size());
  WelchResult r;
  const double nx = static_cast<double>(x.size()), ny = static_cast<double>(y.size());
  if (vx + vy == 0) {
    r.dof = nx + ny - 2;
    if (mx == my) {
      r.t = 0;
      r.p = 1;
    } else {
      r.t = mx > my ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
      r.p = 0;
    }
    return r;
  }
  r.t = (mx - my) / std::sqrt(vx + vy);
  r.dof = (vx + vy) * (vx + vy) / (vx * vx / (nx - 1) + vy * vy / (ny - 1));
  r.p = student_t_two_sided(r.t, r.dof);
  return r;
}

inline WelchResult welch_ttest(const std::vector<double>& x, const std::vector<double>& y) {
  return welch_ttest(std::span<const double>(x), std::span<const double>(y));
}

}  // namespace baaf

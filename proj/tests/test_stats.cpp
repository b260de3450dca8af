#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "baaf/stats.hpp"

using namespace baaf;

namespace {

// Two-sided Student-t tail by composite Simpson integration of the density over [0, |t|].
double t_tail_by_integration(double t, double dof) {
  const double c = std::exp(std::lgamma((dof + 1) / 2) - std::lgamma(dof / 2)) / std::sqrt(dof * std::numbers::pi);
  auto pdf = [&](double x) { return c * std::pow(1 + x * x / dof, -(dof + 1) / 2); };
  const double a = std::abs(t);
  const int n = 200000;
  const double h = a / n;
  double s = pdf(0) + pdf(a);
  for (int i = 1; i < n; ++i) s += (i % 2 ? 4 : 2) * pdf(i * h);
  return 1 - 2 * s * h / 3;
}

struct Ref {
  double t, dof;
};

Ref welch_by_hand(const std::vector<double>& x, const std::vector<double>& y) {
  auto mv = [](const std::vector<double>& v) {
    double m = 0, s = 0;
    for (double a : v) m += a;
    m /= static_cast<double>(v.size());
    for (double a : v) s += (a - m) * (a - m);
    return std::pair{m, s / static_cast<double>(v.size() - 1)};
  };
  const auto [mx, sx] = mv(x);
  const auto [my, sy] = mv(y);
  const double nx = static_cast<double>(x.size()), ny = static_cast<double>(y.size());
  const double a = sx / nx, b = sy / ny;
  return {(mx - my) / std::sqrt(a + b), (a + b) * (a + b) / (a * a / (nx - 1) + b * b / (ny - 1))};
}

}  // namespace

TEST(Descriptive, MeanVarianceStd) {
  const std::vector<double> v{2, 4, 4, 4, 5, 5, 7, 9};
  EXPECT_DOUBLE_EQ(sample_mean(v), 5.0);
  EXPECT_DOUBLE_EQ(sample_variance(v), 32.0 / 7);
  EXPECT_DOUBLE_EQ(sample_std(v), std::sqrt(32.0 / 7));
  EXPECT_EQ(sample_variance(std::vector<double>{3}), 0.0);
  EXPECT_TRUE(std::isnan(sample_mean(std::vector<double>{})));
}

TEST(IncompleteBeta, ClosedFormsAndSymmetry) {
  for (double x : {0.0, 0.1, 0.37, 0.5, 0.9, 1.0}) {
    EXPECT_NEAR(incomplete_beta(1, 1, x), x, 1e-14);
    EXPECT_NEAR(incomplete_beta(2, 1, x), x * x, 1e-14);
    // I_x(2, 3) = 12 * integral of t(1-t)^2 = 6x^2 - 8x^3 + 3x^4
    EXPECT_NEAR(incomplete_beta(2, 3, x), 6 * x * x - 8 * x * x * x + 3 * x * x * x * x, 1e-13);
    EXPECT_NEAR(incomplete_beta(2.5, 0.7, x), 1 - incomplete_beta(0.7, 2.5, 1 - x), 1e-13);
  }
  EXPECT_THROW(incomplete_beta(0, 1, 0.5), std::domain_error);
}

TEST(StudentT, TailMatchesIntegration) {
  for (double dof : {1.0, 2.5, 8.0, 30.0, 200.0})
    for (double t : {0.0, 0.3, 1.0, 2.0, 4.5}) EXPECT_NEAR(student_t_two_sided(t, dof), t_tail_by_integration(t, dof), 1e-9);
  EXPECT_NEAR(student_t_two_sided(1.0, 1.0), 0.5, 1e-14);  // Cauchy: 1 - 2 atan(1)/pi
}

TEST(Welch, ReferenceExample) {
  const auto r = welch_ttest(std::vector<double>{1, 2, 3, 4, 5}, std::vector<double>{3, 4, 5, 6, 7});
  EXPECT_DOUBLE_EQ(r.t, -2.0);
  EXPECT_DOUBLE_EQ(r.dof, 8.0);
  EXPECT_NEAR(r.p, t_tail_by_integration(-2.0, 8.0), 1e-9);
  EXPECT_NEAR(r.p, 0.08051623795726257, 1e-9);
}

TEST(Welch, IdentitySymmetryAndConventions) {
  const std::vector<double> x{0.3, 1.2, -0.4, 2.2}, y{1.0, 1.5, 0.2};
  const auto same = welch_ttest(x, x);
  EXPECT_EQ(same.t, 0.0);
  EXPECT_NEAR(same.p, 1.0, 1e-14);
  const auto a = welch_ttest(x, y), b = welch_ttest(y, x);
  EXPECT_EQ(a.t, -b.t);
  EXPECT_EQ(a.p, b.p);
  EXPECT_EQ(a.dof, b.dof);
  EXPECT_EQ(welch_ttest(std::vector<double>{2, 2}, std::vector<double>{2, 2, 2}).p, 1.0);
  EXPECT_EQ(welch_ttest(std::vector<double>{2, 2}, std::vector<double>{3, 3}).p, 0.0);
  EXPECT_THROW(welch_ttest(std::vector<double>{1}, y), std::invalid_argument);
}

TEST(Welch, MatchesIndependentOracleOnRandomPairs) {
  std::mt19937_64 rng(31);
  for (int k = 0; k < 20; ++k) {
    std::normal_distribution<double> dx(0, 0.5 + k * 0.1), dy(0.3 * (k % 5), 1.0 + 0.05 * k);
    std::vector<double> x(2 + rng() % 30), y(2 + rng() % 30);
    for (auto& v : x) v = dx(rng);
    for (auto& v : y) v = dy(rng);
    const auto r = welch_ttest(x, y);
    const auto h = welch_by_hand(x, y);
    EXPECT_NEAR(r.t, h.t, 1e-12 * std::max(1.0, std::abs(h.t)));
    EXPECT_NEAR(r.dof, h.dof, 1e-10 * h.dof);
    EXPECT_NEAR(r.p, t_tail_by_integration(h.t, h.dof), 1e-6);
    EXPECT_GE(r.p, 0.0);
    EXPECT_LE(r.p, 1.0);
  }
}

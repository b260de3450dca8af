#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "baaf/metrics.hpp"

using namespace baaf;

namespace {

using Mask = Tensor<float>;

Mask blob_mask(std::size_t h, std::size_t w, std::mt19937_64& rng, double density = 0.5) {
  // Random rectangles and scattered pixels so boundaries have varied shapes; may be empty.
  Mask m({1, h, w});
  std::uniform_int_distribution<std::size_t> ry(0, h - 1), rx(0, w - 1);
  std::uniform_real_distribution<double> u(0, 1);
  const int rects = static_cast<int>(rng() % 4);
  for (int r = 0; r < rects; ++r) {
    std::size_t y0 = ry(rng), y1 = ry(rng), x0 = rx(rng), x1 = rx(rng);
    if (y0 > y1) std::swap(y0, y1);
    if (x0 > x1) std::swap(x0, x1);
    for (std::size_t y = y0; y <= y1; ++y)
      for (std::size_t x = x0; x <= x1; ++x) m[y * w + x] = 1;
  }
  for (std::size_t i = 0; i < m.size(); ++i)
    if (u(rng) < 0.02 * density) m[i] = 1 - m[i];
  return m;
}

struct Pt {
  long r, c;
};

// Boundary by definition: foreground with a 4-neighbour outside the image or in background.
std::vector<Pt> boundary_oracle(const Mask& m) {
  const long h = static_cast<long>(m.dim(1)), w = static_cast<long>(m.dim(2));
  auto fg = [&](long y, long x) { return y >= 0 && x >= 0 && y < h && x < w && m[static_cast<std::size_t>(y * w + x)] > 0.5f; };
  std::vector<Pt> out;
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x)
      if (fg(y, x) && (!fg(y - 1, x) || !fg(y + 1, x) || !fg(y, x - 1) || !fg(y, x + 1))) out.push_back({y, x});
  return out;
}

double dist_to(const Pt& p, const std::vector<Pt>& b) {
  double best = INFINITY;
  for (const auto& q : b) best = std::min(best, std::hypot(static_cast<double>(p.r - q.r), static_cast<double>(p.c - q.c)));
  return best;
}

struct DistOracle {
  double hd, assd, abd;
};

DistOracle dist_oracle(const std::vector<Pt>& a, const std::vector<Pt>& b) {
  double hd = 0, sa = 0, sb = 0;
  for (const auto& p : a) {
    const double d = dist_to(p, b);
    hd = std::max(hd, d);
    sa += d;
  }
  for (const auto& q : b) {
    const double d = dist_to(q, a);
    hd = std::max(hd, d);
    sb += d;
  }
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  return {hd, (sa + sb) / (na + nb), 0.5 * (sa / na + sb / nb)};
}

BoundarySet points(std::vector<Pixel> px) {
  BoundarySet b;
  b.pixels = std::move(px);
  return b;
}

}  // namespace

TEST(Confusion, Examples) {
  Mask gt({1, 10, 10});
  for (std::size_t i = 0; i < 10; ++i) gt[i * 10 + 3] = 1;
  auto c = confusion(gt, gt);
  EXPECT_EQ(c.tp, 10u);
  EXPECT_EQ(c.tn, 90u);
  EXPECT_EQ(c.fp + c.fn, 0u);
  Mask inv = gt;
  for (auto& v : inv.storage()) v = 1 - v;
  c = confusion(inv, gt);
  EXPECT_EQ(c.tp + c.tn, 0u);
  Mask q({1, 4, 4});
  for (std::size_t i = 0; i < 4; ++i) q[i] = 1;
  c = confusion(Mask({1, 4, 4}, 1.f), q);
  EXPECT_EQ(c.tp, 4u);
  EXPECT_EQ(c.fp, 12u);
  EXPECT_EQ(c.fn, 0u);
  EXPECT_EQ(c.tn, 0u);
  EXPECT_EQ(c.total(), 16u);
  Mask bad = q;
  bad[5] = 0.5f;
  EXPECT_THROW(confusion(bad, q), std::invalid_argument);
  EXPECT_THROW(confusion(q, Mask({1, 4, 5})), ShapeError);
}

TEST(AreaMetrics, ArithmeticAndConventions) {
  auto m = area_metrics({2, 2, 10, 2});
  EXPECT_DOUBLE_EQ(m.dice, 0.5);
  EXPECT_DOUBLE_EQ(m.jaccard, 1.0 / 3);
  EXPECT_DOUBLE_EQ(m.precision, 0.5);
  EXPECT_DOUBLE_EQ(m.recall, 0.5);
  EXPECT_DOUBLE_EQ(m.specificity, 10.0 / 12);
  EXPECT_EQ(m.convention, 0u);
  m = area_metrics({5, 0, 7, 0});
  EXPECT_EQ(m.dice + m.jaccard + m.precision + m.recall + m.specificity, 5.0);
  m = area_metrics({0, 0, 16, 0});  // both masks empty
  EXPECT_EQ(m.dice, 1.0);
  EXPECT_EQ(m.recall, 1.0);
  EXPECT_EQ(m.precision, 1.0);
  EXPECT_EQ(m.specificity, 1.0);
  m = area_metrics({0, 0, 10, 6});  // empty prediction, nonempty truth
  EXPECT_EQ(m.dice, 0.0);
  EXPECT_EQ(m.precision, 0.0);
  EXPECT_EQ(m.recall, 0.0);
  EXPECT_NE(m.convention & (1u << 2), 0u);
  m = area_metrics({4, 0, 0, 0});  // all foreground, both masks full
  EXPECT_EQ(m.specificity, 1.0);
  m = area_metrics({4, 0, 0, 2});
  EXPECT_EQ(m.specificity, 0.0);
}

TEST(AreaMetrics, DiceJaccardIdentityAndSymmetry) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 300; ++i) {
    const auto a = blob_mask(32, 32, rng), b = blob_mask(32, 32, rng);
    const auto m = area_metrics(confusion(a, b)), n = area_metrics(confusion(b, a));
    EXPECT_NEAR(m.dice, 2 * m.jaccard / (1 + m.jaccard), 1e-12);
    EXPECT_LE(m.jaccard, m.dice);
    EXPECT_EQ(m.dice, n.dice);
    EXPECT_EQ(m.jaccard, n.jaccard);
    EXPECT_EQ(m.precision, n.recall);
    for (double v : {m.dice, m.jaccard, m.precision, m.recall, m.specificity}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Boundary, Examples) {
  EXPECT_EQ(extract_boundary(Mask({1, 6, 7}, 1.f)).size(), 2u * 6 + 2u * 7 - 4);
  Mask one({1, 5, 5});
  one[12] = 1;
  auto b = extract_boundary(one);
  ASSERT_EQ(b.size(), 1u);
  EXPECT_EQ(b.pixels[0], (Pixel{2, 2}));
  Mask sq({1, 9, 9});
  for (std::size_t y = 2; y < 7; ++y)
    for (std::size_t x = 2; x < 7; ++x) sq[y * 9 + x] = 1;
  EXPECT_EQ(extract_boundary(sq).size(), 16u);
  EXPECT_TRUE(extract_boundary(Mask({1, 4, 4})).empty());
  EXPECT_EQ(extract_boundary(Mask({3, 3}, 1.f)).size(), 8u);
}

TEST(Boundary, MatchesDefinitionOnRandomMasks) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 100; ++i) {
    const auto m = blob_mask(1 + rng() % 20, 1 + rng() % 20, rng, 10);
    const auto got = extract_boundary(m);
    const auto want = boundary_oracle(m);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t k = 0; k < want.size(); ++k) {
      EXPECT_EQ(got.pixels[k].row, want[k].r);
      EXPECT_EQ(got.pixels[k].col, want[k].c);
    }
  }
}

TEST(BoundaryDistances, Examples) {
  const auto a = points({{0, 0}}), b = points({{3, 4}});
  EXPECT_EQ(*hausdorff(a, b).value, 5.0);
  EXPECT_EQ(*assd(a, b).value, 5.0);
  EXPECT_EQ(*abd(a, b).value, 5.0);
  EXPECT_EQ(*hausdorff(a, a).value, 0.0);
  const auto e = points({});
  EXPECT_FALSE(hausdorff(a, e).defined());
  EXPECT_FALSE(assd(e, a).defined());
  EXPECT_FALSE(abd(e, e).defined());
  EXPECT_FALSE(hausdorff(a, e).reason.empty());
  // |a| = 1, |b| = 3: the pooled and the averaged means differ.
  const auto p = points({{0, 0}}), q = points({{0, 1}, {0, 0}, {0, 2}});
  EXPECT_DOUBLE_EQ(*assd(p, q).value, (0 + (1 + 0 + 2)) / 4.0);
  EXPECT_DOUBLE_EQ(*abd(p, q).value, 0.5 * (0 + 1.0));
}

TEST(BoundaryDistances, MatchBruteForceOracleOnGrid) {
  std::mt19937_64 rng(3);
  int compared = 0, differ = 0;
  for (int i = 0; i < 250; ++i) {
    const std::size_t h = 2 + rng() % 63, w = 2 + rng() % 63;
    const auto ma = blob_mask(h, w, rng), mb = blob_mask(h, w, rng);
    const auto ba = extract_boundary(ma), bb = extract_boundary(mb);
    const auto oa = boundary_oracle(ma), ob = boundary_oracle(mb);
    const auto hd = hausdorff(ba, bb), as = assd(ba, bb), ab = abd(ba, bb);
    if (oa.empty() || ob.empty()) {
      EXPECT_FALSE(hd.defined() || as.defined() || ab.defined());
      continue;
    }
    const auto o = dist_oracle(oa, ob);
    ++compared;
    EXPECT_EQ(*hd.value, o.hd);
    EXPECT_NEAR(*as.value, o.assd, 1e-12);
    EXPECT_NEAR(*ab.value, o.abd, 1e-12);
    EXPECT_LE(*as.value, *hd.value + 1e-12);
    EXPECT_EQ(*hausdorff(bb, ba).value, *hd.value);
    EXPECT_NEAR(*assd(bb, ba).value, *as.value, 1e-12);
    EXPECT_NEAR(*abd(bb, ba).value, *ab.value, 1e-12);
    if (oa.size() == ob.size()) EXPECT_DOUBLE_EQ(*ab.value, *as.value);
    if (std::abs(*ab.value - *as.value) > 1e-9) ++differ;
  }
  EXPECT_GE(compared, 200);
  EXPECT_GT(differ, 0);
}

TEST(BoundaryDistances, TransformEqualsPairwiseSearch) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 60; ++i) {
    const auto ba = extract_boundary(blob_mask(40, 33, rng)), bb = extract_boundary(blob_mask(40, 33, rng));
    if (ba.empty() || bb.empty()) continue;
    EXPECT_EQ(directed_distances(ba, bb), detail::directed_distances_brute(ba, bb));
  }
}

TEST(BoundaryDistances, ZeroIffEqualSets) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 50; ++i) {
    const auto m = blob_mask(20, 20, rng);
    const auto b = extract_boundary(m);
    if (b.empty()) continue;
    EXPECT_EQ(*hausdorff(b, b).value, 0.0);
    Mask n = m;
    const std::size_t k = rng() % n.size();
    n[k] = 1 - n[k];
    const auto c = extract_boundary(n);
    if (c.empty()) continue;
    const bool same = c.pixels == b.pixels;
    EXPECT_EQ(*hausdorff(b, c).value == 0.0, same);
    EXPECT_EQ(*assd(b, c).value == 0.0, same);
  }
}

TEST(Curves, SeparableAndInverted) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<float> u(0, 1);
  Mask gt({1, 32, 32}), s({1, 32, 32}), inv({1, 32, 32});
  for (std::size_t i = 0; i < gt.size(); ++i) {
    gt[i] = static_cast<float>(rng() & 1);
    s[i] = gt[i] > 0.5f ? 0.6f + 0.4f * u(rng) : 0.4f * u(rng);
  }
  EXPECT_DOUBLE_EQ(curves({s}, {gt}).auc_roc, 1.0);
  // Random scores: inverting maps AUC to 1 - AUC up to the threshold grid.
  for (std::size_t i = 0; i < gt.size(); ++i) {
    s[i] = u(rng);
    inv[i] = 1 - s[i];
  }
  const auto a = curves({s}, {gt}), b = curves({inv}, {gt});
  EXPECT_NEAR(a.auc_roc + b.auc_roc, 1.0, 1e-3);
  EXPECT_THROW(curves({}, {}), std::invalid_argument);
  EXPECT_THROW(curves({s}, {Mask({1, 32, 32})}), std::invalid_argument);
}

TEST(Curves, IndependentScoresNearHalfAndMonotone) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<float> u(0, 1);
  std::vector<Mask> preds, gts;
  for (int k = 0; k < 20; ++k) {
    Mask g({1, 64, 64}), p({1, 64, 64});
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] = u(rng) < 0.3f ? 1.f : 0.f;
      p[i] = u(rng);
    }
    preds.push_back(p);
    gts.push_back(g);
  }
  const auto c = curves(preds, gts);
  EXPECT_NEAR(c.auc_roc, 0.5, 0.02);
  EXPECT_GE(c.auc_pr, 0.0);
  EXPECT_LE(c.auc_pr, 1.0);
  EXPECT_EQ(c.points.size(), 256u);
  EXPECT_EQ(c.roc.front(), (std::pair{0.0, 0.0}));
  EXPECT_EQ(c.roc.back(), (std::pair{1.0, 1.0}));
  for (std::size_t i = 1; i < c.roc.size(); ++i) {
    EXPECT_GE(c.roc[i].first, c.roc[i - 1].first);
    EXPECT_GE(c.roc[i].second, c.roc[i - 1].second);
  }
}

TEST(Curves, PointsMatchDirectCounting) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<float> u(0, 1);
  Mask g({1, 16, 16}), p({1, 16, 16});
  for (std::size_t i = 0; i < g.size(); ++i) {
    g[i] = static_cast<float>(rng() & 1);
    p[i] = std::round(u(rng) * 20) / 20;  // lands exactly on some thresholds
  }
  const std::vector<double> th{0.0, 0.25, 0.5, 0.75, 1.0};
  const auto c = curves({p}, {g}, th);
  for (std::size_t k = 0; k < th.size(); ++k) {
    double tp = 0, fp = 0, np = 0, nn = 0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const bool pos = p[i] >= th[k];
      (g[i] > 0.5f ? np : nn) += 1;
      if (pos) (g[i] > 0.5f ? tp : fp) += 1;
    }
    EXPECT_DOUBLE_EQ(c.points[k].tpr, tp / np);
    EXPECT_DOUBLE_EQ(c.points[k].fpr, fp / nn);
    if (tp + fp > 0) EXPECT_DOUBLE_EQ(c.points[k].precision, tp / (tp + fp));
  }
}

TEST(Evaluate, PerfectPredictorAndTieRule) {
  std::mt19937_64 rng(9);
  std::vector<Mask> gts, probs;
  std::vector<std::string> ids;
  for (int i = 0; i < 5; ++i) {
    Mask g;
    do g = blob_mask(24, 24, rng);
    while (extract_boundary(g).empty());
    gts.push_back(g);
    probs.push_back(g);
    ids.push_back("s" + std::to_string(i));
  }
  auto r = evaluate_predictions(probs, gts, ids);
  EXPECT_EQ(r["dice"].mean, 1.0);
  EXPECT_EQ(r["hd"].mean, 0.0);
  EXPECT_EQ(r["dice"].std, 0.0);
  // 0.5 everywhere binarizes to all foreground.
  r = evaluate_predictions({Mask({1, 24, 24}, 0.5f)}, {gts[0]}, {"half"});
  EXPECT_EQ(r.images[0].area.recall, 1.0);
  EXPECT_EQ(r.images[0].area.specificity, 0.0);
}

TEST(Evaluate, EmptyPredictionsExcludedFromBoundaryMeans) {
  std::mt19937_64 rng(10);
  std::vector<Mask> gts, probs;
  for (int i = 0; i < 4; ++i) {
    Mask g;
    do g = blob_mask(16, 16, rng);
    while (extract_boundary(g).empty());
    gts.push_back(g);
    probs.push_back(i < 2 ? Mask({1, 16, 16}) : g);
  }
  const auto r = evaluate_predictions(probs, gts, {"a", "b", "c", "d"});
  EXPECT_EQ(r["hd"].count, 2u);
  EXPECT_EQ(r["hd"].excluded, 2u);
  EXPECT_EQ(r["dice"].count, 4u);
  EXPECT_DOUBLE_EQ(r["dice"].mean, 0.5);
}

TEST(Report, CsvMeansEqualRecomputedRowMeans) {
  std::mt19937_64 rng(11);
  std::vector<Mask> gts, probs;
  std::vector<std::string> ids;
  for (int i = 0; i < 12; ++i) {
    gts.push_back(blob_mask(20, 20, rng));
    probs.push_back(blob_mask(20, 20, rng));
    ids.push_back("img" + std::to_string(i));
  }
  const auto r = evaluate_predictions(probs, gts, ids);
  const auto path = std::filesystem::temp_directory_path() / "baaf_report.csv";
  write_report_csv(r, path);
  std::ifstream is(path);
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "id,dice,jaccard,precision,recall,specificity,hd,assd,abd,defined_flags");
  std::vector<double> sum(8, 0);
  std::vector<int> cnt(8, 0);
  std::vector<std::string> mean_row;
  while (std::getline(is, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    f.resize(10);
    if (f[0] == "mean") {
      mean_row = f;
      continue;
    }
    if (f[0] == "std") continue;
    for (int k = 0; k < 8; ++k)
      if (!f[1 + k].empty()) sum[k] += std::stod(f[1 + k]), ++cnt[k];
  }
  ASSERT_EQ(mean_row.size(), 10u);
  for (int k = 0; k < 8; ++k) {
    if (cnt[k] == 0) continue;
    EXPECT_NEAR(std::stod(mean_row[1 + k]), sum[k] / cnt[k], 1e-12) << metric_names()[k];
  }
  EXPECT_EQ(format_mean_std("dice", MetricSummary{0.12341, 0.05671, 3, 0}), "12.34±5.67");
  EXPECT_EQ(format_mean_std("hd", MetricSummary{3.5, 0.25, 3, 0}), "3.50±0.25");
  EXPECT_EQ(format_mean_std("hd", MetricSummary{0, 0, 0, 3}), "n/a");
}

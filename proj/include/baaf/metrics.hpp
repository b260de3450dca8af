#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "baaf/stats.hpp"
#include "baaf/tensor.hpp"

namespace baaf {

struct ConfusionCounts {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::size_t total() const { return tp + fp + tn + fn; }
};

namespace detail {

inline void require_binary(const Tensor<float>& t, const char* what) {
  for (float v : t.storage())
    if (v != 0.f && v != 1.f) throw std::invalid_argument(std::string(what) + " mask is not binary");
}

// Spatial extent of a 1 x H x W or H x W mask.
inline std::pair<std::size_t, std::size_t> mask_hw(const Tensor<float>& m) {
  if (m.rank() == 2) return {m.dim(0), m.dim(1)};
  if (m.rank() == 3 && m.dim(0) == 1) return {m.dim(1), m.dim(2)};
  throw ShapeError("expected an H x W or 1 x H x W mask, got " + shape_str(m.shape()));
}

}  // namespace detail

inline ConfusionCounts confusion(const Tensor<float>& pred, const Tensor<float>& gt) {
  if (pred.shape() != gt.shape())
    throw ShapeError("confusion shape mismatch: " + shape_str(pred.shape()) + " vs " + shape_str(gt.shape()));
  detail::require_binary(pred, "prediction");
  detail::require_binary(gt, "ground-truth");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0.f, g = gt[i] != 0.f;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

/// Area metrics. A 0/0 ratio takes the value 1 when both masks lack the
/// relevant class and 0 otherwise; such entries are flagged in `convention`.
struct AreaMetrics {
  double dice = 0, jaccard = 0, precision = 0, recall = 0, specificity = 0;
  // bit i set: metric i (dice, jaccard, precision, recall, specificity) fell back to a convention
  unsigned convention = 0;
};

inline AreaMetrics area_metrics(const ConfusionCounts& c) {
  AreaMetrics m;
  auto ratio = [&](double num, double den, bool both_empty, unsigned bit) {
    if (den > 0) return num / den;
    m.convention |= 1u << bit;
    return both_empty ? 1.0 : 0.0;
  };
  const double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp), tn = static_cast<double>(c.tn),
               fn = static_cast<double>(c.fn);
  // TP+FP+FN == 0 means neither mask has foreground
  m.dice = ratio(2 * tp, 2 * tp + fp + fn, true, 0);
  m.jaccard = ratio(tp, tp + fp + fn, true, 1);
  m.precision = ratio(tp, tp + fp, c.fn == 0, 2);
  m.recall = ratio(tp, tp + fn, c.fp == 0, 3);
  m.specificity = ratio(tn, tn + fp, c.fn == 0, 4);
  return m;
}

// ---------------------------------------------------------------- boundaries

struct Pixel {
  int row = 0, col = 0;
  friend bool operator==(const Pixel&, const Pixel&) = default;
};

struct BoundarySet {
  std::vector<Pixel> pixels;  // row-major scan order
  std::size_t height = 0, width = 0;

  bool empty() const { return pixels.empty(); }
  std::size_t size() const { return pixels.size(); }
};

/// Foreground pixels with a 4-neighbour that is background or outside the image.
inline BoundarySet extract_boundary(const Tensor<float>& mask) {
  const auto [h, w] = detail::mask_hw(mask);
  detail::require_binary(mask, "boundary");
  BoundarySet b;
  b.height = h;
  b.width = w;
  auto fg = [&](long y, long x) {
    return y >= 0 && x >= 0 && y < static_cast<long>(h) && x < static_cast<long>(w) && mask[y * w + x] != 0.f;
  };
  for (long y = 0; y < static_cast<long>(h); ++y)
    for (long x = 0; x < static_cast<long>(w); ++x)
      if (fg(y, x) && (!fg(y - 1, x) || !fg(y + 1, x) || !fg(y, x - 1) || !fg(y, x + 1)))
        b.pixels.push_back({static_cast<int>(y), static_cast<int>(x)});
  return b;
}

namespace detail {

inline constexpr std::int64_t kInfSq = std::numeric_limits<std::int64_t>::max() / 4;

// Exact 1-D squared distance transform over the lower envelope of parabolas.
// Entries equal to kInfSq are not features.
inline void edt_1d(const std::vector<std::int64_t>& f, std::vector<std::int64_t>& d) {
  const std::size_t n = f.size();
  std::vector<std::int64_t> v;  // parabola apexes
  std::vector<double> z;        // envelope boundaries
  v.reserve(n);
  z.reserve(n + 1);
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q] >= kInfSq) continue;
    const double fq = static_cast<double>(f[q]) + static_cast<double>(q) * q;
    while (!v.empty()) {
      const auto p = static_cast<std::size_t>(v.back());
      const double s = (fq - (static_cast<double>(f[p]) + static_cast<double>(p) * p)) / (2.0 * (q - p));
      if (s <= z.back()) {
        v.pop_back();
        z.pop_back();
      } else {
        break;
      }
    }
    if (v.empty()) {
      v.push_back(static_cast<std::int64_t>(q));
      z.assign(1, -std::numeric_limits<double>::infinity());
    } else {
      const auto p = static_cast<std::size_t>(v.back());
      z.push_back((fq - (static_cast<double>(f[p]) + static_cast<double>(p) * p)) / (2.0 * (q - p)));
      v.push_back(static_cast<std::int64_t>(q));
    }
  }
  if (v.empty()) {
    std::fill(d.begin(), d.end(), kInfSq);
    return;
  }
  z.push_back(std::numeric_limits<double>::infinity());
  std::size_t k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const std::int64_t dq = static_cast<std::int64_t>(q) - v[k];
    d[q] = dq * dq + f[static_cast<std::size_t>(v[k])];
  }
}

// Squared Euclidean distance from every grid cell to the nearest pixel of `b`.
inline std::vector<std::int64_t> squared_distance_map(const BoundarySet& b) {
  const std::size_t h = b.height, w = b.width;
  std::vector<std::int64_t> g(h * w, kInfSq);
  for (const auto& p : b.pixels) g[static_cast<std::size_t>(p.row) * w + p.col] = 0;
  std::vector<std::int64_t> f(h), d(h);
  for (std::size_t x = 0; x < w; ++x) {
    for (std::size_t y = 0; y < h; ++y) f[y] = g[y * w + x];
    edt_1d(f, d);
    for (std::size_t y = 0; y < h; ++y) g[y * w + x] = d[y];
  }
  f.resize(w);
  d.resize(w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) f[x] = g[y * w + x];
    edt_1d(f, d);
    for (std::size_t x = 0; x < w; ++x) g[y * w + x] = d[x];
  }
  return g;
}

inline std::vector<double> directed_distances_brute(const BoundarySet& a, const BoundarySet& b) {
  std::vector<double> out;
  out.reserve(a.size());
  for (const auto& p : a.pixels) {
    std::int64_t best = kInfSq;
    for (const auto& q : b.pixels) {
      const std::int64_t dy = p.row - q.row, dx = p.col - q.col;
      best = std::min(best, dy * dy + dx * dx);
    }
    out.push_back(std::sqrt(static_cast<double>(best)));
  }
  return out;
}

}  // namespace detail

/// d(p, b) for every p in a, in a's order. Uses an exact distance transform
/// when both sets live on the same grid, otherwise pairwise search.
inline std::vector<double> directed_distances(const BoundarySet& a, const BoundarySet& b) {
  if (a.height != b.height || a.width != b.width || b.height == 0)
    return detail::directed_distances_brute(a, b);
  const auto dt = detail::squared_distance_map(b);
  std::vector<double> out;
  out.reserve(a.size());
  for (const auto& p : a.pixels)
    out.push_back(std::sqrt(static_cast<double>(dt[static_cast<std::size_t>(p.row) * b.width + p.col])));
  return out;
}

/// Boundary distance that may be undefined when either boundary is empty.
struct BoundaryDistance {
  std::optional<double> value;
  std::string reason;

  bool defined() const { return value.has_value(); }
};

namespace detail {

inline std::optional<BoundaryDistance> empty_guard(const BoundarySet& a, const BoundarySet& b) {
  if (a.empty() && b.empty()) return BoundaryDistance{std::nullopt, "both boundaries empty"};
  if (a.empty()) return BoundaryDistance{std::nullopt, "first boundary empty"};
  if (b.empty()) return BoundaryDistance{std::nullopt, "second boundary empty"};
  return std::nullopt;
}

inline double sum_in_order(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s;
}

}  // namespace detail

inline BoundaryDistance hausdorff(const BoundarySet& a, const BoundarySet& b) {
  if (auto e = detail::empty_guard(a, b)) return *e;
  const auto dab = directed_distances(a, b), dba = directed_distances(b, a);
  return {std::max(*std::max_element(dab.begin(), dab.end()), *std::max_element(dba.begin(), dba.end())), {}};
}

/// Pooled mean of both directed distance lists.
inline BoundaryDistance assd(const BoundarySet& a, const BoundarySet& b) {
  if (auto e = detail::empty_guard(a, b)) return *e;
  const auto dab = directed_distances(a, b), dba = directed_distances(b, a);
  return {(detail::sum_in_order(dab) + detail::sum_in_order(dba)) / static_cast<double>(a.size() + b.size()), {}};
}

/// Mean of the two directed average distances.
inline BoundaryDistance abd(const BoundarySet& a, const BoundarySet& b) {
  if (auto e = detail::empty_guard(a, b)) return *e;
  const auto dab = directed_distances(a, b), dba = directed_distances(b, a);
  return {0.5 * (detail::sum_in_order(dab) / static_cast<double>(a.size()) +
                 detail::sum_in_order(dba) / static_cast<double>(b.size())),
          {}};
}

// ---------------------------------------------------------------- curves

struct CurvePoint {
  double threshold = 0, precision = 0, recall = 0, tpr = 0, fpr = 0;
  bool precision_defined = true;
};

struct Curves {
  std::vector<CurvePoint> points;                  // one per threshold, ascending
  std::vector<std::pair<double, double>> roc;      // (fpr, tpr), sorted, endpoints included
  std::vector<std::pair<double, double>> pr;       // (recall, precision), sorted
  double auc_roc = 0, auc_pr = 0;
};

inline std::vector<double> even_thresholds(std::size_t n = 256) {
  std::vector<double> t(n);
  for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<double>(i) / static_cast<double>(n - 1);
  return t;
}

inline double trapezoid(const std::vector<std::pair<double, double>>& pts) {
  double a = 0;
  for (std::size_t i = 1; i < pts.size(); ++i)
    a += (pts[i].first - pts[i - 1].first) * 0.5 * (pts[i].second + pts[i - 1].second);
  return a;
}

/// Threshold sweep over pixels pooled across the dataset; a pixel is
/// foreground at threshold t when its score is >= t.
inline Curves curves(const std::vector<Tensor<float>>& preds, const std::vector<Tensor<float>>& gts,
                     const std::vector<double>& thresholds = even_thresholds()) {
  if (preds.empty()) throw std::invalid_argument("curves needs a non-empty dataset");
  if (preds.size() != gts.size()) throw std::invalid_argument("curves needs aligned prediction/mask lists");
  const std::size_t nt = thresholds.size();
  // bucket k collects scores s with thresholds[k-1] <= s < thresholds[k]
  std::vector<std::size_t> pos(nt + 1, 0), neg(nt + 1, 0);
  std::size_t npos = 0, nneg = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].shape() != gts[i].shape())
      throw ShapeError("curves shape mismatch: " + shape_str(preds[i].shape()) + " vs " + shape_str(gts[i].shape()));
    for (std::size_t j = 0; j < preds[i].size(); ++j) {
      const double s = preds[i][j];
      const std::size_t k =
          static_cast<std::size_t>(std::upper_bound(thresholds.begin(), thresholds.end(), s) - thresholds.begin());
      if (gts[i][j] != 0.f) {
        ++pos[k];
        ++npos;
      } else {
        ++neg[k];
        ++nneg;
      }
    }
  }
  if (npos == 0 || nneg == 0) throw std::invalid_argument("curves need both foreground and background pixels");
  Curves c;
  // pixels with bucket > k satisfy s >= thresholds[k]
  std::size_t tp = npos, fp = nneg;
  for (std::size_t k = 0; k < nt; ++k) {
    tp -= pos[k];
    fp -= neg[k];
    CurvePoint p;
    p.threshold = thresholds[k];
    p.tpr = p.recall = static_cast<double>(tp) / static_cast<double>(npos);
    p.fpr = static_cast<double>(fp) / static_cast<double>(nneg);
    p.precision_defined = tp + fp > 0;
    p.precision = p.precision_defined ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 1.0;
    c.points.push_back(p);
    c.roc.emplace_back(p.fpr, p.tpr);
    if (p.precision_defined) c.pr.emplace_back(p.recall, p.precision);
  }
  c.roc.emplace_back(0.0, 0.0);
  c.roc.emplace_back(1.0, 1.0);
  std::sort(c.roc.begin(), c.roc.end());
  std::sort(c.pr.begin(), c.pr.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first < b.first : a.second > b.second;
  });
  c.auc_roc = trapezoid(c.roc);
  c.auc_pr = trapezoid(c.pr);
  return c;
}

inline void write_curves_csv(const Curves& c, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "threshold,precision,recall,tpr,fpr\n" << std::setprecision(10);
  for (const auto& p : c.points)
    os << p.threshold << ',' << p.precision << ',' << p.recall << ',' << p.tpr << ',' << p.fpr << '\n';
}

// ---------------------------------------------------------------- reports

inline const std::array<const char*, 8>& metric_names() {
  static const std::array<const char*, 8> n{"dice", "jaccard", "precision", "recall", "specificity", "hd", "assd", "abd"};
  return n;
}

struct ImageMetrics {
  std::string id;
  AreaMetrics area;
  BoundaryDistance hd, assd, abd;

  std::optional<double> get(const std::string& name) const {
    if (name == "dice") return area.dice;
    if (name == "jaccard") return area.jaccard;
    if (name == "precision") return area.precision;
    if (name == "recall") return area.recall;
    if (name == "specificity") return area.specificity;
    if (name == "hd") return hd.value;
    if (name == "assd") return assd.value;
    if (name == "abd") return abd.value;
    throw std::invalid_argument("unknown metric '" + name + "'");
  }
};

struct MetricSummary {
  double mean = 0, std = 0;
  std::size_t count = 0, excluded = 0;
};

struct MetricReport {
  std::string fold;
  std::vector<ImageMetrics> images;
  std::map<std::string, MetricSummary> summary;

  const MetricSummary& operator[](const std::string& m) const { return summary.at(m); }
};

inline ImageMetrics image_metrics(const std::string& id, const Tensor<float>& pred, const Tensor<float>& gt) {
  ImageMetrics im;
  im.id = id;
  im.area = area_metrics(confusion(pred, gt));
  const auto bp = extract_boundary(pred), bg = extract_boundary(gt);
  im.hd = hausdorff(bp, bg);
  im.assd = assd(bp, bg);
  im.abd = abd(bp, bg);
  return im;
}

/// Aggregates per-image rows. Undefined boundary distances are left out of
/// the mean/std and counted in `excluded`. std uses the n - 1 denominator.
inline void summarize(MetricReport& r) {
  r.summary.clear();
  for (const char* name : metric_names()) {
    std::vector<double> vals;
    MetricSummary s;
    for (const auto& im : r.images) {
      if (auto v = im.get(name)) vals.push_back(*v);
      else ++s.excluded;
    }
    s.count = vals.size();
    s.mean = vals.empty() ? std::numeric_limits<double>::quiet_NaN() : sample_mean(vals);
    s.std = sample_std(vals);
    r.summary[name] = s;
  }
}

/// Binarizes probability maps at `threshold` (>= is foreground) and scores them.
inline MetricReport evaluate_predictions(const std::vector<Tensor<float>>& probs, const std::vector<Tensor<float>>& gts,
                                         const std::vector<std::string>& ids, double threshold = 0.5) {
  if (probs.size() != gts.size() || probs.size() != ids.size())
    throw std::invalid_argument("evaluate_predictions needs aligned lists");
  MetricReport r;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    Tensor<float> bin = probs[i];
    for (auto& v : bin.storage()) v = v >= threshold ? 1.f : 0.f;
    r.images.push_back(image_metrics(ids[i], bin, gts[i]));
  }
  summarize(r);
  return r;
}

inline std::string defined_flags(const ImageMetrics& im) {
  std::string f;
  for (unsigned b = 0; b < 5; ++b) f += (im.area.convention >> b) & 1u ? '0' : '1';
  f += im.hd.defined() ? '1' : '0';
  f += im.assd.defined() ? '1' : '0';
  f += im.abd.defined() ? '1' : '0';
  return f;
}

/// One row per image, then "mean" and "std" rows. defined_flags holds one
/// character per metric column: '1' computed, '0' convention or undefined.
/// Undefined distances are written as empty fields.
inline void write_report_csv(const MetricReport& r, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "id";
  for (const char* n : metric_names()) os << ',' << n;
  os << ",defined_flags\n" << std::setprecision(17);
  for (const auto& im : r.images) {
    os << im.id;
    for (const char* n : metric_names()) {
      os << ',';
      if (auto v = im.get(n)) os << *v;
    }
    os << ',' << defined_flags(im) << '\n';
  }
  for (const char* row : {"mean", "std"}) {
    os << row;
    for (const char* n : metric_names()) {
      const auto& s = r.summary.at(n);
      os << ',';
      if (s.count > 0) os << (std::string(row) == "mean" ? s.mean : s.std);
    }
    os << ",\n";
  }
}

/// "12.34±5.67"-style cell; area metrics are shown as percentages.
inline std::string format_mean_std(const std::string& metric, const MetricSummary& s) {
  const bool pct = metric != "hd" && metric != "assd" && metric != "abd";
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  if (s.count == 0) {
    os << "n/a";
  } else {
    os << (pct ? 100 * s.mean : s.mean) << "±" << (pct ? 100 * s.std : s.std);
  }
  return os.str();
}

}  // namespace baaf

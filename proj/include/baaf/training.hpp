#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "baaf/evaluation.hpp"
#include "baaf/network.hpp"
#include "baaf/ops.hpp"
#include "json.hpp"

namespace baaf {

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t epochs = 50;
  std::size_t batch_size = 4;
  double val_fraction = 0.2;
  std::size_t patience = 10;
  std::uint64_t seed = 1;
  bool deterministic = false;  // forces single-threaded evaluation
  std::size_t threads = 1;

  void validate() const {
    if (!(val_fraction > 0 && val_fraction < 1)) throw std::invalid_argument("validation fraction must be in (0, 1)");
    if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
    if (epochs < 1) throw std::invalid_argument("epoch cap must be >= 1");
    if (!(learning_rate > 0)) throw std::invalid_argument("learning rate must be positive");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"learning_rate", c.learning_rate}, {"epochs", c.epochs}, {"batch_size", c.batch_size},
       {"val_fraction", c.val_fraction},   {"patience", c.patience}, {"seed", c.seed},
       {"deterministic", c.deterministic}, {"threads", c.threads}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.val_fraction = j.value("val_fraction", c.val_fraction);
  c.patience = j.value("patience", c.patience);
  c.seed = j.value("seed", c.seed);
  c.deterministic = j.value("deterministic", c.deterministic);
  c.threads = j.value("threads", c.threads);
}

// ---------------------------------------------------------------- Adam

template <typename T>
struct AdamState {
  std::map<std::string, Tensor<T>> m, v;
  std::size_t t = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

/// One bias-corrected Adam update of every trainable parameter.
template <typename T>
void adam_step(ParameterStore<T>& params, const std::map<std::string, Tensor<T>>& grads, AdamState<T>& st, double lr) {
  for (const auto& [path, p] : params)
    if (p.trainable && !grads.count(path)) throw std::invalid_argument("missing gradient for parameter '" + path + "'");
  ++st.t;
  const double c1 = 1 - std::pow(st.beta1, static_cast<double>(st.t));
  const double c2 = 1 - std::pow(st.beta2, static_cast<double>(st.t));
  for (auto& [path, p] : params) {
    if (!p.trainable) continue;
    const auto& g = grads.at(path);
    if (g.shape() != p.value.shape())
      throw ShapeError("gradient for '" + path + "' has shape " + shape_str(g.shape()) + ", parameter " +
                       shape_str(p.value.shape()));
    auto [mi, _m] = st.m.try_emplace(path, p.value.shape());
    auto [vi, _v] = st.v.try_emplace(path, p.value.shape());
    auto& m = mi->second;
    auto& v = vi->second;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double gi = g[i];
      m[i] = static_cast<T>(st.beta1 * m[i] + (1 - st.beta1) * gi);
      v[i] = static_cast<T>(st.beta2 * v[i] + (1 - st.beta2) * gi * gi);
      const double mh = m[i] / c1, vh = v[i] / c2;
      p.value[i] = static_cast<T>(p.value[i] - lr * mh / (std::sqrt(vh) + st.eps));
    }
  }
}

// ---------------------------------------------------------------- folds

struct FoldPlan {
  std::size_t k = 0;
  std::vector<std::vector<std::size_t>> folds;

  std::vector<std::size_t> complement(std::size_t f) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < folds.size(); ++i)
      if (i != f) out.insert(out.end(), folds[i].begin(), folds[i].end());
    std::sort(out.begin(), out.end());
    return out;
  }
};

inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

/// Seeded shuffle, then contiguous folds; the first n % K folds get one extra index.
inline FoldPlan kfold_split(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("kfold_split needs K >= 2");
  if (n < k)
    throw std::invalid_argument("kfold_split needs n >= K, got n=" + std::to_string(n) + " K=" + std::to_string(k));
  const auto idx = shuffled_indices(n, detail::derive_seed(seed, "kfold"));
  FoldPlan plan;
  plan.k = k;
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t sz = n / k + (f < n % k ? 1 : 0);
    plan.folds.emplace_back(idx.begin() + static_cast<long>(pos), idx.begin() + static_cast<long>(pos + sz));
    std::sort(plan.folds.back().begin(), plan.folds.back().end());
    pos += sz;
  }
  return plan;
}

/// Splits a batch-sized chunking of `order`; a trailing single-item batch is
/// merged into the one before it so batch norm always sees >= 2 items.
inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order, std::size_t batch) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch)
    out.emplace_back(order.begin() + static_cast<long>(i),
                     order.begin() + static_cast<long>(std::min(order.size(), i + batch)));
  if (out.size() >= 2 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back()[0]);
    out.pop_back();
  }
  return out;
}

// ---------------------------------------------------------------- fit

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0, val_loss = 0, val_dice = 0;
};

struct FitResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_dice = -1;
  std::vector<std::size_t> train_indices, val_indices;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

struct Split {
  std::vector<std::size_t> train, val;
};

/// Seeded hold-out of round(fraction * n) samples (at least one). A
/// one-sample dataset validates on its training sample.
inline Split validation_split(std::size_t n, double fraction, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("cannot split an empty dataset");
  if (n == 1) return {{0}, {0}};
  const auto idx = shuffled_indices(n, detail::derive_seed(seed, "val-split"));
  std::size_t nv = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(n)));
  nv = std::clamp<std::size_t>(nv, 1, n - 1);
  Split s;
  s.val.assign(idx.begin(), idx.begin() + static_cast<long>(nv));
  s.train.assign(idx.begin() + static_cast<long>(nv), idx.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

inline std::vector<SegSample> select(const std::vector<SegSample>& data, const std::vector<std::size_t>& idx) {
  std::vector<SegSample> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(data.at(i));
  return out;
}

/// Mean BCE over every pixel of `samples` and mean per-image Dice, eval mode.
inline std::pair<double, double> validation_scores(Model<float>& model, const std::vector<SegSample>& samples,
                                                   std::size_t threads = 1) {
  std::vector<Tensor<float>> probs;
  MetricReport r = evaluate(model, samples, 0.5, threads, &probs);
  double acc = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& p = probs[i];
    const auto& y = samples[i].mask;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double pc = std::clamp(static_cast<double>(p[j]), kBceClamp, 1.0 - kBceClamp);
      acc -= y[j] * std::log(pc) + (1 - y[j]) * std::log(1 - pc);
    }
    count += p.size();
  }
  return {acc / static_cast<double>(count), r["dice"].mean};
}

/// Trains on `train_idx`, selects the epoch with the best validation Dice,
/// and leaves that checkpoint in `model`.
inline FitResult fit_split(Model<float>& model, const std::vector<SegSample>& data, const std::vector<std::size_t>& train_idx,
                           const std::vector<std::size_t>& val_idx, const TrainConfig& cfg,
                           const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (train_idx.empty() || val_idx.empty()) throw std::invalid_argument("fit needs non-empty train and validation sets");
  const auto val = select(data, val_idx);
  FitResult res;
  res.train_indices = train_idx;
  res.val_indices = val_idx;
  AdamState<float> adam;
  ParameterStore<float> best = model.params;
  std::size_t stagnant = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = train_idx;
    std::mt19937_64 rng(detail::derive_seed(cfg.seed, "epoch" + std::to_string(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    std::size_t loss_items = 0;
    for (const auto& batch : make_batches(order, cfg.batch_size)) {
      Tape<float> tape;
      Var<float> pred = forward(tape, model, stack_batch(data, batch, false), BnMode::train);
      Var<float> loss = bce_loss(pred, tape.constant(stack_batch(data, batch, true)));
      const double lv = loss.value()[0];
      if (!std::isfinite(lv))
        throw TrainingDiverged("training loss became non-finite at epoch " + std::to_string(epoch));
      tape.backward(loss);
      adam_step(model.params, tape.parameter_gradients(model.params).grads, adam, cfg.learning_rate);
      loss_sum += lv * static_cast<double>(batch.size());
      loss_items += batch.size();
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(loss_items);
    std::tie(rec.val_loss, rec.val_dice) = validation_scores(model, val, cfg.deterministic ? 1 : cfg.threads);
    res.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (rec.val_dice > res.best_val_dice) {
      res.best_val_dice = rec.val_dice;
      res.best_epoch = epoch;
      best = model.params;
      stagnant = 0;
    } else {
      ++stagnant;
    }
    if (stagnant >= cfg.patience) break;
  }
  model.params = std::move(best);
  return res;
}

inline FitResult fit(Model<float>& model, const std::vector<SegSample>& data, const TrainConfig& cfg,
                     const EpochCallback& on_epoch = {}) {
  if (data.empty()) throw std::invalid_argument("fit needs a non-empty dataset");
  const Split s = validation_split(data.size(), cfg.val_fraction, cfg.seed);
  return fit_split(model, data, s.train, s.val, cfg, on_epoch);
}

inline void write_history_csv(const std::vector<EpochRecord>& h, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "epoch,train_loss,val_loss,val_dice\n" << std::setprecision(17);
  for (const auto& r : h) os << r.epoch << ',' << r.train_loss << ',' << r.val_loss << ',' << r.val_dice << '\n';
}

// ---------------------------------------------------------------- cross-validation

struct CrossValResult {
  FoldPlan plan;
  std::vector<FitResult> fits;
  std::vector<MetricReport> folds;
  std::map<std::string, MetricSummary> summary;  // mean/std over per-fold means
};

inline std::map<std::string, MetricSummary> summarize_folds(const std::vector<MetricReport>& folds) {
  std::map<std::string, MetricSummary> out;
  for (const char* name : metric_names()) {
    std::vector<double> means;
    MetricSummary s;
    for (const auto& f : folds) {
      const auto& fs = f.summary.at(name);
      if (fs.count > 0) means.push_back(fs.mean);
      s.excluded += fs.excluded;
    }
    s.count = means.size();
    s.mean = means.empty() ? std::numeric_limits<double>::quiet_NaN() : sample_mean(means);
    s.std = sample_std(means);
    out[name] = s;
  }
  return out;
}

using FoldCallback = std::function<void(std::size_t fold, const FitResult&, Model<float>&, const MetricReport&)>;

/// One model per fold, trained on the complement and scored on the fold.
inline CrossValResult cross_validate(const NetworkSpec& spec, const std::vector<SegSample>& data, const TrainConfig& cfg,
                                     std::size_t k, const FoldCallback& on_fold = {}, std::size_t max_folds = 0) {
  CrossValResult out;
  out.plan = kfold_split(data.size(), k, cfg.seed);
  const std::size_t nf = max_folds == 0 ? k : std::min(k, max_folds);
  for (std::size_t f = 0; f < nf; ++f) {
    Model<float> model = build<float>(spec, cfg.seed);
    const auto train = select(data, out.plan.complement(f));
    FitResult fr = fit(model, train, cfg);
    MetricReport rep = evaluate(model, select(data, out.plan.folds[f]), 0.5, cfg.deterministic ? 1 : cfg.threads);
    rep.fold = "fold" + std::to_string(f);
    if (on_fold) on_fold(f, fr, model, rep);
    out.fits.push_back(std::move(fr));
    out.folds.push_back(std::move(rep));
  }
  out.summary = summarize_folds(out.folds);
  return out;
}

/// Two-line table: metric names, then mean±std cells.
inline std::string format_summary_table(const std::map<std::string, MetricSummary>& s) {
  std::ostringstream os;
  for (const char* n : metric_names()) os << std::setw(16) << n;
  os << '\n';
  for (const char* n : metric_names()) os << std::setw(16 + 1) << format_mean_std(n, s.at(n));
  os << '\n';
  return os.str();
}

}  // namespace baaf

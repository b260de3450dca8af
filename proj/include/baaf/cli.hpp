#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "baaf/checkpoint.hpp"
#include "baaf/datagen.hpp"
#include "baaf/evaluation.hpp"
#include "baaf/metrics.hpp"
#include "baaf/network.hpp"
#include "baaf/selftest.hpp"
#include "baaf/stats.hpp"
#include "baaf/training.hpp"
#include "json.hpp"

namespace baaf {

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = {{"count", c.count},
       {"size", c.size},
       {"lesions", {c.min_lesions, c.max_lesions}},
       {"radius", {c.min_radius, c.max_radius}},
       {"lesion_mean", c.lesion_mean},
       {"background_mean", c.background_mean},
       {"speckle", c.speckle},
       {"blur_sigma", c.blur_sigma},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  c.count = j.value("count", c.count);
  c.size = j.value("size", c.size);
  if (j.contains("lesions")) {
    c.min_lesions = j.at("lesions").at(0).get<std::size_t>();
    c.max_lesions = j.at("lesions").at(1).get<std::size_t>();
  }
  if (j.contains("radius")) {
    c.min_radius = j.at("radius").at(0).get<double>();
    c.max_radius = j.at("radius").at(1).get<double>();
  }
  c.lesion_mean = j.value("lesion_mean", c.lesion_mean);
  c.background_mean = j.value("background_mean", c.background_mean);
  c.speckle = j.value("speckle", c.speckle);
  c.blur_sigma = j.value("blur_sigma", c.blur_sigma);
  c.seed = j.value("seed", c.seed);
}

namespace cli {

/// Bad flags or missing inputs; maps to exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  NetworkSpec network = NetworkSpec::make(Variant::deep15_baaf, 8, 128);
  TrainConfig train;
  SynthConfig synth;
  struct Paths {
    std::string data, out, checkpoint, ids, pred, gt;
  } paths;
  std::size_t kfold = 0;      // 0 runs a single fit
  std::size_t max_folds = 0;  // 0 runs every fold
  struct Eval {
    double threshold = 0.5;
    bool gate_stats = false;
    bool curves = true;
  } eval;
  struct Ablation {
    std::size_t seeds = 3;
    std::size_t kfold = 3;
    std::size_t max_folds = 1;
    std::vector<std::string> variants{"unet9", "deep15", "deep15_pham", "deep15_baaf"};
  } ablation;
  std::string corrupt_backward;  // selftest negative control
};

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["network"] = c.network;
  j["train"] = c.train;
  j["synth"] = c.synth;
  j["paths"] = {{"data", c.paths.data}, {"out", c.paths.out},   {"checkpoint", c.paths.checkpoint},
                {"ids", c.paths.ids},   {"pred", c.paths.pred}, {"gt", c.paths.gt}};
  j["kfold"] = c.kfold;
  j["max_folds"] = c.max_folds;
  j["eval"] = {{"threshold", c.eval.threshold}, {"gate_stats", c.eval.gate_stats}, {"curves", c.eval.curves}};
  j["ablation"] = {{"seeds", c.ablation.seeds},
                   {"kfold", c.ablation.kfold},
                   {"max_folds", c.ablation.max_folds},
                   {"variants", c.ablation.variants}};
  return j;
}

/// Overlays `file` on `c`; keys absent from `file` keep their current value.
inline void merge_json(RunConfig& c, const nlohmann::json& file) {
  nlohmann::json base = to_json(c);
  const bool new_variant = file.contains("network") && file["network"].contains("variant") &&
                           !file["network"].contains("filters");
  base.merge_patch(file);
  if (new_variant) base["network"].erase("filters");
  c.network = base.at("network").get<NetworkSpec>();
  c.train = base.at("train").get<TrainConfig>();
  c.synth = base.at("synth").get<SynthConfig>();
  const auto& p = base.at("paths");
  c.paths = {p.value("data", ""), p.value("out", ""), p.value("checkpoint", ""),
             p.value("ids", ""),  p.value("pred", ""), p.value("gt", "")};
  c.kfold = base.value("kfold", c.kfold);
  c.max_folds = base.value("max_folds", c.max_folds);
  const auto& e = base.at("eval");
  c.eval = {e.value("threshold", 0.5), e.value("gate_stats", false), e.value("curves", true)};
  const auto& a = base.at("ablation");
  c.ablation.seeds = a.value("seeds", c.ablation.seeds);
  c.ablation.kfold = a.value("kfold", c.ablation.kfold);
  c.ablation.max_folds = a.value("max_folds", c.ablation.max_folds);
  c.ablation.variants = a.value("variants", c.ablation.variants);
}

namespace detail {

// Flag values are parsed into side storage and applied over the merged
// config only when the user actually passed them.
class FlagSet {
 public:
  template <typename V>
  CLI::Option* option(CLI::App* app, const std::string& name, const std::string& help,
                      std::function<void(RunConfig&, const V&)> apply) {
    auto v = std::make_shared<V>();
    CLI::Option* o = app->add_option(name, *v, help);
    items_.push_back({o, [v, apply](RunConfig& c) { apply(c, *v); }});
    return o;
  }
  CLI::Option* flag(CLI::App* app, const std::string& name, const std::string& help,
                    std::function<void(RunConfig&)> apply) {
    CLI::Option* o = app->add_flag(name, help);
    items_.push_back({o, std::move(apply)});
    return o;
  }
  void apply(RunConfig& c) const {
    for (const auto& [o, f] : items_)
      if (o->count() > 0) f(c);
  }
  bool given(const std::string& name) const {
    for (const auto& [o, f] : items_)
      if (o->check_name(name) && o->count() > 0) return true;
    return false;
  }

 private:
  std::vector<std::pair<CLI::Option*, std::function<void(RunConfig&)>>> items_;
};

inline std::string timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  localtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y%m%d-%H%M%S");
  return os.str();
}

inline std::filesystem::path run_dir(const RunConfig& c, const std::string& cmd) {
  if (!c.paths.out.empty()) return c.paths.out;
  return std::filesystem::path("runs") / (timestamp() + "-" + cmd);
}

inline void write_snapshot(const RunConfig& c, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream os(dir / "config.json");
  if (!os) throw std::runtime_error("cannot write " + (dir / "config.json").string());
  os << to_json(c).dump(2) << '\n';
}

inline std::vector<SegSample> load_data(const std::string& path) {
  if (path.empty()) throw UsageError("--data is required");
  if (!std::filesystem::exists(path)) throw UsageError("dataset directory " + path + " does not exist");
  return load_dataset(path);
}

inline void write_lines(const std::filesystem::path& p, const std::vector<std::string>& lines) {
  std::ofstream os(p);
  for (const auto& l : lines) os << l << '\n';
}

inline std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::ifstream is(p);
  if (!is) throw UsageError("cannot read " + p.string());
  std::vector<std::string> out;
  for (std::string l; std::getline(is, l);)
    if (!l.empty()) out.push_back(l);
  return out;
}

inline std::vector<std::string> ids_of(const std::vector<SegSample>& data, const std::vector<std::size_t>& idx) {
  std::vector<std::string> out;
  for (auto i : idx) out.push_back(data.at(i).id);
  return out;
}

inline nlohmann::json checkpoint_meta(const NetworkSpec& spec, const TrainConfig& t, const FitResult& f) {
  return {{"network", spec},
          {"seed", t.seed},
          {"best_epoch", f.best_epoch},
          {"best_val_dice", f.best_val_dice},
          {"epochs_run", f.history.size()}};
}

/// Per-layer gate statistics averaged over every sample.
inline std::vector<GateStats> gate_stats(Model<float>& model, const std::vector<SegSample>& samples) {
  std::vector<GateStats> acc;
  for (const auto& s : samples) {
    std::vector<GateStats> g;
    const auto& img = s.image;
    predict(model, img.reshaped({1, img.dim(0), img.dim(1), img.dim(2)}), &g);
    if (acc.empty()) {
      acc = g;
      for (auto& a : acc) {
        for (auto& v : a.phi) v = 0;
        for (auto& v : a.gamma) v = 0;
        for (auto& v : a.beta) v = 0;
        a.alpha_mean = 0;
      }
    }
    const double w = 1.0 / static_cast<double>(samples.size());
    for (std::size_t l = 0; l < g.size(); ++l) {
      for (std::size_t i = 0; i < g[l].phi.size(); ++i) acc[l].phi[i] += w * g[l].phi[i];
      for (std::size_t i = 0; i < g[l].gamma.size(); ++i) acc[l].gamma[i] += w * g[l].gamma[i];
      for (std::size_t i = 0; i < g[l].beta.size(); ++i) acc[l].beta[i] += w * g[l].beta[i];
      acc[l].alpha_mean += w * g[l].alpha_mean;
    }
  }
  return acc;
}

inline void write_gate_stats_csv(const std::vector<GateStats>& g, const std::filesystem::path& path) {
  std::ofstream os(path);
  os << "layer,channel,phi,gamma,beta,alpha_mean\n" << std::setprecision(10);
  for (const auto& l : g)
    for (std::size_t c = 0; c < l.beta.size(); ++c) {
      os << l.layer << ',' << c << ',';
      if (c < l.phi.size()) os << l.phi[c];
      os << ',';
      if (c < l.gamma.size()) os << l.gamma[c];
      os << ',' << l.beta[c] << ',' << l.alpha_mean << '\n';
    }
}

inline void print_summary(std::ostream& os, const std::map<std::string, MetricSummary>& s) {
  os << format_summary_table(s);
}

inline void write_summary_csv(const std::map<std::string, MetricSummary>& s, const std::filesystem::path& path) {
  std::ofstream os(path);
  os << "metric,mean,std,count,excluded\n" << std::setprecision(17);
  for (const char* n : metric_names()) {
    const auto& m = s.at(n);
    os << n << ',' << m.mean << ',' << m.std << ',' << m.count << ',' << m.excluded << '\n';
  }
}

/// Writes report, optional curves, and optional gate statistics for `samples`.
inline MetricReport write_evaluation(Model<float>& model, const std::vector<SegSample>& samples, const RunConfig& c,
                                     const std::filesystem::path& dir, const std::string& label) {
  std::vector<Tensor<float>> probs;
  MetricReport rep = evaluate(model, samples, c.eval.threshold, c.train.deterministic ? 1 : c.train.threads, &probs);
  rep.fold = label;
  write_report_csv(rep, dir / "report.csv");
  if (c.eval.curves) {
    std::vector<Tensor<float>> gts;
    for (const auto& s : samples) gts.push_back(s.mask);
    try {
      const Curves cv = curves(probs, gts, even_thresholds());
      write_curves_csv(cv, dir / "curves.csv");
      std::ofstream(dir / "auc.json") << nlohmann::json{{"auc_roc", cv.auc_roc}, {"auc_pr", cv.auc_pr}}.dump(2)
                                      << '\n';
    } catch (const std::invalid_argument& e) {
      std::cerr << "curves skipped: " << e.what() << '\n';
    }
  }
  if (c.eval.gate_stats && has_attention(model.spec.variant))
    write_gate_stats_csv(gate_stats(model, samples), dir / "gate_stats.csv");
  return rep;
}

inline std::filesystem::path mask_dir(const std::filesystem::path& p) {
  return std::filesystem::is_directory(p / "masks") ? p / "masks" : p;
}

}  // namespace detail

// ---------------------------------------------------------------- subcommands

inline int cmd_gen_data(const RunConfig& c, std::ostream& out) {
  if (c.paths.out.empty()) throw UsageError("--out is required");
  c.synth.validate();
  detail::write_snapshot(c, c.paths.out);
  const auto samples = generate_synthetic(c.synth);
  save_dataset(samples, c.paths.out);
  out << "generated " << samples.size() << " samples (seed " << c.synth.seed << ", " << c.synth.size << "x"
      << c.synth.size << ") in " << c.paths.out << '\n';
  return 0;
}

inline std::optional<OpKind> parse_op(const std::string& name) {
  if (name.empty()) return std::nullopt;
  for (int k = static_cast<int>(OpKind::leaf); k <= static_cast<int>(OpKind::bce); ++k)
    if (op_name(static_cast<OpKind>(k)) == name) return static_cast<OpKind>(k);
  throw UsageError("unknown op '" + name + "' for --corrupt-backward");
}

inline int cmd_selftest(const RunConfig& c, std::ostream& out) {
  const auto corrupt = parse_op(c.corrupt_backward);
  const auto dir = detail::run_dir(c, "selftest");
  detail::write_snapshot(c, dir);
  const SelfTestResult r = run_selftest(corrupt);
  const std::string table = format_selftest(r);
  std::ofstream(dir / "selftest.txt") << table;
  out << table;
  if (r.passed()) {
    out << "selftest passed\n";
    return 0;
  }
  out << "selftest failed:";
  for (const auto& f : r.failing()) out << ' ' << f;
  for (auto k : r.uncovered) out << " uncovered:" << op_name(k);
  out << '\n';
  return 1;
}

inline int cmd_train(const RunConfig& c, std::ostream& out) {
  const auto data = detail::load_data(c.paths.data);
  c.network.validate();
  c.train.validate();
  const auto dir = detail::run_dir(c, "train");
  detail::write_snapshot(c, dir);
  auto progress = [&](const std::string& tag) {
    return [&out, tag](const EpochRecord& e) {
      out << tag << "epoch " << e.epoch << " train_loss " << std::setprecision(6) << e.train_loss << " val_loss "
          << e.val_loss << " val_dice " << e.val_dice << std::endl;
    };
  };

  if (c.kfold == 0) {
    Model<float> model = build<float>(c.network, c.train.seed);
    const Split split = validation_split(data.size(), c.train.val_fraction, c.train.seed);
    const FitResult fr = fit_split(model, data, split.train, split.val, c.train, progress(""));
    write_history_csv(fr.history, dir / "history.csv");
    save_checkpoint(model.params, dir / "checkpoint", detail::checkpoint_meta(c.network, c.train, fr));
    detail::write_lines(dir / "val_ids.txt", detail::ids_of(data, fr.val_indices));
    const MetricReport rep = detail::write_evaluation(model, select(data, fr.val_indices), c, dir, "val");
    out << "best val dice " << std::setprecision(6) << fr.best_val_dice << " at epoch " << fr.best_epoch << " of "
        << fr.history.size() << '\n';
    detail::print_summary(out, rep.summary);
    out << "run directory " << dir.string() << '\n';
    return 0;
  }

  const FoldPlan plan = kfold_split(data.size(), c.kfold, c.train.seed);
  const std::size_t nf = c.max_folds == 0 ? c.kfold : std::min(c.kfold, c.max_folds);
  std::vector<MetricReport> reports;
  for (std::size_t f = 0; f < nf; ++f) {
    const auto fold_dir = dir / ("fold" + std::to_string(f));
    std::filesystem::create_directories(fold_dir);
    const auto train_idx = plan.complement(f);
    const auto train = select(data, train_idx);
    Model<float> model = build<float>(c.network, c.train.seed);
    const FitResult fr = fit(model, train, c.train, progress("fold " + std::to_string(f) + " "));
    write_history_csv(fr.history, fold_dir / "history.csv");
    save_checkpoint(model.params, fold_dir / "checkpoint", detail::checkpoint_meta(c.network, c.train, fr));
    detail::write_lines(fold_dir / "val_ids.txt", detail::ids_of(train, fr.val_indices));
    detail::write_lines(fold_dir / "test_ids.txt", detail::ids_of(data, plan.folds[f]));
    reports.push_back(detail::write_evaluation(model, select(data, plan.folds[f]), c, fold_dir,
                                               "fold" + std::to_string(f)));
    out << "fold " << f << " test dice " << std::setprecision(6) << reports.back()["dice"].mean << '\n';
  }
  const auto summary = summarize_folds(reports);
  detail::write_summary_csv(summary, dir / "summary.csv");
  detail::print_summary(out, summary);
  out << "run directory " << dir.string() << '\n';
  return 0;
}

/// Rebuilds the network described by a checkpoint and loads its weights.
inline Model<float> load_model(const std::filesystem::path& ckpt, const std::optional<NetworkSpec>& expected) {
  nlohmann::json meta;
  ParameterStore<float> store = load_checkpoint(ckpt, &meta);
  if (!meta.contains("network")) throw CheckpointError("checkpoint " + ckpt.string() + " has no network spec");
  const NetworkSpec spec = meta.at("network").get<NetworkSpec>();
  if (expected && (expected->variant != spec.variant || expected->divisor != spec.divisor ||
                   expected->height != spec.height || expected->width != spec.width))
    throw CheckpointError("checkpoint/spec mismatch: checkpoint holds " + meta.at("network").dump() +
                          ", flags request " + nlohmann::json(*expected).dump());
  Model<float> model = build<float>(spec, 0);
  for (const auto& [path, p] : model.params) {
    if (!store.contains(path)) throw CheckpointError("checkpoint/spec mismatch: missing parameter " + path);
    if (store.value(path).shape() != p.value.shape())
      throw CheckpointError("checkpoint/spec mismatch: " + path + " has shape " + shape_str(store.value(path).shape()) +
                            ", network expects " + shape_str(p.value.shape()));
  }
  if (store.size() != model.params.size())
    throw CheckpointError("checkpoint/spec mismatch: checkpoint has " + std::to_string(store.size()) +
                          " parameters, network has " + std::to_string(model.params.size()));
  model.params = std::move(store);
  return model;
}

inline int cmd_eval(const RunConfig& c, std::ostream& out, bool spec_from_flags) {
  if (c.paths.checkpoint.empty()) throw UsageError("--checkpoint is required");
  auto data = detail::load_data(c.paths.data);
  const auto dir = detail::run_dir(c, "eval");
  detail::write_snapshot(c, dir);
  Model<float> model = load_model(c.paths.checkpoint, spec_from_flags ? std::optional(c.network) : std::nullopt);
  if (!c.paths.ids.empty()) {
    const auto ids = detail::read_lines(c.paths.ids);
    std::vector<SegSample> kept;
    for (const auto& id : ids) {
      auto it = std::find_if(data.begin(), data.end(), [&](const SegSample& s) { return s.id == id; });
      if (it == data.end()) throw UsageError("id " + id + " from " + c.paths.ids + " is not in " + c.paths.data);
      kept.push_back(*it);
    }
    data = std::move(kept);
  }
  const MetricReport rep = detail::write_evaluation(model, data, c, dir, "eval");
  out << "evaluated " << data.size() << " samples, dice " << std::setprecision(10) << rep["dice"].mean << '\n';
  detail::print_summary(out, rep.summary);
  out << "run directory " << dir.string() << '\n';
  return 0;
}

inline int cmd_metrics(const RunConfig& c, std::ostream& out) {
  if (c.paths.pred.empty() || c.paths.gt.empty()) throw UsageError("--pred and --gt are required");
  const auto pd = detail::mask_dir(c.paths.pred), gd = detail::mask_dir(c.paths.gt);
  if (!std::filesystem::is_directory(pd) || !std::filesystem::is_directory(gd))
    throw UsageError("--pred and --gt must be directories of PGM masks");
  const auto dir = detail::run_dir(c, "metrics");
  detail::write_snapshot(c, dir);
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(gd))
    if (e.path().extension() == ".pgm") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no .pgm masks in " + gd.string());
  std::vector<Tensor<float>> probs, gts;
  std::vector<std::string> ids;
  for (const auto& f : files) {
    const auto pf = pd / f.filename();
    if (!std::filesystem::exists(pf)) throw DataError("prediction " + pf.string() + " is missing");
    probs.push_back(load_pgm(pf));
    gts.push_back(binarize(load_pgm(f)));
    if (probs.back().shape() != gts.back().shape())
      throw ShapeError("prediction " + pf.string() + " has size " + shape_str(probs.back().shape()) +
                       " but ground truth has " + shape_str(gts.back().shape()));
    ids.push_back(f.stem().string());
  }
  MetricReport rep = evaluate_predictions(probs, gts, ids, c.eval.threshold);
  rep.fold = "metrics";
  write_report_csv(rep, dir / "report.csv");
  if (c.eval.curves) {
    try {
      write_curves_csv(curves(probs, gts, even_thresholds()), dir / "curves.csv");
    } catch (const std::invalid_argument& e) {
      std::cerr << "curves skipped: " << e.what() << '\n';
    }
  }
  out << "compared " << ids.size() << " masks\n";
  detail::print_summary(out, rep.summary);
  out << "run directory " << dir.string() << '\n';
  return 0;
}

// ---------------------------------------------------------------- ablation

struct AblationRun {
  std::string variant;
  std::uint64_t seed = 0;
  std::size_t fold = 0;
  double dice = 0, jaccard = 0, hd = 0;
  std::size_t best_epoch = 0, epochs_run = 0;
  double seconds = 0;
  std::vector<double> image_dice;
};

struct AblationRow {
  std::string variant;
  MetricSummary dice, jaccard, hd;  // over per-run means
  std::optional<WelchResult> vs_baaf;
};

inline std::vector<AblationRow> summarize_ablation(const std::vector<AblationRun>& runs,
                                                   const std::vector<std::string>& variants) {
  auto pooled = [&](const std::string& v) {
    std::vector<double> out;
    for (const auto& r : runs)
      if (r.variant == v) out.insert(out.end(), r.image_dice.begin(), r.image_dice.end());
    return out;
  };
  auto stat = [](const std::vector<double>& x) {
    MetricSummary s;
    s.count = x.size();
    s.mean = sample_mean(x);
    s.std = sample_std(x);
    return s;
  };
  const auto ref = pooled("deep15_baaf");
  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    std::vector<double> d, j, h;
    for (const auto& r : runs)
      if (r.variant == v) {
        d.push_back(r.dice);
        j.push_back(r.jaccard);
        if (std::isfinite(r.hd)) h.push_back(r.hd);
      }
    AblationRow row{v, stat(d), stat(j), stat(h), std::nullopt};
    const auto mine = pooled(v);
    if (v != "deep15_baaf" && ref.size() >= 2 && mine.size() >= 2) row.vs_baaf = welch_ttest(ref, mine);
    rows.push_back(row);
  }
  return rows;
}

inline std::string format_ablation(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(14) << "variant" << std::setw(16) << "dice" << std::setw(16) << "jaccard"
     << std::setw(16) << "hd" << std::setw(6) << "runs" << "p(vs deep15_baaf)\n";
  for (const auto& r : rows) {
    os << std::left << std::setw(14) << r.variant << std::setw(17) << format_mean_std("dice", r.dice) << std::setw(17)
       << format_mean_std("jaccard", r.jaccard) << std::setw(17) << format_mean_std("hd", r.hd) << std::setw(6)
       << r.dice.count;
    if (r.vs_baaf) {
      os << std::setprecision(4) << r.vs_baaf->p;
    } else {
      os << "-";
    }
    os << '\n';
  }
  return os.str();
}

inline int cmd_ablate(const RunConfig& c, std::ostream& out, std::vector<AblationRow>* rows_out = nullptr) {
  const auto data = detail::load_data(c.paths.data);
  c.train.validate();
  if (c.ablation.seeds < 1) throw UsageError("--seeds must be >= 1");
  const auto dir = detail::run_dir(c, "ablate");
  detail::write_snapshot(c, dir);
  std::vector<AblationRun> runs;
  const std::size_t nf = c.ablation.max_folds == 0 ? c.ablation.kfold : std::min(c.ablation.kfold, c.ablation.max_folds);
  for (std::size_t si = 0; si < c.ablation.seeds; ++si) {
    const std::uint64_t seed = c.train.seed + si;
    const FoldPlan plan = kfold_split(data.size(), c.ablation.kfold, seed);
    for (std::size_t f = 0; f < nf; ++f) {
      const auto train = select(data, plan.complement(f));
      const auto test = select(data, plan.folds[f]);
      for (const auto& vname : c.ablation.variants) {
        const auto t0 = std::chrono::steady_clock::now();
        NetworkSpec spec = NetworkSpec::make(parse_variant(vname), c.network.divisor, c.network.height);
        spec.width = c.network.width;
        TrainConfig tc = c.train;
        tc.seed = seed;
        Model<float> model = build<float>(spec, seed);
        const FitResult fr = fit(model, train, tc);
        const MetricReport rep = evaluate(model, test, c.eval.threshold, tc.deterministic ? 1 : tc.threads);
        const auto run_path = dir / vname / ("seed" + std::to_string(seed) + "_fold" + std::to_string(f));
        std::filesystem::create_directories(run_path);
        write_history_csv(fr.history, run_path / "history.csv");
        write_report_csv(rep, run_path / "report.csv");
        AblationRun r{vname, seed, f, rep["dice"].mean, rep["jaccard"].mean, rep["hd"].mean, fr.best_epoch,
                      fr.history.size(), 0, {}};
        for (const auto& im : rep.images) r.image_dice.push_back(im.area.dice);
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        out << vname << " seed " << seed << " fold " << f << " test dice " << std::setprecision(6) << r.dice
            << " (" << r.epochs_run << " epochs, " << std::setprecision(4) << r.seconds << " s)" << std::endl;
        runs.push_back(std::move(r));
      }
    }
  }
  {
    std::ofstream os(dir / "ablation_runs.csv");
    os << "variant,seed,fold,dice,jaccard,hd,best_epoch,epochs_run,seconds\n" << std::setprecision(17);
    for (const auto& r : runs)
      os << r.variant << ',' << r.seed << ',' << r.fold << ',' << r.dice << ',' << r.jaccard << ',' << r.hd << ','
         << r.best_epoch << ',' << r.epochs_run << ',' << r.seconds << '\n';
  }
  const auto rows = summarize_ablation(runs, c.ablation.variants);
  {
    std::ofstream os(dir / "ablation.csv");
    os << "variant,runs,dice_mean,dice_std,jaccard_mean,jaccard_std,hd_mean,hd_std,welch_t,welch_dof,p_value\n"
       << std::setprecision(17);
    for (const auto& r : rows) {
      os << r.variant << ',' << r.dice.count << ',' << r.dice.mean << ',' << r.dice.std << ',' << r.jaccard.mean << ','
         << r.jaccard.std << ',' << r.hd.mean << ',' << r.hd.std << ',';
      if (r.vs_baaf) os << r.vs_baaf->t << ',' << r.vs_baaf->dof << ',' << r.vs_baaf->p;
      else os << ",,";
      os << '\n';
    }
  }
  const std::string table = format_ablation(rows);
  std::ofstream(dir / "ablation.txt") << table;
  out << table << "run directory " << dir.string() << '\n';
  if (rows_out) *rows_out = rows;
  return 0;
}

// ---------------------------------------------------------------- entry point

/// Parses `args` (without the program name) and runs one subcommand.
/// Exit codes: 0 success, 1 runtime failure, 2 usage error.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"BAAF segmentation toolkit: data generation, training, evaluation, ablation, verification"};
  app.require_subcommand(1);
  app.fallthrough();
  detail::FlagSet flags;
  std::string config_file;
  app.add_option("--config", config_file, "JSON config file (defaults < file < flags)");
  flags.option<std::uint64_t>(&app, "--seed", "random seed for data, init, splits and shuffles",
                              [](RunConfig& c, const std::uint64_t& v) {
                                c.train.seed = v;
                                c.synth.seed = v;
                              });
  flags.option<std::size_t>(&app, "--threads", "evaluation worker threads",
                            [](RunConfig& c, const std::size_t& v) { c.train.threads = v; });
  flags.flag(&app, "--deterministic", "force single-threaded bit-reproducible runs", [](RunConfig& c) {
    c.train.deterministic = true;
    c.train.threads = 1;
  });
  auto out_opt = [&](CLI::App* sub) {
    return flags.option<std::string>(sub, "--out", "output directory",
                                     [](RunConfig& c, const std::string& v) { c.paths.out = v; });
  };
  auto data_opt = [&](CLI::App* sub) {
    return flags.option<std::string>(sub, "--data", "dataset directory",
                                     [](RunConfig& c, const std::string& v) { c.paths.data = v; });
  };
  auto spec_opts = [&](CLI::App* sub) {
    flags.option<std::string>(sub, "--variant", "unet9 | deep15 | deep15_pham | deep15_baaf",
                              [](RunConfig& c, const std::string& v) {
                                c.network.variant = parse_variant(v);
                                c.network.filters = default_filters(c.network.variant);
                              });
    flags.option<std::size_t>(sub, "--divisor", "channel width divisor",
                              [](RunConfig& c, const std::size_t& v) { c.network.divisor = v; });
    flags.option<std::size_t>(sub, "--size", "network input size",
                              [](RunConfig& c, const std::size_t& v) { c.network.height = c.network.width = v; });
  };
  auto train_opts = [&](CLI::App* sub) {
    flags.option<std::size_t>(sub, "--epochs", "epoch cap", [](RunConfig& c, const std::size_t& v) { c.train.epochs = v; });
    flags.option<std::size_t>(sub, "--batch", "mini-batch size",
                              [](RunConfig& c, const std::size_t& v) { c.train.batch_size = v; });
    flags.option<double>(sub, "--lr", "Adam learning rate", [](RunConfig& c, const double& v) { c.train.learning_rate = v; });
    flags.option<std::size_t>(sub, "--patience", "early-stopping patience",
                              [](RunConfig& c, const std::size_t& v) { c.train.patience = v; });
    flags.option<double>(sub, "--val-frac", "validation fraction",
                         [](RunConfig& c, const double& v) { c.train.val_fraction = v; });
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic speckle-lesion dataset");
  flags.option<std::size_t>(gen, "--count", "number of samples", [](RunConfig& c, const std::size_t& v) { c.synth.count = v; });
  flags.option<std::size_t>(gen, "--size", "image size", [](RunConfig& c, const std::size_t& v) { c.synth.size = v; });
  flags.option<double>(gen, "--speckle", "speckle coefficient of variation",
                       [](RunConfig& c, const double& v) { c.synth.speckle = v; });
  flags.option<double>(gen, "--blur", "boundary blur sigma", [](RunConfig& c, const double& v) { c.synth.blur_sigma = v; });
  out_opt(gen);

  CLI::App* st = app.add_subcommand("selftest", "gradient checks and attention invariants");
  flags.option<std::string>(st, "--corrupt-backward", "debug: scale the gradient through this op kind",
                            [](RunConfig& c, const std::string& v) { c.corrupt_backward = v; });
  out_opt(st);

  CLI::App* tr = app.add_subcommand("train", "train one model, or K-fold cross-validate");
  data_opt(tr);
  spec_opts(tr);
  train_opts(tr);
  flags.option<std::size_t>(tr, "--kfold", "K-fold cross-validation (0: single fit)",
                            [](RunConfig& c, const std::size_t& v) { c.kfold = v; });
  flags.option<std::size_t>(tr, "--max-folds", "train only the first N folds",
                            [](RunConfig& c, const std::size_t& v) { c.max_folds = v; });
  flags.flag(tr, "--gate-stats", "write per-layer gate statistics", [](RunConfig& c) { c.eval.gate_stats = true; });
  out_opt(tr);

  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  flags.option<std::string>(ev, "--checkpoint", "checkpoint directory",
                            [](RunConfig& c, const std::string& v) { c.paths.checkpoint = v; });
  data_opt(ev);
  spec_opts(ev);
  flags.option<std::string>(ev, "--ids", "file listing sample ids to evaluate",
                            [](RunConfig& c, const std::string& v) { c.paths.ids = v; });
  flags.option<double>(ev, "--threshold", "binarization threshold",
                       [](RunConfig& c, const double& v) { c.eval.threshold = v; });
  flags.flag(ev, "--gate-stats", "write per-layer gate statistics", [](RunConfig& c) { c.eval.gate_stats = true; });
  out_opt(ev);

  CLI::App* ab = app.add_subcommand("ablate", "train the variant ladder across seeds on shared folds");
  data_opt(ab);
  train_opts(ab);
  flags.option<std::size_t>(ab, "--divisor", "channel width divisor",
                            [](RunConfig& c, const std::size_t& v) { c.network.divisor = v; });
  flags.option<std::size_t>(ab, "--size", "network input size",
                            [](RunConfig& c, const std::size_t& v) { c.network.height = c.network.width = v; });
  flags.option<std::size_t>(ab, "--seeds", "number of seeds", [](RunConfig& c, const std::size_t& v) { c.ablation.seeds = v; });
  flags.option<std::size_t>(ab, "--kfold", "folds in the shared plan",
                            [](RunConfig& c, const std::size_t& v) { c.ablation.kfold = v; });
  flags.option<std::size_t>(ab, "--max-folds", "folds actually trained per seed (0: all)",
                            [](RunConfig& c, const std::size_t& v) { c.ablation.max_folds = v; });
  flags.option<std::vector<std::string>>(ab, "--variants", "variants to train",
                                         [](RunConfig& c, const std::vector<std::string>& v) { c.ablation.variants = v; });
  out_opt(ab);

  CLI::App* me = app.add_subcommand("metrics", "compare two directories of masks");
  flags.option<std::string>(me, "--pred", "predicted masks (PGM)", [](RunConfig& c, const std::string& v) { c.paths.pred = v; });
  flags.option<std::string>(me, "--gt", "ground-truth masks (PGM)", [](RunConfig& c, const std::string& v) { c.paths.gt = v; });
  flags.option<double>(me, "--threshold", "binarization threshold",
                       [](RunConfig& c, const double& v) { c.eval.threshold = v; });
  out_opt(me);

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    RunConfig cfg;
    if (!config_file.empty()) {
      std::ifstream is(config_file);
      if (!is) throw UsageError("cannot read config file " + config_file);
      nlohmann::json j;
      try {
        is >> j;
      } catch (const nlohmann::json::exception& e) {
        throw UsageError("malformed config file " + config_file + ": " + e.what());
      }
      merge_json(cfg, j);
    }
    flags.apply(cfg);

    if (gen->parsed()) return cmd_gen_data(cfg, out);
    if (st->parsed()) return cmd_selftest(cfg, out);
    if (tr->parsed()) return cmd_train(cfg, out);
    if (ev->parsed()) return cmd_eval(cfg, out, flags.given("--variant") || flags.given("--divisor") || flags.given("--size"));
    if (ab->parsed()) return cmd_ablate(cfg, out);
    if (me->parsed()) return cmd_metrics(cfg, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace cli
}  // namespace baaf

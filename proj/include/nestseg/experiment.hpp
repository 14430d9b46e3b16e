#pragma once

// Experiment runner behind the `nestseg` command-line tool.
//
// Output layout under ExperimentConfig::out:
//   data/manifest.csv, data/<case>.image.{hdr,raw}, data/<case>.labels.{hdr,raw}
//   runs/<name>/checkpoint, runs/<name>/history.csv, runs/<name>/pred/
//   reports/

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nestseg/csv.hpp"
#include "nestseg/error.hpp"
#include "nestseg/nestloss.hpp"
#include "nestseg/ordecode.hpp"
#include "nestseg/rng.hpp"
#include "nestseg/segmetrics.hpp"
#include "nestseg/toynet.hpp"
#include "nestseg/volio.hpp"

namespace nestseg {

namespace fs = std::filesystem;

struct ExperimentConfig {
  // dataset
  PhantomConfig phantom = [] {
    PhantomConfig p;
    p.support_radius = 30.0;
    return p;
  }();
  int num_cases = 50;
  double center_jitter = 6.0;   // voxels, uniform in [-j, j] per in-plane axis
  double scale_jitter = 0.2;    // common radius scale uniform in [1-j, 1+j]
  double aspect_jitter = 0.2;   // per in-plane axis aspect uniform in [1-j, 1+j]

  NetConfig net{};
  TrainConfig train{};
  bool optimize_thresholds = false;
  std::vector<double> alphas{0.3, 0.4, 0.5};

  fs::path out = "nestseg_out";
  std::uint64_t seed = 7;

  fs::path data_dir() const { return out / "data"; }
  fs::path run_dir(const std::string& name) const { return out / "runs" / name; }
  fs::path reports_dir() const { return out / "reports"; }
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = {{"phantom", c.phantom},
       {"num_cases", c.num_cases},
       {"center_jitter", c.center_jitter},
       {"scale_jitter", c.scale_jitter},
       {"aspect_jitter", c.aspect_jitter},
       {"net", c.net},
       {"train", c.train},
       {"optimize_thresholds", c.optimize_thresholds},
       {"alphas", c.alphas},
       {"out", c.out.string()},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  if (j.contains("phantom")) from_json(j.at("phantom"), c.phantom);
  if (j.contains("num_cases")) c.num_cases = j.at("num_cases").get<int>();
  if (j.contains("center_jitter")) c.center_jitter = j.at("center_jitter").get<double>();
  if (j.contains("scale_jitter")) c.scale_jitter = j.at("scale_jitter").get<double>();
  if (j.contains("aspect_jitter")) c.aspect_jitter = j.at("aspect_jitter").get<double>();
  if (j.contains("net")) from_json(j.at("net"), c.net);
  if (j.contains("train")) from_json(j.at("train"), c.train);
  if (j.contains("optimize_thresholds"))
    c.optimize_thresholds = j.at("optimize_thresholds").get<bool>();
  if (j.contains("alphas")) c.alphas = j.at("alphas").get<std::vector<double>>();
  if (j.contains("out")) c.out = j.at("out").get<std::string>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
}

inline ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config '" + path.string() + "'");
  try {
    return nlohmann::json::parse(is).get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad config '" + path.string() + "': " + e.what());
  }
}

inline std::string case_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "case%03d", i);
  return buf;
}

/// Phantom i of the dataset: the base phantom with seeded jitter of centre,
/// overall radius scale and in-plane aspect.
inline Sample generate_case(const ExperimentConfig& cfg, int i) {
  PhantomConfig pc = cfg.phantom;
  const std::uint64_t cs = derive_seed(cfg.seed, static_cast<std::uint64_t>(i));
  Rng rng(cs);
  auto ctr = pc.resolved_center();
  const bool flat = pc.shape.depth == 1;
  for (int a = flat ? 1 : 0; a < 3; ++a) ctr[a] += rng.uniform(-cfg.center_jitter, cfg.center_jitter);
  pc.center = ctr;
  const double scale = rng.uniform(1.0 - cfg.scale_jitter, 1.0 + cfg.scale_jitter);
  for (auto& r : pc.radii) r *= scale;
  for (int a = flat ? 1 : 0; a < 3; ++a)
    pc.aspect[a] *= rng.uniform(1.0 - cfg.aspect_jitter, 1.0 + cfg.aspect_jitter);
  pc.seed = derive_seed(cs, 0);
  auto ph = synth_phantom(pc);
  return {case_name(i), std::move(ph.image), std::move(ph.labels)};
}

inline std::string manifest_header(int num_classes) {
  std::string h = "case";
  for (int c = 0; c < num_classes; ++c) h += ",count_c" + std::to_string(c);
  return h;
}

struct ManifestRow {
  std::string id;
  std::vector<std::int64_t> counts;
};

inline std::vector<ManifestRow> read_manifest(const fs::path& data_dir, int num_classes) {
  std::ifstream is(data_dir / "manifest.csv");
  if (!is) throw DataError("dataset manifest '" + (data_dir / "manifest.csv").string() + "' not found");
  std::vector<ManifestRow> rows;
  for (const auto& r : csv::read(is, manifest_header(num_classes))) {
    ManifestRow m{r[0], {}};
    for (std::size_t c = 1; c < r.size(); ++c) m.counts.push_back(csv::parse_int(r[c]));
    rows.push_back(std::move(m));
  }
  return rows;
}

/// Writes the phantom dataset and its manifest. Returns the case count.
inline int cmd_gen(const ExperimentConfig& cfg, std::ostream& log = std::cout) {
  detail::require(cfg.num_cases >= 1, "gen: need at least one case");
  const fs::path dir = cfg.data_dir();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("gen: cannot create '" + dir.string() + "': " + ec.message());
  const int nc = cfg.phantom.num_classes();
  std::ofstream man(dir / "manifest.csv", std::ios::binary | std::ios::trunc);
  if (!man) throw DataError("gen: cannot write manifest in '" + dir.string() + "'");
  man << manifest_header(nc) << '\n';
  for (int i = 0; i < cfg.num_cases; ++i) {
    const Sample s = generate_case(cfg, i);
    save_volume(dir / (s.id + ".image"), s.image);
    save_labels(dir / (s.id + ".labels"), s.labels);
    man << s.id;
    for (auto n : class_counts(s.labels, nc)) man << ',' << n;
    man << '\n';
  }
  log << "wrote " << cfg.num_cases << " cases to " << dir.string() << '\n';
  return cfg.num_cases;
}

inline std::vector<Sample> load_dataset(const ExperimentConfig& cfg) {
  const int nc = cfg.net.num_classes();
  std::vector<Sample> out;
  for (const auto& row : read_manifest(cfg.data_dir(), nc)) {
    Sample s{row.id, load_volume(cfg.data_dir() / (row.id + ".image")),
             load_labels(cfg.data_dir() / (row.id + ".labels"))};
    if (class_counts(s.labels, nc) != row.counts)
      throw DataError("dataset case '" + row.id + "' does not match its manifest counts");
    out.push_back(std::move(s));
  }
  if (out.empty()) throw DataError("dataset in '" + cfg.data_dir().string() + "' is empty");
  return out;
}

inline std::string default_run_name(LossKind loss, double alpha) {
  return to_string(loss) + "_a" + csv::fmt_short(alpha);
}

inline NetConfig net_for(const ExperimentConfig& cfg, LossKind loss) {
  NetConfig n = cfg.net;
  n.head = loss == LossKind::SoftmaxCE ? Head::Softmax : Head::Multilevel;
  n.in_channels = cfg.phantom.channels;
  n.activation.num_classes = cfg.phantom.num_classes();
  return n;
}

/// Default threshold search grid: each threshold over (c-1, c) in 0.05 steps.
inline std::vector<GridRange> default_threshold_grid(int m) {
  std::vector<GridRange> g;
  for (int c = 1; c <= m; ++c) g.push_back({c - 0.95, c - 0.05, 0.05});
  return g;
}

inline std::vector<VolumeF> activations_for(const NetParams& params, std::span<const Sample> data,
                                            std::span<const std::size_t> idx) {
  std::vector<VolumeF> out;
  for (auto i : idx) out.push_back(predict_activations(params, data[i].image));
  return out;
}

inline std::vector<LabelVolume> labels_for(std::span<const Sample> data,
                                           std::span<const std::size_t> idx) {
  std::vector<LabelVolume> out;
  for (auto i : idx) out.push_back(data[i].labels);
  return out;
}

struct TrainOutcome {
  TrainResult result;
  Checkpoint checkpoint;
  std::string name;
};

/// Trains one run and writes runs/<name>/checkpoint and history.csv.
inline TrainOutcome cmd_train(const ExperimentConfig& cfg, std::string name = {},
                              std::ostream& log = std::cout) {
  const auto data = load_dataset(cfg);
  TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  NetConfig nc = net_for(cfg, tc.loss);
  nc.seed = cfg.seed;
  if (name.empty()) name = default_run_name(tc.loss, tc.alpha);
  TrainOutcome out;
  out.name = name;
  out.result = train(nc, tc, data, [&](const EpochRecord& r) {
    log << name << " epoch " << r.epoch << " loss " << csv::fmt_short(r.train_loss) << " val_dice";
    for (double d : r.val_dice) log << ' ' << csv::fmt_short(d);
    log << '\n';
  });
  const auto& res = out.result;
  Checkpoint& ck = out.checkpoint;
  ck.params = res.params;
  ck.loss = tc.loss;
  ck.alpha = tc.alpha;
  ck.scheme = tc.scheme;
  ck.epoch = res.best_epoch;
  ck.monitor = res.best_monitor;
  for (auto i : res.val_indices) ck.val_cases.push_back(data[i].id);
  if (cfg.optimize_thresholds && nc.head == Head::Multilevel) {
    const auto acts = activations_for(res.params, data, res.val_indices);
    const auto gts = labels_for(data, res.val_indices);
    const auto grid = default_threshold_grid(nc.num_classes() - 1);
    ck.scheme = optimize_thresholds(acts, gts, grid, tc.scheme).scheme;
    log << name << " optimized thresholds " << to_string(ck.scheme) << '\n';
  }
  const fs::path dir = cfg.run_dir(name);
  fs::create_directories(dir);
  save_checkpoint(dir / "checkpoint", ck);
  std::ofstream hist(dir / "history.csv", std::ios::binary | std::ios::trunc);
  if (!hist) throw DataError("cannot write history in '" + dir.string() + "'");
  write_history_csv(hist, res.history);
  log << name << " stopped at epoch " << res.history.back().epoch << ", best epoch "
      << res.best_epoch << ", best monitor " << csv::fmt_short(res.best_monitor) << '\n';
  return out;
}

inline Checkpoint load_run(const ExperimentConfig& cfg, const std::string& name) {
  const fs::path p = cfg.run_dir(name) / "checkpoint";
  if (!fs::exists(p)) throw DataError("no checkpoint at '" + p.string() + "'");
  return load_checkpoint(p);
}

/// Case indices for a split name: "val" (the run's validation cases) or "all".
inline std::vector<std::size_t> split_indices(std::span<const Sample> data, const Checkpoint& ck,
                                              const std::string& split) {
  std::vector<std::size_t> idx;
  if (split == "all") {
    for (std::size_t i = 0; i < data.size(); ++i) idx.push_back(i);
  } else if (split == "val") {
    for (const auto& id : ck.val_cases) {
      std::size_t i = 0;
      while (i < data.size() && data[i].id != id) ++i;
      if (i == data.size()) throw DataError("validation case '" + id + "' missing from dataset");
      idx.push_back(i);
    }
  } else {
    throw ConfigError("unknown split '" + split + "' (expected val or all)");
  }
  return idx;
}

inline ThresholdScheme scheme_or(const std::optional<ThresholdScheme>& override_,
                                 const Checkpoint& ck) {
  const auto s = override_.value_or(ck.scheme);
  detail::require(s.num_classes() == ck.params.config.num_classes(),
                  "threshold scheme has " + std::to_string(s.levels()) + " thresholds; the run has " +
                      std::to_string(ck.params.config.num_classes()) + " classes");
  return s;
}

/// Writes runs/<name>/pred/<case>.act and <case>.labels for the chosen split.
inline fs::path cmd_predict(const ExperimentConfig& cfg, const std::string& name,
                            const std::string& split = "val",
                            const std::optional<ThresholdScheme>& scheme = std::nullopt,
                            std::ostream& log = std::cout) {
  const auto ck = load_run(cfg, name);
  const auto data = load_dataset(cfg);
  const auto sch = scheme_or(scheme, ck);
  const fs::path dir = cfg.run_dir(name) / "pred";
  fs::create_directories(dir);
  for (auto i : split_indices(data, ck, split)) {
    const VolumeF act = predict_activations(ck.params, data[i].image);
    const LabelVolume lab = ck.params.config.head == Head::Multilevel
                                ? decode_labels(act, sch, ck.params.config.num_classes())
                                : argmax_labels(act);
    save_volume(dir / (data[i].id + ".act"), act);
    save_labels(dir / (data[i].id + ".labels"), lab);
  }
  log << "wrote predictions to " << dir.string() << '\n';
  return dir;
}

struct EvalOutcome {
  std::vector<MetricsReport> reports;
  std::vector<AggregateRow> aggregate;
  fs::path cases_csv;
  fs::path aggregate_csv;
};

inline EvalOutcome write_eval(const ExperimentConfig& cfg, const std::string& tag,
                              std::vector<MetricsReport> reports) {
  EvalOutcome out;
  out.reports = std::move(reports);
  out.aggregate = aggregate(out.reports);
  fs::create_directories(cfg.reports_dir());
  out.cases_csv = cfg.reports_dir() / (tag + "_cases.csv");
  out.aggregate_csv = cfg.reports_dir() / (tag + "_aggregate.csv");
  std::ofstream c(out.cases_csv, std::ios::binary | std::ios::trunc);
  std::ofstream a(out.aggregate_csv, std::ios::binary | std::ios::trunc);
  if (!c || !a) throw DataError("cannot write reports in '" + cfg.reports_dir().string() + "'");
  write_reports_csv(c, out.reports);
  write_aggregate_csv(a, out.aggregate);
  return out;
}

/// Evaluates a run (prediction + decoding) on a split.
inline EvalOutcome cmd_eval(const ExperimentConfig& cfg, const std::string& name,
                            const std::string& split = "val",
                            const std::optional<ThresholdScheme>& scheme = std::nullopt,
                            std::ostream& log = std::cout) {
  const auto ck = load_run(cfg, name);
  const auto data = load_dataset(cfg);
  const auto sch = scheme_or(scheme, ck);
  const int m = ck.params.config.num_classes() - 1;
  std::vector<MetricsReport> reports;
  for (auto i : split_indices(data, ck, split))
    reports.push_back(
        evaluate_case(predict_labels(ck.params, data[i].image, sch), data[i].labels, m, data[i].id));
  auto out = write_eval(cfg, name, std::move(reports));
  log << "wrote " << out.cases_csv.string() << " and " << out.aggregate_csv.string() << '\n';
  return out;
}

/// Evaluates stored label volumes (<pred_dir>/<case>.labels) against the
/// dataset ground truth for every case present in pred_dir.
inline EvalOutcome cmd_eval_dir(const ExperimentConfig& cfg, const fs::path& pred_dir,
                                const std::string& tag, std::ostream& log = std::cout) {
  const auto data = load_dataset(cfg);
  const int m = cfg.phantom.num_classes() - 1;
  std::vector<MetricsReport> reports;
  for (const auto& s : data) {
    const fs::path base = pred_dir / (s.id + ".labels");
    if (!fs::exists(io::header_path(base))) continue;
    reports.push_back(evaluate_case(load_labels(base), s.labels, m, s.id));
  }
  if (reports.empty()) throw DataError("no predictions found in '" + pred_dir.string() + "'");
  auto out = write_eval(cfg, tag, std::move(reports));
  log << "wrote " << out.cases_csv.string() << " and " << out.aggregate_csv.string() << '\n';
  return out;
}

struct ThresholdSweepSpec {
  std::vector<int> indices;       // empty = all
  std::vector<GridRange> ranges;  // one per index; empty = defaults
};

/// Default sweep interval for threshold `index` around the fixed scheme:
/// from just above the lower neighbour to just below the upper one.
inline GridRange default_sweep_range(const ThresholdScheme& fixed, int index, double step = 0.05) {
  const int m = fixed.levels();
  const double below = index == 0 ? 0.0 : fixed[index - 1];
  const double above = index == m - 1 ? static_cast<double>(m) : fixed[index + 1];
  const double lo = std::ceil((below + 1e-9) / step + 1e-9) * step;
  double hi = std::floor((above - 1e-9) / step - 1e-9) * step;
  if (hi <= lo) hi = lo + step / 2;
  return {lo, hi, step};
}

/// Threshold sweep over a run's validation predictions. Activations are also
/// written to runs/<name>/pred so that the table can be re-scored.
inline std::vector<SweepRow> cmd_sweep_thresholds(const ExperimentConfig& cfg, const std::string& name,
                                                  const ThresholdSweepSpec& spec,
                                                  const std::optional<ThresholdScheme>& scheme = std::nullopt,
                                                  std::ostream& log = std::cout) {
  const auto ck = load_run(cfg, name);
  detail::require(ck.params.config.head == Head::Multilevel,
                  "sweep: threshold sweeps need a multi-level run");
  const auto data = load_dataset(cfg);
  const auto sch = scheme_or(scheme, ck);
  const auto idx = split_indices(data, ck, "val");
  const auto acts = activations_for(ck.params, data, idx);
  const auto gts = labels_for(data, idx);
  const fs::path pred = cfg.run_dir(name) / "pred";
  fs::create_directories(pred);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    save_volume(pred / (data[idx[k]].id + ".act"), acts[k]);
    save_labels(pred / (data[idx[k]].id + ".gt"), gts[k]);
  }
  std::vector<int> which = spec.indices;
  if (which.empty())
    for (int i = 0; i < sch.levels(); ++i) which.push_back(i);
  detail::require(spec.ranges.empty() || spec.ranges.size() == which.size(),
                  "sweep: need one range per swept threshold");
  std::vector<SweepRow> rows;
  for (std::size_t k = 0; k < which.size(); ++k) {
    detail::require(which[k] >= 0 && which[k] < sch.levels(), "sweep: threshold index out of range");
    const GridRange r = spec.ranges.empty() ? default_sweep_range(sch, which[k]) : spec.ranges[k];
    auto part = sweep_threshold(acts, gts, which[k], r, sch);
    rows.insert(rows.end(), part.begin(), part.end());
  }
  fs::create_directories(cfg.reports_dir());
  const fs::path out = cfg.reports_dir() / (name + "_sweep.csv");
  std::ofstream os(out, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write '" + out.string() + "'");
  write_sweep_csv(os, rows, sch.levels());
  log << "wrote " << rows.size() << " sweep rows to " << out.string() << '\n';
  return rows;
}

struct AlphaRow {
  LossKind loss = LossKind::MCE;
  double alpha = 0.0;
  std::vector<double> dice;
};

inline constexpr const char* kAlphaHeader = "loss,alpha,dice_c1,dice_c2,dice_c3";

/// Retrains once per alpha with the configured loss and tabulates validation
/// Dice per nested region.
inline std::vector<AlphaRow> cmd_sweep_alpha(const ExperimentConfig& cfg, std::ostream& log = std::cout) {
  detail::require(!cfg.alphas.empty(), "sweep: empty alpha list");
  std::vector<AlphaRow> rows;
  for (double a : cfg.alphas) {
    ExperimentConfig c = cfg;
    c.train.alpha = a;
    const auto t = cmd_train(c, {}, log);
    rows.push_back({cfg.train.loss, a,
                    validation_dice(t.checkpoint.params, load_dataset(c), t.result.val_indices,
                                    t.checkpoint.scheme)});
  }
  fs::create_directories(cfg.reports_dir());
  const fs::path out = cfg.reports_dir() / "alpha_sweep.csv";
  std::ofstream os(out, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write '" + out.string() + "'");
  os << kAlphaHeader << '\n';
  for (const auto& r : rows) {
    os << to_string(r.loss) << ',' << csv::fmt(r.alpha);
    for (double d : r.dice) os << ',' << csv::fmt(d);
    os << '\n';
  }
  log << "wrote " << out.string() << '\n';
  return rows;
}

struct CompareRow {
  std::string method;
  LossKind loss = LossKind::MCE;
  double alpha = 0.0;
  std::vector<double> dice;
  std::int64_t nesting_violations = 0;
  std::int64_t nonadjacent_transitions = 0;
};

inline constexpr const char* kCompareHeader =
    "method,loss,alpha,dice_c1,dice_c2,dice_c3,nesting_violations,nonadjacent_transitions";

inline void write_compare_csv(std::ostream& os, std::span<const CompareRow> rows) {
  os << kCompareHeader << '\n';
  for (const auto& r : rows) {
    os << r.method << ',' << to_string(r.loss) << ',' << csv::fmt(r.alpha);
    for (double d : r.dice) os << ',' << csv::fmt(d);
    os << ',' << r.nesting_violations << ',' << r.nonadjacent_transitions << '\n';
  }
}

inline std::vector<CompareRow> read_compare_csv(std::istream& is) {
  std::vector<CompareRow> out;
  for (const auto& r : csv::read(is, kCompareHeader)) {
    CompareRow c;
    c.method = r[0];
    c.loss = parse_loss_kind(r[1]);
    c.alpha = csv::parse(r[2]);
    for (int k = 3; k < 6; ++k) c.dice.push_back(csv::parse(r[k]));
    c.nesting_violations = csv::parse_int(r[6]);
    c.nonadjacent_transitions = csv::parse_int(r[7]);
    out.push_back(std::move(c));
  }
  return out;
}

/// Trains the multi-level head with MCE and the softmax head with weighted
/// cross-entropy on the same data, seed and trunk, then scores both on the
/// validation split. Writes reports/compare.csv.
inline std::vector<CompareRow> cmd_compare(const ExperimentConfig& cfg, std::ostream& log = std::cout) {
  const auto data = load_dataset(cfg);
  std::vector<CompareRow> rows;
  for (LossKind kind : {LossKind::MCE, LossKind::SoftmaxCE}) {
    ExperimentConfig c = cfg;
    c.train.loss = kind;
    const auto t = cmd_train(c, {}, log);
    const auto& ck = t.checkpoint;
    const int m = ck.params.config.num_classes() - 1;
    CompareRow row;
    row.method = kind == LossKind::SoftmaxCE ? "softmax" : "multilevel";
    row.loss = kind;
    row.alpha = c.train.alpha;
    row.dice.assign(static_cast<std::size_t>(m), 0.0);
    for (auto i : t.result.val_indices) {
      const auto pred = predict_labels(ck.params, data[i].image, ck.scheme);
      const auto d = region_dice(pred, data[i].labels, m);
      for (int k = 0; k < m; ++k) row.dice[k] += d[k];
      row.nesting_violations += nesting_violations(nested_regions(pred, m));
      row.nonadjacent_transitions += nonadjacent_transitions(pred);
    }
    for (auto& d : row.dice) d /= static_cast<double>(t.result.val_indices.size());
    rows.push_back(std::move(row));
  }
  fs::create_directories(cfg.reports_dir());
  const fs::path out = cfg.reports_dir() / "compare.csv";
  std::ofstream os(out, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write '" + out.string() + "'");
  write_compare_csv(os, rows);
  log << "wrote " << out.string() << '\n';
  return rows;
}

}  // namespace nestseg

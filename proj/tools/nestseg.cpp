// nestseg: experiment runner for nested-class segmentation on synthetic
// phantoms. See README.md for the workflow.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nestseg/experiment.hpp"

namespace {

using namespace nestseg;

struct Flags {
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  std::string loss;
  double alpha = 0.0;
  std::string thresholds;
  int epochs = 0;
  int patience = 0;
  int batch = 0;
  double lr = 0.0;
  double dropout = 0.0;
  bool deep_supervision = false;
  int num_cases = 0;
  std::string name;
  std::string split = "val";
  std::string pred_dir;
  std::string mode = "threshold";
  std::vector<int> indices;
  std::vector<std::string> ranges;
  std::vector<double> alphas;
};

// Registers the options shared by every subcommand; returns them so that
// apply() can tell which ones were given.
struct Common {
  CLI::Option* config;
  CLI::Option* out;
  CLI::Option* seed;
};

Common add_common(CLI::App* sub, Flags& f) {
  return {sub->add_option("--config", f.config, "JSON experiment configuration file"),
          sub->add_option("--out", f.out, "output directory (data/, runs/, reports/)"),
          sub->add_option("--seed", f.seed, "master seed")};
}

struct TrainOpts {
  CLI::Option *loss, *alpha, *thresholds, *epochs, *patience, *batch, *lr, *dropout, *ds;
};

TrainOpts add_train(CLI::App* sub, Flags& f) {
  return {sub->add_option("--loss", f.loss, "mce, nce or softmax")
              ->check(CLI::IsMember({"mce", "nce", "softmax"})),
          sub->add_option("--alpha", f.alpha, "class-weight exponent"),
          sub->add_option("--thresholds", f.thresholds, "t1,t2,t3 or 'optimize'"),
          sub->add_option("--epochs", f.epochs, "maximum epochs"),
          sub->add_option("--patience", f.patience, "early-stopping patience"),
          sub->add_option("--batch", f.batch, "mini-batch size"),
          sub->add_option("--lr", f.lr, "ADAM learning rate"),
          sub->add_option("--dropout", f.dropout, "dropout rate in residual blocks"),
          sub->add_flag("--deep-supervision", f.deep_supervision, "sum per-level outputs")};
}

ExperimentConfig base_config(const Common& c, const Flags& f) {
  ExperimentConfig cfg = f.config.empty() ? ExperimentConfig{} : load_experiment_config(f.config);
  if (c.out->count()) cfg.out = f.out;
  if (c.seed->count()) cfg.seed = f.seed;
  return cfg;
}

std::optional<ThresholdScheme> scheme_flag(const Flags& f) {
  if (f.thresholds.empty() || f.thresholds == "optimize") return std::nullopt;
  return parse_thresholds(f.thresholds);
}

void apply_train(ExperimentConfig& cfg, const TrainOpts& t, const Flags& f) {
  if (t.loss->count()) cfg.train.loss = parse_loss_kind(f.loss);
  if (t.alpha->count()) cfg.train.alpha = f.alpha;
  if (t.thresholds->count()) {
    cfg.optimize_thresholds = f.thresholds == "optimize";
    if (auto s = scheme_flag(f)) cfg.train.scheme = *s;
  }
  if (t.epochs->count()) cfg.train.max_epochs = f.epochs;
  if (t.patience->count()) cfg.train.patience = f.patience;
  if (t.batch->count()) cfg.train.batch_size = f.batch;
  if (t.lr->count()) cfg.train.learning_rate = f.lr;
  if (t.dropout->count()) cfg.net.dropout_rate = f.dropout;
  if (t.ds->count()) cfg.net.deep_supervision = f.deep_supervision;
}

GridRange parse_range(const std::string& text) {
  const auto cells = csv::split(text);
  if (cells.size() != 3) throw ConfigError("range must be lo,hi,step: '" + text + "'");
  try {
    return {csv::parse(cells[0]), csv::parse(cells[1]), csv::parse(cells[2])};
  } catch (const DataError&) {
    throw ConfigError("range must be lo,hi,step: '" + text + "'");
  }
}

std::string run_name(const ExperimentConfig& cfg, const Flags& f) {
  return f.name.empty() ? default_run_name(cfg.train.loss, cfg.train.alpha) : f.name;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Nested-class segmentation with a multi-level activation: experiment runner"};
  app.require_subcommand(1);
  Flags f;

  auto* gen = app.add_subcommand("gen", "generate a seeded phantom dataset");
  const auto gen_c = add_common(gen, f);
  auto* gen_n = gen->add_option("--n", f.num_cases, "number of cases");

  auto* trn = app.add_subcommand("train", "train one network and write its checkpoint");
  const auto trn_c = add_common(trn, f);
  const auto trn_t = add_train(trn, f);
  trn->add_option("--name", f.name, "run name (default <loss>_a<alpha>)");

  auto* prd = app.add_subcommand("predict", "write activations and decoded labels of a run");
  const auto prd_c = add_common(prd, f);
  const auto prd_t = add_train(prd, f);
  prd->add_option("--name", f.name, "run name");
  prd->add_option("--split", f.split, "val or all")->check(CLI::IsMember({"val", "all"}));

  auto* evl = app.add_subcommand("eval", "per-case and aggregate metrics of a run");
  const auto evl_c = add_common(evl, f);
  const auto evl_t = add_train(evl, f);
  evl->add_option("--name", f.name, "run name (also the report tag)");
  evl->add_option("--split", f.split, "val or all")->check(CLI::IsMember({"val", "all"}));
  evl->add_option("--pred-dir", f.pred_dir, "evaluate stored <case>.labels volumes instead");

  auto* swp = app.add_subcommand("sweep", "threshold sweep of a run, or alpha sweep by retraining");
  const auto swp_c = add_common(swp, f);
  const auto swp_t = add_train(swp, f);
  swp->add_option("--mode", f.mode, "threshold or alpha")->check(CLI::IsMember({"threshold", "alpha"}));
  swp->add_option("--name", f.name, "run name (threshold mode)");
  swp->add_option("--index", f.indices, "0-based threshold index to sweep (repeatable)");
  swp->add_option("--range", f.ranges, "lo,hi,step per --index");
  auto* swp_alphas = swp->add_option("--alphas", f.alphas, "alpha values (alpha mode)")->delimiter(',');

  auto* cmp = app.add_subcommand("compare", "multi-level (MCE) vs softmax head on the same data");
  const auto cmp_c = add_common(cmp, f);
  const auto cmp_t = add_train(cmp, f);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (gen->parsed()) {
      auto cfg = base_config(gen_c, f);
      if (gen_n->count()) cfg.num_cases = f.num_cases;
      cmd_gen(cfg);
    } else if (trn->parsed()) {
      auto cfg = base_config(trn_c, f);
      apply_train(cfg, trn_t, f);
      cmd_train(cfg, f.name);
    } else if (prd->parsed()) {
      auto cfg = base_config(prd_c, f);
      apply_train(cfg, prd_t, f);
      cmd_predict(cfg, run_name(cfg, f), f.split, scheme_flag(f));
    } else if (evl->parsed()) {
      auto cfg = base_config(evl_c, f);
      apply_train(cfg, evl_t, f);
      if (!f.pred_dir.empty())
        cmd_eval_dir(cfg, f.pred_dir, f.name.empty() ? "stored" : f.name);
      else
        cmd_eval(cfg, run_name(cfg, f), f.split, scheme_flag(f));
    } else if (swp->parsed()) {
      auto cfg = base_config(swp_c, f);
      apply_train(cfg, swp_t, f);
      if (f.mode == "alpha") {
        if (swp_alphas->count()) cfg.alphas = f.alphas;
        cmd_sweep_alpha(cfg);
      } else {
        ThresholdSweepSpec spec;
        spec.indices = f.indices;
        for (const auto& r : f.ranges) spec.ranges.push_back(parse_range(r));
        cmd_sweep_thresholds(cfg, run_name(cfg, f), spec, scheme_flag(f));
      }
    } else if (cmp->parsed()) {
      auto cfg = base_config(cmp_c, f);
      apply_train(cfg, cmp_t, f);
      cmd_compare(cfg);
    }
  } catch (const std::exception& e) {
    std::cerr << "nestseg: " << e.what() << '\n';
    return exit_code(e);
  }
  return kExitOk;
}

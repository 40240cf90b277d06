#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "nse/pipeline.hpp"

namespace fs = std::filesystem;
using namespace nse;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitGate = 3;
constexpr int kExitNumeric = 4;

struct Common {
  std::string config_path;
  std::string preset_name;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_path, "run config (JSON); defaults to <out>/config.json");
  cmd->add_option("--preset", c.preset_name, "start from a named preset instead of a config file");
  cmd->add_option("-o,--out", c.out, "run directory; every other path is relative to it");
}

// Resolves the run config and directory. A run directory's frozen config wins
// over presets; an explicit --config must agree with it.
RunConfig resolve(const Common& c) {
  RunConfig cfg;
  if (!c.config_path.empty()) {
    if (!fs::exists(c.config_path)) throw InputError("config file not found: " + c.config_path);
    cfg = load_run_config(c.config_path);
  } else if (!c.out.empty() && fs::exists(c.out + "/config.json")) {
    cfg = load_run_config(c.out + "/config.json");
  } else if (!c.preset_name.empty()) {
    cfg = preset(c.preset_name);
    cfg.resolve();
  } else {
    throw InputError("no config: pass --config, --preset, or an --out directory holding config.json");
  }
  if (!c.out.empty()) cfg.out_dir = c.out;
  return cfg;
}

void print_metrics(const std::string& label, const MetricReport& m) {
  std::printf("%-10s eff %.4f  gen %.4f  spe %.4f  flu %.4f  con %.4f  score %.4f\n", label.c_str(), m.efficacy,
              m.generalization, m.specificity, m.fluency, m.consistency, m.score);
}

int cmd_pretrain(const Common& c) {
  RunConfig cfg = resolve(c);
  RunPaths paths(cfg.out_dir);
  freeze_config(paths, cfg);
  Corpus corpus = load_or_generate_corpus(paths, cfg);
  auto t0 = std::chrono::steady_clock::now();
  PretrainOutcome r = run_pretrain(paths, cfg, corpus);
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("steps %d  loss %.4f  recall %.4f  paraphrase recall %.4f  (%.1fs)\n", r.report.steps,
              r.report.final_loss, r.report.recall, r.report.paraphrase_recall, secs);
  std::printf("checkpoint %s  hash %s\n", paths.checkpoint().c_str(), hex64(model_hash(r.model)).c_str());
  if (!r.report.gate_passed) {
    std::fprintf(stderr, "memorization gate failed: recall %.4f < %.2f\n", r.report.recall, kMemorizationGate);
    return kExitGate;
  }
  return kExitOk;
}

int cmd_estimate_cov(const Common& c) {
  RunConfig cfg = resolve(c);
  RunPaths paths(cfg.out_dir);
  freeze_config(paths, cfg);
  Corpus corpus = load_or_generate_corpus(paths, cfg);
  ModelState model = load_pristine(paths);
  bool cached = false;
  CovarianceStore s = load_or_estimate_covariance(paths, cfg, model, corpus, &cached);
  std::printf("covariance for %zu layers from %zu samples%s -> %s\n", s.moments.size(), s.sample_count,
              cached ? " (cached)" : "", paths.cov_dir().c_str());
  return kExitOk;
}

int cmd_precompute(const Common& c) {
  RunConfig cfg = resolve(c);
  RunPaths paths(cfg.out_dir);
  freeze_config(paths, cfg);
  Corpus corpus = load_or_generate_corpus(paths, cfg);
  ModelState model = load_pristine(paths);
  require_memorization(model, corpus);
  PrecomputeStats stats;
  auto targets = run_precompute(paths, cfg, model, corpus, &stats);
  int converged = 0;
  for (const auto& [id, t] : targets) converged += t.converged;
  std::printf("targets %zu  cache hits %d  computed %d  corrupt %d  converged %d\n", targets.size(), stats.hits,
              stats.computed, stats.corrupt, converged);
  return kExitOk;
}

struct EditArgs {
  std::string mode = "NSE";
  int resume_from = 0;
  bool dump_deltas = false;
  bool no_eval = false;
};

int cmd_edit(const Common& c, const EditArgs& a) {
  RunConfig cfg = resolve(c);
  RunPaths paths(cfg.out_dir);
  freeze_config(paths, cfg);
  EditOptions opts;
  opts.mode = parse_edit_mode(a.mode);
  opts.resume_from = a.resume_from;
  opts.dump_deltas = a.dump_deltas;
  opts.evaluate_rounds = !a.no_eval;
  opts.on_round = [](const RoundRecord& r) {
    std::printf("round %2d  iterations %zu  ok %zu  skipped %zu  pending %zu  (%.1fs)%s\n", r.round,
                r.edit.iterations.size(), r.edit.successful.size(), r.edit.skipped.size(), r.edit.pending.size(),
                r.seconds, r.edit.aborted ? "  ABORTED" : "");
    if (r.metrics) print_metrics("", *r.metrics);
    std::fflush(stdout);
  };
  EditOutcome out = run_edit(paths, cfg, opts);
  std::printf("results in %s\n", paths.mode_dir(opts.mode).c_str());
  if (out.aborted) {
    std::fprintf(stderr, "edit aborted: %s\n", out.error.c_str());
    return kExitNumeric;
  }
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint = "model/pristine.ckpt";
  std::string set = "edits";
  std::string mode;
  int limit = -1;
  std::string json_out;
};

int cmd_eval(const Common& c, const EvalArgs& a) {
  RunConfig cfg = resolve(c);
  RunPaths paths(cfg.out_dir);
  Corpus corpus = load_or_generate_corpus(paths, cfg);
  ModelState model = load_checkpoint(cfg.out_dir + "/" + a.checkpoint);
  std::vector<FactRecord> facts;
  if (a.set == "edits")
    facts = corpus.edits;
  else if (a.set == "train")
    facts = corpus.train;
  else
    throw InputError("--set must be 'edits' or 'train'");
  if (a.limit >= 0 && static_cast<std::size_t>(a.limit) < facts.size()) facts.resize(static_cast<std::size_t>(a.limit));
  if (facts.empty()) throw InputError("empty evaluation set");
  EvalConfig ec = cfg.eval;
  if (!a.mode.empty()) ec.mode = parse_eval_mode(a.mode);
  MetricReport m = evaluate(model, facts, reference_texts(corpus), ec);
  print_metrics(to_string(ec.mode), m);
  for (const auto& w : m.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  if (!a.json_out.empty()) {
    std::string path = cfg.out_dir + "/" + a.json_out;
    fs::create_directories(fs::path(path).parent_path());
    std::ofstream(path) << nlohmann::json(m).dump(2) << "\n";
  }
  return kExitOk;
}

int cmd_report(const Common& c, const std::string& mode) {
  RunConfig cfg = resolve(c);
  RunPaths paths(cfg.out_dir);
  ReportSummary s = run_report(paths.mode_dir(parse_edit_mode(mode)), cfg.protocol.n_rounds);
  std::printf("rounds present %zu of %d\n", s.present.size(), s.expected_rounds);
  for (int r : s.missing) std::printf("missing round %d\n", r);
  std::printf("wrote %s/report.csv and report.json\n", paths.mode_dir(parse_edit_mode(mode)).c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neuron-level sequential knowledge editing on a toy transformer"};
  app.require_subcommand(1);

  Common common;
  auto* pretrain = app.add_subcommand("pretrain", "generate the corpus and train the model until it memorizes it");
  add_common(pretrain, common);
  auto* cov = app.add_subcommand("estimate-cov", "estimate key second moments for the edit layers");
  add_common(cov, common);
  auto* pre = app.add_subcommand("precompute-z", "compute rewound value targets for every scheduled edit");
  add_common(pre, common);

  EditArgs edit_args;
  auto* edit = app.add_subcommand("edit", "run the sequential editing protocol");
  add_common(edit, common);
  edit->add_option("--mode", edit_args.mode, "NSE | MEMIT-baseline | single-layer-baseline");
  edit->add_option("--resume-from", edit_args.resume_from, "continue after this many completed rounds");
  edit->add_flag("--dump-deltas", edit_args.dump_deltas, "write every solved delta under deltas/");
  edit->add_flag("--no-eval", edit_args.no_eval, "skip per-round metrics");

  EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval, common);
  eval->add_option("--checkpoint", eval_args.checkpoint, "checkpoint path inside the run directory");
  eval->add_option("--set", eval_args.set, "edits | train");
  eval->add_option("--eval-mode", eval_args.mode, "counterfact | zsre");
  eval->add_option("--limit", eval_args.limit, "evaluate only the first N facts");
  eval->add_option("--json", eval_args.json_out, "also write the report to this file");

  std::string report_mode = "NSE";
  auto* report = app.add_subcommand("report", "collate round files into per-metric time series");
  add_common(report, common);
  report->add_option("--mode", report_mode, "edit mode whose directory to collate");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*pretrain) return cmd_pretrain(common);
    if (*cov) return cmd_estimate_cov(common);
    if (*pre) return cmd_precompute(common);
    if (*edit) return cmd_edit(common, edit_args);
    if (*eval) return cmd_eval(common, eval_args);
    if (*report) return cmd_report(common, report_mode);
  } catch (const InputError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const StateError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitGate;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "fatal: %s\n", e.what());
    return 1;
  }
  return kExitUsage;
}

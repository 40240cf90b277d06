#include "nse/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace nse {
namespace fs = std::filesystem;
namespace {

std::string round_tag(int round) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "round_%02d", round);
  return buf;
}

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(path + ": " + e.what());
  }
}

void write_json(const std::string& path, const nlohmann::json& j) {
  fs::create_directories(fs::path(path).parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << j.dump(2) << "\n";
}

void write_text(const std::string& path, const std::string& text) {
  fs::create_directories(fs::path(path).parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << text;
}

nlohmann::json comparable(const RunConfig& c) {
  nlohmann::json j = c;
  j.erase("out_dir");
  j["edit"].erase("mode");
  return j;
}

std::vector<FactRecord> unscheduled_train(const RunConfig& config, const Corpus& corpus) {
  std::set<std::pair<std::vector<int>, std::vector<int>>> scheduled;
  for (const auto& round : schedule_rounds(config, corpus))
    for (const auto& f : round) scheduled.insert({f.subject, f.relation});
  std::vector<FactRecord> out;
  for (const auto& f : corpus.train)
    if (!scheduled.count({f.subject, f.relation})) out.push_back(f);
  return out;
}

}  // namespace

std::string RunPaths::round_file(EditMode mode, int round) const {
  return mode_dir(mode) + "/" + round_tag(round) + ".json";
}

std::string RunPaths::round_checkpoint(EditMode mode, int round) const {
  return mode_dir(mode) + "/ckpt/" + round_tag(round) + ".ckpt";
}

std::string RunPaths::round_cov(EditMode mode, int round) const { return mode_dir(mode) + "/cov/" + round_tag(round); }

void to_json(nlohmann::json& j, const RoundRecord& r) {
  j = nlohmann::json{{"round", r.round}, {"edit", r.edit}, {"held_out_recall", r.held_out_recall}, {"seconds", r.seconds}};
  j["metrics"] = r.metrics ? nlohmann::json(*r.metrics) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, RoundRecord& r) {
  r.round = j.at("round").get<int>();
  r.edit = j.at("edit").get<EditRoundReport>();
  r.held_out_recall = j.value("held_out_recall", 0.0);
  r.seconds = j.value("seconds", 0.0);
  if (j.contains("metrics") && !j.at("metrics").is_null())
    r.metrics = j.at("metrics").get<MetricReport>();
  else
    r.metrics.reset();
}

void freeze_config(const RunPaths& paths, const RunConfig& config) {
  if (fs::exists(paths.config())) {
    RunConfig existing = read_json(paths.config()).get<RunConfig>();
    if (comparable(existing) != comparable(config))
      throw InputError("run directory " + paths.root() + " was created with a different config");
    return;
  }
  fs::create_directories(paths.root());
  save_run_config(paths.config(), config);
}

Corpus load_or_generate_corpus(const RunPaths& paths, const RunConfig& config) {
  if (fs::exists(paths.corpus())) {
    Corpus c = load_corpus(paths.corpus());
    if (nlohmann::json(c.config) != nlohmann::json(config.corpus))
      throw InputError("corpus in " + paths.root() + " does not match the run config");
    return c;
  }
  Corpus c = generate_corpus(config.corpus);
  fs::create_directories(paths.root());
  save_corpus(paths.corpus(), c);
  return c;
}

PretrainOutcome run_pretrain(const RunPaths& paths, const RunConfig& config, const Corpus& corpus) {
  ModelConfig mc = config.model;
  mc.vocab_size = corpus.vocab.size();
  TrainResult r = train(mc, corpus, config.train);
  fs::create_directories(fs::path(paths.checkpoint()).parent_path());
  save_checkpoint(paths.checkpoint(), r.model);
  nlohmann::json rep = r.report;
  rep["model_hash"] = hex64(model_hash(r.model));
  write_json(paths.train_report(), rep);
  return {std::move(r.model), std::move(r.report)};
}

ModelState load_pristine(const RunPaths& paths) {
  if (!fs::exists(paths.checkpoint())) throw InputError("no pretrained checkpoint in " + paths.root() + "; run pretrain first");
  ModelState m = load_checkpoint(paths.checkpoint());
  if (m.edit_generation != 0) throw StateError("checkpoint " + paths.checkpoint() + " is not a pristine model");
  return m;
}

CovarianceStore load_or_estimate_covariance(const RunPaths& paths, const RunConfig& config, const ModelState& model,
                                            const Corpus& corpus, bool* from_cache) {
  const std::string dir = paths.cov_dir();
  nlohmann::json request{{"layers", config.edit.layers},
                         {"sample_cap", config.protocol.cov_sample_cap},
                         {"model_hash", hex64(model_hash(model))},
                         {"corpus_hash", hex64(corpus_hash(corpus))}};
  if (fs::exists(dir + "/request.json") && fs::exists(dir + "/manifest.json")) {
    try {
      if (read_json(dir + "/request.json") == request) {
        CovarianceStore s = load_covariance(dir);
        s.lambda = config.protocol.lambda;
        if (from_cache) *from_cache = true;
        return s;
      }
    } catch (const Error&) {
      // unreadable cache: rebuilt below
    }
  }
  CovarianceStore s = estimate_covariance(model, corpus.covariance_prompts, config.edit.layers,
                                          config.protocol.cov_sample_cap, config.protocol.lambda);
  fs::create_directories(dir);
  save_covariance(dir, s, request["corpus_hash"], request["model_hash"]);
  write_json(dir + "/request.json", request);
  if (from_cache) *from_cache = false;
  return s;
}

std::vector<std::vector<FactRecord>> schedule_rounds(const RunConfig& config, const Corpus& corpus) {
  const auto& p = config.protocol;
  if (static_cast<std::size_t>(p.batch_size * p.n_rounds) > corpus.edits.size())
    throw InputError("protocol needs " + std::to_string(p.batch_size * p.n_rounds) + " edits, corpus has " +
                     std::to_string(corpus.edits.size()));
  std::vector<std::vector<FactRecord>> rounds;
  for (int r = 0; r < p.n_rounds; ++r) {
    auto first = corpus.edits.begin() + static_cast<std::ptrdiff_t>(r) * p.batch_size;
    rounds.emplace_back(first, first + p.batch_size);
  }
  return rounds;
}

std::map<std::string, ValueTarget> run_precompute(const RunPaths& paths, const RunConfig& config, ModelState& model,
                                                  const Corpus& corpus, PrecomputeStats* stats) {
  WeightSnapshot snap = snapshot_weights(model, config.edit.layers);
  std::vector<FactRecord> facts;
  for (const auto& round : schedule_rounds(config, corpus)) facts.insert(facts.end(), round.begin(), round.end());
  TargetCache cache(paths.target_dir());
  return precompute_targets(model, snap, facts, config.edit.l0(), config.opt, &cache, stats);
}

EditOutcome run_edit(const RunPaths& paths, const RunConfig& config, const EditOptions& options) {
  using clock = std::chrono::steady_clock;
  EditConfig ec = config.edit;
  ec.mode = options.mode;
  ec.validate();

  Corpus corpus = load_or_generate_corpus(paths, config);
  ModelState pristine = load_pristine(paths);
  require_memorization(pristine, corpus);
  const auto rounds = schedule_rounds(config, corpus);
  if (options.resume_from < 0 || options.resume_from >= static_cast<int>(rounds.size()))
    throw InputError("resume point must lie in [0, " + std::to_string(rounds.size() - 1) + "]");

  const std::string mdir = paths.mode_dir(options.mode);
  fs::create_directories(mdir);
  RunConfig frozen = config;
  frozen.edit.mode = options.mode;
  save_run_config(mdir + "/config.json", frozen);

  std::vector<FactRecord> scheduled;
  for (const auto& r : rounds) scheduled.insert(scheduled.end(), r.begin(), r.end());
  const auto refs = reference_texts(corpus);
  const auto held_out = unscheduled_train(config, corpus);

  EditOutcome out;
  if (options.evaluate_rounds) {
    out.pre = evaluate(pristine, scheduled, refs, config.eval);
    nlohmann::json pre = out.pre;
    pre["held_out_recall"] = recall(pristine, held_out);
    write_json(mdir + "/pre.json", pre);
  }

  CovarianceStore store = load_or_estimate_covariance(paths, config, pristine, corpus);
  WeightSnapshot snap = snapshot_weights(pristine, ec.layers);
  std::map<std::string, ValueTarget> targets;
  if (ec.effective_rewind()) targets = run_precompute(paths, config, pristine, corpus);

  ModelState model = pristine;
  const int first = options.resume_from + 1;
  if (options.resume_from > 0) {
    for (int r = 1; r <= options.resume_from; ++r)
      out.rounds.push_back(read_json(paths.round_file(options.mode, r)).get<RoundRecord>());
    model = load_checkpoint(paths.round_checkpoint(options.mode, options.resume_from));
    store = load_covariance(paths.round_cov(options.mode, options.resume_from));
  }

  int current = first;
  auto started = clock::now();
  SequentialOptions so;
  so.snapshot = &snap;
  so.opt = config.opt;
  so.targets = ec.effective_rewind() ? &targets : nullptr;
  if (options.dump_deltas) {
    fs::create_directories(mdir + "/deltas");
    so.observer = [&](int iteration, const EditDelta& d) {
      std::string stem = mdir + "/deltas/" + round_tag(current) + "_iter_" + std::to_string(iteration) + "_layer_" +
                         std::to_string(d.layer);
      save_matrix(stem + ".bin", d.delta);
      write_json(stem + ".json", nlohmann::json{{"layer", d.layer}, {"iteration", iteration}, {"indices", d.indices}});
    };
  }
  so.after_round = [&](int round, const EditRoundReport& report, const std::map<std::string, ValueTarget>&) {
    RoundRecord rec;
    rec.round = round;
    rec.edit = report;
    if (options.evaluate_rounds) {
      std::vector<FactRecord> cumulative;
      for (int r = 0; r < round; ++r)
        cumulative.insert(cumulative.end(), rounds[static_cast<std::size_t>(r)].begin(),
                          rounds[static_cast<std::size_t>(r)].end());
      rec.metrics = evaluate(model, cumulative, refs, config.eval);
      rec.held_out_recall = recall(model, held_out);
    }
    rec.seconds = std::chrono::duration<double>(clock::now() - started).count();
    write_json(paths.round_file(options.mode, round), rec);
    if (options.save_round_state) {
      fs::create_directories(mdir + "/ckpt");
      save_checkpoint(paths.round_checkpoint(options.mode, round), model);
      save_covariance(paths.round_cov(options.mode, round), store, hex64(corpus_hash(corpus)), hex64(model_hash(model)));
    }
    out.rounds.push_back(rec);
    if (options.on_round) options.on_round(rec);
    ++current;
    started = clock::now();
  };

  std::vector<std::vector<FactRecord>> todo(rounds.begin() + options.resume_from, rounds.end());
  run_sequential(model, todo, store, ec, so, first);
  if (!out.rounds.empty() && out.rounds.back().edit.aborted) {
    out.aborted = true;
    out.error = out.rounds.back().edit.error;
  }

  std::ostringstream csv;
  csv << metric_csv_header() << ",held_out_recall\n";
  for (const auto& r : out.rounds)
    if (r.metrics) csv << metric_csv_row(r.round, *r.metrics) << ',' << r.held_out_recall << "\n";
  write_text(mdir + "/metrics.csv", csv.str());
  save_checkpoint(mdir + "/final.ckpt", model);
  run_report(mdir, config.protocol.n_rounds);
  out.model = std::move(model);
  return out;
}

ReportSummary run_report(const std::string& mode_dir, int expected_rounds) {
  if (!fs::is_directory(mode_dir)) throw InputError("no such run directory " + mode_dir);
  if (expected_rounds < 1) throw InputError("expected round count must be >= 1");
  static const std::vector<std::string> metrics{"efficacy", "generalization", "specificity", "fluency",
                                                "consistency", "score"};
  ReportSummary s;
  s.expected_rounds = expected_rounds;
  s.series = nlohmann::json::object();
  for (const auto& m : metrics) s.series[m] = nlohmann::json::array();
  s.series["held_out_recall"] = nlohmann::json::array();

  std::ostringstream csv;
  csv << "round,status";
  for (const auto& m : metrics) csv << ',' << m;
  csv << ",held_out_recall,successful,skipped,pending\n";
  csv.precision(10);
  for (int r = 1; r <= expected_rounds; ++r) {
    std::string path = mode_dir + "/" + round_tag(r) + ".json";
    if (!fs::exists(path)) {
      s.missing.push_back(r);
      csv << r << ",missing";
      for (std::size_t i = 0; i < metrics.size() + 4; ++i) csv << ',';
      csv << "\n";
      continue;
    }
    RoundRecord rec = read_json(path).get<RoundRecord>();
    s.present.push_back(r);
    csv << r << ',' << (rec.edit.aborted ? "aborted" : "ok");
    if (rec.metrics) {
      nlohmann::json mj = *rec.metrics;
      for (const auto& m : metrics) {
        csv << ',' << mj[m].get<double>();
        s.series[m].push_back({r, mj[m]});
      }
    } else {
      for (std::size_t i = 0; i < metrics.size(); ++i) csv << ',';
    }
    csv << ',' << rec.held_out_recall << ',' << rec.edit.successful.size() << ',' << rec.edit.skipped.size() << ','
        << rec.edit.pending.size() << "\n";
    s.series["held_out_recall"].push_back({r, rec.held_out_recall});
  }
  nlohmann::json summary{{"expected_rounds", expected_rounds}, {"present", s.present}, {"missing", s.missing},
                         {"series", s.series}};
  if (fs::exists(mode_dir + "/pre.json")) summary["pre"] = read_json(mode_dir + "/pre.json");
  write_text(mode_dir + "/report.csv", csv.str());
  write_json(mode_dir + "/report.json", summary);
  return s;
}

}  // namespace nse

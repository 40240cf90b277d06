#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nse/corpus.hpp"
#include "nse/editor.hpp"
#include "nse/eval.hpp"
#include "nse/keyvalue.hpp"
#include "nse/pretrain.hpp"
#include "nse/run_config.hpp"

namespace nse {

/// File layout of a run directory.
///
///   config.json            frozen RunConfig (seed resolved)
///   corpus.jsonl
///   model/pristine.ckpt    + .json sidecar; train_report.json beside it
///   cov/                   covariance cache
///   targets/               rewound value-target cache
///   edit-<mode>/           one directory per edit mode:
///     config.json, pre.json, round_NN.json, ckpt/round_NN.ckpt,
///     cov/round_NN/, deltas/, metrics.csv, report.csv, report.json
class RunPaths {
 public:
  explicit RunPaths(std::string root) : root_(std::move(root)) {}
  const std::string& root() const { return root_; }
  std::string config() const { return root_ + "/config.json"; }
  std::string corpus() const { return root_ + "/corpus.jsonl"; }
  std::string checkpoint() const { return root_ + "/model/pristine.ckpt"; }
  std::string train_report() const { return root_ + "/model/train_report.json"; }
  std::string cov_dir() const { return root_ + "/cov"; }
  std::string target_dir() const { return root_ + "/targets"; }
  std::string mode_dir(EditMode mode) const { return root_ + "/edit-" + to_string(mode); }
  std::string round_file(EditMode mode, int round) const;
  std::string round_checkpoint(EditMode mode, int round) const;
  std::string round_cov(EditMode mode, int round) const;

 private:
  std::string root_;
};

/// Per-round record: the editor's report plus metrics on the cumulative
/// edited set and recall of train facts outside the edit schedule.
struct RoundRecord {
  int round = 0;
  EditRoundReport edit;
  std::optional<MetricReport> metrics;
  double held_out_recall = 0.0;
  double seconds = 0.0;
};

void to_json(nlohmann::json& j, const RoundRecord& r);
void from_json(const nlohmann::json& j, RoundRecord& r);

/// Writes config.json into the run directory, or checks that an existing one
/// matches.
void freeze_config(const RunPaths& paths, const RunConfig& config);

Corpus load_or_generate_corpus(const RunPaths& paths, const RunConfig& config);

struct PretrainOutcome {
  ModelState model;
  TrainingReport report;
};
PretrainOutcome run_pretrain(const RunPaths& paths, const RunConfig& config, const Corpus& corpus);

ModelState load_pristine(const RunPaths& paths);

/// Loads the covariance cache if it was built from this model, corpus, layer
/// set and sample cap; otherwise estimates and stores it.
CovarianceStore load_or_estimate_covariance(const RunPaths& paths, const RunConfig& config, const ModelState& model,
                                            const Corpus& corpus, bool* from_cache = nullptr);

std::map<std::string, ValueTarget> run_precompute(const RunPaths& paths, const RunConfig& config, ModelState& model,
                                                  const Corpus& corpus, PrecomputeStats* stats = nullptr);

/// Edit facts scheduled for the protocol, split into rounds.
std::vector<std::vector<FactRecord>> schedule_rounds(const RunConfig& config, const Corpus& corpus);

struct EditOptions {
  EditMode mode = EditMode::kNse;
  int resume_from = 0;  // number of rounds already on disk to resume after
  bool dump_deltas = false;
  bool evaluate_rounds = true;
  bool save_round_state = true;
  std::function<void(const RoundRecord&)> on_round;
};

struct EditOutcome {
  std::vector<RoundRecord> rounds;
  MetricReport pre;
  ModelState model;
  bool aborted = false;
  std::string error;
};

/// Runs the sequential protocol for one mode, writing every artifact under
/// the mode directory. An aborted round is recorded and ends the run.
EditOutcome run_edit(const RunPaths& paths, const RunConfig& config, const EditOptions& options);

struct ReportSummary {
  int expected_rounds = 0;
  std::vector<int> present;
  std::vector<int> missing;
  nlohmann::json series;  // metric -> [[round, value], ...]
};

/// Collates round files of a mode directory into report.csv and report.json.
ReportSummary run_report(const std::string& mode_dir, int expected_rounds);

}  // namespace nse

#pragma once

#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "nse/corpus.hpp"
#include "nse/keyvalue.hpp"
#include "nse/model.hpp"
#include "nse/value_opt.hpp"

namespace nse {

enum class EditMode {
  kNse,           // neuron selection, iterative multi-layer editing, rewound targets
  kMemit,         // full-width solve over all edit layers, one sweep, live targets
  kSingleLayer,   // full-width solve on the topmost layer only, one sweep, live targets
};

std::string to_string(EditMode mode);
EditMode parse_edit_mode(const std::string& s);

struct EditConfig {
  std::vector<int> layers{1, 2, 3, 4};  // ascending, contiguous; topmost is l0
  double p = 0.8;
  double alpha_lower = 0.1;
  double alpha_upper = 100.0;
  int max_iterations = 5;
  EditMode mode = EditMode::kNse;
  bool rewind = true;  // compute targets against the original W_out
  bool absorb = true;  // add each round's keys to the preserved covariance

  int l0() const { return layers.back(); }
  void validate() const;
  /// Effective settings after applying the mode: baselines force p = 1 and a
  /// single sweep without thresholds, rewinding or absorption.
  bool uses_thresholds() const { return mode == EditMode::kNse; }
  double effective_p() const { return mode == EditMode::kNse ? p : 1.0; }
  int effective_iterations() const { return mode == EditMode::kNse ? max_iterations : 1; }
  bool effective_rewind() const { return mode == EditMode::kNse && rewind; }
  bool effective_absorb() const { return mode == EditMode::kNse && absorb; }
  std::vector<int> effective_layers() const;
};

void to_json(nlohmann::json& j, const EditConfig& c);
void from_json(const nlohmann::json& j, EditConfig& c);

struct NeuronSelection {
  int layer = 0;
  std::vector<int> indices;  // descending score, ties by ascending index
  double coverage = 0.0;     // sum of selected scores
  double total = 0.0;        // sum of all scores
};

struct EditDelta {
  int layer = 0;
  std::vector<int> indices;
  Matrix delta;   // d_model x |indices|
  Matrix before;  // the slice as it was when applied; empty until then
};

struct IterationStats {
  int pending = 0;               // facts edited in this iteration
  double mean_residual = 0.0;    // over all active facts, after the sweep
  double max_residual = 0.0;
  double pending_mean_before = 0.0;  // over this iteration's pending facts, before the sweep
  double pending_mean_after = 0.0;   // same facts, after the sweep
};

struct EditRoundReport {
  int round = 0;
  double initial_mean_residual = 0.0;  // over active facts before any sweep
  std::vector<IterationStats> iterations;
  std::vector<std::string> successful;
  std::vector<std::string> skipped;
  std::vector<std::string> pending;
  std::map<int, std::vector<double>> delta_norms;    // layer -> ||Delta||_F per iteration
  std::map<int, std::vector<int>> neuron_counts;     // layer -> |I| per iteration
  std::map<int, std::vector<std::vector<int>>> selections;  // layer -> I per iteration
  bool aborted = false;
  std::string error;
};

void to_json(nlohmann::json& j, const EditRoundReport& r);
void from_json(const nlohmann::json& j, EditRoundReport& r);

/// Shortest prefix of the score-sorted neurons whose sum reaches p * total.
NeuronSelection select_neurons(std::span<const double> scores, double p, int layer = 0);
NeuronSelection select_neurons(const Vector& scores, double p, int layer = 0);

/// Q_j = sum_i |K1(j, i)| over the batch columns.
Vector batch_scores(const Matrix& keys);

/// Delta = (V1 - W K1) K1^T (C0 + K1 K1^T)^{-1}. Shapes: W d x n, K1 n x m,
/// V1 d x m, C0 n x n.
EditDelta solve_neuron_delta(const Matrix& w, const Matrix& k1, const Matrix& v1, const Matrix& c0,
                             std::vector<int> indices = {}, int layer = 0);
/// The same solve written in terms of the residual R = V1 - W K1.
EditDelta solve_residual_delta(const Matrix& k1, const Matrix& residual, const Matrix& c0, std::vector<int> indices = {},
                               int layer = 0);
/// Same solve over every neuron of the layer.
EditDelta solve_full_delta(const Matrix& w, const Matrix& k1, const Matrix& v1, const Matrix& c0, int layer = 0);

/// Share of the residual z - h^{l0} assigned to layer l: 1 / (l0 - l + 1).
Vector spread_residual(const Vector& z, const Vector& h_l0, int layer, int l0);

/// Adds delta into the selected columns of W_out and records their old values.
void apply_delta(ModelState& model, EditDelta& delta);
/// Undoes apply_delta exactly. A delta that was never applied is subtracted.
void revert_delta(ModelState& model, const EditDelta& delta);

/// Called once per solved delta, after it has been applied.
using DeltaObserver = std::function<void(int iteration, const EditDelta&)>;

/// Raised when a round cannot complete; carries the partial report.
class EditAborted : public NumericError {
 public:
  EditAborted(const std::string& what, EditRoundReport report) : NumericError(what), report(std::move(report)) {}
  EditRoundReport report;
};

/// One editing round over a batch. On a solve failure the partial report is
/// thrown inside EditAborted.
EditRoundReport edit_round(ModelState& model, const std::vector<FactRecord>& facts,
                           const std::map<std::string, ValueTarget>& targets, CovarianceStore& store,
                           const EditConfig& config, int round = 0, const DeltaObserver& observer = {});

/// Squared residual ||z - h^{l0}||^2 of a fact on the current model.
double residual_sq(const ModelState& model, const FactRecord& fact, const ValueTarget& target, int l0);

struct SequentialOptions {
  const WeightSnapshot* snapshot = nullptr;  // required when rewinding
  OptConfig opt;
  /// Precomputed rewound targets; missing facts are computed on demand.
  const std::map<std::string, ValueTarget>* targets = nullptr;
  std::function<void(int round, const EditRoundReport&, const std::map<std::string, ValueTarget>&)> after_round;
  DeltaObserver observer;
};

/// Applies edit_round to each batch in order. Targets come from the snapshot
/// when `config.rewind` is set, otherwise from the live model at the start of
/// each round. An aborted round ends the sequence; its report is the last
/// element and has `aborted` set.
std::vector<EditRoundReport> run_sequential(ModelState& model, const std::vector<std::vector<FactRecord>>& rounds,
                                            CovarianceStore& store, const EditConfig& config,
                                            const SequentialOptions& options, int first_round = 0);

}  // namespace nse

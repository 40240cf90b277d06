#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "nse/corpus.hpp"
#include "nse/model.hpp"

namespace nse {

struct OptConfig {
  int steps = 25;
  double lr = 0.1;
  double nll_target = 0.05;
  bool clamp_norm = true;
  double clamp_factor = 4.0;  // ||delta|| <= clamp_factor * ||h||
  int max_halvings = 10;
};

void to_json(nlohmann::json& j, const OptConfig& c);
void from_json(const nlohmann::json& j, OptConfig& c);
std::uint64_t opt_config_hash(const OptConfig& c, int layer);

/// Copies of the original W_out of each edit layer, taken before any edit.
struct WeightSnapshot {
  std::map<int, Matrix> w_out;
  std::uint64_t pristine_hash = 0;  // model_hash of the model the snapshot was taken from
};

/// Throws StateError if the model has been edited.
WeightSnapshot snapshot_weights(const ModelState& model, std::span<const int> layers);
/// Writes the snapshot back into the model; the model counts as unedited again.
void restore_snapshot(ModelState& model, const WeightSnapshot& snapshot);

/// Thrown when the live weights differ after a rewound computation.
class InvariantViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct ValueTarget {
  std::string fact_id;
  int layer = 0;
  Vector z;
  Vector h_original;
  bool converged = false;
  double final_nll = 0.0;
  int steps = 0;
  std::vector<double> nll_trace;  // accepted objective values, non-increasing
};

/// Optimizes delta injected at (l0, last subject token) to minimize
/// -log P[object | subject, relation] summed over object tokens.
///
/// With a snapshot, the original W_out matrices are swapped into the edit
/// layers for the duration of the call and the live weights are restored
/// bitwise afterwards. Without one, the live model is used as is.
ValueTarget compute_z(ModelState& model, const WeightSnapshot* snapshot, const FactRecord& fact, int l0,
                      const OptConfig& opt);

/// On-disk target cache: <dir>/index.jsonl (one JSON object per entry) plus
/// <dir>/<key>.bin blobs holding [z h_original] as a d_model x 2 Matrix.
class TargetCache {
 public:
  explicit TargetCache(std::string dir);

  std::optional<ValueTarget> get(const std::string& key) const;
  void put(const std::string& key, const ValueTarget& target);
  std::size_t size() const { return index_.size(); }

 private:
  std::string dir_;
  std::map<std::string, nlohmann::json> index_;
};

struct PrecomputeStats {
  int hits = 0;
  int computed = 0;
  int corrupt = 0;
};

/// Cache key: fact id, hash of the rewound (pristine) model, opt config and layer.
std::string target_cache_key(const std::string& fact_id, std::uint64_t pristine_hash, const OptConfig& opt, int l0);

std::map<std::string, ValueTarget> precompute_targets(ModelState& model, const WeightSnapshot& snapshot,
                                                      const std::vector<FactRecord>& facts, int l0,
                                                      const OptConfig& opt, TargetCache* cache = nullptr,
                                                      PrecomputeStats* stats = nullptr);

}  // namespace nse

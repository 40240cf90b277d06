#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "nse/corpus.hpp"
#include "nse/editor.hpp"
#include "nse/eval.hpp"
#include "nse/model.hpp"
#include "nse/pretrain.hpp"
#include "nse/value_opt.hpp"

namespace nse {

inline constexpr int kRunConfigSchema = 1;

struct ProtocolConfig {
  int batch_size = 10;
  int n_rounds = 10;
  double lambda = 100.0;
  std::size_t cov_sample_cap = 0;  // 0 = every token position
};

void to_json(nlohmann::json& j, const ProtocolConfig& c);
void from_json(const nlohmann::json& j, ProtocolConfig& c);

/// Everything a run needs. `seed` drives corpus generation and training;
/// the nested seeds are overwritten by it when the config is resolved.
struct RunConfig {
  int schema_version = kRunConfigSchema;
  std::string preset = "desk-default";
  std::uint64_t seed = 7;
  ModelConfig model;
  CorpusConfig corpus;
  TrainConfig train;
  EditConfig edit;
  OptConfig opt;
  EvalConfig eval;
  ProtocolConfig protocol;
  std::string out_dir = "runs/desk";

  /// Copies `seed` into the nested configs and checks every invariant.
  void resolve();
  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
/// Missing fields take the values of the named preset (or desk-default).
void from_json(const nlohmann::json& j, RunConfig& c);

std::vector<std::string> preset_names();
/// Throws InputError for an unknown name.
RunConfig preset(const std::string& name);

RunConfig load_run_config(const std::string& path);
void save_run_config(const std::string& path, const RunConfig& c);

}  // namespace nse

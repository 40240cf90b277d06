#pragma once

#include <utility>
#include <vector>

#include <json.hpp>

#include "nse/corpus.hpp"
#include "nse/model.hpp"

namespace nse {

struct TrainConfig {
  int max_steps = 6000;
  double lr = 1e-3;
  int batch_size = 32;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double grad_clip = 1.0;
  int eval_every = 100;
  double target_recall = 0.99;
  std::uint64_t seed = 1;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct TrainingReport {
  int steps = 0;
  double final_loss = 0.0;
  double recall = 0.0;             // canonical prompts of train facts
  double paraphrase_recall = 0.0;  // paraphrase prompts of train facts
  bool gate_passed = false;
  std::vector<std::pair<int, double>> loss_curve;  // (step, mean token loss)
};

void to_json(nlohmann::json& j, const TrainingReport& r);

struct TrainResult {
  ModelState model;
  TrainingReport report;
};

/// Next-token training with Adam until recall of the train facts reaches the
/// target or `max_steps` run out. Throws NumericError if the loss diverges.
TrainResult train(const ModelConfig& config, const Corpus& corpus, const TrainConfig& tc);

/// Exact-match rate of greedy decoding on each fact's canonical prompt.
double recall(const ModelState& model, const std::vector<FactRecord>& facts);
double paraphrase_recall(const ModelState& model, const std::vector<FactRecord>& facts);

inline constexpr double kMemorizationGate = 0.99;

/// Throws StateError unless the model recalls >= 99% of the train facts.
void require_memorization(const ModelState& model, const Corpus& corpus);

}  // namespace nse

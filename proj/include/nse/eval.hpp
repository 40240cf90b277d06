#pragma once

#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "nse/corpus.hpp"
#include "nse/model.hpp"

namespace nse {

enum class EvalMode { kCounterfact, kZsre };

std::string to_string(EvalMode mode);
EvalMode parse_eval_mode(const std::string& s);

struct EvalConfig {
  EvalMode mode = EvalMode::kCounterfact;
  int gen_len = 12;
  bool generation_metrics = true;  // fluency and consistency
};

void to_json(nlohmann::json& j, const EvalConfig& c);
void from_json(const nlohmann::json& j, EvalConfig& c);

struct MetricReport {
  double efficacy = 0.0;
  double generalization = 0.0;
  double specificity = 0.0;
  double fluency = 0.0;
  double consistency = 0.0;
  double score = 0.0;
  int n_efficacy = 0;
  int n_generalization = 0;
  int n_specificity = 0;
  int n_fluency = 0;
  int n_consistency = 0;
  std::vector<std::string> warnings;
};

void to_json(nlohmann::json& j, const MetricReport& r);
void from_json(const nlohmann::json& j, MetricReport& r);

/// 3 / (1/e + 1/g + 1/s), or 0 when any of them is not positive.
double harmonic_score(double efficacy, double generalization, double specificity);

/// Mean per-token log-probability of `continuation` after `prompt`.
double mean_logprob(const ModelState& model, std::span<const int> prompt, std::span<const int> continuation);

double efficacy_cf(const ModelState& model, const std::vector<FactRecord>& facts);
/// Facts without paraphrases are left out; `excluded` counts them.
double generalization_cf(const ModelState& model, const std::vector<FactRecord>& facts, int* excluded = nullptr,
                         int* n_prompts = nullptr);
double specificity_cf(const ModelState& model, const std::vector<FactRecord>& facts, int* excluded = nullptr,
                      int* n_prompts = nullptr);

/// Per-token top-1 accuracy under teacher forcing, averaged over prompts.
double zsre_accuracy(const ModelState& model, const std::vector<std::vector<int>>& prompts,
                     const std::vector<std::vector<int>>& targets);

/// Entropy in bits of the n-gram frequency distribution of `tokens`.
double ngram_entropy_bits(std::span<const int> tokens, std::size_t n);
/// (2/3) h2 + (4/3) h3
double weighted_ngram_entropy(double h2, double h3);
/// weighted_ngram_entropy of the sequence's own bigram and trigram entropies.
double ngram_entropy(std::span<const int> tokens);
/// Greedy generations of `gen_len` tokens per prompt, scored by ngram_entropy.
double fluency(const ModelState& model, const std::vector<std::vector<int>>& prompts, int gen_len);

/// TF-IDF weighting with smoothed idf, ln((1 + N) / (1 + df)) + 1, over a
/// fixed document pool.
class TfIdf {
 public:
  explicit TfIdf(const std::vector<std::vector<int>>& documents);
  std::unordered_map<int, double> vectorize(std::span<const int> tokens) const;
  double cosine(std::span<const int> a, std::span<const int> b) const;

 private:
  std::unordered_map<int, double> idf_;
  double unseen_idf_ = 1.0;
};

/// Mean TF-IDF cosine between each fact's generation (prompted with its
/// subject and relation) and the reference text of its object. Facts whose
/// object has no reference are skipped and counted in `excluded`.
double consistency(const ModelState& model, const std::vector<FactRecord>& facts,
                   const std::unordered_map<int, std::vector<int>>& references, int gen_len, int* excluded = nullptr);

/// All metrics for one evaluation set. `references` may be empty when
/// generation metrics are disabled.
MetricReport evaluate(const ModelState& model, const std::vector<FactRecord>& facts,
                      const std::unordered_map<int, std::vector<int>>& references, const EvalConfig& config);

std::string metric_csv_header();
std::string metric_csv_row(int round, const MetricReport& r);

}  // namespace nse

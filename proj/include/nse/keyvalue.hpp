#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "nse/corpus.hpp"
#include "nse/model.hpp"

namespace nse {

/// Per-layer second moment E[k k^T] of FFN keys over a generic corpus. The
/// preservation matrix used by the solver is lambda * M; lambda is kept
/// separate so one estimate serves several lambda values.
struct CovarianceStore {
  std::map<int, Matrix> moments;
  std::size_t sample_count = 0;
  double lambda = 100.0;

  bool has_layer(int layer) const { return moments.count(layer) != 0; }
  const Matrix& moment(int layer) const;
  /// lambda * M restricted to `neurons` (rows and columns).
  Matrix preservation(int layer, std::span<const int> neurons) const;
  /// lambda * M
  Matrix preservation(int layer) const;
  std::vector<int> layers() const;
};

/// Keys of a batch of facts at one layer, one column per fact.
struct KeySet {
  int layer = 0;
  Matrix keys;  // d_ffn x m
  std::vector<std::string> fact_ids;
};

/// Key at the last subject token of `prompt`, from a clean trace of `model`.
Vector extract_key(const ModelState& model, const Prompt& prompt, int layer);
Vector extract_key(const ModelState& model, const FactRecord& fact, int layer);

/// M^l = (1/n) sum k k^T over every token position of the prompts, for each
/// requested layer. Prompts are consumed in order until `sample_cap` token
/// positions are collected (0 = no cap), then summed in lexicographic order
/// of their tokens, so the result does not depend on prompt order.
CovarianceStore estimate_covariance(const ModelState& model, const std::vector<std::vector<int>>& prompts,
                                    std::span<const int> layers, std::size_t sample_cap, double lambda);

/// M^l <- M^l + (1/lambda) K1 K1^T, so that lambda * M^l accumulates the
/// newly written keys alongside the preserved ones.
void absorb_new_knowledge(CovarianceStore& store, const KeySet& keyset);

// Cache layout: <dir>/cov_layer_<l>.bin (Matrix records) and
// <dir>/manifest.json {"layers":[...],"sample_count":n,"lambda":x,
// "corpus_hash":"...","model_hash":"..."}.
void save_covariance(const std::string& dir, const CovarianceStore& store, const std::string& corpus_hash,
                     const std::string& model_hash);
CovarianceStore load_covariance(const std::string& dir);

}  // namespace nse

#pragma once

#include <cstdint>
#include <string>

#include "nse/pipeline.hpp"

namespace nse::test {

CorpusConfig small_corpus(std::uint64_t seed = 11);
ModelConfig small_model(int vocab_size);
TrainConfig small_train(std::uint64_t seed = 11);

/// A run config that pretrains and edits in a few seconds.
RunConfig small_run(const std::string& out_dir);

struct Trained {
  Corpus corpus;
  ModelState model;
};

/// Small model trained to full recall on small_corpus(). Trained once and
/// kept under the test cache directory so every test binary shares it.
const Trained& trained_small();

ModelState random_model(int n_layers, int d_model, int d_ffn, int vocab, std::uint64_t seed, int context_len = 16);

/// Fresh empty directory under the test cache.
std::string scratch_dir(const std::string& name);

Matrix random_matrix(int rows, int cols, Rng& rng);
/// A A^T / n + ridge I
Matrix random_spd(int n, Rng& rng, double ridge = 0.1);

}  // namespace nse::test

#include "support.hpp"

#include <unistd.h>

#include <filesystem>

namespace nse::test {
namespace fs = std::filesystem;

CorpusConfig small_corpus(std::uint64_t seed) {
  CorpusConfig c;
  c.n_entities = 60;
  c.n_train = 60;
  c.n_edit = 20;
  c.n_covariance_prompts = 120;
  c.seed = seed;
  return c;
}

ModelConfig small_model(int vocab_size) {
  ModelConfig m;
  m.n_layers = 4;
  m.d_model = 32;
  m.d_ffn = 128;
  m.vocab_size = vocab_size;
  return m;
}

TrainConfig small_train(std::uint64_t seed) {
  TrainConfig t;
  t.lr = 3e-3;
  t.max_steps = 3000;
  t.seed = seed;
  return t;
}

RunConfig small_run(const std::string& out_dir) {
  RunConfig c = preset("desk-default");
  c.seed = 11;
  c.corpus = small_corpus(11);
  c.model = small_model(0);
  c.train = small_train(11);
  c.edit.layers = {1, 2};
  c.protocol.batch_size = 5;
  c.protocol.n_rounds = 3;
  c.out_dir = out_dir;
  c.resolve();
  return c;
}

const Trained& trained_small() {
  static const Trained cached = [] {
    Trained t;
    t.corpus = generate_corpus(small_corpus());
    ModelConfig mc = small_model(t.corpus.vocab.size());
    nlohmann::json key{{"model", mc}, {"corpus", t.corpus.config}, {"train", small_train()}};
    std::string tag = key.dump();
    std::string dir = NSE_TEST_CACHE;
    std::string path = dir + "/small_" + hex64(hash_bytes(tag.data(), tag.size())) + ".ckpt";
    if (fs::exists(path) && fs::exists(path + ".json")) {
      t.model = load_checkpoint(path);
      return t;
    }
    fs::create_directories(dir);
    t.model = train(mc, t.corpus, small_train()).model;
    // written under a temporary name so concurrent test binaries never read a partial file
    std::string tmp = path + ".tmp" + std::to_string(::getpid());
    save_checkpoint(tmp, t.model);
    fs::rename(tmp + ".json", path + ".json");
    fs::rename(tmp, path);
    return t;
  }();
  return cached;
}

ModelState random_model(int n_layers, int d_model, int d_ffn, int vocab, std::uint64_t seed, int context_len) {
  ModelConfig c;
  c.n_layers = n_layers;
  c.d_model = d_model;
  c.d_ffn = d_ffn;
  c.n_heads = d_model % 4 == 0 ? 4 : 1;
  c.context_len = context_len;
  c.vocab_size = vocab;
  Rng rng(seed);
  return ModelState::random(c, rng);
}

std::string scratch_dir(const std::string& name) {
  std::string dir = std::string(NSE_TEST_CACHE) + "/scratch/" + name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Matrix random_matrix(int rows, int cols, Rng& rng) { return random_normal(rows, cols, 1.0, rng); }

Matrix random_spd(int n, Rng& rng, double ridge) {
  Matrix a = random_matrix(n, n, rng);
  Matrix c = a * a.transpose() / n;
  c.diagonal().array() += ridge;
  return 0.5 * (c + c.transpose());
}

}  // namespace nse::test

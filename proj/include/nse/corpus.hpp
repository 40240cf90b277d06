#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "nse/numerics.hpp"

namespace nse {

/// Closed whitespace-tokenized vocabulary. Token ids are positions in the
/// token list.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> tokens);

  /// "." first, then prefixes P*, relation tokens R*, relation aliases Q*,
  /// and entities E*.
  static Vocabulary synthetic(int n_entities, int n_relations, int n_prefixes);

  int id(const std::string& token) const;
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<int> encode(const std::string& text) const;
  std::string decode(const std::vector<int>& ids) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

struct Prompt {
  std::vector<int> tokens;
  int subject_end = 0;  // index of the last subject token
};

struct Probe {
  Prompt prompt;
  std::vector<int> object;  // the correct answer
};

struct FactRecord {
  std::string id;
  std::vector<int> subject;
  std::vector<int> relation;
  std::vector<int> object;      // the answer the model should give (new object for edits)
  std::vector<int> old_object;  // the pre-edit answer o^c
  int subject_end = 0;          // last subject token within relation + subject
  std::vector<Prompt> paraphrases;
  std::vector<Probe> neighbors;

  /// relation followed by subject
  Prompt prompt() const;
};

struct CorpusConfig {
  int n_entities = 200;
  int n_relations = 4;
  int n_prefixes = 8;
  int n_train = 200;
  int n_edit = 100;
  int n_paraphrases = 2;
  int n_neighbors = 3;
  int n_covariance_prompts = 300;
  int context_len = 16;
  std::uint64_t seed = 7;
};

void to_json(nlohmann::json& j, const CorpusConfig& c);
void from_json(const nlohmann::json& j, CorpusConfig& c);

struct Corpus {
  CorpusConfig config;
  Vocabulary vocab;
  std::vector<FactRecord> train;
  std::vector<FactRecord> edits;  // counterfactual rewrites of train facts
  std::vector<std::vector<int>> covariance_prompts;
};

Corpus generate_corpus(const CorpusConfig& config);

/// Renders one training sentence for a fact. `form` 0 is the canonical
/// "R S O ."; other forms prepend a prefix token and may use the relation alias.
std::vector<int> render_sentence(const Vocabulary& vocab, const FactRecord& fact, int prefix, bool alias);

/// Packs randomly rendered sentences into a sequence no longer than
/// `context_len`, starting with `first`.
std::vector<int> sample_text(const Corpus& corpus, const FactRecord& first, Rng& rng, bool canonical_first);

/// Per object token id: concatenated tokens of every training sentence whose
/// object is that token, used as the reference text for consistency.
std::unordered_map<int, std::vector<int>> reference_texts(const Corpus& corpus);

// JSON-lines corpus file: a header line then one record per line.
//   {"format":"nse-corpus","version":1,"config":{...},"vocabulary":[...]}
//   {"split":"train"|"edit", <FactRecord fields, tokens as strings>}
//   {"split":"covariance","tokens":[...]}
void save_corpus(const std::string& path, const Corpus& corpus);
Corpus load_corpus(const std::string& path);
std::string corpus_to_jsonl(const Corpus& corpus);
std::uint64_t corpus_hash(const Corpus& corpus);

}  // namespace nse

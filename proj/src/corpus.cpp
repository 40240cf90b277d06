#include "nse/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace nse {
namespace {

using nlohmann::json;

json strings(const Vocabulary& v, const std::vector<int>& ids) {
  json a = json::array();
  for (int id : ids) a.push_back(v.token(id));
  return a;
}

std::vector<int> ids(const Vocabulary& v, const json& a) {
  std::vector<int> out;
  for (const auto& t : a) out.push_back(v.id(t.get<std::string>()));
  return out;
}

json fact_to_json(const Vocabulary& v, const FactRecord& f, const char* split) {
  json paraphrases = json::array();
  for (const auto& p : f.paraphrases) paraphrases.push_back({{"tokens", strings(v, p.tokens)}, {"subject_end", p.subject_end}});
  json neighbors = json::array();
  for (const auto& n : f.neighbors)
    neighbors.push_back({{"tokens", strings(v, n.prompt.tokens)},
                         {"subject_end", n.prompt.subject_end},
                         {"object", strings(v, n.object)}});
  return json{{"split", split},
              {"id", f.id},
              {"subject", strings(v, f.subject)},
              {"relation", strings(v, f.relation)},
              {"object", strings(v, f.object)},
              {"old_object", strings(v, f.old_object)},
              {"subject_end", f.subject_end},
              {"paraphrases", paraphrases},
              {"neighbors", neighbors}};
}

FactRecord fact_from_json(const Vocabulary& v, const json& j) {
  FactRecord f;
  f.id = j.at("id").get<std::string>();
  f.subject = ids(v, j.at("subject"));
  f.relation = ids(v, j.at("relation"));
  f.object = ids(v, j.at("object"));
  f.old_object = ids(v, j.at("old_object"));
  f.subject_end = j.at("subject_end").get<int>();
  for (const auto& p : j.at("paraphrases")) f.paraphrases.push_back({ids(v, p.at("tokens")), p.at("subject_end").get<int>()});
  for (const auto& n : j.at("neighbors"))
    f.neighbors.push_back({{ids(v, n.at("tokens")), n.at("subject_end").get<int>()}, ids(v, n.at("object"))});
  if (f.object.empty()) throw InputError("corpus record " + f.id + " has empty object");
  if (f.subject_end < 0 || f.subject_end >= static_cast<int>(f.subject.size() + f.relation.size()))
    throw InputError("corpus record " + f.id + " has subject_end outside the prompt");
  return f;
}

}  // namespace

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) throw InputError("duplicate token " + tokens_[i]);
  }
}

Vocabulary Vocabulary::synthetic(int n_entities, int n_relations, int n_prefixes) {
  std::vector<std::string> t{"."};
  for (int i = 0; i < n_prefixes; ++i) t.push_back("P" + std::to_string(i));
  for (int i = 0; i < n_relations; ++i) t.push_back("R" + std::to_string(i));
  for (int i = 0; i < n_relations; ++i) t.push_back("Q" + std::to_string(i));
  for (int i = 0; i < n_entities; ++i) t.push_back("E" + std::to_string(i));
  return Vocabulary(std::move(t));
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end()) throw InputError("unknown token '" + token + "'");
  return it->second;
}

std::vector<int> Vocabulary::encode(const std::string& text) const {
  std::istringstream in(text);
  std::vector<int> out;
  for (std::string w; in >> w;) out.push_back(id(w));
  return out;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

Prompt FactRecord::prompt() const {
  Prompt p;
  p.tokens = relation;
  p.tokens.insert(p.tokens.end(), subject.begin(), subject.end());
  p.subject_end = subject_end;
  return p;
}

void to_json(nlohmann::json& j, const CorpusConfig& c) {
  j = json{{"n_entities", c.n_entities},
           {"n_relations", c.n_relations},
           {"n_prefixes", c.n_prefixes},
           {"n_train", c.n_train},
           {"n_edit", c.n_edit},
           {"n_paraphrases", c.n_paraphrases},
           {"n_neighbors", c.n_neighbors},
           {"n_covariance_prompts", c.n_covariance_prompts},
           {"context_len", c.context_len},
           {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, CorpusConfig& c) {
  CorpusConfig d;
  c.n_entities = j.value("n_entities", d.n_entities);
  c.n_relations = j.value("n_relations", d.n_relations);
  c.n_prefixes = j.value("n_prefixes", d.n_prefixes);
  c.n_train = j.value("n_train", d.n_train);
  c.n_edit = j.value("n_edit", d.n_edit);
  c.n_paraphrases = j.value("n_paraphrases", d.n_paraphrases);
  c.n_neighbors = j.value("n_neighbors", d.n_neighbors);
  c.n_covariance_prompts = j.value("n_covariance_prompts", d.n_covariance_prompts);
  c.context_len = j.value("context_len", d.context_len);
  c.seed = j.value("seed", d.seed);
}

std::vector<int> render_sentence(const Vocabulary& vocab, const FactRecord& fact, int prefix, bool alias) {
  std::vector<int> out;
  if (prefix >= 0) out.push_back(vocab.id("P" + std::to_string(prefix)));
  if (alias) {
    // Relation aliases share the relation's index: Rk <-> Qk.
    for (int r : fact.relation) {
      std::string name = vocab.token(r);
      if (name[0] == 'R') name[0] = 'Q';
      out.push_back(vocab.id(name));
    }
  } else {
    out.insert(out.end(), fact.relation.begin(), fact.relation.end());
  }
  out.insert(out.end(), fact.subject.begin(), fact.subject.end());
  out.insert(out.end(), fact.object.begin(), fact.object.end());
  out.push_back(vocab.id("."));
  return out;
}

std::vector<int> sample_text(const Corpus& corpus, const FactRecord& first, Rng& rng, bool canonical_first) {
  const auto& cfg = corpus.config;
  auto random_sentence = [&](const FactRecord& f) {
    bool plain = rng.uniform() < 0.5;
    int prefix = plain ? -1 : static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.n_prefixes)));
    bool alias = !plain && rng.uniform() < 0.5;
    return render_sentence(corpus.vocab, f, prefix, alias);
  };
  std::vector<int> seq = canonical_first ? render_sentence(corpus.vocab, first, -1, false) : random_sentence(first);
  while (true) {
    const auto& f = corpus.train[rng.below(corpus.train.size())];
    auto s = random_sentence(f);
    if (seq.size() + s.size() > static_cast<std::size_t>(cfg.context_len)) {
      std::size_t room = static_cast<std::size_t>(cfg.context_len) - seq.size();
      seq.insert(seq.end(), s.begin(), s.begin() + static_cast<std::ptrdiff_t>(room));
      break;
    }
    seq.insert(seq.end(), s.begin(), s.end());
  }
  return seq;
}

Corpus generate_corpus(const CorpusConfig& config) {
  const auto& c = config;
  if (c.n_entities < 3 || c.n_relations < 1 || c.n_prefixes < 2) throw InputError("generate_corpus: vocabulary too small");
  if (c.n_train < 1 || c.n_edit < 0 || c.n_edit > c.n_train) throw InputError("generate_corpus: need 0 <= n_edit <= n_train");
  if (c.n_train > c.n_entities * c.n_relations) throw InputError("generate_corpus: more facts than (subject, relation) pairs");
  if (c.n_paraphrases < 2 || c.n_paraphrases > c.n_prefixes) throw InputError("generate_corpus: need 2 <= n_paraphrases <= n_prefixes");
  if (c.n_neighbors < 2) throw InputError("generate_corpus: need at least 2 neighbors per edit");
  if (c.context_len < 6) throw InputError("generate_corpus: context too short for a sentence");

  Corpus corpus;
  corpus.config = config;
  corpus.vocab = Vocabulary::synthetic(c.n_entities, c.n_relations, c.n_prefixes);
  const auto& v = corpus.vocab;
  Rng rng(c.seed);
  auto entity = [&](int e) { return v.id("E" + std::to_string(e)); };
  auto relation = [&](int r) { return v.id("R" + std::to_string(r)); };
  auto alias = [&](int r) { return v.id("Q" + std::to_string(r)); };

  auto paraphrases_for = [&](int subj, int rel) {
    std::vector<int> prefixes(static_cast<std::size_t>(c.n_prefixes));
    std::iota(prefixes.begin(), prefixes.end(), 0);
    rng.shuffle(std::span<int>(prefixes));
    std::vector<Prompt> out;
    for (int i = 0; i < c.n_paraphrases; ++i)
      out.push_back({{v.id("P" + std::to_string(prefixes[static_cast<std::size_t>(i)])), alias(rel), entity(subj)}, 2});
    return out;
  };

  std::vector<int> cells(static_cast<std::size_t>(c.n_entities * c.n_relations));
  std::iota(cells.begin(), cells.end(), 0);
  rng.shuffle(std::span<int>(cells));
  cells.resize(static_cast<std::size_t>(c.n_train));
  std::sort(cells.begin(), cells.end());

  std::vector<int> fact_subject, fact_relation;
  for (int i = 0; i < c.n_train; ++i) {
    int subj = cells[static_cast<std::size_t>(i)] / c.n_relations;
    int rel = cells[static_cast<std::size_t>(i)] % c.n_relations;
    int obj;
    do {
      obj = static_cast<int>(rng.below(static_cast<std::uint64_t>(c.n_entities)));
    } while (obj == subj);
    FactRecord f;
    f.id = "train-" + std::to_string(i);
    f.subject = {entity(subj)};
    f.relation = {relation(rel)};
    f.object = {entity(obj)};
    f.old_object = f.object;
    f.subject_end = 1;
    f.paraphrases = paraphrases_for(subj, rel);
    corpus.train.push_back(std::move(f));
    fact_subject.push_back(subj);
    fact_relation.push_back(rel);
  }

  std::vector<int> order(static_cast<std::size_t>(c.n_train));
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(std::span<int>(order));
  std::vector<int> edited(order.begin(), order.begin() + c.n_edit);
  std::set<int> edited_set(edited.begin(), edited.end());
  std::set<int> edited_subjects;
  for (int i : edited) edited_subjects.insert(fact_subject[static_cast<std::size_t>(i)]);

  // New objects are drawn from entities that already serve as objects so that
  // every edit target has reference text.
  std::vector<int> object_pool;
  {
    std::set<int> pool;
    for (const auto& f : corpus.train) pool.insert(f.object[0]);
    object_pool.assign(pool.begin(), pool.end());
  }

  for (int k = 0; k < c.n_edit; ++k) {
    int i = edited[static_cast<std::size_t>(k)];
    const FactRecord& base = corpus.train[static_cast<std::size_t>(i)];
    FactRecord e = base;
    e.id = "edit-" + std::to_string(k);
    e.old_object = base.object;
    int obj;
    do {
      obj = object_pool[rng.below(object_pool.size())];
    } while (obj == base.object[0] || obj == base.subject[0]);
    e.object = {obj};

    std::vector<int> clean, fallback;
    for (int j = 0; j < c.n_train; ++j) {
      if (j == i || edited_set.count(j) || fact_relation[static_cast<std::size_t>(j)] != fact_relation[static_cast<std::size_t>(i)])
        continue;
      if (fact_subject[static_cast<std::size_t>(j)] == fact_subject[static_cast<std::size_t>(i)]) continue;
      if (corpus.train[static_cast<std::size_t>(j)].object[0] == obj) continue;
      (edited_subjects.count(fact_subject[static_cast<std::size_t>(j)]) ? fallback : clean).push_back(j);
    }
    rng.shuffle(std::span<int>(clean));
    rng.shuffle(std::span<int>(fallback));
    clean.insert(clean.end(), fallback.begin(), fallback.end());
    if (static_cast<int>(clean.size()) < c.n_neighbors)
      throw InputError("generate_corpus: not enough unedited neighbors for " + e.id);
    e.neighbors.clear();
    for (int n = 0; n < c.n_neighbors; ++n) {
      const auto& nf = corpus.train[static_cast<std::size_t>(clean[static_cast<std::size_t>(n)])];
      e.neighbors.push_back({nf.prompt(), nf.object});
    }
    corpus.edits.push_back(std::move(e));
  }

  Rng cov_rng = rng.fork(1);
  for (int i = 0; i < c.n_covariance_prompts; ++i) {
    const auto& f = corpus.train[cov_rng.below(corpus.train.size())];
    corpus.covariance_prompts.push_back(sample_text(corpus, f, cov_rng, false));
  }
  return corpus;
}

std::unordered_map<int, std::vector<int>> reference_texts(const Corpus& corpus) {
  std::unordered_map<int, std::vector<int>> out;
  for (const auto& f : corpus.train) {
    auto s = render_sentence(corpus.vocab, f, -1, false);
    auto& dst = out[f.object[0]];
    dst.insert(dst.end(), s.begin(), s.end());
  }
  return out;
}

std::string corpus_to_jsonl(const Corpus& corpus) {
  std::ostringstream out;
  out << json{{"format", "nse-corpus"}, {"version", 1}, {"config", corpus.config}, {"vocabulary", corpus.vocab.tokens()}}.dump()
      << "\n";
  for (const auto& f : corpus.train) out << fact_to_json(corpus.vocab, f, "train").dump() << "\n";
  for (const auto& f : corpus.edits) out << fact_to_json(corpus.vocab, f, "edit").dump() << "\n";
  for (const auto& p : corpus.covariance_prompts)
    out << json{{"split", "covariance"}, {"tokens", strings(corpus.vocab, p)}}.dump() << "\n";
  return out.str();
}

void save_corpus(const std::string& path, const Corpus& corpus) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << corpus_to_jsonl(corpus);
}

Corpus load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open corpus " + path);
  Corpus corpus;
  std::string line;
  if (!std::getline(in, line)) throw InputError("empty corpus file " + path);
  json header = json::parse(line);
  if (header.value("format", "") != "nse-corpus" || header.value("version", 0) != 1)
    throw InputError("unsupported corpus header in " + path);
  corpus.config = header.at("config").get<CorpusConfig>();
  corpus.vocab = Vocabulary(header.at("vocabulary").get<std::vector<std::string>>());
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    std::string split = j.at("split").get<std::string>();
    if (split == "train") {
      corpus.train.push_back(fact_from_json(corpus.vocab, j));
    } else if (split == "edit") {
      corpus.edits.push_back(fact_from_json(corpus.vocab, j));
    } else if (split == "covariance") {
      corpus.covariance_prompts.push_back(ids(corpus.vocab, j.at("tokens")));
    } else {
      throw InputError("unknown corpus split '" + split + "'");
    }
  }
  return corpus;
}

std::uint64_t corpus_hash(const Corpus& corpus) {
  std::string s = corpus_to_jsonl(corpus);
  return hash_bytes(s.data(), s.size());
}

}  // namespace nse

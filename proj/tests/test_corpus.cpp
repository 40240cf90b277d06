#include <doctest.h>

#include <map>
#include <set>

#include "support.hpp"

using namespace nse;

TEST_CASE("same seed gives byte-identical corpora") {
  CorpusConfig c;
  c.seed = 7;
  CHECK(corpus_to_jsonl(generate_corpus(c)) == corpus_to_jsonl(generate_corpus(c)));
  CorpusConfig d = c;
  d.seed = 8;
  CHECK(corpus_to_jsonl(generate_corpus(d)) != corpus_to_jsonl(generate_corpus(c)));
}

TEST_CASE("desk corpus counts") {
  CorpusConfig c;
  c.n_train = 200;
  c.n_edit = 100;
  Corpus corpus = generate_corpus(c);
  CHECK(corpus.train.size() == 200);
  REQUIRE(corpus.edits.size() == 100);
  for (const auto& e : corpus.edits) {
    CHECK(e.paraphrases.size() >= 2);
    CHECK(e.neighbors.size() >= 2);
  }
  CHECK(corpus.covariance_prompts.size() == static_cast<std::size_t>(c.n_covariance_prompts));
}

TEST_CASE("edit facts rewrite trained facts") {
  for (std::uint64_t seed : {1, 7, 42}) {
    CorpusConfig c;
    c.seed = seed;
    Corpus corpus = generate_corpus(c);
    std::map<std::pair<std::vector<int>, std::vector<int>>, std::vector<int>> trained;
    for (const auto& f : corpus.train) trained[{f.subject, f.relation}] = f.object;
    CHECK(trained.size() == corpus.train.size());
    std::set<std::string> ids;
    for (const auto& e : corpus.edits) {
      CHECK(ids.insert(e.id).second);
      auto it = trained.find({e.subject, e.relation});
      REQUIRE(it != trained.end());
      CHECK(e.old_object == it->second);
      CHECK(e.object != e.old_object);
      CHECK(!e.object.empty());
      for (const auto& n : e.neighbors) {
        CHECK(!n.object.empty());
        CHECK(n.prompt.tokens != e.prompt().tokens);
        CHECK(n.object != e.object);
      }
    }
  }
}

TEST_CASE("subject spans point at the last subject token") {
  Corpus corpus = generate_corpus(CorpusConfig{});
  auto check = [](const Prompt& p, const std::vector<int>& subject) {
    REQUIRE(p.subject_end >= 0);
    REQUIRE(p.subject_end < static_cast<int>(p.tokens.size()));
    CHECK(p.tokens[static_cast<std::size_t>(p.subject_end)] == subject.back());
  };
  for (const auto* split : {&corpus.train, &corpus.edits})
    for (const auto& f : *split) {
      Prompt p = f.prompt();
      check(p, f.subject);
      // the prediction follows the subject directly
      CHECK(p.subject_end == static_cast<int>(p.tokens.size()) - 1);
      for (const auto& para : f.paraphrases) check(para, f.subject);
    }
}

TEST_CASE("canonical sentence layout") {
  Corpus corpus = generate_corpus(CorpusConfig{});
  const FactRecord& f = corpus.train.front();
  auto s = render_sentence(corpus.vocab, f, -1, false);
  std::vector<int> want = f.relation;
  want.insert(want.end(), f.subject.begin(), f.subject.end());
  want.insert(want.end(), f.object.begin(), f.object.end());
  want.push_back(corpus.vocab.id("."));
  CHECK(s == want);
  auto prefixed = render_sentence(corpus.vocab, f, 3, true);
  CHECK(corpus.vocab.token(prefixed[0]) == "P3");
  CHECK(corpus.vocab.token(prefixed[1])[0] == 'Q');
}

TEST_CASE("covariance prompts stay inside the vocabulary and context") {
  Corpus corpus = generate_corpus(CorpusConfig{});
  for (const auto& p : corpus.covariance_prompts) {
    CHECK(!p.empty());
    CHECK(static_cast<int>(p.size()) <= corpus.config.context_len);
    for (int t : p) CHECK((t >= 0 && t < corpus.vocab.size()));
  }
}

TEST_CASE("reference texts cover every edit target") {
  Corpus corpus = generate_corpus(CorpusConfig{});
  auto refs = reference_texts(corpus);
  for (const auto& e : corpus.edits) {
    auto it = refs.find(e.object.front());
    REQUIRE(it != refs.end());
    CHECK(std::find(it->second.begin(), it->second.end(), e.object.front()) != it->second.end());
  }
}

TEST_CASE("JSON-lines round trip") {
  std::string dir = test::scratch_dir("corpus_io");
  Corpus corpus = generate_corpus(test::small_corpus());
  save_corpus(dir + "/c.jsonl", corpus);
  Corpus back = load_corpus(dir + "/c.jsonl");
  CHECK(corpus_to_jsonl(back) == corpus_to_jsonl(corpus));
  CHECK(corpus_hash(back) == corpus_hash(corpus));
  CHECK(back.vocab.tokens() == corpus.vocab.tokens());
}

TEST_CASE("vocabulary encode and decode") {
  Vocabulary v = Vocabulary::synthetic(5, 2, 2);
  CHECK(v.size() == 1 + 2 + 2 + 2 + 5);
  CHECK(v.token(0) == ".");
  auto ids = v.encode("R1 E3 E4 .");
  CHECK(v.decode(ids) == "R1 E3 E4 .");
  CHECK_THROWS_AS(v.encode("E9"), InputError);
  CHECK_THROWS_AS(Vocabulary({"a", "a"}), InputError);
}

TEST_CASE("infeasible sizes are rejected") {
  CorpusConfig c;
  c.n_edit = c.n_train + 1;
  CHECK_THROWS_AS(generate_corpus(c), InputError);
  c = CorpusConfig{};
  c.n_train = c.n_entities * c.n_relations + 1;
  CHECK_THROWS_AS(generate_corpus(c), InputError);
  c = CorpusConfig{};
  c.n_paraphrases = 1;
  CHECK_THROWS_AS(generate_corpus(c), InputError);
  c = CorpusConfig{};
  c.n_neighbors = 1;
  CHECK_THROWS_AS(generate_corpus(c), InputError);
  c = CorpusConfig{};
  c.n_entities = 2;
  CHECK_THROWS_AS(generate_corpus(c), InputError);
}

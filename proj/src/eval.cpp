#include "nse/eval.hpp"

#include <cmath>
#include <map>
#include <sstream>

namespace nse {
namespace {

bool prefers(const ModelState& model, std::span<const int> prompt, std::span<const int> a, std::span<const int> b) {
  return mean_logprob(model, prompt, a) > mean_logprob(model, prompt, b);
}

}  // namespace

std::string to_string(EvalMode mode) { return mode == EvalMode::kZsre ? "zsre" : "counterfact"; }

EvalMode parse_eval_mode(const std::string& s) {
  if (s == "counterfact") return EvalMode::kCounterfact;
  if (s == "zsre") return EvalMode::kZsre;
  throw InputError("unknown eval mode '" + s + "'");
}

void to_json(nlohmann::json& j, const EvalConfig& c) {
  j = nlohmann::json{{"mode", to_string(c.mode)}, {"gen_len", c.gen_len}, {"generation_metrics", c.generation_metrics}};
}

void from_json(const nlohmann::json& j, EvalConfig& c) {
  EvalConfig d;
  c.mode = parse_eval_mode(j.value("mode", to_string(d.mode)));
  c.gen_len = j.value("gen_len", d.gen_len);
  c.generation_metrics = j.value("generation_metrics", d.generation_metrics);
}

void to_json(nlohmann::json& j, const MetricReport& r) {
  j = nlohmann::json{{"efficacy", r.efficacy},
                     {"generalization", r.generalization},
                     {"specificity", r.specificity},
                     {"fluency", r.fluency},
                     {"consistency", r.consistency},
                     {"score", r.score},
                     {"n", {{"efficacy", r.n_efficacy},
                            {"generalization", r.n_generalization},
                            {"specificity", r.n_specificity},
                            {"fluency", r.n_fluency},
                            {"consistency", r.n_consistency}}},
                     {"warnings", r.warnings}};
}

void from_json(const nlohmann::json& j, MetricReport& r) {
  r.efficacy = j.at("efficacy").get<double>();
  r.generalization = j.at("generalization").get<double>();
  r.specificity = j.at("specificity").get<double>();
  r.fluency = j.at("fluency").get<double>();
  r.consistency = j.at("consistency").get<double>();
  r.score = j.at("score").get<double>();
  const auto& n = j.at("n");
  r.n_efficacy = n.value("efficacy", 0);
  r.n_generalization = n.value("generalization", 0);
  r.n_specificity = n.value("specificity", 0);
  r.n_fluency = n.value("fluency", 0);
  r.n_consistency = n.value("consistency", 0);
  r.warnings = j.value("warnings", std::vector<std::string>{});
}

double harmonic_score(double e, double g, double s) {
  if (!(e > 0.0 && g > 0.0 && s > 0.0)) return 0.0;
  return 3.0 / (1.0 / e + 1.0 / g + 1.0 / s);
}

double mean_logprob(const ModelState& model, std::span<const int> prompt, std::span<const int> continuation) {
  if (prompt.empty() || continuation.empty()) throw InputError("mean_logprob: empty prompt or continuation");
  auto lp = continuation_logprobs(model, prompt, continuation);
  double s = 0.0;
  for (double v : lp) s += v;
  return s / static_cast<double>(lp.size());
}

double efficacy_cf(const ModelState& model, const std::vector<FactRecord>& facts) {
  if (facts.empty()) throw InputError("efficacy: empty fact set");
  int wins = 0;
  for (const auto& f : facts) {
    if (f.old_object.empty()) throw InputError("efficacy: fact " + f.id + " has no old object");
    wins += prefers(model, f.prompt().tokens, f.object, f.old_object);
  }
  return static_cast<double>(wins) / static_cast<double>(facts.size());
}

double generalization_cf(const ModelState& model, const std::vector<FactRecord>& facts, int* excluded, int* n_prompts) {
  if (facts.empty()) throw InputError("generalization: empty fact set");
  int wins = 0, total = 0, skipped = 0;
  for (const auto& f : facts) {
    if (f.paraphrases.empty()) {
      ++skipped;
      continue;
    }
    if (f.old_object.empty()) throw InputError("generalization: fact " + f.id + " has no old object");
    for (const auto& p : f.paraphrases) {
      wins += prefers(model, p.tokens, f.object, f.old_object);
      ++total;
    }
  }
  if (excluded) *excluded = skipped;
  if (n_prompts) *n_prompts = total;
  return total ? static_cast<double>(wins) / total : 0.0;
}

double specificity_cf(const ModelState& model, const std::vector<FactRecord>& facts, int* excluded, int* n_prompts) {
  if (facts.empty()) throw InputError("specificity: empty fact set");
  int wins = 0, total = 0, skipped = 0;
  for (const auto& f : facts) {
    if (f.neighbors.empty()) {
      ++skipped;
      continue;
    }
    for (const auto& nb : f.neighbors) {
      wins += prefers(model, nb.prompt.tokens, nb.object, f.object);
      ++total;
    }
  }
  if (excluded) *excluded = skipped;
  if (n_prompts) *n_prompts = total;
  return total ? static_cast<double>(wins) / total : 0.0;
}

double zsre_accuracy(const ModelState& model, const std::vector<std::vector<int>>& prompts,
                     const std::vector<std::vector<int>>& targets) {
  if (prompts.size() != targets.size()) throw InputError("zsre_accuracy: prompt and target counts differ");
  if (prompts.empty()) throw InputError("zsre_accuracy: empty prompt set");
  double acc = 0.0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto& p = prompts[i];
    const auto& t = targets[i];
    if (p.empty() || t.empty()) throw InputError("zsre_accuracy: empty prompt or target");
    auto tf = teacher_forced(p, t);
    ForwardTrace tr = forward(model, tf.input);
    int hits = 0;
    for (std::size_t k = 0; k < t.size(); ++k) {
      Eigen::Index best;
      tr.logits.row(static_cast<Eigen::Index>(p.size() - 1 + k)).maxCoeff(&best);
      hits += static_cast<int>(best) == t[k];
    }
    acc += static_cast<double>(hits) / static_cast<double>(t.size());
  }
  return acc / static_cast<double>(prompts.size());
}

double ngram_entropy_bits(std::span<const int> tokens, std::size_t n) {
  if (n == 0) throw InputError("ngram_entropy_bits: n must be positive");
  if (tokens.size() < n) return 0.0;
  std::map<std::vector<int>, int> counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) ++counts[std::vector<int>(tokens.begin() + i, tokens.begin() + i + n)];
  const double total = static_cast<double>(tokens.size() - n + 1);
  double h = 0.0;
  for (const auto& [gram, c] : counts) {
    double g = c / total;
    h -= g * std::log2(g);
  }
  return h;
}

double weighted_ngram_entropy(double h2, double h3) { return (2.0 / 3.0) * h2 + (4.0 / 3.0) * h3; }

double ngram_entropy(std::span<const int> tokens) {
  if (tokens.empty()) throw NumericError("fluency: empty generation");
  return weighted_ngram_entropy(ngram_entropy_bits(tokens, 2), ngram_entropy_bits(tokens, 3));
}

double fluency(const ModelState& model, const std::vector<std::vector<int>>& prompts, int gen_len) {
  if (gen_len < 10) throw InputError("fluency: gen_len must be at least 10");
  if (prompts.empty()) throw InputError("fluency: empty prompt set");
  double sum = 0.0;
  for (const auto& p : prompts) sum += ngram_entropy(greedy_generate(model, p, gen_len));
  return sum / static_cast<double>(prompts.size());
}

TfIdf::TfIdf(const std::vector<std::vector<int>>& documents) {
  std::unordered_map<int, int> df;
  for (const auto& doc : documents) {
    std::unordered_map<int, bool> seen;
    for (int t : doc)
      if (!seen[t]) {
        seen[t] = true;
        ++df[t];
      }
  }
  const double n = static_cast<double>(documents.size());
  for (const auto& [t, c] : df) idf_[t] = std::log((1.0 + n) / (1.0 + c)) + 1.0;
  unseen_idf_ = std::log(1.0 + n) + 1.0;
}

std::unordered_map<int, double> TfIdf::vectorize(std::span<const int> tokens) const {
  std::unordered_map<int, double> v;
  for (int t : tokens) v[t] += 1.0;
  for (auto& [t, w] : v) {
    auto it = idf_.find(t);
    w *= it == idf_.end() ? unseen_idf_ : it->second;
  }
  return v;
}

double TfIdf::cosine(std::span<const int> a, std::span<const int> b) const {
  auto va = vectorize(a), vb = vectorize(b);
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (const auto& [t, w] : va) {
    na += w * w;
    auto it = vb.find(t);
    if (it != vb.end()) dot += w * it->second;
  }
  for (const auto& [t, w] : vb) nb += w * w;
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / std::sqrt(na * nb);
}

double consistency(const ModelState& model, const std::vector<FactRecord>& facts,
                   const std::unordered_map<int, std::vector<int>>& references, int gen_len, int* excluded) {
  if (facts.empty()) throw InputError("consistency: empty fact set");
  std::vector<std::vector<int>> pool;
  std::map<int, const std::vector<int>*> ordered;
  for (const auto& [obj, text] : references) ordered[obj] = &text;
  for (const auto& [obj, text] : ordered) pool.push_back(*text);
  TfIdf tfidf(pool);

  double sum = 0.0;
  int used = 0, skipped = 0;
  for (const auto& f : facts) {
    auto it = f.object.empty() ? references.end() : references.find(f.object.front());
    if (it == references.end()) {
      ++skipped;
      continue;
    }
    auto gen = greedy_generate(model, f.prompt().tokens, gen_len);
    sum += tfidf.cosine(gen, it->second);
    ++used;
  }
  if (excluded) *excluded = skipped;
  return used ? sum / used : 0.0;
}

MetricReport evaluate(const ModelState& model, const std::vector<FactRecord>& facts,
                      const std::unordered_map<int, std::vector<int>>& references, const EvalConfig& config) {
  if (facts.empty()) throw InputError("evaluate: empty evaluation set");
  MetricReport r;
  int excluded = 0;
  if (config.mode == EvalMode::kCounterfact) {
    r.efficacy = efficacy_cf(model, facts);
    r.n_efficacy = static_cast<int>(facts.size());
    r.generalization = generalization_cf(model, facts, &excluded, &r.n_generalization);
    if (excluded) r.warnings.push_back(std::to_string(excluded) + " facts without paraphrases excluded");
    r.specificity = specificity_cf(model, facts, &excluded, &r.n_specificity);
    if (excluded) r.warnings.push_back(std::to_string(excluded) + " facts without neighbors excluded");
  } else {
    std::vector<std::vector<int>> prompts, targets;
    for (const auto& f : facts) {
      prompts.push_back(f.prompt().tokens);
      targets.push_back(f.object);
    }
    r.efficacy = zsre_accuracy(model, prompts, targets);
    r.n_efficacy = static_cast<int>(prompts.size());
    prompts.clear();
    targets.clear();
    for (const auto& f : facts)
      for (const auto& p : f.paraphrases) {
        prompts.push_back(p.tokens);
        targets.push_back(f.object);
      }
    if (!prompts.empty()) r.generalization = zsre_accuracy(model, prompts, targets);
    r.n_generalization = static_cast<int>(prompts.size());
    prompts.clear();
    targets.clear();
    for (const auto& f : facts)
      for (const auto& nb : f.neighbors) {
        prompts.push_back(nb.prompt.tokens);
        targets.push_back(nb.object);
      }
    if (!prompts.empty()) r.specificity = zsre_accuracy(model, prompts, targets);
    r.n_specificity = static_cast<int>(prompts.size());
  }
  r.score = harmonic_score(r.efficacy, r.generalization, r.specificity);

  if (config.generation_metrics) {
    std::vector<std::vector<int>> prompts;
    for (const auto& f : facts) {
      prompts.push_back(f.prompt().tokens);
      for (const auto& para : f.paraphrases) prompts.push_back(para.tokens);
    }
    r.fluency = fluency(model, prompts, config.gen_len);
    r.n_fluency = static_cast<int>(prompts.size());
    r.consistency = consistency(model, facts, references, config.gen_len, &excluded);
    r.n_consistency = static_cast<int>(facts.size()) - excluded;
    if (excluded) r.warnings.push_back(std::to_string(excluded) + " facts without reference text excluded");
  }
  return r;
}

std::string metric_csv_header() {
  return "round,efficacy,generalization,specificity,fluency,consistency,score,n_efficacy,n_generalization,"
         "n_specificity";
}

std::string metric_csv_row(int round, const MetricReport& r) {
  std::ostringstream out;
  out.precision(10);
  out << round << ',' << r.efficacy << ',' << r.generalization << ',' << r.specificity << ',' << r.fluency << ','
      << r.consistency << ',' << r.score << ',' << r.n_efficacy << ',' << r.n_generalization << ','
      << r.n_specificity;
  return out.str();
}

}  // namespace nse

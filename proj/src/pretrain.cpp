#include "nse/pretrain.hpp"

#include <cmath>
#include <sstream>

namespace nse {
namespace {

class Adam {
 public:
  Adam(const ModelState& shape, const TrainConfig& tc) : tc_(tc) {
    for_each_parameter(shape, [&](const std::string&, const auto& p) {
      m_.push_back(Eigen::ArrayXd::Zero(p.size()));
      v_.push_back(Eigen::ArrayXd::Zero(p.size()));
    });
  }

  void step(ModelState& params, ModelState& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(tc_.beta1, t_);
    const double c2 = 1.0 - std::pow(tc_.beta2, t_);
    std::size_t i = 0;
    std::vector<Eigen::Map<Eigen::ArrayXd>> gs;
    for_each_parameter(grads, [&](const std::string&, auto& g) { gs.emplace_back(g.data(), g.size()); });
    for_each_parameter(params, [&](const std::string&, auto& p) {
      Eigen::Map<Eigen::ArrayXd> w(p.data(), p.size());
      auto& g = gs[i];
      m_[i] = tc_.beta1 * m_[i] + (1.0 - tc_.beta1) * g;
      v_[i] = tc_.beta2 * v_[i] + (1.0 - tc_.beta2) * g.square();
      w -= tc_.lr * (m_[i] / c1) / ((v_[i] / c2).sqrt() + 1e-8);
      ++i;
    });
  }

 private:
  TrainConfig tc_;
  int t_ = 0;
  std::vector<Eigen::ArrayXd> m_, v_;
};

void zero_grads(ModelState& g) {
  for_each_parameter(g, [](const std::string&, auto& p) { p.setZero(); });
}

double grad_norm(ModelState& g) {
  double s = 0.0;
  for_each_parameter(g, [&](const std::string&, auto& p) { s += p.squaredNorm(); });
  return std::sqrt(s);
}

void scale_grads(ModelState& g, double f) {
  for_each_parameter(g, [&](const std::string&, auto& p) { p *= f; });
}

bool matches(const ModelState& model, const std::vector<int>& prompt, const std::vector<int>& object) {
  return greedy_generate(model, prompt, static_cast<int>(object.size())) == object;
}

}  // namespace

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"max_steps", c.max_steps},   {"lr", c.lr},
                     {"batch_size", c.batch_size}, {"beta1", c.beta1},
                     {"beta2", c.beta2},           {"grad_clip", c.grad_clip},
                     {"eval_every", c.eval_every}, {"target_recall", c.target_recall},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.max_steps = j.value("max_steps", d.max_steps);
  c.lr = j.value("lr", d.lr);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  c.eval_every = j.value("eval_every", d.eval_every);
  c.target_recall = j.value("target_recall", d.target_recall);
  c.seed = j.value("seed", d.seed);
}

void to_json(nlohmann::json& j, const TrainingReport& r) {
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& [step, loss] : r.loss_curve) curve.push_back({step, loss});
  j = nlohmann::json{{"steps", r.steps},
                     {"final_loss", r.final_loss},
                     {"recall", r.recall},
                     {"paraphrase_recall", r.paraphrase_recall},
                     {"gate_passed", r.gate_passed},
                     {"loss_curve", curve}};
}

double recall(const ModelState& model, const std::vector<FactRecord>& facts) {
  if (facts.empty()) return 0.0;
  int hit = 0;
  for (const auto& f : facts) hit += matches(model, f.prompt().tokens, f.object);
  return static_cast<double>(hit) / static_cast<double>(facts.size());
}

double paraphrase_recall(const ModelState& model, const std::vector<FactRecord>& facts) {
  int hit = 0, total = 0;
  for (const auto& f : facts)
    for (const auto& p : f.paraphrases) {
      hit += matches(model, p.tokens, f.object);
      ++total;
    }
  return total ? static_cast<double>(hit) / total : 0.0;
}

void require_memorization(const ModelState& model, const Corpus& corpus) {
  double r = recall(model, corpus.train);
  if (r < kMemorizationGate) {
    std::ostringstream msg;
    msg << "memorization gate failed: recall " << r << " < " << kMemorizationGate;
    throw StateError(msg.str());
  }
}

TrainResult train(const ModelConfig& config, const Corpus& corpus, const TrainConfig& tc) {
  if (corpus.train.empty()) throw InputError("train: corpus has no train facts");
  if (tc.batch_size < 1 || tc.max_steps < 0 || !(tc.lr > 0.0)) throw InputError("train: invalid training config");
  Rng rng(tc.seed);
  Rng init_rng = rng.fork(0);
  Rng data_rng = rng.fork(1);

  TrainResult result{ModelState::random(config, init_rng), {}};
  ModelState& model = result.model;
  ModelState grads = ModelState::zeros(config);
  Adam adam(model, tc);
  auto& rep = result.report;

  double running = 0.0;
  int running_n = 0;
  for (int step = 1; step <= tc.max_steps; ++step) {
    std::vector<std::vector<int>> batch;
    for (int b = 0; b < tc.batch_size; ++b) {
      const auto& f = corpus.train[data_rng.below(corpus.train.size())];
      batch.push_back(sample_text(corpus, f, data_rng, data_rng.uniform() < 0.5));
    }
    ForwardTrace tr = forward_batch(model, batch);
    std::vector<int> targets(tr.tokens.size(), -1);
    int n_targets = 0;
    for (std::size_t s = 0; s < batch.size(); ++s)
      for (std::size_t i = 0; i + 1 < batch[s].size(); ++i) {
        targets[static_cast<std::size_t>(tr.row(s, static_cast<int>(i)))] = batch[s][i + 1];
        ++n_targets;
      }
    Matrix dlogits;
    double loss = ops::cross_entropy(tr.logits, targets, &dlogits) / n_targets;
    if (!std::isfinite(loss)) {
      std::ostringstream msg;
      msg << "training diverged at step " << step << " (loss " << loss << ", previous mean " << (running_n ? running / running_n : 0.0)
          << ")";
      throw NumericError(msg.str());
    }
    dlogits /= n_targets;
    zero_grads(grads);
    backward(model, tr, dlogits, &grads);
    double gn = grad_norm(grads);
    if (!std::isfinite(gn)) throw NumericError("training diverged: non-finite gradient at step " + std::to_string(step));
    if (tc.grad_clip > 0.0 && gn > tc.grad_clip) scale_grads(grads, tc.grad_clip / gn);
    adam.step(model, grads);

    running += loss;
    ++running_n;
    rep.steps = step;
    rep.final_loss = loss;
    if (step % tc.eval_every == 0) {
      rep.loss_curve.emplace_back(step, running / running_n);
      running = 0.0;
      running_n = 0;
      if (recall(model, corpus.train) >= tc.target_recall) break;
    }
  }
  rep.recall = recall(model, corpus.train);
  rep.paraphrase_recall = paraphrase_recall(model, corpus.train);
  rep.gate_passed = rep.recall >= kMemorizationGate;
  return result;
}

}  // namespace nse

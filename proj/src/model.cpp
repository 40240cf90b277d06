#include "nse/model.hpp"

#include <cmath>
#include <sstream>

namespace nse {
namespace {

LayerNormParams unit_norm(int d) { return {Vector::Ones(d), Vector::Zero(d)}; }

void check_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) throw NumericError(std::string("non-finite activation in ") + what);
}

struct FlatBatch {
  std::vector<int> tokens;
  std::vector<int> positions;
  std::vector<std::size_t> offsets;
};

FlatBatch flatten(const ModelConfig& config, const std::vector<std::span<const int>>& seqs) {
  FlatBatch b;
  b.offsets.push_back(0);
  for (const auto& s : seqs) {
    if (s.empty()) throw InputError("forward: empty sequence");
    if (static_cast<int>(s.size()) > config.context_len) {
      std::ostringstream msg;
      msg << "forward: sequence length " << s.size() << " exceeds context " << config.context_len;
      throw InputError(msg.str());
    }
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] < 0 || s[i] >= config.vocab_size) throw InputError("forward: token id out of vocabulary");
      b.tokens.push_back(s[i]);
      b.positions.push_back(static_cast<int>(i));
    }
    b.offsets.push_back(b.tokens.size());
  }
  return b;
}

ForwardTrace run_forward(const ModelState& state, FlatBatch batch, std::span<const Injection> injections) {
  const auto& cfg = state.config;
  for (const auto& inj : injections) {
    if (inj.layer < 0 || inj.layer >= cfg.n_layers) throw InputError("forward: injection layer out of range");
    if (inj.token < 0 || static_cast<std::size_t>(inj.token) >= batch.offsets[1])
      throw InputError("forward: injection token out of range");
    if (inj.delta.size() != cfg.d_model) throw InputError("forward: injection delta has wrong size");
  }

  ForwardTrace tr;
  tr.tokens = std::move(batch.tokens);
  tr.offsets = std::move(batch.offsets);
  tr.embedded = ops::embedding_forward(state.embedding, tr.tokens) + ops::embedding_forward(state.position, batch.positions);

  const std::size_t n_seq = tr.n_sequences();
  tr.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  const Matrix* h = &tr.embedded;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& p = state.layers[static_cast<std::size_t>(l)];
    auto& lt = tr.layers[static_cast<std::size_t>(l)];
    lt.h_in = *h;
    lt.attn_in = ops::layernorm_forward(lt.h_in, p.attn_norm.gain, p.attn_norm.bias, &lt.attn_norm_cache);
    lt.q = ops::linear_forward(lt.attn_in, p.w_q);
    lt.k = ops::linear_forward(lt.attn_in, p.w_k);
    lt.v = ops::linear_forward(lt.attn_in, p.w_v);
    lt.attn_mix.resize(lt.q.rows(), lt.q.cols());
    lt.attn_cache.resize(n_seq);
    for (std::size_t s = 0; s < n_seq; ++s) {
      auto start = static_cast<Eigen::Index>(tr.offsets[s]);
      auto len = static_cast<Eigen::Index>(tr.length(s));
      lt.attn_mix.middleRows(start, len) =
          ops::causal_attention_forward(lt.q.middleRows(start, len), lt.k.middleRows(start, len),
                                        lt.v.middleRows(start, len), cfg.n_heads, &lt.attn_cache[s]);
    }
    lt.attn_out = ops::linear_forward(lt.attn_mix, p.w_o);
    Matrix mid = lt.h_in + lt.attn_out;
    lt.ffn_in = ops::layernorm_forward(mid, p.ffn_norm.gain, p.ffn_norm.bias, &lt.ffn_norm_cache);
    lt.pre_act = ops::linear_forward(lt.ffn_in, p.w_in);
    lt.key = ops::gelu_forward(lt.pre_act);
    lt.value = ops::linear_forward(lt.key, p.w_out);
    lt.h_out = mid + lt.value;
    for (const auto& inj : injections)
      if (inj.layer == l) lt.h_out.row(inj.token) += inj.delta.transpose();
    check_finite(lt.h_out, "hidden state");
    h = &lt.h_out;
  }
  tr.final_normed = ops::layernorm_forward(*h, state.final_norm.gain, state.final_norm.bias, &tr.final_norm_cache);
  tr.logits = tr.final_normed * state.embedding.transpose();
  check_finite(tr.logits, "logits");
  return tr;
}

}  // namespace

void ModelConfig::validate() const {
  if (n_layers < 1 || d_model < 1 || d_ffn < 1 || n_heads < 1 || context_len < 1 || vocab_size < 1)
    throw InputError("model config: all sizes must be >= 1");
  if (d_model % n_heads != 0) throw InputError("model config: d_model must be divisible by n_heads");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers}, {"d_model", c.d_model},         {"d_ffn", c.d_ffn},
                     {"n_heads", c.n_heads},   {"context_len", c.context_len}, {"vocab_size", c.vocab_size}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.n_layers = j.value("n_layers", d.n_layers);
  c.d_model = j.value("d_model", d.d_model);
  c.d_ffn = j.value("d_ffn", d.d_ffn);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.context_len = j.value("context_len", d.context_len);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
}

ModelState ModelState::zeros(const ModelConfig& config) {
  config.validate();
  const int d = config.d_model;
  ModelState s;
  s.config = config;
  s.embedding = Matrix::Zero(config.vocab_size, d);
  s.position = Matrix::Zero(config.context_len, d);
  s.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& p : s.layers) {
    p.w_q = p.w_k = p.w_v = p.w_o = Matrix::Zero(d, d);
    p.attn_norm = unit_norm(d);
    p.ffn_norm = unit_norm(d);
    p.w_in = Matrix::Zero(config.d_ffn, d);
    p.w_out = Matrix::Zero(d, config.d_ffn);
  }
  s.final_norm = unit_norm(d);
  return s;
}

ModelState ModelState::random(const ModelConfig& config, Rng& rng) {
  ModelState s = zeros(config);
  const double std = 0.02;
  const double resid_std = std / std::sqrt(2.0 * config.n_layers);
  s.embedding = random_normal(s.embedding.rows(), s.embedding.cols(), std, rng);
  s.position = random_normal(s.position.rows(), s.position.cols(), std, rng);
  for (auto& p : s.layers) {
    p.w_q = random_normal(p.w_q.rows(), p.w_q.cols(), std, rng);
    p.w_k = random_normal(p.w_k.rows(), p.w_k.cols(), std, rng);
    p.w_v = random_normal(p.w_v.rows(), p.w_v.cols(), std, rng);
    p.w_o = random_normal(p.w_o.rows(), p.w_o.cols(), resid_std, rng);
    p.w_in = random_normal(p.w_in.rows(), p.w_in.cols(), std, rng);
    p.w_out = random_normal(p.w_out.rows(), p.w_out.cols(), resid_std, rng);
  }
  return s;
}

void ModelState::validate() const {
  config.validate();
  if (static_cast<int>(layers.size()) != config.n_layers) throw InputError("model: layer count mismatch");
  auto shape = [](const auto& m, Eigen::Index r, Eigen::Index c, const char* what) {
    if (m.rows() != r || m.cols() != c) throw InputError(std::string("model: bad shape for ") + what);
  };
  const int d = config.d_model;
  shape(embedding, config.vocab_size, d, "embedding");
  shape(position, config.context_len, d, "position");
  for (const auto& p : layers) {
    shape(p.w_q, d, d, "w_q");
    shape(p.w_k, d, d, "w_k");
    shape(p.w_v, d, d, "w_v");
    shape(p.w_o, d, d, "w_o");
    shape(p.w_in, config.d_ffn, d, "w_in");
    shape(p.w_out, d, config.d_ffn, "w_out");
    for (const auto* n : {&p.attn_norm, &p.ffn_norm}) {
      shape(n->gain, d, 1, "norm gain");
      shape(n->bias, d, 1, "norm bias");
      if ((n->gain.array() == 0.0).any()) throw InputError("model: layernorm gain has zero entry");
    }
  }
  bool finite = true;
  for_each_parameter(*this, [&](const std::string&, const auto& m) { finite = finite && m.allFinite(); });
  if (!finite) throw NumericError("model: non-finite parameter");
}

std::uint64_t model_hash(const ModelState& state) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for_each_parameter(state, [&](const std::string& name, const auto& m) {
    h = hash_bytes(name.data(), name.size(), h);
    h = hash_bytes(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()), h);
  });
  return h;
}

Vector ForwardTrace::hidden(int layer, int token, std::size_t seq) const {
  return layers.at(static_cast<std::size_t>(layer)).h_out.row(row(seq, token)).transpose();
}

Vector ForwardTrace::attention(int layer, int token, std::size_t seq) const {
  return layers.at(static_cast<std::size_t>(layer)).attn_out.row(row(seq, token)).transpose();
}

Vector ForwardTrace::value(int layer, int token, std::size_t seq) const {
  return layers.at(static_cast<std::size_t>(layer)).value.row(row(seq, token)).transpose();
}

ForwardTrace forward(const ModelState& state, std::span<const int> tokens, std::span<const Injection> injections) {
  return run_forward(state, flatten(state.config, {tokens}), injections);
}

ForwardTrace forward_batch(const ModelState& state, const std::vector<std::vector<int>>& sequences) {
  std::vector<std::span<const int>> spans(sequences.begin(), sequences.end());
  return run_forward(state, flatten(state.config, spans), {});
}

Vector key_at(const ForwardTrace& trace, int layer, int token, std::size_t seq) {
  if (layer < 0 || layer >= static_cast<int>(trace.layers.size())) throw InputError("key_at: layer out of range");
  if (seq >= trace.n_sequences() || token < 0 || static_cast<std::size_t>(token) >= trace.length(seq))
    throw InputError("key_at: token out of range");
  return trace.layers[static_cast<std::size_t>(layer)].key.row(trace.row(seq, token)).transpose();
}

std::optional<Vector> backward(const ModelState& state, const ForwardTrace& tr, const Matrix& dlogits,
                               ModelState* grads, std::optional<InjectionSite> capture) {
  const auto& cfg = state.config;
  std::optional<Vector> captured;

  Matrix dnormed = dlogits * state.embedding;
  if (grads) grads->embedding.noalias() += dlogits.transpose() * tr.final_normed;
  Matrix dh = ops::layernorm_backward(dnormed, tr.final_norm_cache, state.final_norm.gain,
                                      grads ? &grads->final_norm.gain : nullptr,
                                      grads ? &grads->final_norm.bias : nullptr);

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const auto& p = state.layers[static_cast<std::size_t>(l)];
    const auto& lt = tr.layers[static_cast<std::size_t>(l)];
    LayerParams* g = grads ? &grads->layers[static_cast<std::size_t>(l)] : nullptr;

    if (capture && capture->layer == l) captured = dh.row(capture->token).transpose();

    Matrix dkey = ops::linear_backward(dh, lt.key, p.w_out, g ? &g->w_out : nullptr);
    Matrix dpre = ops::gelu_backward(dkey, lt.pre_act);
    Matrix dffn_in = ops::linear_backward(dpre, lt.ffn_in, p.w_in, g ? &g->w_in : nullptr);
    Matrix dmid = dh + ops::layernorm_backward(dffn_in, lt.ffn_norm_cache, p.ffn_norm.gain,
                                               g ? &g->ffn_norm.gain : nullptr, g ? &g->ffn_norm.bias : nullptr);

    Matrix dmix = ops::linear_backward(dmid, lt.attn_mix, p.w_o, g ? &g->w_o : nullptr);
    Matrix dq(lt.q.rows(), lt.q.cols()), dk(lt.k.rows(), lt.k.cols()), dv(lt.v.rows(), lt.v.cols());
    for (std::size_t s = 0; s < tr.n_sequences(); ++s) {
      auto start = static_cast<Eigen::Index>(tr.offsets[s]);
      auto len = static_cast<Eigen::Index>(tr.length(s));
      Matrix sdq, sdk, sdv;
      ops::causal_attention_backward(dmix.middleRows(start, len), lt.q.middleRows(start, len),
                                     lt.k.middleRows(start, len), lt.v.middleRows(start, len), cfg.n_heads,
                                     lt.attn_cache[s], sdq, sdk, sdv);
      dq.middleRows(start, len) = sdq;
      dk.middleRows(start, len) = sdk;
      dv.middleRows(start, len) = sdv;
    }
    Matrix dattn_in = ops::linear_backward(dq, lt.attn_in, p.w_q, g ? &g->w_q : nullptr);
    dattn_in += ops::linear_backward(dk, lt.attn_in, p.w_k, g ? &g->w_k : nullptr);
    dattn_in += ops::linear_backward(dv, lt.attn_in, p.w_v, g ? &g->w_v : nullptr);
    dh = dmid + ops::layernorm_backward(dattn_in, lt.attn_norm_cache, p.attn_norm.gain,
                                        g ? &g->attn_norm.gain : nullptr, g ? &g->attn_norm.bias : nullptr);
  }

  if (grads) {
    ops::embedding_backward(dh, tr.tokens, grads->embedding);
    for (std::size_t s = 0; s < tr.n_sequences(); ++s)
      for (std::size_t i = 0; i < tr.length(s); ++i)
        grads->position.row(static_cast<Eigen::Index>(i)) += dh.row(tr.row(s, static_cast<int>(i)));
  }
  return captured;
}

InjectionGradient grad_wrt_injection(const ModelState& state, std::span<const int> tokens, const InjectionSite& site,
                                     const Vector& delta, std::span<const int> targets) {
  if (targets.size() != tokens.size()) throw InputError("grad_wrt_injection: targets/tokens length mismatch");
  Injection inj{site.layer, site.token, delta};
  ForwardTrace tr = forward(state, tokens, std::span<const Injection>(&inj, 1));
  Matrix dlogits;
  InjectionGradient out;
  out.nll = ops::cross_entropy(tr.logits, targets, &dlogits);
  out.grad = *backward(state, tr, dlogits, nullptr, site);
  return out;
}

TeacherForced teacher_forced(std::span<const int> prompt, std::span<const int> continuation) {
  if (prompt.empty() || continuation.empty()) throw InputError("teacher_forced: empty prompt or continuation");
  TeacherForced tf;
  tf.input.assign(prompt.begin(), prompt.end());
  tf.input.insert(tf.input.end(), continuation.begin(), continuation.end() - 1);
  tf.targets.assign(tf.input.size(), -1);
  for (std::size_t i = 0; i < continuation.size(); ++i) tf.targets[prompt.size() - 1 + i] = continuation[i];
  return tf;
}

std::vector<double> continuation_logprobs(const ModelState& state, std::span<const int> prompt,
                                          std::span<const int> continuation) {
  auto tf = teacher_forced(prompt, continuation);
  ForwardTrace tr = forward(state, tf.input);
  std::vector<double> out;
  out.reserve(continuation.size());
  for (std::size_t i = 0; i < continuation.size(); ++i) {
    auto r = static_cast<Eigen::Index>(prompt.size() - 1 + i);
    Matrix row = tr.logits.row(r);
    out.push_back(ops::log_softmax_rows(row)(0, continuation[i]));
  }
  return out;
}

std::vector<int> greedy_generate(const ModelState& state, std::span<const int> prompt, int n_new) {
  std::vector<int> seq(prompt.begin(), prompt.end());
  std::vector<int> generated;
  for (int i = 0; i < n_new && static_cast<int>(seq.size()) < state.config.context_len; ++i) {
    ForwardTrace tr = forward(state, seq);
    Eigen::Index best;
    tr.logits.row(tr.logits.rows() - 1).maxCoeff(&best);
    seq.push_back(static_cast<int>(best));
    generated.push_back(static_cast<int>(best));
  }
  return generated;
}

}  // namespace nse

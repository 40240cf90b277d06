#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "nse/numerics.hpp"
#include "nse/ops.hpp"

namespace nse {

struct ModelConfig {
  int n_layers = 8;
  int d_model = 64;
  int d_ffn = 256;
  int n_heads = 4;
  int context_len = 16;
  int vocab_size = 0;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct LayerNormParams {
  Vector gain;
  Vector bias;
};

struct LayerParams {
  Matrix w_q, w_k, w_v, w_o;  // d_model x d_model
  LayerNormParams attn_norm;
  LayerNormParams ffn_norm;   // the norm in front of W_in
  Matrix w_in;                // d_ffn x d_model
  Matrix w_out;               // d_model x d_ffn; the editable matrix
};

struct ModelState {
  ModelConfig config;
  Matrix embedding;  // vocab x d_model, shared by input lookup and output logits
  Matrix position;   // context_len x d_model
  std::vector<LayerParams> layers;
  LayerNormParams final_norm;
  /// Number of weight edits applied since the model was trained. Not a
  /// parameter; excluded from model_hash.
  int edit_generation = 0;

  /// All weights zero, layernorm gains one.
  static ModelState zeros(const ModelConfig& config);
  /// GPT-2 style initialization: N(0, 0.02), residual projections scaled by 1/sqrt(2L).
  static ModelState random(const ModelConfig& config, Rng& rng);

  void validate() const;
};

/// Calls f(name, param) for every parameter tensor in a fixed order. `param`
/// is either a Matrix or a Vector.
template <typename State, typename F>
void for_each_parameter(State& s, F&& f) {
  f(std::string("embedding"), s.embedding);
  f(std::string("position"), s.position);
  for (std::size_t l = 0; l < s.layers.size(); ++l) {
    auto& p = s.layers[l];
    std::string pre = "layers." + std::to_string(l) + ".";
    f(pre + "attn_norm.gain", p.attn_norm.gain);
    f(pre + "attn_norm.bias", p.attn_norm.bias);
    f(pre + "w_q", p.w_q);
    f(pre + "w_k", p.w_k);
    f(pre + "w_v", p.w_v);
    f(pre + "w_o", p.w_o);
    f(pre + "ffn_norm.gain", p.ffn_norm.gain);
    f(pre + "ffn_norm.bias", p.ffn_norm.bias);
    f(pre + "w_in", p.w_in);
    f(pre + "w_out", p.w_out);
  }
  f(std::string("final_norm.gain"), s.final_norm.gain);
  f(std::string("final_norm.bias"), s.final_norm.bias);
}

/// Hash of every parameter value; equal hashes mean bitwise-equal models.
std::uint64_t model_hash(const ModelState& state);

/// Adds `delta` to the residual stream h^layer at `token`, after that layer's
/// FFN output has been added and before layer+1 reads it.
struct Injection {
  int layer = 0;
  int token = 0;
  Vector delta;
};

struct InjectionSite {
  int layer = 0;
  int token = 0;
};

struct LayerTrace {
  Matrix h_in;  // h^{l-1}
  ops::LayerNormCache attn_norm_cache;
  Matrix attn_in;
  Matrix q, k, v;
  std::vector<ops::AttentionCache> attn_cache;  // per sequence
  Matrix attn_mix;
  Matrix attn_out;  // a^l
  ops::LayerNormCache ffn_norm_cache;
  Matrix ffn_in;    // gamma(h^{l-1} + a^l)
  Matrix pre_act;   // W_in gamma(...)
  Matrix key;       // sigma(pre_act), one row per token
  Matrix value;     // v^l = key W_out^T
  Matrix h_out;     // h^l, including any injected delta
};

/// Activations of one forward pass over one or more packed sequences. Row r
/// of every per-token matrix belongs to token `r - offsets[s]` of sequence s.
struct ForwardTrace {
  std::vector<int> tokens;
  std::vector<std::size_t> offsets;  // n_sequences + 1 entries
  Matrix embedded;                   // h^{-1}
  std::vector<LayerTrace> layers;
  ops::LayerNormCache final_norm_cache;
  Matrix final_normed;
  Matrix logits;

  std::size_t n_sequences() const { return offsets.size() - 1; }
  std::size_t length(std::size_t seq = 0) const { return offsets[seq + 1] - offsets[seq]; }
  Eigen::Index row(std::size_t seq, int token) const { return static_cast<Eigen::Index>(offsets[seq]) + token; }

  Vector hidden(int layer, int token, std::size_t seq = 0) const;
  Vector attention(int layer, int token, std::size_t seq = 0) const;
  Vector value(int layer, int token, std::size_t seq = 0) const;
};

/// Runs the model over a single sequence with optional hidden-state injections.
ForwardTrace forward(const ModelState& state, std::span<const int> tokens,
                     std::span<const Injection> injections = {});

/// Runs several independent sequences packed into one trace (no injections).
ForwardTrace forward_batch(const ModelState& state, const std::vector<std::vector<int>>& sequences);

/// FFN key k^l_t = sigma(W_in gamma(h^{l-1}_t + a^l_t)).
Vector key_at(const ForwardTrace& trace, int layer, int token, std::size_t seq = 0);

/// Reverse pass. Accumulates parameter gradients into `grads` when non-null
/// and returns d(loss)/d(h^site) when `capture` is set.
std::optional<Vector> backward(const ModelState& state, const ForwardTrace& trace, const Matrix& dlogits,
                               ModelState* grads, std::optional<InjectionSite> capture = std::nullopt);

struct InjectionGradient {
  double nll = 0.0;
  Vector grad;
};

/// -sum log P[targets] with `delta` injected at `site`, and its gradient
/// w.r.t. delta. `targets[i]` is the token expected after position i, or -1.
InjectionGradient grad_wrt_injection(const ModelState& state, std::span<const int> tokens, const InjectionSite& site,
                                     const Vector& delta, std::span<const int> targets);

/// Next-token targets for scoring `continuation` after `prompt`: returns the
/// input sequence (prompt + continuation minus its last token) and targets.
struct TeacherForced {
  std::vector<int> input;
  std::vector<int> targets;
};
TeacherForced teacher_forced(std::span<const int> prompt, std::span<const int> continuation);

/// Per-token log-probabilities of `continuation` given `prompt`.
std::vector<double> continuation_logprobs(const ModelState& state, std::span<const int> prompt,
                                          std::span<const int> continuation);

/// Greedy decoding; stops early when the context window is full.
std::vector<int> greedy_generate(const ModelState& state, std::span<const int> prompt, int n_new);

/// Binary checkpoint: magic "NSECKPT1", uint32 parameter count, uint32 zero,
/// then per parameter a uint32 name length, the name bytes and a Matrix
/// record. Vectors are stored as single-column matrices. A JSON sidecar
/// (path + ".json") carries the ModelConfig.
void save_checkpoint(const std::string& path, const ModelState& state);
ModelState load_checkpoint(const std::string& path);

}  // namespace nse

#pragma once

#include <span>
#include <vector>

#include "nse/numerics.hpp"

// Forward/backward kernels for the transformer primitives. Inputs hold one
// token per row. Every backward takes the upstream gradient and the cache
// produced by its forward and returns the gradient w.r.t. the forward input.
namespace nse::ops {

inline constexpr double kLayerNormEps = 1e-5;

struct LayerNormCache {
  Matrix normalized;  // (x - mean) * rstd
  Vector rstd;
};

Matrix layernorm_forward(const Matrix& x, const Vector& gain, const Vector& bias, LayerNormCache* cache);
Matrix layernorm_backward(const Matrix& dy, const LayerNormCache& cache, const Vector& gain, Vector* dgain,
                          Vector* dbias);

// tanh approximation of GELU
Matrix gelu_forward(const Matrix& x);
Matrix gelu_backward(const Matrix& dy, const Matrix& x);

void softmax_rows_inplace(Matrix& x);
Matrix softmax_rows_backward(const Matrix& dy, const Matrix& y);

/// y = x W^T, W stored (out x in).
inline Matrix linear_forward(const Matrix& x, const Matrix& w) { return x * w.transpose(); }
/// Returns dx; accumulates dW when non-null.
Matrix linear_backward(const Matrix& dy, const Matrix& x, const Matrix& w, Matrix* dw);

struct AttentionCache {
  std::vector<Matrix> probs;  // one (T x T) lower-triangular matrix per head
};

/// Causal multi-head scaled dot-product attention over a single sequence.
Matrix causal_attention_forward(const Matrix& q, const Matrix& k, const Matrix& v, int n_heads,
                                AttentionCache* cache);
void causal_attention_backward(const Matrix& dout, const Matrix& q, const Matrix& k, const Matrix& v,
                               int n_heads, const AttentionCache& cache, Matrix& dq, Matrix& dk, Matrix& dv);

Matrix embedding_forward(const Matrix& table, std::span<const int> ids);
void embedding_backward(const Matrix& dy, std::span<const int> ids, Matrix& dtable);

/// Summed token cross-entropy. Targets < 0 are ignored. Writes d(loss)/d(logits)
/// when `dlogits` is non-null.
double cross_entropy(const Matrix& logits, std::span<const int> targets, Matrix* dlogits);

/// Row-wise log-softmax.
Matrix log_softmax_rows(const Matrix& logits);

}  // namespace nse::ops

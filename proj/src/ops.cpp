#include "nse/ops.hpp"

#include <cmath>
#include <numbers>

namespace nse::ops {
namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

}  // namespace

Matrix layernorm_forward(const Matrix& x, const Vector& gain, const Vector& bias, LayerNormCache* cache) {
  const auto n = x.cols();
  Vector mean = x.rowwise().mean();
  Matrix centered = x.colwise() - mean;
  Vector var = centered.rowwise().squaredNorm() / static_cast<double>(n);
  Vector rstd = (var.array() + kLayerNormEps).rsqrt();
  Matrix normalized = rstd.asDiagonal() * centered;
  Matrix y = (normalized * gain.asDiagonal()).rowwise() + bias.transpose();
  if (cache) {
    cache->normalized = std::move(normalized);
    cache->rstd = std::move(rstd);
  }
  return y;
}

Matrix layernorm_backward(const Matrix& dy, const LayerNormCache& cache, const Vector& gain, Vector* dgain,
                          Vector* dbias) {
  const double n = static_cast<double>(dy.cols());
  if (dgain) *dgain += (dy.cwiseProduct(cache.normalized)).colwise().sum().transpose();
  if (dbias) *dbias += dy.colwise().sum().transpose();
  Matrix dn = dy * gain.asDiagonal();
  Vector mean_dn = dn.rowwise().sum() / n;
  Vector mean_dn_n = dn.cwiseProduct(cache.normalized).rowwise().sum() / n;
  Matrix dx = dn.colwise() - mean_dn;
  dx -= mean_dn_n.asDiagonal() * cache.normalized;
  return cache.rstd.asDiagonal() * dx;
}

Matrix gelu_forward(const Matrix& x) {
  return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v))); });
}

Matrix gelu_backward(const Matrix& dy, const Matrix& x) {
  Matrix d = x.unaryExpr([](double v) {
    double u = kGeluC * (v + kGeluA * v * v * v);
    double t = std::tanh(u);
    double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
    return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
  });
  return dy.cwiseProduct(d);
}

void softmax_rows_inplace(Matrix& x) {
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double m = x.row(i).maxCoeff();
    x.row(i) = (x.row(i).array() - m).exp();
    x.row(i) /= x.row(i).sum();
  }
}

Matrix softmax_rows_backward(const Matrix& dy, const Matrix& y) {
  Vector dot = dy.cwiseProduct(y).rowwise().sum();
  return y.cwiseProduct(dy.colwise() - dot);
}

Matrix linear_backward(const Matrix& dy, const Matrix& x, const Matrix& w, Matrix* dw) {
  if (dw) dw->noalias() += dy.transpose() * x;
  return dy * w;
}

Matrix causal_attention_forward(const Matrix& q, const Matrix& k, const Matrix& v, int n_heads,
                                AttentionCache* cache) {
  const auto t = q.rows();
  const auto d = q.cols();
  const auto hd = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Matrix out(t, d);
  if (cache) cache->probs.assign(static_cast<std::size_t>(n_heads), Matrix());
  for (int h = 0; h < n_heads; ++h) {
    auto qh = q.middleCols(h * hd, hd);
    auto kh = k.middleCols(h * hd, hd);
    auto vh = v.middleCols(h * hd, hd);
    Matrix scores = (qh * kh.transpose()) * scale;
    for (Eigen::Index i = 0; i < t; ++i)
      for (Eigen::Index j = i + 1; j < t; ++j) scores(i, j) = -std::numeric_limits<double>::infinity();
    softmax_rows_inplace(scores);
    out.middleCols(h * hd, hd).noalias() = scores * vh;
    if (cache) cache->probs[static_cast<std::size_t>(h)] = std::move(scores);
  }
  return out;
}

void causal_attention_backward(const Matrix& dout, const Matrix& q, const Matrix& k, const Matrix& v,
                               int n_heads, const AttentionCache& cache, Matrix& dq, Matrix& dk, Matrix& dv) {
  const auto d = q.cols();
  const auto hd = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  dq.setZero(q.rows(), d);
  dk.setZero(k.rows(), d);
  dv.setZero(v.rows(), d);
  for (int h = 0; h < n_heads; ++h) {
    const Matrix& p = cache.probs[static_cast<std::size_t>(h)];
    auto douth = dout.middleCols(h * hd, hd);
    dv.middleCols(h * hd, hd).noalias() = p.transpose() * douth;
    Matrix dp = douth * v.middleCols(h * hd, hd).transpose();
    // Masked entries have p == 0 and therefore contribute nothing.
    Matrix ds = softmax_rows_backward(dp, p) * scale;
    dq.middleCols(h * hd, hd).noalias() = ds * k.middleCols(h * hd, hd);
    dk.middleCols(h * hd, hd).noalias() = ds.transpose() * q.middleCols(h * hd, hd);
  }
}

Matrix embedding_forward(const Matrix& table, std::span<const int> ids) {
  Matrix out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = table.row(ids[i]);
  return out;
}

void embedding_backward(const Matrix& dy, std::span<const int> ids, Matrix& dtable) {
  for (std::size_t i = 0; i < ids.size(); ++i) dtable.row(ids[i]) += dy.row(static_cast<Eigen::Index>(i));
}

Matrix log_softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    double m = logits.row(i).maxCoeff();
    double lse = m + std::log((logits.row(i).array() - m).exp().sum());
    out.row(i) = logits.row(i).array() - lse;
  }
  return out;
}

double cross_entropy(const Matrix& logits, std::span<const int> targets, Matrix* dlogits) {
  if (dlogits) dlogits->setZero(logits.rows(), logits.cols());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    int target = targets[static_cast<std::size_t>(i)];
    if (target < 0) continue;
    double m = logits.row(i).maxCoeff();
    RowVector e = (logits.row(i).array() - m).exp();
    double z = e.sum();
    loss += -(logits(i, target) - m - std::log(z));
    if (dlogits) {
      dlogits->row(i) = e / z;
      (*dlogits)(i, target) -= 1.0;
    }
  }
  return loss;
}

}  // namespace nse::ops

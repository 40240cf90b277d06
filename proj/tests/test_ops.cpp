#include <doctest.h>

#include "support.hpp"

using namespace nse;

namespace {

constexpr double kTol = 1e-4;

Matrix reshape(const Vector& x, Eigen::Index rows, Eigen::Index cols) {
  return Eigen::Map<const Matrix>(x.data(), rows, cols);
}

Vector flatten(const Matrix& m) { return Eigen::Map<const Vector>(m.data(), m.size()); }

// Scalar probe L = sum(probe .* y) turns a matrix-valued kernel into a
// function grad_check can handle.
struct Sampled {
  Matrix weights;
  double operator()(const Matrix& y) const { return weights.cwiseProduct(y).sum(); }
};

}  // namespace

TEST_CASE("layernorm gradients") {
  Rng rng(1);
  const int t = 3, d = 6;
  Matrix x0 = test::random_matrix(t, d, rng);
  Vector gain = Vector::Ones(d) + 0.3 * test::random_matrix(d, 1, rng);
  Vector bias = test::random_matrix(d, 1, rng);
  Sampled probe{test::random_matrix(t, d, rng)};

  GradFn wrt_x = [&](const Vector& x, Vector* g) {
    ops::LayerNormCache cache;
    Matrix y = ops::layernorm_forward(reshape(x, t, d), gain, bias, &cache);
    if (g) *g = flatten(ops::layernorm_backward(probe.weights, cache, gain, nullptr, nullptr));
    return probe(y);
  };
  CHECK(grad_check(wrt_x, flatten(x0), 1e-5) <= kTol);

  GradFn wrt_gain = [&](const Vector& gv, Vector* g) {
    ops::LayerNormCache cache;
    Matrix y = ops::layernorm_forward(x0, gv, bias, &cache);
    if (g) {
      Vector dg = Vector::Zero(d);
      ops::layernorm_backward(probe.weights, cache, gv, &dg, nullptr);
      *g = dg;
    }
    return probe(y);
  };
  CHECK(grad_check(wrt_gain, gain, 1e-5) <= kTol);

  GradFn wrt_bias = [&](const Vector& bv, Vector* g) {
    ops::LayerNormCache cache;
    Matrix y = ops::layernorm_forward(x0, gain, bv, &cache);
    if (g) {
      Vector db = Vector::Zero(d);
      ops::layernorm_backward(probe.weights, cache, gain, nullptr, &db);
      *g = db;
    }
    return probe(y);
  };
  CHECK(grad_check(wrt_bias, bias, 1e-5) <= kTol);
}

TEST_CASE("layernorm output statistics") {
  Rng rng(2);
  Matrix x = 5.0 * test::random_matrix(4, 8, rng);
  Matrix y = ops::layernorm_forward(x, Vector::Ones(8), Vector::Zero(8), nullptr);
  for (int i = 0; i < 4; ++i) {
    CHECK(std::abs(y.row(i).mean()) < 1e-12);
    CHECK(y.row(i).squaredNorm() / 8 == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("gelu gradients and values") {
  Rng rng(3);
  Matrix x0 = 2.0 * test::random_matrix(4, 5, rng);
  Sampled probe{test::random_matrix(4, 5, rng)};
  GradFn f = [&](const Vector& x, Vector* g) {
    Matrix xm = reshape(x, 4, 5);
    if (g) *g = flatten(ops::gelu_backward(probe.weights, xm));
    return probe(ops::gelu_forward(xm));
  };
  CHECK(grad_check(f, flatten(x0), 1e-5) <= kTol);

  Matrix pts(1, 3);
  pts << 0.0, 1.0, -1.0;
  Matrix y = ops::gelu_forward(pts);
  CHECK(y(0, 0) == 0.0);
  // tanh form evaluated by hand
  CHECK(y(0, 1) == doctest::Approx(0.8411919906082768).epsilon(1e-12));
  CHECK(y(0, 2) == doctest::Approx(-0.15880800939172324).epsilon(1e-12));
}

TEST_CASE("softmax gradients") {
  Rng rng(4);
  Matrix x0 = test::random_matrix(3, 5, rng);
  Sampled probe{test::random_matrix(3, 5, rng)};
  GradFn f = [&](const Vector& x, Vector* g) {
    Matrix y = reshape(x, 3, 5);
    ops::softmax_rows_inplace(y);
    if (g) *g = flatten(ops::softmax_rows_backward(probe.weights, y));
    return probe(y);
  };
  CHECK(grad_check(f, flatten(x0), 1e-5) <= kTol);

  Matrix y = x0;
  ops::softmax_rows_inplace(y);
  for (int i = 0; i < 3; ++i) CHECK(y.row(i).sum() == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("linear gradients") {
  Rng rng(5);
  Matrix x0 = test::random_matrix(3, 4, rng);
  Matrix w0 = test::random_matrix(6, 4, rng);
  Sampled probe{test::random_matrix(3, 6, rng)};
  GradFn wrt_x = [&](const Vector& x, Vector* g) {
    Matrix xm = reshape(x, 3, 4);
    if (g) *g = flatten(ops::linear_backward(probe.weights, xm, w0, nullptr));
    return probe(ops::linear_forward(xm, w0));
  };
  CHECK(grad_check(wrt_x, flatten(x0), 1e-5) <= kTol);
  GradFn wrt_w = [&](const Vector& w, Vector* g) {
    Matrix wm = reshape(w, 6, 4);
    if (g) {
      Matrix dw = Matrix::Zero(6, 4);
      ops::linear_backward(probe.weights, x0, wm, &dw);
      *g = flatten(dw);
    }
    return probe(ops::linear_forward(x0, wm));
  };
  CHECK(grad_check(wrt_w, flatten(w0), 1e-5) <= kTol);
}

TEST_CASE("causal attention gradients") {
  Rng rng(6);
  const int t = 4, d = 8, heads = 2;
  Matrix q0 = test::random_matrix(t, d, rng), k0 = test::random_matrix(t, d, rng), v0 = test::random_matrix(t, d, rng);
  Sampled probe{test::random_matrix(t, d, rng)};
  auto run = [&](const Matrix& q, const Matrix& k, const Matrix& v, int which, Vector* g) {
    ops::AttentionCache cache;
    Matrix y = ops::causal_attention_forward(q, k, v, heads, &cache);
    if (g) {
      Matrix dq, dk, dv;
      ops::causal_attention_backward(probe.weights, q, k, v, heads, cache, dq, dk, dv);
      *g = flatten(which == 0 ? dq : which == 1 ? dk : dv);
    }
    return probe(y);
  };
  GradFn fq = [&](const Vector& x, Vector* g) { return run(reshape(x, t, d), k0, v0, 0, g); };
  GradFn fk = [&](const Vector& x, Vector* g) { return run(q0, reshape(x, t, d), v0, 1, g); };
  GradFn fv = [&](const Vector& x, Vector* g) { return run(q0, k0, reshape(x, t, d), 2, g); };
  CHECK(grad_check(fq, flatten(q0), 1e-5) <= kTol);
  CHECK(grad_check(fk, flatten(k0), 1e-5) <= kTol);
  CHECK(grad_check(fv, flatten(v0), 1e-5) <= kTol);
}

TEST_CASE("causal attention ignores later positions") {
  Rng rng(7);
  Matrix q = test::random_matrix(5, 8, rng), k = test::random_matrix(5, 8, rng), v = test::random_matrix(5, 8, rng);
  Matrix y = ops::causal_attention_forward(q, k, v, 2, nullptr);
  k.row(4).setRandom();
  v.row(4).setRandom();
  Matrix y2 = ops::causal_attention_forward(q, k, v, 2, nullptr);
  CHECK(y.topRows(4) == y2.topRows(4));
  // first position attends only to itself
  CHECK((y.row(0) - v.row(0)).norm() == 0.0);
}

TEST_CASE("embedding gradients") {
  Rng rng(8);
  Matrix table0 = test::random_matrix(5, 3, rng);
  std::vector<int> ids{1, 3, 1, 0};
  Sampled probe{test::random_matrix(4, 3, rng)};
  GradFn f = [&](const Vector& x, Vector* g) {
    Matrix table = reshape(x, 5, 3);
    if (g) {
      Matrix dt = Matrix::Zero(5, 3);
      ops::embedding_backward(probe.weights, ids, dt);
      *g = flatten(dt);
    }
    return probe(ops::embedding_forward(table, ids));
  };
  CHECK(grad_check(f, flatten(table0), 1e-5) <= kTol);
}

TEST_CASE("cross-entropy gradients and values") {
  Rng rng(9);
  Matrix logits0 = test::random_matrix(3, 5, rng);
  std::vector<int> targets{2, -1, 4};
  GradFn f = [&](const Vector& x, Vector* g) {
    Matrix dl;
    double loss = ops::cross_entropy(reshape(x, 3, 5), targets, g ? &dl : nullptr);
    if (g) *g = flatten(dl);
    return loss;
  };
  CHECK(grad_check(f, flatten(logits0), 1e-5) <= kTol);

  Matrix uniform = Matrix::Zero(2, 4);
  std::vector<int> t2{0, 3};
  CHECK(ops::cross_entropy(uniform, t2, nullptr) == doctest::Approx(2.0 * std::log(4.0)).epsilon(1e-14));

  Matrix ls = ops::log_softmax_rows(logits0);
  for (int i = 0; i < 3; ++i) CHECK(ls.row(i).array().exp().sum() == doctest::Approx(1.0).epsilon(1e-14));
}

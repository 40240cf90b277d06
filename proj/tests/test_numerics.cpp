#include <doctest.h>

#include <cmath>
#include <sstream>

#include "support.hpp"

using namespace nse;

namespace {

// Gaussian elimination with partial pivoting on a dense copy; shares nothing
// with the Cholesky path.
Matrix gauss_solve(const Matrix& a_in, const Matrix& b_in) {
  const int n = static_cast<int>(a_in.rows());
  const int m = static_cast<int>(b_in.cols());
  std::vector<std::vector<double>> a(n, std::vector<double>(n + m));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) a[i][j] = a_in(i, j);
    for (int j = 0; j < m; ++j) a[i][n + j] = b_in(i, j);
  }
  for (int col = 0; col < n; ++col) {
    int piv = col;
    for (int r = col + 1; r < n; ++r)
      if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
    std::swap(a[col], a[piv]);
    for (int r = col + 1; r < n; ++r) {
      double f = a[r][col] / a[col][col];
      for (int j = col; j < n + m; ++j) a[r][j] -= f * a[col][j];
    }
  }
  Matrix x(n, m);
  for (int j = 0; j < m; ++j)
    for (int i = n - 1; i >= 0; --i) {
      double s = a[i][n + j];
      for (int k = i + 1; k < n; ++k) s -= a[i][k] * x(k, j);
      x(i, j) = s / a[i][i];
    }
  return x;
}

Matrix with_condition(int n, double cond, Rng& rng) {
  Matrix q = Eigen::HouseholderQR<Matrix>(test::random_matrix(n, n, rng)).householderQ();
  Vector ev(n);
  for (int i = 0; i < n; ++i) ev(i) = std::pow(cond, -static_cast<double>(i) / (n - 1));
  Matrix c = q * ev.asDiagonal() * q.transpose();
  return 0.5 * (c + c.transpose());
}

}  // namespace

TEST_CASE("spd_solve on the identity") {
  Matrix b(2, 1);
  b << 3, 4;
  auto r = spd_solve(Matrix::Identity(2, 2), b);
  CHECK(r.solution(0, 0) == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(r.solution(1, 0) == doctest::Approx(4.0).epsilon(1e-15));
  CHECK(r.jitter_applied == 0.0);
}

TEST_CASE("spd_solve on a diagonal matrix") {
  Matrix c(2, 2);
  c << 2, 0, 0, 1;
  Matrix b(2, 1);
  b << 4, 3;
  auto r = spd_solve(c, b);
  CHECK(r.solution(0, 0) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(r.solution(1, 0) == doctest::Approx(3.0).epsilon(1e-15));
}

TEST_CASE("spd_solve agrees with Gaussian elimination") {
  Rng rng(101);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix c = test::random_spd(6, rng);
    Matrix b = test::random_matrix(6, 3, rng);
    Matrix x = spd_solve(c, b).solution;
    Matrix oracle = gauss_solve(c, b);
    CHECK((x - oracle).norm() / oracle.norm() <= 1e-10);
  }
}

TEST_CASE("spd_solve residual bound up to condition number 1e8") {
  Rng rng(202);
  for (double cond : {1.0, 1e2, 1e4, 1e6, 1e8}) {
    for (int n : {2, 5, 12}) {
      Matrix c = with_condition(n, cond, rng);
      Matrix b = test::random_matrix(n, 2, rng);
      auto r = spd_solve(c, b);
      Matrix shifted = c;
      shifted.diagonal().array() += r.jitter_applied;
      CAPTURE(cond);
      CAPTURE(n);
      CHECK((shifted * r.solution - b).norm() / b.norm() <= 1e-8);
    }
  }
}

// At condition 1e10 the correctly rounded exact solution already misses 1e-8,
// so the solver is held to that floor instead.
TEST_CASE("spd_solve residual at condition number 1e10 tracks the double rounding floor") {
  using LMatrix = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
  auto residual = [](const Matrix& c, const Matrix& x, const Matrix& b) {
    LMatrix r = c.cast<long double>() * x.cast<long double>() - b.cast<long double>();
    return static_cast<double>(r.norm() / b.cast<long double>().norm());
  };
  Rng rng(303);
  for (int n : {2, 5, 12}) {
    Matrix c = with_condition(n, 1e10, rng);
    Matrix b = test::random_matrix(n, 2, rng);
    auto r = spd_solve(c, b);
    CHECK(r.jitter_applied == 0.0);
    Matrix rounded = LMatrix(c.cast<long double>().llt().solve(b.cast<long double>())).cast<double>();
    double floor = residual(c, rounded, b);
    CAPTURE(n);
    CAPTURE(floor);
    CHECK(floor > 1e-8);
    CHECK(residual(c, r.solution, b) <= 4.0 * floor);
  }
}

TEST_CASE("spd_solve jitter on a singular matrix") {
  Matrix c(2, 2);
  c << 1, 0, 0, 0;
  Matrix b(2, 1);
  b << 1, 0;
  auto r = spd_solve(c, b);
  CHECK(r.jitter_applied > 0.0);
  CHECK(r.jitter_applied <= 1e-4 * c.trace() / 2);
  CHECK(r.solution(0, 0) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("spd_solve errors") {
  Matrix b = Matrix::Ones(2, 1);
  CHECK_THROWS_AS(spd_solve(Matrix::Ones(2, 3), b), InputError);
  Matrix asym(2, 2);
  asym << 1, 0.5, 0, 1;
  CHECK_THROWS_AS(spd_solve(asym, b), InputError);
  CHECK_THROWS_AS(spd_solve(Matrix::Identity(3, 3), b), InputError);
  CHECK_THROWS_AS(spd_solve(-Matrix::Identity(2, 2), b), SingularityError);
  Matrix indefinite(2, 2);
  indefinite << 1, 0, 0, -1;
  CHECK_THROWS_AS(spd_solve(indefinite, b), SingularityError);
}

TEST_CASE("grad_check on a quadratic") {
  GradFn f = [](const Vector& x, Vector* g) {
    if (g) *g = 2.0 * x;
    return x.squaredNorm();
  };
  Vector x(2);
  x << 1, 2;
  Vector g(2);
  f(x, &g);
  CHECK(g(0) == 2.0);
  CHECK(g(1) == 4.0);
  CHECK(grad_check(f, x, 1e-4) <= 1e-8);
}

TEST_CASE("grad_check on a constant") {
  GradFn f = [](const Vector& x, Vector* g) {
    if (g) *g = Vector::Zero(x.size());
    return 3.5;
  };
  CHECK(grad_check(f, Vector::Ones(4), 1e-4) <= 1e-8);
}

TEST_CASE("grad_check flags a wrong gradient and bad inputs") {
  GradFn wrong = [](const Vector& x, Vector* g) {
    if (g) *g = x;
    return x.squaredNorm();
  };
  CHECK(grad_check(wrong, Vector::Ones(3), 1e-4) > 0.3);
  GradFn nan = [](const Vector&, Vector* g) {
    if (g) *g = Vector::Zero(1);
    return std::nan("");
  };
  CHECK_THROWS_AS(grad_check(nan, Vector::Ones(1), 1e-4), NumericError);
  CHECK_THROWS_AS(grad_check(wrong, Vector::Ones(1), 1e-2), InputError);
}

TEST_CASE("Rng streams are reproducible") {
  Rng a(7), b(7), c(8);
  for (int i = 0; i < 100; ++i) {
    auto x = a.next_u64();
    CHECK(x == b.next_u64());
    CHECK(x != c.next_u64());
  }
  Rng f1 = Rng(7).fork(3), f2 = Rng(7).fork(3), f3 = Rng(7).fork(4);
  CHECK(f1.next_u64() == f2.next_u64());
  CHECK(Rng(7).fork(3).next_u64() != f3.next_u64());
}

TEST_CASE("Rng output is pinned") {
  // Pinned values; a change means every seeded artifact changes too.
  Rng r(7);
  std::ostringstream s;
  for (int i = 0; i < 3; ++i) s << hex64(r.next_u64()) << ' ';
  CHECK(s.str() == "e5c7dec29be9fc21 8ac609d866d03068 694213097b57901b ");
}

TEST_CASE("Rng distributions") {
  Rng r(3);
  double sum = 0.0, sq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    double u = r.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    double z = r.normal();
    sum += z;
    sq += z * z;
  }
  CHECK(std::abs(sum / n) < 0.05);
  CHECK(std::abs(sq / n - 1.0) < 0.05);
  std::vector<int> counts(5, 0);
  for (int i = 0; i < 5000; ++i) ++counts[r.below(5)];
  for (int c : counts) CHECK(std::abs(c - 1000) < 150);
  CHECK_THROWS_AS(r.below(0), InputError);
}

TEST_CASE("matrix serialization round trip") {
  Rng rng(5);
  Matrix m = test::random_matrix(3, 7, rng);
  std::stringstream buf;
  write_matrix(buf, m);
  CHECK(buf.str().size() == 16 + 8 * 21);
  CHECK(buf.str().substr(0, 8) == "NSEMAT01");
  Matrix back = read_matrix(buf);
  CHECK(checksum(back) == checksum(m));

  std::stringstream bad("NSEMAT02xxxxxxxx");
  CHECK_THROWS_AS(read_matrix(bad), InputError);
  std::string truncated = buf.str().substr(0, 40);
  std::stringstream t(truncated);
  CHECK_THROWS_AS(read_matrix(t), InputError);
}

TEST_CASE("checksum sees single-bit changes") {
  Matrix m = Matrix::Zero(4, 4);
  auto h = checksum(m);
  m(2, 3) = 1e-300;
  CHECK(checksum(m) != h);
  CHECK(checksum(Matrix::Zero(2, 8)) != checksum(Matrix::Zero(4, 4)));
}

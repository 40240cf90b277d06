#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace nse {

// Dense double-precision storage used everywhere. Activations are laid out
// one token per row; weight matrices follow the (out x in) convention.
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

// Error hierarchy. The CLI maps these onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class SingularityError : public NumericError {
 public:
  using NumericError::NumericError;
};

class StateError : public Error {
 public:
  using Error::Error;
};

class CacheError : public Error {
 public:
  using Error::Error;
};

struct SpdSolveResult {
  Matrix solution;
  double jitter_applied = 0.0;
};

/// Solves C X = B for symmetric positive (semi)definite C.
///
/// A Cholesky factorization is attempted first. On failure the diagonal is
/// shifted by eps * trace(C) / n with eps doubling from 1e-10; a shift beyond
/// 1e-4 * trace(C) / n raises SingularityError. One step of iterative
/// refinement is applied against the (possibly shifted) system.
SpdSolveResult spd_solve(const Matrix& c, const Matrix& b);

/// Largest |C - C^T| entry relative to max(1, max|C|).
double asymmetry(const Matrix& c);

bool all_finite(const Matrix& m);

/// Relative gradient check by central differences.
///
/// `f` returns the scalar value and, when `grad` is non-null, writes the
/// analytic gradient. Returns max_i |g_i - fd_i| / (|g_i| + |fd_i| + 1e-12).
using GradFn = std::function<double(const Vector& x, Vector* grad)>;
double grad_check(const GradFn& f, const Vector& x, double h);

/// Counter-based generator: the i-th draw is a pure function of
/// (seed, stream, i), so streams are identical on every platform.
/// Distribution helpers are implemented here instead of <random> because the
/// standard distributions are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) : seed_(seed), stream_(stream) {}

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Standard normal via Box-Muller.
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  /// Independent generator derived from this one's seed.
  Rng fork(std::uint64_t stream) const;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
};

Matrix random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng);

// Matrix serialization: 16-byte little-endian header followed by row-major
// float64 data.
//   bytes 0..7   magic "NSEMAT01"
//   bytes 8..11  rows (uint32)
//   bytes 12..15 cols (uint32)
void write_matrix(std::ostream& out, const Matrix& m);
Matrix read_matrix(std::istream& in);
void save_matrix(const std::string& path, const Matrix& m);
Matrix load_matrix(const std::string& path);

/// FNV-1a over the raw bytes of the matrix entries, in column-major order.
std::uint64_t checksum(const Matrix& m, std::uint64_t seed = 0xcbf29ce484222325ull);
std::uint64_t hash_bytes(const void* data, std::size_t n, std::uint64_t seed = 0xcbf29ce484222325ull);
std::string hex64(std::uint64_t v);

}  // namespace nse

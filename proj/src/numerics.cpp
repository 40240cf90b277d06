#include "nse/numerics.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <sstream>

namespace nse {
namespace {

constexpr char kMatrixMagic[8] = {'N', 'S', 'E', 'M', 'A', 'T', '0', '1'};

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw InputError("matrix stream truncated in header");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

void put_f64(std::ostream& out, double x) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(x);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 8);
}

double get_f64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw InputError("matrix stream truncated in data");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

double asymmetry(const Matrix& c) {
  if (c.rows() != c.cols()) return std::numeric_limits<double>::infinity();
  if (c.size() == 0) return 0.0;
  double scale = std::max(1.0, c.cwiseAbs().maxCoeff());
  return (c - c.transpose()).cwiseAbs().maxCoeff() / scale;
}

bool all_finite(const Matrix& m) { return m.allFinite(); }

SpdSolveResult spd_solve(const Matrix& c, const Matrix& b) {
  if (c.rows() != c.cols()) throw InputError("spd_solve: matrix is not square");
  if (b.rows() != c.rows()) throw InputError("spd_solve: right-hand side has wrong row count");
  if (!c.allFinite() || !b.allFinite()) throw NumericError("spd_solve: non-finite input");
  if (asymmetry(c) > 1e-10) throw InputError("spd_solve: matrix is not symmetric");

  const auto n = c.rows();
  SpdSolveResult result;
  if (n == 0) {
    result.solution = Matrix(0, b.cols());
    return result;
  }

  const double mean_diag = c.trace() / static_cast<double>(n);
  Matrix shifted = c;
  Eigen::LLT<Matrix> llt(shifted);
  double eps = 1e-10;
  while (llt.info() != Eigen::Success) {
    double jitter = eps * std::abs(mean_diag);
    if (!(mean_diag > 0.0) || eps > 1e-4) {
      std::ostringstream msg;
      msg << "spd_solve: factorization failed with jitter up to " << result.jitter_applied;
      throw SingularityError(msg.str());
    }
    shifted = c;
    shifted.diagonal().array() += jitter;
    result.jitter_applied = jitter;
    llt.compute(shifted);
    eps *= 2.0;
  }

  Matrix x = llt.solve(b);
  Matrix r = b - shifted * x;
  x += llt.solve(r);
  if (!x.allFinite()) throw NumericError("spd_solve: non-finite solution");
  result.solution = std::move(x);
  return result;
}

double grad_check(const GradFn& f, const Vector& x, double h) {
  if (!(h >= 1e-6 && h <= 1e-3)) throw InputError("grad_check: step outside [1e-6, 1e-3]");
  Vector analytic = Vector::Zero(x.size());
  double f0 = f(x, &analytic);
  if (!std::isfinite(f0)) throw NumericError("grad_check: non-finite function value");

  double worst = 0.0;
  Vector xp = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    xp(i) = x(i) + h;
    double fp = f(xp, nullptr);
    xp(i) = x(i) - h;
    double fm = f(xp, nullptr);
    xp(i) = x(i);
    if (!std::isfinite(fp) || !std::isfinite(fm)) throw NumericError("grad_check: non-finite function value");
    double fd = (fp - fm) / (2.0 * h);
    double err = std::abs(analytic(i) - fd) / (std::abs(analytic(i)) + std::abs(fd) + 1e-12);
    worst = std::max(worst, err);
  }
  return worst;
}

std::uint64_t Rng::next_u64() {
  std::uint64_t key = mix64(seed_ ^ mix64(stream_ + 0x632be59bd9b4e019ull));
  return mix64(key + (counter_++) * 0x9e3779b97f4a7c15ull);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  double u1 = uniform();
  double u2 = uniform();
  // 1 - u1 lies in (0, 1], keeping the log finite.
  return std::sqrt(-2.0 * std::log(1.0 - u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw InputError("Rng::below: empty range");
  std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return v % n;
}

Rng Rng::fork(std::uint64_t stream) const {
  return Rng(mix64(seed_ + 0x2545f4914f6cdd1dull * (stream + 1)), stream_ ^ (stream * 0xd6e8feb86659fd93ull));
}

Matrix random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  // Filled row-major so the draw order matches the serialized layout.
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = stddev * rng.normal();
  return m;
}

void write_matrix(std::ostream& out, const Matrix& m) {
  if (m.rows() > std::numeric_limits<std::uint32_t>::max() || m.cols() > std::numeric_limits<std::uint32_t>::max())
    throw InputError("write_matrix: dimensions exceed 32 bits");
  out.write(kMatrixMagic, sizeof(kMatrixMagic));
  put_u32(out, static_cast<std::uint32_t>(m.rows()));
  put_u32(out, static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) put_f64(out, m(i, j));
  if (!out) throw Error("write_matrix: stream failure");
}

Matrix read_matrix(std::istream& in) {
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMatrixMagic, sizeof(magic)) != 0) throw InputError("read_matrix: bad magic");
  std::uint32_t rows = get_u32(in);
  std::uint32_t cols = get_u32(in);
  Matrix m(rows, cols);
  for (std::uint32_t i = 0; i < rows; ++i)
    for (std::uint32_t j = 0; j < cols; ++j) m(i, j) = get_f64(in);
  return m;
}

void save_matrix(const std::string& path, const Matrix& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  write_matrix(out, m);
}

Matrix load_matrix(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  return read_matrix(in);
}

std::uint64_t hash_bytes(const void* data, std::size_t n, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t checksum(const Matrix& m, std::uint64_t seed) {
  std::uint64_t dims[2] = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  std::uint64_t h = hash_bytes(dims, sizeof(dims), seed);
  return hash_bytes(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()), h);
}

std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

}  // namespace nse

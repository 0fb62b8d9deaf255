#include "gradctrl/numeric.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "gradctrl/errors.hpp"

namespace gradctrl {

namespace {

std::uint64_t splitmix64(std::uint64_t& x) noexcept {
  std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept { return (x << k) | (x >> (64 - k)); }

void require_same_size(std::size_t a, std::size_t b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": length mismatch (" + std::to_string(a) + " vs " +
                         std::to_string(b) + ")");
  }
}

}  // namespace

Vector Vector::basis(std::size_t n, std::size_t i) {
  if (i >= n) {
    throw IndexError("basis index " + std::to_string(i) + " out of range for length " +
                     std::to_string(n));
  }
  Vector v(n);
  v[i] = 1.0;
  return v;
}

bool Vector::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

bool Vector::all_zero() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return x == 0.0; });
}

Vector& Vector::operator+=(const Vector& other) {
  require_same_size(size(), other.size(), "vector add");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Vector& Vector::operator-=(const Vector& other) {
  require_same_size(size(), other.size(), "vector subtract");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Vector& Vector::operator*=(double scale) noexcept {
  for (double& x : data_) x *= scale;
  return *this;
}

Vector operator+(Vector a, const Vector& b) { return a += b; }
Vector operator-(Vector a, const Vector& b) { return a -= b; }
Vector operator*(double scale, Vector v) { return v *= scale; }

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw DimensionError("matrix data length " + std::to_string(data_.size()) + " != " +
                         std::to_string(rows_) + "x" + std::to_string(cols_));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Vector Matrix::row_vector(std::size_t r) const {
  if (r >= rows_) {
    throw IndexError("row " + std::to_string(r) + " out of range for " + std::to_string(rows_) +
                     " rows");
  }
  auto values = row(r);
  return Vector(std::vector<double>(values.begin(), values.end()));
}

bool Matrix::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

double dot(std::span<const double> a, std::span<const double> b) {
  require_same_size(a.size(), b.size(), "dot");
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sum += a[i] * b[i];
  return sum;
}

double l2_norm(std::span<const double> a) noexcept {
  double sum = 0.0;
  for (double x : a) sum += x * x;
  return std::sqrt(sum);
}

Vector matvec(const Matrix& m, const Vector& v) {
  if (m.cols() != v.size()) {
    throw DimensionError("matvec: matrix has " + std::to_string(m.cols()) +
                         " columns but vector has length " + std::to_string(v.size()));
  }
  Vector out(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) out[r] = dot(m.row(r), v.span());
  return out;
}

Vector matvec_transposed(const Matrix& m, const Vector& v) {
  if (m.rows() != v.size()) {
    throw DimensionError("matvec_transposed: matrix has " + std::to_string(m.rows()) +
                         " rows but vector has length " + std::to_string(v.size()));
  }
  Vector out(m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double scale = v[r];
    auto row = m.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c) out[c] += scale * row[c];
  }
  return out;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                         std::to_string(b.rows()) + ")");
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      auto brow = b.row(k);
      auto orow = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

MeanStd mean_std(std::span<const double> xs) {
  if (xs.empty()) throw EmptyInputError("mean_std: empty input");
  const double n = static_cast<double>(xs.size());
  double sum = 0.0;
  for (double x : xs) sum += x;
  const double mean = sum / n;
  double sq = 0.0;
  for (double x : xs) sq += (x - mean) * (x - mean);
  return {mean, std::sqrt(sq / n)};
}

Rng::Rng(std::uint64_t seed) : seed_(seed) {
  std::uint64_t x = seed;
  for (auto& s : state_) s = splitmix64(x);
}

std::uint64_t Rng::next_u64() noexcept {
  const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
  const std::uint64_t t = state_[1] << 17;
  state_[2] ^= state_[0];
  state_[3] ^= state_[1];
  state_[1] ^= state_[2];
  state_[0] ^= state_[3];
  state_[2] ^= t;
  state_[3] = rotl(state_[3], 45);
  return result;
}

double Rng::uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t Rng::below(std::uint64_t n) noexcept {
  // Reject the low residue so every value in [0, n) is equally likely.
  const std::uint64_t threshold = (0 - n) % n;
  for (;;) {
    const std::uint64_t r = next_u64();
    if (r >= threshold) return r % n;
  }
}

double Rng::normal() noexcept {
  if (spare_normal_) {
    const double v = *spare_normal_;
    spare_normal_.reset();
    return v;
  }
  double u, v, s;
  do {
    u = 2.0 * uniform() - 1.0;
    v = 2.0 * uniform() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  const double factor = std::sqrt(-2.0 * std::log(s) / s);
  spare_normal_ = v * factor;
  return u * factor;
}

Rng Rng::split(std::uint64_t stream) const noexcept {
  std::uint64_t x = seed_ ^ (0xd1b54a32d192ed03ULL * (stream + 1));
  return Rng(splitmix64(x));
}

std::uint64_t derive_seed(std::uint64_t root, std::string_view stage) noexcept {
  // FNV-1a over the stage name, mixed with the root.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : stage) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::uint64_t x = root ^ h;
  return splitmix64(x);
}

Vector gaussian_sample(Rng& rng, std::size_t n) {
  if (n == 0) throw RangeError("gaussian_sample: n must be at least 1");
  Vector out(n);
  for (double& x : out) x = rng.normal();
  return out;
}

}  // namespace gradctrl

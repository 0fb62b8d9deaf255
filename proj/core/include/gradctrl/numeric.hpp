#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace gradctrl {

/// Dense real vector (64-bit). Houses latent codes and gradient directions.
class Vector {
 public:
  Vector() = default;
  explicit Vector(std::size_t n, double fill = 0.0) : data_(n, fill) {}
  Vector(std::initializer_list<double> values) : data_(values) {}
  explicit Vector(std::vector<double> values) : data_(std::move(values)) {}

  static Vector basis(std::size_t n, std::size_t i);

  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> span() noexcept { return data_; }
  std::span<const double> span() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  bool all_finite() const noexcept;
  bool all_zero() const noexcept;

  Vector& operator+=(const Vector& other);
  Vector& operator-=(const Vector& other);
  Vector& operator*=(double scale) noexcept;

  friend bool operator==(const Vector&, const Vector&) = default;

 private:
  std::vector<double> data_;
};

Vector operator+(Vector a, const Vector& b);
Vector operator-(Vector a, const Vector& b);
Vector operator*(double scale, Vector v);

/// Dense row-major matrix (64-bit).
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  /// Throws DimensionError unless data.size() == rows * cols.
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  Vector row_vector(std::size_t r) const;

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<const double> span() const noexcept { return data_; }

  bool all_finite() const noexcept;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

double dot(std::span<const double> a, std::span<const double> b);
inline double dot(const Vector& a, const Vector& b) { return dot(a.span(), b.span()); }

double l2_norm(std::span<const double> a) noexcept;
inline double l2_norm(const Vector& a) noexcept { return l2_norm(a.span()); }

/// m * v.
Vector matvec(const Matrix& m, const Vector& v);
/// transpose(m) * v.
Vector matvec_transposed(const Matrix& m, const Vector& v);
/// a * b.
Matrix matmul(const Matrix& a, const Matrix& b);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

/// Mean and population (divide-by-n) standard deviation.
MeanStd mean_std(std::span<const double> xs);

/// xoshiro256** seeded through splitmix64. The draw sequence depends only on
/// the seed, so experiment outputs are reproducible across platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() noexcept;
  /// Uniform on [0, 1) with 53 bits of resolution.
  double uniform() noexcept;
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n). Requires n > 0.
  std::uint64_t below(std::uint64_t n) noexcept;
  /// Standard normal draw (Marsaglia polar method).
  double normal() noexcept;

  /// Independent child generator for a numbered stream; does not advance *this.
  Rng split(std::uint64_t stream) const noexcept;

  template <typename T>
  void shuffle(std::vector<T>& items) noexcept {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[below(i)]);
    }
  }

 private:
  std::uint64_t seed_;
  std::array<std::uint64_t, 4> state_{};
  std::optional<double> spare_normal_;
};

/// Stable 64-bit seed for a named stage derived from a root seed.
std::uint64_t derive_seed(std::uint64_t root, std::string_view stage) noexcept;

/// n i.i.d. standard normal draws.
Vector gaussian_sample(Rng& rng, std::size_t n);

}  // namespace gradctrl

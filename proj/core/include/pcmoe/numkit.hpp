// Dense numeric kernels shared by every pcmoe module.
//
// Everything is 64-bit. Vectors are plain std::vector<double>; matrices are
// row-major and carry their shape. Masked logits use negative infinity.

#pragma once

#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace pcmoe {

using Vector = std::vector<double>;

/// Logit value that softmax maps to exactly zero probability.
inline constexpr double kMaskedLogit = -std::numeric_limits<double>::infinity();

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);
  static Matrix from_rows(const std::vector<Vector>& rows);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }

  const std::vector<double>& data() const noexcept { return data_; }
  std::vector<double>& data() noexcept { return data_; }

  std::string shape_string() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// m * v. Throws std::invalid_argument naming both shapes on mismatch.
Vector matvec(const Matrix& m, std::span<const double> v);

/// Numerically stable softmax. Entries equal to kMaskedLogit map to 0.
/// Throws std::invalid_argument("no unmasked logits") when everything is masked.
Vector softmax(std::span<const double> logits);

/// Indices of the k largest scores, ordered by descending score then
/// ascending index.
std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k);

/// Euclidean norm of a flat parameter sequence.
double magnitude(std::span<const double> x);

/// Index of the largest entry, lowest index on ties.
std::size_t argmax(std::span<const double> x);

bool all_finite(std::span<const double> x);

}  // namespace pcmoe

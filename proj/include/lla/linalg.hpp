#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

#include "lla/rng.hpp"

namespace lla {

// Row-major 2-D array of 32-bit floats.
class DenseMatrix {
public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, float fill = 0.0f)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<float> data);
  DenseMatrix(std::initializer_list<std::initializer_list<float>> rows);

  static DenseMatrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float &operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }

  friend bool operator==(const DenseMatrix &, const DenseMatrix &) = default;

private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

// Group-local and global permutations are index maps i -> p[i]. As a matrix,
// P(i, p[i]) = 1, so a row vector z maps to z*P with (z*P)[p[i]] = z[i].
using Permutation = std::vector<std::uint32_t>;

bool is_power_of_two(std::size_t n);
// Exact log2 of a power of two.
unsigned log2_exact(std::size_t n);

// Product with float accumulation in fixed (i, k, j) order. Rows are computed
// in parallel; each row is independent, so the result does not depend on the
// thread count.
DenseMatrix matmul(const DenseMatrix &a, const DenseMatrix &b);
// Single-threaded reference with the same accumulation order.
DenseMatrix matmul_serial(const DenseMatrix &a, const DenseMatrix &b);

DenseMatrix transpose(const DenseMatrix &m);

// Unscaled +-1 Sylvester-Hadamard matrix of order 2^k.
DenseMatrix sylvester_hadamard(unsigned k);

// Diagonal of the random sign matrix used by randomized_hadamard.
std::vector<float> hadamard_signs(std::size_t n, Seed seed);

// (1/sqrt(n)) * H_n * D with D = diag(hadamard_signs(n, seed)).
DenseMatrix randomized_hadamard(std::size_t n, Seed seed);

// In-place unnormalised Walsh-Hadamard transform; equals v * H_n (H_n is
// symmetric). n*log2(n) additions.
void fwht_inplace(std::span<float> v);
std::vector<float> fwht_apply(std::vector<float> v);

// Applies z -> z * H for H = randomized_hadamard(n, seed) to the first n
// columns of every row of m. Parallel over rows.
void rotate_rows(DenseMatrix &m, std::size_t n, std::span<const float> signs);
void rotate_rows_serial(DenseMatrix &m, std::size_t n, std::span<const float> signs);
// Inverse of rotate_rows (z -> z * H^T).
void unrotate_rows(DenseMatrix &m, std::size_t n, std::span<const float> signs);

// max |M * M^T - I|.
double orthogonality_defect(const DenseMatrix &m);

DenseMatrix permutation_matrix(const Permutation &p);
bool is_permutation(std::span<const std::uint32_t> p);
Permutation identity_permutation(std::size_t n);
Permutation inverse(const Permutation &p);
// (outer o inner)(i) = outer[inner[i]].
Permutation compose(const Permutation &outer, const Permutation &inner);

// out[p[i]] = in[i]: the row-vector product with permutation_matrix(p).
template <typename T>
std::vector<T> apply_permutation(const Permutation &p, std::span<const T> in) {
  std::vector<T> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[p[i]] = in[i];
  }
  return out;
}

// Columns of m reordered so that column c of the result is column src[c] of m.
DenseMatrix gather_columns(const DenseMatrix &m, std::span<const std::uint32_t> src);
DenseMatrix gather_rows(const DenseMatrix &m, std::span<const std::uint32_t> src);

// max|a - ref| / max|ref|, the tolerance measure used across the project.
double max_relative_error(const DenseMatrix &a, const DenseMatrix &ref);
double max_abs(const DenseMatrix &m);

void require_finite(const DenseMatrix &m, const char *what);

} // namespace lla

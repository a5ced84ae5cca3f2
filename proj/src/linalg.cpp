#include "lla/linalg.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <string>

#include "lla/errors.hpp"

namespace lla {

namespace {

constexpr unsigned kMaxHadamardExponent = 14;

void check_product_shapes(const DenseMatrix &a, const DenseMatrix &b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " times " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

inline void product_row(const DenseMatrix &a, const DenseMatrix &b, std::size_t i,
                        std::span<float> out) {
  const auto arow = a.row(i);
  for (std::size_t k = 0; k < a.cols(); ++k) {
    const float aik = arow[k];
    const auto brow = b.row(k);
    for (std::size_t j = 0; j < b.cols(); ++j) {
      out[j] += aik * brow[j];
    }
  }
}

void rotate_one(std::span<float> v, std::span<const float> signs) {
  fwht_inplace(v);
  const float scale = 1.0f / std::sqrt(static_cast<float>(v.size()));
  for (std::size_t j = 0; j < v.size(); ++j) {
    v[j] *= scale * signs[j];
  }
}

void check_rotation(const DenseMatrix &m, std::size_t n, std::span<const float> signs) {
  if (!is_power_of_two(n)) {
    throw UnsupportedDimension("rotation size " + std::to_string(n) + " is not a power of two");
  }
  if (n > m.cols() || signs.size() != n) {
    throw ShapeError("rotation size exceeds matrix width or sign vector length");
  }
}

} // namespace

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ShapeError("DenseMatrix: data length " + std::to_string(data_.size()) +
                     " does not match " + std::to_string(rows) + "x" + std::to_string(cols));
  }
}

DenseMatrix::DenseMatrix(std::initializer_list<std::initializer_list<float>> rows) {
  rows_ = rows.size();
  cols_ = rows_ ? rows.begin()->size() : 0;
  data_.reserve(rows_ * cols_);
  for (const auto &r : rows) {
    if (r.size() != cols_) {
      throw ShapeError("DenseMatrix: ragged initializer");
    }
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

DenseMatrix DenseMatrix::identity(std::size_t n) {
  DenseMatrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    m(i, i) = 1.0f;
  }
  return m;
}

bool is_power_of_two(std::size_t n) { return std::has_single_bit(n); }

unsigned log2_exact(std::size_t n) {
  if (!is_power_of_two(n)) {
    throw UnsupportedDimension(std::to_string(n) + " is not a power of two");
  }
  return static_cast<unsigned>(std::countr_zero(n));
}

DenseMatrix matmul(const DenseMatrix &a, const DenseMatrix &b) {
  check_product_shapes(a, b);
  DenseMatrix c(a.rows(), b.cols());
  const auto rows = static_cast<std::int64_t>(a.rows());
#pragma omp parallel for schedule(static) if (a.rows() * a.cols() * b.cols() > 32768)
  for (std::int64_t i = 0; i < rows; ++i) {
    product_row(a, b, static_cast<std::size_t>(i), c.row(static_cast<std::size_t>(i)));
  }
  require_finite(c, "matmul");
  return c;
}

DenseMatrix matmul_serial(const DenseMatrix &a, const DenseMatrix &b) {
  check_product_shapes(a, b);
  DenseMatrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    product_row(a, b, i, c.row(i));
  }
  require_finite(c, "matmul");
  return c;
}

DenseMatrix transpose(const DenseMatrix &m) {
  DenseMatrix t(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      t(j, i) = m(i, j);
    }
  }
  return t;
}

DenseMatrix sylvester_hadamard(unsigned k) {
  if (k > kMaxHadamardExponent) {
    throw ResourceError("sylvester_hadamard: order 2^" + std::to_string(k) + " exceeds 2^" +
                        std::to_string(kMaxHadamardExponent));
  }
  const std::size_t n = std::size_t{1} << k;
  DenseMatrix h(n, n);
  h(0, 0) = 1.0f;
  // H_2s = [[H_s, H_s], [H_s, -H_s]]
  for (std::size_t s = 1; s < n; s <<= 1) {
    for (std::size_t i = 0; i < s; ++i) {
      for (std::size_t j = 0; j < s; ++j) {
        const float v = h(i, j);
        h(i, j + s) = v;
        h(i + s, j) = v;
        h(i + s, j + s) = -v;
      }
    }
  }
  return h;
}

std::vector<float> hadamard_signs(std::size_t n, Seed seed) {
  SplitMix64 rng(seed);
  std::vector<float> d(n);
  for (auto &x : d) {
    x = rng.sign();
  }
  return d;
}

DenseMatrix randomized_hadamard(std::size_t n, Seed seed) {
  if (n == 0 || !is_power_of_two(n)) {
    throw UnsupportedDimension("randomized_hadamard: n = " + std::to_string(n) +
                               " is not a power of two");
  }
  auto h = sylvester_hadamard(log2_exact(n));
  const auto d = hadamard_signs(n, seed);
  const float scale = 1.0f / std::sqrt(static_cast<float>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      h(i, j) *= scale * d[j];
    }
  }
  return h;
}

void fwht_inplace(std::span<float> v) {
  const std::size_t n = v.size();
  if (n == 0 || !is_power_of_two(n)) {
    throw ShapeError("fwht: length " + std::to_string(n) + " is not a power of two");
  }
  for (std::size_t half = 1; half < n; half <<= 1) {
    for (std::size_t base = 0; base < n; base += 2 * half) {
      for (std::size_t j = base; j < base + half; ++j) {
        const float x = v[j];
        const float y = v[j + half];
        v[j] = x + y;
        v[j + half] = x - y;
      }
    }
  }
}

std::vector<float> fwht_apply(std::vector<float> v) {
  fwht_inplace(v);
  return v;
}

void rotate_rows(DenseMatrix &m, std::size_t n, std::span<const float> signs) {
  check_rotation(m, n, signs);
  const auto rows = static_cast<std::int64_t>(m.rows());
#pragma omp parallel for schedule(static) if (m.rows() * n > 16384)
  for (std::int64_t i = 0; i < rows; ++i) {
    rotate_one(m.row(static_cast<std::size_t>(i)).first(n), signs);
  }
}

void rotate_rows_serial(DenseMatrix &m, std::size_t n, std::span<const float> signs) {
  check_rotation(m, n, signs);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    rotate_one(m.row(i).first(n), signs);
  }
}

void unrotate_rows(DenseMatrix &m, std::size_t n, std::span<const float> signs) {
  check_rotation(m, n, signs);
  // z * H^T = (z .* d) * H_n / sqrt(n)
  const float scale = 1.0f / std::sqrt(static_cast<float>(n));
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto v = m.row(i).first(n);
    for (std::size_t j = 0; j < n; ++j) {
      v[j] *= signs[j];
    }
    fwht_inplace(v);
    for (auto &x : v) {
      x *= scale;
    }
  }
}

double orthogonality_defect(const DenseMatrix &m) {
  if (m.rows() != m.cols()) {
    throw ShapeError("orthogonality_defect: matrix is not square");
  }
  const std::size_t n = m.rows();
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        dot += static_cast<double>(m(i, k)) * static_cast<double>(m(j, k));
      }
      worst = std::max(worst, std::abs(dot - (i == j ? 1.0 : 0.0)));
    }
  }
  return worst;
}

bool is_permutation(std::span<const std::uint32_t> p) {
  std::vector<bool> seen(p.size(), false);
  for (auto x : p) {
    if (x >= p.size() || seen[x]) {
      return false;
    }
    seen[x] = true;
  }
  return true;
}

DenseMatrix permutation_matrix(const Permutation &p) {
  if (!is_permutation(p)) {
    throw InputError("permutation_matrix: not a permutation");
  }
  DenseMatrix m(p.size(), p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    m(i, p[i]) = 1.0f;
  }
  return m;
}

Permutation identity_permutation(std::size_t n) {
  Permutation p(n);
  for (std::size_t i = 0; i < n; ++i) {
    p[i] = static_cast<std::uint32_t>(i);
  }
  return p;
}

Permutation inverse(const Permutation &p) {
  Permutation inv(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    inv[p[i]] = static_cast<std::uint32_t>(i);
  }
  return inv;
}

Permutation compose(const Permutation &outer, const Permutation &inner) {
  Permutation r(inner.size());
  for (std::size_t i = 0; i < inner.size(); ++i) {
    r[i] = outer[inner[i]];
  }
  return r;
}

DenseMatrix gather_columns(const DenseMatrix &m, std::span<const std::uint32_t> src) {
  DenseMatrix out(m.rows(), src.size());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t c = 0; c < src.size(); ++c) {
      out(i, c) = m(i, src[c]);
    }
  }
  return out;
}

DenseMatrix gather_rows(const DenseMatrix &m, std::span<const std::uint32_t> src) {
  DenseMatrix out(src.size(), m.cols());
  for (std::size_t r = 0; r < src.size(); ++r) {
    std::copy_n(m.row(src[r]).begin(), m.cols(), out.row(r).begin());
  }
  return out;
}

double max_abs(const DenseMatrix &m) {
  double worst = 0.0;
  for (float x : m.values()) {
    worst = std::max(worst, static_cast<double>(std::abs(x)));
  }
  return worst;
}

double max_relative_error(const DenseMatrix &a, const DenseMatrix &ref) {
  if (a.rows() != ref.rows() || a.cols() != ref.cols()) {
    throw ShapeError("max_relative_error: shape mismatch");
  }
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(static_cast<double>(a.values()[i]) -
                                   static_cast<double>(ref.values()[i])));
  }
  const double scale = max_abs(ref);
  return scale > 0.0 ? diff / scale : diff;
}

void require_finite(const DenseMatrix &m, const char *what) {
  for (float x : m.values()) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string(what) + ": non-finite value");
    }
  }
}

} // namespace lla

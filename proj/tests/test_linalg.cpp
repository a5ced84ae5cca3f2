#include "doctest.h"

#include "lla/errors.hpp"
#include "lla/linalg.hpp"
#include "lla/rng.hpp"
#include "oracles.hpp"

using namespace lla;

TEST_CASE("splitmix64 matches the reference stream") {
  SplitMix64 zero(Seed{0});
  CHECK(zero.next() == 0xe220a8397b1dcdafULL);
  SplitMix64 g(Seed{1234567});
  CHECK(g.next() == 6457827717110365317ULL);
  CHECK(g.next() == 3203168211198807973ULL);
  CHECK(g.next() == 9817491932198370423ULL);
}

TEST_CASE("rng helpers stay in range and derived seeds differ") {
  SplitMix64 g(Seed{9});
  for (int i = 0; i < 1000; ++i) {
    const auto b = g.below(7);
    CHECK(b < 7);
    const double u = g.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  CHECK(derive_seed(Seed{1}, 0) != derive_seed(Seed{1}, 1));
  CHECK(derive_seed(Seed{1}, 0) != derive_seed(Seed{2}, 0));
  CHECK(derive_seed(Seed{1}, 5) == derive_seed(Seed{1}, 5));
}

TEST_CASE("matmul matches a double-precision triple loop") {
  const auto a = oracle::random_matrix(7, 13, 1);
  const auto b = oracle::random_matrix(13, 5, 2);
  const auto ref = oracle::matmul(oracle::to_mat(a), oracle::to_mat(b));
  CHECK(oracle::rel_error(matmul(a, b), ref) < 1e-6);
  CHECK(matmul(a, b) == matmul_serial(a, b));
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
}

TEST_CASE("identity and transpose") {
  const auto a = oracle::random_matrix(4, 6, 3);
  CHECK(matmul(DenseMatrix::identity(4), a) == a);
  CHECK(transpose(transpose(a)) == a);
  CHECK(transpose(a)(5, 3) == a(3, 5));
}

TEST_CASE("Sylvester-Hadamard entries follow the popcount rule") {
  for (unsigned k = 0; k <= 5; ++k) {
    const auto h = sylvester_hadamard(k);
    const std::size_t n = std::size_t{1} << k;
    REQUIRE(h.rows() == n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        CHECK(h(i, j) == oracle::hadamard_entry(i, j));
      }
    }
  }
  CHECK_THROWS_AS(sylvester_hadamard(15), ResourceError);
}

TEST_CASE("randomized Hadamard is orthogonal") {
  for (std::size_t n : {1u, 2u, 8u, 64u, 1024u}) {
    const auto h = randomized_hadamard(n, Seed{n});
    CHECK(orthogonality_defect(h) < 1e-6);
  }
  CHECK_THROWS_AS(randomized_hadamard(12, Seed{1}), UnsupportedDimension);
}

TEST_CASE("randomized Hadamard equals H_n D / sqrt(n)") {
  const std::size_t n = 16;
  const auto signs = hadamard_signs(n, Seed{4});
  const auto h = randomized_hadamard(n, Seed{4});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      CHECK(h(i, j) == doctest::Approx(oracle::hadamard_entry(i, j) * signs[j] / 4.0));
    }
  }
}

TEST_CASE("FWHT equals the dense transform") {
  const std::size_t n = 32;
  SplitMix64 g(Seed{5});
  std::vector<float> v(n);
  for (auto &x : v) {
    x = static_cast<float>(g.normal());
  }
  const auto fast = fwht_apply(v);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      s += v[i] * oracle::hadamard_entry(i, j);
    }
    CHECK(fast[j] == doctest::Approx(s).epsilon(1e-5));
  }
  std::vector<float> e0(8, 0.0f);
  e0[0] = 1.0f;
  for (float x : fwht_apply(e0)) {
    CHECK(x == 1.0f);
  }
  std::vector<float> bad(6);
  CHECK_THROWS_AS(fwht_inplace(bad), ShapeError);
}

TEST_CASE("rotate_rows equals the dense rotation and is undone by unrotate_rows") {
  const std::size_t n = 64;
  const auto signs = hadamard_signs(n, Seed{6});
  const auto h = randomized_hadamard(n, Seed{6});
  const auto x = oracle::random_matrix(9, 80, 7);
  auto fast = x;
  rotate_rows(fast, n, signs);
  auto serial = x;
  rotate_rows_serial(serial, n, signs);
  CHECK(fast == serial);

  oracle::Mat head(9, std::vector<double>(n));
  for (std::size_t t = 0; t < 9; ++t) {
    for (std::size_t j = 0; j < n; ++j) {
      head[t][j] = x(t, j);
    }
  }
  const auto ref = oracle::matmul(head, oracle::to_mat(h));
  for (std::size_t t = 0; t < 9; ++t) {
    for (std::size_t j = 0; j < n; ++j) {
      CHECK(fast(t, j) == doctest::Approx(ref[t][j]).epsilon(1e-5));
    }
    for (std::size_t j = n; j < 80; ++j) {
      CHECK(fast(t, j) == x(t, j));
    }
  }
  unrotate_rows(fast, n, signs);
  CHECK(max_relative_error(fast, x) < 1e-6);
}

TEST_CASE("permutation matrices act on row vectors as out[p[i]] = in[i]") {
  const Permutation p{2, 0, 3, 1};
  const std::vector<float> z{10, 20, 30, 40};
  const auto moved = apply_permutation<float>(p, z);
  CHECK(moved == std::vector<float>{20, 40, 10, 30});
  const auto pm = oracle::perm_matrix(p);
  const auto ref = oracle::matmul({{10, 20, 30, 40}}, pm);
  for (std::size_t j = 0; j < 4; ++j) {
    CHECK(moved[j] == ref[0][j]);
  }
  CHECK(permutation_matrix(p)(0, 2) == 1.0f);
  CHECK(orthogonality_defect(permutation_matrix(p)) == 0.0);
}

TEST_CASE("inverse, compose and validity of permutations") {
  const Permutation p{3, 1, 0, 2};
  const auto q = inverse(p);
  CHECK(compose(p, q) == identity_permutation(4));
  CHECK(compose(q, p) == identity_permutation(4));
  CHECK(compose(p, identity_permutation(4)) == p);
  CHECK(is_permutation(p));
  CHECK_FALSE(is_permutation(std::vector<std::uint32_t>{0, 0, 1}));
  CHECK_FALSE(is_permutation(std::vector<std::uint32_t>{0, 3}));
}

TEST_CASE("gather columns and rows") {
  const DenseMatrix m{{1, 2, 3}, {4, 5, 6}};
  const std::vector<std::uint32_t> src{2, 0, 1};
  CHECK(gather_columns(m, src) == DenseMatrix{{3, 1, 2}, {6, 4, 5}});
  const std::vector<std::uint32_t> rows{1, 0};
  CHECK(gather_rows(m, rows) == DenseMatrix{{4, 5, 6}, {1, 2, 3}});
}

TEST_CASE("relative error and finiteness checks") {
  const DenseMatrix a{{1, 2}, {3, 4}};
  DenseMatrix b = a;
  b(1, 1) = 4.4f;
  CHECK(max_relative_error(b, a) == doctest::Approx(0.1).epsilon(1e-5));
  CHECK(max_abs(a) == 4.0);
  b(0, 0) = std::nanf("");
  CHECK_THROWS_AS(require_finite(b, "b"), NumericError);
  CHECK(log2_exact(1024) == 10);
  CHECK_THROWS_AS(log2_exact(12), UnsupportedDimension);
}

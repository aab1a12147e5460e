#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "helpers.hpp"
#include "setar/errors.hpp"

using namespace setar;
using testing::random_matrix;

namespace {

double sum_sq(std::span<const double> v, std::size_t from = 0) {
  double s = 0.0;
  for (std::size_t i = from; i < v.size(); ++i) s += v[i] * v[i];
  return s;
}

double orthonormality_gap(const Matrix& q) {
  const Matrix g = matmul_tn(q, q);
  return max_abs_diff(g, Matrix::identity(g.rows()));
}

}  // namespace

TEST_CASE("svd of identity and diagonal matrices") {
  const SvdTriple id = svd(Matrix::identity(2));
  CHECK(id.sigma == std::vector<double>{1.0, 1.0});

  const std::vector<double> d{3.0, 2.0, 1.0};
  const SvdTriple t = svd(Matrix::diagonal(d));
  REQUIRE(t.sigma.size() == 3);
  for (int i = 0; i < 3; ++i) CHECK(t.sigma[i] == doctest::Approx(d[i]).epsilon(1e-14));
  CHECK(max_abs_diff(t.u, Matrix::identity(3)) < 1e-14);
  CHECK(max_abs_diff(t.v, Matrix::identity(3)) < 1e-14);
}

TEST_CASE("svd sorts an unsorted diagonal") {
  const std::vector<double> d{1.0, 5.0, 2.0};
  const SvdTriple t = svd(Matrix::diagonal(d));
  CHECK(t.sigma[0] == doctest::Approx(5.0));
  CHECK(t.sigma[1] == doctest::Approx(2.0));
  CHECK(t.sigma[2] == doctest::Approx(1.0));
  CHECK(std::abs(t.u(1, 0)) == doctest::Approx(1.0));
}

TEST_CASE("svd invariants on random shapes") {
  Rng rng(11);
  for (const auto [m, n] : std::vector<std::pair<std::size_t, std::size_t>>{
           {8, 5}, {5, 8}, {1, 1}, {1, 7}, {7, 1}, {16, 16}, {32, 64}, {64, 32}}) {
    CAPTURE(m);
    CAPTURE(n);
    const Matrix w = random_matrix(rng, m, n);
    const SvdTriple t = svd(w);
    REQUIRE(t.sigma.size() == std::min(m, n));
    CHECK(t.u.rows() == m);
    CHECK(t.v.rows() == n);
    CHECK(std::is_sorted(t.sigma.rbegin(), t.sigma.rend()));
    for (double s : t.sigma) CHECK(s >= 0.0);
    CHECK(orthonormality_gap(t.u) < 1e-6);
    CHECK(orthonormality_gap(t.v) < 1e-6);
    const double fro = frobenius_norm(w);
    CHECK(frobenius_norm(reconstruct(t) - w) < 1e-5 * fro);
    CHECK(testing::rel_err(sum_sq(t.sigma), fro * fro) < 1e-9);
    for (std::size_t i = 0; i < t.u.cols(); ++i) {
      for (std::size_t r = 0; r < m; ++r) {
        if (std::abs(t.u(r, i)) > 1e-10) {
          CHECK(t.u(r, i) > 0.0);
          break;
        }
      }
    }
  }
}

TEST_CASE("svd of rank-deficient matrices keeps orthonormal bases") {
  Rng rng(5);
  const Matrix x = random_matrix(rng, 10, 2);
  const Matrix y = random_matrix(rng, 2, 6);
  const Matrix w = matmul(x, y);
  const SvdTriple t = svd(w);
  CHECK(t.sigma[2] < 1e-12 * t.sigma[0]);
  CHECK(orthonormality_gap(t.u) < 1e-6);
  CHECK(orthonormality_gap(t.v) < 1e-6);
  CHECK(frobenius_norm(reconstruct(t) - w) < 1e-10);

  const SvdTriple z = svd(Matrix(4, 3));
  CHECK(z.sigma == std::vector<double>{0.0, 0.0, 0.0});
  CHECK(orthonormality_gap(z.u) < 1e-12);
  CHECK(orthonormality_gap(z.v) < 1e-12);
}

TEST_CASE("svd is bit-deterministic") {
  Rng rng(3);
  const Matrix w = random_matrix(rng, 12, 9);
  const SvdTriple a = svd(w);
  const SvdTriple b = svd(w);
  CHECK(a.u == b.u);
  CHECK(a.v == b.v);
  CHECK(a.sigma == b.sigma);
}

TEST_CASE("svd rejects non-finite input") {
  Matrix w(2, 2, 1.0);
  w(0, 1) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(svd(w), InvalidInput);
  w(0, 1) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(svd(w), InvalidInput);
  CHECK_THROWS_AS(svd(Matrix(0, 3)), InvalidInput);
}

TEST_CASE("reduced_rank examples and tie rule") {
  CHECK(reduced_rank(512, 0.15) == 435);
  CHECK(reduced_rank(512, 0.0) == 512);
  CHECK(reduced_rank(7, 0.5) == 4);
  CHECK(reduced_rank(32, 0.25) == 24);
  CHECK(reduced_rank(1, 1.0) == 0);
  CHECK(reduced_rank(3, 0.5) == 2);
  CHECK_THROWS_AS(reduced_rank(4, -0.1), InvalidInput);
  CHECK_THROWS_AS(reduced_rank(4, 1.5), InvalidInput);
  CHECK_THROWS_AS(reduced_rank(0, 0.1), InvalidInput);
}

TEST_CASE("low_rank_approx on a diagonal matrix") {
  const SvdTriple t = svd(Matrix::diagonal(std::vector<double>{3.0, 2.0, 1.0}));
  CHECK(max_abs_diff(low_rank_approx(t, 2), Matrix::diagonal(std::vector<double>{3.0, 2.0, 0.0})) < 1e-14);
  CHECK(max_abs_diff(low_rank_approx(t, 1, {PruneKind::principle, 0}),
                     Matrix::diagonal(std::vector<double>{0.0, 0.0, 1.0})) < 1e-14);
  CHECK(low_rank_approx(t, 0) == Matrix(3, 3));
  CHECK_THROWS_AS(low_rank_approx(t, 4), InvalidInput);
}

TEST_CASE("low_rank_approx residual identity and Eckart-Young proxy") {
  Rng rng(21);
  const Matrix w = random_matrix(rng, 6, 6);
  const SvdTriple t = svd(w);
  for (std::size_t r = 0; r <= 6; ++r) {
    const double resid = frobenius_norm(w - low_rank_approx(t, r));
    const double want = sum_sq(t.sigma, r);
    if (want > 1e-20) CHECK(testing::rel_err(resid * resid, want) < 1e-9);
  }
  CHECK(frobenius_norm(w - low_rank_approx(t, 6)) < 1e-5 * frobenius_norm(w));

  const std::size_t r = 3;
  const double best = frobenius_norm(w - low_rank_approx(t, r));
  for (int trial = 0; trial < 100; ++trial) {
    const Matrix m = matmul(random_matrix(rng, 6, r), random_matrix(rng, r, 6));
    CHECK(best <= frobenius_norm(w - m) + 1e-9);
  }
}

TEST_CASE("prune strategies select the right components") {
  CHECK(kept_components(5, 2, {PruneKind::minor, 0}) == std::vector<std::size_t>{0, 1});
  CHECK(kept_components(5, 2, {PruneKind::principle, 0}) == std::vector<std::size_t>{3, 4});

  const auto a = kept_components(20, 7, {PruneKind::random, 9});
  const auto b = kept_components(20, 7, {PruneKind::random, 9});
  CHECK(a == b);
  CHECK(a.size() == 7);
  CHECK(std::is_sorted(a.begin(), a.end()));
  CHECK(std::set<std::size_t>(a.begin(), a.end()).size() == 7);
  CHECK(a.back() < 20);

  // Every component is eventually chosen across seeds.
  std::set<std::size_t> seen;
  for (std::uint64_t s = 0; s < 200; ++s)
    for (auto i : kept_components(10, 3, {PruneKind::random, s})) seen.insert(i);
  CHECK(seen.size() == 10);

  Rng rng(2);
  const SvdTriple t = svd(random_matrix(rng, 7, 5));
  const Matrix x = low_rank_approx(t, 2, {PruneKind::random, 4});
  const Matrix y = low_rank_approx(t, 2, {PruneKind::random, 4});
  CHECK(x == y);
}

TEST_CASE("prune kind names round-trip") {
  for (PruneKind k : {PruneKind::minor, PruneKind::principle, PruneKind::random})
    CHECK(prune_kind_from_string(to_string(k)) == k);
  CHECK_THROWS_AS(prune_kind_from_string("major"), InvalidInput);
}

TEST_CASE("ft_split examples") {
  const SvdTriple t = svd(Matrix::diagonal(std::vector<double>{3.0, 2.0, 1.0}));
  const FtSplit full = ft_split(t, 3);
  CHECK(full.b.cols() == 0);
  CHECK(full.a.rows() == 0);
  const FtSplit one = ft_split(t, 1);
  CHECK(max_abs_diff(matmul(one.b, one.a), Matrix::diagonal(std::vector<double>{0.0, 2.0, 1.0})) < 1e-14);
  CHECK(max_abs_diff(one.w_hat, Matrix::diagonal(std::vector<double>{3.0, 0.0, 0.0})) < 1e-14);
  CHECK_THROWS_AS(ft_split(t, 4), InvalidInput);

  Rng rng(8);
  const Matrix w = random_matrix(rng, 10, 6);
  const SvdTriple tw = svd(w);
  for (std::size_t r = 0; r <= 6; ++r) {
    const FtSplit s = ft_split(tw, r);
    CHECK(s.b.rows() == 10);
    CHECK(s.b.cols() == 6 - r);
    CHECK(s.a.cols() == 6);
    Matrix sum = s.w_hat;
    if (s.b.cols() > 0) sum += matmul(s.b, s.a);
    CHECK(frobenius_norm(w - sum) / frobenius_norm(w) < 1e-5);
    CHECK(s.w_hat == low_rank_approx(tw, r));
  }
}

TEST_CASE("matrix helpers") {
  const Matrix a(2, 3, std::vector<double>{1, 2, 3, 4, 5, 6});
  const Matrix b(3, 2, std::vector<double>{7, 8, 9, 10, 11, 12});
  CHECK(matmul(a, b) == Matrix(2, 2, std::vector<double>{58, 64, 139, 154}));
  CHECK(matmul_tn(transpose(a), b) == matmul(a, b));
  CHECK(matmul_nt(a, transpose(b)) == matmul(a, b));
  CHECK(frobenius_norm(Matrix(1, 2, std::vector<double>{3, 4})) == 5.0);
  CHECK_THROWS_AS(matmul(a, a), InvalidInput);
  CHECK_THROWS_AS(Matrix(2, 2, std::vector<double>{1, 2, 3}), InvalidInput);
}

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace setar {

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);
  static Matrix diagonal(std::span<const double> values);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  bool all_finite() const;

  friend bool operator==(const Matrix& a, const Matrix& b) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix transpose(const Matrix& a);
Matrix matmul(const Matrix& a, const Matrix& b);
/// aᵀ·b
Matrix matmul_tn(const Matrix& a, const Matrix& b);
/// a·bᵀ
Matrix matmul_nt(const Matrix& a, const Matrix& b);
Matrix operator+(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);
Matrix operator*(double s, const Matrix& a);
Matrix& operator+=(Matrix& a, const Matrix& b);

double frobenius_norm(const Matrix& a);
double max_abs_diff(const Matrix& a, const Matrix& b);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);

/// Left/right singular vectors are stored column-wise: u is m×k, v is n×k,
/// k = min(m, n), sigma non-increasing.
struct SvdTriple {
  Matrix u;
  std::vector<double> sigma;
  Matrix v;

  std::size_t rank_capacity() const { return sigma.size(); }
};

/// One-sided Jacobi SVD. Each (u_i, v_i) pair is sign-canonicalised so that
/// the first non-negligible entry of u_i is positive. `name` labels errors.
SvdTriple svd(const Matrix& w, const std::string& name = "matrix");

/// Σ σ_i u_i v_iᵀ over all components.
Matrix reconstruct(const SvdTriple& t);

/// round((1 - ratio) * full_rank), ties away from zero.
std::size_t reduced_rank(std::size_t full_rank, double ratio);

enum class PruneKind { minor, principle, random };

struct PruneStrategy {
  PruneKind kind = PruneKind::minor;
  std::uint64_t seed = 0;

  friend bool operator==(const PruneStrategy&, const PruneStrategy&) = default;
};

std::string to_string(PruneKind kind);
PruneKind prune_kind_from_string(const std::string& s);

/// Indices of the singular components kept when reserving rank r.
std::vector<std::size_t> kept_components(std::size_t k, std::size_t r, const PruneStrategy& strategy);

/// Sum of the kept rank-one terms; r = 0 yields the zero matrix.
Matrix low_rank_approx(const SvdTriple& t, std::size_t r, const PruneStrategy& strategy = {});

/// W = w_hat + b·a where w_hat keeps the leading r components and b, a carry
/// √σ-scaled minor components r+1..k.
struct FtSplit {
  Matrix w_hat;
  Matrix b;
  Matrix a;
};

FtSplit ft_split(const SvdTriple& t, std::size_t r);

}  // namespace setar

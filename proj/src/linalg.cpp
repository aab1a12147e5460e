#include "setar/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "setar/errors.hpp"
#include "setar/rng.hpp"

namespace setar {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw InvalidInput("matrix data length " + std::to_string(data_.size()) + " does not match " +
                       std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::diagonal(std::span<const double> values) {
  Matrix m(values.size(), values.size());
  for (std::size_t i = 0; i < values.size(); ++i) m(i, i) = values[i];
  return m;
}

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw InvalidInput("matmul shape mismatch: " + std::to_string(a.rows()) + "x" +
                       std::to_string(a.cols()) + " * " + std::to_string(b.rows()) + "x" +
                       std::to_string(b.cols()));
  }
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto ci = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto bk = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw InvalidInput("matmul_tn shape mismatch");
  Matrix c(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto ak = a.row(k);
    auto bk = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = ak[i];
      if (aki == 0.0) continue;
      auto ci = c.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) ci[j] += aki * bk[j];
    }
  }
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw InvalidInput("matmul_nt shape mismatch");
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) c(i, j) = dot(a.row(i), b.row(j));
  return c;
}

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw InvalidInput(std::string(op) + " shape mismatch");
  }
}

}  // namespace

Matrix operator+(const Matrix& a, const Matrix& b) {
  Matrix c = a;
  c += b;
  return c;
}

Matrix operator-(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "subtract");
  Matrix c = a;
  auto cd = c.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < cd.size(); ++i) cd[i] -= bd[i];
  return c;
}

Matrix operator*(double s, const Matrix& a) {
  Matrix c = a;
  for (double& x : c.data()) x *= s;
  return c;
}

Matrix& operator+=(Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add");
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < ad.size(); ++i) ad[i] += bd[i];
  return a;
}

double frobenius_norm(const Matrix& a) { return norm2(a.data()); }

double max_abs_diff(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

namespace {

constexpr int kMaxSweeps = 100;
// Singular values below this fraction of σ_max get their left vector from
// basis completion instead of normalising a near-zero column.
constexpr double kNullRelTol = 1e-11;

// Column-major working storage.
struct Columns {
  std::size_t len;
  std::vector<std::vector<double>> cols;
};

// Hestenes one-sided Jacobi on a tall matrix (m >= n). Returns raw U-columns
// (scaled by σ) and V.
void jacobi_tall(const Matrix& w, const std::string& name, Columns& a, Columns& v) {
  const std::size_t m = w.rows();
  const std::size_t n = w.cols();
  a.len = m;
  a.cols.assign(n, std::vector<double>(m));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) a.cols[j][i] = w(i, j);
  v.len = n;
  v.cols.assign(n, std::vector<double>(n, 0.0));
  for (std::size_t j = 0; j < n; ++j) v.cols[j][j] = 1.0;

  const double tol = static_cast<double>(std::max<std::size_t>(m, 2)) *
                    std::numeric_limits<double>::epsilon();
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        auto& ap = a.cols[p];
        auto& aq = a.cols[q];
        const double alpha = dot(ap, ap);
        const double beta = dot(aq, aq);
        const double gamma = dot(ap, aq);
        if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double x = ap[i];
          const double y = aq[i];
          ap[i] = c * x - s * y;
          aq[i] = s * x + c * y;
        }
        auto& vp = v.cols[p];
        auto& vq = v.cols[q];
        for (std::size_t i = 0; i < n; ++i) {
          const double x = vp[i];
          const double y = vq[i];
          vp[i] = c * x - s * y;
          vq[i] = s * x + c * y;
        }
      }
    }
    if (!rotated) return;
  }
  throw NumericError("svd of " + name + " did not converge in " + std::to_string(kMaxSweeps) +
                     " sweeps");
}

void orthogonalize_against(std::vector<double>& x, const std::vector<std::vector<double>>& basis) {
  for (int pass = 0; pass < 2; ++pass) {
    for (const auto& b : basis) {
      const double proj = dot(x, b);
      for (std::size_t i = 0; i < x.size(); ++i) x[i] -= proj * b[i];
    }
  }
}

SvdTriple svd_tall(const Matrix& w, const std::string& name) {
  const std::size_t m = w.rows();
  const std::size_t n = w.cols();
  Columns a;
  Columns v;
  jacobi_tall(w, name, a, v);

  std::vector<double> sig(n);
  for (std::size_t j = 0; j < n; ++j) sig[j] = norm2(a.cols[j]);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return sig[x] > sig[y]; });

  const double smax = n > 0 ? sig[order[0]] : 0.0;
  std::vector<std::vector<double>> ucols(n);
  std::vector<bool> needs_completion(n, false);
  std::vector<std::vector<double>> basis;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    if (sig[j] > kNullRelTol * smax && sig[j] > 0.0) {
      ucols[k] = a.cols[j];
      for (double& x : ucols[k]) x /= sig[j];
      basis.push_back(ucols[k]);
    } else {
      needs_completion[k] = true;
    }
  }
  std::size_t next_unit = 0;
  for (std::size_t k = 0; k < n; ++k) {
    if (!needs_completion[k]) continue;
    while (true) {
      if (next_unit >= m) throw NumericError("svd of " + name + ": basis completion failed");
      std::vector<double> e(m, 0.0);
      e[next_unit++] = 1.0;
      orthogonalize_against(e, basis);
      const double nrm = norm2(e);
      if (nrm > 0.5) {
        for (double& x : e) x /= nrm;
        ucols[k] = e;
        basis.push_back(e);
        break;
      }
    }
  }

  SvdTriple t;
  t.u = Matrix(m, n);
  t.v = Matrix(n, n);
  t.sigma.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    t.sigma[k] = sig[j];
    for (std::size_t i = 0; i < m; ++i) t.u(i, k) = ucols[k][i];
    for (std::size_t i = 0; i < n; ++i) t.v(i, k) = v.cols[j][i];
  }
  return t;
}

void canonicalize_signs(SvdTriple& t) {
  constexpr double kNegligible = 1e-10;
  for (std::size_t k = 0; k < t.sigma.size(); ++k) {
    for (std::size_t i = 0; i < t.u.rows(); ++i) {
      const double x = t.u(i, k);
      if (std::abs(x) <= kNegligible) continue;
      if (x < 0.0) {
        for (std::size_t r = 0; r < t.u.rows(); ++r) t.u(r, k) = -t.u(r, k);
        for (std::size_t r = 0; r < t.v.rows(); ++r) t.v(r, k) = -t.v(r, k);
      }
      break;
    }
  }
}

}  // namespace

SvdTriple svd(const Matrix& w, const std::string& name) {
  if (w.rows() == 0 || w.cols() == 0) throw InvalidInput("svd of " + name + ": empty matrix");
  if (!w.all_finite()) throw InvalidInput("svd of " + name + ": non-finite entries");
  SvdTriple t;
  if (w.rows() >= w.cols()) {
    t = svd_tall(w, name);
  } else {
    SvdTriple tt = svd_tall(transpose(w), name);
    t.u = std::move(tt.v);
    t.v = std::move(tt.u);
    t.sigma = std::move(tt.sigma);
  }
  canonicalize_signs(t);
  return t;
}

namespace {

Matrix sum_components(const SvdTriple& t, std::span<const std::size_t> idx) {
  const std::size_t m = t.u.rows();
  const std::size_t n = t.v.rows();
  Matrix out(m, n);
  for (std::size_t k : idx) {
    const double s = t.sigma[k];
    if (s == 0.0) continue;
    for (std::size_t i = 0; i < m; ++i) {
      const double ui = s * t.u(i, k);
      auto row = out.row(i);
      for (std::size_t j = 0; j < n; ++j) row[j] += ui * t.v(j, k);
    }
  }
  return out;
}

}  // namespace

Matrix reconstruct(const SvdTriple& t) {
  std::vector<std::size_t> all(t.sigma.size());
  std::iota(all.begin(), all.end(), 0);
  return sum_components(t, all);
}

std::size_t reduced_rank(std::size_t full_rank, double ratio) {
  if (full_rank < 1) throw InvalidInput("reduced_rank: full rank must be >= 1");
  if (!(ratio >= 0.0 && ratio <= 1.0)) {
    throw InvalidInput("reduced_rank: ratio " + std::to_string(ratio) + " outside [0, 1]");
  }
  // Snap to a 1e-6 grid first so decimal ratios like 0.05 hit exact halves.
  const double raw = (1.0 - ratio) * static_cast<double>(full_rank);
  const double snapped = std::round(raw * 1e6) / 1e6;
  const auto r = static_cast<std::size_t>(std::llround(snapped));
  return std::min(r, full_rank);
}

std::string to_string(PruneKind kind) {
  switch (kind) {
    case PruneKind::minor:
      return "minor";
    case PruneKind::principle:
      return "principle";
    case PruneKind::random:
      return "random";
  }
  return "minor";
}

PruneKind prune_kind_from_string(const std::string& s) {
  if (s == "minor") return PruneKind::minor;
  if (s == "principle") return PruneKind::principle;
  if (s == "random") return PruneKind::random;
  throw InvalidInput("unknown prune strategy '" + s + "'");
}

std::vector<std::size_t> kept_components(std::size_t k, std::size_t r, const PruneStrategy& strategy) {
  if (r > k) {
    throw InvalidInput("requested rank " + std::to_string(r) + " exceeds " + std::to_string(k) +
                       " singular components");
  }
  std::vector<std::size_t> idx(k);
  std::iota(idx.begin(), idx.end(), 0);
  switch (strategy.kind) {
    case PruneKind::minor:
      idx.resize(r);
      break;
    case PruneKind::principle:
      idx.erase(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k - r));
      break;
    case PruneKind::random: {
      Rng rng(strategy.seed);
      for (std::size_t i = k; i > 1; --i) {
        const std::size_t j = rng.uniform_int(i);
        std::swap(idx[i - 1], idx[j]);
      }
      idx.resize(r);
      std::sort(idx.begin(), idx.end());
      break;
    }
  }
  return idx;
}

Matrix low_rank_approx(const SvdTriple& t, std::size_t r, const PruneStrategy& strategy) {
  const auto idx = kept_components(t.sigma.size(), r, strategy);
  return sum_components(t, idx);
}

FtSplit ft_split(const SvdTriple& t, std::size_t r) {
  const std::size_t k = t.sigma.size();
  if (r > k) {
    throw InvalidInput("ft_split: rank " + std::to_string(r) + " exceeds " + std::to_string(k) +
                       " singular components");
  }
  const std::size_t m = t.u.rows();
  const std::size_t n = t.v.rows();
  const std::size_t minor = k - r;
  FtSplit out;
  out.w_hat = low_rank_approx(t, r, PruneStrategy{PruneKind::minor, 0});
  out.b = Matrix(m, minor);
  out.a = Matrix(minor, n);
  for (std::size_t c = 0; c < minor; ++c) {
    const std::size_t comp = r + c;
    const double root = std::sqrt(t.sigma[comp]);
    for (std::size_t i = 0; i < m; ++i) out.b(i, c) = root * t.u(i, comp);
    for (std::size_t j = 0; j < n; ++j) out.a(c, j) = root * t.v(j, comp);
  }
  return out;
}

}  // namespace setar

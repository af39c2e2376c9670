#pragma once

// Dense numerical core: a row-major matrix, products with 64-bit accumulation,
// row softmax, RMS normalization, cosine similarity and PCA by power iteration.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <ranges>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mdlab::num {

template <typename T>
class BasicMatrix {
 public:
  using value_type = T;

  BasicMatrix() = default;
  BasicMatrix(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw std::invalid_argument("matrix data length " + std::to_string(data_.size()) +
                                  " does not match shape " + std::to_string(rows_) + "x" +
                                  std::to_string(cols_));
    }
  }

  static BasicMatrix identity(std::size_t n) {
    BasicMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  T operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  const std::vector<T>& data() const { return data_; }

  std::vector<T> column(std::size_t c) const {
    std::vector<T> out(rows_);
    for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
    return out;
  }

  BasicMatrix transpose() const {
    BasicMatrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  template <typename U>
  BasicMatrix<U> cast() const {
    BasicMatrix<U> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.values()[i] = static_cast<U>(data_[i]);
    return out;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  std::string shape() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

  bool operator==(const BasicMatrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Matrix = BasicMatrix<float>;

inline void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

template <typename T>
bool all_finite(std::span<const T> v) {
  return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
}

template <std::ranges::contiguous_range A, std::ranges::contiguous_range B>
double dot(const A& a, const B& b) {
  const std::size_t n = std::ranges::size(a);
  if (n != std::ranges::size(b))
    throw std::invalid_argument("dot: length mismatch " + std::to_string(n) + " vs " + std::to_string(std::ranges::size(b)));
  const auto* pa = std::ranges::data(a);
  const auto* pb = std::ranges::data(b);
  // Four interleaved partial sums combined in a fixed order.
  double acc[4] = {0.0, 0.0, 0.0, 0.0};
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    for (std::size_t l = 0; l < 4; ++l) acc[l] += static_cast<double>(pa[i + l]) * static_cast<double>(pb[i + l]);
  for (; i < n; ++i) acc[i % 4] += static_cast<double>(pa[i]) * static_cast<double>(pb[i]);
  return (acc[0] + acc[1]) + (acc[2] + acc[3]);
}

template <std::ranges::contiguous_range A>
double norm(const A& a) {
  return std::sqrt(dot(a, a));
}

// Cosine similarity; 0 when either norm is below 1e-12.
template <std::ranges::contiguous_range A, std::ranges::contiguous_range B>
double cosine(const A& a, const B& b) {
  const double na = norm(a);
  const double nb = norm(b);
  if (na < 1e-12 || nb < 1e-12) return 0.0;
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

// C = A * B
template <typename T>
BasicMatrix<T> matmul(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: shape mismatch " + a.shape() + " * " + b.shape());
  }
  BasicMatrix<T> c(a.rows(), b.cols());
  std::vector<double> acc(b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      const T* brow = b.row(k).data();
      for (std::size_t j = 0; j < b.cols(); ++j) acc[j] += aik * static_cast<double>(brow[j]);
    }
    for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) = static_cast<T>(acc[j]);
  }
  return c;
}

// C = A * B^T
template <typename T>
BasicMatrix<T> matmul_bt(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("matmul_bt: shape mismatch " + a.shape() + " * (" + b.shape() + ")^T");
  }
  BasicMatrix<T> c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) c(i, j) = static_cast<T>(dot(a.row(i), b.row(j)));
  return c;
}

// C = A^T * B
template <typename T>
BasicMatrix<T> matmul_at(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (a.rows() != b.rows()) {
    throw std::invalid_argument("matmul_at: shape mismatch (" + a.shape() + ")^T * " + b.shape());
  }
  std::vector<double> acc(a.cols() * b.cols(), 0.0);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double ari = a(r, i);
      if (ari == 0.0) continue;
      const T* brow = b.row(r).data();
      double* out = acc.data() + i * b.cols();
      for (std::size_t j = 0; j < b.cols(); ++j) out[j] += ari * static_cast<double>(brow[j]);
    }
  }
  BasicMatrix<T> c(a.cols(), b.cols());
  for (std::size_t i = 0; i < acc.size(); ++i) c.values()[i] = static_cast<T>(acc[i]);
  return c;
}

template <typename T>
void softmax_inplace(std::span<T> row) {
  if (row.empty()) return;
  const T mx = *std::max_element(row.begin(), row.end());
  double sum = 0.0;
  std::vector<double> e(row.size());
  for (std::size_t j = 0; j < row.size(); ++j) {
    e[j] = std::exp(static_cast<double>(row[j]) - static_cast<double>(mx));
    sum += e[j];
  }
  for (std::size_t j = 0; j < row.size(); ++j) row[j] = static_cast<T>(e[j] / sum);
}

template <typename T>
BasicMatrix<T> softmax_rows(const BasicMatrix<T>& m) {
  BasicMatrix<T> out = m;
  for (std::size_t r = 0; r < out.rows(); ++r) softmax_inplace(out.row(r));
  return out;
}

// y = gain * x / sqrt(mean(x^2) + eps); returns the inverse RMS used.
template <typename T>
double rms_norm(std::span<const T> x, std::span<const T> gain, std::span<T> y, double eps) {
  if (x.size() != gain.size() || x.size() != y.size()) throw std::invalid_argument("rms_norm: length mismatch");
  const double ms = dot(x, x) / static_cast<double>(x.size());
  const double inv = 1.0 / std::sqrt(ms + eps);
  for (std::size_t i = 0; i < x.size(); ++i)
    y[i] = static_cast<T>(static_cast<double>(gain[i]) * static_cast<double>(x[i]) * inv);
  return inv;
}

struct PcaResult {
  std::vector<float> mean;        // d
  Matrix basis;                   // d x k, orthonormal columns
  std::vector<double> eigenvalues;  // k, descending
  bool degenerate = false;        // fewer than the requested components had nonzero variance
  bool converged = true;
  double max_residual = 0.0;      // largest ||Cv - lambda v|| over returned components

  std::size_t k() const { return basis.cols(); }
};

struct PcaOptions {
  double tolerance = 1e-9;
  std::size_t max_iterations = 10000;
};

namespace detail {

inline std::vector<double> matvec(const std::vector<double>& c, std::size_t d, const std::vector<double>& v) {
  std::vector<double> out(d, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) acc += c[i * d + j] * v[j];
    out[i] = acc;
  }
  return out;
}

inline double vnorm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline void orthogonalize(std::vector<double>& v, const std::vector<std::vector<double>>& against) {
  for (const auto& u : against) {
    double p = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) p += v[i] * u[i];
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= p * u[i];
  }
}

// Largest-magnitude coordinate made positive; ties go to the lowest index.
inline void fix_sign(std::vector<double>& v) {
  std::size_t arg = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (std::abs(v[i]) > std::abs(v[arg]) * (1.0 + 1e-12)) arg = i;
  if (v[arg] < 0)
    for (double& x : v) x = -x;
}

}  // namespace detail

// Top-k principal components of the rows of `samples` (n x d) by power
// iteration with deflation on the sample covariance (divisor n - 1).
template <typename T>
PcaResult pca_fit(const BasicMatrix<T>& samples, std::size_t k, PcaOptions opts = {}) {
  const std::size_t n = samples.rows();
  const std::size_t d = samples.cols();
  require(n >= 2, "pca_fit: need at least 2 samples, got " + std::to_string(n));
  require(k >= 1, "pca_fit: k must be >= 1");
  require(k <= std::min(n, d), "pca_fit: k=" + std::to_string(k) + " exceeds min(n, d)=" +
                                   std::to_string(std::min(n, d)));

  std::vector<double> mean(d, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) mean[c] += static_cast<double>(samples(r, c));
  for (double& m : mean) m /= static_cast<double>(n);

  std::vector<double> cov(d * d, 0.0);
  std::vector<double> centered(d);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) centered[c] = static_cast<double>(samples(r, c)) - mean[c];
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) cov[i * d + j] += centered[i] * centered[j];
  }
  double trace = 0.0;
  for (std::size_t i = 0; i < d; ++i) trace += cov[i * d + i];
  for (double& x : cov) x /= static_cast<double>(n - 1);
  trace /= static_cast<double>(n - 1);

  PcaResult result;
  result.mean.resize(d);
  for (std::size_t c = 0; c < d; ++c) result.mean[c] = static_cast<float>(mean[c]);

  const double floor = 1e-12 * std::max(1.0, trace);
  std::vector<std::vector<double>> vectors;
  std::mt19937_64 gen(0x5eed);
  std::vector<double> deflated = cov;

  for (std::size_t comp = 0; comp < k; ++comp) {
    std::vector<double> v(d);
    for (double& x : v) x = static_cast<double>(gen() >> 11) * 0x1.0p-53 - 0.5;
    detail::orthogonalize(v, vectors);
    double nv = detail::vnorm(v);
    for (double& x : v) x /= nv;

    double lambda = 0.0;
    double residual = std::numeric_limits<double>::infinity();
    bool ok = false;
    for (std::size_t it = 0; it < opts.max_iterations; ++it) {
      std::vector<double> w = detail::matvec(deflated, d, v);
      lambda = 0.0;
      for (std::size_t i = 0; i < d; ++i) lambda += v[i] * w[i];
      double r2 = 0.0;
      for (std::size_t i = 0; i < d; ++i) r2 += (w[i] - lambda * v[i]) * (w[i] - lambda * v[i]);
      residual = std::sqrt(r2);
      if (residual <= opts.tolerance * std::max(1.0, std::abs(lambda))) {
        ok = true;
        break;
      }
      detail::orthogonalize(w, vectors);
      const double nw = detail::vnorm(w);
      if (nw <= floor) {
        lambda = 0.0;
        ok = true;
        break;
      }
      for (std::size_t i = 0; i < d; ++i) v[i] = w[i] / nw;
    }
    if (lambda <= floor) {
      result.degenerate = true;
      break;
    }
    if (!ok) result.converged = false;
    result.max_residual = std::max(result.max_residual, residual);
    detail::fix_sign(v);
    result.eigenvalues.push_back(lambda);
    vectors.push_back(v);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) deflated[i * d + j] -= lambda * v[i] * v[j];
  }

  result.basis = Matrix(d, vectors.size());
  for (std::size_t c = 0; c < vectors.size(); ++c)
    for (std::size_t i = 0; i < d; ++i) result.basis(i, c) = static_cast<float>(vectors[c][i]);
  return result;
}

}  // namespace mdlab::num

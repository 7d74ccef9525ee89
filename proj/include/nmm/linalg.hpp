#pragma once

// Dense row-major matrix kernels, elementwise activations and weight
// initialization. Everything numeric in the model lives in Matrix<T>;
// T is float for training speed or double for gradient-check suites.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace nmm {

template <typename T>
class Matrix {
 public:
  Matrix() = default;

  Matrix(int rows, int cols) : rows_(rows), cols_(cols) {
    if (rows <= 0 || cols <= 0)
      throw std::invalid_argument("Matrix: dimensions must be positive, got " +
                                  shape_str(rows, cols));
    data_.assign(static_cast<size_t>(rows) * cols, T(0));
  }

  Matrix(int rows, int cols, std::initializer_list<T> values) : Matrix(rows, cols) {
    if (values.size() != data_.size())
      throw std::invalid_argument("Matrix: initializer has " +
                                  std::to_string(values.size()) +
                                  " values for shape " + shape_str(rows, cols));
    std::copy(values.begin(), values.end(), data_.begin());
  }

  static Matrix identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(int r, int c) { return data_[static_cast<size_t>(r) * cols_ + c]; }
  T operator()(int r, int c) const { return data_[static_cast<size_t>(r) * cols_ + c]; }

  T* row(int r) { return data_.data() + static_cast<size_t>(r) * cols_; }
  const T* row(int r) const { return data_.data() + static_cast<size_t>(r) * cols_; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(T(0)); }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  std::string shape() const { return shape_str(rows_, cols_); }

  static std::string shape_str(int r, int c) {
    return std::to_string(r) + "x" + std::to_string(c);
  }

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<T> data_;
};

namespace detail {

[[noreturn]] inline void shape_error(const std::string& op, const std::string& a,
                                     const std::string& b) {
  throw std::invalid_argument(op + ": incompatible shapes " + a + " and " + b);
}

}  // namespace detail

// out += a * b. Summation runs over k in ascending order for every output
// element, so results do not depend on any internal parallelization.
template <typename T>
void matmul_acc(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out) {
  if (a.cols() != b.rows()) detail::shape_error("matmul", a.shape(), b.shape());
  if (out.rows() != a.rows() || out.cols() != b.cols())
    detail::shape_error("matmul: accumulator", out.shape(),
                        Matrix<T>::shape_str(a.rows(), b.cols()));
  const int m = a.rows(), k = a.cols(), n = b.cols();
#pragma omp parallel for if (static_cast<long long>(m) * k * n > (1 << 18))
  for (int i = 0; i < m; ++i) {
    T* orow = out.row(i);
    const T* arow = a.row(i);
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b.row(p);
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.rows()) detail::shape_error("matmul", a.shape(), b.shape());
  Matrix<T> out(a.rows(), b.cols());
  matmul_acc(a, b, out);
  return out;
}

// out += a * b^T  with a: m x k, b: n x k.
template <typename T>
void matmul_nt_acc(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out) {
  if (a.cols() != b.cols()) detail::shape_error("matmul_nt", a.shape(), b.shape());
  if (out.rows() != a.rows() || out.cols() != b.rows())
    detail::shape_error("matmul_nt: accumulator", out.shape(),
                        Matrix<T>::shape_str(a.rows(), b.rows()));
  const int m = a.rows(), k = a.cols(), n = b.rows();
#pragma omp parallel for if (static_cast<long long>(m) * k * n > (1 << 18))
  for (int i = 0; i < m; ++i) {
    T* orow = out.row(i);
    const T* arow = a.row(i);
    for (int j = 0; j < n; ++j) {
      const T* brow = b.row(j);
      T acc = T(0);
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      orow[j] += acc;
    }
  }
}

template <typename T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.cols()) detail::shape_error("matmul_nt", a.shape(), b.shape());
  Matrix<T> out(a.rows(), b.rows());
  matmul_nt_acc(a, b, out);
  return out;
}

// out += a^T * b  with a: k x m, b: k x n. Used for weight gradients.
template <typename T>
void matmul_tn_acc(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out) {
  if (a.rows() != b.rows()) detail::shape_error("matmul_tn", a.shape(), b.shape());
  if (out.rows() != a.cols() || out.cols() != b.cols())
    detail::shape_error("matmul_tn: accumulator", out.shape(),
                        Matrix<T>::shape_str(a.cols(), b.cols()));
  const int k = a.rows(), m = a.cols(), n = b.cols();
#pragma omp parallel for if (static_cast<long long>(m) * k * n > (1 << 18))
  for (int i = 0; i < m; ++i) {
    T* orow = out.row(i);
    for (int p = 0; p < k; ++p) {
      const T av = a(p, i);
      const T* brow = b.row(p);
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

template <typename T>
Matrix<T> transpose(const Matrix<T>& a) {
  Matrix<T> out(a.cols(), a.rows());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

// f(x) = max(0, x)
template <typename T>
Matrix<T> relu(const Matrix<T>& x) {
  Matrix<T> out = x;
  T* d = out.data();
  for (size_t i = 0; i < out.size(); ++i) d[i] = d[i] > T(0) ? d[i] : T(0);
  return out;
}

// Passes upstream where the preactivation is > 0, zero elsewhere.
template <typename T>
Matrix<T> relu_grad(const Matrix<T>& x, const Matrix<T>& upstream) {
  if (!x.same_shape(upstream)) detail::shape_error("relu_grad", x.shape(), upstream.shape());
  Matrix<T> out = upstream;
  const T* xd = x.data();
  T* d = out.data();
  for (size_t i = 0; i < out.size(); ++i)
    if (!(xd[i] > T(0))) d[i] = T(0);
  return out;
}

namespace detail {

// Saturates cleanly for |x| up to 1e3 and beyond: the exp argument is
// always non-positive, so no overflow path exists.
template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) {
    const T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace detail

template <typename T>
Matrix<T> sigmoid(const Matrix<T>& x) {
  Matrix<T> out = x;
  T* d = out.data();
  for (size_t i = 0; i < out.size(); ++i) d[i] = detail::sigmoid_scalar(d[i]);
  return out;
}

// Gradient from the sigmoid *output* y: upstream .* y(1-y).
template <typename T>
Matrix<T> sigmoid_grad(const Matrix<T>& y, const Matrix<T>& upstream) {
  if (!y.same_shape(upstream)) detail::shape_error("sigmoid_grad", y.shape(), upstream.shape());
  Matrix<T> out = upstream;
  const T* yd = y.data();
  T* d = out.data();
  for (size_t i = 0; i < out.size(); ++i) d[i] *= yd[i] * (T(1) - yd[i]);
  return out;
}

template <typename T>
Matrix<T> tanh_act(const Matrix<T>& x) {
  Matrix<T> out = x;
  T* d = out.data();
  for (size_t i = 0; i < out.size(); ++i) d[i] = std::tanh(d[i]);
  return out;
}

// Gradient from the tanh *output* y: upstream .* (1 - y^2).
template <typename T>
Matrix<T> tanh_grad(const Matrix<T>& y, const Matrix<T>& upstream) {
  if (!y.same_shape(upstream)) detail::shape_error("tanh_grad", y.shape(), upstream.shape());
  Matrix<T> out = upstream;
  const T* yd = y.data();
  T* d = out.data();
  for (size_t i = 0; i < out.size(); ++i) d[i] *= T(1) - yd[i] * yd[i];
  return out;
}

// Row-wise softmax with per-row max subtraction; rows sum to 1 and stay
// finite for arbitrarily large finite logits.
template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& logits) {
  Matrix<T> out = logits;
  for (int i = 0; i < out.rows(); ++i) {
    T* r = out.row(i);
    T mx = r[0];
    for (int j = 1; j < out.cols(); ++j) mx = std::max(mx, r[j]);
    T sum = T(0);
    for (int j = 0; j < out.cols(); ++j) {
      r[j] = std::exp(r[j] - mx);
      sum += r[j];
    }
    for (int j = 0; j < out.cols(); ++j) r[j] /= sum;
  }
  return out;
}

// m(i, :) += row(0, :)
template <typename T>
void add_row_inplace(Matrix<T>& m, const Matrix<T>& row) {
  if (row.rows() != 1 || row.cols() != m.cols())
    detail::shape_error("add_row", m.shape(), row.shape());
  for (int i = 0; i < m.rows(); ++i) {
    T* d = m.row(i);
    const T* r = row.row(0);
    for (int j = 0; j < m.cols(); ++j) d[j] += r[j];
  }
}

// acc(0, :) += column sums of m. Used for bias gradients.
template <typename T>
void colsum_acc(const Matrix<T>& m, Matrix<T>& acc) {
  if (acc.rows() != 1 || acc.cols() != m.cols())
    detail::shape_error("colsum", m.shape(), acc.shape());
  T* a = acc.row(0);
  for (int i = 0; i < m.rows(); ++i) {
    const T* r = m.row(i);
    for (int j = 0; j < m.cols(); ++j) a[j] += r[j];
  }
}

// Embedding lookup: out(b, :) = table(ids[b], :).
template <typename T>
Matrix<T> gather_rows(const Matrix<T>& table, const std::vector<int>& ids) {
  if (ids.empty()) throw std::invalid_argument("gather_rows: empty id list");
  Matrix<T> out(static_cast<int>(ids.size()), table.cols());
  for (size_t b = 0; b < ids.size(); ++b) {
    if (ids[b] < 0 || ids[b] >= table.rows())
      throw std::invalid_argument("gather_rows: id " + std::to_string(ids[b]) +
                                  " out of range for table " + table.shape());
    std::copy(table.row(ids[b]), table.row(ids[b]) + table.cols(),
              out.row(static_cast<int>(b)));
  }
  return out;
}

// table(ids[b], :) += grads(b, :). Embedding gradient scatter.
template <typename T>
void scatter_add_rows(Matrix<T>& table, const std::vector<int>& ids,
                      const Matrix<T>& grads) {
  if (static_cast<int>(ids.size()) != grads.rows() || grads.cols() != table.cols())
    detail::shape_error("scatter_add_rows", table.shape(), grads.shape());
  for (size_t b = 0; b < ids.size(); ++b) {
    T* dst = table.row(ids[b]);
    const T* src = grads.row(static_cast<int>(b));
    for (int j = 0; j < table.cols(); ++j) dst[j] += src[j];
  }
}

template <typename T>
bool all_finite(const Matrix<T>& m) {
  const T* d = m.data();
  for (size_t i = 0; i < m.size(); ++i)
    if (!std::isfinite(d[i])) return false;
  return true;
}

// xoshiro256** seeded through splitmix64. Identical seed gives an identical
// draw sequence on every platform; state is 4 words so checkpoints can
// carry it.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed) {
    uint64_t x = seed;
    for (auto& w : s_) w = splitmix64(x);
    if ((s_[0] | s_[1] | s_[2] | s_[3]) == 0) s_[0] = 1;
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // [0, 1)
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  bool bernoulli(double p) { return next_double() < p; }

  uint64_t seed() const { return seed_; }
  std::array<uint64_t, 4> state() const { return s_; }
  void set_state(const std::array<uint64_t, 4>& s) { s_ = s; }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  static uint64_t splitmix64(uint64_t& x) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  uint64_t seed_;
  std::array<uint64_t, 4> s_;
};

// Normalized uniform initialization: entries in [-b, b], b = sqrt(6/(rows+cols)).
template <typename T>
Matrix<T> glorot_init(int rows, int cols, Rng& rng) {
  Matrix<T> m(rows, cols);
  const double b = std::sqrt(6.0 / (rows + cols));
  T* d = m.data();
  for (size_t i = 0; i < m.size(); ++i) d[i] = static_cast<T>(rng.uniform(-b, b));
  return m;
}

}  // namespace nmm

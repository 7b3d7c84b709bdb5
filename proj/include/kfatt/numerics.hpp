// Dense tensors, stable elementary functions, a counter-based RNG and a
// central-difference gradient checker. Every other header builds on these.
//
// All arithmetic is IEEE double. Tensors are row-major and at most rank 2 in
// practice, though the shape vector is not restricted.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace kfatt {

/// Base error type for everything thrown by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_))
      throw Error("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                  shape_str(shape_));
  }

  /// Rank-1 tensor from a list of values.
  static Tensor vec(std::initializer_list<double> v) { return Tensor({v.size()}, std::vector<double>(v)); }
  static Tensor vec(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v));
  }
  /// 1 x n row matrix.
  static Tensor row(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor({1, n}, std::move(v));
  }
  static Tensor matrix(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor({r, c}, std::move(v)); }
  static Tensor scalar(double x) { return Tensor({1}, std::vector<double>{x}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  /// Rows/cols treat a rank-1 tensor as a single row.
  std::size_t rows() const { return rank() >= 2 ? shape_[0] : 1; }
  std::size_t cols() const { return rank() >= 2 ? shape_[1] : (rank() == 1 ? shape_[0] : 1); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::span<double> row_span(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row_span(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }
  const std::vector<double>& values() const { return data_; }

  double item() const {
    if (data_.size() != 1) throw Error("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
  }

  Tensor reshaped(Shape s) const { return Tensor(std::move(s), data_); }

  void fill(double x) { std::fill(data_.begin(), data_.end(), x); }

  bool operator==(const Tensor& o) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Multiply-accumulate accounting. Matrix products report their MACs here so
// the benchmark can measure cost without depending on wall-clock time.

inline std::uint64_t& mac_counter() {
  thread_local std::uint64_t count = 0;
  return count;
}

/// RAII scope that measures MACs performed on this thread while alive.
class MacScope {
 public:
  MacScope() : start_(mac_counter()) {}
  std::uint64_t count() const { return mac_counter() - start_; }

 private:
  std::uint64_t start_;
};

// ---------------------------------------------------------------------------
// Matrix helpers (rank-1 operands act as row vectors).

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw Error(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

/// C = A * B
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw Error("matmul: shape mismatch " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  Tensor c({m, n});
  const double* __restrict pa = a.data().data();
  const double* __restrict pb = b.data().data();
  double* __restrict pc = c.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* __restrict out = pc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = pa[i * k + p];
      const double* __restrict brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) out[j] += aip * brow[j];
    }
  }
  mac_counter() += m * k * n;
  return c;
}

/// C = A * B^T
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k)
    throw Error("matmul_nt: shape mismatch " + shape_str(a.shape()) + " * " + shape_str(b.shape()) + "^T");
  Tensor c({m, n});
  const double* __restrict pa = a.data().data();
  const double* __restrict pb = b.data().data();
  double* __restrict pc = c.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* __restrict arow = pa + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* __restrict brow = pb + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      pc[i * n + j] = s;
    }
  }
  mac_counter() += m * k * n;
  return c;
}

/// C = A^T * B
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw Error("matmul_tn: shape mismatch " + shape_str(a.shape()) + "^T * " + shape_str(b.shape()));
  Tensor c({m, n});
  const double* __restrict pa = a.data().data();
  const double* __restrict pb = b.data().data();
  double* __restrict pc = c.data().data();
  for (std::size_t p = 0; p < k; ++p) {
    const double* __restrict arow = pa + p * m;
    const double* __restrict brow = pb + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double api = arow[i];
      double* __restrict out = pc + i * n;
      for (std::size_t j = 0; j < n; ++j) out[j] += api * brow[j];
    }
  }
  mac_counter() += m * k * n;
  return c;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double squared_norm(std::span<const double> a) { return dot(a, a); }

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double inf_norm(std::span<const double> a) {
  double m = 0.0;
  for (double x : a) m = std::max(m, std::abs(x));
  return m;
}

// ---------------------------------------------------------------------------
// Stable elementary functions.

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// log(1 + exp(x)) without overflow.
inline double softplus(double x) {
  if (x > 30.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

/// Normalized exponentials over a 1-D tensor, computed after max-subtraction.
inline Tensor softmax(const Tensor& logits) {
  if (logits.empty()) throw Error("empty logits");
  const auto d = logits.data();
  const double mx = *std::max_element(d.begin(), d.end());
  Tensor out(logits.shape());
  double z = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) z += (out[i] = std::exp(d[i] - mx));
  for (std::size_t i = 0; i < d.size(); ++i) out[i] /= z;
  return out;
}

/// Softmax applied independently to each row of a matrix.
inline Tensor softmax_rows(const Tensor& logits) {
  if (logits.empty()) throw Error("empty logits");
  Tensor out(logits.shape());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto in = logits.row_span(r);
    auto o = out.row_span(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) z += (o[j] = std::exp(in[j] - mx));
    for (double& x : o) x /= z;
  }
  return out;
}

/// Log density of N(mean, sigma^2 I) at x.
inline double gaussian_logpdf(const Tensor& x, const Tensor& mean, double sigma) {
  if (!(sigma > 0.0)) throw Error("non-positive sigma");
  require_same_shape(x, mean, "gaussian_logpdf");
  const double d = static_cast<double>(x.size());
  double q = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = x[i] - mean[i];
    q += r * r;
  }
  return -0.5 * d * std::log(2.0 * std::numbers::pi * sigma * sigma) - q / (2.0 * sigma * sigma);
}

// ---------------------------------------------------------------------------
// Finite differences.

inline constexpr double kDefaultFdStep = 1e-5;

/// Central-difference gradient of a scalar function.
template <class F>
Tensor finite_diff_grad(F&& f, const Tensor& x, double h = kDefaultFdStep) {
  Tensor g(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(static_cast<const Tensor&>(probe));
    probe[i] = orig - h;
    const double fm = f(static_cast<const Tensor&>(probe));
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw Error("finite_diff_grad: non-finite evaluation at index " + std::to_string(i));
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// Relative error with the denominator floored at `floor`.
inline double relative_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// ---------------------------------------------------------------------------
// Counter-based random numbers. The i-th draw of a stream is a pure function of
// (seed, i), so substreams derived by split() are reproducible regardless of
// the order in which they are consumed.

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed = 0) : key_(splitmix64(seed ^ 0x6A09E667F3BCC909ULL)) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() { return splitmix64(key_ + splitmix64(counter_++)); }

  /// Independent child stream identified by `stream`.
  Rng split(std::uint64_t stream) const {
    Rng child;
    child.key_ = splitmix64(key_ ^ splitmix64(stream + 0xA54FF53A5F1D36F1ULL));
    return child;
  }

  std::uint64_t counter() const { return counter_; }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    if (n == 0) throw Error("Rng::index on empty range");
    return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
  }

  /// Standard normal via Box-Muller (portable across standard libraries).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }
  double normal(double mean, double sd) { return mean + sd * normal(); }

  /// Draw an index with probability proportional to `weights`.
  std::size_t categorical(std::span<const double> weights) {
    const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    if (!(total > 0.0)) throw Error("Rng::categorical: weights must have positive sum");
    double u = uniform() * total;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (u < weights[i]) return i;
      u -= weights[i];
    }
    return weights.size() - 1;
  }

  Tensor normal_tensor(Shape shape, double sd = 1.0) {
    Tensor t(std::move(shape));
    for (auto& x : t.data()) x = normal() * sd;
    return t;
  }
  Tensor uniform_tensor(Shape shape, double lo, double hi) {
    Tensor t(std::move(shape));
    for (auto& x : t.data()) x = uniform(lo, hi);
    return t;
  }

  template <class It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::size_t>(last - first);
    for (std::size_t i = n; i > 1; --i) std::swap(first[i - 1], first[index(i)]);
  }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

// ---------------------------------------------------------------------------
// Stable 64-bit FNV-1a, used for config and dataset digests.

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xCBF29CE484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
  return s;
}

}  // namespace kfatt

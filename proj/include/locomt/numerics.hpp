// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major double tensors, masked softmax, a scoped FLOP counter and a
// portable seeded random generator.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace locomt {

/// Raised when operand shapes are incompatible.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

/// Shaped, row-major array of doubles. Rank-2 is the working rank; vectors
/// such as biases are stored as 1xN rows.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    check_dims();
  }

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (shape_size(shape_) != data_.size()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const {
    std::size_t c = 1;
    for (std::size_t i = 1; i < shape_.size(); ++i) c *= shape_[i];
    return c;
  }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols(), cols()};
  }

  Tensor& operator+=(const Tensor& other) {
    require_same_shape(other, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  Tensor& operator-=(const Tensor& other) {
    require_same_shape(other, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
  }

  Tensor& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

  void require_same_shape(const Tensor& other, const char* what) const {
    if (shape_ != other.shape_) {
      throw DimensionError(std::string(what) + ": shape mismatch " + shape_string(shape_) +
                           " vs " + shape_string(other.shape_));
    }
  }

 private:
  void check_dims() const {
    for (std::size_t d : shape_) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " +
                                       shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

inline Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
inline Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
inline Tensor operator*(Tensor a, double s) { return a *= s; }

inline Tensor zeros_like(const Tensor& t) {
  return t.empty() ? Tensor{} : Tensor(t.shape());
}

/// Largest |a - b| over all elements.
inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  a.require_same_shape(b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Largest element-wise |a - b| / max(|a|, |b|, floor).
inline double max_rel_diff(const Tensor& a, const Tensor& b, double floor = 1e-300) {
  a.require_same_shape(b, "max_rel_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double den = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    m = std::max(m, std::abs(a[i] - b[i]) / den);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Boolean masks

/// Dense rows x cols boolean grid; true means "query row may attend key col".
class Mask {
 public:
  Mask() = default;
  Mask(std::size_t rows, std::size_t cols, bool fill = false)
      : rows_(rows), cols_(cols), bits_(rows * cols, fill ? 1 : 0) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  bool operator()(std::size_t r, std::size_t c) const { return bits_[r * cols_ + c] != 0; }
  void set(std::size_t r, std::size_t c, bool v = true) { bits_[r * cols_ + c] = v ? 1 : 0; }

  std::size_t count() const {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
  }
  std::size_t row_count(std::size_t r) const {
    return static_cast<std::size_t>(
        std::count(bits_.begin() + static_cast<std::ptrdiff_t>(r * cols_),
                   bits_.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols_), std::uint8_t{1}));
  }

  friend bool operator==(const Mask&, const Mask&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint8_t> bits_;
};

// ---------------------------------------------------------------------------
// FLOP instrumentation

enum class FlopKind : std::size_t { embed, projection, score, mix, ffn, head, other };
inline constexpr std::size_t kFlopKinds = 7;

inline const char* flop_kind_name(FlopKind k) {
  static constexpr std::array<const char*, kFlopKinds> names{
      "embed", "projection", "score", "mix", "ffn", "head", "other"};
  return names[static_cast<std::size_t>(k)];
}

/// Matmul FLOPs split by role; a multiply-add counts as 2.
struct FlopCounter {
  std::array<std::uint64_t, kFlopKinds> by_kind{};

  std::uint64_t& operator[](FlopKind k) { return by_kind[static_cast<std::size_t>(k)]; }
  std::uint64_t operator[](FlopKind k) const { return by_kind[static_cast<std::size_t>(k)]; }
  std::uint64_t total() const {
    return std::accumulate(by_kind.begin(), by_kind.end(), std::uint64_t{0});
  }
  FlopCounter& operator+=(const FlopCounter& o) {
    for (std::size_t i = 0; i < kFlopKinds; ++i) by_kind[i] += o.by_kind[i];
    return *this;
  }
  friend bool operator==(const FlopCounter&, const FlopCounter&) = default;
};

namespace detail {
inline FlopCounter*& active_counter() {
  thread_local FlopCounter* counter = nullptr;
  return counter;
}
}  // namespace detail

/// Routes matmul FLOPs issued on this thread into `counter` while alive.
class FlopScope {
 public:
  explicit FlopScope(FlopCounter& counter) : previous_(detail::active_counter()) {
    detail::active_counter() = &counter;
  }
  ~FlopScope() { detail::active_counter() = previous_; }
  FlopScope(const FlopScope&) = delete;
  FlopScope& operator=(const FlopScope&) = delete;

 private:
  FlopCounter* previous_;
};

inline void count_flops(FlopKind kind, std::uint64_t flops) {
  if (FlopCounter* c = detail::active_counter()) (*c)[kind] += flops;
}

// ---------------------------------------------------------------------------
// Linear algebra

namespace detail {

/// Uninstrumented op(a) * op(b), where op transposes when the flag is set.
inline Tensor gemm(const Tensor& a, bool trans_a, const Tensor& b, bool trans_b) {
  const std::size_t m = trans_a ? a.cols() : a.rows();
  const std::size_t k = trans_a ? a.rows() : a.cols();
  const std::size_t kb = trans_b ? b.cols() : b.rows();
  const std::size_t n = trans_b ? b.rows() : b.cols();
  if (k != kb) {
    throw DimensionError("matmul: inner dimensions differ for " + shape_string(a.shape()) +
                         (trans_a ? "^T" : "") + " and " + shape_string(b.shape()) +
                         (trans_b ? "^T" : ""));
  }
  Tensor c({m, n});
  const std::size_t lda = a.cols();
  const std::size_t ldb = b.cols();
  auto ad = a.data();
  auto bd = b.data();
  auto cd = c.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = trans_a ? ad[p * lda + i] : ad[i * lda + p];
      if (av == 0.0) continue;
      double* crow = cd.data() + i * n;
      if (!trans_b) {
        const double* brow = bd.data() + p * ldb;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      } else {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * bd[j * ldb + p];
      }
    }
  }
  return c;
}

}  // namespace detail

/// Standard matrix product; adds 2*M*K*N to the active FLOP counter.
inline Tensor matmul(const Tensor& a, const Tensor& b, FlopKind kind = FlopKind::other) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw DimensionError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  count_flops(kind, 2ull * a.rows() * a.cols() * b.cols());
  return detail::gemm(a, false, b, false);
}

inline Tensor transpose(const Tensor& a) {
  Tensor t({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

/// Row-wise softmax restricted to `allowed`. Disallowed entries are exactly 0
/// and a row with no allowed entries is all zero.
inline Tensor softmax_rows(const Tensor& a, const Mask& allowed) {
  if (a.rank() != 2 || allowed.rows() != a.rows() || allowed.cols() != a.cols()) {
    throw DimensionError("softmax_rows: mask " + std::to_string(allowed.rows()) + "x" +
                         std::to_string(allowed.cols()) + " does not match " +
                         shape_string(a.shape()));
  }
  Tensor out(a.shape());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < a.cols(); ++c)
      if (allowed(r, c)) mx = std::max(mx, a(r, c));
    if (mx == -std::numeric_limits<double>::infinity()) continue;
    double sum = 0.0;
    for (std::size_t c = 0; c < a.cols(); ++c) {
      if (!allowed(r, c)) continue;
      const double e = std::exp(a(r, c) - mx);
      out(r, c) = e;
      sum += e;
    }
    for (std::size_t c = 0; c < a.cols(); ++c)
      if (allowed(r, c)) out(r, c) /= sum;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Random numbers

/// Seeded generator with a platform-independent output sequence: the raw
/// engine is mt19937_64 (fully specified by the standard) and all derived
/// distributions are computed here rather than by the library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer in the closed range [lo, hi]; unbiased by rejection.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    if (lo > hi) throw std::invalid_argument("uniform_int: lo > hi");
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo);
    if (span == std::numeric_limits<std::uint64_t>::max())
      return static_cast<std::int64_t>(engine_());
    const std::uint64_t range = span + 1;
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % range;
    std::uint64_t x;
    do x = engine_();
    while (x >= limit);
    return lo + static_cast<std::int64_t>(x % range);
  }

  /// Standard normal via Box-Muller; the second variate is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do u1 = uniform();
    while (u1 <= 0.0);
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  /// Independent child stream keyed by `stream` (splitmix64 of seed ^ stream).
  static Rng derive(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return Rng(z ^ (z >> 31));
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline Tensor rand_normal(Rng& rng, const Shape& shape, double stddev = 1.0) {
  Tensor t(shape);
  for (double& v : t.data()) v = stddev * rng.normal();
  return t;
}

inline std::int64_t rand_uniform_int(Rng& rng, std::int64_t lo, std::int64_t hi) {
  return rng.uniform_int(lo, hi);
}

}  // namespace locomt

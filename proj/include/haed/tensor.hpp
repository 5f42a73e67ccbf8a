#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdlib>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "haed/error.hpp"

namespace haed {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major tensor. Most kernels view it as a matrix of
/// rows() x cols(), where cols() is the last extent.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> values)
      : shape_(std::move(shape)), data_(std::move(values)) {
    require(data_.size() == shape_size(shape_), "DimensionMismatch",
            "tensor value count " + std::to_string(data_.size()) +
                " does not match shape " + shape_str(shape_));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }
  std::size_t rows() const noexcept {
    const std::size_t c = cols();
    return c == 0 ? 0 : data_.size() / c;
  }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }
  T& at(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols(), cols()}; }
  std::span<const T> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols(), cols()};
  }

  void reshape(Shape shape) {
    require(shape_size(shape) == data_.size(), "DimensionMismatch",
            "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    shape_ = std::move(shape);
  }
  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

// ---------------------------------------------------------------------------
// Parallelism. Work is always split by output rows, and every output element
// is accumulated in the same order regardless of the split, so results are
// bit-identical for any thread count.

inline std::size_t& thread_limit_storage() {
  static std::size_t limit = [] {
    std::size_t n = 1;
    if (const char* env = std::getenv("HAEL_THREADS")) {
      n = static_cast<std::size_t>(std::max(1L, std::strtol(env, nullptr, 10)));
    } else {
      n = std::max(1U, std::thread::hardware_concurrency());
    }
    return n;
  }();
  return limit;
}

inline std::size_t thread_limit() { return thread_limit_storage(); }
inline void set_thread_limit(std::size_t n) { thread_limit_storage() = std::max<std::size_t>(1, n); }

/// Calls fn(begin, end) over disjoint row ranges covering [0, rows).
template <typename Fn>
void parallel_rows(std::size_t rows, std::size_t work_per_row, Fn&& fn) {
  constexpr std::size_t kMinWork = 1 << 18;
  std::size_t threads = std::min(thread_limit(), rows);
  if (threads > 1 && rows * work_per_row < kMinWork * threads) {
    threads = std::max<std::size_t>(1, rows * work_per_row / kMinWork);
  }
  if (threads <= 1) {
    fn(std::size_t{0}, rows);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads - 1);
  const std::size_t chunk = (rows + threads - 1) / threads;
  for (std::size_t t = 1; t < threads; ++t) {
    const std::size_t b = t * chunk;
    const std::size_t e = std::min(rows, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(std::size_t{0}, std::min(rows, chunk));
  for (auto& th : pool) th.join();
}

// ---------------------------------------------------------------------------
// Matrix kernels. All accumulate into C (C += ...). The inner loop runs over
// contiguous columns; the reduction index always advances in ascending order.

namespace kernel {

/// C[n,m] += A[n,k] * B[k,m]
template <typename T>
void gemm_nn(std::size_t n, std::size_t k, std::size_t m, const T* a, const T* b, T* c) {
  parallel_rows(n, k * m, [&](std::size_t r0, std::size_t r1) {
    std::size_t i = r0;
    for (; i + 4 <= r1; i += 4) {
      T* c0 = c + i * m;
      T* c1 = c0 + m;
      T* c2 = c1 + m;
      T* c3 = c2 + m;
      for (std::size_t p = 0; p < k; ++p) {
        const T a0 = a[i * k + p];
        const T a1 = a[(i + 1) * k + p];
        const T a2 = a[(i + 2) * k + p];
        const T a3 = a[(i + 3) * k + p];
        const T* br = b + p * m;
        for (std::size_t j = 0; j < m; ++j) {
          const T bv = br[j];
          c0[j] += a0 * bv;
          c1[j] += a1 * bv;
          c2[j] += a2 * bv;
          c3[j] += a3 * bv;
        }
      }
    }
    for (; i < r1; ++i) {
      T* ci = c + i * m;
      for (std::size_t p = 0; p < k; ++p) {
        const T ai = a[i * k + p];
        const T* br = b + p * m;
        for (std::size_t j = 0; j < m; ++j) ci[j] += ai * br[j];
      }
    }
  });
}

/// Writes B^T (m x k) given B (k x m).
template <typename T>
std::vector<T> transpose(std::size_t k, std::size_t m, const T* b) {
  std::vector<T> out(k * m);
  constexpr std::size_t kBlock = 32;
  for (std::size_t p0 = 0; p0 < k; p0 += kBlock) {
    for (std::size_t j0 = 0; j0 < m; j0 += kBlock) {
      const std::size_t p1 = std::min(k, p0 + kBlock);
      const std::size_t j1 = std::min(m, j0 + kBlock);
      for (std::size_t p = p0; p < p1; ++p)
        for (std::size_t j = j0; j < j1; ++j) out[j * k + p] = b[p * m + j];
    }
  }
  return out;
}

/// C[n,k] += A[n,m] * B[k,m]^T
template <typename T>
void gemm_nt(std::size_t n, std::size_t m, std::size_t k, const T* a, const T* b, T* c) {
  const std::vector<T> bt = transpose(k, m, b);
  gemm_nn(n, m, k, a, bt.data(), c);
}

/// C[k,m] += A[n,k]^T * B[n,m]
template <typename T>
void gemm_tn(std::size_t n, std::size_t k, std::size_t m, const T* a, const T* b, T* c) {
  parallel_rows(k, n * m, [&](std::size_t p0, std::size_t p1) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
      const T* b0 = b + i * m;
      const T* b1 = b0 + m;
      const T* b2 = b1 + m;
      const T* b3 = b2 + m;
      for (std::size_t p = p0; p < p1; ++p) {
        const T a0 = a[i * k + p];
        const T a1 = a[(i + 1) * k + p];
        const T a2 = a[(i + 2) * k + p];
        const T a3 = a[(i + 3) * k + p];
        T* cr = c + p * m;
        for (std::size_t j = 0; j < m; ++j) {
          cr[j] = (((cr[j] + a0 * b0[j]) + a1 * b1[j]) + a2 * b2[j]) + a3 * b3[j];
        }
      }
    }
    for (; i < n; ++i) {
      const T* bi = b + i * m;
      for (std::size_t p = p0; p < p1; ++p) {
        const T ai = a[i * k + p];
        T* cr = c + p * m;
        for (std::size_t j = 0; j < m; ++j) cr[j] += ai * bi[j];
      }
    }
  });
}

}  // namespace kernel
}  // namespace haed

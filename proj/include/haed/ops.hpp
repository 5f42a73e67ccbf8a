#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "haed/autodiff.hpp"

// Differentiable operations over Graph<T>. Unless stated otherwise an op
// treats its inputs as matrices (rows x cols, cols = last extent).

namespace haed {

namespace detail {

template <typename T>
void check_same(const Var<T>& a, const Var<T>& b, const char* op) {
  require(a.value().shape() == b.value().shape(), "DimensionMismatch",
          std::string(op) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  T* d = dst.data();
  const T* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

/// log(sum(exp(x))) with max-subtraction.
template <typename T>
T log_sum_exp(std::span<const T> x) {
  T mx = -std::numeric_limits<T>::infinity();
  for (T v : x) mx = std::max(mx, v);
  T s{0};
  for (T v : x) s += std::exp(v - mx);
  return mx + std::log(s);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// [n,k] x [k,m] -> [n,m]
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& A = a.value();
  const auto& B = b.value();
  const std::size_t n = A.rows(), k = A.cols(), m = B.cols();
  require(B.rows() == k, "DimensionMismatch",
          "matmul: " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
  Tensor<T> out({n, m});
  kernel::gemm_nn(n, k, m, A.data(), B.data(), out.data());
  Graph<T>& g = *a.graph;
  return g.op(std::move(out), {a, b}, [&g, a, b, n, k, m] {
    return [&g, a, b, n, k, m](const Tensor<T>& dc) {
      if (g.needs_grad(a.id)) kernel::gemm_nt(n, m, k, dc.data(), b.value().data(), g.grad(a.id).data());
      if (g.needs_grad(b.id)) kernel::gemm_tn(n, k, m, a.value().data(), dc.data(), g.grad(b.id).data());
    };
  });
}

/// [n,k] x [m,k]^T -> [n,m]
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  const auto& A = a.value();
  const auto& B = b.value();
  const std::size_t n = A.rows(), k = A.cols(), m = B.rows();
  require(B.cols() == k, "DimensionMismatch",
          "matmul_nt: " + shape_str(A.shape()) + " x " + shape_str(B.shape()) + "^T");
  Tensor<T> out({n, m});
  kernel::gemm_nt(n, k, m, A.data(), B.data(), out.data());
  Graph<T>& g = *a.graph;
  return g.op(std::move(out), {a, b}, [&g, a, b, n, k, m] {
    return [&g, a, b, n, k, m](const Tensor<T>& dc) {
      if (g.needs_grad(a.id)) kernel::gemm_nn(n, m, k, dc.data(), b.value().data(), g.grad(a.id).data());
      if (g.needs_grad(b.id)) kernel::gemm_tn(n, m, k, dc.data(), a.value().data(), g.grad(b.id).data());
    };
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::check_same(a, b, "add");
  Tensor<T> out = a.value();
  const T* bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  Graph<T>& g = *a.graph;
  return g.op(std::move(out), {a, b}, [&g, a, b] {
    return [&g, a, b](const Tensor<T>& d) {
      if (g.needs_grad(a.id)) detail::accumulate(g.grad(a.id), d);
      if (g.needs_grad(b.id)) detail::accumulate(g.grad(b.id), d);
    };
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::check_same(a, b, "sub");
  Tensor<T> out = a.value();
  const T* bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  Graph<T>& g = *a.graph;
  return g.op(std::move(out), {a, b}, [&g, a, b] {
    return [&g, a, b](const Tensor<T>& d) {
      if (g.needs_grad(a.id)) detail::accumulate(g.grad(a.id), d);
      if (g.needs_grad(b.id)) {
        auto& gb = g.grad(b.id);
        for (std::size_t i = 0; i < d.size(); ++i) gb[i] -= d[i];
      }
    };
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::check_same(a, b, "mul");
  Tensor<T> out = a.value();
  const T* bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  Graph<T>& g = *a.graph;
  return g.op(std::move(out), {a, b}, [&g, a, b] {
    return [&g, a, b](const Tensor<T>& d) {
      if (g.needs_grad(a.id)) {
        auto& ga = g.grad(a.id);
        const auto& bv2 = b.value();
        for (std::size_t i = 0; i < d.size(); ++i) ga[i] += d[i] * bv2[i];
      }
      if (g.needs_grad(b.id)) {
        auto& gb = g.grad(b.id);
        const auto& av = a.value();
        for (std::size_t i = 0; i < d.size(); ++i) gb[i] += d[i] * av[i];
      }
    };
  });
}

/// scale * a + shift
template <typename T>
Var<T> affine(Var<T> a, T scale, T shift = T{0}) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = scale * v + shift;
  Graph<T>& g = *a.graph;
  return g.op(std::move(out), {a}, [&g, a, scale] {
    return [&g, a, scale](const Tensor<T>& d) {
      auto& ga = g.grad(a.id);
      for (std::size_t i = 0; i < d.size(); ++i) ga[i] += scale * d[i];
    };
  });
}

/// [n,m] + broadcast bias [m]
template <typename T>
Var<T> add_bias(Var<T> a, Var<T> bias) {
  const std::size_t m = a.cols();
  require(bias.value().size() == m, "DimensionMismatch",
          "add_bias: " + shape_str(a.shape()) + " + " + shape_str(bias.shape()));
  Tensor<T> out = a.value();
  const T* bv = bias.value().data();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    T* row = out.data() + r * m;
    for (std::size_t j = 0; j < m; ++j) row[j] += bv[j];
  }
  Graph<T>& g = *a.graph;
  return g.op(std::move(out), {a, bias}, [&g, a, bias, m] {
    return [&g, a, bias, m](const Tensor<T>& d) {
      if (g.needs_grad(a.id)) detail::accumulate(g.grad(a.id), d);
      if (g.needs_grad(bias.id)) {
        auto& gb = g.grad(bias.id);
        for (std::size_t r = 0; r < d.rows(); ++r)
          for (std::size_t j = 0; j < m; ++j) gb[j] += d[r * m + j];
      }
    };
  });
}

namespace detail {

/// Elementwise unary op given f(x) and f'(x) expressed via (x, y).
template <typename T, typename F, typename DF>
Var<T> unary(Var<T> a, F f, DF df) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = f(v);
  Graph<T>& g = *a.graph;
  const std::size_t out_id = g.node_count();
  return g.op(std::move(out), {a}, [&g, a, out_id, df] {
    return [&g, a, out_id, df](const Tensor<T>& d) {
      auto& ga = g.grad(a.id);
      const auto& x = a.value();
      const auto& y = g.value(out_id);
      for (std::size_t i = 0; i < d.size(); ++i) ga[i] += d[i] * df(x[i], y[i]);
    };
  });
}

}  // namespace detail

template <typename T>
Var<T> sigmoid(Var<T> a) {
  return detail::unary(
      a, [](T x) { return T{1} / (T{1} + std::exp(-x)); },
      [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Var<T> tanh(Var<T> a) {
  return detail::unary(
      a, [](T x) { return std::tanh(x); }, [](T, T y) { return T{1} - y * y; });
}

template <typename T>
Var<T> relu(Var<T> a) {
  return detail::unary(
      a, [](T x) { return x > T{0} ? x : T{0}; }, [](T x, T) { return x > T{0} ? T{1} : T{0}; });
}

/// tanh-approximated GELU.
template <typename T>
Var<T> gelu(Var<T> a) {
  constexpr T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  constexpr T c3 = static_cast<T>(0.044715);
  return detail::unary(
      a,
      [](T x) { return T{0.5} * x * (T{1} + std::tanh(c * (x + c3 * x * x * x))); },
      [](T x, T) {
        const T u = c * (x + c3 * x * x * x);
        const T t = std::tanh(u);
        const T du = c * (T{1} + T{3} * c3 * x * x);
        return T{0.5} * (T{1} + t) + T{0.5} * x * (T{1} - t * t) * du;
      });
}

/// Elementwise minimum; ties route the gradient to `a`.
template <typename T>
Var<T> minimum(Var<T> a, Var<T> b) {
  detail::check_same(a, b, "minimum");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(out[i], bv[i]);
  Graph<T>& g = *a.graph;
  return g.op(std::move(out), {a, b}, [&g, a, b] {
    return [&g, a, b](const Tensor<T>& d) {
      const auto& av = a.value();
      const auto& bv2 = b.value();
      for (std::size_t i = 0; i < d.size(); ++i) {
        const bool take_a = av[i] <= bv2[i];
        if (take_a && g.needs_grad(a.id)) g.grad(a.id)[i] += d[i];
        if (!take_a && g.needs_grad(b.id)) g.grad(b.id)[i] += d[i];
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Structural

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> out = a.value();
  out.reshape(std::move(shape));
  Graph<T>& g = *a.graph;
  return g.op(std::move(out), {a}, [&g, a] {
    return [&g, a](const Tensor<T>& d) { detail::accumulate(g.grad(a.id), d); };
  });
}

/// Columns [begin, end) of a matrix.
template <typename T>
Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t end) {
  const auto& A = a.value();
  const std::size_t n = A.rows(), m = A.cols();
  require(begin <= end && end <= m, "OutOfRange", "slice_cols out of range");
  const std::size_t w = end - begin;
  Tensor<T> out({n, w});
  for (std::size_t r = 0; r < n; ++r)
    std::copy_n(A.data() + r * m + begin, w, out.data() + r * w);
  Graph<T>& g = *a.graph;
  return g.op(std::move(out), {a}, [&g, a, begin, w, m] {
    return [&g, a, begin, w, m](const Tensor<T>& d) {
      auto& ga = g.grad(a.id);
      for (std::size_t r = 0; r < d.rows(); ++r)
        for (std::size_t j = 0; j < w; ++j) ga[r * m + begin + j] += d[r * w + j];
    };
  });
}

/// Zero-pads (w < width) or truncates (w > width) the columns to `width`.
template <typename T>
Var<T> pad_cols(Var<T> a, std::size_t width) {
  const auto& A = a.value();
  const std::size_t n = A.rows(), m = A.cols();
  const std::size_t keep = std::min(m, width);
  Tensor<T> out({n, width});
  for (std::size_t r = 0; r < n; ++r)
    std::copy_n(A.data() + r * m, keep, out.data() + r * width);
  Graph<T>& g = *a.graph;
  return g.op(std::move(out), {a}, [&g, a, keep, m, width] {
    return [&g, a, keep, m, width](const Tensor<T>& d) {
      auto& ga = g.grad(a.id);
      for (std::size_t r = 0; r < d.rows(); ++r)
        for (std::size_t j = 0; j < keep; ++j) ga[r * m + j] += d[r * width + j];
    };
  });
}

/// Stacks matrices with equal column counts vertically.
template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), "DimensionMismatch", "concat_rows of nothing");
  const std::size_t m = parts.front().cols();
  std::size_t n = 0;
  for (const auto& p : parts) {
    require(p.cols() == m, "DimensionMismatch", "concat_rows: column mismatch");
    n += p.rows();
  }
  Tensor<T> out({n, m});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy_n(p.value().data(), p.value().size(), out.data() + off);
    off += p.value().size();
  }
  Graph<T>& g = *parts.front().graph;
  return g.op(std::move(out), std::span<const Var<T>>(parts), [&g, parts] {
    return [&g, parts](const Tensor<T>& d) {
      std::size_t off = 0;
      for (const auto& p : parts) {
        const std::size_t sz = p.value().size();
        if (g.needs_grad(p.id)) {
          auto& gp = g.grad(p.id);
          for (std::size_t i = 0; i < sz; ++i) gp[i] += d[off + i];
        }
        off += sz;
      }
    };
  });
}

/// Sentinel row index for gather_rows: produces a zero row.
inline constexpr std::size_t kZeroRow = static_cast<std::size_t>(-1);

/// out[r] = a[index[r]] (or zeros for kZeroRow). Repeated indices are allowed;
/// their gradients accumulate.
template <typename T>
Var<T> gather_rows(Var<T> a, std::vector<std::size_t> index) {
  const auto& A = a.value();
  const std::size_t n = A.rows(), m = A.cols();
  Tensor<T> out({index.size(), m});
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] == kZeroRow) continue;
    require(index[r] < n, "OutOfRange",
            "gather_rows: index " + std::to_string(index[r]) + " >= " + std::to_string(n));
    std::copy_n(A.data() + index[r] * m, m, out.data() + r * m);
  }
  Graph<T>& g = *a.graph;
  return g.op(std::move(out), {a}, [&g, a, m, &index] {
    return [&g, a, m, index = std::move(index)](const Tensor<T>& d) {
      auto& ga = g.grad(a.id);
      for (std::size_t r = 0; r < index.size(); ++r) {
        if (index[r] == kZeroRow) continue;
        T* dst = ga.data() + index[r] * m;
        const T* src = d.data() + r * m;
        for (std::size_t j = 0; j < m; ++j) dst[j] += src[j];
      }
    };
  });
}

/// Row-wise select: out[r] = take_a[r] ? a[r] : b[r].
template <typename T>
Var<T> where_rows(Var<T> a, Var<T> b, std::vector<std::uint8_t> take_a) {
  detail::check_same(a, b, "where_rows");
  const std::size_t m = a.cols();
  require(take_a.size() == a.rows(), "DimensionMismatch", "where_rows: mask length");
  Tensor<T> out = a.value();
  for (std::size_t r = 0; r < take_a.size(); ++r)
    if (!take_a[r]) std::copy_n(b.value().data() + r * m, m, out.data() + r * m);
  Graph<T>& g = *a.graph;
  return g.op(std::move(out), {a, b}, [&g, a, b, m, &take_a] {
    return [&g, a, b, m, take_a = std::move(take_a)](const Tensor<T>& d) {
      for (std::size_t r = 0; r < take_a.size(); ++r) {
        const std::size_t id = take_a[r] ? a.id : b.id;
        if (!g.needs_grad(id)) continue;
        T* dst = g.grad(id).data() + r * m;
        for (std::size_t j = 0; j < m; ++j) dst[j] += d[r * m + j];
      }
    };
  });
}

/// Sum of all elements -> [1].
template <typename T>
Var<T> sum(Var<T> a) {
  T s{0};
  for (T v : a.value().values()) s += v;
  Graph<T>& g = *a.graph;
  return g.op(Tensor<T>({1}, s), {a}, [&g, a] {
    return [&g, a](const Tensor<T>& d) {
      for (auto& v : g.grad(a.id).values()) v += d[0];
    };
  });
}

// ---------------------------------------------------------------------------
// Normalization and attention

/// Per-row layer normalization with learned gain and bias.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = static_cast<T>(1e-5)) {
  const auto& X = x.value();
  const std::size_t n = X.rows(), m = X.cols();
  require(gain.value().size() == m && bias.value().size() == m, "DimensionMismatch",
          "layer_norm: parameter width");
  Tensor<T> out({n, m});
  std::vector<T> xhat(n * m), inv_std(n);
  const T* gv = gain.value().data();
  const T* bv = bias.value().data();
  for (std::size_t r = 0; r < n; ++r) {
    const T* xr = X.data() + r * m;
    T mean{0};
    for (std::size_t j = 0; j < m; ++j) mean += xr[j];
    mean /= static_cast<T>(m);
    T var{0};
    for (std::size_t j = 0; j < m; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<T>(m);
    const T is = T{1} / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < m; ++j) {
      xhat[r * m + j] = (xr[j] - mean) * is;
      out[r * m + j] = xhat[r * m + j] * gv[j] + bv[j];
    }
  }
  Graph<T>& g = *x.graph;
  return g.op(std::move(out), {x, gain, bias}, [&g, x, gain, bias, n, m, &xhat, &inv_std] {
    return [&g, x, gain, bias, n, m, xhat = std::move(xhat),
            inv_std = std::move(inv_std)](const Tensor<T>& d) {
      const T* gv2 = gain.value().data();
      if (g.needs_grad(gain.id)) {
        auto& gg = g.grad(gain.id);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < m; ++j) gg[j] += d[r * m + j] * xhat[r * m + j];
      }
      if (g.needs_grad(bias.id)) {
        auto& gb = g.grad(bias.id);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < m; ++j) gb[j] += d[r * m + j];
      }
      if (!g.needs_grad(x.id)) return;
      auto& gx = g.grad(x.id);
      for (std::size_t r = 0; r < n; ++r) {
        T s1{0}, s2{0};
        for (std::size_t j = 0; j < m; ++j) {
          const T dy = d[r * m + j] * gv2[j];
          s1 += dy;
          s2 += dy * xhat[r * m + j];
        }
        s1 /= static_cast<T>(m);
        s2 /= static_cast<T>(m);
        for (std::size_t j = 0; j < m; ++j) {
          const T dy = d[r * m + j] * gv2[j];
          gx[r * m + j] += inv_std[r] * (dy - s1 - xhat[r * m + j] * s2);
        }
      }
    };
  });
}

/// Multi-head causal self-attention core. q, k, v are [n, heads*head_dim];
/// rows are grouped into consecutive windows of the given lengths and each
/// row attends only to rows at or before it within its own window.
template <typename T>
Var<T> causal_attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads,
                        std::vector<std::size_t> windows) {
  detail::check_same(q, k, "causal_attention");
  detail::check_same(q, v, "causal_attention");
  const std::size_t n = q.rows(), width = q.cols();
  require(heads > 0 && width % heads == 0, "DimensionMismatch",
          "attention: width not divisible by heads");
  std::size_t total = 0;
  for (auto w : windows) total += w;
  require(total == n, "DimensionMismatch", "attention: windows do not cover rows");
  const std::size_t hd = width / heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(hd));

  // Probabilities per (window, head): a packed lower-triangular block.
  std::vector<std::size_t> prob_offset(windows.size());
  std::size_t prob_total = 0;
  for (std::size_t w = 0; w < windows.size(); ++w) {
    prob_offset[w] = prob_total;
    prob_total += heads * windows[w] * (windows[w] + 1) / 2;
  }
  std::vector<T> probs(prob_total);
  Tensor<T> out({n, width});
  const T* Q = q.value().data();
  const T* K = k.value().data();
  const T* V = v.value().data();

  std::size_t row0 = 0;
  for (std::size_t w = 0; w < windows.size(); ++w) {
    const std::size_t len = windows[w];
    for (std::size_t h = 0; h < heads; ++h) {
      T* p = probs.data() + prob_offset[w] + h * len * (len + 1) / 2;
      for (std::size_t i = 0; i < len; ++i) {
        T* pi = p + i * (i + 1) / 2;
        const T* qi = Q + (row0 + i) * width + h * hd;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const T* kj = K + (row0 + j) * width + h * hd;
          T s{0};
          for (std::size_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
          pi[j] = s * scale;
          mx = std::max(mx, pi[j]);
        }
        T z{0};
        for (std::size_t j = 0; j <= i; ++j) {
          pi[j] = std::exp(pi[j] - mx);
          z += pi[j];
        }
        T* oi = out.data() + (row0 + i) * width + h * hd;
        for (std::size_t j = 0; j <= i; ++j) {
          pi[j] /= z;
          const T* vj = V + (row0 + j) * width + h * hd;
          for (std::size_t c = 0; c < hd; ++c) oi[c] += pi[j] * vj[c];
        }
      }
    }
    row0 += len;
  }

  Graph<T>& g = *q.graph;
  return g.op(std::move(out), {q, k, v},
              [&g, q, k, v, heads, hd, width, scale, &windows, &prob_offset, &probs] {
    return [&g, q, k, v, heads, hd, width, scale, windows = std::move(windows),
            prob_offset = std::move(prob_offset), probs = std::move(probs)](const Tensor<T>& d) {
      const T* Q2 = q.value().data();
      const T* K2 = k.value().data();
      const T* V2 = v.value().data();
      T* dQ = g.needs_grad(q.id) ? g.grad(q.id).data() : nullptr;
      T* dK = g.needs_grad(k.id) ? g.grad(k.id).data() : nullptr;
      T* dV = g.needs_grad(v.id) ? g.grad(v.id).data() : nullptr;
      std::vector<T> dp;
      std::size_t r0 = 0;
      for (std::size_t w = 0; w < windows.size(); ++w) {
        const std::size_t len = windows[w];
        for (std::size_t h = 0; h < heads; ++h) {
          const T* p = probs.data() + prob_offset[w] + h * len * (len + 1) / 2;
          for (std::size_t i = 0; i < len; ++i) {
            const T* pi = p + i * (i + 1) / 2;
            const T* doi = d.data() + (r0 + i) * width + h * hd;
            dp.assign(i + 1, T{0});
            T dot{0};
            for (std::size_t j = 0; j <= i; ++j) {
              const T* vj = V2 + (r0 + j) * width + h * hd;
              T s{0};
              for (std::size_t c = 0; c < hd; ++c) s += doi[c] * vj[c];
              if (dV) {
                T* dvj = dV + (r0 + j) * width + h * hd;
                for (std::size_t c = 0; c < hd; ++c) dvj[c] += pi[j] * doi[c];
              }
              dp[j] = s;
              dot += pi[j] * s;
            }
            const T* qi = Q2 + (r0 + i) * width + h * hd;
            for (std::size_t j = 0; j <= i; ++j) {
              const T ds = pi[j] * (dp[j] - dot) * scale;
              const T* kj = K2 + (r0 + j) * width + h * hd;
              if (dQ) {
                T* dqi = dQ + (r0 + i) * width + h * hd;
                for (std::size_t c = 0; c < hd; ++c) dqi[c] += ds * kj[c];
              }
              if (dK) {
                T* dkj = dK + (r0 + j) * width + h * hd;
                for (std::size_t c = 0; c < hd; ++c) dkj[c] += ds * qi[c];
              }
            }
          }
        }
        r0 += len;
      }
    };
  });
}

/// Row-wise softmax.
template <typename T>
Var<T> softmax_rows(Var<T> a) {
  const std::size_t m = a.cols();
  Tensor<T> out = a.value();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    T* row = out.data() + r * m;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < m; ++j) mx = std::max(mx, row[j]);
    T z{0};
    for (std::size_t j = 0; j < m; ++j) z += (row[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < m; ++j) row[j] /= z;
  }
  Graph<T>& g = *a.graph;
  const std::size_t out_id = g.node_count();
  return g.op(std::move(out), {a}, [&g, a, m, out_id] {
    return [&g, a, m, out_id](const Tensor<T>& d) {
      const auto& y = g.value(out_id);
      auto& ga = g.grad(a.id);
      for (std::size_t r = 0; r < y.rows(); ++r) {
        T dot{0};
        for (std::size_t j = 0; j < m; ++j) dot += d[r * m + j] * y[r * m + j];
        for (std::size_t j = 0; j < m; ++j) ga[r * m + j] += y[r * m + j] * (d[r * m + j] - dot);
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Losses

/// Marks a row of cross_entropy_rows as excluded from the loss.
inline constexpr int kIgnoreTarget = -1;

/// Sum over non-ignored rows of -log softmax(logits[r])[targets[r]], in nats.
/// Returns a [1] tensor.
template <typename T>
Var<T> cross_entropy_rows(Var<T> logits, std::vector<int> targets) {
  const auto& L = logits.value();
  const std::size_t n = L.rows(), m = L.cols();
  require(targets.size() == n, "DimensionMismatch", "cross_entropy_rows: target count");
  require(L.all_finite(), "NonFinite", "cross_entropy_rows: non-finite logits");
  std::vector<T> lse(n, T{0});
  T total{0};
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] == kIgnoreTarget) continue;
    require(targets[r] >= 0 && static_cast<std::size_t>(targets[r]) < m, "OutOfRange",
            "cross_entropy_rows: target " + std::to_string(targets[r]) + " out of range");
    const std::span<const T> row(L.data() + r * m, m);
    lse[r] = detail::log_sum_exp(row);
    total += lse[r] - row[static_cast<std::size_t>(targets[r])];
  }
  Graph<T>& g = *logits.graph;
  return g.op(Tensor<T>({1}, std::vector<T>{total}), {logits}, [&g, logits, m, &targets, &lse] {
    return [&g, logits, m, targets = std::move(targets), lse = std::move(lse)](const Tensor<T>& d) {
      const auto& L2 = logits.value();
      auto& gl = g.grad(logits.id);
      for (std::size_t r = 0; r < targets.size(); ++r) {
        if (targets[r] == kIgnoreTarget) continue;
        for (std::size_t j = 0; j < m; ++j) gl[r * m + j] += d[0] * std::exp(L2[r * m + j] - lse[r]);
        gl[r * m + static_cast<std::size_t>(targets[r])] -= d[0];
      }
    };
  });
}

}  // namespace haed

// SPDX-License-Identifier: Apache-2.0
#pragma once

// Differentiable operations over msdino::Tensor. Every op here has a
// hand-written backward that is checked against central finite differences in
// tests/ops_test.cpp.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "msdino/tensor.hpp"

namespace msdino::ops {

namespace detail {

using msdino::detail::make_result;
using msdino::detail::Node;
using msdino::detail::parent_grad;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using MapM = Eigen::Map<RowMat<T>>;

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

template <typename T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.dims() == b.dims(), std::string(op) + ": shape mismatch " + shape_str(a.dims()) +
                                    " vs " + shape_str(b.dims()));
}

template <typename T>
std::size_t last_dim(const Tensor<T>& t) {
  return t.dims().back();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_result<T>(a.dims(), std::move(out), {a, b}, [](detail::Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (T* g = detail::parent_grad(self, k))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return detail::make_result<T>(a.dims(), std::move(out), {a, b}, [](detail::Node<T>& self) {
    if (T* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (T* g = detail::parent_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_result<T>(a.dims(), std::move(out), {a, b}, [](detail::Node<T>& self) {
    const auto& av = self.parents[0]->data;
    const auto& bv = self.parents[1]->data;
    if (T* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    if (T* g = detail::parent_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  return detail::make_result<T>(a.dims(), std::move(out), {a}, [s](detail::Node<T>& self) {
    if (T* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * s;
  });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  return mul(a, a);
}

/// x + b broadcast along the last axis.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  const std::size_t c = detail::last_dim(x);
  detail::require(b.numel() == c, "add_bias: bias length " + std::to_string(b.numel()) +
                                      " != last dim " + std::to_string(c));
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + b.data()[i % c];
  return detail::make_result<T>(x.dims(), std::move(out), {x, b}, [c](detail::Node<T>& self) {
    if (T* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (T* g = detail::parent_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % c] += self.grad[i];
  });
}

namespace detail {

template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& x, F f, DF df) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x.data()[i]);
  return make_result<T>(x.dims(), std::move(out), {x}, [df](Node<T>& self) {
    if (T* g = parent_grad(self, 0)) {
      const auto& xv = self.parents[0]->data;
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        g[i] += self.grad[i] * df(xv[i], self.data[i]);
    }
  });
}

}  // namespace detail

/// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T k = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T c = T(0.044715);
  return detail::unary(
      x,
      [](T v) { return T(0.5) * v * (T(1) + std::tanh(k * (v + c * v * v * v))); },
      [](T v, T) {
        const T t = std::tanh(k * (v + c * v * v * v));
        return T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * k * (T(1) + T(3) * c * v * v);
      });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope = T(0.2)) {
  return detail::unary(
      x, [slope](T v) { return v > T(0) ? v : slope * v; },
      [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T y) { return y * (T(1) - y); });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// Rank-2 matrix product.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 operands required");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  detail::require(k == b.dim(0), "matmul: inner dims " + shape_str(a.dims()) + " x " +
                                     shape_str(b.dims()));
  std::vector<T> out(m * n, T{0});
  detail::MapM<T>(out.data(), m, n).noalias() =
      detail::MapC<T>(a.data().data(), m, k) * detail::MapC<T>(b.data().data(), k, n);
  return detail::make_result<T>({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node<T>& self) {
    detail::MapC<T> dy(self.grad.data(), m, n);
    if (T* g = detail::parent_grad(self, 0))
      detail::MapM<T>(g, m, k).noalias() += dy * detail::MapC<T>(self.parents[1]->data.data(), k, n).transpose();
    if (T* g = detail::parent_grad(self, 1))
      detail::MapM<T>(g, k, n).noalias() += detail::MapC<T>(self.parents[0]->data.data(), m, k).transpose() * dy;
  });
}

/// y = x W^T + b with W stored [out x in] and x [rows x in].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {}) {
  detail::require(x.rank() == 2 && w.rank() == 2, "linear: rank-2 input and weight required");
  const std::size_t rows = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
  detail::require(w.dim(1) == in, "linear: input width " + std::to_string(in) + " vs weight " +
                                      shape_str(w.dims()));
  const bool has_bias = b.defined();
  if (has_bias) detail::require(b.numel() == out_dim, "linear: bias length mismatch");
  std::vector<T> out(rows * out_dim, T{0});
  detail::MapM<T> y(out.data(), rows, out_dim);
  y.noalias() = detail::MapC<T>(x.data().data(), rows, in) *
                detail::MapC<T>(w.data().data(), out_dim, in).transpose();
  if (has_bias)
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < out_dim; ++c) out[r * out_dim + c] += b.data()[c];
  std::vector<Tensor<T>> parents{x, w};
  if (has_bias) parents.push_back(b);
  return detail::make_result<T>(
      {rows, out_dim}, std::move(out), std::move(parents),
      [rows, in, out_dim, has_bias](detail::Node<T>& self) {
        detail::MapC<T> dy(self.grad.data(), rows, out_dim);
        if (T* g = detail::parent_grad(self, 0))
          detail::MapM<T>(g, rows, in).noalias() +=
              dy * detail::MapC<T>(self.parents[1]->data.data(), out_dim, in);
        if (T* g = detail::parent_grad(self, 1))
          detail::MapM<T>(g, out_dim, in).noalias() +=
              dy.transpose() * detail::MapC<T>(self.parents[0]->data.data(), rows, in);
        if (has_bias)
          if (T* g = detail::parent_grad(self, 2))
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t c = 0; c < out_dim; ++c) g[c] += self.grad[r * out_dim + c];
      });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require(a.rank() == 2, "transpose: rank-2 required");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
  return detail::make_result<T>({n, m}, std::move(out), {a}, [m, n](detail::Node<T>& self) {
    if (T* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape dims) {
  detail::require(shape_numel(dims) == a.numel(),
                  "reshape: " + shape_str(a.dims()) + " -> " + shape_str(dims));
  std::vector<T> out(a.data().begin(), a.data().end());
  return detail::make_result<T>(std::move(dims), std::move(out), {a}, [](detail::Node<T>& self) {
    if (T* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Normalisation and softmax

namespace detail {

inline void split_axis(const Shape& dims, int axis, std::size_t& outer, std::size_t& n,
                       std::size_t& inner) {
  const int rank = static_cast<int>(dims.size());
  if (axis < 0) axis += rank;
  require(axis >= 0 && axis < rank, "softmax: axis out of range");
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= dims[i];
  n = dims[axis];
  for (int i = axis + 1; i < rank; ++i) inner *= dims[i];
}

}  // namespace detail

/// softmax(x / temperature) along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1, T temperature = T(1)) {
  if (!(temperature > T(0))) throw ParameterError("softmax: temperature must be positive");
  std::size_t outer, n, inner;
  detail::split_axis(x.dims(), axis, outer, n, inner);
  std::vector<T> out(x.numel());
  const T inv_t = T(1) / temperature;
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x.data()[base + j * inner]);
      T total = T(0);
      for (std::size_t j = 0; j < n; ++j) {
        const T e = std::exp((x.data()[base + j * inner] - mx) * inv_t);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= total;
    }
  return detail::make_result<T>(
      x.dims(), std::move(out), {x}, [outer, n, inner, inv_t](detail::Node<T>& self) {
        T* g = detail::parent_grad(self, 0);
        if (!g) return;
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            T dot = T(0);
            for (std::size_t j = 0; j < n; ++j)
              dot += self.grad[base + j * inner] * self.data[base + j * inner];
            for (std::size_t j = 0; j < n; ++j) {
              const std::size_t i = base + j * inner;
              g[i] += inv_t * self.data[i] * (self.grad[i] - dot);
            }
          }
      });
}

/// log(softmax(x / temperature)) along the last axis.
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, T temperature = T(1)) {
  if (!(temperature > T(0))) throw ParameterError("log_softmax: temperature must be positive");
  const std::size_t n = detail::last_dim(x), rows = x.numel() / n;
  const T inv_t = T(1) / temperature;
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * n;
    T mx = *std::max_element(xr, xr + n) * inv_t;
    T total = T(0);
    for (std::size_t j = 0; j < n; ++j) total += std::exp(xr[j] * inv_t - mx);
    const T lse = mx + std::log(total);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = xr[j] * inv_t - lse;
  }
  return detail::make_result<T>(x.dims(), std::move(out), {x}, [rows, n, inv_t](detail::Node<T>& self) {
    T* g = detail::parent_grad(self, 0);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r) {
      T gsum = T(0);
      for (std::size_t j = 0; j < n; ++j) gsum += self.grad[r * n + j];
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t i = r * n + j;
        g[i] += inv_t * (self.grad[i] - std::exp(self.data[i]) * gsum);
      }
    }
  });
}

/// Per-row normalisation over the last axis followed by the affine gamma/beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  const std::size_t n = detail::last_dim(x), rows = x.numel() / n;
  detail::require(gamma.numel() == n && beta.numel() == n,
                  "layer_norm: gamma/beta length must equal last dim " + std::to_string(n));
  if (!(eps > T(0))) throw ParameterError("layer_norm: eps must be positive");
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * n;
    T mean = T(0);
    for (std::size_t j = 0; j < n; ++j) mean += xr[j];
    mean /= T(n);
    T var = T(0);
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= T(n);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t i = r * n + j;
      xhat[i] = (xr[j] - mean) * inv_std[r];
      out[i] = xhat[i] * gamma.data()[j] + beta.data()[j];
    }
  }
  return detail::make_result<T>(
      x.dims(), std::move(out), {x, gamma, beta},
      [rows, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node<T>& self) {
        const auto& gam = self.parents[1]->data;
        if (T* g = detail::parent_grad(self, 1))
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i] * xhat[i];
        if (T* g = detail::parent_grad(self, 2))
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
        if (T* g = detail::parent_grad(self, 0))
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_d = T(0), mean_dx = T(0);
            for (std::size_t j = 0; j < n; ++j) {
              const T d = self.grad[r * n + j] * gam[j];
              mean_d += d;
              mean_dx += d * xhat[r * n + j];
            }
            mean_d /= T(n);
            mean_dx /= T(n);
            for (std::size_t j = 0; j < n; ++j) {
              const std::size_t i = r * n + j;
              const T d = self.grad[i] * gam[j];
              g[i] += inv_std[r] * (d - mean_d - xhat[i] * mean_dx);
            }
          }
      });
}

/// x / max(||x||_2, eps) per row of the last axis.
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, T eps = T(1e-12)) {
  const std::size_t n = detail::last_dim(x), rows = x.numel() / n;
  std::vector<T> out(x.numel());
  std::vector<T> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = T(0);
    for (std::size_t j = 0; j < n; ++j) ss += x.data()[r * n + j] * x.data()[r * n + j];
    norms[r] = std::max(std::sqrt(ss), eps);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x.data()[r * n + j] / norms[r];
  }
  return detail::make_result<T>(
      x.dims(), std::move(out), {x}, [rows, n, eps, norms = std::move(norms)](detail::Node<T>& self) {
        T* g = detail::parent_grad(self, 0);
        if (!g) return;
        for (std::size_t r = 0; r < rows; ++r) {
          if (norms[r] <= eps) {  // clamped: plain scaling
            for (std::size_t j = 0; j < n; ++j) g[r * n + j] += self.grad[r * n + j] / eps;
            continue;
          }
          T dot = T(0);
          for (std::size_t j = 0; j < n; ++j) dot += self.grad[r * n + j] * self.data[r * n + j];
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t i = r * n + j;
            g[i] += (self.grad[i] - self.data[i] * dot) / norms[r];
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.data()) total += v;
  return detail::make_result<T>({1}, {total}, {x}, [](detail::Node<T>& self) {
    if (T* g = detail::parent_grad(self, 0)) {
      const std::size_t n = self.parents[0]->data.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / T(x.numel()));
}

/// sum(x * w) with `w` treated as a constant.
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& x, const std::vector<T>& w) {
  detail::require(w.size() == x.numel(), "weighted_sum: weight length mismatch");
  T total = T(0);
  for (std::size_t i = 0; i < w.size(); ++i) total += x.data()[i] * w[i];
  return detail::make_result<T>({1}, {total}, {x}, [w](detail::Node<T>& self) {
    if (T* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < w.size(); ++i) g[i] += self.grad[0] * w[i];
  });
}

// ---------------------------------------------------------------------------
// Row plumbing

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& rows) {
  detail::require(x.rank() == 2, "gather_rows: rank-2 input required");
  detail::require(!rows.empty(), "gather_rows: empty index list");
  const std::size_t n = x.dim(1), src_rows = x.dim(0);
  std::vector<T> out(rows.size() * n);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    detail::require(rows[i] < src_rows, "gather_rows: index out of range");
    std::copy_n(x.data().data() + rows[i] * n, n, out.data() + i * n);
  }
  return detail::make_result<T>({rows.size(), n}, std::move(out), {x}, [rows, n](detail::Node<T>& self) {
    if (T* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < n; ++j) g[rows[i] * n + j] += self.grad[i * n + j];
  });
}

/// Stack rank-2 tensors (or rank-1 as single rows) along axis 0.
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "concat_rows: nothing to concatenate");
  const std::size_t n = parts[0].dims().back();
  std::vector<std::size_t> offsets;
  std::size_t total_rows = 0;
  for (const auto& p : parts) {
    detail::require(p.rank() <= 2 && p.dims().back() == n, "concat_rows: width mismatch");
    offsets.push_back(total_rows * n);
    total_rows += p.numel() / n;
  }
  std::vector<T> out;
  out.reserve(total_rows * n);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return detail::make_result<T>({total_rows, n}, std::move(out), parts, [offsets](detail::Node<T>& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k)
      if (T* g = detail::parent_grad(self, k)) {
        const std::size_t len = self.parents[k]->data.size();
        for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[offsets[k] + i];
      }
  });
}

// ---------------------------------------------------------------------------
// Attention

/// Unmasked multi-head self-attention over a batch of variable-length
/// sequences stacked row-wise. `qkv` is [rows x 3d] laid out as [q | k | v];
/// `offsets` holds sequence starts plus a final end (size = sequences + 1).
/// Returns the concatenated per-head outputs [rows x d].
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& qkv, const std::vector<std::size_t>& offsets,
                               std::size_t heads) {
  detail::require(qkv.rank() == 2 && qkv.dim(1) % 3 == 0, "attention: qkv must be [rows x 3d]");
  const std::size_t rows = qkv.dim(0), d = qkv.dim(1) / 3;
  detail::require(heads > 0 && d % heads == 0, "attention: width not divisible by heads");
  detail::require(offsets.size() >= 2 && offsets.front() == 0 && offsets.back() == rows,
                  "attention: offsets must span all rows");
  const std::size_t hd = d / heads, stride = 3 * d;
  const T scale_f = T(1) / std::sqrt(T(hd));
  const T* src = qkv.data().data();

  std::vector<T> out(rows * d, T{0});
  std::vector<std::size_t> prob_offset(offsets.size());
  std::size_t prob_total = 0;
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    prob_offset[s] = prob_total;
    const std::size_t len = offsets[s + 1] - offsets[s];
    prob_total += heads * len * len;
  }
  std::vector<T> probs(prob_total);

  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    const std::size_t b = offsets[s], len = offsets[s + 1] - offsets[s];
    for (std::size_t h = 0; h < heads; ++h) {
      T* a = probs.data() + prob_offset[s] + h * len * len;
      for (std::size_t i = 0; i < len; ++i) {
        const T* q = src + (b + i) * stride + h * hd;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < len; ++j) {
          const T* k = src + (b + j) * stride + d + h * hd;
          T dot = T(0);
          for (std::size_t c = 0; c < hd; ++c) dot += q[c] * k[c];
          a[i * len + j] = dot * scale_f;
          mx = std::max(mx, a[i * len + j]);
        }
        T total = T(0);
        for (std::size_t j = 0; j < len; ++j) {
          a[i * len + j] = std::exp(a[i * len + j] - mx);
          total += a[i * len + j];
        }
        T* o = out.data() + (b + i) * d + h * hd;
        for (std::size_t j = 0; j < len; ++j) {
          a[i * len + j] /= total;
          const T* v = src + (b + j) * stride + 2 * d + h * hd;
          for (std::size_t c = 0; c < hd; ++c) o[c] += a[i * len + j] * v[c];
        }
      }
    }
  }

  return detail::make_result<T>(
      {rows, d}, std::move(out), {qkv},
      [offsets, prob_offset, probs = std::move(probs), heads, d, hd, stride, scale_f](detail::Node<T>& self) {
        T* g = detail::parent_grad(self, 0);
        if (!g) return;
        const T* src = self.parents[0]->data.data();
        std::vector<T> dp;
        for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
          const std::size_t b = offsets[s], len = offsets[s + 1] - offsets[s];
          dp.assign(len * len, T{0});
          for (std::size_t h = 0; h < heads; ++h) {
            const T* a = probs.data() + prob_offset[s] + h * len * len;
            // dA = dO V^T and dV = A^T dO
            for (std::size_t i = 0; i < len; ++i) {
              const T* go = self.grad.data() + (b + i) * d + h * hd;
              for (std::size_t j = 0; j < len; ++j) {
                const T* v = src + (b + j) * stride + 2 * d + h * hd;
                T* gv = g + (b + j) * stride + 2 * d + h * hd;
                T dot = T(0);
                for (std::size_t c = 0; c < hd; ++c) {
                  dot += go[c] * v[c];
                  gv[c] += a[i * len + j] * go[c];
                }
                dp[i * len + j] = dot;
              }
            }
            // softmax backward, then through the scaled dot products
            for (std::size_t i = 0; i < len; ++i) {
              T row = T(0);
              for (std::size_t j = 0; j < len; ++j) row += dp[i * len + j] * a[i * len + j];
              const T* q = src + (b + i) * stride + h * hd;
              T* gq = g + (b + i) * stride + h * hd;
              for (std::size_t j = 0; j < len; ++j) {
                const T ds = a[i * len + j] * (dp[i * len + j] - row) * scale_f;
                const T* k = src + (b + j) * stride + d + h * hd;
                T* gk = g + (b + j) * stride + d + h * hd;
                for (std::size_t c = 0; c < hd; ++c) {
                  gq[c] += ds * k[c];
                  gk[c] += ds * q[c];
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Convolutions (NCHW)

struct Conv2dSpec {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// x [N,C,H,W], w [O,C,k,k], b [O].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, Conv2dSpec spec) {
  detail::require(x.rank() == 4 && w.rank() == 4, "conv2d: rank-4 input and weight required");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  detail::require(w.dim(1) == c, "conv2d: channel mismatch");
  detail::require(b.numel() == o, "conv2d: bias length mismatch");
  const std::size_t s = spec.stride, p = spec.padding;
  detail::require(s > 0 && h + 2 * p >= kh && wd + 2 * p >= kw, "conv2d: kernel larger than input");
  const std::size_t oh = (h + 2 * p - kh) / s + 1, ow = (wd + 2 * p - kw) / s + 1;

  // Visits every (output, input, weight) triple; shared by forward and backward.
  auto visit = [=](auto&& fn) {
    for (std::size_t ni = 0; ni < n; ++ni)
      for (std::size_t oc = 0; oc < o; ++oc)
        for (std::size_t y = 0; y < oh; ++y)
          for (std::size_t xo = 0; xo < ow; ++xo) {
            const std::size_t out_i = ((ni * o + oc) * oh + y) * ow + xo;
            for (std::size_t ic = 0; ic < c; ++ic)
              for (std::size_t ky = 0; ky < kh; ++ky) {
                const long iy = static_cast<long>(y * s + ky) - static_cast<long>(p);
                if (iy < 0 || iy >= static_cast<long>(h)) continue;
                for (std::size_t kx = 0; kx < kw; ++kx) {
                  const long ix = static_cast<long>(xo * s + kx) - static_cast<long>(p);
                  if (ix < 0 || ix >= static_cast<long>(wd)) continue;
                  const std::size_t in_i = ((ni * c + ic) * h + iy) * wd + ix;
                  const std::size_t w_i = ((oc * c + ic) * kh + ky) * kw + kx;
                  fn(out_i, in_i, w_i);
                }
              }
          }
  };

  std::vector<T> out(n * o * oh * ow);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = b.data()[(i / (oh * ow)) % o];
  const T* xv = x.data().data();
  const T* wv = w.data().data();
  visit([&](std::size_t oi, std::size_t ii, std::size_t wi) { out[oi] += xv[ii] * wv[wi]; });

  return detail::make_result<T>({n, o, oh, ow}, std::move(out), {x, w, b}, [visit, o, oh, ow](detail::Node<T>& self) {
    const T* xv = self.parents[0]->data.data();
    const T* wv = self.parents[1]->data.data();
    T* gx = detail::parent_grad(self, 0);
    T* gw = detail::parent_grad(self, 1);
    const T* gy = self.grad.data();
    if (gx || gw)
      visit([&](std::size_t oi, std::size_t ii, std::size_t wi) {
        if (gx) gx[ii] += gy[oi] * wv[wi];
        if (gw) gw[wi] += gy[oi] * xv[ii];
      });
    if (T* gb = detail::parent_grad(self, 2))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[(i / (oh * ow)) % o] += gy[i];
  });
}

/// Transposed convolution. x [N,C,H,W], w [C,O,k,k], b [O];
/// output spatial size (H-1)*stride - 2*padding + k.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, Conv2dSpec spec) {
  detail::require(x.rank() == 4 && w.rank() == 4, "conv_transpose2d: rank-4 input and weight required");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t o = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  detail::require(w.dim(0) == c, "conv_transpose2d: channel mismatch");
  detail::require(b.numel() == o, "conv_transpose2d: bias length mismatch");
  const std::size_t s = spec.stride, p = spec.padding;
  detail::require(s > 0 && (h - 1) * s + kh > 2 * p && (wd - 1) * s + kw > 2 * p,
                  "conv_transpose2d: empty output");
  const std::size_t oh = (h - 1) * s + kh - 2 * p, ow = (wd - 1) * s + kw - 2 * p;

  auto visit = [=](auto&& fn) {
    for (std::size_t ni = 0; ni < n; ++ni)
      for (std::size_t ic = 0; ic < c; ++ic)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t xi = 0; xi < wd; ++xi) {
            const std::size_t in_i = ((ni * c + ic) * h + y) * wd + xi;
            for (std::size_t oc = 0; oc < o; ++oc)
              for (std::size_t ky = 0; ky < kh; ++ky) {
                const long oy = static_cast<long>(y * s + ky) - static_cast<long>(p);
                if (oy < 0 || oy >= static_cast<long>(oh)) continue;
                for (std::size_t kx = 0; kx < kw; ++kx) {
                  const long ox = static_cast<long>(xi * s + kx) - static_cast<long>(p);
                  if (ox < 0 || ox >= static_cast<long>(ow)) continue;
                  const std::size_t out_i = ((ni * o + oc) * oh + oy) * ow + ox;
                  const std::size_t w_i = ((ic * o + oc) * kh + ky) * kw + kx;
                  fn(out_i, in_i, w_i);
                }
              }
          }
  };

  std::vector<T> out(n * o * oh * ow);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = b.data()[(i / (oh * ow)) % o];
  const T* xv = x.data().data();
  const T* wv = w.data().data();
  visit([&](std::size_t oi, std::size_t ii, std::size_t wi) { out[oi] += xv[ii] * wv[wi]; });

  return detail::make_result<T>({n, o, oh, ow}, std::move(out), {x, w, b}, [visit, o, oh, ow](detail::Node<T>& self) {
    const T* xv = self.parents[0]->data.data();
    const T* wv = self.parents[1]->data.data();
    T* gx = detail::parent_grad(self, 0);
    T* gw = detail::parent_grad(self, 1);
    const T* gy = self.grad.data();
    if (gx || gw)
      visit([&](std::size_t oi, std::size_t ii, std::size_t wi) {
        if (gx) gx[ii] += gy[oi] * wv[wi];
        if (gw) gw[wi] += gy[oi] * xv[ii];
      });
    if (T* gb = detail::parent_grad(self, 2))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[(i / (oh * ow)) % o] += gy[i];
  });
}

/// Token rows [n*t x d] of n images on a g x g grid (t = g*g) to a feature
/// map [n, d, g, g].
template <typename T>
Tensor<T> tokens_to_grid(const Tensor<T>& x, std::size_t images) {
  detail::require(x.rank() == 2 && images > 0 && x.dim(0) % images == 0, "tokens_to_grid: bad row count");
  const std::size_t t = x.dim(0) / images, d = x.dim(1);
  const auto g = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(t))));
  detail::require(g * g == t, "tokens_to_grid: token count is not a square");
  std::vector<T> out(x.numel());
  for (std::size_t n = 0; n < images; ++n)
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t c = 0; c < d; ++c) out[(n * d + c) * t + i] = x.data()[(n * t + i) * d + c];
  return detail::make_result<T>({images, d, g, g}, std::move(out), {x}, [images, t, d](detail::Node<T>& self) {
    if (T* gr = detail::parent_grad(self, 0))
      for (std::size_t n = 0; n < images; ++n)
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t c = 0; c < d; ++c) gr[(n * t + i) * d + c] += self.grad[(n * d + c) * t + i];
  });
}

// ---------------------------------------------------------------------------
// Losses (mean-reduced)

template <typename T>
Tensor<T> mse_loss(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.numel() == b.numel(), "mse_loss: size mismatch");
  const auto d = sub(reshape(a, {a.numel()}), reshape(b, {b.numel()}));
  return mean(mul(d, d));
}

template <typename T>
Tensor<T> l1_loss(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.numel() == b.numel(), "l1_loss: size mismatch");
  const std::size_t n = a.numel();
  T total = T(0);
  for (std::size_t i = 0; i < n; ++i) total += std::abs(a.data()[i] - b.data()[i]);
  return detail::make_result<T>({1}, {total / T(n)}, {a, b}, [n](detail::Node<T>& self) {
    const auto& av = self.parents[0]->data;
    const auto& bv = self.parents[1]->data;
    T* ga = detail::parent_grad(self, 0);
    T* gb = detail::parent_grad(self, 1);
    for (std::size_t i = 0; i < n; ++i) {
      const T diff = av[i] - bv[i];
      const T sg = diff > T(0) ? T(1) : (diff < T(0) ? T(-1) : T(0));
      if (ga) ga[i] += self.grad[0] * sg / T(n);
      if (gb) gb[i] -= self.grad[0] * sg / T(n);
    }
  });
}

/// Binary cross-entropy on logits against constant targets in [0,1].
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const std::vector<T>& targets) {
  detail::require(logits.numel() == targets.size(), "bce_with_logits: target length mismatch");
  const std::size_t n = targets.size();
  T total = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const T z = logits.data()[i];
    total += std::max(z, T(0)) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
  }
  return detail::make_result<T>({1}, {total / T(n)}, {logits}, [targets, n](detail::Node<T>& self) {
    if (T* g = detail::parent_grad(self, 0)) {
      const auto& z = self.parents[0]->data;
      for (std::size_t i = 0; i < n; ++i)
        g[i] += self.grad[0] * (T(1) / (T(1) + std::exp(-z[i])) - targets[i]) / T(n);
    }
  });
}

/// Softmax cross-entropy of [rows x K] logits against integer labels.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  detail::require(logits.rank() == 2 && logits.dim(0) == labels.size(), "cross_entropy: label count mismatch");
  const auto k = static_cast<int>(logits.dim(1));
  std::vector<T> w(logits.numel(), T(0));
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0 || labels[r] >= k) throw DataError("cross_entropy: label out of range");
    w[r * k + labels[r]] = T(-1) / T(labels.size());
  }
  return weighted_sum(log_softmax(logits), w);
}

}  // namespace msdino::ops

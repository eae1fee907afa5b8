// Copyright 2026 the tsrelab authors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations on Tensor. Forward computes the value eagerly;
// the installed closure implements the exact vector-Jacobian product. Shapes
// are validated up front; every output is checked for NaN/Inf.

#ifndef TSRELAB_OPS_HPP
#define TSRELAB_OPS_HPP

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "tsrelab/tensor.hpp"

namespace tsrelab {

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

inline std::size_t rows_of(const Tensor& t) {
  return t.rank() == 2 ? t.shape()[0] : 1;
}
inline std::size_t cols_of(const Tensor& t) {
  return t.shape().empty() ? 1 : t.shape().back();
}

inline bool wants_grad(const Node& self, std::size_t parent) {
  return self.parents[parent]->requires_grad;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(), "add: shape mismatch " +
                  shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto n = detail::make_node("add", a.shape(), {a.node(), b.node()});
  for (std::size_t i = 0; i < n->value.size(); ++i)
    n->value[i] = a.at(i) + b.at(i);
  detail::check_finite(*n);
  if (n->requires_grad)
    n->backward = [](detail::Node& self) {
      for (int p = 0; p < 2; ++p)
        if (detail::wants_grad(self, p)) {
          double* g = self.parents[p]->grad_data();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            g[i] += self.grad[i];
        }
    };
  return Tensor::wrap(n);
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(), "sub: shape mismatch");
  auto n = detail::make_node("sub", a.shape(), {a.node(), b.node()});
  for (std::size_t i = 0; i < n->value.size(); ++i)
    n->value[i] = a.at(i) - b.at(i);
  detail::check_finite(*n);
  if (n->requires_grad)
    n->backward = [](detail::Node& self) {
      if (detail::wants_grad(self, 0)) {
        double* g = self.parents[0]->grad_data();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          g[i] += self.grad[i];
      }
      if (detail::wants_grad(self, 1)) {
        double* g = self.parents[1]->grad_data();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          g[i] -= self.grad[i];
      }
    };
  return Tensor::wrap(n);
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(), "mul: shape mismatch");
  auto n = detail::make_node("mul", a.shape(), {a.node(), b.node()});
  for (std::size_t i = 0; i < n->value.size(); ++i)
    n->value[i] = a.at(i) * b.at(i);
  detail::check_finite(*n);
  if (n->requires_grad)
    n->backward = [](detail::Node& self) {
      const auto& av = self.parents[0]->value;
      const auto& bv = self.parents[1]->value;
      if (detail::wants_grad(self, 0)) {
        double* g = self.parents[0]->grad_data();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          g[i] += self.grad[i] * bv[i];
      }
      if (detail::wants_grad(self, 1)) {
        double* g = self.parents[1]->grad_data();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          g[i] += self.grad[i] * av[i];
      }
    };
  return Tensor::wrap(n);
}

/// t * c for a compile-time-constant style scalar c (not a graph node).
inline Tensor scale(const Tensor& t, double c) {
  auto n = detail::make_node("scale", t.shape(), {t.node()});
  for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = t.at(i) * c;
  detail::check_finite(*n);
  if (n->requires_grad)
    n->backward = [c](detail::Node& self) {
      double* g = self.parents[0]->grad_data();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        g[i] += self.grad[i] * c;
    };
  return Tensor::wrap(n);
}

inline Tensor exp(const Tensor& t) {
  auto n = detail::make_node("exp", t.shape(), {t.node()});
  for (std::size_t i = 0; i < n->value.size(); ++i)
    n->value[i] = std::exp(t.at(i));
  detail::check_finite(*n);
  if (n->requires_grad)
    n->backward = [](detail::Node& self) {
      double* g = self.parents[0]->grad_data();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        g[i] += self.grad[i] * self.value[i];
    };
  return Tensor::wrap(n);
}

inline Tensor log(const Tensor& t) {
  auto n = detail::make_node("log", t.shape(), {t.node()});
  for (std::size_t i = 0; i < n->value.size(); ++i)
    n->value[i] = std::log(t.at(i));
  detail::check_finite(*n);
  if (n->requires_grad)
    n->backward = [](detail::Node& self) {
      const auto& xv = self.parents[0]->value;
      double* g = self.parents[0]->grad_data();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        g[i] += self.grad[i] / xv[i];
    };
  return Tensor::wrap(n);
}

inline Tensor relu(const Tensor& t) {
  auto n = detail::make_node("relu", t.shape(), {t.node()});
  for (std::size_t i = 0; i < n->value.size(); ++i)
    n->value[i] = t.at(i) > 0.0 ? t.at(i) : 0.0;
  detail::check_finite(*n);
  if (n->requires_grad)
    n->backward = [](detail::Node& self) {
      const auto& xv = self.parents[0]->value;
      double* g = self.parents[0]->grad_data();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        if (xv[i] > 0.0) g[i] += self.grad[i];
    };
  return Tensor::wrap(n);
}

/// Exact GELU: x * Phi(x) with the Gaussian CDF.
inline Tensor gelu(const Tensor& t) {
  auto n = detail::make_node("gelu", t.shape(), {t.node()});
  for (std::size_t i = 0; i < n->value.size(); ++i) {
    double x = t.at(i);
    n->value[i] = 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
  }
  detail::check_finite(*n);
  if (n->requires_grad)
    n->backward = [](detail::Node& self) {
      const auto& xv = self.parents[0]->value;
      double* g = self.parents[0]->grad_data();
      const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        double x = xv[i];
        double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
        double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
        g[i] += self.grad[i] * (cdf + x * pdf);
      }
    };
  return Tensor::wrap(n);
}

// ---------------------------------------------------------------------------
// Broadcast against a row vector: [R x C] op [C]

inline Tensor add_rowvec(const Tensor& m, const Tensor& v) {
  detail::require(m.rank() == 2 && v.rank() == 1 && m.shape()[1] == v.size(),
                  "add_rowvec: want [RxC] + [C], got " + shape_str(m.shape()) +
                  " + " + shape_str(v.shape()));
  auto n = detail::make_node("add_rowvec", m.shape(), {m.node(), v.node()});
  std::size_t R = m.shape()[0], C = m.shape()[1];
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c)
      n->value[r * C + c] = m.at(r, c) + v.at(c);
  detail::check_finite(*n);
  if (n->requires_grad)
    n->backward = [R, C](detail::Node& self) {
      if (detail::wants_grad(self, 0)) {
        double* g = self.parents[0]->grad_data();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          g[i] += self.grad[i];
      }
      if (detail::wants_grad(self, 1)) {
        double* g = self.parents[1]->grad_data();
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t c = 0; c < C; ++c) g[c] += self.grad[r * C + c];
      }
    };
  return Tensor::wrap(n);
}

inline Tensor mul_rowvec(const Tensor& m, const Tensor& v) {
  detail::require(m.rank() == 2 && v.rank() == 1 && m.shape()[1] == v.size(),
                  "mul_rowvec: want [RxC] * [C], got " + shape_str(m.shape()) +
                  " * " + shape_str(v.shape()));
  auto n = detail::make_node("mul_rowvec", m.shape(), {m.node(), v.node()});
  std::size_t R = m.shape()[0], C = m.shape()[1];
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c)
      n->value[r * C + c] = m.at(r, c) * v.at(c);
  detail::check_finite(*n);
  if (n->requires_grad)
    n->backward = [R, C](detail::Node& self) {
      const auto& mv = self.parents[0]->value;
      const auto& vv = self.parents[1]->value;
      if (detail::wants_grad(self, 0)) {
        double* g = self.parents[0]->grad_data();
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t c = 0; c < C; ++c)
            g[r * C + c] += self.grad[r * C + c] * vv[c];
      }
      if (detail::wants_grad(self, 1)) {
        double* g = self.parents[1]->grad_data();
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t c = 0; c < C; ++c)
            g[c] += self.grad[r * C + c] * mv[r * C + c];
      }
    };
  return Tensor::wrap(n);
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require(a.rank() == 2 && b.rank() == 2,
                  "matmul: operands must be rank-2");
  detail::require(a.shape()[1] == b.shape()[0],
                  "matmul: inner dimensions disagree, " +
                  shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::size_t M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
  auto n = detail::make_node("matmul", {M, N}, {a.node(), b.node()});
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t k = 0; k < K; ++k) {
      double av = a.at(i, k);
      for (std::size_t j = 0; j < N; ++j)
        n->value[i * N + j] += av * b.at(k, j);
    }
  detail::check_finite(*n);
  if (n->requires_grad)
    n->backward = [M, K, N](detail::Node& self) {
      const auto& av = self.parents[0]->value;
      const auto& bv = self.parents[1]->value;
      if (detail::wants_grad(self, 0)) {
        // dA = dC * B^T
        double* g = self.parents[0]->grad_data();
        for (std::size_t i = 0; i < M; ++i)
          for (std::size_t j = 0; j < N; ++j) {
            double gv = self.grad[i * N + j];
            for (std::size_t k = 0; k < K; ++k)
              g[i * K + k] += gv * bv[k * N + j];
          }
      }
      if (detail::wants_grad(self, 1)) {
        // dB = A^T * dC
        double* g = self.parents[1]->grad_data();
        for (std::size_t i = 0; i < M; ++i)
          for (std::size_t k = 0; k < K; ++k) {
            double av_ik = av[i * K + k];
            for (std::size_t j = 0; j < N; ++j)
              g[k * N + j] += av_ik * self.grad[i * N + j];
          }
      }
    };
  return Tensor::wrap(n);
}

inline Tensor transpose(const Tensor& t) {
  detail::require(t.rank() == 2, "transpose: rank-2 only");
  std::size_t R = t.shape()[0], C = t.shape()[1];
  auto n = detail::make_node("transpose", {C, R}, {t.node()});
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) n->value[c * R + r] = t.at(r, c);
  if (n->requires_grad)
    n->backward = [R, C](detail::Node& self) {
      double* g = self.parents[0]->grad_data();
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c)
          g[r * C + c] += self.grad[c * R + r];
    };
  return Tensor::wrap(n);
}

/// Row vector times matrix: [K] x [K x N] -> [N].
inline Tensor vecmat(const Tensor& v, const Tensor& m) {
  detail::require(v.rank() == 1 && m.rank() == 2 && v.size() == m.shape()[0],
                  "vecmat: want [K] x [KxN], got " + shape_str(v.shape()) +
                  " x " + shape_str(m.shape()));
  std::size_t K = v.size(), N = m.shape()[1];
  auto n = detail::make_node("vecmat", {N}, {v.node(), m.node()});
  for (std::size_t k = 0; k < K; ++k) {
    double vk = v.at(k);
    for (std::size_t j = 0; j < N; ++j) n->value[j] += vk * m.at(k, j);
  }
  detail::check_finite(*n);
  if (n->requires_grad)
    n->backward = [K, N](detail::Node& self) {
      const auto& vv = self.parents[0]->value;
      const auto& mv = self.parents[1]->value;
      if (detail::wants_grad(self, 0)) {
        double* g = self.parents[0]->grad_data();
        for (std::size_t k = 0; k < K; ++k) {
          double acc = 0.0;
          for (std::size_t j = 0; j < N; ++j)
            acc += self.grad[j] * mv[k * N + j];
          g[k] += acc;
        }
      }
      if (detail::wants_grad(self, 1)) {
        double* g = self.parents[1]->grad_data();
        for (std::size_t k = 0; k < K; ++k)
          for (std::size_t j = 0; j < N; ++j)
            g[k * N + j] += vv[k] * self.grad[j];
      }
    };
  return Tensor::wrap(n);
}

// ---------------------------------------------------------------------------
// Structure: slicing, concatenation, stacking, gathering

/// Same data, new shape (element counts must agree).
inline Tensor reshape(const Tensor& t, Shape shape) {
  detail::require(shape_numel(shape) == t.size(),
                  "reshape: element count mismatch");
  auto n = detail::make_node("reshape", std::move(shape), {t.node()});
  for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = t.at(i);
  if (n->requires_grad)
    n->backward = [](detail::Node& self) {
      double* g = self.parents[0]->grad_data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    };
  return Tensor::wrap(n);
}

/// Columns [c0, c1) of a rank-2 tensor.
inline Tensor slice_cols(const Tensor& t, std::size_t c0, std::size_t c1) {
  detail::require(t.rank() == 2 && c0 < c1 && c1 <= t.shape()[1],
                  "slice_cols: bad range");
  std::size_t R = t.shape()[0], C = t.shape()[1], W = c1 - c0;
  auto n = detail::make_node("slice_cols", {R, W}, {t.node()});
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < W; ++c) n->value[r * W + c] = t.at(r, c0 + c);
  if (n->requires_grad)
    n->backward = [R, C, W, c0](detail::Node& self) {
      double* g = self.parents[0]->grad_data();
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < W; ++c)
          g[r * C + c0 + c] += self.grad[r * W + c];
    };
  return Tensor::wrap(n);
}

/// Concatenate rank-2 tensors with equal row counts along columns.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  detail::require(!parts.empty(), "concat_cols: empty input");
  std::size_t R = parts[0].shape()[0], C = 0;
  std::vector<std::shared_ptr<detail::Node>> parents;
  for (const auto& p : parts) {
    detail::require(p.rank() == 2 && p.shape()[0] == R,
                    "concat_cols: row counts disagree");
    C += p.shape()[1];
    parents.push_back(p.node());
  }
  auto n = detail::make_node("concat_cols", {R, C}, std::move(parents));
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::size_t W = p.shape()[1];
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < W; ++c)
        n->value[r * C + off + c] = p.at(r, c);
    off += W;
  }
  if (n->requires_grad)
    n->backward = [R, C](detail::Node& self) {
      std::size_t off = 0;
      for (auto& parent : self.parents) {
        std::size_t W = parent->shape[1];
        if (parent->requires_grad) {
          double* g = parent->grad_data();
          for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < W; ++c)
              g[r * W + c] += self.grad[r * C + off + c];
        }
        off += W;
      }
    };
  return Tensor::wrap(n);
}

/// Stack rank-1 tensors of equal length into a [N x E] matrix.
inline Tensor stack_rows(const std::vector<Tensor>& rows) {
  detail::require(!rows.empty(), "stack_rows: empty input");
  std::size_t E = rows[0].size();
  std::vector<std::shared_ptr<detail::Node>> parents;
  for (const auto& r : rows) {
    detail::require(r.rank() == 1 && r.size() == E,
                    "stack_rows: rows must be rank-1 of equal length");
    parents.push_back(r.node());
  }
  auto n = detail::make_node("stack_rows", {rows.size(), E}, std::move(parents));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < E; ++c) n->value[r * E + c] = rows[r].at(c);
  if (n->requires_grad)
    n->backward = [E](detail::Node& self) {
      for (std::size_t r = 0; r < self.parents.size(); ++r) {
        auto& parent = self.parents[r];
        if (!parent->requires_grad) continue;
        double* g = parent->grad_data();
        for (std::size_t c = 0; c < E; ++c) g[c] += self.grad[r * E + c];
      }
    };
  return Tensor::wrap(n);
}

/// Single element of a rank-1 tensor as a scalar node.
inline Tensor select(const Tensor& v, std::size_t i) {
  detail::require(v.rank() == 1 && i < v.size(), "select: index out of range");
  auto n = detail::make_node("select", Shape{}, {v.node()});
  n->value[0] = v.at(i);
  if (n->requires_grad)
    n->backward = [i](detail::Node& self) {
      self.parents[0]->grad_data()[i] += self.grad[0];
    };
  return Tensor::wrap(n);
}

/// t * s where s is a scalar (size-1) tensor in the graph.
inline Tensor scale_by(const Tensor& t, const Tensor& s) {
  detail::require(s.size() == 1, "scale_by: scale must be a scalar tensor");
  auto n = detail::make_node("scale_by", t.shape(), {t.node(), s.node()});
  double sv = s.at(0);
  for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = t.at(i) * sv;
  detail::check_finite(*n);
  if (n->requires_grad)
    n->backward = [](detail::Node& self) {
      const auto& tv = self.parents[0]->value;
      double sv = self.parents[1]->value[0];
      if (detail::wants_grad(self, 0)) {
        double* g = self.parents[0]->grad_data();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          g[i] += self.grad[i] * sv;
      }
      if (detail::wants_grad(self, 1)) {
        double acc = 0.0;
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          acc += self.grad[i] * tv[i];
        self.parents[1]->grad_data()[0] += acc;
      }
    };
  return Tensor::wrap(n);
}

/// Gathers entries (rows[i], cols[i]) of a rank-2 tensor into a vector.
inline Tensor pick(const Tensor& m, const std::vector<std::size_t>& rows,
                   const std::vector<std::size_t>& cols) {
  detail::require(m.rank() == 2 && rows.size() == cols.size(),
                  "pick: want rank-2 input and equal index lists");
  std::size_t R = m.shape()[0], C = m.shape()[1];
  for (std::size_t i = 0; i < rows.size(); ++i)
    detail::require(rows[i] < R && cols[i] < C, "pick: index out of range");
  auto n = detail::make_node("pick", {rows.size()}, {m.node()});
  for (std::size_t i = 0; i < rows.size(); ++i)
    n->value[i] = m.at(rows[i], cols[i]);
  if (n->requires_grad)
    n->backward = [rows, cols, C](detail::Node& self) {
      double* g = self.parents[0]->grad_data();
      for (std::size_t i = 0; i < rows.size(); ++i)
        g[rows[i] * C + cols[i]] += self.grad[i];
    };
  return Tensor::wrap(n);
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum_all(const Tensor& t) {
  auto n = detail::make_node("sum_all", Shape{}, {t.node()});
  double acc = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) acc += t.at(i);
  n->value[0] = acc;
  detail::check_finite(*n);
  if (n->requires_grad)
    n->backward = [](detail::Node& self) {
      double* g = self.parents[0]->grad_data();
      for (std::size_t i = 0; i < self.parents[0]->value.size(); ++i)
        g[i] += self.grad[0];
    };
  return Tensor::wrap(n);
}

inline Tensor mean_all(const Tensor& t) {
  detail::require(t.size() > 0, "mean_all: empty tensor");
  auto n = detail::make_node("mean_all", Shape{}, {t.node()});
  double acc = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) acc += t.at(i);
  double inv = 1.0 / static_cast<double>(t.size());
  n->value[0] = acc * inv;
  detail::check_finite(*n);
  if (n->requires_grad)
    n->backward = [inv](detail::Node& self) {
      double* g = self.parents[0]->grad_data();
      for (std::size_t i = 0; i < self.parents[0]->value.size(); ++i)
        g[i] += self.grad[0] * inv;
    };
  return Tensor::wrap(n);
}

/// Mean over axis 0: [T x D] -> [D]. Temporal pooling.
inline Tensor mean_rows(const Tensor& t) {
  detail::require(t.rank() == 2, "mean_rows: rank-2 only");
  std::size_t T = t.shape()[0], D = t.shape()[1];
  auto n = detail::make_node("mean_rows", {D}, {t.node()});
  double inv = 1.0 / static_cast<double>(T);
  for (std::size_t r = 0; r < T; ++r)
    for (std::size_t c = 0; c < D; ++c) n->value[c] += t.at(r, c) * inv;
  detail::check_finite(*n);
  if (n->requires_grad)
    n->backward = [T, D, inv](detail::Node& self) {
      double* g = self.parents[0]->grad_data();
      for (std::size_t r = 0; r < T; ++r)
        for (std::size_t c = 0; c < D; ++c)
          g[r * D + c] += self.grad[c] * inv;
    };
  return Tensor::wrap(n);
}

// ---------------------------------------------------------------------------
// Softmax family (last axis; rank-1 treated as a single row)

namespace detail {

inline void softmax_row(const double* x, double* y, std::size_t n) {
  double mx = x[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = std::exp(x[i] - mx);
    sum += y[i];
  }
  for (std::size_t i = 0; i < n; ++i) y[i] /= sum;
}

}  // namespace detail

inline Tensor softmax(const Tensor& t) {
  detail::require(t.rank() >= 1 && t.rank() <= 2, "softmax: rank-1/2 only");
  std::size_t R = detail::rows_of(t), C = detail::cols_of(t);
  auto n = detail::make_node("softmax", t.shape(), {t.node()});
  for (std::size_t r = 0; r < R; ++r)
    detail::softmax_row(t.value().data() + r * C, n->value.data() + r * C, C);
  detail::check_finite(*n);
  if (n->requires_grad)
    n->backward = [R, C](detail::Node& self) {
      // dx = y * (dy - sum(y * dy)) per row
      double* g = self.parents[0]->grad_data();
      for (std::size_t r = 0; r < R; ++r) {
        const double* y = self.value.data() + r * C;
        const double* dy = self.grad.data() + r * C;
        double dot = 0.0;
        for (std::size_t c = 0; c < C; ++c) dot += y[c] * dy[c];
        for (std::size_t c = 0; c < C; ++c)
          g[r * C + c] += y[c] * (dy[c] - dot);
      }
    };
  return Tensor::wrap(n);
}

inline Tensor log_softmax(const Tensor& t) {
  detail::require(t.rank() >= 1 && t.rank() <= 2, "log_softmax: rank-1/2 only");
  std::size_t R = detail::rows_of(t), C = detail::cols_of(t);
  auto n = detail::make_node("log_softmax", t.shape(), {t.node()});
  for (std::size_t r = 0; r < R; ++r) {
    const double* x = t.value().data() + r * C;
    double mx = x[0];
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, x[c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < C; ++c) sum += std::exp(x[c] - mx);
    double lse = mx + std::log(sum);
    for (std::size_t c = 0; c < C; ++c) n->value[r * C + c] = x[c] - lse;
  }
  detail::check_finite(*n);
  if (n->requires_grad)
    n->backward = [R, C](detail::Node& self) {
      // dx = dy - softmax(x) * sum(dy) per row
      double* g = self.parents[0]->grad_data();
      for (std::size_t r = 0; r < R; ++r) {
        const double* y = self.value.data() + r * C;
        const double* dy = self.grad.data() + r * C;
        double total = 0.0;
        for (std::size_t c = 0; c < C; ++c) total += dy[c];
        for (std::size_t c = 0; c < C; ++c)
          g[r * C + c] += dy[c] - std::exp(y[c]) * total;
      }
    };
  return Tensor::wrap(n);
}

/// log sum exp over the last axis: rank-1 -> scalar, rank-2 -> [R].
inline Tensor log_sum_exp(const Tensor& t) {
  detail::require(t.rank() >= 1 && t.rank() <= 2, "log_sum_exp: rank-1/2 only");
  std::size_t R = detail::rows_of(t), C = detail::cols_of(t);
  Shape out_shape = t.rank() == 1 ? Shape{} : Shape{R};
  auto n = detail::make_node("log_sum_exp", out_shape, {t.node()});
  for (std::size_t r = 0; r < R; ++r) {
    const double* x = t.value().data() + r * C;
    double mx = x[0];
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, x[c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < C; ++c) sum += std::exp(x[c] - mx);
    n->value[r] = mx + std::log(sum);
  }
  detail::check_finite(*n);
  if (n->requires_grad)
    n->backward = [R, C](detail::Node& self) {
      double* g = self.parents[0]->grad_data();
      const auto& xv = self.parents[0]->value;
      for (std::size_t r = 0; r < R; ++r) {
        double lse = self.value[r];
        for (std::size_t c = 0; c < C; ++c)
          g[r * C + c] += self.grad[r] * std::exp(xv[r * C + c] - lse);
      }
    };
  return Tensor::wrap(n);
}

// ---------------------------------------------------------------------------
// Normalization

/// Layer normalization over the last axis with affine parameters.
/// y = (x - mu) / sqrt(var + eps) * gamma + beta, statistics per position.
inline Tensor layer_norm(const Tensor& h, const Tensor& gamma,
                         const Tensor& beta, double eps = 1e-5) {
  detail::require(h.rank() >= 1 && h.rank() <= 2, "layer_norm: rank-1/2 only");
  std::size_t R = detail::rows_of(h), D = detail::cols_of(h);
  detail::require(gamma.rank() == 1 && gamma.size() == D &&
                  beta.rank() == 1 && beta.size() == D,
                  "layer_norm: gamma/beta must be [D]");
  if (eps < 0.0) throw ConfigError("layer_norm: eps must be >= 0");
  auto n = detail::make_node("layer_norm", h.shape(),
                             {h.node(), gamma.node(), beta.node()});
  std::vector<double> mu(R), istd(R);
  for (std::size_t r = 0; r < R; ++r) {
    const double* x = h.value().data() + r * D;
    double m = 0.0;
    for (std::size_t c = 0; c < D; ++c) m += x[c];
    m /= static_cast<double>(D);
    double var = 0.0;
    for (std::size_t c = 0; c < D; ++c) var += (x[c] - m) * (x[c] - m);
    var /= static_cast<double>(D);
    mu[r] = m;
    istd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < D; ++c)
      n->value[r * D + c] = (x[c] - m) * istd[r] * gamma.at(c) + beta.at(c);
  }
  detail::check_finite(*n);
  if (n->requires_grad)
    n->backward = [R, D, mu = std::move(mu),
                   istd = std::move(istd)](detail::Node& self) {
      const auto& xv = self.parents[0]->value;
      const auto& gv = self.parents[1]->value;
      std::vector<double> xhat(D), dxhat(D);
      for (std::size_t r = 0; r < R; ++r) {
        const double* dy = self.grad.data() + r * D;
        double m1 = 0.0, m2 = 0.0;  // mean(dxhat), mean(dxhat * xhat)
        for (std::size_t c = 0; c < D; ++c) {
          xhat[c] = (xv[r * D + c] - mu[r]) * istd[r];
          dxhat[c] = dy[c] * gv[c];
          m1 += dxhat[c];
          m2 += dxhat[c] * xhat[c];
        }
        m1 /= static_cast<double>(D);
        m2 /= static_cast<double>(D);
        if (detail::wants_grad(self, 0)) {
          double* g = self.parents[0]->grad_data();
          for (std::size_t c = 0; c < D; ++c)
            g[r * D + c] += (dxhat[c] - m1 - xhat[c] * m2) * istd[r];
        }
        if (detail::wants_grad(self, 1)) {
          double* g = self.parents[1]->grad_data();
          for (std::size_t c = 0; c < D; ++c) g[c] += dy[c] * xhat[c];
        }
        if (detail::wants_grad(self, 2)) {
          double* g = self.parents[2]->grad_data();
          for (std::size_t c = 0; c < D; ++c) g[c] += dy[c];
        }
      }
    };
  return Tensor::wrap(n);
}

/// L2-normalize a rank-1 tensor to unit norm.
inline Tensor l2_normalize(const Tensor& v) {
  detail::require(v.rank() == 1, "l2_normalize: rank-1 only");
  double norm2 = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) norm2 += v.at(i) * v.at(i);
  double norm = std::sqrt(norm2);
  if (!(norm > 0.0))
    throw NumericError("l2_normalize: zero-norm input");
  auto n = detail::make_node("l2_normalize", v.shape(), {v.node()});
  for (std::size_t i = 0; i < v.size(); ++i) n->value[i] = v.at(i) / norm;
  detail::check_finite(*n);
  if (n->requires_grad)
    n->backward = [norm](detail::Node& self) {
      // dx = (dy - y * <y, dy>) / ||x||
      double dot = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        dot += self.value[i] * self.grad[i];
      double* g = self.parents[0]->grad_data();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        g[i] += (self.grad[i] - self.value[i] * dot) / norm;
    };
  return Tensor::wrap(n);
}

// ---------------------------------------------------------------------------
// Grouped 1-D convolution

/// Grouped temporal convolution with "same" zero padding.
///   h:      [T x C_in]
///   kernel: [C_out x (C_in/G) x k], k odd
///   out:    [T x C_out]
/// Output channel co reads input channels of its group only.
inline Tensor conv1d_grouped(const Tensor& h, const Tensor& kernel,
                             std::size_t groups) {
  detail::require(h.rank() == 2 && kernel.rank() == 3,
                  "conv1d_grouped: want h [TxC], kernel [C_out x C_in/G x k]");
  std::size_t T = h.shape()[0], Cin = h.shape()[1];
  std::size_t Cout = kernel.shape()[0], Cg = kernel.shape()[1],
              k = kernel.shape()[2];
  if (groups == 0 || Cin % groups != 0 || Cout % groups != 0)
    throw ConfigError("conv1d_grouped: channel counts not divisible by groups");
  if (k % 2 == 0) throw ConfigError("conv1d_grouped: kernel size must be odd");
  detail::require(Cg == Cin / groups,
                  "conv1d_grouped: kernel mid dimension must be C_in/groups");
  std::size_t per_group_out = Cout / groups;
  std::size_t pad = k / 2;
  auto n = detail::make_node("conv1d_grouped", {T, Cout},
                             {h.node(), kernel.node()});
  for (std::size_t co = 0; co < Cout; ++co) {
    std::size_t g = co / per_group_out;
    for (std::size_t t = 0; t < T; ++t) {
      double acc = 0.0;
      for (std::size_t d = 0; d < k; ++d) {
        std::ptrdiff_t tt =
            static_cast<std::ptrdiff_t>(t + d) - static_cast<std::ptrdiff_t>(pad);
        if (tt < 0 || tt >= static_cast<std::ptrdiff_t>(T)) continue;
        for (std::size_t j = 0; j < Cg; ++j)
          acc += h.at(static_cast<std::size_t>(tt), g * Cg + j) *
                 kernel.at(co * Cg * k + j * k + d);
      }
      n->value[t * Cout + co] = acc;
    }
  }
  detail::check_finite(*n);
  if (n->requires_grad)
    n->backward = [T, Cin, Cout, Cg, k, per_group_out, pad](detail::Node& self) {
      const auto& hv = self.parents[0]->value;
      const auto& kv = self.parents[1]->value;
      bool want_h = detail::wants_grad(self, 0);
      bool want_k = detail::wants_grad(self, 1);
      double* gh = want_h ? self.parents[0]->grad_data() : nullptr;
      double* gk = want_k ? self.parents[1]->grad_data() : nullptr;
      for (std::size_t co = 0; co < Cout; ++co) {
        std::size_t g = co / per_group_out;
        for (std::size_t t = 0; t < T; ++t) {
          double gout = self.grad[t * Cout + co];
          if (gout == 0.0) continue;
          for (std::size_t d = 0; d < k; ++d) {
            std::ptrdiff_t tt = static_cast<std::ptrdiff_t>(t + d) -
                                static_cast<std::ptrdiff_t>(pad);
            if (tt < 0 || tt >= static_cast<std::ptrdiff_t>(T)) continue;
            for (std::size_t j = 0; j < Cg; ++j) {
              std::size_t hidx =
                  static_cast<std::size_t>(tt) * Cin + g * Cg + j;
              std::size_t kidx = co * Cg * k + j * k + d;
              if (want_h) gh[hidx] += gout * kv[kidx];
              if (want_k) gk[kidx] += gout * hv[hidx];
            }
          }
        }
      }
    };
  return Tensor::wrap(n);
}

// ---------------------------------------------------------------------------
// Non-graph utilities

/// Cosine similarity of two plain vectors; throws on zero norm.
inline double cosine_similarity(const Tensor& a, const Tensor& b) {
  detail::require(a.rank() == 1 && b.rank() == 1 && a.size() == b.size(),
                  "cosine_similarity: want equal-length rank-1 tensors");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a.at(i) * b.at(i);
    na += a.at(i) * a.at(i);
    nb += b.at(i) * b.at(i);
  }
  if (!(na > 0.0) || !(nb > 0.0))
    throw NumericError("cosine_similarity: zero-norm input");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

}  // namespace tsrelab

#endif  // TSRELAB_OPS_HPP

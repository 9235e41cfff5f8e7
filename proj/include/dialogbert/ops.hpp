// Copyright (c) 2026 The dialogbert-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "dialogbert/rng.hpp"
#include "dialogbert/tensor.hpp"

// Differentiable operations over Tensor<T>. All reductions run sequentially in
// row-major order so results are bitwise reproducible.

namespace dialogbert {

namespace detail {

struct Broadcast {
  Shape out;
  std::array<std::size_t, 4> dims{1, 1, 1, 1};
  std::array<std::size_t, 4> a_stride{};
  std::array<std::size_t, 4> b_stride{};
};

inline std::array<std::size_t, 4> padded_dims(const Shape& s) {
  std::array<std::size_t, 4> d{1, 1, 1, 1};
  const std::size_t off = 4 - s.rank();
  for (std::size_t i = 0; i < s.rank(); ++i) {
    d[off + i] = s[i];
  }
  return d;
}

inline std::array<std::size_t, 4> broadcast_strides(const std::array<std::size_t, 4>& d,
                                                    const std::array<std::size_t, 4>& out) {
  std::array<std::size_t, 4> st{};
  std::size_t acc = 1;
  for (int i = 3; i >= 0; --i) {
    st[i] = (d[i] == 1 && out[i] != 1) ? 0 : acc;
    acc *= d[i];
  }
  return st;
}

inline Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast p;
  const auto da = padded_dims(a);
  const auto db = padded_dims(b);
  const std::size_t rank = std::max(a.rank(), b.rank());
  std::array<std::size_t, 4> out_dims{};
  for (std::size_t i = 0; i < 4; ++i) {
    if (da[i] != db[i] && da[i] != 1 && db[i] != 1) {
      throw ShapeError(std::string(op) + ": shapes " + a.str() + " and " + b.str() + " are not broadcastable");
    }
    p.dims[i] = std::max(da[i], db[i]);
  }
  for (std::size_t i = 0; i < rank; ++i) {
    out_dims[i] = p.dims[4 - rank + i];
  }
  p.out = Shape(std::span<const std::size_t>(out_dims.data(), rank));
  p.a_stride = broadcast_strides(da, p.dims);
  p.b_stride = broadcast_strides(db, p.dims);
  return p;
}

/// Calls f(out_index, a_index, b_index) over the broadcast iteration space.
template <class F>
void for_each_broadcast(const Broadcast& p, F&& f) {
  std::size_t o = 0;
  for (std::size_t i0 = 0; i0 < p.dims[0]; ++i0) {
    for (std::size_t i1 = 0; i1 < p.dims[1]; ++i1) {
      for (std::size_t i2 = 0; i2 < p.dims[2]; ++i2) {
        const std::size_t ab = i0 * p.a_stride[0] + i1 * p.a_stride[1] + i2 * p.a_stride[2];
        const std::size_t bb = i0 * p.b_stride[0] + i1 * p.b_stride[1] + i2 * p.b_stride[2];
        for (std::size_t i3 = 0; i3 < p.dims[3]; ++i3, ++o) {
          f(o, ab + i3 * p.a_stride[3], bb + i3 * p.b_stride[3]);
        }
      }
    }
  }
}

// C[m,n] += A[m,k] B[k,n]
template <class T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        crow[j] += av * brow[j];
      }
    }
  }
}

// C[k,n] += A[m,k]^T G[m,n]
template <class T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* g, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* grow = g + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        crow[j] += av * grow[j];
      }
    }
  }
}

// C[m,k] += G[m,n] B[k,n]^T, through an explicit transpose of B.
template <class T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* g, const T* b, T* c, std::vector<T>& scratch) {
  scratch.resize(n * k);
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t j = 0; j < n; ++j) {
      scratch[j * k + p] = b[p * n + j];
    }
  }
  gemm_nn(m, n, k, g, scratch.data(), c);
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (!(a.shape() == b.shape())) {
    throw ShapeError(std::string(op) + ": shapes " + a.shape().str() + " and " + b.shape().str() + " differ");
  }
}

inline std::array<std::size_t, 4> contiguous_strides(const Shape& s) {
  std::array<std::size_t, 4> st{};
  std::size_t acc = 1;
  for (std::size_t i = s.rank(); i-- > 0;) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic with numpy-style broadcasting.

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() == b.shape()) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = a[i] + b[i];
    }
    return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
      for (std::size_t k = 0; k < 2; ++k) {
        if (T* g = detail::input_grad(self, k)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) {
            g[i] += self.grad[i];
          }
        }
      }
    });
  }
  const auto plan = detail::plan_broadcast(a.shape(), b.shape(), "add");
  std::vector<T> out(plan.out.numel());
  const auto av = a.data();
  const auto bv = b.data();
  detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = av[i] + bv[j]; });
  return detail::make_result<T>(plan.out, std::move(out), {a, b}, [plan](Node<T>& self) {
    T* ga = detail::input_grad(self, 0);
    T* gb = detail::input_grad(self, 1);
    detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
      if (ga) ga[i] += self.grad[o];
      if (gb) gb[j] += self.grad[o];
    });
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  const auto plan = detail::plan_broadcast(a.shape(), b.shape(), "sub");
  std::vector<T> out(plan.out.numel());
  const auto av = a.data();
  const auto bv = b.data();
  detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = av[i] - bv[j]; });
  return detail::make_result<T>(plan.out, std::move(out), {a, b}, [plan](Node<T>& self) {
    T* ga = detail::input_grad(self, 0);
    T* gb = detail::input_grad(self, 1);
    detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
      if (ga) ga[i] += self.grad[o];
      if (gb) gb[j] -= self.grad[o];
    });
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto plan = detail::plan_broadcast(a.shape(), b.shape(), "mul");
  std::vector<T> out(plan.out.numel());
  const auto av = a.data();
  const auto bv = b.data();
  detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = av[i] * bv[j]; });
  return detail::make_result<T>(plan.out, std::move(out), {a, b}, [plan](Node<T>& self) {
    T* ga = detail::input_grad(self, 0);
    T* gb = detail::input_grad(self, 1);
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
      if (ga) ga[i] += self.grad[o] * bv[j];
      if (gb) gb[j] += self.grad[o] * av[i];
    });
  });
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, b);
}
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return sub(a, b);
}
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
  return mul(a, b);
}

/// Elementwise y = f(x) with dy/dx = df(x, y).
template <class T, class F, class DF>
Tensor<T> unary(const Tensor<T>& x, F f, DF df) {
  std::vector<T> out(x.numel());
  const auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = f(xv[i]);
  }
  return detail::make_result<T>(x.shape(), std::move(out), {x}, [df](Node<T>& self) {
    T* g = detail::input_grad(self, 0);
    const auto& xv = self.inputs[0]->value;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      g[i] += self.grad[i] * df(xv[i], self.value[i]);
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  return unary(x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  return unary(x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> neg(const Tensor<T>& x) {
  return scale(x, T(-1));
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  return unary(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

/// Exact GELU, x * Phi(x).
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T kInvSqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T kInvSqrt2Pi = std::numbers::inv_sqrtpi_v<T> * kInvSqrt2;
  return unary(
      x, [](T v) { return v * T(0.5) * (T(1) + std::erf(v * kInvSqrt2)); },
      [](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * kInvSqrt2));
        return cdf + v * kInvSqrt2Pi * std::exp(T(-0.5) * v * v);
      });
}

// ---------------------------------------------------------------------------
// Products and layout.

/// Batched matrix product over the last two axes; leading axes broadcast.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.rank() < 2 || sb.rank() < 2 || sa[sa.rank() - 1] != sb[sb.rank() - 2]) {
    throw ShapeError("matmul: incompatible shapes " + sa.str() + " and " + sb.str());
  }
  const std::size_t m = sa[sa.rank() - 2];
  const std::size_t k = sa[sa.rank() - 1];
  const std::size_t n = sb[sb.rank() - 1];

  // Batch prefixes, right aligned to two axes.
  std::array<std::size_t, 2> ba{1, 1}, bb{1, 1}, bo{1, 1};
  for (std::size_t i = 0; i + 2 < sa.rank(); ++i) ba[2 - (sa.rank() - 2) + i] = sa[i];
  for (std::size_t i = 0; i + 2 < sb.rank(); ++i) bb[2 - (sb.rank() - 2) + i] = sb[i];
  for (std::size_t i = 0; i < 2; ++i) {
    if (ba[i] != bb[i] && ba[i] != 1 && bb[i] != 1) {
      throw ShapeError("matmul: batch dimensions of " + sa.str() + " and " + sb.str() + " are not broadcastable");
    }
    bo[i] = std::max(ba[i], bb[i]);
  }
  const std::size_t out_rank = std::max(sa.rank(), sb.rank());
  std::array<std::size_t, 4> od{};
  for (std::size_t i = 0; i + 2 < out_rank; ++i) od[i] = bo[2 - (out_rank - 2) + i];
  od[out_rank - 2] = m;
  od[out_rank - 1] = n;
  const Shape out_shape(std::span<const std::size_t>(od.data(), out_rank));

  struct Plan {
    std::size_t m, k, n;
    std::vector<std::size_t> a_off, b_off;  // per output batch, in matrices
  };
  Plan plan{m, k, n, {}, {}};
  // A rank-2 right operand lets every batch of `a` fold into one tall product.
  const bool fold = sb.rank() == 2;
  if (fold) {
    plan.m = sa.numel() / k;
    plan.a_off = {0};
    plan.b_off = {0};
  } else {
    for (std::size_t i0 = 0; i0 < bo[0]; ++i0) {
      for (std::size_t i1 = 0; i1 < bo[1]; ++i1) {
        plan.a_off.push_back((ba[0] == 1 ? 0 : i0) * ba[1] + (ba[1] == 1 ? 0 : i1));
        plan.b_off.push_back((bb[0] == 1 ? 0 : i0) * bb[1] + (bb[1] == 1 ? 0 : i1));
      }
    }
  }

  std::vector<T> out(out_shape.numel(), T(0));
  const T* av = a.data().data();
  const T* bv = b.data().data();
  for (std::size_t t = 0; t < plan.a_off.size(); ++t) {
    detail::gemm_nn(plan.m, plan.k, plan.n, av + plan.a_off[t] * plan.m * plan.k, bv + plan.b_off[t] * plan.k * plan.n,
                    out.data() + t * plan.m * plan.n);
  }
  return detail::make_result<T>(out_shape, std::move(out), {a, b}, [plan](Node<T>& self) {
    T* ga = detail::input_grad(self, 0);
    T* gb = detail::input_grad(self, 1);
    const T* av = self.inputs[0]->value.data();
    const T* bv = self.inputs[1]->value.data();
    const std::size_t mk = plan.m * plan.k, kn = plan.k * plan.n, mn = plan.m * plan.n;
    std::vector<T> scratch;
    for (std::size_t t = 0; t < plan.a_off.size(); ++t) {
      const T* g = self.grad.data() + t * mn;
      if (ga) detail::gemm_nt(plan.m, plan.n, plan.k, g, bv + plan.b_off[t] * kn, ga + plan.a_off[t] * mk, scratch);
      if (gb) detail::gemm_tn(plan.m, plan.k, plan.n, av + plan.a_off[t] * mk, g, gb + plan.b_off[t] * kn);
    }
  });
}

/// Same data under a new shape with equal element count.
template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape.numel() != x.numel()) {
    throw ShapeError("reshape: cannot view " + x.shape().str() + " as " + shape.str());
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return detail::make_result<T>(shape, std::move(out), {x}, [](Node<T>& self) {
    T* g = detail::input_grad(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

/// Reorders axes: output axis i is input axis axes[i].
template <class T>
Tensor<T> permute(const Tensor<T>& x, std::initializer_list<std::size_t> axes_list) {
  const Shape& s = x.shape();
  const std::vector<std::size_t> axes(axes_list);
  if (axes.size() != s.rank()) {
    throw ShapeError("permute: axis list length does not match rank of " + s.str());
  }
  std::array<std::size_t, 4> seen{}, od{1, 1, 1, 1};
  for (std::size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] >= s.rank() || seen[axes[i]]++) {
      throw ShapeError("permute: invalid axis permutation");
    }
    od[i] = s[axes[i]];
  }
  const Shape out_shape(std::span<const std::size_t>(od.data(), s.rank()));
  const auto in_st = detail::contiguous_strides(s);
  // Input stride for each output axis, padded to four axes.
  std::array<std::size_t, 4> st{0, 0, 0, 0}, dims{1, 1, 1, 1};
  const std::size_t off = 4 - s.rank();
  for (std::size_t i = 0; i < s.rank(); ++i) {
    st[off + i] = in_st[axes[i]];
    dims[off + i] = od[i];
  }
  auto walk = [st, dims](auto&& f) {
    std::size_t o = 0;
    for (std::size_t i0 = 0; i0 < dims[0]; ++i0)
      for (std::size_t i1 = 0; i1 < dims[1]; ++i1)
        for (std::size_t i2 = 0; i2 < dims[2]; ++i2) {
          const std::size_t base = i0 * st[0] + i1 * st[1] + i2 * st[2];
          for (std::size_t i3 = 0; i3 < dims[3]; ++i3) f(o++, base + i3 * st[3]);
        }
  };
  std::vector<T> out(x.numel());
  const auto xv = x.data();
  walk([&](std::size_t o, std::size_t i) { out[o] = xv[i]; });
  return detail::make_result<T>(out_shape, std::move(out), {x}, [walk](Node<T>& self) {
    T* g = detail::input_grad(self, 0);
    walk([&](std::size_t o, std::size_t i) { g[i] += self.grad[o]; });
  });
}

/// Swaps the last two axes.
template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  switch (x.rank()) {
    case 2: return permute(x, {1, 0});
    case 3: return permute(x, {0, 2, 1});
    case 4: return permute(x, {0, 1, 3, 2});
    default: throw ShapeError("transpose: rank must be 2..4, got shape " + x.shape().str());
  }
}

/// Joins tensors along `axis`; all other extents must agree.
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) {
    throw ShapeError("concat: no inputs");
  }
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.rank()) {
    throw ShapeError("concat: axis out of range for " + s0.str());
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.rank(); ++i) inner *= s0[i];
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.rank() == s0.rank();
    for (std::size_t i = 0; ok && i < s.rank(); ++i) ok = (i == axis) || s[i] == s0[i];
    if (!ok) {
      throw ShapeError("concat: shape " + s.str() + " incompatible with " + s0.str());
    }
    widths.push_back(s[axis] * inner);
    total += s[axis];
  }
  std::array<std::size_t, 4> od{};
  for (std::size_t i = 0; i < s0.rank(); ++i) od[i] = s0[i];
  od[axis] = total;
  const Shape out_shape(std::span<const std::size_t>(od.data(), s0.rank()));
  const std::size_t row = total * inner;
  std::vector<T> out(out_shape.numel());
  std::size_t col = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto v = parts[p].data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(v.begin() + o * widths[p], widths[p], out.begin() + o * row + col);
    }
    col += widths[p];
  }
  return detail::make_result<T>(out_shape, std::move(out), parts, [widths, outer, row](Node<T>& self) {
    std::size_t col = 0;
    for (std::size_t p = 0; p < widths.size(); ++p) {
      if (T* g = detail::input_grad(self, p)) {
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < widths[p]; ++j) g[o * widths[p] + j] += self.grad[o * row + col + j];
      }
      col += widths[p];
    }
  });
}

/// Elements [start, end) along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t end) {
  const Shape& s = x.shape();
  if (axis >= s.rank() || start >= end || end > s[axis]) {
    throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(end) + ") invalid for axis " +
                     std::to_string(axis) + " of " + s.str());
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.rank(); ++i) inner *= s[i];
  std::array<std::size_t, 4> od{};
  for (std::size_t i = 0; i < s.rank(); ++i) od[i] = s[i];
  od[axis] = end - start;
  const Shape out_shape(std::span<const std::size_t>(od.data(), s.rank()));
  const std::size_t in_row = s[axis] * inner, out_row = (end - start) * inner, first = start * inner;
  std::vector<T> out(out_shape.numel());
  const auto v = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(v.begin() + o * in_row + first, out_row, out.begin() + o * out_row);
  }
  return detail::make_result<T>(out_shape, std::move(out), {x}, [outer, in_row, out_row, first](Node<T>& self) {
    T* g = detail::input_grad(self, 0);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < out_row; ++j) g[o * in_row + first + j] += self.grad[o * out_row + j];
  });
}

/// Rows of a [N, D] table. A negative index yields a zero row.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const std::int64_t> ids) {
  if (table.rank() != 2) {
    throw ShapeError("gather_rows: table must be rank 2, got " + table.shape().str());
  }
  const std::size_t rows = table.dim(0), width = table.dim(1);
  std::vector<std::int64_t> idx(ids.begin(), ids.end());
  std::vector<T> out(idx.size() * width, T(0));
  const auto v = table.data();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= static_cast<std::int64_t>(rows)) {
      throw ValueError("gather_rows: index " + std::to_string(idx[r]) + " out of range for " + std::to_string(rows) +
                       " rows");
    }
    if (idx[r] >= 0) {
      std::copy_n(v.begin() + idx[r] * width, width, out.begin() + r * width);
    }
  }
  const Shape out_shape{idx.size(), width};
  return detail::make_result<T>(out_shape, std::move(out), {table}, [idx = std::move(idx), width](Node<T>& self) {
    T* g = detail::input_grad(self, 0);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      if (idx[r] < 0) continue;
      T* dst = g + idx[r] * width;
      const T* src = self.grad.data() + r * width;
      for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
    }
  });
}

/// Embedding lookup: rows of `table` for non-negative token ids.
template <class T>
Tensor<T> embedding_gather(const Tensor<T>& table, std::span<const std::int64_t> ids) {
  for (auto id : ids) {
    if (id < 0) {
      throw ValueError("embedding_gather: negative token id " + std::to_string(id));
    }
  }
  return gather_rows(table, ids);
}

// ---------------------------------------------------------------------------
// Normalizations.

namespace detail {

template <class T>
void check_row_mask(const Tensor<T>& x, const Mask& mask, const char* op) {
  if (!(mask.shape == x.shape())) {
    throw ShapeError(std::string(op) + ": mask shape " + mask.shape.str() + " does not match " + x.shape().str());
  }
}

}  // namespace detail

/// Softmax along the last axis. Masked positions are exactly zero; a row with
/// no valid position is an error.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, const Mask& mask) {
  detail::check_row_mask(x, mask, "softmax");
  const std::size_t width = x.shape().back(), rows = x.shape().rows();
  std::vector<T> out(x.numel(), T(0));
  const auto v = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t b = r * width;
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < width; ++j) {
      if (mask[b + j]) {
        mx = std::max(mx, v[b + j]);
        any = true;
      }
    }
    if (!any) {
      throw ValueError("softmax: row " + std::to_string(r) + " has no valid positions");
    }
    T z = 0;
    for (std::size_t j = 0; j < width; ++j) {
      if (mask[b + j]) {
        out[b + j] = std::exp(v[b + j] - mx);
        z += out[b + j];
      }
    }
    for (std::size_t j = 0; j < width; ++j) out[b + j] /= z;
  }
  return detail::make_result<T>(x.shape(), std::move(out), {x}, [width, rows](Node<T>& self) {
    T* g = detail::input_grad(self, 0);
    const auto& y = self.value;
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t b = r * width;
      T dot = 0;
      for (std::size_t j = 0; j < width; ++j) dot += self.grad[b + j] * y[b + j];
      for (std::size_t j = 0; j < width; ++j) g[b + j] += y[b + j] * (self.grad[b + j] - dot);
    }
  });
}

template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  return softmax(x, Mask::ones(x.shape()));
}

/// Log-softmax along the last axis; masked positions are reported as 0.
template <class T>
Tensor<T> log_softmax(const Tensor<T>& x, const Mask& mask) {
  detail::check_row_mask(x, mask, "log_softmax");
  const std::size_t width = x.shape().back(), rows = x.shape().rows();
  std::vector<T> out(x.numel(), T(0));
  const auto v = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t b = r * width;
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < width; ++j) {
      if (mask[b + j]) {
        mx = std::max(mx, v[b + j]);
        any = true;
      }
    }
    if (!any) {
      throw ValueError("log_softmax: row " + std::to_string(r) + " has no valid positions");
    }
    T z = 0;
    for (std::size_t j = 0; j < width; ++j) {
      if (mask[b + j]) z += std::exp(v[b + j] - mx);
    }
    const T lse = mx + std::log(z);
    for (std::size_t j = 0; j < width; ++j) {
      if (mask[b + j]) out[b + j] = v[b + j] - lse;
    }
  }
  return detail::make_result<T>(x.shape(), std::move(out), {x}, [width, rows, mask](Node<T>& self) {
    T* g = detail::input_grad(self, 0);
    const auto& y = self.value;
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t b = r * width;
      T total = 0;
      for (std::size_t j = 0; j < width; ++j) {
        if (mask[b + j]) total += self.grad[b + j];
      }
      for (std::size_t j = 0; j < width; ++j) {
        if (mask[b + j]) g[b + j] += self.grad[b + j] - std::exp(y[b + j]) * total;
      }
    }
  });
}

template <class T>
Tensor<T> log_softmax(const Tensor<T>& x) {
  return log_softmax(x, Mask::ones(x.shape()));
}

/// Normalizes each row over the last axis, then applies gamma and beta.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-12)) {
  const std::size_t width = x.shape().back(), rows = x.shape().rows();
  if (gamma.numel() != width || beta.numel() != width || gamma.rank() != 1 || beta.rank() != 1) {
    throw ShapeError("layer_norm: gamma " + gamma.shape().str() + " / beta " + beta.shape().str() +
                     " do not match last axis of " + x.shape().str());
  }
  if (!(eps > T(0))) {
    throw ValueError("layer_norm: eps must be positive");
  }
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel()), inv_std(rows);
  const auto v = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t b = r * width;
    T mean = 0;
    for (std::size_t j = 0; j < width; ++j) mean += v[b + j];
    mean /= T(width);
    T var = 0;
    for (std::size_t j = 0; j < width; ++j) var += (v[b + j] - mean) * (v[b + j] - mean);
    var /= T(width);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < width; ++j) {
      xhat[b + j] = (v[b + j] - mean) * inv_std[r];
      out[b + j] = xhat[b + j] * gv[j] + bv[j];
    }
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [width, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        T* gx = detail::input_grad(self, 0);
        T* gg = detail::input_grad(self, 1);
        T* gb = detail::input_grad(self, 2);
        const auto& gamma = self.inputs[1]->value;
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t b = r * width;
          const T* dy = self.grad.data() + b;
          if (gg || gb) {
            for (std::size_t j = 0; j < width; ++j) {
              if (gg) gg[j] += dy[j] * xhat[b + j];
              if (gb) gb[j] += dy[j];
            }
          }
          if (gx) {
            T mean_d = 0, mean_dx = 0;
            for (std::size_t j = 0; j < width; ++j) {
              const T d = dy[j] * gamma[j];
              mean_d += d;
              mean_dx += d * xhat[b + j];
            }
            mean_d /= T(width);
            mean_dx /= T(width);
            for (std::size_t j = 0; j < width; ++j) {
              const T d = dy[j] * gamma[j];
              gx[b + j] += inv_std[r] * (d - mean_d - xhat[b + j] * mean_dx);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions and losses.

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  return detail::make_result<T>(Shape{}, {s}, {x}, [](Node<T>& self) {
    T* g = detail::input_grad(self, 0);
    const T d = self.grad[0];
    for (std::size_t i = 0; i < self.inputs[0]->value.size(); ++i) g[i] += d;
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / T(x.numel()));
}

/// Sum over one axis, which is removed from the shape.
template <class T>
Tensor<T> sum(const Tensor<T>& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.rank()) {
    throw ShapeError("sum: axis out of range for " + s.str());
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.rank(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  std::array<std::size_t, 4> od{};
  std::size_t r = 0;
  for (std::size_t i = 0; i < s.rank(); ++i) {
    if (i != axis) od[r++] = s[i];
  }
  const Shape out_shape(std::span<const std::size_t>(od.data(), r));
  std::vector<T> out(outer * inner, T(0));
  const auto v = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < len; ++k)
      for (std::size_t j = 0; j < inner; ++j) out[o * inner + j] += v[(o * len + k) * inner + j];
  return detail::make_result<T>(out_shape, std::move(out), {x}, [outer, inner, len](Node<T>& self) {
    T* g = detail::input_grad(self, 0);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < len; ++k)
        for (std::size_t j = 0; j < inner; ++j) g[(o * len + k) * inner + j] += self.grad[o * inner + j];
  });
}

enum class Reduction { kNone, kSum, kMean };

/// Elementwise squared error (a - b)^2 with the chosen reduction.
template <class T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b, Reduction reduction = Reduction::kMean) {
  detail::require_same_shape(a, b, "mse");
  const Tensor<T> d = sub(a, b);
  const Tensor<T> sq = mul(d, d);
  switch (reduction) {
    case Reduction::kNone: return sq;
    case Reduction::kSum: return sum(sq);
    case Reduction::kMean: return mean(sq);
  }
  return sq;
}

/// Mean negative log-softmax of `targets` over rows whose target is not
/// `ignore_index`.
template <class T>
Tensor<T> cross_entropy_logits(const Tensor<T>& logits, std::span<const std::int64_t> targets,
                               std::int64_t ignore_index) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw ShapeError("cross_entropy_logits: logits " + logits.shape().str() + " vs " +
                     std::to_string(targets.size()) + " targets");
  }
  const std::size_t n = logits.dim(0), vocab = logits.dim(1);
  std::vector<std::int64_t> tgt(targets.begin(), targets.end());
  std::size_t count = 0;
  for (auto t : tgt) {
    if (t == ignore_index) continue;
    if (t < 0 || t >= static_cast<std::int64_t>(vocab)) {
      throw ValueError("cross_entropy_logits: target " + std::to_string(t) + " outside [0," + std::to_string(vocab) +
                       ")");
    }
    ++count;
  }
  if (count == 0) {
    throw ValueError("cross_entropy_logits: every target is ignored");
  }
  const auto v = logits.data();
  std::vector<T> lse(n, T(0));
  T total = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (tgt[r] == ignore_index) continue;
    const T* row = v.data() + r * vocab;
    T mx = row[0];
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
    T z = 0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
    lse[r] = mx + std::log(z);
    total += lse[r] - row[tgt[r]];
  }
  const T inv = T(1) / T(count);
  return detail::make_result<T>(Shape{}, {total * inv}, {logits},
                                [tgt = std::move(tgt), lse = std::move(lse), inv, vocab, ignore_index](Node<T>& self) {
                                  T* g = detail::input_grad(self, 0);
                                  const auto& v = self.inputs[0]->value;
                                  const T d = self.grad[0] * inv;
                                  for (std::size_t r = 0; r < tgt.size(); ++r) {
                                    if (tgt[r] == ignore_index) continue;
                                    for (std::size_t j = 0; j < vocab; ++j) {
                                      g[r * vocab + j] += d * std::exp(v[r * vocab + j] - lse[r]);
                                    }
                                    g[r * vocab + tgt[r]] -= d;
                                  }
                                });
}

/// Inverted dropout. Identity when not training or p == 0.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng, bool training) {
  if (p < 0.0 || p >= 1.0) {
    throw ValueError("dropout: p must lie in [0, 1)");
  }
  if (!training || p == 0.0) {
    return x;
  }
  const T keep_scale = T(1) / T(1.0 - p);
  std::vector<T> factor(x.numel());
  for (auto& f : factor) f = rng.uniform() < p ? T(0) : keep_scale;
  std::vector<T> out(x.numel());
  const auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] * factor[i];
  return detail::make_result<T>(x.shape(), std::move(out), {x}, [factor = std::move(factor)](Node<T>& self) {
    T* g = detail::input_grad(self, 0);
    for (std::size_t i = 0; i < factor.size(); ++i) g[i] += self.grad[i] * factor[i];
  });
}

}  // namespace dialogbert

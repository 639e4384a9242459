#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "charlm/rng.hpp"
#include "charlm/tensor.hpp"

// Differentiable operations over Tensor<T>. Every op checks its forward
// values for NaN/Inf and throws NonFiniteValue, so a diverging step fails
// at the op that produced the first bad value.

namespace charlm {

namespace detail {

template <typename T>
void check_finite(std::span<const T> values, const char* op) {
  for (const T v : values) {
    if (!std::isfinite(v)) throw NonFiniteValue(std::string("forward value of ") + op + " is not finite");
  }
}

template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(Node<T>&)> backward) {
  check_finite<T>(value, op);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs_grad = false;
  if (grad_mode()) {
    for (const auto* in : inputs) needs_grad = needs_grad || in->requires_grad();
  }
  if (needs_grad) {
    node->requires_grad = true;
    for (const auto* in : inputs) node->parents.push_back(in->node_ptr());
    node->backward = std::move(backward);
  }
  return Tensor<T>::from_node(std::move(node));
}

// Gradient buffer of parent i, or nullptr when it does not take gradients.
template <typename T>
std::vector<T>* parent_grad(Node<T>& self, std::size_t i) {
  auto& p = *self.parents[i];
  return p.requires_grad ? &p.ensure_grad() : nullptr;
}

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

inline std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeMismatch("axis " + std::to_string(axis) + " invalid for rank " + std::to_string(rank));
  return static_cast<std::size_t>(a);
}

// outer x axis x inner factorisation of a shape around one axis.
struct AxisSplit {
  std::size_t outer = 1, axis = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.axis = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename T, typename F, typename DA, typename DB>
Tensor<T> binary(const char* op, const Tensor<T>& a, const Tensor<T>& b, F f, DA da, DB db) {
  Shape out_shape;
  if (a.shape() == b.shape() || is_suffix(b.shape(), a.shape())) {
    out_shape = a.shape();
  } else if (is_suffix(a.shape(), b.shape())) {
    out_shape = b.shape();
  } else {
    throw ShapeMismatch(std::string(op) + ": " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const std::size_t n = numel(out_shape);
  const std::size_t na = a.size();
  const std::size_t nb = b.size();
  auto av = a.values();
  auto bv = b.values();
  std::vector<T> out(n);
  if (na == n && nb == n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i], bv[i]);
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i % na], bv[i % nb]);
  }
  return make_result<T>(op, out_shape, std::move(out), {&a, &b}, [n, na, nb, da, db](Node<T>& self) {
    const auto& x = self.parents[0]->value;
    const auto& y = self.parents[1]->value;
    if (auto* ga = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) (*ga)[i % na] += self.grad[i] * da(x[i % na], y[i % nb], self.value[i]);
    }
    if (auto* gb = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < n; ++i) (*gb)[i % nb] += self.grad[i] * db(x[i % na], y[i % nb], self.value[i]);
    }
  });
}

// dfdx receives (input, output).
template <typename T, typename F, typename D>
Tensor<T> unary(const char* op, const Tensor<T>& a, F f, D dfdx) {
  auto av = a.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  return make_result<T>(op, a.shape(), std::move(out), {&a}, [dfdx](Node<T>& self) {
    auto* ga = parent_grad(self, 0);
    if (!ga) return;
    const auto& x = self.parents[0]->value;
    for (std::size_t i = 0; i < x.size(); ++i) (*ga)[i] += self.grad[i] * dfdx(x[i], self.value[i]);
  });
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

}  // namespace detail

// ---- elementwise ---------------------------------------------------------
// Binary ops broadcast when one operand's shape is a trailing suffix of the
// other's (a bias [D] against [B,T,D], a scalar against anything).

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T{1}; }, [](T, T, T) { return T{1}; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T{1}; }, [](T, T, T) { return T{-1}; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; }, [](T x, T, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T{1} / y; },
      [](T x, T y, T) { return -x / (y * y); });
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return detail::unary<T>(
      "scale", a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  return detail::unary<T>(
      "tanh", a, [](T x) { return std::tanh(x); }, [](T, T y) { return T{1} - y * y; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary<T>(
      "sigmoid", a, [](T x) { return detail::stable_sigmoid(x); }, [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary<T>(
      "exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  return detail::unary<T>(
      "log", a, [](T x) { return std::log(x); }, [](T x, T) { return T{1} / x; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary<T>(
      "relu", a, [](T x) { return x > T{0} ? x : T{0}; }, [](T x, T) { return x > T{0} ? T{1} : T{0}; });
}

// ---- reductions ----------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total{};
  for (const T v : a.values()) total += v;
  return detail::make_result<T>("sum", {}, {total}, {&a}, [](detail::Node<T>& self) {
    if (auto* ga = detail::parent_grad(self, 0)) {
      for (auto& g : *ga) g += self.grad[0];
    }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T{1} / static_cast<T>(a.size()));
}

// ---- shape manipulation --------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeMismatch("reshape " + to_string(a.shape()) + " -> " + to_string(shape));
  }
  std::vector<T> out(a.values().begin(), a.values().end());
  return detail::make_result<T>("reshape", std::move(shape), std::move(out), {&a}, [](detail::Node<T>& self) {
    if (auto* ga = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += self.grad[i];
    }
  });
}

// General axis permutation: out.shape[i] = a.shape[perm[i]].
template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& perm) {
  const std::size_t r = a.rank();
  if (perm.size() != r) throw ShapeMismatch("permute rank mismatch");
  Shape out_shape(r);
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * a.shape()[i];
  // Stride into the input for each output axis.
  std::vector<std::size_t> gather_strides(r);
  std::vector<bool> used(r, false);
  for (std::size_t i = 0; i < r; ++i) {
    if (perm[i] >= r || used[perm[i]]) throw ShapeMismatch("permute: invalid permutation");
    used[perm[i]] = true;
    out_shape[i] = a.shape()[perm[i]];
    gather_strides[i] = in_strides[perm[i]];
  }
  const std::size_t n = a.size();
  std::vector<std::size_t> source(n);
  {
    std::vector<std::size_t> idx(r, 0);
    std::size_t offset = 0;
    for (std::size_t flat = 0; flat < n; ++flat) {
      source[flat] = offset;
      for (std::size_t ax = r; ax-- > 0;) {
        ++idx[ax];
        offset += gather_strides[ax];
        if (idx[ax] < out_shape[ax]) break;
        offset -= gather_strides[ax] * idx[ax];
        idx[ax] = 0;
      }
    }
  }
  auto av = a.values();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = av[source[i]];
  return detail::make_result<T>("permute", std::move(out_shape), std::move(out), {&a},
                                [source = std::move(source)](detail::Node<T>& self) {
                                  if (auto* ga = detail::parent_grad(self, 0)) {
                                    for (std::size_t i = 0; i < source.size(); ++i) (*ga)[source[i]] += self.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
  if (a.rank() < 2) throw ShapeMismatch("transpose_last2 needs rank >= 2");
  std::vector<std::size_t> perm(a.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[a.rank() - 1], perm[a.rank() - 2]);
  return permute(a, perm);
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeMismatch("concat of nothing");
  const std::size_t ax = detail::normalize_axis(axis, parts[0].rank());
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    if (p.rank() != out_shape.size()) throw ShapeMismatch("concat rank mismatch");
    for (std::size_t i = 0; i < p.rank(); ++i) {
      if (i != ax && p.shape()[i] != parts[0].shape()[i]) {
        throw ShapeMismatch("concat " + to_string(p.shape()) + " with " + to_string(parts[0].shape()));
      }
    }
    out_shape[ax] += p.shape()[ax];
  }
  const auto split = detail::split_at(out_shape, ax);
  std::vector<std::size_t> widths;  // contiguous block length per outer index
  for (const auto& p : parts) widths.push_back(p.shape()[ax] * split.inner);
  const std::size_t row = split.axis * split.inner;
  std::vector<T> out(numel(out_shape));
  std::size_t col = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto pv = parts[k].values();
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(pv.begin() + o * widths[k], widths[k], out.begin() + o * row + col);
    }
    col += widths[k];
  }
  auto node = std::make_shared<detail::Node<T>>();
  detail::check_finite<T>(out, "concat");
  node->shape = out_shape;
  node->value = std::move(out);
  node->op = "concat";
  bool needs = false;
  if (detail::grad_mode()) {
    for (const auto& p : parts) needs = needs || p.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const auto& p : parts) node->parents.push_back(p.node_ptr());
    node->backward = [widths, row, outer = split.outer](detail::Node<T>& self) {
      std::size_t c = 0;
      for (std::size_t k = 0; k < widths.size(); ++k) {
        if (auto* g = detail::parent_grad(self, k)) {
          for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t i = 0; i < widths[k]; ++i) (*g)[o * widths[k] + i] += self.grad[o * row + c + i];
          }
        }
        c += widths[k];
      }
    };
  }
  return Tensor<T>::from_node(std::move(node));
}

// Half-open range [begin, end) along one axis.
template <typename T>
Tensor<T> slice(const Tensor<T>& a, int axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = detail::normalize_axis(axis, a.rank());
  if (begin > end || end > a.shape()[ax]) {
    throw ShapeMismatch("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") of " + to_string(a.shape()));
  }
  const auto split = detail::split_at(a.shape(), ax);
  Shape out_shape = a.shape();
  out_shape[ax] = end - begin;
  const std::size_t width = (end - begin) * split.inner;
  const std::size_t row = split.axis * split.inner;
  const std::size_t start = begin * split.inner;
  auto av = a.values();
  std::vector<T> out(split.outer * width);
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::copy_n(av.begin() + o * row + start, width, out.begin() + o * width);
  }
  return detail::make_result<T>("slice", std::move(out_shape), std::move(out), {&a},
                                [outer = split.outer, width, row, start](detail::Node<T>& self) {
                                  if (auto* ga = detail::parent_grad(self, 0)) {
                                    for (std::size_t o = 0; o < outer; ++o) {
                                      for (std::size_t i = 0; i < width; ++i) {
                                        (*ga)[o * row + start + i] += self.grad[o * width + i];
                                      }
                                    }
                                  }
                                });
}

// ---- linear algebra ------------------------------------------------------

// [..., m, k] x [..., k, n] -> [..., m, n]. Leading dimensions broadcast when
// one side's leading shape is a trailing suffix of the other's (a rank-2
// weight against a batched activation is the common case).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) throw ShapeMismatch("matmul needs rank >= 2 operands");
  const std::size_t m = a.dim(-2), k = a.dim(-1), k2 = b.dim(-2), n = b.dim(-1);
  if (k != k2) throw ShapeMismatch("matmul inner dims " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const Shape lead_a(a.shape().begin(), a.shape().end() - 2);
  const Shape lead_b(b.shape().begin(), b.shape().end() - 2);
  Shape lead;
  if (detail::is_suffix(lead_b, lead_a)) {
    lead = lead_a;
  } else if (detail::is_suffix(lead_a, lead_b)) {
    lead = lead_b;
  } else {
    throw ShapeMismatch("matmul batch dims " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const std::size_t batches = numel(lead), ba = numel(lead_a), bb = numel(lead_b);
  Shape out_shape = lead;
  out_shape.push_back(m);
  out_shape.push_back(n);

  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;
  using MMap = Eigen::Map<Mat>;

  std::vector<T> out(batches * m * n);
  const T* ap = a.values().data();
  const T* bp = b.values().data();
  if (bb == 1) {
    // One GEMM with the batch folded into the rows of a.
    MMap(out.data(), static_cast<Eigen::Index>(batches * m), static_cast<Eigen::Index>(n)).noalias() =
        CMap(ap, static_cast<Eigen::Index>(batches * m), static_cast<Eigen::Index>(k)) *
        CMap(bp, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
  } else {
    for (std::size_t i = 0; i < batches; ++i) {
      MMap(out.data() + i * m * n, m, n).noalias() =
          CMap(ap + (i % ba) * m * k, m, k) * CMap(bp + (i % bb) * k * n, k, n);
    }
  }
  return detail::make_result<T>(
      "matmul", std::move(out_shape), std::move(out), {&a, &b}, [=](detail::Node<T>& self) {
        const T* av = self.parents[0]->value.data();
        const T* bv = self.parents[1]->value.data();
        const T* g = self.grad.data();
        auto* ga = detail::parent_grad(self, 0);
        auto* gb = detail::parent_grad(self, 1);
        if (bb == 1) {
          const auto rows = static_cast<Eigen::Index>(batches * m);
          if (ga) MMap(ga->data(), rows, k).noalias() += CMap(g, rows, n) * CMap(bv, k, n).transpose();
          if (gb) MMap(gb->data(), k, n).noalias() += CMap(av, rows, k).transpose() * CMap(g, rows, n);
          return;
        }
        for (std::size_t i = 0; i < batches; ++i) {
          const T* gi = g + i * m * n;
          if (ga) {
            MMap(ga->data() + (i % ba) * m * k, m, k).noalias() +=
                CMap(gi, m, n) * CMap(bv + (i % bb) * k * n, k, n).transpose();
          }
          if (gb) {
            MMap(gb->data() + (i % bb) * k * n, k, n).noalias() +=
                CMap(av + (i % ba) * m * k, m, k).transpose() * CMap(gi, m, n);
          }
        }
      });
}

// ---- softmax family ------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis = -1) {
  const std::size_t ax = detail::normalize_axis(axis, a.rank());
  const auto s = detail::split_at(a.shape(), ax);
  auto av = a.values();
  std::vector<T> out(av.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.axis * s.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < s.axis; ++j) mx = std::max(mx, av[base + j * s.inner]);
      T total{};
      for (std::size_t j = 0; j < s.axis; ++j) {
        const T e = std::exp(av[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < s.axis; ++j) out[base + j * s.inner] /= total;
    }
  }
  return detail::make_result<T>("softmax", a.shape(), std::move(out), {&a}, [s](detail::Node<T>& self) {
    auto* ga = detail::parent_grad(self, 0);
    if (!ga) return;
    const auto& y = self.value;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.axis * s.inner + in;
        T dot{};
        for (std::size_t j = 0; j < s.axis; ++j) dot += self.grad[base + j * s.inner] * y[base + j * s.inner];
        for (std::size_t j = 0; j < s.axis; ++j) {
          const std::size_t idx = base + j * s.inner;
          (*ga)[idx] += y[idx] * (self.grad[idx] - dot);
        }
      }
    }
  });
}

// Softmax over the last axis of [..., rows, cols] where mask[r * cols + c]
// marks visible entries. Hidden entries get exactly zero probability and take
// no part in the max or the normaliser, so they cannot influence the output.
template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& a, const std::vector<std::uint8_t>& mask) {
  if (a.rank() < 2) throw ShapeMismatch("masked_softmax needs rank >= 2");
  const std::size_t rows = a.dim(-2), cols = a.dim(-1);
  if (mask.size() != rows * cols) throw ShapeMismatch("mask size does not match [rows, cols]");
  const std::size_t outer = a.size() / (rows * cols);
  auto av = a.values();
  std::vector<T> out(av.size(), T{});
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = (o * rows + r) * cols;
      const std::uint8_t* mrow = mask.data() + r * cols;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t c = 0; c < cols; ++c) {
        if (mrow[c]) mx = std::max(mx, av[base + c]);
      }
      if (mx == -std::numeric_limits<T>::infinity()) throw ShapeMismatch("masked_softmax row with no visible entry");
      T total{};
      for (std::size_t c = 0; c < cols; ++c) {
        if (!mrow[c]) continue;
        const T e = std::exp(av[base + c] - mx);
        out[base + c] = e;
        total += e;
      }
      for (std::size_t c = 0; c < cols; ++c) out[base + c] /= total;
    }
  }
  return detail::make_result<T>("masked_softmax", a.shape(), std::move(out), {&a},
                                [rows, cols, outer](detail::Node<T>& self) {
                                  auto* ga = detail::parent_grad(self, 0);
                                  if (!ga) return;
                                  const auto& y = self.value;
                                  for (std::size_t o = 0; o < outer * rows; ++o) {
                                    const std::size_t base = o * cols;
                                    T dot{};
                                    for (std::size_t c = 0; c < cols; ++c) dot += self.grad[base + c] * y[base + c];
                                    for (std::size_t c = 0; c < cols; ++c) {
                                      (*ga)[base + c] += y[base + c] * (self.grad[base + c] - dot);
                                    }
                                  }
                                });
}

// Causal visibility for `rows` queries placed after `memory` earlier keys:
// query r sees keys 0 .. memory + r.
inline std::vector<std::uint8_t> causal_mask(std::size_t rows, std::size_t memory = 0) {
  const std::size_t cols = rows + memory;
  std::vector<std::uint8_t> mask(rows * cols, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c <= memory + r; ++c) mask[r * cols + c] = 1;
  }
  return mask;
}

// Mean over all positions of -log softmax(logits)[target], in nats. logits is
// [..., V]; targets holds one id per leading position.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets) {
  const std::size_t vocab = logits.dim(-1);
  const std::size_t rows = logits.size() / vocab;
  if (targets.size() != rows) {
    throw ShapeMismatch("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                        std::to_string(rows) + " positions");
  }
  auto lv = logits.values();
  std::vector<T> log_norm(rows);
  T total{};
  for (std::size_t r = 0; r < rows; ++r) {
    const auto t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw IndexOutOfRange("target id " + std::to_string(t) + " with vocabulary " + std::to_string(vocab));
    }
    const T* row = lv.data() + r * vocab;
    T mx = *std::max_element(row, row + vocab);
    T acc{};
    for (std::size_t v = 0; v < vocab; ++v) acc += std::exp(row[v] - mx);
    log_norm[r] = mx + std::log(acc);
    total += log_norm[r] - row[t];
  }
  std::vector<std::int32_t> ids(targets.begin(), targets.end());
  return detail::make_result<T>(
      "cross_entropy", {}, {total / static_cast<T>(rows)}, {&logits},
      [ids = std::move(ids), log_norm = std::move(log_norm), vocab, rows](detail::Node<T>& self) {
        auto* g = detail::parent_grad(self, 0);
        if (!g) return;
        const auto& lv = self.parents[0]->value;
        const T upstream = self.grad[0] / static_cast<T>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t v = 0; v < vocab; ++v) {
            (*g)[r * vocab + v] += upstream * std::exp(lv[r * vocab + v] - log_norm[r]);
          }
          (*g)[r * vocab + static_cast<std::size_t>(ids[r])] -= upstream;
        }
      });
}

// ---- gather / normalisation / regularisation -----------------------------

// Row gather: ids of shape id_shape select rows of table [V, E]; the result is
// id_shape + [E]. The backward pass scatter-adds into the selected rows.
template <typename T>
Tensor<T> embedding(std::span<const std::int32_t> ids, const Shape& id_shape, const Tensor<T>& table) {
  if (table.rank() != 2) throw ShapeMismatch("embedding table must be rank 2");
  if (numel(id_shape) != ids.size()) throw ShapeMismatch("embedding ids do not match id shape");
  const std::size_t vocab = table.dim(0), width = table.dim(1);
  auto tv = table.values();
  std::vector<T> out(ids.size() * width);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw IndexOutOfRange("embedding id " + std::to_string(ids[i]) + " with table of " + std::to_string(vocab) + " rows");
    }
    std::copy_n(tv.begin() + static_cast<std::size_t>(ids[i]) * width, width, out.begin() + i * width);
  }
  Shape out_shape = id_shape;
  out_shape.push_back(width);
  std::vector<std::int32_t> copy(ids.begin(), ids.end());
  return detail::make_result<T>("embedding", std::move(out_shape), std::move(out), {&table},
                                [copy = std::move(copy), width](detail::Node<T>& self) {
                                  auto* g = detail::parent_grad(self, 0);
                                  if (!g) return;
                                  for (std::size_t i = 0; i < copy.size(); ++i) {
                                    T* dst = g->data() + static_cast<std::size_t>(copy[i]) * width;
                                    for (std::size_t e = 0; e < width; ++e) dst[e] += self.grad[i * width + e];
                                  }
                                });
}

// Normalises each vector along the last axis to zero mean and unit variance,
// then applies gain and bias of shape [D].
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
  const std::size_t width = x.dim(-1);
  if (gain.size() != width || bias.size() != width) throw ShapeMismatch("layer_norm affine terms must match last dim");
  const std::size_t rows = x.size() / width;
  auto xv = x.values();
  auto gv = gain.values();
  auto bv = bias.values();
  std::vector<T> normed(x.size());
  std::vector<T> inv_std(rows);
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * width;
    T mu{};
    for (std::size_t i = 0; i < width; ++i) mu += row[i];
    mu /= static_cast<T>(width);
    T var{};
    for (std::size_t i = 0; i < width; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<T>(width);
    inv_std[r] = T{1} / std::sqrt(var + eps);
    for (std::size_t i = 0; i < width; ++i) {
      const T h = (row[i] - mu) * inv_std[r];
      normed[r * width + i] = h;
      out[r * width + i] = h * gv[i] + bv[i];
    }
  }
  return detail::make_result<T>(
      "layer_norm", x.shape(), std::move(out), {&x, &gain, &bias},
      [normed = std::move(normed), inv_std = std::move(inv_std), width, rows](detail::Node<T>& self) {
        auto* gx = detail::parent_grad(self, 0);
        auto* gg = detail::parent_grad(self, 1);
        auto* gb = detail::parent_grad(self, 2);
        const auto& gain = self.parents[1]->value;
        std::vector<T> dh(width);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* dy = self.grad.data() + r * width;
          const T* h = normed.data() + r * width;
          if (gg) for (std::size_t i = 0; i < width; ++i) (*gg)[i] += dy[i] * h[i];
          if (gb) for (std::size_t i = 0; i < width; ++i) (*gb)[i] += dy[i];
          if (!gx) continue;
          T mean_dh{}, mean_dh_h{};
          for (std::size_t i = 0; i < width; ++i) {
            dh[i] = dy[i] * gain[i];
            mean_dh += dh[i];
            mean_dh_h += dh[i] * h[i];
          }
          mean_dh /= static_cast<T>(width);
          mean_dh_h /= static_cast<T>(width);
          for (std::size_t i = 0; i < width; ++i) {
            (*gx)[r * width + i] += inv_std[r] * (dh[i] - mean_dh - h[i] * mean_dh_h);
          }
        }
      });
}

// Inverted dropout; identity when rate is 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw InvalidConfig("dropout rate must be < 1");
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(x.size());
  for (auto& m : mask) m = rng.uniform() < rate ? T{0} : keep_scale;
  auto xv = x.values();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
  return detail::make_result<T>("dropout", x.shape(), std::move(out), {&x},
                                [mask = std::move(mask)](detail::Node<T>& self) {
                                  if (auto* g = detail::parent_grad(self, 0)) {
                                    for (std::size_t i = 0; i < mask.size(); ++i) (*g)[i] += self.grad[i] * mask[i];
                                  }
                                });
}

// Realigns position scores from distance order to key order for relative
// attention. scores is [..., q, k] where column d holds the score for a
// query-to-key distance of d. With `memory` cached keys preceding the q
// queries, out[i][j] = scores[i][memory + i - j] for j <= memory + i and 0 for
// keys in the future (those are masked downstream anyway).
template <typename T>
Tensor<T> relative_shift(const Tensor<T>& scores, std::size_t memory) {
  const std::size_t rows = scores.dim(-2), cols = scores.dim(-1);
  if (cols != rows + memory) {
    throw ShapeMismatch("relative_shift: key length " + std::to_string(cols) + " != memory " +
                        std::to_string(memory) + " + queries " + std::to_string(rows));
  }
  const std::size_t outer = scores.size() / (rows * cols);
  auto sv = scores.values();
  std::vector<T> out(sv.size(), T{});
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < rows; ++i) {
      const std::size_t base = (o * rows + i) * cols;
      for (std::size_t j = 0; j <= memory + i; ++j) out[base + j] = sv[base + memory + i - j];
    }
  }
  return detail::make_result<T>("relative_shift", scores.shape(), std::move(out), {&scores},
                                [rows, cols, outer, memory](detail::Node<T>& self) {
                                  auto* g = detail::parent_grad(self, 0);
                                  if (!g) return;
                                  for (std::size_t o = 0; o < outer; ++o) {
                                    for (std::size_t i = 0; i < rows; ++i) {
                                      const std::size_t base = (o * rows + i) * cols;
                                      for (std::size_t j = 0; j <= memory + i; ++j) {
                                        (*g)[base + memory + i - j] += self.grad[base + j];
                                      }
                                    }
                                  }
                                });
}

}  // namespace charlm

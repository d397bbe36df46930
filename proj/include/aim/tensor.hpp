// Copyright 2026 The AIM Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// Every operation records a node holding its parents and a backward closure
// when at least one parent requires a gradient. Nodes carry a creation
// sequence number, so insertion order is a valid topological order and
// backward() simply replays reachable nodes in reverse. The recorded graph is
// released as backward() consumes it.

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

#include "aim/errors.hpp"

namespace aim {

using Shape = std::vector<std::size_t>;
using RowIndex = std::vector<std::size_t>;
using BatchRowIndex = std::vector<RowIndex>;
// Per-(batch, row) flags stored flat as b * rows + r.
using RowMask = std::vector<std::uint8_t>;

// Additive attention-mask constant. Finite on purpose: max-subtraction in
// softmax stays NaN-free even when a whole row is masked.
inline constexpr double kMaskNegative = -1e9;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Tensor storage. A fixed 64-byte base alignment makes Eigen's vectorized
// reductions sum in an order that depends only on offsets, never on where
// the allocator placed the buffer, so repeated runs are bit-identical.
template <class S>
using Buffer = std::vector<S, Eigen::aligned_allocator<S>>;

namespace detail {
inline thread_local bool grad_enabled_flag = true;
inline thread_local std::uint64_t next_seq = 0;
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag; }

// Disables graph recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled_flag) { detail::grad_enabled_flag = false; }
  ~NoGradGuard() { detail::grad_enabled_flag = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class S>
struct Node {
  Shape shape;
  Buffer<S> data;
  Buffer<S> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  bool consumed = false;
  std::uint64_t seq = detail::next_seq++;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  S* grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), S(0));
    return grad.data();
  }
};

template <class S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<S>> node) : node_(std::move(node)) {}

  static Tensor from_data(Shape shape, const std::vector<S>& data, bool requires_grad = false) {
    return from_buffer(std::move(shape), Buffer<S>(data.begin(), data.end()), requires_grad);
  }

  static Tensor from_buffer(Shape shape, Buffer<S> data, bool requires_grad = false) {
    for (auto d : shape) {
      if (d == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
    if (shape.empty()) shape = {1};
    if (numel(shape) != data.size()) {
      throw DimensionError("shape " + shape_str(shape) + " does not match " +
                           std::to_string(data.size()) + " values");
    }
    auto n = std::make_shared<Node<S>>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, S value, bool requires_grad = false) {
    Buffer<S> d(numel(shape), value);
    return from_buffer(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), S(0), requires_grad);
  }

  static Tensor scalar(S value, bool requires_grad = false) {
    return from_data({1}, {value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }

  // Extent along `axis`; negative axes count from the end.
  std::size_t dim(std::ptrdiff_t axis) const {
    auto r = static_cast<std::ptrdiff_t>(rank());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw IndexError("axis out of range for " + shape_str(shape()));
    return node_->shape[static_cast<std::size_t>(axis)];
  }

  std::span<const S> data() const { return node_->data; }
  std::span<S> mutable_data() { return node_->data; }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const S> grad() const {
    if (!has_grad()) return {};
    return node_->grad;
  }
  std::span<S> mutable_grad() { return {node_->grad_buffer(), node_->data.size()}; }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  S item() const {
    if (size() != 1) throw ContractViolation("item() on non-scalar " + shape_str(shape()));
    return node_->data[0];
  }

  S operator[](std::size_t i) const { return node_->data[i]; }

  // Fresh leaf with a copy of the values and no history.
  Tensor detach(bool requires_grad = false) const {
    return from_buffer(shape(), node_->data, requires_grad);
  }

  Node<S>* node() const { return node_.get(); }
  const std::shared_ptr<Node<S>>& node_ptr() const { return node_; }
  const char* op_name() const { return node_->op; }

 private:
  std::shared_ptr<Node<S>> node_;
};

// Ordered record of what a backward pass visited, in processing order.
struct GraphTrace {
  struct Entry {
    std::uint64_t seq;
    std::string op;
    std::vector<std::uint64_t> parent_seqs;
  };
  std::vector<Entry> entries;
};

namespace detail {

template <class S, class Fn>
Tensor<S> record(Shape shape, Buffer<S> data, std::vector<Tensor<S>> parents, const char* op,
                 Fn&& backward) {
  auto node = std::make_shared<Node<S>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  node->is_leaf = false;
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const auto& p : parents) node->parents.push_back(p.node_ptr());
    node->backward = std::forward<Fn>(backward);
  }
  return Tensor<S>(std::move(node));
}

template <class S>
bool wants_grad(const std::shared_ptr<Node<S>>& n) {
  return n && n->requires_grad;
}

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapMat = Eigen::Map<RowMat<S>>;
template <class S>
using ConstMapMat = Eigen::Map<const RowMat<S>>;
template <class S>
using ArrayX = Eigen::Array<S, Eigen::Dynamic, 1>;

// b broadcasts against a when equal or when b's shape is a suffix of a's.
inline std::size_t broadcast_inner(const Shape& a, const Shape& b) {
  if (a == b) return numel(b);
  if (b.size() <= a.size() && std::equal(b.rbegin(), b.rend(), a.rbegin())) return numel(b);
  throw DimensionError("cannot broadcast " + shape_str(b) + " against " + shape_str(a));
}

}  // namespace detail

enum class ElementwiseKind { kAdd, kSub, kMul, kScale, kGelu, kTanh, kSquare };

// ---------------------------------------------------------------------------
// Binary elementwise ops. `b` may broadcast over the leading axes of `a`.

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  const std::size_t inner = detail::broadcast_inner(a.shape(), b.shape());
  const std::size_t n = a.size();
  Buffer<S> out(n);
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  for (std::size_t o = 0; o < n; o += inner) {
    for (std::size_t i = 0; i < inner; ++i) out[o + i] = pa[o + i] + pb[i];
  }
  return detail::record<S>(a.shape(), std::move(out), {a, b}, "add", [inner, n](Node<S>& self) {
    const S* g = self.grad.data();
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) {
      S* ga = pa->grad_buffer();
      for (std::size_t k = 0; k < n; ++k) ga[k] += g[k];
    }
    if (pb->requires_grad) {
      S* gb = pb->grad_buffer();
      for (std::size_t o = 0; o < n; o += inner) {
        for (std::size_t i = 0; i < inner; ++i) gb[i] += g[o + i];
      }
    }
  });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  const std::size_t inner = detail::broadcast_inner(a.shape(), b.shape());
  const std::size_t n = a.size();
  Buffer<S> out(n);
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  for (std::size_t o = 0; o < n; o += inner) {
    for (std::size_t i = 0; i < inner; ++i) out[o + i] = pa[o + i] - pb[i];
  }
  return detail::record<S>(a.shape(), std::move(out), {a, b}, "sub", [inner, n](Node<S>& self) {
    const S* g = self.grad.data();
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) {
      S* ga = pa->grad_buffer();
      for (std::size_t k = 0; k < n; ++k) ga[k] += g[k];
    }
    if (pb->requires_grad) {
      S* gb = pb->grad_buffer();
      for (std::size_t o = 0; o < n; o += inner) {
        for (std::size_t i = 0; i < inner; ++i) gb[i] -= g[o + i];
      }
    }
  });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  const std::size_t inner = detail::broadcast_inner(a.shape(), b.shape());
  const std::size_t n = a.size();
  Buffer<S> out(n);
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  for (std::size_t o = 0; o < n; o += inner) {
    for (std::size_t i = 0; i < inner; ++i) out[o + i] = pa[o + i] * pb[i];
  }
  return detail::record<S>(a.shape(), std::move(out), {a, b}, "mul", [inner, n](Node<S>& self) {
    const S* g = self.grad.data();
    auto& na = self.parents[0];
    auto& nb = self.parents[1];
    const S* va = na->data.data();
    const S* vb = nb->data.data();
    if (na->requires_grad) {
      S* ga = na->grad_buffer();
      for (std::size_t o = 0; o < n; o += inner) {
        for (std::size_t i = 0; i < inner; ++i) ga[o + i] += g[o + i] * vb[i];
      }
    }
    if (nb->requires_grad) {
      S* gb = nb->grad_buffer();
      for (std::size_t o = 0; o < n; o += inner) {
        for (std::size_t i = 0; i < inner; ++i) gb[i] += g[o + i] * va[o + i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Unary elementwise ops.

template <class S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
  Buffer<S> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return detail::record<S>(a.shape(), std::move(out), {a}, "scale", [factor](Node<S>& self) {
    S* ga = self.parents[0]->grad_buffer();
    const S* g = self.grad.data();
    for (std::size_t k = 0; k < self.grad.size(); ++k) ga[k] += g[k] * factor;
  });
}

template <class S>
Tensor<S> square(const Tensor<S>& a) {
  Buffer<S> out(a.size());
  const S* pa = a.data().data();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = pa[k] * pa[k];
  return detail::record<S>(a.shape(), std::move(out), {a}, "square", [](Node<S>& self) {
    auto& na = self.parents[0];
    S* ga = na->grad_buffer();
    const S* g = self.grad.data();
    const S* va = na->data.data();
    for (std::size_t k = 0; k < self.grad.size(); ++k) ga[k] += S(2) * va[k] * g[k];
  });
}

template <class S>
Tensor<S> tanh(const Tensor<S>& a) {
  Buffer<S> out(a.size());
  const S* pa = a.data().data();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = std::tanh(pa[k]);
  auto y = out;
  return detail::record<S>(a.shape(), std::move(out), {a}, "tanh",
                           [y = std::move(y)](Node<S>& self) {
                             S* ga = self.parents[0]->grad_buffer();
                             const S* g = self.grad.data();
                             for (std::size_t k = 0; k < y.size(); ++k) {
                               ga[k] += g[k] * (S(1) - y[k] * y[k]);
                             }
                           });
}

// GELU, tanh approximation: x * sigmoid(2u) with u = sqrt(2/pi)(x + 0.044715 x^3).
// Written through exp so Eigen vectorizes it in double precision as well.
template <class S>
Tensor<S> gelu(const Tensor<S>& a) {
  using Arr = detail::ArrayX<S>;
  const S c = S(0.7978845608028654);
  const S k = S(0.044715);
  const auto n = static_cast<Eigen::Index>(a.size());
  Eigen::Map<const Arr> x(a.data().data(), n);
  Arr u = c * (x + k * x * x * x);
  Arr sig = (S(1) + (S(-2) * u).exp()).inverse();
  Buffer<S> out(a.size());
  Eigen::Map<Arr>(out.data(), n) = x * sig;
  return detail::record<S>(
      a.shape(), std::move(out), {a}, "gelu", [sig = std::move(sig), c, k, n](Node<S>& self) {
        auto& na = self.parents[0];
        Eigen::Map<const Arr> x(na->data.data(), n);
        Eigen::Map<const Arr> g(self.grad.data(), n);
        Eigen::Map<Arr> ga(na->grad_buffer(), n);
        // d/dx [x s(2u)] = s + x * 2 s (1 - s) u'
        ga += g * (sig + x * S(2) * sig * (S(1) - sig) * c * (S(1) + S(3) * k * x * x));
      });
}

// Dispatcher matching the generic elementwise signature; `factor` is used by kScale.
template <class S>
Tensor<S> elementwise(ElementwiseKind kind, const Tensor<S>& a,
                      const std::type_identity_t<std::optional<Tensor<S>>>& b = std::nullopt,
                      std::type_identity_t<S> factor = S(1)) {
  auto need_b = [&]() -> const Tensor<S>& {
    if (!b || !b->defined()) throw ContractViolation("binary elementwise op needs a second operand");
    return *b;
  };
  switch (kind) {
    case ElementwiseKind::kAdd: return add(a, need_b());
    case ElementwiseKind::kSub: return sub(a, need_b());
    case ElementwiseKind::kMul: return mul(a, need_b());
    case ElementwiseKind::kScale: return scale(a, factor);
    case ElementwiseKind::kGelu: return gelu(a);
    case ElementwiseKind::kTanh: return tanh(a);
    case ElementwiseKind::kSquare: return square(a);
  }
  throw ContractViolation("unknown elementwise kind");
}

// ---------------------------------------------------------------------------
// Reductions and reshaping.

template <class S>
Tensor<S> sum(const Tensor<S>& a) {
  S total = S(0);
  for (S v : a.data()) total += v;
  return detail::record<S>({1}, {total}, {a}, "sum", [](Node<S>& self) {
    auto& na = self.parents[0];
    S* ga = na->grad_buffer();
    const S g = self.grad[0];
    for (std::size_t k = 0; k < na->data.size(); ++k) ga[k] += g;
  });
}

template <class S>
Tensor<S> mean(const Tensor<S>& a) {
  return scale(sum(a), S(1) / static_cast<S>(a.size()));
}

template <class S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw DimensionError("cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  Buffer<S> out(a.data().begin(), a.data().end());
  return detail::record<S>(std::move(shape), std::move(out), {a}, "reshape", [](Node<S>& self) {
    S* ga = self.parents[0]->grad_buffer();
    const S* g = self.grad.data();
    for (std::size_t k = 0; k < self.grad.size(); ++k) ga[k] += g[k];
  });
}

// ---------------------------------------------------------------------------
// Matrix multiplication. a: [..., M, K]; b: [K, N] (shared across a's batch)
// or [..., K, N] with identical batch extents. With transpose_b, b is stored
// as [..., N, K].

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, bool transpose_b = false) {
  using detail::ConstMapMat;
  using detail::MapMat;
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul needs rank >= 2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(-2);
  const std::size_t k = a.dim(-1);
  const std::size_t kb = transpose_b ? b.dim(-1) : b.dim(-2);
  const std::size_t n = transpose_b ? b.dim(-2) : b.dim(-1);
  if (k != kb) {
    throw DimensionError("matmul inner extents differ: " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + (transpose_b ? " (b transposed)" : ""));
  }
  const bool shared_b = b.rank() == 2;
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  if (!shared_b) {
    Shape bb(b.shape().begin(), b.shape().end() - 2);
    if (bb != out_shape) {
      throw DimensionError("matmul batch extents differ: " + shape_str(a.shape()) + " and " +
                           shape_str(b.shape()));
    }
  }
  const std::size_t batch = numel(out_shape);
  out_shape.push_back(m);
  out_shape.push_back(n);
  Buffer<S> out(batch * m * n);
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k),
             N = static_cast<Eigen::Index>(n);
  if (shared_b) {
    ConstMapMat<S> A(a.data().data(), M * static_cast<Eigen::Index>(batch), K);
    MapMat<S> C(out.data(), M * static_cast<Eigen::Index>(batch), N);
    if (transpose_b) {
      C.noalias() = A * ConstMapMat<S>(b.data().data(), N, K).transpose();
    } else {
      C.noalias() = A * ConstMapMat<S>(b.data().data(), K, N);
    }
  } else {
    for (std::size_t t = 0; t < batch; ++t) {
      ConstMapMat<S> A(a.data().data() + t * m * k, M, K);
      MapMat<S> C(out.data() + t * m * n, M, N);
      if (transpose_b) {
        C.noalias() = A * ConstMapMat<S>(b.data().data() + t * n * k, N, K).transpose();
      } else {
        C.noalias() = A * ConstMapMat<S>(b.data().data() + t * k * n, K, N);
      }
    }
  }
  return detail::record<S>(
      std::move(out_shape), std::move(out), {a, b}, "matmul",
      [=](Node<S>& self) {
        auto& na = self.parents[0];
        auto& nb = self.parents[1];
        const bool ga_on = na->requires_grad, gb_on = nb->requires_grad;
        const std::size_t reps = shared_b ? 1 : batch;
        const Eigen::Index rows = shared_b ? M * static_cast<Eigen::Index>(batch) : M;
        S* ga = ga_on ? na->grad_buffer() : nullptr;
        S* gb = gb_on ? nb->grad_buffer() : nullptr;
        for (std::size_t t = 0; t < reps; ++t) {
          ConstMapMat<S> G(self.grad.data() + t * m * n, rows, N);
          ConstMapMat<S> A(na->data.data() + t * m * k, rows, K);
          const S* bp = nb->data.data() + t * k * n;
          if (transpose_b) {
            ConstMapMat<S> B(bp, N, K);
            if (ga_on) MapMat<S>(ga + t * m * k, rows, K).noalias() += G * B;
            if (gb_on) MapMat<S>(gb + t * k * n, N, K).noalias() += G.transpose() * A;
          } else {
            ConstMapMat<S> B(bp, K, N);
            if (ga_on) MapMat<S>(ga + t * m * k, rows, K).noalias() += G * B.transpose();
            if (gb_on) MapMat<S>(gb + t * k * n, K, N).noalias() += A.transpose() * G;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Softmax over the last axis with an optional additive mask of {0, kMaskNegative}.
// The mask has x's rank (or fewer axes, left-padded with 1) and each extent is
// either 1 or equal to x's. The mask never receives a gradient.

template <class S>
Tensor<S> softmax_lastdim(const Tensor<S>& x,
                          const std::type_identity_t<std::optional<Tensor<S>>>& additive_mask = std::nullopt) {
  using Arr = detail::ArrayX<S>;
  const std::size_t len = x.dim(-1);
  const std::size_t rows = x.size() / len;
  const std::size_t r = x.rank();
  std::vector<std::size_t> mstride;  // mask stride per x axis (0 when broadcast)
  const S* mp = nullptr;
  if (additive_mask && additive_mask->defined()) {
    const Shape& ms = additive_mask->shape();
    if (ms.size() > r) throw DimensionError("mask " + shape_str(ms) + " has more axes than " + shape_str(x.shape()));
    Shape padded(r - ms.size(), 1);
    padded.insert(padded.end(), ms.begin(), ms.end());
    mstride.assign(r, 0);
    std::size_t st = 1;
    for (std::size_t ax = r; ax-- > 0;) {
      if (padded[ax] != 1 && padded[ax] != x.shape()[ax]) {
        throw DimensionError("mask " + shape_str(ms) + " does not broadcast to " + shape_str(x.shape()));
      }
      mstride[ax] = padded[ax] == 1 ? 0 : st;
      st *= padded[ax];
    }
    mp = additive_mask->data().data();
  }
  Buffer<S> out(x.size());
  Arr buf(static_cast<Eigen::Index>(len));
  std::vector<std::size_t> idx(r, 0);  // multi-index of the row start
  for (std::size_t row = 0; row < rows; ++row) {
    const S* xr = x.data().data() + row * len;
    for (std::size_t j = 0; j < len; ++j) buf[static_cast<Eigen::Index>(j)] = xr[j];
    if (mp) {
      std::size_t off = 0;
      for (std::size_t ax = 0; ax + 1 < r; ++ax) off += idx[ax] * mstride[ax];
      const std::size_t ls = mstride[r - 1];
      for (std::size_t j = 0; j < len; ++j) buf[static_cast<Eigen::Index>(j)] += mp[off + j * ls];
      // advance the multi-index over all axes but the last
      for (std::size_t ax = r - 1; ax-- > 0;) {
        if (++idx[ax] < x.shape()[ax]) break;
        idx[ax] = 0;
      }
    }
    const S mx = buf.maxCoeff();
    Eigen::Map<Arr> yr(out.data() + row * len, static_cast<Eigen::Index>(len));
    yr = (buf - mx).exp();
    yr /= yr.sum();
  }
  return detail::record<S>(x.shape(), std::move(out), {x}, "softmax",
                           [len, rows](Node<S>& self) {
                             S* gx = self.parents[0]->grad_buffer();
                             const S* g = self.grad.data();
                             for (std::size_t row = 0; row < rows; ++row) {
                               const S* yr = self.data.data() + row * len;
                               const S* gr = g + row * len;
                               S dot = S(0);
                               for (std::size_t j = 0; j < len; ++j) dot += yr[j] * gr[j];
                               S* gxr = gx + row * len;
                               for (std::size_t j = 0; j < len; ++j) gxr[j] += yr[j] * (gr[j] - dot);
                             }
                           });
}

// ---------------------------------------------------------------------------
// Layer normalization over the last axis.

template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     S eps = S(1e-5)) {
  const std::size_t f = x.dim(-1);
  if (gamma.size() != f || beta.size() != f) {
    throw DimensionError("layer_norm affine params " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match " + shape_str(x.shape()));
  }
  if (!(eps > S(0))) throw ContractViolation("layer_norm eps must be positive");
  const std::size_t rows = x.size() / f;
  Buffer<S> out(x.size()), xhat(x.size()), rstd(rows);
  const S* px = x.data().data();
  const S* pg = gamma.data().data();
  const S* pb = beta.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const S* xr = px + r * f;
    S mu = S(0);
    for (std::size_t j = 0; j < f; ++j) mu += xr[j];
    mu /= static_cast<S>(f);
    S var = S(0);
    for (std::size_t j = 0; j < f; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<S>(f);
    const S rs = S(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < f; ++j) {
      const S h = (xr[j] - mu) * rs;
      xhat[r * f + j] = h;
      out[r * f + j] = h * pg[j] + pb[j];
    }
  }
  return detail::record<S>(
      x.shape(), std::move(out), {x, gamma, beta}, "layer_norm",
      [xhat = std::move(xhat), rstd = std::move(rstd), f, rows](Node<S>& self) {
        auto& nx = self.parents[0];
        auto& ng = self.parents[1];
        auto& nb = self.parents[2];
        const S* g = self.grad.data();
        const S* gam = ng->data.data();
        S* gx = nx->requires_grad ? nx->grad_buffer() : nullptr;
        S* gg = ng->requires_grad ? ng->grad_buffer() : nullptr;
        S* gbeta = nb->requires_grad ? nb->grad_buffer() : nullptr;
        for (std::size_t r = 0; r < rows; ++r) {
          const S* gr = g + r * f;
          const S* hr = xhat.data() + r * f;
          if (gg || gbeta) {
            for (std::size_t j = 0; j < f; ++j) {
              if (gg) gg[j] += gr[j] * hr[j];
              if (gbeta) gbeta[j] += gr[j];
            }
          }
          if (gx) {
            S mean_dh = S(0), mean_dh_h = S(0);
            for (std::size_t j = 0; j < f; ++j) {
              const S dh = gr[j] * gam[j];
              mean_dh += dh;
              mean_dh_h += dh * hr[j];
            }
            mean_dh /= static_cast<S>(f);
            mean_dh_h /= static_cast<S>(f);
            S* gxr = gx + r * f;
            for (std::size_t j = 0; j < f; ++j) {
              gxr[j] += rstd[r] * (gr[j] * gam[j] - mean_dh - hr[j] * mean_dh_h);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Row gather / scatter along the token axis.

namespace detail {
inline void check_rows(const RowIndex& idx, std::size_t n) {
  for (auto i : idx) {
    if (i >= n) throw IndexError("row index " + std::to_string(i) + " out of range [0, " + std::to_string(n) + ")");
  }
}
inline void check_distinct(const RowIndex& idx, std::size_t n) {
  std::vector<std::uint8_t> seen(n, 0);
  for (auto i : idx) {
    if (seen[i]) throw ContractViolation("duplicate scatter index " + std::to_string(i));
    seen[i] = 1;
  }
}
}  // namespace detail

// x: [N, F] -> [K, F], rows in idx order.
template <class S>
Tensor<S> gather_rows(const Tensor<S>& x, const RowIndex& idx) {
  if (x.rank() != 2) throw DimensionError("gather_rows expects [N,F], got " + shape_str(x.shape()));
  if (idx.empty()) throw IndexError("gather_rows with empty index list");
  const std::size_t n = x.dim(0), f = x.dim(1);
  detail::check_rows(idx, n);
  Buffer<S> out(idx.size() * f);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(x.data().data() + idx[r] * f, f, out.data() + r * f);
  }
  return detail::record<S>({idx.size(), f}, std::move(out), {x}, "gather_rows", [idx, f](Node<S>& self) {
    S* gx = self.parents[0]->grad_buffer();
    const S* g = self.grad.data();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (std::size_t j = 0; j < f; ++j) gx[idx[r] * f + j] += g[r * f + j];
    }
  });
}

// x: [B, N, F] (per-sample rows) or [N, F] (shared rows) -> [B, K, F].
// Every sample must select the same number of rows.
template <class S>
Tensor<S> gather_rows(const Tensor<S>& x, const BatchRowIndex& idx) {
  if (x.rank() != 2 && x.rank() != 3) {
    throw DimensionError("gather_rows expects [N,F] or [B,N,F], got " + shape_str(x.shape()));
  }
  const bool shared = x.rank() == 2;
  const std::size_t b = idx.size();
  if (b == 0) throw IndexError("gather_rows with empty batch");
  if (!shared && x.dim(0) != b) {
    throw DimensionError("gather_rows batch of " + std::to_string(b) + " index lists for " + shape_str(x.shape()));
  }
  const std::size_t k = idx[0].size();
  if (k == 0) throw IndexError("gather_rows with empty index list");
  const std::size_t n = x.dim(-2), f = x.dim(-1);
  for (const auto& row : idx) {
    if (row.size() != k) throw DimensionError("gather_rows index lists differ in length");
    detail::check_rows(row, n);
  }
  Buffer<S> out(b * k * f);
  for (std::size_t s = 0; s < b; ++s) {
    const S* base = x.data().data() + (shared ? 0 : s * n * f);
    for (std::size_t r = 0; r < k; ++r) {
      std::copy_n(base + idx[s][r] * f, f, out.data() + (s * k + r) * f);
    }
  }
  return detail::record<S>({b, k, f}, std::move(out), {x}, "gather_rows",
                           [idx, shared, n, k, f](Node<S>& self) {
                             S* gx = self.parents[0]->grad_buffer();
                             const S* g = self.grad.data();
                             for (std::size_t s = 0; s < idx.size(); ++s) {
                               S* gb = gx + (shared ? 0 : s * n * f);
                               for (std::size_t r = 0; r < k; ++r) {
                                 const S* gr = g + (s * k + r) * f;
                                 S* dst = gb + idx[s][r] * f;
                                 for (std::size_t j = 0; j < f; ++j) dst[j] += gr[j];
                               }
                             }
                           });
}

// Copy of base [N, F] with rows idx replaced by values [K, F].
template <class S>
Tensor<S> scatter_rows(const Tensor<S>& values, const RowIndex& idx, const Tensor<S>& base) {
  if (values.rank() != 2 || base.rank() != 2 || values.dim(1) != base.dim(1) || values.dim(0) != idx.size()) {
    throw DimensionError("scatter_rows shapes " + shape_str(values.shape()) + " into " + shape_str(base.shape()));
  }
  const std::size_t n = base.dim(0), f = base.dim(1);
  detail::check_rows(idx, n);
  detail::check_distinct(idx, n);
  Buffer<S> out(base.data().begin(), base.data().end());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(values.data().data() + r * f, f, out.data() + idx[r] * f);
  }
  return detail::record<S>(base.shape(), std::move(out), {values, base}, "scatter_rows",
                           [idx, n, f](Node<S>& self) {
                             auto& nv = self.parents[0];
                             auto& nb = self.parents[1];
                             const S* g = self.grad.data();
                             if (nv->requires_grad) {
                               S* gv = nv->grad_buffer();
                               for (std::size_t r = 0; r < idx.size(); ++r) {
                                 for (std::size_t j = 0; j < f; ++j) gv[r * f + j] += g[idx[r] * f + j];
                               }
                             }
                             if (nb->requires_grad) {
                               std::vector<std::uint8_t> hit(n, 0);
                               for (auto i : idx) hit[i] = 1;
                               S* gb = nb->grad_buffer();
                               for (std::size_t i = 0; i < n; ++i) {
                                 if (hit[i]) continue;
                                 for (std::size_t j = 0; j < f; ++j) gb[i * f + j] += g[i * f + j];
                               }
                             }
                           });
}

// Batched scatter: values [B, K, F], base [B, N, F].
template <class S>
Tensor<S> scatter_rows(const Tensor<S>& values, const BatchRowIndex& idx, const Tensor<S>& base) {
  if (values.rank() != 3 || base.rank() != 3 || values.dim(0) != base.dim(0) || values.dim(2) != base.dim(2) ||
      idx.size() != values.dim(0)) {
    throw DimensionError("scatter_rows shapes " + shape_str(values.shape()) + " into " + shape_str(base.shape()));
  }
  const std::size_t b = base.dim(0), n = base.dim(1), f = base.dim(2), k = values.dim(1);
  for (const auto& row : idx) {
    if (row.size() != k) throw DimensionError("scatter_rows index list length differs from values");
    detail::check_rows(row, n);
    detail::check_distinct(row, n);
  }
  Buffer<S> out(base.data().begin(), base.data().end());
  for (std::size_t s = 0; s < b; ++s) {
    for (std::size_t r = 0; r < k; ++r) {
      std::copy_n(values.data().data() + (s * k + r) * f, f, out.data() + (s * n + idx[s][r]) * f);
    }
  }
  return detail::record<S>(base.shape(), std::move(out), {values, base}, "scatter_rows",
                           [idx, n, f, k](Node<S>& self) {
                             auto& nv = self.parents[0];
                             auto& nb = self.parents[1];
                             const S* g = self.grad.data();
                             const std::size_t b = idx.size();
                             if (nv->requires_grad) {
                               S* gv = nv->grad_buffer();
                               for (std::size_t s = 0; s < b; ++s) {
                                 for (std::size_t r = 0; r < k; ++r) {
                                   const S* src = g + (s * n + idx[s][r]) * f;
                                   S* dst = gv + (s * k + r) * f;
                                   for (std::size_t j = 0; j < f; ++j) dst[j] += src[j];
                                 }
                               }
                             }
                             if (nb->requires_grad) {
                               S* gb = nb->grad_buffer();
                               std::vector<std::uint8_t> hit(n);
                               for (std::size_t s = 0; s < b; ++s) {
                                 std::fill(hit.begin(), hit.end(), 0);
                                 for (auto i : idx[s]) hit[i] = 1;
                                 for (std::size_t i = 0; i < n; ++i) {
                                   if (hit[i]) continue;
                                   const std::size_t o = (s * n + i) * f;
                                   for (std::size_t j = 0; j < f; ++j) gb[o + j] += g[o + j];
                                 }
                               }
                             }
                           });
}

// out[b, l] = mask[b*L + l] ? row : x[b, l]. x: [B, L, F], row: [F].
template <class S>
Tensor<S> fill_rows(const Tensor<S>& x, const Tensor<S>& row, const RowMask& mask) {
  if (x.rank() != 3 || row.size() != x.dim(2)) {
    throw DimensionError("fill_rows shapes " + shape_str(x.shape()) + " and " + shape_str(row.shape()));
  }
  const std::size_t rows = x.dim(0) * x.dim(1), f = x.dim(2);
  if (mask.size() != rows) throw DimensionError("fill_rows mask length does not match rows");
  Buffer<S> out(x.data().begin(), x.data().end());
  for (std::size_t r = 0; r < rows; ++r) {
    if (mask[r]) std::copy_n(row.data().data(), f, out.data() + r * f);
  }
  return detail::record<S>(x.shape(), std::move(out), {x, row}, "fill_rows", [mask, rows, f](Node<S>& self) {
    auto& nx = self.parents[0];
    auto& nr = self.parents[1];
    const S* g = self.grad.data();
    S* gx = nx->requires_grad ? nx->grad_buffer() : nullptr;
    S* gr = nr->requires_grad ? nr->grad_buffer() : nullptr;
    for (std::size_t r = 0; r < rows; ++r) {
      if (mask[r]) {
        if (gr) for (std::size_t j = 0; j < f; ++j) gr[j] += g[r * f + j];
      } else if (gx) {
        for (std::size_t j = 0; j < f; ++j) gx[r * f + j] += g[r * f + j];
      }
    }
  });
}

// Mean over the rows of each sample flagged in `include`. x: [B, L, F] -> [B, F].
template <class S>
Tensor<S> masked_mean_rows(const Tensor<S>& x, const RowMask& include) {
  if (x.rank() != 3) throw DimensionError("masked_mean_rows expects [B,L,F], got " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), l = x.dim(1), f = x.dim(2);
  if (include.size() != b * l) throw DimensionError("masked_mean_rows mask length does not match rows");
  Buffer<S> out(b * f, S(0));
  Buffer<S> inv(b);
  for (std::size_t s = 0; s < b; ++s) {
    std::size_t cnt = 0;
    for (std::size_t r = 0; r < l; ++r) {
      if (!include[s * l + r]) continue;
      ++cnt;
      const S* xr = x.data().data() + (s * l + r) * f;
      for (std::size_t j = 0; j < f; ++j) out[s * f + j] += xr[j];
    }
    if (cnt == 0) throw ContractViolation("masked_mean_rows: sample " + std::to_string(s) + " has no rows to pool");
    inv[s] = S(1) / static_cast<S>(cnt);
    for (std::size_t j = 0; j < f; ++j) out[s * f + j] *= inv[s];
  }
  return detail::record<S>({b, f}, std::move(out), {x}, "masked_mean_rows",
                           [include, inv, l, f](Node<S>& self) {
                             S* gx = self.parents[0]->grad_buffer();
                             const S* g = self.grad.data();
                             for (std::size_t s = 0; s < inv.size(); ++s) {
                               for (std::size_t r = 0; r < l; ++r) {
                                 if (!include[s * l + r]) continue;
                                 S* dst = gx + (s * l + r) * f;
                                 for (std::size_t j = 0; j < f; ++j) dst[j] += g[s * f + j] * inv[s];
                               }
                             }
                           });
}

// ---------------------------------------------------------------------------
// Layout permutations used by attention and patching.

// [B, L, H*D] -> [B, H, L, D]
template <class S>
Tensor<S> split_heads(const Tensor<S>& x, std::size_t heads) {
  if (x.rank() != 3 || heads == 0 || x.dim(2) % heads != 0) {
    throw DimensionError("split_heads cannot split " + shape_str(x.shape()) + " into " + std::to_string(heads) + " heads");
  }
  const std::size_t b = x.dim(0), l = x.dim(1), d = x.dim(2) / heads;
  Buffer<S> out(x.size());
  const S* px = x.data().data();
  for (std::size_t s = 0; s < b; ++s)
    for (std::size_t t = 0; t < l; ++t)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy_n(px + ((s * l + t) * heads + h) * d, d, out.data() + ((s * heads + h) * l + t) * d);
  return detail::record<S>({b, heads, l, d}, std::move(out), {x}, "split_heads", [b, l, heads, d](Node<S>& self) {
    S* gx = self.parents[0]->grad_buffer();
    const S* g = self.grad.data();
    for (std::size_t s = 0; s < b; ++s)
      for (std::size_t t = 0; t < l; ++t)
        for (std::size_t h = 0; h < heads; ++h) {
          const S* src = g + ((s * heads + h) * l + t) * d;
          S* dst = gx + ((s * l + t) * heads + h) * d;
          for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
  });
}

// [B, H, L, D] -> [B, L, H*D]
template <class S>
Tensor<S> merge_heads(const Tensor<S>& x) {
  if (x.rank() != 4) throw DimensionError("merge_heads expects [B,H,L,D], got " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), heads = x.dim(1), l = x.dim(2), d = x.dim(3);
  Buffer<S> out(x.size());
  const S* px = x.data().data();
  for (std::size_t s = 0; s < b; ++s)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < l; ++t)
        std::copy_n(px + ((s * heads + h) * l + t) * d, d, out.data() + ((s * l + t) * heads + h) * d);
  return detail::record<S>({b, l, heads * d}, std::move(out), {x}, "merge_heads", [b, l, heads, d](Node<S>& self) {
    S* gx = self.parents[0]->grad_buffer();
    const S* g = self.grad.data();
    for (std::size_t s = 0; s < b; ++s)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t t = 0; t < l; ++t) {
          const S* src = g + ((s * l + t) * heads + h) * d;
          S* dst = gx + ((s * heads + h) * l + t) * d;
          for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
  });
}

// [B, T, C] -> [B, N, P] with token n = c * (T / P) + slot and pixel p at
// minute slot * P + p.
template <class S>
Tensor<S> patchify(const Tensor<S>& x, std::size_t patch) {
  if (x.rank() != 3 || patch == 0 || x.dim(1) % patch != 0) {
    throw DimensionError("patchify cannot cut " + shape_str(x.shape()) + " into patches of " + std::to_string(patch));
  }
  const std::size_t b = x.dim(0), t = x.dim(1), c = x.dim(2), slots = t / patch;
  Buffer<S> out(x.size());
  const S* px = x.data().data();
  for (std::size_t s = 0; s < b; ++s)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t k = 0; k < slots; ++k)
        for (std::size_t p = 0; p < patch; ++p)
          out[((s * c + ch) * slots + k) * patch + p] = px[(s * t + k * patch + p) * c + ch];
  return detail::record<S>({b, c * slots, patch}, std::move(out), {x}, "patchify",
                           [b, t, c, slots, patch](Node<S>& self) {
                             S* gx = self.parents[0]->grad_buffer();
                             const S* g = self.grad.data();
                             for (std::size_t s = 0; s < b; ++s)
                               for (std::size_t ch = 0; ch < c; ++ch)
                                 for (std::size_t k = 0; k < slots; ++k)
                                   for (std::size_t p = 0; p < patch; ++p)
                                     gx[(s * t + k * patch + p) * c + ch] += g[((s * c + ch) * slots + k) * patch + p];
                           });
}

// Inverse of patchify: [B, N, P] -> [B, T, C].
template <class S>
Tensor<S> unpatchify(const Tensor<S>& y, std::size_t minutes, std::size_t channels) {
  if (y.rank() != 3 || y.dim(1) * y.dim(2) != minutes * channels || minutes % y.dim(2) != 0) {
    throw DimensionError("unpatchify cannot assemble " + shape_str(y.shape()) + " into " + std::to_string(minutes) +
                         "x" + std::to_string(channels));
  }
  const std::size_t b = y.dim(0), patch = y.dim(2), slots = minutes / patch, t = minutes, c = channels;
  Buffer<S> out(y.size());
  const S* py = y.data().data();
  for (std::size_t s = 0; s < b; ++s)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t k = 0; k < slots; ++k)
        for (std::size_t p = 0; p < patch; ++p)
          out[(s * t + k * patch + p) * c + ch] = py[((s * c + ch) * slots + k) * patch + p];
  return detail::record<S>({b, t, c}, std::move(out), {y}, "unpatchify", [b, t, c, slots, patch](Node<S>& self) {
    S* gy = self.parents[0]->grad_buffer();
    const S* g = self.grad.data();
    for (std::size_t s = 0; s < b; ++s)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t k = 0; k < slots; ++k)
          for (std::size_t p = 0; p < patch; ++p)
            gy[((s * c + ch) * slots + k) * patch + p] += g[(s * t + k * patch + p) * c + ch];
  });
}

// ---------------------------------------------------------------------------
// Reverse pass.

// Populates grad on every requires-grad node reachable from the scalar
// `loss` (leaf grads accumulate across calls) and frees the recorded graph.
template <class S>
GraphTrace backward(const Tensor<S>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractViolation("backward() needs a scalar loss, got " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("undefined tensor")));
  }
  GraphTrace trace;
  Node<S>* root = loss.node();
  if (!root->requires_grad) return trace;
  if (root->consumed) throw ContractViolation("backward() called twice on the same graph");

  // Owning pointers: clearing a node's parents below must not free nodes
  // still waiting in the queue.
  std::vector<std::shared_ptr<Node<S>>> order;
  std::unordered_set<Node<S>*> seen;
  std::vector<std::shared_ptr<Node<S>>> stack{loss.node_ptr()};
  seen.insert(root);
  while (!stack.empty()) {
    auto n = std::move(stack.back());
    stack.pop_back();
    for (auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p);
    }
    order.push_back(std::move(n));
  }
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a->seq > b->seq; });

  root->grad_buffer()[0] += S(1);
  for (auto& n : order) {
    GraphTrace::Entry e{n->seq, n->op, {}};
    for (auto& p : n->parents) e.parent_seqs.push_back(p->seq);
    trace.entries.push_back(std::move(e));
    if (n->is_leaf) continue;
    if (n->backward && n->grad.size() == n->data.size()) n->backward(*n);
    n->backward = nullptr;
    n->parents.clear();
    n->consumed = true;
  }
  return trace;
}

}  // namespace aim

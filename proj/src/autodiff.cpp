/*
 * Copyright 2026 The pvcorr Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "pvcorr/autodiff.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <type_traits>
#include <initializer_list>
#include <string>

namespace pvcorr {
namespace {

template <typename T>
using NodePtr = std::shared_ptr<detail::Node<T>>;

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
  // Exponent bits all set means Inf or NaN; the branch-free scan vectorizes.
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  constexpr Bits exponent = sizeof(T) == 4 ? Bits(0x7f800000u) : Bits(0x7ff0000000000000ull);
  bool bad = false;
  for (T v : t.data) bad |= (std::bit_cast<Bits>(v) & exponent) == exponent;
  if (bad) throw NumericError(std::string("non-finite value produced by ") + op);
}

// Wraps an op result. The backward closure is only kept when some input
// requires a gradient.
template <typename T, typename Inputs, typename F>
Var<T> finish_range(Tensor<T> value, const char* op, const Inputs& inputs, F&& backward) {
  check_finite(value, op);
  auto node = std::make_shared<detail::Node<T>>();
  node->value = std::move(value);
  Tape<T>* tape = nullptr;
  for (const Var<T>& in : inputs) {
    if (!in.requires_grad()) continue;
    if (tape && tape != in.node()->tape) {
      throw std::logic_error(std::string(op) + ": inputs recorded on different tapes");
    }
    tape = in.node()->tape;
  }
  if (tape) {
    node->requires_grad = true;
    node->tape = tape;
    node->backward = std::forward<F>(backward);
    tape->record(node);
  }
  return Var<T>(std::move(node));
}

template <typename T, typename F>
Var<T> finish(Tensor<T> value, const char* op, std::initializer_list<Var<T>> inputs,
              F&& backward) {
  return finish_range<T>(std::move(value), op, inputs, std::forward<F>(backward));
}

// Gradient buffer of an input, or nullptr when it does not take gradients.
template <typename T>
T* grad_of(const NodePtr<T>& n) {
  return n->requires_grad ? n->grad_buffer().data() : nullptr;
}

void require(bool ok, const std::string& message) {
  if (!ok) throw DimensionError(message);
}

template <typename T>
void require_rank(const Var<T>& x, std::size_t rank, const char* op) {
  require(x.defined(), std::string(op) + ": undefined input");
  require(x.rank() == rank, std::string(op) + ": expected rank " +
                                std::to_string(rank) + ", got " +
                                shape_string(x.shape()));
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                      shape_string(a.shape()) + " vs " +
                                      shape_string(b.shape()));
}

// c[m x n] += a[m x k] * b[k x n]; fixed accumulation order.
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
              std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[k x n] += a[m x k]^T * g[m x n]
template <typename T>
void gemm_tn_acc(const T* a, const T* g, T* c, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    const T* gi = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      T* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * gi[j];
    }
  }
}

template <typename T>
std::vector<T> transposed(const T* x, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = x[r * cols + c];
  return out;
}

// Elementwise unary op with derivative expressed via input and output.
template <typename T, typename Fwd, typename Deriv>
Var<T> unary(const Var<T>& x, const char* op, Fwd fwd, Deriv deriv) {
  Tensor<T> out(x.shape());
  const auto in = x.data();
  for (std::size_t i = 0; i < in.size(); ++i) out.data[i] = fwd(in[i]);
  auto xn = x.node();
  return finish<T>(std::move(out), op, {x}, [xn, deriv](const detail::Node<T>& self) {
    T* gx = grad_of(xn);
    if (!gx) return;
    const auto& xv = xn->value.data;
    const auto& yv = self.value.data;
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += self.grad[i] * deriv(xv[i], yv[i]);
  });
}

}  // namespace

template <typename T>
Var<T> constant(Tensor<T> value) {
  auto node = std::make_shared<detail::Node<T>>();
  node->value = std::move(value);
  return Var<T>(std::move(node));
}

template <typename T>
void Tape<T>::record(const std::shared_ptr<detail::Node<T>>& node) {
  if (backward_done_) {
    throw std::logic_error("tape already consumed by backward; start a new tape");
  }
  nodes_.push_back(node);
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value) {
  if (!recording()) return constant(std::move(value));
  auto node = std::make_shared<detail::Node<T>>();
  node->value = std::move(value);
  node->requires_grad = true;
  node->tape = this;
  record(node);
  return Var<T>(std::move(node));
}

template <typename T>
Var<T> Tape<T>::param(const Tensor<T>& p) {
  auto it = params_.find(&p);
  if (it != params_.end()) return it->second;
  Var<T> v = leaf(p);
  params_.emplace(&p, v);
  return v;
}

template <typename T>
void Tape<T>::backward(const Var<T>& root) {
  if (backward_done_) {
    throw std::logic_error("backward already ran on this tape; re-run the forward pass");
  }
  if (!root.defined() || root.size() != 1) {
    throw DimensionError("backward requires a scalar root");
  }
  if (!root.requires_grad() || root.node()->tape != this) {
    throw std::logic_error("backward root is not recorded on this tape");
  }
  backward_done_ = true;
  root.node()->grad_buffer()[0] = T{1};
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    const auto& node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

template <typename T>
Tensor<T> Tape<T>::grad(const Var<T>& v) const {
  Tensor<T> g(v.shape());
  if (!v.node()->grad.empty()) g.data = v.node()->grad;
  return g;
}

template <typename T>
Tensor<T> Tape<T>::param_grad(const Tensor<T>& p) const {
  auto it = params_.find(&p);
  if (it == params_.end()) return Tensor<T>(p.shape);
  return grad(it->second);
}

namespace ad {

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, "matmul: inner dimensions disagree " +
                             shape_string(a.shape()) + " * " + shape_string(b.shape()));
  Tensor<T> out({m, n});
  gemm_acc(a.data().data(), b.data().data(), out.data.data(), m, k, n);
  auto an = a.node(), bn = b.node();
  return finish<T>(std::move(out), "matmul", {a, b}, [an, bn, m, k, n](const detail::Node<T>& self) {
    if (T* ga = grad_of(an)) {
      auto bt = transposed(bn->value.data.data(), k, n);
      gemm_acc(self.grad.data(), bt.data(), ga, m, n, k);
    }
    if (T* gb = grad_of(bn)) gemm_tn_acc(an->value.data.data(), self.grad.data(), gb, m, k, n);
  });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor<T> out({c, r}, transposed(a.data().data(), r, c));
  auto an = a.node();
  return finish<T>(std::move(out), "transpose", {a}, [an, r, c](const detail::Node<T>& self) {
    T* ga = grad_of(an);
    if (!ga) return;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += self.grad[j * r + i];
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear");
  require_rank(bias, 1, "linear");
  const std::size_t rows = x.dim(0), cin = x.dim(1), cout = w.dim(1);
  require(w.dim(0) == cin, "linear: input channels " + std::to_string(cin) +
                               " do not match weight " + shape_string(w.shape()));
  require(bias.dim(0) == cout, "linear: bias " + shape_string(bias.shape()) +
                                   " does not match output channels " + std::to_string(cout));
  Tensor<T> out({rows, cout});
  for (std::size_t r = 0; r < rows; ++r)
    std::copy(bias.data().begin(), bias.data().end(), out.data.begin() + r * cout);
  gemm_acc(x.data().data(), w.data().data(), out.data.data(), rows, cin, cout);
  auto xn = x.node(), wn = w.node(), bn = bias.node();
  return finish<T>(std::move(out), "linear", {x, w, bias},
                   [xn, wn, bn, rows, cin, cout](const detail::Node<T>& self) {
                     const T* g = self.grad.data();
                     if (T* gx = grad_of(xn)) {
                       auto wt = transposed(wn->value.data.data(), cin, cout);
                       gemm_acc(g, wt.data(), gx, rows, cout, cin);
                     }
                     if (T* gw = grad_of(wn)) gemm_tn_acc(xn->value.data.data(), g, gw, rows, cin, cout);
                     if (T* gb = grad_of(bn)) {
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t c = 0; c < cout; ++c) gb[c] += g[r * cout + c];
                     }
                   });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.data()[i] + b.data()[i];
  auto an = a.node(), bn = b.node();
  return finish<T>(std::move(out), "add", {a, b}, [an, bn](const detail::Node<T>& self) {
    const std::size_t n = self.grad.size();
    if (T* ga = grad_of(an)) for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i];
    if (T* gb = grad_of(bn)) for (std::size_t i = 0; i < n; ++i) gb[i] += self.grad[i];
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.data()[i] - b.data()[i];
  auto an = a.node(), bn = b.node();
  return finish<T>(std::move(out), "sub", {a, b}, [an, bn](const detail::Node<T>& self) {
    const std::size_t n = self.grad.size();
    if (T* ga = grad_of(an)) for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i];
    if (T* gb = grad_of(bn)) for (std::size_t i = 0; i < n; ++i) gb[i] -= self.grad[i];
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.data()[i] * b.data()[i];
  auto an = a.node(), bn = b.node();
  return finish<T>(std::move(out), "mul", {a, b}, [an, bn](const detail::Node<T>& self) {
    const std::size_t n = self.grad.size();
    if (T* ga = grad_of(an))
      for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i] * bn->value.data[i];
    if (T* gb = grad_of(bn))
      for (std::size_t i = 0; i < n; ++i) gb[i] += self.grad[i] * an->value.data[i];
  });
}

template <typename T>
Var<T> affine(const Var<T>& x, T scale, T shift) {
  return unary(
      x, "affine", [scale, shift](T v) { return scale * v + shift; },
      [scale](T, T) { return scale; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return unary(
      x, "sigmoid",
      [](T v) {
        if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
        const T e = std::exp(v);
        return e / (T{1} + e);
      },
      [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
  return unary(
      x, "tanh", [](T v) { return std::tanh(v); },
      [](T, T y) { return T{1} - y * y; });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return unary(
      x, "relu", [](T v) { return v > T{0} ? v : T{0}; },
      [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T negative_slope) {
  return unary(
      x, "leaky_relu",
      [negative_slope](T v) { return v > T{0} ? v : negative_slope * v; },
      [negative_slope](T v, T) { return v > T{0} ? T{1} : negative_slope; });
}

template <typename T>
Var<T> prelu(const Var<T>& x, const Var<T>& slope) {
  require(slope.size() == 1, "prelu: slope must hold a single value, got " +
                                 shape_string(slope.shape()));
  const T a = slope.data()[0];
  Tensor<T> out(x.shape());
  const auto in = x.data();
  for (std::size_t i = 0; i < in.size(); ++i) out.data[i] = in[i] > T{0} ? in[i] : a * in[i];
  auto xn = x.node(), sn = slope.node();
  return finish<T>(std::move(out), "prelu", {x, slope}, [xn, sn, a](const detail::Node<T>& self) {
    const auto& xv = xn->value.data;
    T* gx = grad_of(xn);
    T* gs = grad_of(sn);
    T acc{0};
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const bool pos = xv[i] > T{0};
      if (gx) gx[i] += self.grad[i] * (pos ? T{1} : a);
      if (!pos) acc += self.grad[i] * xv[i];
    }
    if (gs) gs[0] += acc;
  });
}

template <typename T>
Var<T> group_norm(const Var<T>& x, std::size_t groups, const Var<T>& gamma,
                  const Var<T>& beta, double eps) {
  require_rank(x, 2, "group_norm");
  const std::size_t rows = x.dim(0), channels = x.dim(1);
  require(groups > 0 && channels % groups == 0,
          "group_norm: " + std::to_string(channels) + " channels not divisible into " +
              std::to_string(groups) + " groups");
  require(gamma.size() == channels && beta.size() == channels,
          "group_norm: affine parameters must have " + std::to_string(channels) + " entries");
  const std::size_t per_group = channels / groups;
  const double count = double(rows * per_group);
  const auto in = x.data();
  // Statistics are accumulated per channel in row order, then per group.
  auto group_totals = [groups, channels, per_group](const std::vector<double>& per_channel) {
    std::vector<double> per_group_total(groups, 0.0);
    for (std::size_t c = 0; c < channels; ++c) per_group_total[c / per_group] += per_channel[c];
    return per_group_total;
  };
  std::vector<double> acc(channels, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = in.data() + r * channels;
    for (std::size_t c = 0; c < channels; ++c) acc[c] += xr[c];
  }
  std::vector<double> mean = group_totals(acc);
  std::vector<double> chan_mean(channels);
  for (std::size_t c = 0; c < channels; ++c) chan_mean[c] = mean[c / per_group] / count;
  std::fill(acc.begin(), acc.end(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = in.data() + r * channels;
    for (std::size_t c = 0; c < channels; ++c) {
      const double d = xr[c] - chan_mean[c];
      acc[c] += d * d;
    }
  }
  const std::vector<double> var = group_totals(acc);
  std::vector<double> inv_std(groups);
  for (std::size_t g = 0; g < groups; ++g) inv_std[g] = 1.0 / std::sqrt(var[g] / count + eps);
  std::vector<double> chan_inv(channels);
  for (std::size_t c = 0; c < channels; ++c) chan_inv[c] = inv_std[c / per_group];

  Tensor<T> xhat(x.shape());
  Tensor<T> out(x.shape());
  const auto gm = gamma.data();
  const auto bt = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = in.data() + r * channels;
    T* hr = xhat.data.data() + r * channels;
    T* orow = out.data.data() + r * channels;
    for (std::size_t c = 0; c < channels; ++c) {
      hr[c] = T((xr[c] - chan_mean[c]) * chan_inv[c]);
      orow[c] = hr[c] * gm[c] + bt[c];
    }
  }

  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return finish<T>(
      std::move(out), "group_norm", {x, gamma, beta},
      [xn, gn, bn, xhat = std::move(xhat), chan_inv = std::move(chan_inv), rows, channels,
       per_group, count, group_totals](const detail::Node<T>& self) {
        const T* g = self.grad.data();
        const auto& gm = gn->value.data;
        if (T* gg = grad_of(gn)) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < channels; ++c)
              gg[c] += g[r * channels + c] * xhat.data[r * channels + c];
        }
        if (T* gb = grad_of(bn)) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < channels; ++c) gb[c] += g[r * channels + c];
        }
        T* gx = grad_of(xn);
        if (!gx) return;
        std::vector<double> a1(channels, 0.0), a2(channels, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* gr = g + r * channels;
          const T* hr = xhat.data.data() + r * channels;
          for (std::size_t c = 0; c < channels; ++c) {
            const double d = double(gr[c]) * gm[c];
            a1[c] += d;
            a2[c] += d * hr[c];
          }
        }
        const std::vector<double> s1 = group_totals(a1), s2 = group_totals(a2);
        std::vector<double> m1(channels), m2(channels);
        for (std::size_t c = 0; c < channels; ++c) {
          m1[c] = s1[c / per_group] / count;
          m2[c] = s2[c / per_group] / count;
        }
        for (std::size_t r = 0; r < rows; ++r) {
          const T* gr = g + r * channels;
          const T* hr = xhat.data.data() + r * channels;
          T* gxr = gx + r * channels;
          for (std::size_t c = 0; c < channels; ++c) {
            const double d = double(gr[c]) * gm[c];
            gxr[c] += T(chan_inv[c] * (d - m1[c] - hr[c] * m2[c]));
          }
        }
      });
}

template <typename T>
Var<T> max_pool_neighbors(const Var<T>& x) {
  require_rank(x, 3, "max_pool_neighbors");
  const std::size_t n = x.dim(0), k = x.dim(1), c = x.dim(2);
  require(k >= 1, "max_pool_neighbors: neighbor dimension is empty");
  Tensor<T> out({n, c});
  std::vector<std::uint32_t> argmax(n * c, 0);
  const auto in = x.data();
  for (std::size_t i = 0; i < n; ++i) {
    const T* base = in.data() + i * k * c;
    T* o = out.data.data() + i * c;
    std::copy(base, base + c, o);
    for (std::size_t j = 1; j < k; ++j)
      for (std::size_t ch = 0; ch < c; ++ch)
        if (base[j * c + ch] > o[ch]) {
          o[ch] = base[j * c + ch];
          argmax[i * c + ch] = std::uint32_t(j);
        }
  }
  auto xn = x.node();
  return finish<T>(std::move(out), "max_pool_neighbors", {x},
                   [xn, argmax = std::move(argmax), k, c](const detail::Node<T>& self) {
                     T* gx = grad_of(xn);
                     if (!gx) return;
                     for (std::size_t o = 0; o < argmax.size(); ++o) {
                       const std::size_t i = o / c, ch = o % c;
                       gx[(i * k + argmax[o]) * c + ch] += self.grad[o];
                     }
                   });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis) {
  require(!xs.empty(), "concat: no inputs");
  const Shape& ref = xs.front().shape();
  require(axis < ref.size(), "concat: axis out of range for " + shape_string(ref));
  std::size_t total = 0;
  for (const auto& x : xs) {
    require(x.rank() == ref.size(), "concat: rank mismatch");
    for (std::size_t d = 0; d < ref.size(); ++d)
      require(d == axis || x.dim(d) == ref[d], "concat: shape mismatch " +
                                                   shape_string(x.shape()) + " vs " +
                                                   shape_string(ref) + " off axis");
    total += x.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= ref[d];
  for (std::size_t d = axis + 1; d < ref.size(); ++d) inner *= ref[d];
  Shape shape = ref;
  shape[axis] = total;
  Tensor<T> out(shape);
  std::vector<std::size_t> widths;
  std::vector<NodePtr<T>> nodes;
  std::size_t offset = 0;
  for (const auto& x : xs) {
    const std::size_t w = x.dim(axis) * inner;
    const auto in = x.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(in.begin() + o * w, in.begin() + (o + 1) * w,
                out.data.begin() + o * total * inner + offset);
    offset += w;
    widths.push_back(w);
    nodes.push_back(x.node());
  }
  const std::size_t row = total * inner;
  auto backward = [nodes, widths, outer, row](const detail::Node<T>& self) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      if (T* g = grad_of(nodes[i])) {
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < widths[i]; ++j)
            g[o * widths[i] + j] += self.grad[o * row + off + j];
      }
      off += widths[i];
    }
  };
  return finish_range<T>(std::move(out), "concat", xs, std::move(backward));
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  require(numel(shape) == x.size(), "reshape: " + shape_string(x.shape()) + " -> " +
                                        shape_string(shape) + " changes element count");
  Tensor<T> out(std::move(shape), x.value().data);
  auto xn = x.node();
  return finish<T>(std::move(out), "reshape", {x}, [xn](const detail::Node<T>& self) {
    if (T* g = grad_of(xn))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Var<T> slice_rows(const Var<T>& x, std::size_t begin, std::size_t end) {
  require(x.rank() >= 1 && begin <= end && end <= x.dim(0),
          "slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
              ") invalid for " + shape_string(x.shape()));
  const std::size_t row = x.size() / std::max<std::size_t>(x.dim(0), 1);
  Shape shape = x.shape();
  shape[0] = end - begin;
  Tensor<T> out(shape, std::vector<T>(x.data().begin() + begin * row, x.data().begin() + end * row));
  auto xn = x.node();
  return finish<T>(std::move(out), "slice_rows", {x}, [xn, begin, row](const detail::Node<T>& self) {
    if (T* g = grad_of(xn))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * row + i] += self.grad[i];
  });
}

template <typename T>
Var<T> gather_rows(const Var<T>& x, std::span<const std::uint32_t> rows) {
  require_rank(x, 2, "gather_rows");
  const std::size_t n = x.dim(0), c = x.dim(1);
  Tensor<T> out({rows.size(), c});
  const auto in = x.data();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n) throw std::out_of_range("gather_rows: row index out of range");
    std::copy(in.begin() + rows[r] * c, in.begin() + (rows[r] + 1) * c, out.data.begin() + r * c);
  }
  auto xn = x.node();
  std::vector<std::uint32_t> idx(rows.begin(), rows.end());
  return finish<T>(std::move(out), "gather_rows", {x}, [xn, idx = std::move(idx), c](const detail::Node<T>& self) {
    T* g = grad_of(xn);
    if (!g) return;
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t ch = 0; ch < c; ++ch) g[idx[r] * c + ch] += self.grad[r * c + ch];
  });
}

template <typename T>
Var<T> edge_features(const Var<T>& a, const Var<T>& b, std::span<const std::uint32_t> nbr,
                     std::size_t k, const Var<T>& bias) {
  require_rank(a, 2, "edge_features");
  require_same_shape(a, b, "edge_features");
  const std::size_t n = a.dim(0), c = a.dim(1);
  require(k >= 1 && nbr.size() == n * k, "edge_features: neighbor table must have N*k entries");
  require(bias.size() == c, "edge_features: bias must have " + std::to_string(c) + " entries");
  Tensor<T> out({n * k, c});
  const auto av = a.data(), bv = b.data(), biv = bias.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t e = i * k + j;
      if (nbr[e] >= n) throw std::out_of_range("edge_features: neighbor index out of range");
      const T* src = av.data() + nbr[e] * c;
      const T* self_row = bv.data() + i * c;
      T* o = out.data.data() + e * c;
      for (std::size_t ch = 0; ch < c; ++ch) o[ch] = src[ch] - self_row[ch] + biv[ch];
    }
  auto an = a.node(), bn = b.node(), biasn = bias.node();
  std::vector<std::uint32_t> idx(nbr.begin(), nbr.end());
  return finish<T>(std::move(out), "edge_features", {a, b, bias},
                   [an, bn, biasn, idx = std::move(idx), n, k, c](const detail::Node<T>& self) {
                     T* ga = grad_of(an);
                     T* gb = grad_of(bn);
                     T* gbias = grad_of(biasn);
                     for (std::size_t i = 0; i < n; ++i)
                       for (std::size_t j = 0; j < k; ++j) {
                         const std::size_t e = i * k + j;
                         const T* g = self.grad.data() + e * c;
                         for (std::size_t ch = 0; ch < c; ++ch) {
                           if (ga) ga[idx[e] * c + ch] += g[ch];
                           if (gb) gb[i * c + ch] -= g[ch];
                           if (gbias) gbias[ch] += g[ch];
                         }
                       }
                   });
}

template <typename T>
Var<T> segment_mean(const Var<T>& src, std::span<const std::size_t> offsets,
                    std::span<const std::uint32_t> indices, Shape out_shape) {
  const std::size_t count = numel(out_shape);
  require(offsets.size() == count + 1, "segment_mean: offsets must have one entry per output plus one");
  require(offsets.back() == indices.size(), "segment_mean: offsets do not cover the index list");
  Tensor<T> out(std::move(out_shape));
  const auto in = src.data();
  for (std::size_t o = 0; o < count; ++o) {
    const std::size_t lo = offsets[o], hi = offsets[o + 1];
    if (lo == hi) continue;
    T acc{0};
    for (std::size_t p = lo; p < hi; ++p) {
      if (indices[p] >= in.size()) throw std::out_of_range("segment_mean: index out of range");
      acc += in[indices[p]];
    }
    out.data[o] = acc / T(hi - lo);
  }
  auto sn = src.node();
  std::vector<std::size_t> off(offsets.begin(), offsets.end());
  std::vector<std::uint32_t> idx(indices.begin(), indices.end());
  return finish<T>(std::move(out), "segment_mean", {src},
                   [sn, off = std::move(off), idx = std::move(idx)](const detail::Node<T>& self) {
                     T* g = grad_of(sn);
                     if (!g) return;
                     for (std::size_t o = 0; o + 1 < off.size(); ++o) {
                       const std::size_t lo = off[o], hi = off[o + 1];
                       if (lo == hi) continue;
                       const T share = self.grad[o] / T(hi - lo);
                       for (std::size_t p = lo; p < hi; ++p) g[idx[p]] += share;
                     }
                   });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T acc{0};
  for (T v : x.data()) acc += v;
  auto xn = x.node();
  return finish<T>(Tensor<T>({1}, {acc}), "sum", {x}, [xn](const detail::Node<T>& self) {
    if (T* g = grad_of(xn))
      for (std::size_t i = 0; i < xn->value.size(); ++i) g[i] += self.grad[0];
  });
}

template <typename T>
Var<T> mean_row_l1(const Var<T>& x, const Tensor<T>& target) {
  require_rank(x, 2, "mean_row_l1");
  require(target.shape == x.shape(), "mean_row_l1: target " + shape_string(target.shape) +
                                         " does not match " + shape_string(x.shape()));
  const std::size_t rows = x.dim(0);
  require(rows > 0, "mean_row_l1: empty input");
  const auto in = x.data();
  std::vector<T> sign(in.size());
  T acc{0};
  for (std::size_t i = 0; i < in.size(); ++i) {
    const T d = in[i] - target.data[i];
    acc += std::abs(d);
    sign[i] = d > T{0} ? T{1} : (d < T{0} ? T{-1} : T{0});
  }
  auto xn = x.node();
  return finish<T>(Tensor<T>({1}, {acc / T(rows)}), "mean_row_l1", {x},
                   [xn, sign = std::move(sign), rows](const detail::Node<T>& self) {
                     T* g = grad_of(xn);
                     if (!g) return;
                     const T scale = self.grad[0] / T(rows);
                     for (std::size_t i = 0; i < sign.size(); ++i) g[i] += scale * sign[i];
                   });
}

}  // namespace ad

#define PVCORR_INSTANTIATE_AUTODIFF(T)                                                      \
  template Var<T> constant(Tensor<T>);                                                     \
  template class Tape<T>;                                                                  \
  template Var<T> ad::matmul(const Var<T>&, const Var<T>&);                                \
  template Var<T> ad::transpose(const Var<T>&);                                            \
  template Var<T> ad::linear(const Var<T>&, const Var<T>&, const Var<T>&);                 \
  template Var<T> ad::add(const Var<T>&, const Var<T>&);                                   \
  template Var<T> ad::sub(const Var<T>&, const Var<T>&);                                   \
  template Var<T> ad::mul(const Var<T>&, const Var<T>&);                                   \
  template Var<T> ad::affine(const Var<T>&, T, T);                                         \
  template Var<T> ad::sigmoid(const Var<T>&);                                              \
  template Var<T> ad::tanh(const Var<T>&);                                                 \
  template Var<T> ad::relu(const Var<T>&);                                                 \
  template Var<T> ad::leaky_relu(const Var<T>&, T);                                        \
  template Var<T> ad::prelu(const Var<T>&, const Var<T>&);                                 \
  template Var<T> ad::group_norm(const Var<T>&, std::size_t, const Var<T>&, const Var<T>&, \
                                 double);                                                  \
  template Var<T> ad::max_pool_neighbors(const Var<T>&);                                   \
  template Var<T> ad::concat(const std::vector<Var<T>>&, std::size_t);                     \
  template Var<T> ad::reshape(const Var<T>&, Shape);                                       \
  template Var<T> ad::slice_rows(const Var<T>&, std::size_t, std::size_t);                 \
  template Var<T> ad::gather_rows(const Var<T>&, std::span<const std::uint32_t>);          \
  template Var<T> ad::edge_features(const Var<T>&, const Var<T>&,                          \
                                    std::span<const std::uint32_t>, std::size_t,           \
                                    const Var<T>&);                                        \
  template Var<T> ad::segment_mean(const Var<T>&, std::span<const std::size_t>,            \
                                   std::span<const std::uint32_t>, Shape);                 \
  template Var<T> ad::sum(const Var<T>&);                                                  \
  template Var<T> ad::mean_row_l1(const Var<T>&, const Tensor<T>&);

PVCORR_INSTANTIATE_AUTODIFF(float)
PVCORR_INSTANTIATE_AUTODIFF(double)

}  // namespace pvcorr

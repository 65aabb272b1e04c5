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

// Reverse-mode differentiation over dense tensors.
//
// A Var is a shared handle to a node holding a value and, once backward has
// run, a gradient. Operations whose inputs require gradients record their
// output on the Tape those inputs belong to; Tape::backward then replays the
// recorded nodes in reverse execution order. Everything is templated on the
// scalar type so the same code paths run in float (training) and double
// (gradient checks).

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "pvcorr/tensor.hpp"

namespace pvcorr {

template <typename T>
class Tape;

namespace detail {

template <typename T>
struct Node {
  Tensor<T> value;
  std::vector<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  Tape<T>* tape = nullptr;
  // Propagates this node's grad into its inputs.
  std::function<void(const Node&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T{0});
    return grad;
  }
};

}  // namespace detail

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape; }
  std::size_t dim(std::size_t i) const { return node_->value.shape.at(i); }
  std::size_t rank() const { return node_->value.shape.size(); }
  std::size_t size() const { return node_->value.data.size(); }
  std::span<const T> data() const { return node_->value.data; }
  bool requires_grad() const { return node_->requires_grad; }
  T item() const {
    if (size() != 1) throw DimensionError("item() on non-scalar " + shape_string(shape()));
    return node_->value.data[0];
  }

  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

// A value that never receives gradient.
template <typename T>
Var<T> constant(Tensor<T> value);

enum class GradMode { kRecord, kInference };

template <typename T>
class Tape {
 public:
  explicit Tape(GradMode mode = GradMode::kRecord) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return mode_ == GradMode::kRecord; }

  // Differentiable input. In inference mode this is a constant.
  Var<T> leaf(Tensor<T> value);

  // Differentiable view of a parameter tensor, memoized by address so a
  // weight used by several ops accumulates a single gradient.
  Var<T> param(const Tensor<T>& p);

  // Runs reverse accumulation from a scalar root. A tape supports exactly one
  // backward pass; re-running requires a fresh forward on a fresh tape.
  void backward(const Var<T>& root);

  bool backward_done() const { return backward_done_; }

  // Gradient of a recorded Var; zeros when nothing flowed into it.
  Tensor<T> grad(const Var<T>& v) const;

  // Gradient for a tensor previously passed to param(); zeros of the same
  // shape if it was never used on this tape.
  Tensor<T> param_grad(const Tensor<T>& p) const;

  std::size_t recorded() const { return nodes_.size(); }

  void record(const std::shared_ptr<detail::Node<T>>& node);

 private:
  GradMode mode_;
  bool backward_done_ = false;
  std::vector<std::shared_ptr<detail::Node<T>>> nodes_;
  std::unordered_map<const Tensor<T>*, Var<T>> params_;
};

namespace ad {

// Matrix product [m x k] * [k x n].
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> transpose(const Var<T>& a);

// Per-point 1x1 convolution: x[N x Cin] * w[Cin x Cout] + bias[Cout].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
// scale * x + shift, elementwise with scalar constants.
template <typename T>
Var<T> affine(const Var<T>& x, T scale, T shift);

template <typename T>
Var<T> sigmoid(const Var<T>& x);
template <typename T>
Var<T> tanh(const Var<T>& x);
template <typename T>
Var<T> relu(const Var<T>& x);
template <typename T>
Var<T> leaky_relu(const Var<T>& x, T negative_slope);
// Single learnable negative slope, shape [1].
template <typename T>
Var<T> prelu(const Var<T>& x, const Var<T>& slope);

inline constexpr double kGroupNormEps = 1e-5;

// x[R x C]; statistics are taken over all R rows and the C/groups channels of
// each group, then a per-channel affine (gamma, beta) is applied.
template <typename T>
Var<T> group_norm(const Var<T>& x, std::size_t groups, const Var<T>& gamma,
                  const Var<T>& beta, double eps = kGroupNormEps);

// x[N x K x C] -> [N x C], max over K. Ties route gradient to the lowest k.
template <typename T>
Var<T> max_pool_neighbors(const Var<T>& x);

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis);

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape);

// Rows [begin, end) of a rank-2 tensor.
template <typename T>
Var<T> slice_rows(const Var<T>& x, std::size_t begin, std::size_t end);

template <typename T>
Var<T> gather_rows(const Var<T>& x, std::span<const std::uint32_t> rows);

// Edge features for a k-neighbor graph on N points:
//   out[n*k + j, :] = a[nbr[n*k + j], :] - b[n, :] + bias
// a, b are [N x C], nbr has N*k entries, bias is [C].
template <typename T>
Var<T> edge_features(const Var<T>& a, const Var<T>& b,
                     std::span<const std::uint32_t> nbr, std::size_t k,
                     const Var<T>& bias);

// Sparse mean gather: out.data[o] is the mean of src.data[idx] over
// idx in indices[offsets[o] .. offsets[o+1]), or 0 for an empty segment.
template <typename T>
Var<T> segment_mean(const Var<T>& src, std::span<const std::size_t> offsets,
                    std::span<const std::uint32_t> indices, Shape out_shape);

template <typename T>
Var<T> sum(const Var<T>& x);

// (1/R) * sum_r sum_c |x[r,c] - target[r,c]| for x[R x C].
template <typename T>
Var<T> mean_row_l1(const Var<T>& x, const Tensor<T>& target);

}  // namespace ad
}  // namespace pvcorr

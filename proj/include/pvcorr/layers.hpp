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

// Parameter blocks shared by the correlation branches and the network.
//
// Every block exposes visit(prefix, f), calling f(name, tensor) for each of
// its parameters in a fixed order. Naming, checkpointing, optimizer state and
// float/double conversion are all built on that one traversal.

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

#include "pvcorr/autodiff.hpp"

namespace pvcorr {

// Group count for every normalization layer; all widths are multiples of it.
inline constexpr std::size_t kNormGroups = 8;

// Deterministic parameter initializer. Draws are made in double and rounded
// to T, so float and double models built from one seed agree to rounding.
class ParamInit {
 public:
  explicit ParamInit(std::uint64_t seed) : rng_(seed) {}

  // Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
  template <typename T>
  Tensor<T> fan_in_uniform(Shape shape, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(double(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    Tensor<T> t(std::move(shape));
    for (T& v : t.data) v = T(u(rng_));
    return t;
  }

 private:
  std::mt19937_64 rng_;
};

template <typename T>
struct Linear {
  Tensor<T> w;  // in x out
  Tensor<T> b;  // out

  Linear() = default;
  Linear(std::size_t in, std::size_t out, ParamInit& init)
      : w(init.fan_in_uniform<T>({in, out}, in)), b(init.fan_in_uniform<T>({out}, in)) {}

  std::size_t in() const { return w.dim(0); }
  std::size_t out() const { return w.dim(1); }

  Var<T> operator()(Tape<T>& tape, const Var<T>& x) const {
    return ad::linear(x, tape.param(w), tape.param(b));
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".w", w);
    f(prefix + ".b", b);
  }
  template <typename F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + ".w", w);
    f(prefix + ".b", b);
  }
};

template <typename T>
struct GroupNorm {
  Tensor<T> gamma;
  Tensor<T> beta;

  GroupNorm() = default;
  explicit GroupNorm(std::size_t channels)
      : gamma(Tensor<T>::filled({channels}, T{1})), beta(Tensor<T>({channels})) {}

  Var<T> operator()(Tape<T>& tape, const Var<T>& x) const {
    return ad::group_norm(x, kNormGroups, tape.param(gamma), tape.param(beta));
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".gamma", gamma);
    f(prefix + ".beta", beta);
  }
  template <typename F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + ".gamma", gamma);
    f(prefix + ".beta", beta);
  }
};

template <typename T>
struct PRelu {
  Tensor<T> slope = Tensor<T>::filled({1}, T(0.25));

  Var<T> operator()(Tape<T>& tape, const Var<T>& x) const {
    return ad::prelu(x, tape.param(slope));
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".slope", slope);
  }
  template <typename F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + ".slope", slope);
  }
};

// Number of scalars across all parameters of a block.
template <typename Block>
std::size_t parameter_count(const Block& block) {
  std::size_t n = 0;
  block.visit("", [&](const std::string&, const auto& t) { n += t.size(); });
  return n;
}

// Copies every parameter of src into dst, converting the scalar type. Both
// blocks must have identical structure.
template <typename Dst, typename Src>
void copy_parameters(Dst& dst, const Src& src) {
  std::vector<std::pair<const Shape*, std::vector<double>>> values;
  src.visit("", [&](const std::string&, const auto& t) {
    values.emplace_back(&t.shape, std::vector<double>(t.data.begin(), t.data.end()));
  });
  std::size_t i = 0;
  dst.visit("", [&](const std::string& name, auto& t) {
    if (i >= values.size() || *values[i].first != t.shape) {
      throw DimensionError("parameter structure mismatch at " + name);
    }
    using U = typename std::decay_t<decltype(t.data)>::value_type;
    for (std::size_t j = 0; j < t.data.size(); ++j) t.data[j] = U(values[i].second[j]);
    ++i;
  });
  if (i != values.size()) throw DimensionError("parameter structure mismatch: count differs");
}

}  // namespace pvcorr

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

#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "pvcorr/tensor.hpp"

namespace pvcorr {

using Vec3 = std::array<float, 3>;
using Vec3d = std::array<double, 3>;

inline Vec3d widen(const Vec3& v) { return {v[0], v[1], v[2]}; }

// N x 3 coordinates in meters; N >= 1, all finite.
class PointCloud {
 public:
  explicit PointCloud(std::vector<Vec3> points);

  std::size_t size() const { return points_.size(); }
  const Vec3& operator[](std::size_t i) const { return points_[i]; }
  const std::vector<Vec3>& points() const { return points_; }

  template <typename T>
  Tensor<T> to_tensor() const {
    Tensor<T> t({points_.size(), 3});
    for (std::size_t i = 0; i < points_.size(); ++i)
      for (int c = 0; c < 3; ++c) t.data[i * 3 + c] = T(points_[i][c]);
    return t;
  }

  friend bool operator==(const PointCloud&, const PointCloud&) = default;

 private:
  std::vector<Vec3> points_;
};

// Per-point displacement in meters, all finite.
class FlowField {
 public:
  FlowField() = default;
  explicit FlowField(std::vector<Vec3> vectors);
  static FlowField zeros(std::size_t n) { return FlowField(std::vector<Vec3>(n, Vec3{0, 0, 0})); }

  template <typename T>
  static FlowField from_tensor(const Tensor<T>& t) {
    if (t.rank() != 2 || t.dim(1) != 3) throw DimensionError("flow tensor must be N x 3");
    std::vector<Vec3> v(t.dim(0));
    for (std::size_t i = 0; i < v.size(); ++i)
      for (int c = 0; c < 3; ++c) v[i][c] = float(t.data[i * 3 + c]);
    return FlowField(std::move(v));
  }

  std::size_t size() const { return vectors_.size(); }
  const Vec3& operator[](std::size_t i) const { return vectors_[i]; }
  const std::vector<Vec3>& vectors() const { return vectors_; }

  template <typename T>
  Tensor<T> to_tensor() const {
    Tensor<T> t({vectors_.size(), 3});
    for (std::size_t i = 0; i < vectors_.size(); ++i)
      for (int c = 0; c < 3; ++c) t.data[i * 3 + c] = T(vectors_[i][c]);
    return t;
  }

  friend bool operator==(const FlowField&, const FlowField&) = default;

 private:
  std::vector<Vec3> vectors_;
};

// Q = P + f, computed in float.
PointCloud translate(const PointCloud& cloud, const FlowField& flow);

// Squared Euclidean distance in double. Every neighbor search in the library
// goes through this one function so that tie-breaking is consistent.
double squared_distance(const Vec3d& a, const Vec3d& b);

struct Neighbor {
  std::uint32_t index;
  Vec3 offset;  // neighbor - query

  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

using NeighborLists = std::vector<std::vector<Neighbor>>;

// Immutable k-d tree (median split, bounded leaves) over a target cloud.
// Queries are exact: results equal an exhaustive scan ordered by
// (squared distance, target index).
class SpatialIndex {
 public:
  explicit SpatialIndex(const PointCloud& target, std::size_t leaf_size = 16);

  std::size_t size() const { return points_.size(); }
  const Vec3& point(std::size_t i) const { return points_[i]; }

  // Indices of the k nearest targets, ascending.
  std::vector<std::uint32_t> nearest(const Vec3d& query, std::size_t k) const;

 private:
  struct Node {
    std::uint32_t begin, end;
    int axis = -1;  // -1 for leaves
    double split = 0;
    std::int32_t left = -1, right = -1;
  };
  std::int32_t build(std::uint32_t begin, std::uint32_t end);

  std::vector<Vec3> points_;
  std::vector<std::uint32_t> order_;
  std::vector<Node> nodes_;
  std::size_t leaf_size_;
};

NeighborLists knn(const SpatialIndex& index, const PointCloud& queries, std::size_t k);

// Exhaustive-scan reference with the same contract as knn().
NeighborLists knn_brute_force(const PointCloud& target, const PointCloud& queries, std::size_t k);

// a x a x a grid of sub-cubes around a query; level l has side r * 2^l.
struct CubeSpec {
  int resolution = 3;
  double side = 0.25;
  int levels = 3;

  void validate() const;
  double side_at(int level) const;
  int half() const { return (resolution - 1) / 2; }
  std::size_t cells() const { return std::size_t(resolution) * resolution * resolution; }
  // Length of the concatenated per-level feature vector, a^3 * l.
  std::size_t feature_size() const { return cells() * std::size_t(levels); }
};

struct SubCube {
  int i, j, k;
  friend bool operator==(const SubCube&, const SubCube&) = default;
};

// Lexicographic (i, j, k) slot in [0, a^3), i slowest.
std::size_t subcube_slot(const SubCube& c, int resolution);
SubCube subcube_at(std::size_t slot, int resolution);

// Slot of a target at offset d = target - query, or -1 if it lies outside the
// cube. Membership per axis is the half-open box [-side/2, side/2) around
// i * side.
int locate_subcube(const Vec3d& d, double side, int resolution);

// locate_subcube for the offset target - query, formed in double.
int subcube_of(const Vec3& query, const Vec3& target, double side, int resolution);

// For each query, a^3 buckets of target indices (lexicographic slot order).
using CubeMembers = std::vector<std::vector<std::uint32_t>>;

// candidates, when given, restricts each query to its own target subset.
std::vector<CubeMembers> cube_assign(const PointCloud& queries, const PointCloud& target,
                                     const CubeSpec& spec, int level,
                                     const std::vector<std::vector<std::uint32_t>>* candidates = nullptr);

}  // namespace pvcorr

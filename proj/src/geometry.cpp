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

#include "pvcorr/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <queue>
#include <stdexcept>
#include <string>
#include <utility>

namespace pvcorr {
namespace {

bool finite(const Vec3& v) {
  return std::isfinite(v[0]) && std::isfinite(v[1]) && std::isfinite(v[2]);
}

// (squared distance, index), compared lexicographically.
using Candidate = std::pair<double, std::uint32_t>;

void check_k(std::size_t k, std::size_t target_size) {
  if (k == 0) throw std::invalid_argument("knn: k must be at least 1");
  if (k > target_size) {
    throw std::invalid_argument("knn: k = " + std::to_string(k) + " exceeds target size " +
                                std::to_string(target_size));
  }
}

Vec3 offset(const Vec3& target, const Vec3& query) {
  return {target[0] - query[0], target[1] - query[1], target[2] - query[2]};
}

}  // namespace

PointCloud::PointCloud(std::vector<Vec3> points) : points_(std::move(points)) {
  if (points_.empty()) throw std::invalid_argument("point cloud must contain at least one point");
  for (const auto& p : points_)
    if (!finite(p)) throw std::invalid_argument("point cloud contains a non-finite coordinate");
}

FlowField::FlowField(std::vector<Vec3> vectors) : vectors_(std::move(vectors)) {
  for (const auto& v : vectors_)
    if (!finite(v)) throw std::invalid_argument("flow field contains a non-finite vector");
}

PointCloud translate(const PointCloud& cloud, const FlowField& flow) {
  if (cloud.size() != flow.size()) {
    throw DimensionError("translate: cloud has " + std::to_string(cloud.size()) +
                         " points but flow has " + std::to_string(flow.size()));
  }
  std::vector<Vec3> out(cloud.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    for (int c = 0; c < 3; ++c) out[i][c] = cloud[i][c] + flow[i][c];
  return PointCloud(std::move(out));
}

[[gnu::noinline]] double squared_distance(const Vec3d& a, const Vec3d& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

SpatialIndex::SpatialIndex(const PointCloud& target, std::size_t leaf_size)
    : points_(target.points()), order_(target.size()), leaf_size_(std::max<std::size_t>(leaf_size, 1)) {
  for (std::uint32_t i = 0; i < order_.size(); ++i) order_[i] = i;
  build(0, std::uint32_t(order_.size()));
}

std::int32_t SpatialIndex::build(std::uint32_t begin, std::uint32_t end) {
  const auto id = std::int32_t(nodes_.size());
  nodes_.push_back({begin, end});
  if (end - begin <= leaf_size_) return id;

  Vec3 lo = points_[order_[begin]], hi = lo;
  for (std::uint32_t i = begin; i < end; ++i)
    for (int c = 0; c < 3; ++c) {
      lo[c] = std::min(lo[c], points_[order_[i]][c]);
      hi[c] = std::max(hi[c], points_[order_[i]][c]);
    }
  int axis = 0;
  for (int c = 1; c < 3; ++c)
    if (hi[c] - lo[c] > hi[axis] - lo[axis]) axis = c;
  if (hi[axis] == lo[axis]) return id;  // all points coincide

  const std::uint32_t mid = begin + (end - begin) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](std::uint32_t a, std::uint32_t b) {
                     return std::pair(points_[a][axis], a) < std::pair(points_[b][axis], b);
                   });
  const double split = points_[order_[mid]][axis];
  const std::int32_t left = build(begin, mid);
  const std::int32_t right = build(mid, end);
  Node& node = nodes_[std::size_t(id)];
  node.axis = axis;
  node.split = split;
  node.left = left;
  node.right = right;
  return id;
}

std::vector<std::uint32_t> SpatialIndex::nearest(const Vec3d& query, std::size_t k) const {
  check_k(k, points_.size());
  std::priority_queue<Candidate> heap;  // worst candidate on top
  auto consider = [&](std::uint32_t idx) {
    const Candidate c{squared_distance(widen(points_[idx]), query), idx};
    if (heap.size() < k) {
      heap.push(c);
    } else if (c < heap.top()) {
      heap.pop();
      heap.push(c);
    }
  };
  // Left children hold coordinates <= split and right children >= split, so
  // a far child can only contain a point at distance >= |query - split|.
  auto visit = [&](auto&& self, std::int32_t id) -> void {
    const Node& node = nodes_[std::size_t(id)];
    if (node.axis < 0) {
      for (std::uint32_t i = node.begin; i < node.end; ++i) consider(order_[i]);
      return;
    }
    const double diff = query[std::size_t(node.axis)] - node.split;
    const std::int32_t near = diff < 0 ? node.left : node.right;
    const std::int32_t far = diff < 0 ? node.right : node.left;
    self(self, near);
    if (heap.size() < k || diff * diff <= heap.top().first) self(self, far);
  };
  visit(visit, 0);
  std::vector<std::uint32_t> out(heap.size());
  for (std::size_t i = out.size(); i-- > 0;) {
    out[i] = heap.top().second;
    heap.pop();
  }
  return out;
}

NeighborLists knn(const SpatialIndex& index, const PointCloud& queries, std::size_t k) {
  check_k(k, index.size());
  NeighborLists out(queries.size());
  for (std::size_t q = 0; q < queries.size(); ++q) {
    for (std::uint32_t idx : index.nearest(widen(queries[q]), k))
      out[q].push_back({idx, offset(index.point(idx), queries[q])});
  }
  return out;
}

NeighborLists knn_brute_force(const PointCloud& target, const PointCloud& queries, std::size_t k) {
  check_k(k, target.size());
  NeighborLists out(queries.size());
  std::vector<Candidate> all(target.size());
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const Vec3d query = widen(queries[q]);
    for (std::uint32_t i = 0; i < target.size(); ++i) all[i] = {squared_distance(widen(target[i]), query), i};
    std::partial_sort(all.begin(), all.begin() + std::ptrdiff_t(k), all.end());
    for (std::size_t j = 0; j < k; ++j)
      out[q].push_back({all[j].second, offset(target[all[j].second], queries[q])});
  }
  return out;
}

void CubeSpec::validate() const {
  if (resolution < 1 || resolution % 2 == 0)
    throw std::invalid_argument("cube resolution must be a positive odd integer");
  if (!(side > 0) || !std::isfinite(side)) throw std::invalid_argument("cube side length must be positive");
  if (levels < 1) throw std::invalid_argument("cube pyramid needs at least one level");
}

double CubeSpec::side_at(int level) const {
  if (level < 0 || level >= levels) {
    throw std::out_of_range("pyramid level " + std::to_string(level) + " outside [0, " +
                            std::to_string(levels) + ")");
  }
  return std::ldexp(side, level);
}

std::size_t subcube_slot(const SubCube& c, int resolution) {
  const int h = (resolution - 1) / 2;
  return std::size_t(((c.i + h) * resolution + (c.j + h)) * resolution + (c.k + h));
}

SubCube subcube_at(std::size_t slot, int resolution) {
  const int h = (resolution - 1) / 2;
  const int s = int(slot);
  return {s / (resolution * resolution) - h, (s / resolution) % resolution - h, s % resolution - h};
}

int locate_subcube(const Vec3d& d, double side, int resolution) {
  const int h = (resolution - 1) / 2;
  const double half_side = side / 2;
  int idx[3];
  for (int c = 0; c < 3; ++c) {
    const double guess = std::floor(d[std::size_t(c)] / side + 0.5);
    if (!(std::abs(guess) <= h + 1)) return -1;
    bool found = false;
    // The guess can be off by one when the offset sits on a face; settle it
    // with the box test itself.
    for (int i = int(guess) - 1; i <= int(guess) + 1 && !found; ++i) {
      const double rel = d[std::size_t(c)] - i * side;
      if (rel >= -half_side && rel < half_side) {
        idx[c] = i;
        found = true;
      }
    }
    if (!found || idx[c] < -h || idx[c] > h) return -1;
  }
  return int(subcube_slot({idx[0], idx[1], idx[2]}, resolution));
}

int subcube_of(const Vec3& query, const Vec3& target, double side, int resolution) {
  const Vec3d d{double(target[0]) - query[0], double(target[1]) - query[1],
                double(target[2]) - query[2]};
  return locate_subcube(d, side, resolution);
}

std::vector<CubeMembers> cube_assign(const PointCloud& queries, const PointCloud& target,
                                     const CubeSpec& spec, int level,
                                     const std::vector<std::vector<std::uint32_t>>* candidates) {
  spec.validate();
  const double side = spec.side_at(level);
  if (candidates && candidates->size() != queries.size())
    throw DimensionError("cube_assign: need one candidate list per query");
  std::vector<CubeMembers> out(queries.size(), CubeMembers(spec.cells()));
  auto place = [&](std::size_t q, std::uint32_t t) {
    if (t >= target.size()) throw std::out_of_range("cube_assign: candidate index out of range");
    const int slot = subcube_of(queries[q], target[t], side, spec.resolution);
    if (slot >= 0) out[q][std::size_t(slot)].push_back(t);
  };
  for (std::size_t q = 0; q < queries.size(); ++q) {
    if (candidates) {
      for (std::uint32_t t : (*candidates)[q]) place(q, t);
    } else {
      for (std::uint32_t t = 0; t < target.size(); ++t) place(q, t);
    }
  }
  return out;
}

}  // namespace pvcorr

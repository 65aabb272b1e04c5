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

// All-pairs correlation, top-M truncation and the two lookup branches.
//
// The correlation matrix is built once per scene pair. Each update step looks
// up the retained entries around the current translated cloud Q in two ways:
// the point branch gathers the k nearest retained targets of each q, the voxel
// branch averages retained scores inside a pyramid of a x a x a cubes. Both
// branches only see a source point's M retained targets.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pvcorr/autodiff.hpp"
#include "pvcorr/geometry.hpp"
#include "pvcorr/layers.hpp"

namespace pvcorr {

inline constexpr std::size_t kCorrelationChannels = 64;

enum class CorrelationMode { kCombined, kPointOnly, kVoxelOnly };

struct CorrelationConfig {
  std::size_t m = 512;  // retained targets per source point
  std::size_t k = 32;   // point-branch neighbors
  CubeSpec cube;
  CorrelationMode mode = CorrelationMode::kCombined;

  // Throws std::invalid_argument; k <= m is required.
  void validate() const;
};

// Per source point, the M highest scores (descending, ties by lower target
// index) and their target indices.
struct TruncatedCorrelation {
  std::size_t rows = 0;
  std::size_t cols = 0;  // N2 of the full matrix
  std::size_t m = 0;
  std::vector<std::uint32_t> indices;  // rows x m
  std::vector<double> scores;          // rows x m

  std::uint32_t index(std::size_t row, std::size_t slot) const { return indices[row * m + slot]; }
  double score(std::size_t row, std::size_t slot) const { return scores[row * m + slot]; }
};

// C = f1 * f2^T, [N1 x D] x [N2 x D] -> [N1 x N2].
template <typename T>
Var<T> build_correlation(const Var<T>& f1, const Var<T>& f2);

// Requires 1 <= m <= N2.
template <typename T>
TruncatedCorrelation truncate(const Tensor<T>& c, std::size_t m);

// Differentiable view of the retained entries of c, [N1 x M].
template <typename T>
Var<T> retained_scores(const Var<T>& c, const TruncatedCorrelation& tc);

// k nearest retained targets of every query, ascending by distance with ties
// to the lower target index.
struct RetainedNeighbors {
  std::size_t rows = 0;
  std::size_t k = 0;
  std::vector<std::uint32_t> slot;    // rows x k, position in the retained row
  std::vector<std::uint32_t> target;  // rows x k, target index
};

RetainedNeighbors retained_knn(const PointCloud& q, const PointCloud& target,
                               const TruncatedCorrelation& tc, std::size_t k);

// Voxel-branch segments: for row i, level l and sub-cube s, the retained
// entries (flat row * M + slot) whose target falls in that sub-cube. Output
// column is l * a^3 + s.
struct CubeSegments {
  std::size_t rows = 0;
  std::size_t width = 0;  // a^3 * levels
  std::vector<std::size_t> offsets;
  std::vector<std::uint32_t> entries;
};

CubeSegments voxel_segments(const PointCloud& q, const PointCloud& target,
                            const TruncatedCorrelation& tc, const CubeSpec& spec);

template <typename T>
struct PointBranchWeights {
  Linear<T> fc1;  // 4 -> 64
  GroupNorm<T> norm;
  PRelu<T> act;
  Linear<T> fc2;  // 64 -> 64

  PointBranchWeights() = default;
  explicit PointBranchWeights(ParamInit& init)
      : fc1(4, kCorrelationChannels, init),
        norm(kCorrelationChannels),
        fc2(kCorrelationChannels, kCorrelationChannels, init) {}

  template <typename F>
  void visit(const std::string& p, F&& f) { visit_fields(*this, p, f); }
  template <typename F>
  void visit(const std::string& p, F&& f) const { visit_fields(*this, p, f); }

 private:
  template <typename Self, typename F>
  static void visit_fields(Self& s, const std::string& p, F& f) {
    s.fc1.visit(p + ".fc1", f);
    s.norm.visit(p + ".norm", f);
    s.act.visit(p + ".prelu", f);
    s.fc2.visit(p + ".fc2", f);
  }
};

template <typename T>
struct VoxelBranchWeights {
  Linear<T> fc1;  // a^3 * l -> 128
  GroupNorm<T> norm;
  PRelu<T> act;
  Linear<T> fc2;  // 128 -> 64

  VoxelBranchWeights() = default;
  VoxelBranchWeights(const CubeSpec& spec, ParamInit& init)
      : fc1(spec.feature_size(), 128, init), norm(128), fc2(128, kCorrelationChannels, init) {}

  template <typename F>
  void visit(const std::string& p, F&& f) { visit_fields(*this, p, f); }
  template <typename F>
  void visit(const std::string& p, F&& f) const { visit_fields(*this, p, f); }

 private:
  template <typename Self, typename F>
  static void visit_fields(Self& s, const std::string& p, F& f) {
    s.fc1.visit(p + ".fc1", f);
    s.norm.visit(p + ".norm", f);
    s.act.visit(p + ".prelu", f);
    s.fc2.visit(p + ".fc2", f);
  }
};

template <typename T>
struct BranchWeights {
  PointBranchWeights<T> point;
  VoxelBranchWeights<T> voxel;

  BranchWeights() = default;
  BranchWeights(const CubeSpec& spec, ParamInit& init) : point(init), voxel(spec, init) {}

  template <typename F>
  void visit(const std::string& p, F&& f) {
    point.visit(p + ".point", f);
    voxel.visit(p + ".voxel", f);
  }
  template <typename F>
  void visit(const std::string& p, F&& f) const {
    point.visit(p + ".point", f);
    voxel.visit(p + ".voxel", f);
  }
};

// Per-neighbor rows (score, offset x, y, z), [N1*k x 4]. The offset is
// target - q and is differentiable in q.
template <typename T>
Var<T> point_branch_input(const Var<T>& q, const Tensor<T>& target, const Var<T>& scores,
                          const RetainedNeighbors& nb);

// Shared MLP on each neighbor row, max-pooled over the k neighbors.
template <typename T>
Var<T> point_branch(Tape<T>& tape, const Var<T>& input, std::size_t k,
                    const PointBranchWeights<T>& w);

// Mean retained score per sub-cube, 0 for empty ones, [N1 x a^3*l].
template <typename T>
Var<T> voxel_features(const Var<T>& scores, const CubeSegments& segments);

template <typename T>
Var<T> voxel_branch(Tape<T>& tape, const Var<T>& features, const VoxelBranchWeights<T>& w);

template <typename T>
Var<T> combine(const Var<T>& point, const Var<T>& voxel);

// One correlation lookup at the translated cloud q [N1 x 3], honoring the
// configured branch mode.
template <typename T>
Var<T> lookup_correlation(Tape<T>& tape, const Var<T>& q, const PointCloud& target,
                          const Tensor<T>& target_tensor, const Var<T>& scores,
                          const TruncatedCorrelation& tc, const CorrelationConfig& config,
                          const BranchWeights<T>& w);

// Converts an [N x 3] tensor to a cloud (float coordinates).
template <typename T>
PointCloud cloud_from(const Tensor<T>& t);

// The quantities one source point's branches consume.
struct FieldDump {
  struct Level {
    double side_length;
    std::vector<double> subcube_scores;  // a^3, lexicographic (i, j, k)
  };
  struct Entry {
    std::uint32_t target_index;
    double score;
    Vec3 offset;  // target - q
  };
  std::size_t source_index = 0;
  std::size_t retained_count = 0;
  std::vector<Level> levels;
  std::vector<Entry> knn;
};

FieldDump dump_fields(std::size_t index, const PointCloud& q, const PointCloud& target,
                      const TruncatedCorrelation& tc, const CubeSpec& spec, std::size_t k);

std::string to_json(const FieldDump& dump);

}  // namespace pvcorr

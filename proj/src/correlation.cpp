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

#include "pvcorr/correlation.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <tuple>

#include "json.hpp"

namespace pvcorr {
namespace {

// Writes the k nearest retained targets of one query as (slot, target) pairs.
void row_knn(const Vec3& query, const TruncatedCorrelation& tc, std::size_t row,
             const PointCloud& target, std::size_t k, std::uint32_t* slots,
             std::uint32_t* targets) {
  std::vector<std::tuple<double, std::uint32_t, std::uint32_t>> cand(tc.m);
  const Vec3d qd = widen(query);
  for (std::size_t s = 0; s < tc.m; ++s) {
    const std::uint32_t t = tc.index(row, s);
    cand[s] = {squared_distance(widen(target[t]), qd), t, std::uint32_t(s)};
  }
  std::partial_sort(cand.begin(), cand.begin() + std::ptrdiff_t(k), cand.end());
  for (std::size_t j = 0; j < k; ++j) {
    targets[j] = std::get<1>(cand[j]);
    slots[j] = std::get<2>(cand[j]);
  }
}

// Sub-cube buckets of retained slots for one query, indexed l * a^3 + s.
void row_buckets(const Vec3& query, const TruncatedCorrelation& tc, std::size_t row,
                 const PointCloud& target, const CubeSpec& spec,
                 std::vector<std::vector<std::uint32_t>>& buckets) {
  for (auto& b : buckets) b.clear();
  for (std::size_t s = 0; s < tc.m; ++s) {
    const Vec3& p = target[tc.index(row, s)];
    for (int level = 0; level < spec.levels; ++level) {
      const int cell = subcube_of(query, p, spec.side_at(level), spec.resolution);
      if (cell >= 0) buckets[std::size_t(level) * spec.cells() + std::size_t(cell)].push_back(std::uint32_t(s));
    }
  }
}

void check_rows(const PointCloud& q, const TruncatedCorrelation& tc, const char* op) {
  if (q.size() != tc.rows) {
    throw DimensionError(std::string(op) + ": " + std::to_string(q.size()) +
                         " queries for a correlation with " + std::to_string(tc.rows) + " rows");
  }
}

void check_targets(const PointCloud& target, const TruncatedCorrelation& tc, const char* op) {
  if (target.size() != tc.cols) {
    throw DimensionError(std::string(op) + ": target has " + std::to_string(target.size()) +
                         " points, correlation has " + std::to_string(tc.cols) + " columns");
  }
}

}  // namespace

void CorrelationConfig::validate() const {
  if (m < 1) throw std::invalid_argument("truncation number m must be at least 1");
  if (k < 1) throw std::invalid_argument("neighbor count k must be at least 1");
  if (k > m) {
    throw std::invalid_argument("neighbor count k=" + std::to_string(k) +
                                " exceeds truncation number m=" + std::to_string(m));
  }
  cube.validate();
}

template <typename T>
Var<T> build_correlation(const Var<T>& f1, const Var<T>& f2) {
  if (f1.rank() != 2 || f2.rank() != 2 || f1.dim(1) != f2.dim(1)) {
    throw DimensionError("build_correlation: feature shapes " + shape_string(f1.shape()) +
                         " and " + shape_string(f2.shape()) + " do not share a width");
  }
  return ad::matmul(f1, ad::transpose(f2));
}

template <typename T>
TruncatedCorrelation truncate(const Tensor<T>& c, std::size_t m) {
  if (c.rank() != 2) throw DimensionError("truncate: expected a matrix, got " + shape_string(c.shape));
  const std::size_t rows = c.dim(0), cols = c.dim(1);
  if (m < 1 || m > cols) {
    throw std::invalid_argument("truncate: m=" + std::to_string(m) + " outside [1, " +
                                std::to_string(cols) + "]");
  }
  TruncatedCorrelation tc{rows, cols, m, std::vector<std::uint32_t>(rows * m),
                          std::vector<double>(rows * m)};
  std::vector<std::uint32_t> order(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = c.data.data() + r * cols;
    std::iota(order.begin(), order.end(), 0u);
    std::partial_sort(order.begin(), order.begin() + std::ptrdiff_t(m), order.end(),
                      [row](std::uint32_t a, std::uint32_t b) {
                        return row[a] > row[b] || (row[a] == row[b] && a < b);
                      });
    for (std::size_t s = 0; s < m; ++s) {
      tc.indices[r * m + s] = order[s];
      tc.scores[r * m + s] = double(row[order[s]]);
    }
  }
  return tc;
}

template <typename T>
Var<T> retained_scores(const Var<T>& c, const TruncatedCorrelation& tc) {
  if (c.rank() != 2 || c.dim(0) != tc.rows || c.dim(1) != tc.cols) {
    throw DimensionError("retained_scores: matrix " + shape_string(c.shape()) +
                         " does not match the truncation table");
  }
  std::vector<std::size_t> offsets(tc.rows * tc.m + 1);
  std::iota(offsets.begin(), offsets.end(), std::size_t{0});
  std::vector<std::uint32_t> flat(tc.rows * tc.m);
  for (std::size_t r = 0; r < tc.rows; ++r)
    for (std::size_t s = 0; s < tc.m; ++s)
      flat[r * tc.m + s] = std::uint32_t(r * tc.cols + tc.index(r, s));
  return ad::segment_mean(c, offsets, flat, {tc.rows, tc.m});
}

RetainedNeighbors retained_knn(const PointCloud& q, const PointCloud& target,
                               const TruncatedCorrelation& tc, std::size_t k) {
  check_rows(q, tc, "retained_knn");
  check_targets(target, tc, "retained_knn");
  if (k < 1 || k > tc.m) {
    throw std::invalid_argument("retained_knn: k=" + std::to_string(k) +
                                " must lie in [1, m=" + std::to_string(tc.m) + "]");
  }
  RetainedNeighbors nb{tc.rows, k, std::vector<std::uint32_t>(tc.rows * k),
                       std::vector<std::uint32_t>(tc.rows * k)};
  for (std::size_t r = 0; r < tc.rows; ++r)
    row_knn(q[r], tc, r, target, k, nb.slot.data() + r * k, nb.target.data() + r * k);
  return nb;
}

CubeSegments voxel_segments(const PointCloud& q, const PointCloud& target,
                            const TruncatedCorrelation& tc, const CubeSpec& spec) {
  spec.validate();
  check_rows(q, tc, "voxel_segments");
  check_targets(target, tc, "voxel_segments");
  CubeSegments seg{tc.rows, spec.feature_size(), {0}, {}};
  seg.offsets.reserve(tc.rows * seg.width + 1);
  std::vector<std::vector<std::uint32_t>> buckets(seg.width);
  for (std::size_t r = 0; r < tc.rows; ++r) {
    row_buckets(q[r], tc, r, target, spec, buckets);
    for (const auto& b : buckets) {
      for (std::uint32_t s : b) seg.entries.push_back(std::uint32_t(r * tc.m + s));
      seg.offsets.push_back(seg.entries.size());
    }
  }
  return seg;
}

template <typename T>
Var<T> point_branch_input(const Var<T>& q, const Tensor<T>& target, const Var<T>& scores,
                          const RetainedNeighbors& nb) {
  if (q.rank() != 2 || q.dim(0) != nb.rows || q.dim(1) != 3) {
    throw DimensionError("point_branch_input: query shape " + shape_string(q.shape()));
  }
  if (scores.rank() != 2 || scores.dim(0) != nb.rows) {
    throw DimensionError("point_branch_input: score shape " + shape_string(scores.shape()));
  }
  const std::size_t m = scores.dim(1), k = nb.k;
  std::vector<std::uint32_t> flat(nb.rows * k), self(nb.rows * k);
  for (std::size_t r = 0; r < nb.rows; ++r)
    for (std::size_t j = 0; j < k; ++j) {
      flat[r * k + j] = std::uint32_t(r * m + nb.slot[r * k + j]);
      self[r * k + j] = std::uint32_t(r);
    }
  Var<T> s = ad::gather_rows(ad::reshape(scores, {nb.rows * m, 1}), flat);
  Var<T> offset = ad::sub(ad::gather_rows(constant(target), nb.target), ad::gather_rows(q, self));
  return ad::concat<T>({s, offset}, 1);
}

template <typename T>
Var<T> point_branch(Tape<T>& tape, const Var<T>& input, std::size_t k,
                    const PointBranchWeights<T>& w) {
  if (input.rank() != 2 || input.dim(1) != 4 || k == 0 || input.dim(0) % k != 0) {
    throw DimensionError("point_branch: input " + shape_string(input.shape()) +
                         " is not N*k rows of 4 channels");
  }
  Var<T> h = w.act(tape, w.norm(tape, w.fc1(tape, input)));
  h = ad::max_pool_neighbors(ad::reshape(h, {input.dim(0) / k, k, kCorrelationChannels}));
  return w.fc2(tape, h);
}

template <typename T>
Var<T> voxel_features(const Var<T>& scores, const CubeSegments& segments) {
  if (scores.rank() != 2 || scores.dim(0) != segments.rows) {
    throw DimensionError("voxel_features: score shape " + shape_string(scores.shape()));
  }
  return ad::segment_mean(scores, segments.offsets, segments.entries,
                          {segments.rows, segments.width});
}

template <typename T>
Var<T> voxel_branch(Tape<T>& tape, const Var<T>& features, const VoxelBranchWeights<T>& w) {
  return w.fc2(tape, w.act(tape, w.norm(tape, w.fc1(tape, features))));
}

template <typename T>
Var<T> combine(const Var<T>& point, const Var<T>& voxel) {
  return ad::add(point, voxel);
}

template <typename T>
PointCloud cloud_from(const Tensor<T>& t) {
  if (t.rank() != 2 || t.dim(1) != 3) throw DimensionError("expected N x 3 coordinates");
  std::vector<Vec3> pts(t.dim(0));
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (int c = 0; c < 3; ++c) pts[i][c] = float(t.data[i * 3 + c]);
  return PointCloud(std::move(pts));
}

template <typename T>
Var<T> lookup_correlation(Tape<T>& tape, const Var<T>& q, const PointCloud& target,
                          const Tensor<T>& target_tensor, const Var<T>& scores,
                          const TruncatedCorrelation& tc, const CorrelationConfig& config,
                          const BranchWeights<T>& w) {
  const PointCloud qc = cloud_from(q.value());
  Var<T> cp, cv;
  if (config.mode != CorrelationMode::kVoxelOnly) {
    const RetainedNeighbors nb = retained_knn(qc, target, tc, config.k);
    cp = point_branch(tape, point_branch_input(q, target_tensor, scores, nb), config.k, w.point);
  }
  if (config.mode != CorrelationMode::kPointOnly) {
    const CubeSegments seg = voxel_segments(qc, target, tc, config.cube);
    cv = voxel_branch(tape, voxel_features(scores, seg), w.voxel);
  }
  if (!cp.defined()) return cv;
  if (!cv.defined()) return cp;
  return combine(cp, cv);
}

FieldDump dump_fields(std::size_t index, const PointCloud& q, const PointCloud& target,
                      const TruncatedCorrelation& tc, const CubeSpec& spec, std::size_t k) {
  spec.validate();
  check_rows(q, tc, "dump_fields");
  check_targets(target, tc, "dump_fields");
  if (index >= tc.rows) {
    throw std::out_of_range("dump_fields: source index " + std::to_string(index) +
                            " out of range for " + std::to_string(tc.rows) + " points");
  }
  if (k < 1 || k > tc.m) throw std::invalid_argument("dump_fields: k must lie in [1, m]");
  FieldDump dump;
  dump.source_index = index;
  dump.retained_count = tc.m;
  std::vector<std::vector<std::uint32_t>> buckets(spec.feature_size());
  row_buckets(q[index], tc, index, target, spec, buckets);
  for (int level = 0; level < spec.levels; ++level) {
    FieldDump::Level lv{spec.side_at(level), std::vector<double>(spec.cells(), 0.0)};
    for (std::size_t c = 0; c < spec.cells(); ++c) {
      const auto& b = buckets[std::size_t(level) * spec.cells() + c];
      if (b.empty()) continue;
      double acc = 0;
      for (std::uint32_t s : b) acc += tc.score(index, s);
      lv.subcube_scores[c] = acc / double(b.size());
    }
    dump.levels.push_back(std::move(lv));
  }
  std::vector<std::uint32_t> slots(k), targets(k);
  row_knn(q[index], tc, index, target, k, slots.data(), targets.data());
  for (std::size_t j = 0; j < k; ++j) {
    const Vec3& p = target[targets[j]];
    const Vec3& o = q[index];
    dump.knn.push_back({targets[j], tc.score(index, slots[j]),
                        Vec3{p[0] - o[0], p[1] - o[1], p[2] - o[2]}});
  }
  return dump;
}

std::string to_json(const FieldDump& dump) {
  nlohmann::ordered_json j;
  j["source_index"] = dump.source_index;
  j["retained_count"] = dump.retained_count;
  j["levels"] = nlohmann::ordered_json::array();
  for (const auto& lv : dump.levels)
    j["levels"].push_back({{"side_length", lv.side_length}, {"subcube_scores", lv.subcube_scores}});
  j["knn"] = nlohmann::ordered_json::array();
  for (const auto& e : dump.knn)
    j["knn"].push_back({{"target_index", e.target_index},
                        {"score", e.score},
                        {"offset", {e.offset[0], e.offset[1], e.offset[2]}}});
  return j.dump(2);
}

#define PVCORR_INSTANTIATE_CORRELATION(T)                                                     template Var<T> build_correlation(const Var<T>&, const Var<T>&);                           template TruncatedCorrelation truncate(const Tensor<T>&, std::size_t);                     template Var<T> retained_scores(const Var<T>&, const TruncatedCorrelation&);               template Var<T> point_branch_input(const Var<T>&, const Tensor<T>&, const Var<T>&,                                            const RetainedNeighbors&);                              template Var<T> point_branch(Tape<T>&, const Var<T>&, std::size_t,                                                      const PointBranchWeights<T>&);                                template Var<T> voxel_features(const Var<T>&, const CubeSegments&);                        template Var<T> voxel_branch(Tape<T>&, const Var<T>&, const VoxelBranchWeights<T>&);       template Var<T> combine(const Var<T>&, const Var<T>&);                                     template PointCloud cloud_from(const Tensor<T>&);                                          template Var<T> lookup_correlation(Tape<T>&, const Var<T>&, const PointCloud&,                                                const Tensor<T>&, const Var<T>&,                                                           const TruncatedCorrelation&, const CorrelationConfig&,                                      const BranchWeights<T>&);

PVCORR_INSTANTIATE_CORRELATION(float)
PVCORR_INSTANTIATE_CORRELATION(double)

}  // namespace pvcorr

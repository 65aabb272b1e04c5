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

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>
#include <set>

#include "support/random_clouds.hpp"

namespace pvcorr {
namespace {

using testing::random_cloud;
using testing::tie_heavy_cloud;

std::vector<std::uint32_t> indices_of(const std::vector<Neighbor>& ns) {
  std::vector<std::uint32_t> out;
  for (const auto& n : ns) out.push_back(n.index);
  return out;
}

TEST(Knn, QueryOnTargetReturnsItWithZeroOffset) {
  PointCloud target({{1, 2, 3}, {4, 5, 6}});
  auto res = knn(SpatialIndex(target), PointCloud({{4, 5, 6}}), 1);
  ASSERT_EQ(res[0].size(), 1u);
  EXPECT_EQ(res[0][0].index, 1u);
  EXPECT_EQ(res[0][0].offset, (Vec3{0, 0, 0}));
}

TEST(Knn, MatchesExhaustiveDistanceSort) {
  PointCloud target({{1, 0, 0}, {0, 2, 0}, {0, 0, 3}});
  // Distances 1, 2, 3 from the origin.
  auto res = knn(SpatialIndex(target), PointCloud({{0, 0, 0}}), 2);
  EXPECT_EQ(indices_of(res[0]), (std::vector<std::uint32_t>{0, 1}));
  EXPECT_EQ(res[0][1].offset, (Vec3{0, 2, 0}));
}

TEST(Knn, RejectsKLargerThanTarget) {
  PointCloud target({{0, 0, 0}, {1, 1, 1}});
  EXPECT_THROW(knn(SpatialIndex(target), target, 3), std::invalid_argument);
  EXPECT_THROW(knn_brute_force(target, target, 3), std::invalid_argument);
  EXPECT_THROW(knn(SpatialIndex(target), target, 0), std::invalid_argument);
}

TEST(Knn, SinglePointTarget) {
  PointCloud target({{0.5f, 0, 0}});
  auto res = knn_brute_force(target, PointCloud({{9, 9, 9}}), 1);
  EXPECT_EQ(res[0][0].index, 0u);
}

TEST(Knn, DuplicatedTargetsBreakTiesByLowerIndex) {
  PointCloud target({{1, 1, 1}, {0, 0, 0}, {1, 1, 1}, {1, 1, 1}});
  PointCloud query({{1, 1, 1}});
  EXPECT_EQ(indices_of(knn_brute_force(target, query, 2)[0]), (std::vector<std::uint32_t>{0, 2}));
  EXPECT_EQ(indices_of(knn(SpatialIndex(target, 1), query, 3)[0]),
            (std::vector<std::uint32_t>{0, 2, 3}));
}

TEST(Knn, SpatialIndexEqualsBruteForceOnRandomClouds) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> size(1, 512);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = size(rng);
    const PointCloud target = trial % 3 == 0 ? tie_heavy_cloud(n, rng) : random_cloud(n, rng);
    const PointCloud queries = trial % 3 == 0 ? tie_heavy_cloud(16, rng) : random_cloud(16, rng);
    const SpatialIndex index(target);
    for (std::size_t k : {1, 4, 32}) {
      if (k > n) continue;
      ASSERT_EQ(knn(index, queries, k), knn_brute_force(target, queries, k))
          << "trial " << trial << " k " << k;
    }
  }
}

TEST(Knn, TargetPermutationPreservesNeighborPoints) {
  std::mt19937_64 rng(3);
  const PointCloud target = random_cloud(300, rng);
  const PointCloud queries = random_cloud(20, rng);
  std::vector<std::uint32_t> perm(target.size());
  std::iota(perm.begin(), perm.end(), 0u);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<Vec3> shuffled(target.size());
  for (std::size_t i = 0; i < perm.size(); ++i) shuffled[i] = target[perm[i]];
  const auto a = knn(SpatialIndex(target), queries, 8);
  const auto b = knn(SpatialIndex(PointCloud(shuffled)), queries, 8);
  for (std::size_t q = 0; q < queries.size(); ++q)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(a[q][j].index, perm[b[q][j].index]);
}

TEST(Translate, ZeroAndAxisFlows) {
  PointCloud p({{1, 2, 3}, {-1, 0, 0.5f}});
  EXPECT_EQ(translate(p, FlowField::zeros(2)), p);
  auto q = translate(p, FlowField({{1, 0, 0}, {1, 0, 0}}));
  EXPECT_EQ(q[0], (Vec3{2, 2, 3}));
  EXPECT_EQ(q[1], (Vec3{0, 0, 0.5f}));
  EXPECT_THROW(translate(p, FlowField::zeros(3)), DimensionError);
}

TEST(Translate, FlowRecoveredExactlyOnDyadicGrid) {
  // Exact whenever p + f needs no rounding, e.g. multiples of 2^-10 in [-8, 8].
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> u(-8192, 8192);
  std::vector<Vec3> pts(64), vec(64);
  for (std::size_t i = 0; i < 64; ++i)
    for (int c = 0; c < 3; ++c) {
      pts[i][c] = float(u(rng)) / 1024.0f;
      vec[i][c] = float(u(rng)) / 1024.0f;
    }
  const PointCloud p(pts);
  const PointCloud q = translate(p, FlowField(vec));
  for (std::size_t i = 0; i < 64; ++i)
    for (int c = 0; c < 3; ++c) EXPECT_EQ(q[i][c] - p[i][c], vec[i][c]);
}

TEST(PointCloudType, RejectsEmptyAndNonFinite) {
  EXPECT_THROW(PointCloud(std::vector<Vec3>{}), std::invalid_argument);
  EXPECT_THROW(PointCloud({{0, std::numeric_limits<float>::infinity(), 0}}), std::invalid_argument);
  EXPECT_THROW(FlowField({{std::numeric_limits<float>::quiet_NaN(), 0, 0}}), std::invalid_argument);
}

CubeSpec unit_cube() { return CubeSpec{3, 1.0, 1}; }

std::size_t slot_of(int i, int j, int k) { return subcube_slot({i, j, k}, 3); }

TEST(CubeAssign, PointAlongPositiveXLandsInNeighborSubcube) {
  auto m = cube_assign(PointCloud({{0, 0, 0}}), PointCloud({{0.6f, 0, 0}}), unit_cube(), 0);
  EXPECT_EQ(m[0][slot_of(1, 0, 0)], (std::vector<std::uint32_t>{0}));
}

TEST(CubeAssign, PointOutsideCubeIsExcluded) {
  auto m = cube_assign(PointCloud({{0, 0, 0}}), PointCloud({{2, 0, 0}, {1.5f, 0, 0}, {-1.5f, 0, 0}}),
                       unit_cube(), 0);
  std::size_t total = 0;
  for (const auto& bucket : m[0]) total += bucket.size();
  // -1.5 is on the closed lower face of the cube, +1.5 on the open upper face.
  EXPECT_EQ(total, 1u);
  EXPECT_EQ(m[0][slot_of(-1, 0, 0)], (std::vector<std::uint32_t>{2}));
}

TEST(CubeAssign, QueryPositionIsCentralSubcube) {
  auto m = cube_assign(PointCloud({{1, 2, 3}}), PointCloud({{1, 2, 3}}), unit_cube(), 0);
  EXPECT_EQ(m[0][slot_of(0, 0, 0)], (std::vector<std::uint32_t>{0}));
  EXPECT_EQ(slot_of(0, 0, 0), 13u);
}

TEST(CubeAssign, HalfOpenFacesGoToTheUpperSubcube) {
  auto m = cube_assign(PointCloud({{0, 0, 0}}), PointCloud({{0.5f, -0.5f, 0}}), unit_cube(), 0);
  EXPECT_EQ(m[0][slot_of(1, 0, 0)], (std::vector<std::uint32_t>{0}));
}

TEST(CubeAssign, SlotOrderIsLexicographic) {
  for (std::size_t s = 0; s < 27; ++s) EXPECT_EQ(subcube_slot(subcube_at(s, 3), 3), s);
  EXPECT_EQ(subcube_at(0, 3), (SubCube{-1, -1, -1}));
  EXPECT_EQ(subcube_at(1, 3), (SubCube{-1, -1, 0}));
  EXPECT_EQ(subcube_at(26, 3), (SubCube{1, 1, 1}));
}

TEST(CubeAssign, RejectsInvalidSpecs) {
  PointCloud p({{0, 0, 0}});
  EXPECT_THROW(cube_assign(p, p, CubeSpec{2, 1.0, 1}, 0), std::invalid_argument);
  EXPECT_THROW(cube_assign(p, p, CubeSpec{3, 0.0, 1}, 0), std::invalid_argument);
  EXPECT_THROW(cube_assign(p, p, CubeSpec{3, 1.0, 2}, 2), std::out_of_range);
}

// Independent oracle: enumerate every sub-cube and test box containment.
std::vector<std::size_t> boxes_containing(const Vec3& q, const Vec3& t, double side, int a) {
  std::vector<std::size_t> hits;
  const int h = (a - 1) / 2;
  for (int i = -h; i <= h; ++i)
    for (int j = -h; j <= h; ++j)
      for (int k = -h; k <= h; ++k) {
        const double lo[3] = {double(q[0]) + i * side - side / 2, double(q[1]) + j * side - side / 2,
                              double(q[2]) + k * side - side / 2};
        bool inside = true;
        for (int c = 0; c < 3; ++c) inside = inside && t[c] >= lo[c] && t[c] < lo[c] + side;
        if (inside) hits.push_back(std::size_t(((i + h) * a + (j + h)) * a + (k + h)));
      }
  return hits;
}

TEST(CubeAssign, ReconcilesWithBruteForceBoxTests) {
  std::mt19937_64 rng(11);
  const CubeSpec spec{3, 0.25, 3};
  for (int trial = 0; trial < 20; ++trial) {
    const PointCloud queries = random_cloud(10, rng);
    const PointCloud target = random_cloud(200, rng);
    for (int level = 0; level < spec.levels; ++level) {
      const auto members = cube_assign(queries, target, spec, level);
      for (std::size_t q = 0; q < queries.size(); ++q) {
        std::size_t assigned = 0, inside = 0;
        std::set<std::uint32_t> seen;
        for (std::size_t s = 0; s < members[q].size(); ++s)
          for (std::uint32_t t : members[q][s]) {
            ++assigned;
            EXPECT_TRUE(seen.insert(t).second) << "target in two sub-cubes";
            EXPECT_EQ(boxes_containing(queries[q], target[t], spec.side_at(level), 3),
                      (std::vector<std::size_t>{s}));
          }
        for (std::uint32_t t = 0; t < target.size(); ++t)
          inside += boxes_containing(queries[q], target[t], spec.side_at(level), 3).size();
        EXPECT_EQ(assigned, inside);
      }
    }
  }
}

TEST(CubeAssign, CoarserLevelContainsFinerLevel) {
  std::mt19937_64 rng(12);
  const CubeSpec spec{3, 0.25, 3};
  const PointCloud queries = random_cloud(10, rng);
  const PointCloud target = random_cloud(400, rng);
  for (int level = 1; level < spec.levels; ++level) {
    const auto fine = cube_assign(queries, target, spec, level - 1);
    const auto coarse = cube_assign(queries, target, spec, level);
    for (std::size_t q = 0; q < queries.size(); ++q) {
      std::set<std::uint32_t> outer;
      for (const auto& b : coarse[q]) outer.insert(b.begin(), b.end());
      for (const auto& b : fine[q])
        for (std::uint32_t t : b) EXPECT_TRUE(outer.count(t));
    }
  }
  EXPECT_EQ(spec.feature_size(), 81u);
}

TEST(CubeAssign, CandidateRestriction) {
  PointCloud q({{0, 0, 0}});
  PointCloud t({{0, 0, 0}, {0.1f, 0, 0}});
  std::vector<std::vector<std::uint32_t>> only_second{{1}};
  auto m = cube_assign(q, t, unit_cube(), 0, &only_second);
  EXPECT_EQ(m[0][slot_of(0, 0, 0)], (std::vector<std::uint32_t>{1}));
}

}  // namespace
}  // namespace pvcorr

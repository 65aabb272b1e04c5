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

#include "pvcorr/network.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "support/finite_difference.hpp"
#include "support/random_clouds.hpp"

namespace pvcorr {
namespace {

using testing::random_cloud;
using testing::random_tensor;

NetworkConfig tiny_config() {
  NetworkConfig cfg;
  cfg.graph_k = 8;
  cfg.corr.m = 16;
  cfg.corr.k = 4;
  return cfg;
}

template <typename Block>
void zero(Block& block) {
  block.visit("", [](const std::string&, auto& t) { std::fill(t.data.begin(), t.data.end(), 0); });
}

TEST(Graph, IncludesSelfFirstAndRejectsLargeK) {
  std::mt19937_64 rng(1);
  const PointCloud c = random_cloud(20, rng);
  const auto g = build_graph(c, 5);
  for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(g.nbr[i * 5], i);
  EXPECT_THROW(build_graph(c, 21), std::invalid_argument);
}

TEST(SetConv, MidWidthRule) {
  EXPECT_EQ(SetConvWeights<float>::mid_width(3, 32), 16u);
  EXPECT_EQ(SetConvWeights<float>::mid_width(32, 64), 48u);
  EXPECT_EQ(SetConvWeights<float>::mid_width(64, 128), 96u);
  ParamInit init(0);
  SetConvWeights<float> w(3, 32, init);
  EXPECT_EQ(w.fc1.fc.w.shape, (Shape{6, 16}));
}

TEST(SetConv, ConstantFeaturesGivePerPointConstant) {
  std::mt19937_64 rng(2);
  const PointCloud c = random_cloud(12, rng);
  ParamInit init(3);
  SetConvWeights<double> w(16, 32, init);
  Tape<double> tape(GradMode::kInference);
  const auto out = set_conv(tape, constant(Tensor<double>::filled({12, 16}, 0.3)), build_graph(c, 4), w)
                       .value();
  for (std::size_t i = 1; i < 12; ++i)
    for (std::size_t ch = 0; ch < 32; ++ch) EXPECT_NEAR(out.at(i, ch), out.at(0, ch), 1e-12);
}

// Plain-loop reference for one FC block: x * W + b, group norm over all rows,
// leaky ReLU.
std::vector<std::vector<double>> fc_block_ref(const std::vector<std::vector<double>>& x,
                                              const FcBlock<double>& blk) {
  const std::size_t in = blk.fc.in(), out = blk.fc.out(), rows = x.size();
  std::vector<std::vector<double>> y(rows, std::vector<double>(out));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < out; ++o) {
      double acc = blk.fc.b.data[o];
      for (std::size_t i = 0; i < in; ++i) acc += x[r][i] * blk.fc.w.at(i, o);
      y[r][o] = acc;
    }
  const std::size_t per = out / kNormGroups;
  for (std::size_t g = 0; g < kNormGroups; ++g) {
    double mean = 0, var = 0;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = g * per; c < (g + 1) * per; ++c) mean += y[r][c];
    mean /= double(rows * per);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = g * per; c < (g + 1) * per; ++c) var += (y[r][c] - mean) * (y[r][c] - mean);
    var /= double(rows * per);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = g * per; c < (g + 1) * per; ++c) {
        double v = (y[r][c] - mean) / std::sqrt(var + 1e-5) * blk.norm.gamma.data[c] + blk.norm.beta.data[c];
        y[r][c] = v < 0 ? 0.1 * v : v;
      }
  }
  return y;
}

TEST(SetConv, TwoPointCloudMatchesDirectComputation) {
  const PointCloud c({{0, 0, 0}, {1, 0.5f, 0}});
  std::mt19937_64 rng(4);
  const Tensor<double> f = random_tensor({2, 3}, rng);
  ParamInit init(5);
  SetConvWeights<double> w(3, 16, init);
  std::uniform_real_distribution<double> u(0.5, 1.5);
  for (auto* norm : {&w.fc1.norm, &w.fc2.norm, &w.fc3.norm})
    for (std::size_t i = 0; i < norm->gamma.size(); ++i) {
      norm->gamma.data[i] = u(rng);
      norm->beta.data[i] = u(rng) - 1;
    }
  const auto graph = build_graph(c, 2);
  // Edge rows concat(F_nbr - F_self, F_nbr), ordered (point, neighbor).
  std::vector<std::vector<double>> edges;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t j = 0; j < 2; ++j) {
      const std::size_t m = graph.nbr[n * 2 + j];
      std::vector<double> e;
      for (std::size_t ch = 0; ch < 3; ++ch) e.push_back(f.at(m, ch) - f.at(n, ch));
      for (std::size_t ch = 0; ch < 3; ++ch) e.push_back(f.at(m, ch));
      edges.push_back(e);
    }
  const auto h1 = fc_block_ref(edges, w.fc1);
  std::vector<std::vector<double>> pooled(2, std::vector<double>(8));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t ch = 0; ch < 8; ++ch) pooled[n][ch] = std::max(h1[n * 2][ch], h1[n * 2 + 1][ch]);
  const auto want = fc_block_ref(fc_block_ref(pooled, w.fc2), w.fc3);
  Tape<double> tape(GradMode::kInference);
  const auto got = set_conv(tape, constant(f), graph, w).value();
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t ch = 0; ch < 16; ++ch) EXPECT_NEAR(got.at(n, ch), want[n][ch], 1e-10);
}

TEST(SetConv, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  const PointCloud c = random_cloud(10, rng);
  const auto graph = build_graph(c, 4);
  ParamInit init(7);
  SetConvWeights<double> w(8, 24, init);
  const Tensor<double> f = random_tensor({10, 8}, rng);
  auto fn = [&](Tape<double>& tape, const std::vector<Var<double>>& v) {
    return testing::weighted_sum(set_conv(tape, v[0], graph, w));
  };
  EXPECT_LT(testing::max_gradient_error(fn, {f}), 1e-4);
  auto loss = [&](Tape<double>& tape) { return testing::weighted_sum(set_conv(tape, constant(f), graph, w)); };
  EXPECT_LT(testing::max_parameter_gradient_error(w, loss, 300, 2), 1e-4);
}

TEST(Extractor, PermutingPointsPermutesRows) {
  std::mt19937_64 rng(8);
  const PointCloud c = random_cloud(40, rng);
  std::vector<std::uint32_t> perm(40);
  std::iota(perm.begin(), perm.end(), 0u);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<Vec3> shuffled(40);
  for (std::size_t i = 0; i < 40; ++i) shuffled[i] = c[perm[i]];
  const PointCloud c2(shuffled);
  ParamInit init(9);
  Extractor<double> w(init);
  Tape<double> tape(GradMode::kInference);
  const auto a = extract(tape, constant(c.to_tensor<double>()), build_graph(c, 8), w).value();
  const auto b = extract(tape, constant(c2.to_tensor<double>()), build_graph(c2, 8), w).value();
  ASSERT_EQ(a.shape, (Shape{40, 128}));
  for (std::size_t i = 0; i < 40; ++i)
    for (std::size_t ch = 0; ch < 128; ++ch) EXPECT_NEAR(b.at(i, ch), a.at(perm[i], ch), 1e-9);
}

TEST(Extractor, FeatureAndContextWeightsDiffer) {
  std::mt19937_64 rng(10);
  const PointCloud c = random_cloud(16, rng);
  ModelParams<double> params(CubeSpec{}, 11);
  Tape<double> tape(GradMode::kInference);
  const auto g = build_graph(c, 8);
  const auto a = extract(tape, constant(c.to_tensor<double>()), g, params.feat).value();
  const auto b = extract(tape, constant(c.to_tensor<double>()), g, params.context).value();
  EXPECT_NE(a, b);
}

TEST(MotionEncoder, ZeroWeightsPassFlowThrough) {
  ParamInit init(12);
  MotionEncoder<float> w(init);
  zero(w);
  std::mt19937_64 rng(13);
  const auto corr = constant(random_tensor({5, 64}, rng).cast<float>());
  const auto flow = constant(random_tensor({5, 3}, rng).cast<float>());
  Tape<float> tape(GradMode::kInference);
  const auto out = motion_encoder(tape, corr, flow, w).value();
  ASSERT_EQ(out.shape, (Shape{5, kMotionChannels}));
  for (std::size_t r = 0; r < 5; ++r) {
    for (std::size_t c = 0; c < 64; ++c) EXPECT_EQ(out.at(r, c), 0.0f);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(out.at(r, 64 + c), flow.value().at(r, c));
  }
}

TEST(MotionEncoder, GradientMatchesFiniteDifferences) {
  ParamInit init(14);
  MotionEncoder<double> w(init);
  std::mt19937_64 rng(15);
  auto fn = [&](Tape<double>& tape, const std::vector<Var<double>>& v) {
    return testing::weighted_sum(motion_encoder(tape, v[0], v[1], w));
  };
  EXPECT_LT(testing::max_gradient_error(fn, {random_tensor({6, 64}, rng), random_tensor({6, 3}, rng)}), 1e-4);
}

TEST(Gru, ZeroWeightsHalveTheState) {
  ParamInit init(16);
  Gru<float> w(8, 5, init);
  zero(w);
  std::mt19937_64 rng(17);
  const auto h = constant(random_tensor({4, 8}, rng, -3, 3).cast<float>());
  const auto x = constant(random_tensor({4, 5}, rng).cast<float>());
  Tape<float> tape(GradMode::kInference);
  const auto out = gru_cell(tape, h, x, w).value();
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(out.data[i], 0.5f * h.value().data[i]);
  const auto from_zero = gru_cell(tape, constant(Tensor<float>({4, 8})), x, w).value();
  for (float v : from_zero.data) EXPECT_EQ(v, 0.0f);
}

TEST(Gru, ScalarCaseMatchesHandEvaluation) {
  ParamInit init(18);
  Gru<double> w(1, 1, init);
  // Rows of each weight: [h, x].
  w.z.w = Tensor<double>({2, 1}, {0.5, -1.0});
  w.z.b = Tensor<double>({1}, {0.1});
  w.r.w = Tensor<double>({2, 1}, {2.0, 0.3});
  w.r.b = Tensor<double>({1}, {-0.2});
  w.h.w = Tensor<double>({2, 1}, {-0.7, 1.5});
  w.h.b = Tensor<double>({1}, {0.05});
  const double h = 0.4, x = -0.8;
  const double z = 1 / (1 + std::exp(-(0.5 * h - 1.0 * x + 0.1)));
  const double r = 1 / (1 + std::exp(-(2.0 * h + 0.3 * x - 0.2)));
  const double hh = std::tanh(-0.7 * r * h + 1.5 * x + 0.05);
  const double want = (1 - z) * h + z * hh;
  Tape<double> tape(GradMode::kInference);
  const double got =
      gru_cell(tape, constant(Tensor<double>({1, 1}, {h})), constant(Tensor<double>({1, 1}, {x})), w).item();
  EXPECT_NEAR(got, want, 1e-15);
}

TEST(Gru, HiddenStaysBounded) {
  ParamInit init(19);
  Gru<float> w(16, 8, init);
  std::mt19937_64 rng(20);
  Var<float> h = constant(random_tensor({3, 16}, rng, -1, 1).cast<float>());
  for (int step = 0; step < 200; ++step) {
    Tape<float> tape(GradMode::kInference);
    float bound = 1.0f;
    for (float v : h.data()) bound = std::max(bound, std::abs(v));
    h = gru_cell(tape, h, constant(random_tensor({3, 8}, rng, -20, 20).cast<float>()), w);
    for (float v : h.data()) ASSERT_LE(std::abs(v), bound * (1 + 1e-6f));
  }
}

TEST(Gru, GradientMatchesFiniteDifferences) {
  ParamInit init(21);
  Gru<double> w(8, 6, init);
  std::mt19937_64 rng(22);
  auto fn = [&](Tape<double>& tape, const std::vector<Var<double>>& v) {
    return testing::weighted_sum(gru_cell(tape, v[0], v[1], w));
  };
  EXPECT_LT(testing::max_gradient_error(fn, {random_tensor({4, 8}, rng), random_tensor({4, 6}, rng)}), 1e-4);
}

TEST(FlowHead, ZeroOutputLayerGivesZeroResidual) {
  std::mt19937_64 rng(23);
  const PointCloud c = random_cloud(12, rng);
  ParamInit init(24);
  FlowHead<float> w(init);
  zero(w.out);
  Tape<float> tape(GradMode::kInference);
  const auto out = flow_head(tape, constant(random_tensor({12, 128}, rng).cast<float>()), build_graph(c, 4), w)
                       .value();
  EXPECT_EQ(out.shape, (Shape{12, 3}));
  for (float v : out.data) EXPECT_EQ(v, 0.0f);
}

TEST(FlowHead, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(25);
  const PointCloud c = random_cloud(10, rng);
  const auto g = build_graph(c, 4);
  ParamInit init(26);
  FlowHead<double> w(init);
  auto fn = [&](Tape<double>& tape, const std::vector<Var<double>>& v) {
    return testing::weighted_sum(flow_head(tape, v[0], g, w));
  };
  EXPECT_LT(testing::max_gradient_error(fn, {random_tensor({10, 128}, rng)}), 1e-4);
}

struct Pair {
  PointCloud p1, p2;
};

Pair random_pair(std::mt19937_64& rng, std::size_t n) {
  const PointCloud p1 = random_cloud(n, rng, 0.5f);
  std::normal_distribution<float> jitter(0, 0.02f);
  std::vector<Vec3> moved(n);
  for (std::size_t i = 0; i < n; ++i)
    moved[i] = {p1[i][0] + 0.1f + jitter(rng), p1[i][1] + jitter(rng), p1[i][2] - 0.05f + jitter(rng)};
  return {p1, PointCloud(moved)};
}

TEST(Iterate, ZeroFlowHeadIsAFixedPoint) {
  std::mt19937_64 rng(27);
  const Pair s = random_pair(rng, 24);
  ModelParams<float> params(CubeSpec{}, 28);
  zero(params.head.out);
  Tape<float> tape(GradMode::kInference);
  FlowEstimator<float> est(tape, params, tiny_config(), s.p1, s.p2);
  for (int t = 0; t < 3; ++t) {
    est.step();
    for (float v : est.flow().data()) EXPECT_EQ(v, 0.0f);
    EXPECT_EQ(est.translated().value(), s.p1.to_tensor<float>());
  }
}

TEST(Iterate, StepsAccumulateResidualsExactly) {
  std::mt19937_64 rng(29);
  const Pair s = random_pair(rng, 24);
  ModelParams<float> params(CubeSpec{}, 30);
  Tape<float> tape(GradMode::kInference);
  FlowEstimator<float> est(tape, params, tiny_config(), s.p1, s.p2);
  Tensor<float> prev({24, 3});
  for (int t = 0; t < 4; ++t) {
    est.step();
    const auto& delta = est.last_delta().value();
    for (std::size_t i = 0; i < prev.size(); ++i) EXPECT_EQ(est.flow().value().data[i], prev.data[i] + delta.data[i]);
    prev = est.flow().value();
  }
}

TEST(Iterate, SingleStepEqualsManualComposition) {
  std::mt19937_64 rng(31);
  const Pair s = random_pair(rng, 20);
  const NetworkConfig cfg = tiny_config();
  ModelParams<double> params(CubeSpec{}, 32);
  Tape<double> tape(GradMode::kInference);
  const auto flows = iterate(tape, params, cfg, s.p1, s.p2, 1);

  const auto g1 = build_graph(s.p1, 8), g2 = build_graph(s.p2, 8);
  const auto p1 = constant(s.p1.to_tensor<double>());
  const auto f1 = extract(tape, p1, g1, params.feat);
  const auto f2 = extract(tape, constant(s.p2.to_tensor<double>()), g2, params.feat);
  const auto c = build_correlation(f1, f2);
  const auto tc = truncate(c.value(), 16);
  const auto scores = retained_scores(c, tc);
  const auto ctx = extract(tape, p1, g1, params.context);
  const auto zero_flow = constant(Tensor<double>({20, 3}));
  const auto nb = retained_knn(s.p1, s.p2, tc, 4);
  const auto cp = point_branch(tape, point_branch_input(p1, s.p2.to_tensor<double>(), scores, nb), 4,
                               params.corr.point);
  const auto cv = voxel_branch(tape, voxel_features(scores, voxel_segments(s.p1, s.p2, tc, cfg.corr.cube)),
                               params.corr.voxel);
  const auto x = ad::concat<double>({motion_encoder(tape, combine(cp, cv), zero_flow, params.motion), ctx}, 1);
  const auto h = gru_cell(tape, ad::tanh(ctx), x, params.gru);
  const auto want = flow_head(tape, h, g1, params.head).value();
  ASSERT_EQ(flows.size(), 1u);
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(flows[0].value().data[i], want.data[i], 1e-12);
}

TEST(Iterate, PermutingSourcePermutesFlow) {
  std::mt19937_64 rng(33);
  const Pair s = random_pair(rng, 32);
  std::vector<std::uint32_t> perm(32);
  std::iota(perm.begin(), perm.end(), 0u);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<Vec3> shuffled(32);
  for (std::size_t i = 0; i < 32; ++i) shuffled[i] = s.p1[perm[i]];
  ModelParams<double> params(CubeSpec{}, 34);
  const auto a = predict(params, tiny_config(), s.p1, s.p2, 3, false);
  const auto b = predict(params, tiny_config(), PointCloud(shuffled), s.p2, 3, false);
  for (std::size_t i = 0; i < 32; ++i)
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(b[i][c], a[perm[i]][c], 1e-5);
}

TEST(Iterate, ZeroHiddenInitSwitch) {
  std::mt19937_64 rng(35);
  const Pair s = random_pair(rng, 16);
  ModelParams<float> params(CubeSpec{}, 36);
  NetworkConfig cfg = tiny_config();
  Tape<float> tape(GradMode::kInference);
  cfg.hidden_from_context = false;
  FlowEstimator<float> est(tape, params, cfg, s.p1, s.p2);
  for (float v : est.hidden().data()) EXPECT_EQ(v, 0.0f);
}

TEST(Iterate, RetainedCountIsCappedByTargetSize) {
  std::mt19937_64 rng(37);
  const Pair s = random_pair(rng, 16);
  ModelParams<float> params(CubeSpec{}, 38);
  NetworkConfig whole = tiny_config(), over = tiny_config();
  whole.corr.m = 16;
  over.corr.m = 512;
  Tape<float> a(GradMode::kInference), b(GradMode::kInference);
  FlowEstimator<float> ea(a, params, whole, s.p1, s.p2), eb(b, params, over, s.p1, s.p2);
  EXPECT_EQ(eb.truncation().m, 16u);
  EXPECT_EQ(ea.step().value(), eb.step().value());
}

TEST(Refine, ZeroOutputLayerIsIdentity) {
  std::mt19937_64 rng(37);
  const PointCloud c = random_cloud(16, rng);
  ParamInit init(38);
  Refine<float> w(init);
  zero(w.fc);
  const auto flow = constant(random_tensor({16, 3}, rng).cast<float>());
  Tape<float> tape(GradMode::kInference);
  EXPECT_EQ(refine(tape, flow, build_graph(c, 8), w).value(), flow.value());
}

TEST(Refine, GradientReachesOnlyRefinementWhenUpstreamFrozen) {
  std::mt19937_64 rng(39);
  const Pair s = random_pair(rng, 16);
  ModelParams<double> params(CubeSpec{}, 40);
  const NetworkConfig cfg = tiny_config();
  const FlowField frozen = predict(params, cfg, s.p1, s.p2, 2, false);
  Tape<double> tape;
  const auto out = refine(tape, constant(frozen.to_tensor<double>()), build_graph(s.p1, 8), params.refine);
  tape.backward(testing::weighted_sum(out));
  double refine_mass = 0, main_mass = 0;
  params.visit_refine([&](const std::string&, const Tensor<double>& t) {
    for (double g : tape.param_grad(t).data) refine_mass += std::abs(g);
  });
  params.visit_main([&](const std::string&, const Tensor<double>& t) {
    for (double g : tape.param_grad(t).data) main_mass += std::abs(g);
  });
  EXPECT_GT(refine_mass, 0.0);
  EXPECT_EQ(main_mass, 0.0);
}

TEST(ModelParams, NamesAndCheckpointRoundTrip) {
  ModelParams<float> params(CubeSpec{}, 41);
  std::vector<std::string> names;
  params.visit("", [&](const std::string& n, const Tensor<float>&) { names.push_back(n); });
  EXPECT_EQ(names.front(), "feat.setconv0.fc1.w");
  EXPECT_NE(std::find(names.begin(), names.end(), "gru.z.w"), names.end());
  EXPECT_NE(std::find(names.begin(), names.end(), "refine.fc.w"), names.end());
  EXPECT_NE(std::find(names.begin(), names.end(), "corr.voxel.fc1.w"), names.end());
  EXPECT_EQ(std::set<std::string>(names.begin(), names.end()).size(), names.size());

  const auto all = export_params(params, ParamSet::kAll);
  const auto decoded = decode_checkpoint(encode_checkpoint(all));
  ModelParams<float> loaded(CubeSpec{}, 999);
  import_params(loaded, decoded, ParamSet::kAll);
  EXPECT_EQ(export_params(loaded, ParamSet::kAll), all);

  const auto main = export_params(params, ParamSet::kMain);
  EXPECT_FALSE(has_refine_params(main));
  EXPECT_TRUE(has_refine_params(all));
  EXPECT_THROW(import_params(loaded, main, ParamSet::kAll), FormatError);
  ModelParams<float> other_cube(CubeSpec{3, 0.25, 2}, 41);
  EXPECT_THROW(import_params(other_cube, main, ParamSet::kMain), FormatError);
}

TEST(ModelParams, FloatAndDoubleCopiesAgree) {
  ModelParams<float> f(CubeSpec{}, 42);
  ModelParams<double> d(CubeSpec{}, 0);
  copy_parameters(d, f);
  ModelParams<float> back(CubeSpec{}, 0);
  copy_parameters(back, d);
  EXPECT_EQ(export_params(back, ParamSet::kAll), export_params(f, ParamSet::kAll));
}

TEST(Iterate, DetachedFlowBlocksGradientIntoPreviousIterate) {
  std::mt19937_64 rng(47);
  const Pair s = random_pair(rng, 16);
  const Tensor<double> gt = random_tensor({16, 3}, rng, -0.2, 0.2);
  ModelParams<double> params(CubeSpec{}, 48);
  for (bool detach : {true, false}) {
    NetworkConfig cfg = tiny_config();
    cfg.detach_flow = detach;
    Tape<double> tape;
    const auto flows = iterate(tape, params, cfg, s.p1, s.p2, 2);
    tape.backward(ad::mean_row_l1(flows[1], gt));
    const auto g = tape.grad(flows[0]);
    const bool any = std::any_of(g.data.begin(), g.data.end(), [](double v) { return v != 0; });
    EXPECT_EQ(any, !detach);
  }
}

TEST(EndToEnd, IterationLossGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(43);
  const Pair s = random_pair(rng, 16);
  const Tensor<double> gt = random_tensor({16, 3}, rng, -0.2, 0.2);
  ModelParams<double> params(CubeSpec{}, 44);
  // Finite differences see the whole composition, so the flow path stays live.
  NetworkConfig cfg = tiny_config();
  cfg.detach_flow = false;
  auto loss = [&](Tape<double>& tape) {
    const auto flows = iterate(tape, params, cfg, s.p1, s.p2, 2);
    return ad::add(ad::affine(ad::mean_row_l1(flows[0], gt), 0.8, 0.0), ad::mean_row_l1(flows[1], gt));
  };
  EXPECT_LT(testing::max_parameter_gradient_error(params, loss, 100, 45), 1e-3);
}

}  // namespace
}  // namespace pvcorr

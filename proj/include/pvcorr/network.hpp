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

// Learnable blocks of the estimator and the iterative update loop.
//
// Parameter names are the dotted paths produced by ModelParams::visit, for
// example "feat.setconv0.fc1.w", "gru.z.w" or "refine.fc.w". The "refine."
// subtree is trained in a separate stage with everything else frozen.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pvcorr/autodiff.hpp"
#include "pvcorr/checkpoint.hpp"
#include "pvcorr/correlation.hpp"
#include "pvcorr/geometry.hpp"
#include "pvcorr/layers.hpp"

namespace pvcorr {

inline constexpr std::size_t kFeatureChannels = 128;
inline constexpr std::size_t kContextChannels = 128;
inline constexpr std::size_t kHiddenChannels = 128;
inline constexpr std::size_t kMotionChannels = 64 + 3;

struct NetworkConfig {
  std::size_t graph_k = 32;  // SetConv neighbor count, self included
  CorrelationConfig corr;
  bool hidden_from_context = true;  // h0 = tanh(context), else zeros
  // Each update sees the previous flow as a constant, so gradient reaches
  // earlier updates only through the hidden state.
  bool detach_flow = true;

  void validate() const;
};

// k-nearest-neighbor graph of a cloud on itself, N*k entries (row n lists the
// neighbors of point n, nearest first, the point itself included).
struct NeighborGraph {
  std::size_t k = 0;
  std::vector<std::uint32_t> nbr;
};

NeighborGraph build_graph(const PointCloud& cloud, std::size_t k);

// Linear, group norm, leaky ReLU (slope 0.1).
template <typename T>
struct FcBlock {
  Linear<T> fc;
  GroupNorm<T> norm;

  FcBlock() = default;
  FcBlock(std::size_t in, std::size_t out, ParamInit& init) : fc(in, out, init), norm(out) {}

  Var<T> operator()(Tape<T>& tape, const Var<T>& x) const;

  template <typename F>
  void visit(const std::string& p, F&& f) {
    fc.visit(p, f);
    norm.visit(p + ".norm", f);
  }
  template <typename F>
  void visit(const std::string& p, F&& f) const {
    fc.visit(p, f);
    norm.visit(p + ".norm", f);
  }
};

// FC -> max-pool over graph neighbors -> FC -> FC. The first FC consumes
// concat(F_nbr - F_self, F_nbr), i.e. 2 * d_in channels.
template <typename T>
struct SetConvWeights {
  FcBlock<T> fc1, fc2, fc3;

  SetConvWeights() = default;
  SetConvWeights(std::size_t d_in, std::size_t d_out, ParamInit& init)
      : fc1(2 * d_in, mid_width(d_in, d_out), init),
        fc2(mid_width(d_in, d_out), d_out, init),
        fc3(d_out, d_out, init) {}

  static std::size_t mid_width(std::size_t d_in, std::size_t d_out) {
    return d_in == 3 ? d_out / 2 : (d_in + d_out) / 2;
  }
  std::size_t in() const { return fc1.fc.in() / 2; }
  std::size_t out() const { return fc3.fc.out(); }

  template <typename F>
  void visit(const std::string& p, F&& f) { visit_fields(*this, p, f); }
  template <typename F>
  void visit(const std::string& p, F&& f) const { visit_fields(*this, p, f); }

 private:
  template <typename Self, typename F>
  static void visit_fields(Self& s, const std::string& p, F& f) {
    s.fc1.visit(p + ".fc1", f);
    s.fc2.visit(p + ".fc2", f);
    s.fc3.visit(p + ".fc3", f);
  }
};

template <typename T>
Var<T> set_conv(Tape<T>& tape, const Var<T>& feats, const NeighborGraph& graph,
                const SetConvWeights<T>& w);

// Three stacked SetConvs, 3 -> 32 -> 64 -> 128.
template <typename T>
struct Extractor {
  SetConvWeights<T> conv[3];

  Extractor() = default;
  explicit Extractor(ParamInit& init)
      : conv{SetConvWeights<T>(3, 32, init), SetConvWeights<T>(32, 64, init),
             SetConvWeights<T>(64, 128, init)} {}

  template <typename F>
  void visit(const std::string& p, F&& f) {
    for (int i = 0; i < 3; ++i) conv[i].visit(p + ".setconv" + std::to_string(i), f);
  }
  template <typename F>
  void visit(const std::string& p, F&& f) const {
    for (int i = 0; i < 3; ++i) conv[i].visit(p + ".setconv" + std::to_string(i), f);
  }
};

// Per-point features [N x 128] from coordinates [N x 3].
template <typename T>
Var<T> extract(Tape<T>& tape, const Var<T>& points, const NeighborGraph& graph,
               const Extractor<T>& w);

template <typename T>
struct MotionEncoder {
  Linear<T> corr;   // 64 -> 64
  Linear<T> flow;   // 3 -> 64
  Linear<T> merge;  // 128 -> 64

  MotionEncoder() = default;
  explicit MotionEncoder(ParamInit& init)
      : corr(kCorrelationChannels, 64, init), flow(3, 64, init), merge(128, 64, init) {}

  template <typename F>
  void visit(const std::string& p, F&& f) { visit_fields(*this, p, f); }
  template <typename F>
  void visit(const std::string& p, F&& f) const { visit_fields(*this, p, f); }

 private:
  template <typename Self, typename F>
  static void visit_fields(Self& s, const std::string& p, F& f) {
    s.corr.visit(p + ".corr", f);
    s.flow.visit(p + ".flow", f);
    s.merge.visit(p + ".merge", f);
  }
};

// [N x 64] correlation and [N x 3] flow -> [N x 67] = concat(f'', flow).
template <typename T>
Var<T> motion_encoder(Tape<T>& tape, const Var<T>& corr, const Var<T>& flow,
                      const MotionEncoder<T>& w);

template <typename T>
struct Gru {
  Linear<T> z, r, h;  // (H + X) -> H each

  Gru() = default;
  Gru(std::size_t hidden, std::size_t input, ParamInit& init)
      : z(hidden + input, hidden, init), r(hidden + input, hidden, init), h(hidden + input, hidden, init) {}

  template <typename F>
  void visit(const std::string& p, F&& f) { visit_fields(*this, p, f); }
  template <typename F>
  void visit(const std::string& p, F&& f) const { visit_fields(*this, p, f); }

 private:
  template <typename Self, typename F>
  static void visit_fields(Self& s, const std::string& p, F& f) {
    s.z.visit(p + ".z", f);
    s.r.visit(p + ".r", f);
    s.h.visit(p + ".h", f);
  }
};

// z = sigmoid(Wz [h, x]); r = sigmoid(Wr [h, x]); h^ = tanh(Wh [r * h, x]);
// h' = (1 - z) * h + z * h^.
template <typename T>
Var<T> gru_cell(Tape<T>& tape, const Var<T>& h, const Var<T>& x, const Gru<T>& w);

template <typename T>
struct FlowHead {
  Linear<T> fc;           // H -> 128
  SetConvWeights<T> conv; // H -> 128
  Linear<T> out;          // 256 -> 3

  FlowHead() = default;
  explicit FlowHead(ParamInit& init)
      : fc(kHiddenChannels, 128, init), conv(kHiddenChannels, 128, init), out(256, 3, init) {}

  template <typename F>
  void visit(const std::string& p, F&& f) { visit_fields(*this, p, f); }
  template <typename F>
  void visit(const std::string& p, F&& f) const { visit_fields(*this, p, f); }

 private:
  template <typename Self, typename F>
  static void visit_fields(Self& s, const std::string& p, F& f) {
    s.fc.visit(p + ".fc", f);
    s.conv.visit(p + ".setconv", f);
    s.out.visit(p + ".out", f);
  }
};

// Flow residual [N x 3] from the hidden state.
template <typename T>
Var<T> flow_head(Tape<T>& tape, const Var<T>& h, const NeighborGraph& graph, const FlowHead<T>& w);

template <typename T>
struct Refine {
  SetConvWeights<T> conv[3];
  Linear<T> fc;  // 128 -> 3

  Refine() = default;
  explicit Refine(ParamInit& init)
      : conv{SetConvWeights<T>(3, 32, init), SetConvWeights<T>(32, 64, init),
             SetConvWeights<T>(64, 128, init)},
        fc(128, 3, init) {}

  template <typename F>
  void visit(const std::string& p, F&& f) {
    for (int i = 0; i < 3; ++i) conv[i].visit(p + ".setconv" + std::to_string(i), f);
    fc.visit(p + ".fc", f);
  }
  template <typename F>
  void visit(const std::string& p, F&& f) const {
    for (int i = 0; i < 3; ++i) conv[i].visit(p + ".setconv" + std::to_string(i), f);
    fc.visit(p + ".fc", f);
  }
};

// flow + residual, with the residual computed from the flow on P1's graph.
template <typename T>
Var<T> refine(Tape<T>& tape, const Var<T>& flow, const NeighborGraph& graph, const Refine<T>& w);

template <typename T>
struct ModelParams {
  Extractor<T> feat;
  Extractor<T> context;
  BranchWeights<T> corr;
  MotionEncoder<T> motion;
  Gru<T> gru;
  FlowHead<T> head;
  Refine<T> refine;

  ModelParams() = default;
  ModelParams(const CubeSpec& cube, std::uint64_t seed);

  // Everything except the refinement subtree.
  template <typename F>
  void visit_main(F&& f) { visit_main_fields(*this, f); }
  template <typename F>
  void visit_main(F&& f) const { visit_main_fields(*this, f); }

  template <typename F>
  void visit_refine(F&& f) { refine.visit("refine", f); }
  template <typename F>
  void visit_refine(F&& f) const { refine.visit("refine", f); }

  // Full traversal; the prefix is ignored (names are already rooted).
  template <typename F>
  void visit(const std::string&, F&& f) {
    visit_main(f);
    visit_refine(f);
  }
  template <typename F>
  void visit(const std::string&, F&& f) const {
    visit_main(f);
    visit_refine(f);
  }

 private:
  template <typename Self, typename F>
  static void visit_main_fields(Self& s, F& f) {
    s.feat.visit("feat", f);
    s.context.visit("context", f);
    s.corr.visit("corr", f);
    s.motion.visit("motion", f);
    s.gru.visit("gru", f);
    s.head.visit("head", f);
  }
};

enum class ParamSet { kMain, kRefine, kAll };

// Named float tensors for a checkpoint.
template <typename T>
NamedTensors export_params(const ModelParams<T>& params, ParamSet set);

// Loads every tensor of the requested set; missing names or shape mismatches
// raise FormatError. Tensors of other sets present in the file are ignored.
template <typename T>
void import_params(ModelParams<T>& params, const NamedTensors& tensors, ParamSet set);

// True when the checkpoint carries refinement weights.
bool has_refine_params(const NamedTensors& tensors);

// One scene pair prepared for the update loop. The constructor builds the
// graphs, features, correlation, truncation and context once; step() runs a
// single update on the tape. The tape must outlive the estimator.
template <typename T>
class FlowEstimator {
 public:
  FlowEstimator(Tape<T>& tape, const ModelParams<T>& params, const NetworkConfig& config,
                const PointCloud& p1, const PointCloud& p2);

  // Runs one update and returns f_{t+1}.
  const Var<T>& step();

  const Var<T>& flow() const { return flow_; }
  const Var<T>& last_delta() const { return delta_; }
  const Var<T>& hidden() const { return hidden_; }
  // Q_t = P1 + f_t for the current flow.
  Var<T> translated() const;

  const NeighborGraph& graph1() const { return graph1_; }
  const TruncatedCorrelation& truncation() const { return tc_; }
  const Var<T>& correlation() const { return corr_; }
  const Var<T>& features1() const { return f1_; }
  const Var<T>& features2() const { return f2_; }

 private:
  Tape<T>& tape_;
  const ModelParams<T>& params_;
  NetworkConfig config_;
  PointCloud p1_, p2_;
  Var<T> p1_var_;
  Tensor<T> p2_tensor_;
  NeighborGraph graph1_, graph2_;
  Var<T> f1_, f2_, corr_, scores_, context_, hidden_, flow_, delta_;
  TruncatedCorrelation tc_;
};

// Flows f_1 .. f_T of the update loop.
template <typename T>
std::vector<Var<T>> iterate(Tape<T>& tape, const ModelParams<T>& params, const NetworkConfig& config,
                            const PointCloud& p1, const PointCloud& p2, std::size_t iterations);

// Inference: final flow after the given number of updates, refined when
// requested.
template <typename T>
FlowField predict(const ModelParams<T>& params, const NetworkConfig& config, const PointCloud& p1,
                  const PointCloud& p2, std::size_t iterations, bool apply_refine);

}  // namespace pvcorr

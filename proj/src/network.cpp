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

#include <algorithm>
#include <stdexcept>

namespace pvcorr {

void NetworkConfig::validate() const {
  if (graph_k < 1) throw std::invalid_argument("graph neighbor count must be at least 1");
  corr.validate();
}

NeighborGraph build_graph(const PointCloud& cloud, std::size_t k) {
  if (k > cloud.size()) {
    throw std::invalid_argument("graph neighbor count k=" + std::to_string(k) + " exceeds cloud size " +
                                std::to_string(cloud.size()));
  }
  const NeighborLists lists = knn(SpatialIndex(cloud), cloud, k);
  NeighborGraph g{k, std::vector<std::uint32_t>(cloud.size() * k)};
  for (std::size_t i = 0; i < cloud.size(); ++i)
    for (std::size_t j = 0; j < k; ++j) g.nbr[i * k + j] = lists[i][j].index;
  return g;
}

template <typename T>
Var<T> FcBlock<T>::operator()(Tape<T>& tape, const Var<T>& x) const {
  return ad::leaky_relu(norm(tape, fc(tape, x)), T(0.1));
}

template <typename T>
Var<T> set_conv(Tape<T>& tape, const Var<T>& feats, const NeighborGraph& graph,
                const SetConvWeights<T>& w) {
  const std::size_t d_in = w.in();
  if (feats.rank() != 2 || feats.dim(1) != d_in) {
    throw DimensionError("set_conv: features " + shape_string(feats.shape()) + " for a layer with " +
                         std::to_string(d_in) + " input channels");
  }
  const std::size_t n = feats.dim(0), mid = w.fc1.fc.out();
  // concat(F_nbr - F_self, F_nbr) * [W_diff; W_nbr]
  //   = F_nbr * (W_diff + W_nbr) - F_self * W_diff
  const Var<T> weight = tape.param(w.fc1.fc.w);
  const Var<T> w_diff = ad::slice_rows(weight, 0, d_in);
  const Var<T> w_nbr = ad::slice_rows(weight, d_in, 2 * d_in);
  const Var<T> a = ad::matmul(feats, ad::add(w_diff, w_nbr));
  const Var<T> b = ad::matmul(feats, w_diff);
  Var<T> h = ad::edge_features(a, b, graph.nbr, graph.k, tape.param(w.fc1.fc.b));
  h = ad::leaky_relu(w.fc1.norm(tape, h), T(0.1));
  h = ad::max_pool_neighbors(ad::reshape(h, {n, graph.k, mid}));
  return w.fc3(tape, w.fc2(tape, h));
}

template <typename T>
Var<T> extract(Tape<T>& tape, const Var<T>& points, const NeighborGraph& graph,
               const Extractor<T>& w) {
  Var<T> h = points;
  for (const auto& conv : w.conv) h = set_conv(tape, h, graph, conv);
  return h;
}

template <typename T>
Var<T> motion_encoder(Tape<T>& tape, const Var<T>& corr, const Var<T>& flow,
                      const MotionEncoder<T>& w) {
  const Var<T> c = ad::relu(w.corr(tape, corr));
  const Var<T> f = ad::relu(w.flow(tape, flow));
  const Var<T> merged = ad::relu(w.merge(tape, ad::concat<T>({c, f}, 1)));
  return ad::concat<T>({merged, flow}, 1);
}

template <typename T>
Var<T> gru_cell(Tape<T>& tape, const Var<T>& h, const Var<T>& x, const Gru<T>& w) {
  const Var<T> hx = ad::concat<T>({h, x}, 1);
  const Var<T> z = ad::sigmoid(w.z(tape, hx));
  const Var<T> r = ad::sigmoid(w.r(tape, hx));
  const Var<T> h_hat = ad::tanh(w.h(tape, ad::concat<T>({ad::mul(r, h), x}, 1)));
  return ad::add(ad::mul(ad::affine(z, T(-1), T(1)), h), ad::mul(z, h_hat));
}

template <typename T>
Var<T> flow_head(Tape<T>& tape, const Var<T>& h, const NeighborGraph& graph, const FlowHead<T>& w) {
  const Var<T> local = w.fc(tape, h);
  const Var<T> grouped = set_conv(tape, h, graph, w.conv);
  return w.out(tape, ad::concat<T>({local, grouped}, 1));
}

template <typename T>
Var<T> refine(Tape<T>& tape, const Var<T>& flow, const NeighborGraph& graph, const Refine<T>& w) {
  Var<T> h = flow;
  for (const auto& conv : w.conv) h = set_conv(tape, h, graph, conv);
  return ad::add(flow, w.fc(tape, h));
}

template <typename T>
ModelParams<T>::ModelParams(const CubeSpec& cube, std::uint64_t seed) {
  cube.validate();
  ParamInit init(seed);
  feat = Extractor<T>(init);
  context = Extractor<T>(init);
  corr = BranchWeights<T>(cube, init);
  motion = MotionEncoder<T>(init);
  gru = Gru<T>(kHiddenChannels, kMotionChannels + kContextChannels, init);
  head = FlowHead<T>(init);
  refine = Refine<T>(init);
}

namespace {

template <typename T, typename F>
void visit_set(ModelParams<T>& params, ParamSet set, F&& f) {
  if (set != ParamSet::kRefine) params.visit_main(f);
  if (set != ParamSet::kMain) params.visit_refine(f);
}

template <typename T, typename F>
void visit_set(const ModelParams<T>& params, ParamSet set, F&& f) {
  if (set != ParamSet::kRefine) params.visit_main(f);
  if (set != ParamSet::kMain) params.visit_refine(f);
}

}  // namespace

template <typename T>
NamedTensors export_params(const ModelParams<T>& params, ParamSet set) {
  NamedTensors out;
  visit_set(params, set, [&](const std::string& name, const Tensor<T>& t) {
    out.push_back({name, t.template cast<float>()});
  });
  return out;
}

template <typename T>
void import_params(ModelParams<T>& params, const NamedTensors& tensors, ParamSet set) {
  visit_set(params, set, [&](const std::string& name, Tensor<T>& t) {
    const Tensor<float>* src = find_tensor(tensors, name);
    if (!src) throw FormatError("checkpoint lacks parameter " + name);
    if (src->shape != t.shape) {
      throw FormatError("parameter " + name + " has shape " + shape_string(src->shape) +
                        ", model expects " + shape_string(t.shape));
    }
    t = src->template cast<T>();
  });
}

bool has_refine_params(const NamedTensors& tensors) {
  for (const auto& e : tensors)
    if (e.name.rfind("refine.", 0) == 0) return true;
  return false;
}

template <typename T>
FlowEstimator<T>::FlowEstimator(Tape<T>& tape, const ModelParams<T>& params,
                                const NetworkConfig& config, const PointCloud& p1,
                                const PointCloud& p2)
    : tape_(tape), params_(params), config_(config), p1_(p1), p2_(p2) {
  config_.validate();
  p1_var_ = constant(p1_.to_tensor<T>());
  p2_tensor_ = p2_.to_tensor<T>();
  graph1_ = build_graph(p1_, config_.graph_k);
  graph2_ = build_graph(p2_, config_.graph_k);
  f1_ = extract(tape_, p1_var_, graph1_, params_.feat);
  f2_ = extract(tape_, constant(p2_tensor_), graph2_, params_.feat);
  corr_ = build_correlation(f1_, f2_);
  // A target cloud smaller than M is retained whole.
  tc_ = truncate(corr_.value(), std::min(config_.corr.m, p2_.size()));
  scores_ = retained_scores(corr_, tc_);
  context_ = extract(tape_, p1_var_, graph1_, params_.context);
  hidden_ = config_.hidden_from_context
                ? ad::tanh(context_)
                : constant(Tensor<T>({p1_.size(), kHiddenChannels}));
  flow_ = constant(Tensor<T>({p1_.size(), 3}));
}

template <typename T>
Var<T> FlowEstimator<T>::translated() const {
  return ad::add(p1_var_, flow_);
}

template <typename T>
const Var<T>& FlowEstimator<T>::step() {
  if (config_.detach_flow && flow_.requires_grad()) flow_ = constant(flow_.value());
  const Var<T> corr = lookup_correlation(tape_, translated(), p2_, p2_tensor_, scores_, tc_,
                                         config_.corr, params_.corr);
  const Var<T> motion = motion_encoder(tape_, corr, flow_, params_.motion);
  hidden_ = gru_cell(tape_, hidden_, ad::concat<T>({motion, context_}, 1), params_.gru);
  delta_ = flow_head(tape_, hidden_, graph1_, params_.head);
  flow_ = ad::add(flow_, delta_);
  return flow_;
}

template <typename T>
std::vector<Var<T>> iterate(Tape<T>& tape, const ModelParams<T>& params, const NetworkConfig& config,
                            const PointCloud& p1, const PointCloud& p2, std::size_t iterations) {
  if (iterations < 1) throw std::invalid_argument("iterate: need at least one update");
  FlowEstimator<T> est(tape, params, config, p1, p2);
  std::vector<Var<T>> flows;
  for (std::size_t t = 0; t < iterations; ++t) flows.push_back(est.step());
  return flows;
}

template <typename T>
FlowField predict(const ModelParams<T>& params, const NetworkConfig& config, const PointCloud& p1,
                  const PointCloud& p2, std::size_t iterations, bool apply_refine) {
  if (iterations < 1) throw std::invalid_argument("predict: need at least one update");
  Tape<T> tape(GradMode::kInference);
  FlowEstimator<T> est(tape, params, config, p1, p2);
  for (std::size_t t = 0; t < iterations; ++t) est.step();
  Var<T> flow = est.flow();
  if (apply_refine) flow = refine(tape, flow, est.graph1(), params.refine);
  return FlowField::from_tensor(flow.value());
}

#define PVCORR_INSTANTIATE_NETWORK(T)                                                             template struct FcBlock<T>;                                                                    template Var<T> set_conv(Tape<T>&, const Var<T>&, const NeighborGraph&,                                                 const SetConvWeights<T>&);                                            template Var<T> extract(Tape<T>&, const Var<T>&, const NeighborGraph&, const Extractor<T>&);   template Var<T> motion_encoder(Tape<T>&, const Var<T>&, const Var<T>&,                                                        const MotionEncoder<T>&);                                       template Var<T> gru_cell(Tape<T>&, const Var<T>&, const Var<T>&, const Gru<T>&);               template Var<T> flow_head(Tape<T>&, const Var<T>&, const NeighborGraph&, const FlowHead<T>&);   template Var<T> refine(Tape<T>&, const Var<T>&, const NeighborGraph&, const Refine<T>&);       template struct ModelParams<T>;                                                                template NamedTensors export_params(const ModelParams<T>&, ParamSet);                          template void import_params(ModelParams<T>&, const NamedTensors&, ParamSet);                   template class FlowEstimator<T>;                                                               template std::vector<Var<T>> iterate(Tape<T>&, const ModelParams<T>&, const NetworkConfig&,                                         const PointCloud&, const PointCloud&, std::size_t);       template FlowField predict(const ModelParams<T>&, const NetworkConfig&, const PointCloud&,                                const PointCloud&, std::size_t, bool);

PVCORR_INSTANTIATE_NETWORK(float)
PVCORR_INSTANTIATE_NETWORK(double)

}  // namespace pvcorr

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

#include "pvcorr/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <stdexcept>

#include "json.hpp"
#include "pvcorr/metrics.hpp"

namespace pvcorr {

void SceneSample::validate() const {
  if (p1.size() != gt_flow.size()) {
    throw DimensionError("scene has " + std::to_string(p1.size()) + " source points but " +
                         std::to_string(gt_flow.size()) + " flow vectors");
  }
}

double iteration_weight(std::size_t t, std::size_t iterations, double gamma, LossWeighting weighting) {
  if (t < 1 || t > iterations) throw std::out_of_range("iteration index outside 1..T");
  const double remaining = double(iterations - t);
  return weighting == LossWeighting::kExponential ? std::pow(gamma, remaining)
                                                  : gamma * (remaining - 1);
}

template <typename T>
Var<T> loss_iter(const std::vector<Var<T>>& flows, const Tensor<T>& gt, double gamma,
                 LossWeighting weighting) {
  if (flows.empty()) throw std::invalid_argument("loss_iter: no iterates");
  Var<T> total;
  for (std::size_t t = 1; t <= flows.size(); ++t) {
    const T w = T(iteration_weight(t, flows.size(), gamma, weighting));
    const Var<T> term = ad::affine(ad::mean_row_l1(flows[t - 1], gt), w, T{0});
    total = total.defined() ? ad::add(total, term) : term;
  }
  return total;
}

template <typename T>
Var<T> loss_refine(const Var<T>& refined, const Tensor<T>& gt) {
  return ad::mean_row_l1(refined, gt);
}

template <typename T>
void Adam::step(const std::vector<Tensor<T>*>& params, const std::vector<Tensor<T>>& grads) {
  if (params.size() != grads.size()) throw DimensionError("adam: one gradient per parameter required");
  if (m_.empty()) {
    for (const auto* p : params) {
      m_.emplace_back(p->size(), 0.0);
      v_.emplace_back(p->size(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw DimensionError("adam: parameter list changed between steps");
  ++steps_;
  const double c1 = 1 - std::pow(config_.beta1, double(steps_));
  const double c2 = 1 - std::pow(config_.beta2, double(steps_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i];
    if (grads[i].shape != p.shape || m_[i].size() != p.size()) {
      throw DimensionError("adam: gradient shape " + shape_string(grads[i].shape) +
                           " does not match parameter " + shape_string(p.shape));
    }
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double g = double(grads[i].data[j]);
      m_[i][j] = config_.beta1 * m_[i][j] + (1 - config_.beta1) * g;
      v_[i][j] = config_.beta2 * v_[i][j] + (1 - config_.beta2) * g * g;
      const double update = config_.lr * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + config_.eps);
      p.data[j] = T(double(p.data[j]) - update);
    }
  }
}

template void Adam::step(const std::vector<Tensor<float>*>&, const std::vector<Tensor<float>>&);
template void Adam::step(const std::vector<Tensor<double>*>&, const std::vector<Tensor<double>>&);

void TrainConfig::validate() const {
  if (!(gamma > 0 && gamma < 1)) throw std::invalid_argument("gamma must lie in (0, 1)");
  if (t_train < 1 || t_eval < 1) throw std::invalid_argument("iteration counts must be positive");
  if (epochs_main < 1 || epochs_refine < 1) throw std::invalid_argument("epoch counts must be positive");
  if (batch_size < 1) throw std::invalid_argument("batch size must be positive");
  if (!(lr >= 0) || !std::isfinite(lr)) throw std::invalid_argument("learning rate must be finite and >= 0");
  net.validate();
}

std::string to_json_line(const EpochRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["split"] = r.split;
  j["loss"] = r.loss;
  j["epe"] = r.epe;
  return j.dump();
}

ModelParams<float> initial_params(const TrainConfig& config) {
  return ModelParams<float>(config.net.corr.cube, config.seed);
}

namespace {

void check_dataset(const std::vector<SceneSample>& data) {
  if (data.empty()) throw std::invalid_argument("training needs at least one scene");
  for (const auto& s : data) s.validate();
}

// Runs fn(batch of scene indices) over a seeded shuffle of the dataset.
template <typename F>
void for_each_batch(std::size_t n, std::size_t batch, std::mt19937_64& rng, F&& fn) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t b = 0; b < n; b += batch)
    fn(std::vector<std::size_t>(order.begin() + std::ptrdiff_t(b),
                                order.begin() + std::ptrdiff_t(std::min(n, b + batch))));
}

std::vector<Tensor<float>> zeros_like(const std::vector<Tensor<float>*>& params) {
  std::vector<Tensor<float>> out;
  for (const auto* p : params) out.emplace_back(p->shape);
  return out;
}

void accumulate(std::vector<Tensor<float>>& grads, const std::vector<Tensor<float>*>& params,
                const Tape<float>& tape, float scale) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor<float> g = tape.param_grad(*params[i]);
    for (std::size_t j = 0; j < g.size(); ++j) grads[i].data[j] += scale * g.data[j];
  }
}

}  // namespace

ModelParams<float> train_main(const std::vector<SceneSample>& data, const TrainConfig& config,
                              ModelParams<float> params, const TrainLog& log,
                              const std::vector<SceneSample>* validation) {
  config.validate();
  check_dataset(data);
  std::vector<Tensor<float>*> trainable;
  params.visit_main([&](const std::string&, Tensor<float>& t) { trainable.push_back(&t); });
  std::vector<Tensor<float>> gts;
  for (const auto& s : data) gts.push_back(s.gt_flow.to_tensor<float>());

  Adam adam(AdamConfig{config.lr});
  std::mt19937_64 rng(config.seed);
  for (std::size_t epoch = 1; epoch <= config.epochs_main; ++epoch) {
    double loss_sum = 0, epe_sum = 0;
    for_each_batch(data.size(), config.batch_size, rng, [&](const std::vector<std::size_t>& batch) {
      auto grads = zeros_like(trainable);
      for (std::size_t i : batch) {
        Tape<float> tape;
        const auto flows = iterate(tape, params, config.net, data[i].p1, data[i].p2, config.t_train);
        const Var<float> loss = loss_iter(flows, gts[i], config.gamma, config.weighting);
        tape.backward(loss);
        accumulate(grads, trainable, tape, 1.0f / float(batch.size()));
        loss_sum += loss.item();
        epe_sum += evaluate_flow(FlowField::from_tensor(flows.back().value()), data[i].gt_flow).epe;
      }
      adam.step(trainable, grads);
    });
    if (log) log({epoch, "train", loss_sum / double(data.size()), epe_sum / double(data.size())});
    if (validation && !validation->empty() && log) {
      double vl = 0, ve = 0;
      for (const auto& s : *validation) {
        Tape<float> tape(GradMode::kInference);
        const auto flows = iterate(tape, params, config.net, s.p1, s.p2, config.t_eval);
        vl += loss_iter(flows, s.gt_flow.to_tensor<float>(), config.gamma, config.weighting).item();
        ve += evaluate_flow(FlowField::from_tensor(flows.back().value()), s.gt_flow).epe;
      }
      log({epoch, "val", vl / double(validation->size()), ve / double(validation->size())});
    }
  }
  return params;
}

ModelParams<float> train_refine(const std::vector<SceneSample>& data, const TrainConfig& config,
                                ModelParams<float> params, const TrainLog& log) {
  config.validate();
  check_dataset(data);
  std::vector<Tensor<float>*> trainable;
  params.visit_refine([&](const std::string&, Tensor<float>& t) { trainable.push_back(&t); });
  std::vector<Tensor<float>> frozen, gts;
  std::vector<NeighborGraph> graphs;
  for (const auto& s : data) {
    frozen.push_back(predict(params, config.net, s.p1, s.p2, config.t_eval, false).to_tensor<float>());
    gts.push_back(s.gt_flow.to_tensor<float>());
    graphs.push_back(build_graph(s.p1, config.net.graph_k));
  }

  Adam adam(AdamConfig{config.lr});
  std::mt19937_64 rng(config.seed + 1);
  for (std::size_t epoch = 1; epoch <= config.epochs_refine; ++epoch) {
    double loss_sum = 0, epe_sum = 0;
    for_each_batch(data.size(), config.batch_size, rng, [&](const std::vector<std::size_t>& batch) {
      auto grads = zeros_like(trainable);
      for (std::size_t i : batch) {
        Tape<float> tape;
        const Var<float> out = refine(tape, constant(frozen[i]), graphs[i], params.refine);
        const Var<float> loss = loss_refine(out, gts[i]);
        tape.backward(loss);
        accumulate(grads, trainable, tape, 1.0f / float(batch.size()));
        loss_sum += loss.item();
        epe_sum += evaluate_flow(FlowField::from_tensor(out.value()), data[i].gt_flow).epe;
      }
      adam.step(trainable, grads);
    });
    if (log) log({epoch, "train", loss_sum / double(data.size()), epe_sum / double(data.size())});
  }
  return params;
}

namespace {

using Mat3 = std::array<std::array<double, 3>, 3>;

// Rotation by angle about a unit axis (Rodrigues).
Mat3 rotation(const Vec3d& axis, double angle) {
  const double c = std::cos(angle), s = std::sin(angle), t = 1 - c;
  const double x = axis[0], y = axis[1], z = axis[2];
  return {{{t * x * x + c, t * x * y - s * z, t * x * z + s * y},
           {t * x * y + s * z, t * y * y + c, t * y * z - s * x},
           {t * x * z - s * y, t * y * z + s * x, t * z * z + c}}};
}

Vec3d random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0, 1);
  for (;;) {
    const Vec3d v{n(rng), n(rng), n(rng)};
    const double len = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    if (len > 1e-9) return {v[0] / len, v[1] / len, v[2] / len};
  }
}

}  // namespace

SceneSample gen_synthetic(const SyntheticOptions& o) {
  if (o.clusters < 1 || o.clusters > o.n_points) throw std::invalid_argument("invalid cluster count");
  if (!(o.motion_scale >= 0) || !(o.noise_sigma >= 0) || !(o.max_rotation_deg >= 0)) {
    throw std::invalid_argument("motion scale, noise and rotation must be non-negative");
  }
  std::mt19937_64 rng(o.seed);
  std::uniform_real_distribution<double> unit(-1, 1), half_size(0.25, 0.5), u01(0, 1);
  std::vector<Vec3> p1, flow;
  for (std::size_t c = 0; c < o.clusters; ++c) {
    const std::size_t count = o.n_points / o.clusters + (c < o.n_points % o.clusters ? 1 : 0);
    const Vec3d center{unit(rng), unit(rng), unit(rng)};
    const Vec3d half{half_size(rng), half_size(rng), half_size(rng)};
    const double angle = unit(rng) * o.max_rotation_deg * std::numbers::pi / 180.0;
    const Mat3 r = rotation(random_unit(rng), angle);
    const Vec3d dir = random_unit(rng);
    const double mag = u01(rng) * o.motion_scale;
    const Vec3d t{dir[0] * mag, dir[1] * mag, dir[2] * mag};
    for (std::size_t i = 0; i < count; ++i) {
      Vec3 p;
      for (int a = 0; a < 3; ++a) p[a] = float(center[a] + half[a] * unit(rng));
      const Vec3d d{p[0] - center[0], p[1] - center[1], p[2] - center[2]};
      Vec3 f;
      for (int a = 0; a < 3; ++a) f[a] = float(r[a][0] * d[0] + r[a][1] * d[1] + r[a][2] * d[2] - d[a] + t[a]);
      p1.push_back(p);
      flow.push_back(f);
    }
  }
  PointCloud src(p1);
  FlowField gt(flow);
  std::vector<Vec3> moved = translate(src, gt).points();
  if (o.noise_sigma > 0) {
    std::normal_distribution<double> jitter(0, o.noise_sigma);
    for (auto& p : moved)
      for (auto& v : p) v = float(v + jitter(rng));
  }
  std::shuffle(moved.begin(), moved.end(), rng);
  return {std::move(src), PointCloud(std::move(moved)), std::move(gt)};
}

std::vector<SceneSample> gen_dataset(std::size_t scenes, SyntheticOptions options) {
  std::vector<SceneSample> out;
  const std::uint64_t base = options.seed;
  for (std::size_t i = 0; i < scenes; ++i) {
    options.seed = base + i;
    out.push_back(gen_synthetic(options));
  }
  return out;
}

template Var<float> loss_iter(const std::vector<Var<float>>&, const Tensor<float>&, double, LossWeighting);
template Var<double> loss_iter(const std::vector<Var<double>>&, const Tensor<double>&, double, LossWeighting);
template Var<float> loss_refine(const Var<float>&, const Tensor<float>&);
template Var<double> loss_refine(const Var<double>&, const Tensor<double>&);

}  // namespace pvcorr

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

// Losses, the Adam optimizer, the two training stages and a synthetic scene
// generator.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pvcorr/autodiff.hpp"
#include "pvcorr/geometry.hpp"
#include "pvcorr/network.hpp"

namespace pvcorr {

struct SceneSample {
  PointCloud p1;
  PointCloud p2;
  FlowField gt_flow;

  // Throws DimensionError unless |p1| == |gt_flow|.
  void validate() const;
};

enum class LossWeighting {
  kExponential,    // w(t) = gamma^(T - t)
  kLinearLiteral,  // w(t) = gamma * (T - t - 1)
};

// Weight of iterate t in 1..T.
double iteration_weight(std::size_t t, std::size_t iterations, double gamma, LossWeighting weighting);

// sum_t w(t) * L1(f_t - gt), the L1 term summed over coordinates and averaged
// over points.
template <typename T>
Var<T> loss_iter(const std::vector<Var<T>>& flows, const Tensor<T>& gt, double gamma,
                 LossWeighting weighting = LossWeighting::kExponential);

template <typename T>
Var<T> loss_refine(const Var<T>& refined, const Tensor<T>& gt);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Moments are kept in double.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  template <typename T>
  void step(const std::vector<Tensor<T>*>& params, const std::vector<Tensor<T>>& grads);

  std::size_t steps() const { return steps_; }

 private:
  AdamConfig config_;
  std::size_t steps_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct TrainConfig {
  std::size_t t_train = 8;
  std::size_t t_eval = 32;
  double gamma = 0.8;
  LossWeighting weighting = LossWeighting::kExponential;
  double lr = 1e-3;
  std::size_t epochs_main = 20;
  std::size_t epochs_refine = 10;
  std::size_t batch_size = 1;  // scenes per optimizer step
  NetworkConfig net;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch;
  std::string split;  // "train" or "val"
  double loss;
  double epe;
};

std::string to_json_line(const EpochRecord& r);

using TrainLog = std::function<void(const EpochRecord&)>;

// Fresh parameters for a configuration.
ModelParams<float> initial_params(const TrainConfig& config);

// Optimizes everything except the refinement subtree with the iteration loss
// at t_train updates. Scenes are visited in a seeded shuffled order each
// epoch. With a validation set, its loss and EPE at t_eval are logged too.
ModelParams<float> train_main(const std::vector<SceneSample>& data, const TrainConfig& config,
                              ModelParams<float> params, const TrainLog& log = {},
                              const std::vector<SceneSample>* validation = nullptr);

// Freezes everything but the refinement subtree, computes each scene's flow at
// t_eval updates once, then optimizes the refinement residual.
ModelParams<float> train_refine(const std::vector<SceneSample>& data, const TrainConfig& config,
                                ModelParams<float> params, const TrainLog& log = {});

struct SyntheticOptions {
  std::size_t n_points = 256;
  double motion_scale = 0.3;  // max translation, meters
  double noise_sigma = 0.0;   // jitter added to the second frame, meters
  std::uint64_t seed = 0;
  std::size_t clusters = 3;
  double max_rotation_deg = 15;
};

// A few rigid clusters, each moved by its own rotation about the cluster
// center and translation. p2 = p1 + flow + jitter, randomly permuted.
SceneSample gen_synthetic(const SyntheticOptions& options);

// Scenes seeded seed, seed + 1, ...
std::vector<SceneSample> gen_dataset(std::size_t scenes, SyntheticOptions options);

}  // namespace pvcorr

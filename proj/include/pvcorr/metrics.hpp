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

// Scene-flow evaluation metrics. All arithmetic is in double.

#pragma once

#include <span>
#include <string>
#include <vector>

#include "pvcorr/geometry.hpp"

namespace pvcorr {

struct FlowMetrics {
  double epe = 0;         // mean end-point error, meters
  double acc_strict = 0;  // err < 0.05 m or relative < 5%
  double acc_relax = 0;   // err < 0.1 m or relative < 10%
  double outliers = 0;    // err > 0.3 m or relative > 10%
  std::size_t points = 0;
};

// Relative error is err / |gt|, or +inf where gt is the zero vector.
FlowMetrics evaluate_flow(const FlowField& estimate, const FlowField& truth);

// Weighted mean of per-scene metrics; weights are usually point counts.
FlowMetrics aggregate(std::span<const FlowMetrics> scenes, std::span<const double> weights);

// Point-count weighted.
FlowMetrics aggregate(std::span<const FlowMetrics> scenes);

// {"epe":..,"acc_strict":..,"acc_relax":..,"outliers":..}
std::string to_json(const FlowMetrics& m);

}  // namespace pvcorr

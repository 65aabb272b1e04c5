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

#include "pvcorr/metrics.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "json.hpp"

namespace pvcorr {

FlowMetrics evaluate_flow(const FlowField& estimate, const FlowField& truth) {
  if (estimate.size() != truth.size()) {
    throw DimensionError("evaluate_flow: " + std::to_string(estimate.size()) + " estimates for " +
                         std::to_string(truth.size()) + " ground-truth vectors");
  }
  if (truth.size() == 0) throw std::invalid_argument("evaluate_flow: empty flow");
  FlowMetrics m;
  m.points = truth.size();
  for (std::size_t i = 0; i < truth.size(); ++i) {
    double err2 = 0, norm2 = 0;
    for (int c = 0; c < 3; ++c) {
      const double d = double(estimate[i][c]) - double(truth[i][c]);
      err2 += d * d;
      norm2 += double(truth[i][c]) * double(truth[i][c]);
    }
    const double err = std::sqrt(err2);
    const double norm = std::sqrt(norm2);
    const double rel = norm > 0 ? err / norm : std::numeric_limits<double>::infinity();
    m.epe += err;
    m.acc_strict += (err < 0.05 || rel < 0.05) ? 1 : 0;
    m.acc_relax += (err < 0.1 || rel < 0.1) ? 1 : 0;
    m.outliers += (err > 0.3 || rel > 0.1) ? 1 : 0;
  }
  const double n = double(truth.size());
  m.epe /= n;
  m.acc_strict /= n;
  m.acc_relax /= n;
  m.outliers /= n;
  return m;
}

FlowMetrics aggregate(std::span<const FlowMetrics> scenes, std::span<const double> weights) {
  if (scenes.empty()) throw std::invalid_argument("aggregate: no scenes");
  if (weights.size() != scenes.size()) throw DimensionError("aggregate: one weight per scene required");
  double total = 0;
  FlowMetrics out;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    if (!(weights[i] >= 0)) throw std::invalid_argument("aggregate: negative weight");
    total += weights[i];
    out.epe += weights[i] * scenes[i].epe;
    out.acc_strict += weights[i] * scenes[i].acc_strict;
    out.acc_relax += weights[i] * scenes[i].acc_relax;
    out.outliers += weights[i] * scenes[i].outliers;
    out.points += scenes[i].points;
  }
  if (!(total > 0)) throw std::invalid_argument("aggregate: weights sum to zero");
  out.epe /= total;
  out.acc_strict /= total;
  out.acc_relax /= total;
  out.outliers /= total;
  return out;
}

FlowMetrics aggregate(std::span<const FlowMetrics> scenes) {
  std::vector<double> w;
  for (const auto& s : scenes) w.push_back(double(s.points));
  return aggregate(scenes, w);
}

std::string to_json(const FlowMetrics& m) {
  nlohmann::ordered_json j;
  j["epe"] = m.epe;
  j["acc_strict"] = m.acc_strict;
  j["acc_relax"] = m.acc_relax;
  j["outliers"] = m.outliers;
  return j.dump();
}

}  // namespace pvcorr

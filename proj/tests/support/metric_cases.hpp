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

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "pvcorr/geometry.hpp"

namespace pvcorr::testing {

// Single-point cases sitting on or next to each metric threshold. Absolute
// thresholds are not representable as float differences, so those cases use
// the neighboring floats on either side; relative thresholds are hit exactly
// (0.5 / 10 and 1 / 10 round to the double literals 0.05 and 0.1).
struct ThresholdCase {
  std::string label;
  Vec3 estimate;
  Vec3 truth;
  double strict, relax, outlier;
};

inline std::vector<ThresholdCase> threshold_cases() {
  const float below_005 = std::nextafter(0.05f, 0.0f);
  const float below_01 = std::nextafter(0.1f, 0.0f);
  const float above_43 = 4.3f;  // 4.3f - 4 > 0.3
  const float below_43 = std::nextafter(4.3f, 0.0f);
  const float below_105 = std::nextafter(10.5f, 0.0f);
  return {
      {"abs just under 5cm", {below_005, 0, 0}, {0, 0, 0}, 1, 1, 1},
      {"abs just over 5cm", {0.05f, 0, 0}, {0, 0, 0}, 0, 1, 1},
      {"abs just under 10cm", {below_01, 0, 0}, {0, 0, 0}, 0, 1, 1},
      {"abs just over 10cm", {0.1f, 0, 0}, {0, 0, 0}, 0, 0, 1},
      {"abs just over 30cm, rel 7.5%", {above_43, 0, 0}, {4, 0, 0}, 0, 1, 1},
      {"abs just under 30cm, rel 7.5%", {below_43, 0, 0}, {4, 0, 0}, 0, 1, 0},
      {"rel exactly 5%", {10.5f, 0, 0}, {10, 0, 0}, 0, 1, 1},
      {"rel just under 5%", {below_105, 0, 0}, {10, 0, 0}, 1, 1, 1},
      {"rel exactly 10%", {11, 0, 0}, {10, 0, 0}, 0, 0, 1},
      {"rel 25%, abs 25cm", {1.25f, 0, 0}, {1, 0, 0}, 0, 0, 1},
      {"exact", {1, 2, 3}, {1, 2, 3}, 1, 1, 0},
  };
}

}  // namespace pvcorr::testing

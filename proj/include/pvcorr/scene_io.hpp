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

// On-disk scene pairs: a directory holding meta.json {"n1", "n2", "version"}
// and pc1.bin, pc2.bin, flow.bin, each a little-endian float32 N x 3 array.

#pragma once

#include <filesystem>
#include <stdexcept>
#include <vector>

#include "pvcorr/training.hpp"

namespace pvcorr {

inline constexpr int kSceneVersion = 1;

// Filesystem failure or malformed scene content; the message names the path.
class SceneIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_scene(const std::filesystem::path& dir, const SceneSample& scene);
SceneSample read_scene(const std::filesystem::path& dir);

// Subdirectories of root that contain a meta.json, sorted by name.
std::vector<std::filesystem::path> list_scenes(const std::filesystem::path& root);

// Every scene under root, in list_scenes order. Empty roots are an error.
std::vector<SceneSample> read_dataset(const std::filesystem::path& root);

}  // namespace pvcorr

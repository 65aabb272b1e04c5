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

// Subcommands of the pvcorr tool: gen, train, eval and corr-dump.

#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace pvcorr {

// Runs one invocation. args excludes the program name. Returns the process
// exit code; failures print a single diagnostic line to err.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Directory name of scene i under a generated root.
std::string scene_dir_name(std::size_t index);

// Path of the resolved-configuration file written next to a checkpoint.
std::filesystem::path config_sidecar(const std::filesystem::path& checkpoint);

}  // namespace pvcorr

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

// Run configuration: every TrainConfig field plus paths, as a flat key-value
// JSON object. Values are resolved as flag > config file > PVCORR_SEED (seed
// only) > built-in default.

#pragma once

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "pvcorr/training.hpp"

namespace pvcorr {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  TrainConfig train;
  std::string data;  // scene directory root
  std::string log;   // JSON-lines training log; empty means derived from the checkpoint path

  void validate() const;
};

struct ConfigKey {
  std::string name;  // JSON key; the flag is --name with '_' replaced by '-'
  std::string help;
};

const std::vector<ConfigKey>& config_keys();

std::string flag_name(const std::string& key);

nlohmann::ordered_json to_json(const RunConfig& config);

// Applies the keys present in obj on top of base. Unknown keys, wrong types
// and bad enum names throw ConfigError.
RunConfig apply_json(RunConfig base, const nlohmann::json& obj);

// Applies one key from its textual flag value.
void apply_string(RunConfig& config, const std::string& key, const std::string& value);

RunConfig load_config_file(const std::string& path, RunConfig base = {});

// Full resolution. file may be empty; env_seed is the raw PVCORR_SEED value;
// flags maps keys to flag values. The result is validated.
RunConfig resolve_config(const std::string& file, const std::optional<std::string>& env_seed,
                         const std::map<std::string, std::string>& flags);

}  // namespace pvcorr

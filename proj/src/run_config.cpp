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

#include "pvcorr/run_config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>

namespace pvcorr {
namespace {

using nlohmann::json;

struct KeyDef {
  ConfigKey key;
  std::function<json(const RunConfig&)> get;
  std::function<void(RunConfig&, const json&)> set;
  // Converts a flag string into the JSON value set() expects.
  std::function<json(const std::string&)> parse;
};

template <typename E>
struct EnumName {
  E value;
  const char* name;
};

const std::vector<EnumName<LossWeighting>> kWeightings = {
    {LossWeighting::kExponential, "exponential"}, {LossWeighting::kLinearLiteral, "linear"}};
const std::vector<EnumName<CorrelationMode>> kModes = {{CorrelationMode::kCombined, "combined"},
                                                       {CorrelationMode::kPointOnly, "point"},
                                                       {CorrelationMode::kVoxelOnly, "voxel"}};
const std::vector<EnumName<bool>> kHiddenInits = {{true, "context"}, {false, "zeros"}};

template <typename E>
std::string enum_to_name(const std::vector<EnumName<E>>& table, E v) {
  for (const auto& e : table)
    if (e.value == v) return e.name;
  throw std::logic_error("unnamed enum value");
}

template <typename E>
E enum_from_name(const std::vector<EnumName<E>>& table, const std::string& key, const json& v) {
  if (!v.is_string()) throw ConfigError(key + ": expected a string");
  const auto name = v.get<std::string>();
  std::string valid;
  for (const auto& e : table) {
    if (name == e.name) return e.value;
    valid += (valid.empty() ? "" : "|") + std::string(e.name);
  }
  throw ConfigError(key + ": unknown value \"" + name + "\" (expected " + valid + ")");
}

json parse_unsigned(const std::string& key, const std::string& s) {
  std::uint64_t v = 0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size() || s.empty()) {
    throw ConfigError(key + ": expected a non-negative integer, got \"" + s + "\"");
  }
  return v;
}

json parse_real(const std::string& key, const std::string& s) {
  std::istringstream in(s);
  in.imbue(std::locale::classic());
  double v = 0;
  in >> v;
  if (s.empty() || in.fail() || !in.eof()) throw ConfigError(key + ": expected a number, got \"" + s + "\"");
  return v;
}

json parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError(key + ": expected true or false, got \"" + s + "\"");
}

// Field accessors are generic lambdas returning a reference, so one lambda
// serves both the getter and the setter.
template <typename Field>
KeyDef count_key(std::string name, std::string help, Field field) {
  return {{name, std::move(help)},
          [field](const RunConfig& c) { return json(field(c)); },
          [field, name](RunConfig& c, const json& v) {
            using V = std::remove_reference_t<decltype(field(c))>;
            if (!v.is_number_unsigned() || v.get<std::uint64_t>() > std::uint64_t(std::numeric_limits<V>::max())) {
              throw ConfigError(name + ": expected a non-negative integer");
            }
            field(c) = V(v.get<std::uint64_t>());
          },
          [name](const std::string& s) { return parse_unsigned(name, s); }};
}

template <typename Field>
KeyDef real_key(std::string name, std::string help, Field field) {
  return {{name, std::move(help)},
          [field](const RunConfig& c) { return json(field(c)); },
          [field, name](RunConfig& c, const json& v) {
            if (!v.is_number()) throw ConfigError(name + ": expected a number");
            field(c) = v.get<double>();
          },
          [name](const std::string& s) { return parse_real(name, s); }};
}

template <typename Field>
KeyDef bool_key(std::string name, std::string help, Field field) {
  return {{name, std::move(help)},
          [field](const RunConfig& c) { return json(field(c)); },
          [field, name](RunConfig& c, const json& v) {
            if (!v.is_boolean()) throw ConfigError(name + ": expected true or false");
            field(c) = v.get<bool>();
          },
          [name](const std::string& s) { return parse_bool(name, s); }};
}

template <typename Field>
KeyDef text_key(std::string name, std::string help, Field field) {
  return {{name, std::move(help)},
          [field](const RunConfig& c) { return json(field(c)); },
          [field, name](RunConfig& c, const json& v) {
            if (!v.is_string()) throw ConfigError(name + ": expected a string");
            field(c) = v.get<std::string>();
          },
          [](const std::string& s) { return json(s); }};
}

template <typename E, typename Field>
KeyDef enum_key(std::string name, std::string help, const std::vector<EnumName<E>>& table, Field field) {
  for (std::size_t i = 0; i < table.size(); ++i) help += (i ? "|" : " (") + std::string(table[i].name);
  help += ")";
  return {{name, std::move(help)},
          [field, &table](const RunConfig& c) { return json(enum_to_name(table, E(field(c)))); },
          [field, name, &table](RunConfig& c, const json& v) { field(c) = enum_from_name(table, name, v); },
          [](const std::string& s) { return json(s); }};
}

const std::vector<KeyDef>& key_defs() {
  static const std::vector<KeyDef> defs = [] {
    std::vector<KeyDef> d;
    d.push_back(count_key("t_train", "flow updates per scene during training",
                          [](auto& c) -> auto& { return c.train.t_train; }));
    d.push_back(count_key("t_eval", "flow updates for evaluation and refinement inputs",
                          [](auto& c) -> auto& { return c.train.t_eval; }));
    d.push_back(real_key("gamma", "iteration loss decay, in (0, 1)", [](auto& c) -> auto& { return c.train.gamma; }));
    d.push_back(enum_key("loss_weighting", "iteration loss weights", kWeightings,
                         [](auto& c) -> auto& { return c.train.weighting; }));
    d.push_back(real_key("lr", "Adam learning rate", [](auto& c) -> auto& { return c.train.lr; }));
    d.push_back(count_key("epochs_main", "main stage epochs", [](auto& c) -> auto& { return c.train.epochs_main; }));
    d.push_back(count_key("epochs_refine", "refinement stage epochs",
                          [](auto& c) -> auto& { return c.train.epochs_refine; }));
    d.push_back(count_key("batch_size", "scenes per optimizer step",
                          [](auto& c) -> auto& { return c.train.batch_size; }));
    d.push_back(count_key("m", "retained correlation targets per point",
                          [](auto& c) -> auto& { return c.train.net.corr.m; }));
    d.push_back(count_key("k", "point branch neighbors", [](auto& c) -> auto& { return c.train.net.corr.k; }));
    d.push_back(count_key("cube_resolution", "sub-cubes per cube edge (odd)",
                          [](auto& c) -> auto& { return c.train.net.corr.cube.resolution; }));
    d.push_back(real_key("cube_side", "finest sub-cube side length, meters",
                         [](auto& c) -> auto& { return c.train.net.corr.cube.side; }));
    d.push_back(count_key("cube_levels", "cube pyramid levels",
                          [](auto& c) -> auto& { return c.train.net.corr.cube.levels; }));
    d.push_back(count_key("graph_k", "set convolution neighbors, self included",
                          [](auto& c) -> auto& { return c.train.net.graph_k; }));
    d.push_back(enum_key("correlation", "correlation branches", kModes,
                         [](auto& c) -> auto& { return c.train.net.corr.mode; }));
    d.push_back(enum_key("hidden_init", "initial hidden state", kHiddenInits,
                         [](auto& c) -> auto& { return c.train.net.hidden_from_context; }));
    d.push_back(bool_key("detach_flow", "treat the previous flow as a constant in each update",
                         [](auto& c) -> auto& { return c.train.net.detach_flow; }));
    d.push_back(count_key("seed", "random seed", [](auto& c) -> auto& { return c.train.seed; }));
    d.push_back(text_key("data", "scene directory", [](auto& c) -> auto& { return c.data; }));
    d.push_back(text_key("log", "training log path", [](auto& c) -> auto& { return c.log; }));
    return d;
  }();
  return defs;
}

const KeyDef& find_key(const std::string& name) {
  for (const auto& d : key_defs())
    if (d.key.name == name) return d;
  throw ConfigError("unknown config key \"" + name + "\"");
}

}  // namespace

void RunConfig::validate() const {
  try {
    train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const auto& d : key_defs()) k.push_back(d.key);
    return k;
  }();
  return keys;
}

std::string flag_name(const std::string& key) {
  std::string f = key;
  std::replace(f.begin(), f.end(), '_', '-');
  return "--" + f;
}

nlohmann::ordered_json to_json(const RunConfig& config) {
  nlohmann::ordered_json out = nlohmann::ordered_json::object();
  for (const auto& d : key_defs()) out[d.key.name] = d.get(config);
  return out;
}

RunConfig apply_json(RunConfig base, const json& obj) {
  if (!obj.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, value] : obj.items()) find_key(key).set(base, value);
  return base;
}

void apply_string(RunConfig& config, const std::string& key, const std::string& value) {
  const auto& d = find_key(key);
  d.set(config, d.parse(value));
}

RunConfig load_config_file(const std::string& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  json obj;
  try {
    obj = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  try {
    return apply_json(std::move(base), obj);
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

RunConfig resolve_config(const std::string& file, const std::optional<std::string>& env_seed,
                         const std::map<std::string, std::string>& flags) {
  RunConfig config;
  if (env_seed) {
    try {
      apply_string(config, "seed", *env_seed);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("PVCORR_SEED: ") + e.what());
    }
  }
  if (!file.empty()) config = load_config_file(file, config);
  for (const auto& [key, value] : flags) apply_string(config, key, value);
  config.validate();
  return config;
}

}  // namespace pvcorr

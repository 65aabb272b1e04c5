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

#include "pvcorr/commands.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "pvcorr/checkpoint.hpp"
#include "pvcorr/correlation.hpp"
#include "pvcorr/metrics.hpp"
#include "pvcorr/run_config.hpp"
#include "pvcorr/scene_io.hpp"

namespace pvcorr {
namespace fs = std::filesystem;
namespace {

std::optional<std::string> env_seed() {
  const char* v = std::getenv("PVCORR_SEED");
  if (v == nullptr) return std::nullopt;
  return std::string(v);
}

// Every config key as a --flag; values are collected only when given.
struct ConfigFlags {
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;

  void add(CLI::App& app) {
    for (const auto& key : config_keys()) {
      options[key.name] = app.add_option(flag_name(key.name), values[key.name], key.help);
    }
  }

  std::map<std::string, std::string> given() const {
    std::map<std::string, std::string> out;
    for (const auto& [name, opt] : options)
      if (opt->count() > 0) out[name] = values.at(name);
    return out;
  }
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw SceneIoError("cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw SceneIoError("failed writing " + path.string());
}

// Network settings for an existing checkpoint: its sidecar if present, then
// the optional config file, then flags.
RunConfig checkpoint_config(const fs::path& ckpt, const std::string& config_file, const ConfigFlags& flags) {
  RunConfig config;
  if (const auto side = config_sidecar(ckpt); fs::exists(side)) config = load_config_file(side.string());
  if (!config_file.empty()) config = load_config_file(config_file, config);
  for (const auto& [key, value] : flags.given()) apply_string(config, key, value);
  config.validate();
  return config;
}

ModelParams<float> load_model(const fs::path& ckpt, const RunConfig& config, bool& has_refine) {
  const NamedTensors tensors = read_checkpoint(ckpt);
  ModelParams<float> params = initial_params(config.train);
  has_refine = has_refine_params(tensors);
  import_params(params, tensors, has_refine ? ParamSet::kAll : ParamSet::kMain);
  return params;
}

struct GenArgs {
  std::string out;
  std::size_t scenes = 20;
  std::size_t points = 256;
  double noise = 0.0;
  double motion_scale = 0.3;
  std::size_t clusters = 3;
  std::string seed;
};

void cmd_gen(const GenArgs& a, std::ostream& out) {
  SyntheticOptions o;
  o.n_points = a.points;
  o.noise_sigma = a.noise;
  o.motion_scale = a.motion_scale;
  o.clusters = a.clusters;
  RunConfig seed_holder;
  if (!a.seed.empty()) {
    apply_string(seed_holder, "seed", a.seed);
  } else if (const auto s = env_seed()) {
    apply_string(seed_holder, "seed", *s);
  }
  o.seed = seed_holder.train.seed;
  if (a.scenes == 0) throw ConfigError("--scenes must be positive");
  if (a.points == 0) throw ConfigError("--points must be positive");
  if (a.noise < 0) throw ConfigError("--noise must be non-negative");
  if (a.clusters == 0) throw ConfigError("--clusters must be positive");
  const auto scenes = gen_dataset(a.scenes, o);
  for (std::size_t i = 0; i < scenes.size(); ++i) write_scene(fs::path(a.out) / scene_dir_name(i), scenes[i]);
  out << "wrote " << scenes.size() << " scenes to " << a.out << "\n";
}

struct TrainArgs {
  std::string config;
  std::string out;
  std::string stage = "main";
  std::string frozen;
};

void cmd_train(const TrainArgs& a, const ConfigFlags& flags, std::ostream& out) {
  const bool refine_stage = a.stage == "refine";
  if (refine_stage && a.frozen.empty()) throw ConfigError("--stage refine requires --frozen CKPT");
  if (!refine_stage && !a.frozen.empty()) throw ConfigError("--frozen is only valid with --stage refine");
  std::string base_file = a.config;
  if (base_file.empty() && refine_stage && fs::exists(config_sidecar(a.frozen))) {
    base_file = config_sidecar(a.frozen).string();
  }
  const RunConfig config = resolve_config(base_file, env_seed(), flags.given());
  if (config.data.empty()) throw ConfigError("no scene directory: pass --data or set \"data\"");
  const auto data = read_dataset(config.data);

  const fs::path ckpt = a.out;
  const fs::path log_path = config.log.empty() ? fs::path(a.out + ".log.jsonl") : fs::path(config.log);
  std::ofstream log(log_path, std::ios::binary | std::ios::trunc);
  if (!log) throw SceneIoError("cannot open " + log_path.string() + " for writing");
  const TrainLog logger = [&log](const EpochRecord& r) { log << to_json_line(r) << "\n" << std::flush; };

  ModelParams<float> params = initial_params(config.train);
  if (refine_stage) {
    if (!fs::exists(a.frozen)) throw SceneIoError("frozen checkpoint " + a.frozen + " does not exist");
    import_params(params, read_checkpoint(a.frozen), ParamSet::kMain);
    params = train_refine(data, config.train, std::move(params), logger);
    write_checkpoint(ckpt, export_params(params, ParamSet::kAll));
  } else {
    params = train_main(data, config.train, std::move(params), logger);
    write_checkpoint(ckpt, export_params(params, ParamSet::kMain));
  }
  write_text(config_sidecar(ckpt), to_json(config).dump(2) + "\n");
  out << "wrote " << ckpt.string() << "\n";
}

struct EvalArgs {
  std::string data;
  std::string ckpt;
  std::string config;
  std::size_t iters = 32;
  bool oracle = false;
  std::size_t jobs = 1;
};

void cmd_eval(const EvalArgs& a, const ConfigFlags& flags, std::ostream& out) {
  if (a.iters == 0) throw ConfigError("--iters must be positive");
  if (a.jobs == 0) throw ConfigError("--jobs must be positive");
  if (!a.oracle && a.ckpt.empty()) throw ConfigError("--ckpt is required unless --oracle is given");
  RunConfig config;
  bool has_refine = false;
  ModelParams<float> params(config.train.net.corr.cube, 0);
  if (!a.oracle) {
    config = checkpoint_config(a.ckpt, a.config, flags);
    params = load_model(a.ckpt, config, has_refine);
  }
  const std::string data_dir = a.data.empty() ? config.data : a.data;
  if (data_dir.empty()) throw ConfigError("no scene directory: pass --data");
  const auto data = read_dataset(data_dir);

  // Scenes are independent; each worker fills its own slots and the reduction
  // runs in scene order, so the result does not depend on --jobs.
  std::vector<FlowMetrics> per_scene(data.size());
  std::vector<std::string> failures(data.size());
  auto work = [&](std::size_t worker) {
    for (std::size_t i = worker; i < data.size(); i += a.jobs) {
      try {
        const FlowField est = a.oracle ? data[i].gt_flow
                                       : predict(params, config.train.net, data[i].p1, data[i].p2, a.iters, has_refine);
        per_scene[i] = evaluate_flow(est, data[i].gt_flow);
      } catch (const std::exception& e) {
        failures[i] = e.what();
      }
    }
  };
  if (a.jobs == 1) {
    work(0);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < std::min(a.jobs, data.size()); ++w) pool.emplace_back(work, w);
  }
  for (std::size_t i = 0; i < failures.size(); ++i)
    if (!failures[i].empty()) throw std::runtime_error("scene " + std::to_string(i) + ": " + failures[i]);
  out << to_json(aggregate(per_scene)) << "\n";
}

struct DumpArgs {
  std::string data;
  std::string ckpt;
  std::string config;
  std::string out;
  std::size_t scene = 0;
  std::size_t point = 0;
  std::size_t iter = 0;
};

void cmd_corr_dump(const DumpArgs& a, const ConfigFlags& flags, std::ostream& out) {
  const RunConfig config = checkpoint_config(a.ckpt, a.config, flags);
  bool has_refine = false;
  const ModelParams<float> params = load_model(a.ckpt, config, has_refine);
  const auto dirs = list_scenes(a.data);
  if (a.scene >= dirs.size()) {
    throw std::out_of_range("--scene " + std::to_string(a.scene) + " out of range (" + std::to_string(dirs.size()) +
                            " scenes)");
  }
  const SceneSample s = read_scene(dirs[a.scene]);
  if (a.point >= s.p1.size()) {
    throw std::out_of_range("--point " + std::to_string(a.point) + " out of range (" + std::to_string(s.p1.size()) +
                            " points)");
  }
  Tape<float> tape(GradMode::kInference);
  FlowEstimator<float> est(tape, params, config.train.net, s.p1, s.p2);
  for (std::size_t t = 0; t < a.iter; ++t) est.step();
  const auto& corr = config.train.net.corr;
  const FieldDump dump =
      dump_fields(a.point, cloud_from(est.translated().value()), s.p2, est.truncation(), corr.cube, corr.k);
  write_text(a.out, to_json(dump) + "\n");
  out << "wrote " << a.out << "\n";
}

}  // namespace

std::string scene_dir_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%04zu", index);
  return buf;
}

fs::path config_sidecar(const fs::path& checkpoint) { return fs::path(checkpoint.string() + ".config.json"); }

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app("Point-voxel correlation scene flow", "pvcorr");
  app.require_subcommand(1);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "write synthetic scene pairs");
  gen_cmd->add_option("--out", gen.out, "output directory")->required();
  gen_cmd->add_option("--scenes", gen.scenes, "number of scenes");
  gen_cmd->add_option("--points", gen.points, "points per cloud");
  gen_cmd->add_option("--noise", gen.noise, "jitter sigma on the second frame, meters");
  gen_cmd->add_option("--motion-scale", gen.motion_scale, "largest cluster translation, meters");
  gen_cmd->add_option("--clusters", gen.clusters, "rigid clusters per scene");
  gen_cmd->add_option("--seed", gen.seed, "base seed (default PVCORR_SEED, then 0)");

  TrainArgs train;
  ConfigFlags train_flags;
  auto* train_cmd = app.add_subcommand("train", "train the main or refinement stage");
  train_cmd->add_option("--config", train.config, "JSON config file");
  train_cmd->add_option("--out", train.out, "checkpoint to write")->required();
  train_cmd->add_option("--stage", train.stage, "main or refine")->check(CLI::IsMember({"main", "refine"}));
  train_cmd->add_option("--frozen", train.frozen, "main-stage checkpoint for --stage refine");
  train_flags.add(*train_cmd);

  EvalArgs eval;
  ConfigFlags eval_flags;
  auto* eval_cmd = app.add_subcommand("eval", "print dataset metrics as JSON");
  eval_cmd->add_option("--ckpt", eval.ckpt, "checkpoint");
  eval_cmd->add_option("--config", eval.config, "JSON config overriding the checkpoint's");
  eval_cmd->add_option("--iters", eval.iters, "flow updates");
  eval_cmd->add_flag("--oracle", eval.oracle, "score the ground truth itself");
  eval_cmd->add_option("--jobs", eval.jobs, "scenes evaluated in parallel");
  eval_flags.add(*eval_cmd);

  DumpArgs dump;
  ConfigFlags dump_flags;
  auto* dump_cmd = app.add_subcommand("corr-dump", "write one point's correlation fields as JSON");
  dump_cmd->add_option("--ckpt", dump.ckpt, "checkpoint")->required();
  dump_cmd->add_option("--config", dump.config, "JSON config overriding the checkpoint's");
  dump_cmd->add_option("--scene", dump.scene, "scene index")->required();
  dump_cmd->add_option("--point", dump.point, "source point index")->required();
  dump_cmd->add_option("--out", dump.out, "output file")->required();
  dump_cmd->add_option("--iter", dump.iter, "flow updates applied before the lookup");
  dump_flags.add(*dump_cmd);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "pvcorr: error: " << e.what() << "\n";
    return e.get_exit_code() == 0 ? 2 : e.get_exit_code();
  }

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    if (gen_cmd->parsed()) {
      cmd_gen(gen, out);
    } else if (train_cmd->parsed()) {
      cmd_train(train, train_flags, out);
    } else if (eval_cmd->parsed()) {
      eval.data = eval_flags.given().count("data") ? eval_flags.values.at("data") : "";
      cmd_eval(eval, eval_flags, out);
    } else {
      dump.data = dump_flags.given().count("data") ? dump_flags.values.at("data") : "";
      if (dump.data.empty()) throw ConfigError("--data is required");
      cmd_corr_dump(dump, dump_flags, out);
    }
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "pvcorr " << name << ": error: " << msg << "\n";
    return 1;
  }
  return 0;
}

}  // namespace pvcorr

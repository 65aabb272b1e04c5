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

#include "pvcorr/scene_io.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>

#include "json.hpp"

namespace pvcorr {
namespace fs = std::filesystem;
namespace {

std::vector<std::uint8_t> encode_points(const std::vector<Vec3>& pts) {
  std::vector<std::uint8_t> out;
  out.reserve(pts.size() * 12);
  for (const auto& p : pts)
    for (float v : p) {
      const auto u = std::bit_cast<std::uint32_t>(v);
      for (int b = 0; b < 4; ++b) out.push_back(std::uint8_t(u >> (8 * b)));
    }
  return out;
}

void write_file(const fs::path& path, const void* data, std::size_t n) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw SceneIoError("cannot open " + path.string() + " for writing");
  f.write(static_cast<const char*>(data), std::streamsize(n));
  if (!f) throw SceneIoError("failed writing " + path.string());
}

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw SceneIoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::vector<Vec3> read_points(const fs::path& path, std::size_t n) {
  const auto bytes = read_file(path);
  if (bytes.size() != n * 12) {
    throw SceneIoError(path.string() + ": expected " + std::to_string(n * 12) + " bytes, found " +
                       std::to_string(bytes.size()));
  }
  std::vector<Vec3> pts(n);
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) {
      std::uint32_t u = 0;
      for (int b = 0; b < 4; ++b) u |= std::uint32_t(bytes[i * 12 + std::size_t(c) * 4 + std::size_t(b)]) << (8 * b);
      pts[i][std::size_t(c)] = std::bit_cast<float>(u);
    }
  return pts;
}

}  // namespace

void write_scene(const fs::path& dir, const SceneSample& scene) {
  scene.validate();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw SceneIoError("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::ordered_json meta;
  meta["n1"] = scene.p1.size();
  meta["n2"] = scene.p2.size();
  meta["version"] = kSceneVersion;
  const std::string text = meta.dump() + "\n";
  write_file(dir / "meta.json", text.data(), text.size());
  const auto pc1 = encode_points(scene.p1.points());
  const auto pc2 = encode_points(scene.p2.points());
  const auto flow = encode_points(scene.gt_flow.vectors());
  write_file(dir / "pc1.bin", pc1.data(), pc1.size());
  write_file(dir / "pc2.bin", pc2.data(), pc2.size());
  write_file(dir / "flow.bin", flow.data(), flow.size());
}

SceneSample read_scene(const fs::path& dir) {
  const auto meta_bytes = read_file(dir / "meta.json");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(meta_bytes.begin(), meta_bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw SceneIoError((dir / "meta.json").string() + ": " + e.what());
  }
  auto count = [&](const char* key) -> std::size_t {
    if (!meta.contains(key) || !meta[key].is_number_unsigned() || meta[key].get<std::size_t>() == 0) {
      throw SceneIoError((dir / "meta.json").string() + ": \"" + key + "\" must be a positive integer");
    }
    return meta[key].get<std::size_t>();
  };
  if (!meta.contains("version") || meta["version"] != kSceneVersion) {
    throw SceneIoError((dir / "meta.json").string() + ": unsupported version");
  }
  const std::size_t n1 = count("n1"), n2 = count("n2");
  try {
    return {PointCloud(read_points(dir / "pc1.bin", n1)), PointCloud(read_points(dir / "pc2.bin", n2)),
            FlowField(read_points(dir / "flow.bin", n1))};
  } catch (const std::invalid_argument& e) {
    throw SceneIoError(dir.string() + ": " + e.what());
  }
}

std::vector<fs::path> list_scenes(const fs::path& root) {
  std::error_code ec;
  if (!fs::is_directory(root, ec)) throw SceneIoError(root.string() + " is not a directory");
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(root, ec))
    if (entry.is_directory() && fs::exists(entry.path() / "meta.json")) out.push_back(entry.path());
  if (ec) throw SceneIoError("cannot list " + root.string() + ": " + ec.message());
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<SceneSample> read_dataset(const fs::path& root) {
  std::vector<SceneSample> out;
  for (const auto& dir : list_scenes(root)) out.push_back(read_scene(dir));
  if (out.empty()) throw SceneIoError(root.string() + " contains no scenes");
  return out;
}

}  // namespace pvcorr

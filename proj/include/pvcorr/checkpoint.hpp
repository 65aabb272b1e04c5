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

// Named-tensor container ("PVCK"):
//   magic "PVCK" | version u32 | entry count u32 |
//   per entry: name length u16, UTF-8 name, rank u8, dims u32 x rank,
//              data f32 x product(dims)
// All integers and floats little-endian.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pvcorr/tensor.hpp"

namespace pvcorr {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  Tensor<float> tensor;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

using NamedTensors = std::vector<NamedTensor>;

std::vector<std::uint8_t> encode_checkpoint(const NamedTensors& entries);
NamedTensors decode_checkpoint(std::span<const std::uint8_t> bytes);

void write_checkpoint(const std::filesystem::path& path, const NamedTensors& entries);
NamedTensors read_checkpoint(const std::filesystem::path& path);

// Linear lookup by name; nullptr if absent.
const Tensor<float>* find_tensor(const NamedTensors& entries, const std::string& name);

}  // namespace pvcorr

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

#include "pvcorr/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

namespace pvcorr {
namespace {

constexpr char kMagic[4] = {'P', 'V', 'C', 'K'};

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  void le(std::uint32_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(std::uint8_t(v >> (8 * i)));
  }
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  std::uint8_t u8() { return need(1)[0]; }
  std::uint16_t u16() { return std::uint16_t(le(2)); }
  std::uint32_t u32() { return le(4); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::span<const std::uint8_t> take(std::size_t n) { return need(n); }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::span<const std::uint8_t> need(std::size_t n) {
    if (in_.size() - pos_ < n) throw FormatError("checkpoint truncated");
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint32_t le(int n) {
    auto b = need(std::size_t(n));
    std::uint32_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint32_t(b[i]) << (8 * i);
    return v;
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const NamedTensors& entries) {
  if (entries.size() > std::numeric_limits<std::uint32_t>::max())
    throw FormatError("too many checkpoint entries");
  Writer w;
  w.bytes(kMagic, 4);
  w.u32(kCheckpointVersion);
  w.u32(std::uint32_t(entries.size()));
  for (const auto& e : entries) {
    if (e.name.size() > std::numeric_limits<std::uint16_t>::max())
      throw FormatError("tensor name too long: " + e.name.substr(0, 32) + "...");
    if (e.tensor.rank() > std::numeric_limits<std::uint8_t>::max())
      throw FormatError("tensor rank too large for " + e.name);
    if (numel(e.tensor.shape) != e.tensor.size())
      throw FormatError("tensor " + e.name + " has inconsistent shape");
    w.u16(std::uint16_t(e.name.size()));
    w.bytes(e.name.data(), e.name.size());
    w.u8(std::uint8_t(e.tensor.rank()));
    for (std::size_t d : e.tensor.shape) {
      if (d > std::numeric_limits<std::uint32_t>::max())
        throw FormatError("dimension too large in " + e.name);
      w.u32(std::uint32_t(d));
    }
    for (float v : e.tensor.data) w.f32(v);
  }
  return w.take();
}

NamedTensors decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  auto magic = r.take(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw FormatError("not a PVCK checkpoint");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  NamedTensors entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor e;
    auto name = r.take(r.u16());
    e.name.assign(name.begin(), name.end());
    Shape shape(r.u8());
    for (auto& d : shape) d = r.u32();
    const std::size_t n = numel(shape);
    if (n > bytes.size() / 4) throw FormatError("checkpoint truncated in " + e.name);
    std::vector<float> data(n);
    for (auto& v : data) v = r.f32();
    e.tensor = Tensor<float>(std::move(shape), std::move(data));
    entries.push_back(std::move(e));
  }
  if (!r.done()) throw FormatError("trailing bytes after checkpoint entries");
  return entries;
}

void write_checkpoint(const std::filesystem::path& path, const NamedTensors& entries) {
  const auto bytes = encode_checkpoint(entries);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

NamedTensors read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

const Tensor<float>* find_tensor(const NamedTensors& entries, const std::string& name) {
  for (const auto& e : entries)
    if (e.name == name) return &e.tensor;
  return nullptr;
}

}  // namespace pvcorr

// Copyright 2026 The edlab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "edlab/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "edlab/errors.hpp"

namespace edlab::io {

namespace {

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::string_view in, std::size_t& offset) {
  if (offset + sizeof(T) > in.size()) throw ConfigError("checkpoint truncated");
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, in.data() + offset, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  offset += sizeof(T);
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace

const Array& Container::at(std::string_view name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t.value;
  throw ConfigError("checkpoint has no tensor named '" + std::string(name) + "'");
}

bool Container::contains(std::string_view name) const {
  for (const auto& t : tensors)
    if (t.name == name) return true;
  return false;
}

std::string encode_container(nlohmann::json metadata, const std::vector<NamedArray>& tensors) {
  nlohmann::json listing = nlohmann::json::array();
  for (const auto& t : tensors) listing.push_back({{"name", t.name}, {"shape", t.value.shape()}});
  metadata["tensors"] = std::move(listing);
  const std::string meta = metadata.dump();

  std::string out(kMagic);
  put_le<std::uint32_t>(out, kFormatVersion);
  put_le<std::uint64_t>(out, meta.size());
  out += meta;
  for (const auto& t : tensors)
    for (double v : t.value.values()) put_le<double>(out, v);
  return out;
}

Container decode_container(std::string_view bytes) {
  if (bytes.substr(0, kMagic.size()) != kMagic) throw ConfigError("not an EDLB checkpoint (bad magic)");
  std::size_t offset = kMagic.size();
  const auto version = get_le<std::uint32_t>(bytes, offset);
  if (version != kFormatVersion) {
    throw ConfigError("unsupported checkpoint format version " + std::to_string(version));
  }
  const auto meta_len = get_le<std::uint64_t>(bytes, offset);
  if (offset + meta_len > bytes.size()) throw ConfigError("checkpoint truncated in metadata");
  Container c;
  c.metadata = nlohmann::json::parse(bytes.substr(offset, meta_len));
  offset += meta_len;
  for (const auto& entry : c.metadata.at("tensors")) {
    Shape shape = entry.at("shape").get<Shape>();
    std::vector<double> data(shape_size(shape));
    for (double& v : data) v = get_le<double>(bytes, offset);
    c.tensors.push_back({entry.at("name").get<std::string>(), Array(std::move(shape), std::move(data))});
  }
  if (offset != bytes.size()) throw ConfigError("checkpoint has trailing bytes");
  return c;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw ConfigError("cannot open " + tmp.string() + " for writing");
    f.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!f) throw ConfigError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_container(const std::filesystem::path& path, nlohmann::json metadata,
                     const std::vector<NamedArray>& tensors) {
  write_file_atomic(path, encode_container(std::move(metadata), tensors));
}

Container read_container(const std::filesystem::path& path) { return decode_container(read_file(path)); }

}  // namespace edlab::io

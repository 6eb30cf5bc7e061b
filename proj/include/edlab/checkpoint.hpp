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

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "edlab/numerics.hpp"
#include "json.hpp"

namespace edlab::io {

// On-disk container shared by raw-model and editor checkpoints:
//   "EDLB" | u32 version | u64 metadata length | UTF-8 JSON metadata |
//   little-endian f64 payloads in the order listed under metadata["tensors"].
inline constexpr std::string_view kMagic = "EDLB";
inline constexpr std::uint32_t kFormatVersion = 1;

struct NamedArray {
  std::string name;
  Array value;
};

struct Container {
  nlohmann::json metadata;
  std::vector<NamedArray> tensors;

  const Array& at(std::string_view name) const;
  bool contains(std::string_view name) const;
};

std::string encode_container(nlohmann::json metadata, const std::vector<NamedArray>& tensors);
Container decode_container(std::string_view bytes);

void write_container(const std::filesystem::path& path, nlohmann::json metadata,
                     const std::vector<NamedArray>& tensors);
Container read_container(const std::filesystem::path& path);

// Writes through a temporary file in the same directory and renames it.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);
std::string read_file(const std::filesystem::path& path);

}  // namespace edlab::io

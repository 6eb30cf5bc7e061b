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

// Run configuration: a flat INI document with typed keys grouped in
// sections. Every key has a default; unknown sections or keys are errors.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "edlab/corpus.hpp"
#include "edlab/editors.hpp"
#include "edlab/evaluation.hpp"
#include "edlab/model.hpp"
#include "edlab/training.hpp"
#include "json.hpp"

namespace edlab::config {

struct RunConfig {
  std::uint64_t seed = 0;
  int workers = 1;

  corpus::CorpusConfig corpus;
  std::array<int, 3> split_ratios{8, 1, 1};

  // vocab_size, num_languages and head layout come from the dataset.
  model::ModelConfig model;
  training::PretrainOptions pretrain;

  editors::EditorVariant variant = editors::EditorVariant::HyperNet;
  editors::EditorOptions editor;
  training::TrainOptions train;

  corpus::Split eval_split = corpus::Split::Test;
  std::vector<int> editing_languages;  // empty = every language
  std::size_t samples_per_edit = 8;
  std::size_t max_edits = 0;
  double top_fraction = 0.01;
  evaluation::MaskBasis mask_basis = evaluation::MaskBasis::Gates;

  // Derived model config for a dataset with this corpus config.
  model::ModelConfig model_for(const corpus::Dataset& dataset) const;
  // Editor options with seeds filled in from `seed`.
  editors::EditorOptions editor_options() const;
  training::TrainOptions train_options() const;
  evaluation::EvalOptions eval_options() const;
};

RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
// INI text that parses back to the same config.
std::string format_config(const RunConfig& config);
nlohmann::json to_json(const RunConfig& config);

}  // namespace edlab::config

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

// Tiny multilingual transformer classifier.
//
// Layout: token + position embeddings, then `num_layers - num_editable_layers`
// pre-norm transformer blocks over the sequence, mean pooling, then the last
// `num_editable_layers` blocks applied to the pooled vector (their attention
// sees a single position), a final layer norm and a linear head.
//
// Editors only ever touch the MLP weights of the pooled tail, so every
// editable weight sees exactly one input row per example and the rank-1 taps
// (x, delta) reconstruct its gradient exactly.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "edlab/numerics.hpp"
#include "json.hpp"

namespace edlab::model {

enum class HeadMode { FactRecall, Classification };

std::string to_string(HeadMode mode);
HeadMode head_mode_from_string(const std::string& s);

struct ModelConfig {
  int vocab_size = 0;
  int num_languages = 1;
  int hidden_size = 64;
  int num_layers = 4;
  int num_heads = 4;
  int max_seq_len = 16;
  int num_editable_layers = 2;
  int mlp_ratio = 4;
  HeadMode head_mode = HeadMode::FactRecall;
  int num_classes = 3;

  void validate() const;
  int num_prefix_layers() const { return num_layers - num_editable_layers; }
  int mlp_size() const { return hidden_size * mlp_ratio; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Named tensors in canonical (lexicographic) name order.
class ParameterSet {
 public:
  using Map = std::map<std::string, Tensor>;

  void insert(const std::string& name, Tensor value);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return map_.contains(name); }
  std::size_t size() const { return map_.size(); }
  std::vector<std::string> names() const;
  std::vector<Tensor> tensors() const;

  Map::const_iterator begin() const { return map_.begin(); }
  Map::const_iterator end() const { return map_.end(); }

  // Copy whose tensors are constants holding the same values.
  ParameterSet detached() const;
  // Copy whose tensors are fresh leaves that require gradients.
  ParameterSet trainable() const;
  // FNV-1a over names, shapes and value bits.
  std::uint64_t fingerprint() const;

 private:
  Map map_;
};

struct LayerTap {
  std::string weight;
  Array x;      // [batch x n]
  Array delta;  // [batch x m]
};

struct TapResult {
  double loss = 0.0;
  Array logits;
  std::vector<LayerTap> taps;
  std::map<std::string, Array> weight_grads;
};

using TokenSeq = std::vector<int>;
using TokenBatch = std::vector<TokenSeq>;

class Transformer {
 public:
  explicit Transformer(ModelConfig config);

  const ModelConfig& config() const { return config_; }

  ParameterSet init(std::uint64_t seed) const;
  std::map<std::string, Shape> parameter_shapes() const;
  // MLP weights of the last num_editable_layers blocks, canonical order.
  std::vector<std::string> editable_weights() const;

  // Prefix blocks and mean pooling: tokens -> [batch x hidden].
  Tensor encode(const ParameterSet& params, const TokenBatch& tokens) const;
  // Editable tail, final norm and head: pooled -> logits [batch x C].
  Tensor forward_tail(const ParameterSet& params, const Tensor& pooled) const;
  Tensor forward(const ParameterSet& params, const TokenBatch& tokens) const;

  // Runs the tail on its own tape with the editable weights as leaves and
  // returns the per-example (x, delta) of each editable weight. Nothing in
  // the result is connected to any enclosing tape.
  TapResult forward_with_taps(const ParameterSet& params, const Array& pooled,
                              std::span<const int> targets) const;
  TapResult forward_with_taps(const ParameterSet& params, const TokenBatch& tokens,
                              std::span<const int> targets) const;

  // Pooled features of all sequences as a plain array (no graph).
  Array features(const ParameterSet& params, const TokenBatch& tokens, std::size_t chunk = 256) const;
  Array logits(const ParameterSet& params, const Array& pooled) const;

  void check_compatible(const ParameterSet& params) const;

 private:
  struct TapPoint {
    std::string weight;
    Tensor input;
    Tensor output;
  };

  Tensor block(const ParameterSet& p, int index, const Tensor& x, std::size_t seq_len,
               std::vector<TapPoint>* taps) const;

  ModelConfig config_;
};

// theta_u = theta + delta for each named weight; untouched tensors are shared.
ParameterSet apply_delta(const ParameterSet& params, const std::map<std::string, Tensor>& deltas);

void save_model(const std::filesystem::path& path, const ModelConfig& config, const ParameterSet& params,
                nlohmann::json extra = nlohmann::json::object());

struct LoadedModel {
  ModelConfig config;
  ParameterSet params;
  nlohmann::json metadata;
};
LoadedModel load_model(const std::filesystem::path& path);

}  // namespace edlab::model

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

// Editors map (raw parameters, edit request) to edited parameters theta_u.
//
// The hypernetwork editor turns the rank-1 gradient factors (x, delta) of
// each editable weight into pseudo factors (x~, delta~) with a small
// residual network g, and applies W <- W - alpha_W * x~^T delta~. The masked
// variant first reweights x and delta with language-specific hard-concrete
// gates: mask(v, z) = v + z * v.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "edlab/checkpoint.hpp"
#include "edlab/corpus.hpp"
#include "edlab/model.hpp"
#include "edlab/numerics.hpp"

namespace edlab::editors {

using corpus::Rng;
using model::ParameterSet;

// Stretched hard-concrete constants.
struct HardConcrete {
  static constexpr double gamma = -0.1;
  static constexpr double zeta = 1.1;
  static constexpr double beta = 2.0 / 3.0;
  // beta * ln(-gamma / zeta): the log-alpha at which P(z > 0) = 1/2.
  static double half_open_log_alpha();
};

enum class GateMode { Sampled, Deterministic };

// Sampled gate with explicit uniform noise u in (0, 1), one value per coordinate.
Tensor gate(const Tensor& log_alpha, const Array& u);
Tensor gate_deterministic(const Tensor& log_alpha);
// Draws u from `rng` in sampled mode; rng may be null in deterministic mode.
Tensor gate(const Tensor& log_alpha, GateMode mode, Rng* rng);

// Sum of P(z_i > 0): differentiable surrogate of ||z||_0.
Tensor expected_l0(const Tensor& log_alpha);

// v + z * v; v is a vector of z's length or a matrix whose rows have it.
Tensor mask_vector(const Tensor& v, const Tensor& z);

struct WeightSlot {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
};
std::vector<WeightSlot> weight_slots(const model::Transformer& model);

struct TransformerOptions {
  std::size_t hidden = 64;
  double step_init = 1e-4;
  bool identity = false;  // frozen identity g; only the step sizes learn
  std::uint64_t seed = 0;
};

class GradientTransformer {
 public:
  GradientTransformer(std::vector<WeightSlot> slots, TransformerOptions options);

  const std::vector<WeightSlot>& slots() const { return slots_; }
  const TransformerOptions& options() const { return options_; }
  bool is_identity() const { return options_.identity; }

  // (x [B x n], delta [B x m]) -> (x~, delta~). The residual branch sees both
  // factors RMS-normalized and is rescaled by each factor's RMS, so a zero
  // branch is exactly the identity.
  std::pair<Tensor, Tensor> transform(const Tensor& x, const Tensor& delta) const;

  // alpha_W = softplus(rho_W), or the fixed constant after fix_step_sizes().
  Tensor step_size(const std::string& weight) const;
  void fix_step_sizes(double alpha);
  std::optional<double> fixed_step_size() const { return fixed_step_; }

  std::vector<Tensor> network_parameters() const;
  std::vector<Tensor> step_parameters() const;

  std::vector<io::NamedArray> export_tensors() const;
  void import_tensors(const io::Container& c);

 private:
  struct Net {
    Tensor w1, b1, w2, b2;
  };
  static std::string shape_key(std::size_t n, std::size_t m);

  std::vector<WeightSlot> slots_;
  TransformerOptions options_;
  std::map<std::string, Net> nets_;
  std::map<std::string, Tensor> step_raw_;
  std::optional<double> fixed_step_;
};

class LanguageMaskSet {
 public:
  LanguageMaskSet(int num_languages, std::vector<WeightSlot> slots, double init_log_alpha);

  int num_languages() const { return num_languages_; }
  const std::vector<WeightSlot>& slots() const { return slots_; }
  const Tensor& log_alpha_x(int language, const std::string& weight) const;
  const Tensor& log_alpha_delta(int language, const std::string& weight) const;

  // Sum of expected_l0 over every language and weight.
  Tensor expected_l0_total() const;
  std::size_t num_gates() const;
  // Mean P(z > 0) per gate coordinate.
  double mean_gate_activity() const;
  // Deterministic gates of one language: for each weight in canonical order,
  // the x gates then the delta gates.
  Array gate_vector(int language) const;
  // The raw log-alpha parameters of one language in the same order.
  Array log_alpha_vector(int language) const;

  std::vector<Tensor> parameters() const;
  std::vector<io::NamedArray> export_tensors() const;
  void import_tensors(const io::Container& c);
  // Overwrites every gate parameter of one language (analysis and tests).
  void set_language(int language, double log_alpha);

 private:
  std::string key(int language, const std::string& weight, const char* side) const;
  void check_language(int language) const;

  int num_languages_;
  std::vector<WeightSlot> slots_;
  std::map<std::string, Tensor> log_alpha_;
};

struct EditRequest {
  Array features;           // pooled prefix features of the edit inputs, [B x h]
  std::vector<int> labels;  // desired predictions y_e, one per row
  int language = 0;         // editing language l_e
};

ParameterSet hypernet_edit(const model::Transformer& model, const ParameterSet& raw, const EditRequest& request,
                           const GradientTransformer& transformer, const LanguageMaskSet* masks, GateMode mode,
                           Rng* rng);

struct FinetuneOptions {
  int max_steps = 100;
  // Desk-scale rate: 20x the large-model value so that a single edit
  // reliably flips within max_steps.
  double lr = 1e-4;
};

struct FinetuneResult {
  ParameterSet params;
  int steps = 0;
  bool flipped = false;
};

// Adam on the editable weights only, stopping as soon as every edit row
// predicts its desired label.
FinetuneResult finetune_edit(const model::Transformer& model, const ParameterSet& raw, const EditRequest& request,
                             const FinetuneOptions& options);

enum class EditorVariant { Finetune, HyperNet, HyperNetMasked, IdentityG, IdentityGMasked };
std::string to_string(EditorVariant v);
EditorVariant editor_variant_from_string(const std::string& s);
bool uses_masks(EditorVariant v);

struct EditorOptions {
  TransformerOptions transformer;
  double mask_init = 0.0;
  FinetuneOptions finetune;
};

void to_json(nlohmann::json& j, const EditorOptions& o);
void from_json(const nlohmann::json& j, EditorOptions& o);

// Copies share tensor storage with the original.
class Editor {
 public:
  Editor(EditorVariant variant, const model::Transformer& model, int num_languages, EditorOptions options);

  EditorVariant variant() const { return variant_; }
  const EditorOptions& options() const { return options_; }
  int num_languages() const { return num_languages_; }
  bool has_masks() const { return masks_.has_value(); }

  GradientTransformer* transformer() { return transformer_ ? &*transformer_ : nullptr; }
  const GradientTransformer* transformer() const { return transformer_ ? &*transformer_ : nullptr; }
  LanguageMaskSet* masks() { return masks_ ? &*masks_ : nullptr; }
  const LanguageMaskSet* masks() const { return masks_ ? &*masks_ : nullptr; }

  ParameterSet edit(const model::Transformer& model, const ParameterSet& raw, const EditRequest& request,
                    GateMode mode, Rng* rng) const;

  // Trainable tensors by optimizer group: "g", "alpha", "mask".
  std::vector<Tensor> group(const std::string& name) const;

  std::vector<io::NamedArray> export_tensors() const;
  void import_tensors(const io::Container& c);
  // Copies every tensor value of `other` (same variant and shapes).
  void copy_values_from(const Editor& other);

  nlohmann::json describe() const;
  void save(const std::filesystem::path& path, nlohmann::json extra = nlohmann::json::object()) const;
  static Editor load(const std::filesystem::path& path, const model::Transformer& model);

 private:
  EditorVariant variant_;
  EditorOptions options_;
  int num_languages_;
  std::optional<GradientTransformer> transformer_;
  std::optional<LanguageMaskSet> masks_;
};

}  // namespace edlab::editors

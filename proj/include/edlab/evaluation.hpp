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

// Cross-lingual editing metrics and the mask-similarity analysis.
//
// For an edit (x_e, y_e) the edited model theta_u is scored on the parallel
// set I(x_e) restricted to D_update (acc: prediction equals y_e) and on
// D_update minus I(x_e) (con: prediction unchanged from theta). The macro
// average runs one pass per editing language with D_update holding every
// language, averages acc and con over languages and derives succ from the
// averages.

#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "edlab/corpus.hpp"
#include "edlab/editors.hpp"
#include "edlab/model.hpp"
#include "json.hpp"

namespace edlab::evaluation {

using corpus::Rng;
using corpus::SplitData;
using editors::EditRequest;
using model::ParameterSet;

// Harmonic mean 2*acc*con/(acc+con); 0 when both vanish. Scale-free, so it
// works on fractions and on percentages alike.
double success_rate(double acc, double con);

struct LanguageMetrics {
  int language = 0;
  double acc = 0.0;
  double con = 0.0;
  double succ = 0.0;
  std::size_t edits = 0;
  std::size_t update_samples = 0;
  std::size_t retain_samples = 0;
  std::size_t skipped = 0;  // edits with no parallel member inside D_update
};

struct MetricsRecord {
  double acc = 0.0;
  double con = 0.0;
  double succ = 0.0;
  std::vector<LanguageMetrics> per_language;
};

// Raw-model quantities of one split, computed once: pooled prefix features,
// raw logits and raw predictions of every example. Editors only change the
// pooled tail, so edited predictions only need the tail.
class EvalContext {
 public:
  EvalContext(const model::Transformer& model, const ParameterSet& raw, const SplitData& split);

  const model::Transformer& model() const { return *model_; }
  const ParameterSet& raw() const { return *raw_; }
  const SplitData& split() const { return *split_; }
  const Array& features() const { return features_; }
  const Array& raw_logits() const { return raw_logits_; }
  const std::vector<int>& raw_predictions() const { return raw_predictions_; }

  EditRequest request(std::size_t index, int desired_label) const;
  // Edited-model predictions on the given split examples.
  std::vector<int> predict(const ParameterSet& edited, std::span<const std::size_t> indices) const;

 private:
  const model::Transformer* model_;
  const ParameterSet* raw_;
  const SplitData* split_;
  Array features_;
  Array raw_logits_;
  std::vector<int> raw_predictions_;
};

// Produces theta_u for one request. The Rng is private to the edit.
using EditFn = std::function<ParameterSet(const EditRequest&, Rng&)>;

EditFn make_edit_fn(const editors::Editor& editor, const EvalContext& context,
                    editors::GateMode mode = editors::GateMode::Deterministic);
// Leaves theta untouched.
EditFn identity_edit_fn(const EvalContext& context);

struct EvalOptions {
  std::size_t samples_per_edit = 8;
  std::uint64_t seed = 0;
  int workers = 1;
  // Evaluate only the first n edits of each language (0 = all).
  std::size_t max_edits = 0;
  // Languages making up D_update in the macro average (empty = all).
  std::vector<int> update_languages;
};

struct EditOutcome {
  std::size_t hits = 0;
  std::size_t update_samples = 0;
  std::size_t kept = 0;
  std::size_t retain_samples = 0;
  bool skipped = false;
};

// Scores every x_e in d_edit against d_update (duplicates in d_update are
// ignored). Outcomes come back in d_edit order whatever the worker count.
std::vector<EditOutcome> evaluate_edits(const EditFn& edit, const EvalContext& context,
                                        std::span<const std::size_t> d_edit, std::span<const std::size_t> d_update,
                                        const EvalOptions& options, std::uint64_t stream = 0);

double editing_accuracy(const EditFn& edit, const EvalContext& context, std::span<const std::size_t> d_edit,
                        std::span<const std::size_t> d_update, const EvalOptions& options);
double editing_consistency(const EditFn& edit, const EvalContext& context, std::span<const std::size_t> d_edit,
                           std::span<const std::size_t> d_update, const EvalOptions& options);

// One pass per editing language in `languages`; D_update is the whole split
// unless options.update_languages narrows it.
MetricsRecord macro_average_eval(const EditFn& edit, const EvalContext& context, std::span<const int> languages,
                                 const EvalOptions& options);

// Sentinel for undefined cosine entries.
inline constexpr double kUndefined = std::numeric_limits<double>::quiet_NaN();

// Per-language vector the similarity is computed on: deterministic gates in
// [0, 1], or the learned log-alpha parameters behind them.
enum class MaskBasis { Gates, LogAlpha };
std::string to_string(MaskBasis basis);
MaskBasis mask_basis_from_string(const std::string& s);

// Row l keeps the ceil(top_fraction * dim) largest coordinates of l's
// vector and holds the cosine similarity of every language's vector on them.
std::vector<std::vector<double>> mask_similarity_matrix(const editors::LanguageMaskSet& masks,
                                                        double top_fraction = 0.01,
                                                        MaskBasis basis = MaskBasis::Gates);
std::vector<std::vector<double>> mask_similarity_matrix(std::span<const Array> gate_vectors,
                                                        double top_fraction = 0.01);

nlohmann::json to_json(const MetricsRecord& record);
MetricsRecord metrics_from_json(const nlohmann::json& j);
// NaN entries become null.
nlohmann::json similarity_to_json(const std::vector<std::vector<double>>& matrix);
// One row per (scope, language): scope,language,acc,con,succ,edits.
std::string metrics_csv(const MetricsRecord& record);

}  // namespace edlab::evaluation

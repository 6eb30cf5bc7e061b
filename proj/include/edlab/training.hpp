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

// Editor meta-training and raw-model pretraining.
//
// One editor step: sample an edit batch, edit the raw model with the editor
// (stage 1), then score the edited model on the sampled update inputs
// (L_rel, cross-entropy against the desired label) and retain inputs (L_loc,
// KL from the raw predictive distribution), add the expected-L0 mask penalty
// and take one optimizer step on the editor parameters. The raw model is
// read-only throughout.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "edlab/corpus.hpp"
#include "edlab/editors.hpp"
#include "edlab/evaluation.hpp"
#include "edlab/model.hpp"
#include "edlab/optim.hpp"
#include "json.hpp"

namespace edlab::training {

using corpus::Rng;
using model::ParameterSet;

struct LossWeights {
  double rel = 0.1;
  double loc = 1.0;
  double mask = 1.0;
  void validate() const;
};

struct LearningRates {
  double g = 1e-3;
  double alpha = 1e-2;
  double mask = 1e-3;
};

struct Schedule {
  long long max_steps = 10000;
  long long eval_interval = 500;
  long long patience = 2000;
};

struct TrainOptions {
  LossWeights weights;
  LearningRates lr;
  Schedule schedule;
  corpus::LanguageMode language_mode;
  std::size_t num_update = 4;
  std::size_t num_retain = 4;
  std::uint64_t seed = 0;
  evaluation::EvalOptions dev;
  // When set, training state is written here at every evaluation and on
  // interruption, and picked up again on the next call.
  std::optional<std::filesystem::path> state_path;
  std::optional<std::filesystem::path> log_path;
  // Stop (as if interrupted) once this many steps have run; 0 = never.
  long long stop_after = 0;
};

void to_json(nlohmann::json& j, const TrainOptions& o);
void from_json(const nlohmann::json& j, TrainOptions& o);

struct LossParts {
  Tensor total;
  Tensor rel;
  Tensor loc;
  Tensor mask;
};

// Both training stages for one batch. Differentiable in the editor
// parameters when called under a tape.
LossParts editor_loss(const editors::Editor& editor, const evaluation::EvalContext& context,
                      const corpus::EditBatch& batch, const LossWeights& weights, editors::GateMode mode, Rng* rng);

struct StepLosses {
  double rel = 0.0;
  double loc = 0.0;
  double mask = 0.0;
  double total() const { return rel + loc + mask; }
};

struct LogRecord {
  long long step = 0;
  double rel = 0.0;
  double loc = 0.0;
  double mask = 0.0;
  double dev_acc = 0.0;
  double dev_con = 0.0;
  double dev_succ = 0.0;
  friend bool operator==(const LogRecord&, const LogRecord&) = default;
};
void to_json(nlohmann::json& j, const LogRecord& r);
void from_json(const nlohmann::json& j, LogRecord& r);

// Editor, optimizer and bookkeeping of one training run.
struct TrainState {
  TrainState(editors::Editor editor, const LearningRates& lr, std::uint64_t seed);

  editors::Editor editor;
  Adam optimizer;
  Rng rng;
  long long step = 0;
  double best_succ = -1.0;
  long long best_step = 0;
  long long since_best = 0;
  std::vector<io::NamedArray> best;
  std::vector<LogRecord> log;
  // Running sums of the losses since the last log record.
  StepLosses pending;
  long long pending_steps = 0;

  void save(const std::filesystem::path& path, const nlohmann::json& options) const;
  // Overwrites this state with the one on disk; the options must match.
  void load(const std::filesystem::path& path, const nlohmann::json& options);
};

// One optimizer step; the raw model is never touched. A non-finite loss
// throws NumericalError describing the batch.
StepLosses editor_train_step(TrainState& state, const evaluation::EvalContext& context,
                             const corpus::EditBatch& batch, const LossWeights& weights);

struct TrainResult {
  editors::Editor editor;  // best checkpoint by dev succ
  std::vector<LogRecord> log;
  double best_succ = 0.0;
  long long best_step = 0;
  long long steps = 0;
  bool early_stopped = false;
  bool interrupted = false;
};

// Editing languages used for dev selection: the training languages.
std::vector<int> training_languages(const corpus::LanguageMode& mode, int num_languages);

TrainResult train_editor(const model::Transformer& model, const ParameterSet& raw, const corpus::Splits& splits,
                         const editors::Editor& editor, const TrainOptions& options);

struct PretrainOptions {
  long long steps = 3000;
  std::size_t batch_size = 64;
  double lr = 3e-3;
  std::uint64_t seed = 0;
};

struct PretrainResult {
  ParameterSet params;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> language_accuracy;
};

double dataset_loss(const model::Transformer& model, const ParameterSet& params, const corpus::SplitData& split);
std::vector<double> language_accuracy(const model::Transformer& model, const ParameterSet& params,
                                      const corpus::SplitData& split);

PretrainResult pretrain_raw_model(const model::Transformer& model, const corpus::SplitData& train,
                                  const PretrainOptions& options);

}  // namespace edlab::training

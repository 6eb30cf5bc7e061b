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

#include "edlab/training.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "edlab/errors.hpp"

namespace edlab::training {

void LossWeights::validate() const {
  if (!(rel >= 0.0 && loc >= 0.0 && mask >= 0.0)) throw ConfigError("loss weights must be non-negative");
}

void to_json(nlohmann::json& j, const TrainOptions& o) {
  j = {{"lambda_rel", o.weights.rel},
       {"lambda_loc", o.weights.loc},
       {"lambda_mask", o.weights.mask},
       {"lr_g", o.lr.g},
       {"lr_alpha", o.lr.alpha},
       {"lr_mask", o.lr.mask},
       {"max_steps", o.schedule.max_steps},
       {"eval_interval", o.schedule.eval_interval},
       {"patience", o.schedule.patience},
       {"language_mode", corpus::to_string(o.language_mode)},
       {"num_update", o.num_update},
       {"num_retain", o.num_retain},
       {"seed", o.seed},
       {"dev_samples_per_edit", o.dev.samples_per_edit},
       {"dev_max_edits", o.dev.max_edits},
       {"dev_seed", o.dev.seed}};
}

void from_json(const nlohmann::json& j, TrainOptions& o) {
  j.at("lambda_rel").get_to(o.weights.rel);
  j.at("lambda_loc").get_to(o.weights.loc);
  j.at("lambda_mask").get_to(o.weights.mask);
  j.at("lr_g").get_to(o.lr.g);
  j.at("lr_alpha").get_to(o.lr.alpha);
  j.at("lr_mask").get_to(o.lr.mask);
  j.at("max_steps").get_to(o.schedule.max_steps);
  j.at("eval_interval").get_to(o.schedule.eval_interval);
  j.at("patience").get_to(o.schedule.patience);
  o.language_mode = corpus::language_mode_from_string(j.at("language_mode").get<std::string>());
  j.at("num_update").get_to(o.num_update);
  j.at("num_retain").get_to(o.num_retain);
  j.at("seed").get_to(o.seed);
  j.at("dev_samples_per_edit").get_to(o.dev.samples_per_edit);
  j.at("dev_max_edits").get_to(o.dev.max_edits);
  j.at("dev_seed").get_to(o.dev.seed);
}

void to_json(nlohmann::json& j, const LogRecord& r) {
  j = {{"step", r.step},         {"L_rel", r.rel},         {"L_loc", r.loc},          {"L_mask", r.mask},
       {"dev_acc", r.dev_acc}, {"dev_con", r.dev_con}, {"dev_succ", r.dev_succ}};
}

void from_json(const nlohmann::json& j, LogRecord& r) {
  j.at("step").get_to(r.step);
  j.at("L_rel").get_to(r.rel);
  j.at("L_loc").get_to(r.loc);
  j.at("L_mask").get_to(r.mask);
  j.at("dev_acc").get_to(r.dev_acc);
  j.at("dev_con").get_to(r.dev_con);
  j.at("dev_succ").get_to(r.dev_succ);
}

LossParts editor_loss(const editors::Editor& editor, const evaluation::EvalContext& context,
                      const corpus::EditBatch& batch, const LossWeights& weights, editors::GateMode mode, Rng* rng) {
  const ParameterSet edited =
      editor.edit(context.model(), context.raw(), context.request(batch.edit, batch.desired_label), mode, rng);

  const Tensor update_logits =
      context.model().forward_tail(edited, Tensor::constant(context.features().gather_rows(batch.update)));
  const std::vector<int> targets(batch.update.size(), batch.desired_label);
  LossParts parts;
  parts.rel = scale(softmax_cross_entropy(update_logits, targets), weights.rel);

  const Tensor retain_logits =
      context.model().forward_tail(edited, Tensor::constant(context.features().gather_rows(batch.retain)));
  parts.loc = scale(kl_divergence(retain_logits, Tensor::constant(context.raw_logits().gather_rows(batch.retain))),
                    weights.loc);

  const auto* masks = editor.masks();
  parts.mask = masks != nullptr ? scale(masks->expected_l0_total(), weights.mask)
                                : Tensor::constant(Array::scalar(0.0));
  parts.total = add(add(parts.rel, parts.loc), parts.mask);
  return parts;
}

TrainState::TrainState(editors::Editor e, const LearningRates& lr, std::uint64_t seed)
    : editor(std::move(e)), rng(seed) {
  optimizer.add_group("g", editor.group("g"), lr.g);
  optimizer.add_group("alpha", editor.group("alpha"), lr.alpha);
  optimizer.add_group("mask", editor.group("mask"), lr.mask);
}

namespace {

std::vector<io::NamedArray> prefixed(const std::vector<io::NamedArray>& in, const std::string& prefix) {
  std::vector<io::NamedArray> out;
  for (const auto& t : in) out.push_back({prefix + t.name, t.value});
  return out;
}

io::Container unprefixed(const io::Container& c, const std::string& prefix) {
  io::Container out;
  for (const auto& t : c.tensors) {
    if (t.name.starts_with(prefix)) out.tensors.push_back({t.name.substr(prefix.size()), t.value});
  }
  return out;
}

}  // namespace

void TrainState::save(const std::filesystem::path& path, const nlohmann::json& options) const {
  std::ostringstream rng_state;
  rng_state << rng;
  nlohmann::json meta = {{"kind", "train_state"},
                         {"options", options},
                         {"editor", editor.describe()},
                         {"step", step},
                         {"adam_steps", optimizer.steps()},
                         {"best_succ", best_succ},
                         {"best_step", best_step},
                         {"since_best", since_best},
                         {"rng", rng_state.str()},
                         {"log", log},
                         {"pending", {pending.rel, pending.loc, pending.mask}},
                         {"pending_steps", pending_steps}};
  auto tensors = prefixed(editor.export_tensors(), "cur.");
  auto best_tensors = prefixed(best, "best.");
  auto adam = optimizer.export_state();
  tensors.insert(tensors.end(), best_tensors.begin(), best_tensors.end());
  tensors.insert(tensors.end(), adam.begin(), adam.end());
  io::write_container(path, std::move(meta), tensors);
}

void TrainState::load(const std::filesystem::path& path, const nlohmann::json& options) {
  const io::Container c = io::read_container(path);
  const auto& meta = c.metadata;
  if (meta.value("kind", "") != "train_state") throw ConfigError(path.string() + " is not a training state");
  if (meta.at("options") != options) {
    throw ConfigError("training state " + path.string() + " was written with different options");
  }
  if (meta.at("editor").at("variant") != editor.describe().at("variant")) {
    throw ConfigError("training state " + path.string() + " holds a different editor variant");
  }
  editor.import_tensors(unprefixed(c, "cur."));
  optimizer.import_state(c, meta.at("adam_steps").get<long long>());
  best = unprefixed(c, "best.").tensors;
  step = meta.at("step").get<long long>();
  best_succ = meta.at("best_succ").get<double>();
  best_step = meta.at("best_step").get<long long>();
  since_best = meta.at("since_best").get<long long>();
  std::istringstream rng_state(meta.at("rng").get<std::string>());
  rng_state >> rng;
  log = meta.at("log").get<std::vector<LogRecord>>();
  const auto p = meta.at("pending").get<std::vector<double>>();
  pending = {p.at(0), p.at(1), p.at(2)};
  pending_steps = meta.at("pending_steps").get<long long>();
}

StepLosses editor_train_step(TrainState& state, const evaluation::EvalContext& context,
                             const corpus::EditBatch& batch, const LossWeights& weights) {
  Tape tape;
  TapeScope scope(tape);
  const LossParts parts = editor_loss(state.editor, context, batch, weights, editors::GateMode::Sampled, &state.rng);
  const StepLosses out{parts.rel.item(), parts.loc.item(), parts.mask.item()};
  if (!std::isfinite(out.total())) {
    nlohmann::json dump = {{"step", state.step},
                           {"edit", batch.edit},
                           {"desired_label", batch.desired_label},
                           {"edit_language", batch.edit_language},
                           {"update", batch.update},
                           {"update_languages", batch.update_languages},
                           {"retain", batch.retain},
                           {"retain_languages", batch.retain_languages},
                           {"L_rel", std::to_string(out.rel)},
                           {"L_loc", std::to_string(out.loc)},
                           {"L_mask", std::to_string(out.mask)}};
    throw NumericalError("non-finite editor loss at step " + std::to_string(state.step) + ": " + dump.dump());
  }
  if (parts.total.recorded()) {
    backward(parts.total);
    state.optimizer.step();
  }
  return out;
}

std::vector<int> training_languages(const corpus::LanguageMode& mode, int num_languages) {
  if (mode.is_monolingual()) return {mode.language};
  std::vector<int> out(static_cast<std::size_t>(num_languages));
  std::iota(out.begin(), out.end(), 0);
  return out;
}

namespace {

void write_log(const std::filesystem::path& path, const std::vector<LogRecord>& log) {
  std::string text;
  for (const auto& r : log) text += nlohmann::json(r).dump() + "\n";
  io::write_file_atomic(path, text);
}

editors::Editor editor_with_values(const model::Transformer& model, const editors::Editor& like,
                                   const std::vector<io::NamedArray>& values) {
  editors::Editor out(like.variant(), model, like.num_languages(), like.options());
  if (like.transformer() != nullptr && like.transformer()->fixed_step_size()) {
    out.transformer()->fix_step_sizes(*like.transformer()->fixed_step_size());
  }
  io::Container c;
  c.tensors = values;
  out.import_tensors(c);
  return out;
}

}  // namespace

TrainResult train_editor(const model::Transformer& model, const ParameterSet& raw, const corpus::Splits& splits,
                         const editors::Editor& editor, const TrainOptions& options) {
  if (editor.variant() == editors::EditorVariant::Finetune) {
    throw ConfigError("the finetune editor has no training phase");
  }
  options.weights.validate();
  if (options.schedule.eval_interval <= 0 || options.schedule.max_steps < 0 || options.schedule.patience < 0) {
    throw ConfigError("schedule: eval_interval must be positive, max_steps and patience non-negative");
  }
  const int num_languages = splits.train.num_languages();
  if (options.language_mode.is_monolingual() &&
      (options.language_mode.language < 0 || options.language_mode.language >= num_languages)) {
    throw ConfigError("monolingual language " + std::to_string(options.language_mode.language) + " does not exist");
  }

  const nlohmann::json options_json = options;
  // Editor copies share tensor storage; train a private copy so the caller's
  // editor keeps its values.
  TrainState state(editor_with_values(model, editor, editor.export_tensors()), options.lr, options.seed);
  if (options.state_path && std::filesystem::exists(*options.state_path)) {
    state.load(*options.state_path, options_json);
  }

  const evaluation::EvalContext train_ctx(model, raw, splits.train);
  const evaluation::EvalContext dev_ctx(model, raw, splits.dev);
  const auto dev_languages = training_languages(options.language_mode, num_languages);
  evaluation::EvalOptions dev_options = options.dev;
  if (options.language_mode.is_monolingual()) dev_options.update_languages = dev_languages;

  TrainResult result{state.editor, {}, 0.0, 0, 0, false, false};
  bool stop = state.best_succ >= 0.0 && state.since_best >= options.schedule.patience;
  while (!stop && state.step < options.schedule.max_steps) {
    const auto batch =
        corpus::sample_edit_batch(splits.train, options.language_mode, state.rng, options.num_update, options.num_retain);
    const StepLosses losses = editor_train_step(state, train_ctx, batch, options.weights);
    ++state.step;
    state.pending.rel += losses.rel;
    state.pending.loc += losses.loc;
    state.pending.mask += losses.mask;
    ++state.pending_steps;

    if (state.step % options.schedule.eval_interval == 0 || state.step == options.schedule.max_steps) {
      const auto dev = evaluation::macro_average_eval(
          evaluation::make_edit_fn(state.editor, dev_ctx), dev_ctx, dev_languages, dev_options);
      const double n = static_cast<double>(state.pending_steps);
      state.log.push_back({state.step, state.pending.rel / n, state.pending.loc / n, state.pending.mask / n, dev.acc,
                           dev.con, dev.succ});
      state.pending = {};
      state.pending_steps = 0;
      if (dev.succ > state.best_succ) {
        state.best_succ = dev.succ;
        state.best_step = state.step;
        state.best = state.editor.export_tensors();
        state.since_best = 0;
      } else {
        state.since_best = state.step - state.best_step;
      }
      if (options.log_path) write_log(*options.log_path, state.log);
      if (options.state_path) state.save(*options.state_path, options_json);
      if (state.since_best >= options.schedule.patience) {
        stop = true;
        result.early_stopped = true;
      }
    }
    if (options.stop_after > 0 && state.step >= options.stop_after && state.step < options.schedule.max_steps &&
        !stop) {
      if (options.state_path) state.save(*options.state_path, options_json);
      result.interrupted = true;
      break;
    }
  }

  result.log = state.log;
  result.steps = state.step;
  result.best_step = state.best_step;
  result.best_succ = std::max(state.best_succ, 0.0);
  result.editor = editor_with_values(model, state.editor,
                                     state.best.empty() ? state.editor.export_tensors() : state.best);
  return result;
}

// ---- pretraining -----------------------------------------------------------

namespace {

model::TokenBatch tokens_of(const corpus::SplitData& split, std::span<const std::size_t> indices) {
  model::TokenBatch out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(split[i].tokens);
  return out;
}

}  // namespace

double dataset_loss(const model::Transformer& model, const ParameterSet& params, const corpus::SplitData& split) {
  if (split.size() == 0) return 0.0;
  const ParameterSet frozen = params.detached();
  std::vector<std::size_t> all(split.size());
  std::iota(all.begin(), all.end(), 0);
  const Array logits = model.logits(frozen, model.features(frozen, tokens_of(split, all)));
  std::vector<int> labels;
  for (const auto& ex : split.examples()) labels.push_back(ex.label);
  return softmax_cross_entropy(Tensor::constant(logits), labels).item();
}

std::vector<double> language_accuracy(const model::Transformer& model, const ParameterSet& params,
                                      const corpus::SplitData& split) {
  const ParameterSet frozen = params.detached();
  std::vector<double> out;
  for (int l = 0; l < split.num_languages(); ++l) {
    const auto& idx = split.by_language(l);
    if (idx.empty()) {
      out.push_back(0.0);
      continue;
    }
    const auto preds = argmax(model.logits(frozen, model.features(frozen, tokens_of(split, idx))));
    std::size_t hits = 0;
    for (std::size_t k = 0; k < idx.size(); ++k) hits += preds[k] == split[idx[k]].label;
    out.push_back(static_cast<double>(hits) / static_cast<double>(idx.size()));
  }
  return out;
}

PretrainResult pretrain_raw_model(const model::Transformer& model, const corpus::SplitData& train,
                                  const PretrainOptions& options) {
  if (train.size() == 0) throw ConfigError("pretraining needs a non-empty training split");
  if (options.batch_size == 0) throw ConfigError("pretraining batch size must be positive");
  PretrainResult result;
  ParameterSet params = model.init(options.seed).trainable();
  result.initial_loss = dataset_loss(model, params, train);

  Adam adam;
  adam.add_group("model", params.tensors(), options.lr);
  Rng rng(options.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  for (long long step = 0; step < options.steps; ++step) {
    std::vector<std::size_t> batch;
    while (batch.size() < options.batch_size) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
      if (batch.size() == train.size()) break;
    }
    std::vector<int> labels;
    for (std::size_t i : batch) labels.push_back(train[i].label);
    Tape tape;
    TapeScope scope(tape);
    const Tensor loss = softmax_cross_entropy(model.forward(params, tokens_of(train, batch)), labels);
    if (!std::isfinite(loss.item())) {
      throw NumericalError("non-finite pretraining loss at step " + std::to_string(step));
    }
    backward(loss);
    adam.step();
  }
  result.params = params.detached();
  result.final_loss = dataset_loss(model, result.params, train);
  result.language_accuracy = language_accuracy(model, result.params, train);
  return result;
}

}  // namespace edlab::training

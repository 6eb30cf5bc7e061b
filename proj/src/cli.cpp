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

#include "edlab/cli.hpp"

#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

#include "edlab/config.hpp"
#include "edlab/corpus.hpp"
#include "edlab/editors.hpp"
#include "edlab/errors.hpp"
#include "edlab/evaluation.hpp"
#include "edlab/model.hpp"
#include "edlab/training.hpp"

namespace edlab::cli {

namespace fs = std::filesystem;

namespace {

void init_logging() {
  const char* level = std::getenv("EDLAB_LOG");
  spdlog::set_pattern("[%H:%M:%S] [%^%l%$] %v");
  if (level == nullptr || *level == '\0') {
    spdlog::set_level(spdlog::level::info);
    return;
  }
  const auto parsed = spdlog::level::from_str(level);
  if (parsed == spdlog::level::off && std::string(level) != "off") {
    throw ConfigError(std::string("EDLAB_LOG: unknown level '") + level + "'");
  }
  spdlog::set_level(parsed);
}

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::string out;
  bool force = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "INI run configuration (defaults when omitted)");
  cmd->add_option("--seed", c.seed, "Override run.seed");
  cmd->add_option("--workers", c.workers, "Override run.workers");
  cmd->add_option("--out", c.out, "Output path")->required();
  cmd->add_flag("--force", c.force, "Overwrite existing outputs");
}

config::RunConfig resolve(const Common& c) {
  config::RunConfig cfg = c.config.empty() ? config::RunConfig{} : config::load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (c.workers) {
    if (*c.workers < 1) throw ConfigError("--workers must be at least 1");
    cfg.workers = *c.workers;
  }
  return cfg;
}

void refuse_overwrite(const fs::path& path, bool force) {
  if (fs::exists(path) && !force) {
    throw ConfigError(path.string() + " already exists (pass --force to overwrite)");
  }
}

void write_json(const fs::path& path, const nlohmann::json& j) { io::write_file_atomic(path, j.dump(2) + "\n"); }

struct Data {
  corpus::LoadedDataset loaded;
  corpus::Splits splits;
};

Data load_data(const std::string& dir) {
  if (dir.empty()) throw ConfigError("--data is required");
  Data d{corpus::read_dataset(dir), {}};
  d.splits = corpus::make_splits(d.loaded.dataset, d.loaded.class_split);
  return d;
}

model::LoadedModel load_raw(const std::string& path, const model::ModelConfig& expected) {
  if (path.empty()) throw ConfigError("--raw is required");
  model::LoadedModel m = model::load_model(path);
  if (!(m.config == expected)) {
    throw ConfigError("raw checkpoint " + path + " does not match the data and config: checkpoint has " +
                      nlohmann::json(m.config).dump() + ", expected " + nlohmann::json(expected).dump());
  }
  model::Transformer(m.config).check_compatible(m.params);
  return m;
}

// ---- gen-data --------------------------------------------------------------

void cmd_gen_data(const Common& common) {
  const auto cfg = resolve(common);
  const fs::path out = common.out;
  refuse_overwrite(out / "examples.jsonl", common.force);
  refuse_overwrite(out / "metadata.json", common.force);
  const auto dataset = corpus::generate_corpus(cfg.seed, cfg.corpus);
  const auto splits = corpus::split(dataset, cfg.seed, cfg.split_ratios);
  write_dataset(out, dataset, splits.class_split, {{"run_config", config::to_json(cfg)}});
  spdlog::info("wrote {} examples ({} train / {} dev / {} test) to {}", dataset.examples.size(), splits.train.size(),
               splits.dev.size(), splits.test.size(), out.string());
}

// ---- pretrain --------------------------------------------------------------

void cmd_pretrain(const Common& common, const std::string& data_dir) {
  const auto cfg = resolve(common);
  refuse_overwrite(common.out, common.force);
  const Data data = load_data(data_dir);
  const model::Transformer model(cfg.model_for(data.loaded.dataset));
  auto options = cfg.pretrain;
  options.seed = cfg.seed;
  spdlog::info("pretraining for {} steps on {} examples", options.steps, data.splits.train.size());
  const auto result = training::pretrain_raw_model(model, data.splits.train, options);
  for (std::size_t l = 0; l < result.language_accuracy.size(); ++l) {
    spdlog::info("language {} train accuracy {:.4f}", l, result.language_accuracy[l]);
  }
  spdlog::info("train loss {:.4f} -> {:.4f}", result.initial_loss, result.final_loss);
  model::save_model(common.out, model.config(), result.params,
                    {{"seed", cfg.seed},
                     {"run_config", config::to_json(cfg)},
                     {"data_seed", data.loaded.dataset.seed},
                     {"train_accuracy", result.language_accuracy},
                     {"initial_loss", result.initial_loss},
                     {"final_loss", result.final_loss}});
}

// ---- train-editor ----------------------------------------------------------

struct TrainArgs {
  std::string data, raw, variant, language_mode, log;
  long long stop_after = 0;
};

void cmd_train_editor(const Common& common, const TrainArgs& args) {
  auto cfg = resolve(common);
  if (!args.variant.empty()) cfg.variant = editors::editor_variant_from_string(args.variant);
  if (!args.language_mode.empty()) cfg.train.language_mode = corpus::language_mode_from_string(args.language_mode);
  const fs::path out = common.out;
  const fs::path state_path = out.string() + ".state";
  const fs::path log_path = args.log.empty() ? fs::path(out.string() + ".log.jsonl") : fs::path(args.log);
  refuse_overwrite(out, common.force);
  if (common.force) fs::remove(state_path);

  const Data data = load_data(args.data);
  const model::ModelConfig mcfg = cfg.model_for(data.loaded.dataset);
  const auto raw = load_raw(args.raw, mcfg);
  const model::Transformer model(mcfg);
  const auto fingerprint = raw.params.fingerprint();

  auto options = cfg.train_options();
  options.state_path = state_path;
  options.log_path = log_path;
  options.stop_after = args.stop_after;
  if (fs::exists(state_path)) spdlog::info("resuming from {}", state_path.string());
  spdlog::info("training {} editor ({}) for up to {} steps", editors::to_string(cfg.variant),
               corpus::to_string(options.language_mode), options.schedule.max_steps);

  editors::Editor editor(cfg.variant, model, mcfg.num_languages, cfg.editor_options());
  auto result = training::train_editor(model, raw.params, data.splits, editor, options);
  if (raw.params.fingerprint() != fingerprint) throw ContractViolation("raw model changed during editor training");
  if (result.interrupted) {
    spdlog::warn("stopped after {} steps; state kept in {}", result.steps, state_path.string());
    return;
  }
  spdlog::info("best dev succ {:.4f} at step {} ({} steps run{})", result.best_succ, result.best_step, result.steps,
               result.early_stopped ? ", early stop" : "");
  result.editor.save(out, {{"seed", cfg.seed},
                           {"run_config", config::to_json(cfg)},
                           {"model", mcfg},
                           {"language_mode", corpus::to_string(options.language_mode)},
                           {"best_step", result.best_step},
                           {"best_dev_succ", result.best_succ},
                           {"steps", result.steps}});
}

// ---- evaluate --------------------------------------------------------------

struct EvalArgs {
  std::string data, raw, editor, variant, split;
};

nlohmann::json similarity_report(const editors::LanguageMaskSet& masks, const config::RunConfig& cfg) {
  return evaluation::similarity_to_json(evaluation::mask_similarity_matrix(masks, cfg.top_fraction, cfg.mask_basis));
}

void cmd_evaluate(const Common& common, const EvalArgs& args) {
  auto cfg = resolve(common);
  if (!args.split.empty()) cfg.eval_split = corpus::split_from_string(args.split);
  refuse_overwrite(common.out, common.force);
  const Data data = load_data(args.data);
  const model::ModelConfig mcfg = cfg.model_for(data.loaded.dataset);
  const auto raw = load_raw(args.raw, mcfg);
  const model::Transformer model(mcfg);
  const auto& split = data.splits.get(cfg.eval_split);
  const evaluation::EvalContext context(model, raw.params, split);

  std::optional<editors::Editor> editor;
  nlohmann::json editor_meta = nullptr;
  std::string variant;
  std::string language_mode = "none";
  evaluation::EditFn edit;
  if (!args.editor.empty()) {
    if (!args.variant.empty()) throw ConfigError("pass either --editor or --variant, not both");
    editor.emplace(editors::Editor::load(args.editor, model));
    editor_meta = io::read_container(args.editor).metadata;
    editor_meta.erase("tensors");
    language_mode = editor_meta.value("language_mode", "none");
    variant = editors::to_string(editor->variant());
    edit = evaluation::make_edit_fn(*editor, context);
  } else if (args.variant == "identity") {
    variant = "identity";
    edit = evaluation::identity_edit_fn(context);
  } else if (args.variant.empty() || args.variant == "finetune") {
    editor.emplace(editors::EditorVariant::Finetune, model, mcfg.num_languages, cfg.editor_options());
    variant = "finetune";
    edit = evaluation::make_edit_fn(*editor, context);
  } else {
    throw ConfigError("--variant must be 'finetune' or 'identity' without --editor (trained editors load from --editor)");
  }

  std::vector<int> languages = cfg.editing_languages;
  if (languages.empty()) {
    for (int l = 0; l < split.num_languages(); ++l) languages.push_back(l);
  }
  spdlog::info("evaluating {} on the {} split ({} examples)", variant, corpus::to_string(cfg.eval_split), split.size());
  const auto record = evaluation::macro_average_eval(edit, context, languages, cfg.eval_options());

  nlohmann::json report = evaluation::to_json(record);
  report["variant"] = variant;
  report["language_mode"] = language_mode;
  report["seed"] = cfg.seed;
  report["split"] = corpus::to_string(cfg.eval_split);
  report["editing_languages"] = languages;
  report["mask_similarity"] =
      editor && editor->masks() != nullptr ? similarity_report(*editor->masks(), cfg) : nullptr;
  report["run_config"] = config::to_json(cfg);
  report["editor_metadata"] = editor_meta;
  write_json(common.out, report);
  fs::path csv = common.out;
  csv.replace_extension(".csv");
  io::write_file_atomic(csv, evaluation::metrics_csv(record));
  spdlog::info("acc {:.4f} con {:.4f} succ {:.4f}", record.acc, record.con, record.succ);
}

// ---- analyze-masks ---------------------------------------------------------

void cmd_analyze_masks(const Common& common, const std::string& editor_path, std::optional<double> top_fraction,
                       const std::string& basis) {
  auto cfg = resolve(common);
  if (top_fraction) cfg.top_fraction = *top_fraction;
  if (!basis.empty()) cfg.mask_basis = evaluation::mask_basis_from_string(basis);
  if (editor_path.empty()) throw ConfigError("--editor is required");
  refuse_overwrite(common.out, common.force);
  auto meta = io::read_container(editor_path).metadata;
  if (!meta.contains("model")) throw ConfigError(editor_path + " does not record its model configuration");
  const model::Transformer model(meta.at("model").get<model::ModelConfig>());
  const auto editor = editors::Editor::load(editor_path, model);
  if (editor.masks() == nullptr) {
    throw ConfigError("editor " + editor_path + " (" + editors::to_string(editor.variant()) +
                      ") has no language masks to analyze");
  }
  const auto matrix = evaluation::mask_similarity_matrix(*editor.masks(), cfg.top_fraction, cfg.mask_basis);
  nlohmann::json by_basis;
  for (auto basis : {evaluation::MaskBasis::Gates, evaluation::MaskBasis::LogAlpha}) {
    by_basis[evaluation::to_string(basis)] =
        evaluation::similarity_to_json(evaluation::mask_similarity_matrix(*editor.masks(), cfg.top_fraction, basis));
  }
  meta.erase("tensors");
  nlohmann::json doc = {{"variant", editors::to_string(editor.variant())},
                        {"seed", meta.value("seed", cfg.seed)},
                        {"top_fraction", cfg.top_fraction},
                        {"num_languages", editor.masks()->num_languages()},
                        {"mean_gate_activity", editor.masks()->mean_gate_activity()},
                        {"basis", evaluation::to_string(cfg.mask_basis)},
                        {"matrix", evaluation::similarity_to_json(matrix)},
                        {"matrices", by_basis},
                        {"run_config", config::to_json(cfg)},
                        {"editor_metadata", meta}};
  write_json(common.out, doc);
  std::string csv;
  for (const auto& row : matrix) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      csv += (i ? "," : "") + (std::isnan(row[i]) ? std::string("nan") : fmt::format("{:.17g}", row[i]));
    }
    csv += "\n";
  }
  fs::path csv_path = common.out;
  csv_path.replace_extension(".csv");
  io::write_file_atomic(csv_path, csv);
  spdlog::info("wrote {}x{} similarity matrix to {}", matrix.size(), matrix.size(), common.out);
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"edlab: cross-lingual model editing on a synthetic parallel corpus"};
  app.require_subcommand(1);

  Common gen, pre, tr, ev, an;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate the synthetic corpus and its split");
  add_common(gen_cmd, gen);

  std::string pre_data;
  auto* pre_cmd = app.add_subcommand("pretrain", "Pretrain the raw model");
  add_common(pre_cmd, pre);
  pre_cmd->add_option("--data", pre_data, "Dataset directory")->required();

  TrainArgs targs;
  auto* tr_cmd = app.add_subcommand("train-editor", "Train an editor against a raw model");
  add_common(tr_cmd, tr);
  tr_cmd->add_option("--data", targs.data, "Dataset directory")->required();
  tr_cmd->add_option("--raw", targs.raw, "Raw-model checkpoint")->required();
  tr_cmd->add_option("--variant", targs.variant, "Override editor.variant");
  tr_cmd->add_option("--language-mode", targs.language_mode, "Override train.language_mode");
  tr_cmd->add_option("--log", targs.log, "Training log path (default <out>.log.jsonl)");
  tr_cmd->add_option("--stop-after", targs.stop_after, "Stop after this many steps, keeping the resumable state");

  EvalArgs eargs;
  auto* ev_cmd = app.add_subcommand("evaluate", "Macro-averaged acc/con/succ of an editor");
  add_common(ev_cmd, ev);
  ev_cmd->add_option("--data", eargs.data, "Dataset directory")->required();
  ev_cmd->add_option("--raw", eargs.raw, "Raw-model checkpoint")->required();
  ev_cmd->add_option("--editor", eargs.editor, "Editor checkpoint");
  ev_cmd->add_option("--variant", eargs.variant, "finetune or identity when no editor checkpoint is given");
  ev_cmd->add_option("--split", eargs.split, "Override eval.split");

  std::string an_editor;
  std::optional<double> an_top;
  std::string an_basis;
  auto* an_cmd = app.add_subcommand("analyze-masks", "Cosine similarity of language masks");
  add_common(an_cmd, an);
  an_cmd->add_option("--editor", an_editor, "Masked editor checkpoint")->required();
  an_cmd->add_option("--top-fraction", an_top, "Override eval.top_fraction");
  an_cmd->add_option("--basis", an_basis, "Override eval.mask_basis (gates or log_alpha)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    init_logging();
    if (*gen_cmd) cmd_gen_data(gen);
    if (*pre_cmd) cmd_pretrain(pre, pre_data);
    if (*tr_cmd) cmd_train_editor(tr, targs);
    if (*ev_cmd) cmd_evaluate(ev, eargs);
    if (*an_cmd) cmd_analyze_masks(an, an_editor, an_top, an_basis);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.reserve(args.size() + 1);
  argv.push_back("edlab");
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace edlab::cli

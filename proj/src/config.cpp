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

#include "edlab/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <functional>
#include <sstream>

#include "edlab/errors.hpp"

namespace edlab::config {

namespace {

struct Entry {
  std::string section;
  std::string key;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
  std::string name() const { return section + "." + key; }
};

template <typename T>
T parse_number(const std::string& name, const std::string& text) {
  T value{};
  const char* begin = text.data();
  const char* end = begin + text.size();
  const auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("config key '" + name + "': cannot parse '" + text + "' as a number");
  }
  return value;
}

// Shortest text that parses back to the same double.
std::string format_double(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

template <typename T>
Entry number(std::string section, std::string key, T& field) {
  Entry e{std::move(section), std::move(key), nullptr, nullptr};
  const std::string name = e.name();
  e.set = [&field, name](const std::string& s) { field = parse_number<T>(name, s); };
  if constexpr (std::is_floating_point_v<T>) {
    e.get = [&field] { return format_double(field); };
  } else {
    e.get = [&field] { return std::to_string(field); };
  }
  return e;
}

std::vector<int> parse_int_list(const std::string& name, const std::string& text) {
  std::vector<int> out;
  if (text == "all" || text.empty()) return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(' ');
    const auto e = item.find_last_not_of(' ');
    if (b == std::string::npos) throw ConfigError("config key '" + name + "': empty list item");
    out.push_back(parse_number<int>(name, item.substr(b, e - b + 1)));
  }
  return out;
}

std::string format_int_list(const std::vector<int>& v) {
  if (v.empty()) return "all";
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

template <typename F>
Entry wrapped(std::string section, std::string key, F&& set_fn, std::function<std::string()> get) {
  Entry e{std::move(section), std::move(key), nullptr, std::move(get)};
  const std::string name = e.name();
  e.set = [set_fn = std::forward<F>(set_fn), name](const std::string& s) {
    try {
      set_fn(s);
    } catch (const ConfigError& err) {
      throw ConfigError("config key '" + name + "': " + err.what());
    }
  };
  return e;
}

std::vector<Entry> entries(RunConfig& c) {
  std::vector<Entry> e;
  e.push_back(number("run", "seed", c.seed));
  e.push_back(number("run", "workers", c.workers));

  e.push_back(number("corpus", "num_languages", c.corpus.num_languages));
  e.push_back(number("corpus", "num_relations", c.corpus.num_relations));
  e.push_back(number("corpus", "num_subjects", c.corpus.num_subjects));
  e.push_back(number("corpus", "objects_per_relation", c.corpus.objects_per_relation));
  e.push_back(number("corpus", "num_syllables", c.corpus.num_syllables));
  e.push_back(number("corpus", "subject_length", c.corpus.subject_length));
  e.push_back(wrapped(
      "corpus", "mode", [&c](const std::string& s) { c.corpus.mode = corpus::task_mode_from_string(s); },
      [&c] { return corpus::to_string(c.corpus.mode); }));
  e.push_back(number("corpus", "split_train", c.split_ratios[0]));
  e.push_back(number("corpus", "split_dev", c.split_ratios[1]));
  e.push_back(number("corpus", "split_test", c.split_ratios[2]));

  e.push_back(number("model", "hidden_size", c.model.hidden_size));
  e.push_back(number("model", "num_layers", c.model.num_layers));
  e.push_back(number("model", "num_heads", c.model.num_heads));
  e.push_back(number("model", "max_seq_len", c.model.max_seq_len));
  e.push_back(number("model", "num_editable_layers", c.model.num_editable_layers));
  e.push_back(number("model", "mlp_ratio", c.model.mlp_ratio));

  e.push_back(number("pretrain", "steps", c.pretrain.steps));
  e.push_back(number("pretrain", "batch_size", c.pretrain.batch_size));
  e.push_back(number("pretrain", "lr", c.pretrain.lr));

  e.push_back(wrapped(
      "editor", "variant", [&c](const std::string& s) { c.variant = editors::editor_variant_from_string(s); },
      [&c] { return editors::to_string(c.variant); }));
  e.push_back(number("editor", "g_hidden", c.editor.transformer.hidden));
  e.push_back(number("editor", "step_init", c.editor.transformer.step_init));
  e.push_back(number("editor", "mask_init", c.editor.mask_init));
  e.push_back(number("editor", "finetune_max_steps", c.editor.finetune.max_steps));
  e.push_back(number("editor", "finetune_lr", c.editor.finetune.lr));

  auto& t = c.train;
  e.push_back(wrapped(
      "train", "language_mode",
      [&t](const std::string& s) { t.language_mode = corpus::language_mode_from_string(s); },
      [&t] { return corpus::to_string(t.language_mode); }));
  e.push_back(number("train", "lambda_rel", t.weights.rel));
  e.push_back(number("train", "lambda_loc", t.weights.loc));
  e.push_back(number("train", "lambda_mask", t.weights.mask));
  e.push_back(number("train", "lr_g", t.lr.g));
  e.push_back(number("train", "lr_alpha", t.lr.alpha));
  e.push_back(number("train", "lr_mask", t.lr.mask));
  e.push_back(number("train", "max_steps", t.schedule.max_steps));
  e.push_back(number("train", "eval_interval", t.schedule.eval_interval));
  e.push_back(number("train", "patience", t.schedule.patience));
  e.push_back(number("train", "num_update", t.num_update));
  e.push_back(number("train", "num_retain", t.num_retain));
  e.push_back(number("train", "dev_samples_per_edit", t.dev.samples_per_edit));
  e.push_back(number("train", "dev_max_edits", t.dev.max_edits));

  e.push_back(wrapped(
      "eval", "split", [&c](const std::string& s) { c.eval_split = corpus::split_from_string(s); },
      [&c] { return corpus::to_string(c.eval_split); }));
  e.push_back(wrapped(
      "eval", "editing_languages",
      [&c](const std::string& s) { c.editing_languages = parse_int_list("eval.editing_languages", s); },
      [&c] { return format_int_list(c.editing_languages); }));
  e.push_back(number("eval", "samples_per_edit", c.samples_per_edit));
  e.push_back(number("eval", "max_edits", c.max_edits));
  e.push_back(number("eval", "top_fraction", c.top_fraction));
  e.push_back(wrapped(
      "eval", "mask_basis", [&c](const std::string& s) { c.mask_basis = evaluation::mask_basis_from_string(s); },
      [&c] { return evaluation::to_string(c.mask_basis); }));
  return e;
}

void validate(const RunConfig& c) {
  c.corpus.validate();
  c.train.weights.validate();
  if (c.workers < 1) throw ConfigError("config key 'run.workers' must be at least 1");
  if (c.samples_per_edit == 0) throw ConfigError("config key 'eval.samples_per_edit' must be positive");
  if (c.train.num_update == 0 || c.train.num_retain == 0) {
    throw ConfigError("config keys 'train.num_update' and 'train.num_retain' must be positive");
  }
  if (!(c.top_fraction > 0.0 && c.top_fraction <= 1.0)) {
    throw ConfigError("config key 'eval.top_fraction' must lie in (0, 1]");
  }
}

}  // namespace

model::ModelConfig RunConfig::model_for(const corpus::Dataset& dataset) const {
  model::ModelConfig m = model;
  m.vocab_size = dataset.vocab.size();
  m.num_languages = dataset.config.num_languages;
  if (dataset.config.mode == corpus::TaskMode::FactRecall) {
    m.head_mode = model::HeadMode::FactRecall;
  } else {
    m.head_mode = model::HeadMode::Classification;
  }
  m.num_classes = dataset.num_labels();
  m.validate();
  return m;
}

editors::EditorOptions RunConfig::editor_options() const {
  editors::EditorOptions o = editor;
  o.transformer.seed = seed;
  return o;
}

training::TrainOptions RunConfig::train_options() const {
  training::TrainOptions o = train;
  o.seed = seed;
  o.dev.seed = seed;
  o.dev.workers = workers;
  return o;
}

evaluation::EvalOptions RunConfig::eval_options() const {
  evaluation::EvalOptions o;
  o.samples_per_edit = samples_per_edit;
  o.seed = seed;
  o.workers = workers;
  o.max_edits = max_edits;
  return o;
}

RunConfig parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  RunConfig c;
  auto table = entries(c);
  for (const auto& [section, keys] : tree) {
    if (keys.empty()) throw ConfigError("unknown config key '" + section + "' (keys must live in a section)");
    for (const auto& [key, value] : keys) {
      auto it = std::find_if(table.begin(), table.end(),
                             [&](const Entry& e) { return e.section == section && e.key == key; });
      if (it == table.end()) throw ConfigError("unknown config key '" + section + "." + key + "'");
      it->set(value.get_value<std::string>());
    }
  }
  validate(c);
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file " + path.string() + " does not exist");
  return parse_config(io::read_file(path));
}

std::string format_config(const RunConfig& config) {
  RunConfig copy = config;
  std::string out;
  std::string section;
  for (const auto& e : entries(copy)) {
    if (e.section != section) {
      out += (section.empty() ? "[" : "\n[") + e.section + "]\n";
      section = e.section;
    }
    out += e.key + " = " + e.get() + "\n";
  }
  return out;
}

nlohmann::json to_json(const RunConfig& config) {
  RunConfig copy = config;
  nlohmann::json j = nlohmann::json::object();
  for (const auto& e : entries(copy)) j[e.section][e.key] = e.get();
  return j;
}

}  // namespace edlab::config

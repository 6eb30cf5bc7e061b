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

// Synthetic parallel corpus.
//
// Every (subject, relation) query is one equivalence class, rendered once in
// each of K synthetic languages. A language is a bijection from shared
// concepts (subject syllables, relation words, template words) onto its own
// disjoint token range, plus its own order of the template slots. Tokens
// outside every language range are shared specials ([PAD], [MASK]).

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace edlab::corpus {

using Rng = std::mt19937_64;

enum class TaskMode { FactRecall, Classification };
std::string to_string(TaskMode mode);
TaskMode task_mode_from_string(const std::string& s);

struct CorpusConfig {
  int num_languages = 4;
  int num_relations = 8;
  int num_subjects = 120;
  int objects_per_relation = 12;
  int num_syllables = 16;
  int subject_length = 2;
  TaskMode mode = TaskMode::FactRecall;

  void validate() const;
  int num_labels() const { return mode == TaskMode::FactRecall ? num_relations * objects_per_relation : 3; }
  friend bool operator==(const CorpusConfig&, const CorpusConfig&) = default;
};

void to_json(nlohmann::json& j, const CorpusConfig& c);
void from_json(const nlohmann::json& j, CorpusConfig& c);

struct FactTriple {
  int subject = 0;
  int relation = 0;
  int object = 0;  // label index
  friend bool operator==(const FactTriple&, const FactTriple&) = default;
};

struct Example {
  int class_id = 0;
  int language = 0;
  std::vector<int> tokens;
  int label = 0;
  friend bool operator==(const Example&, const Example&) = default;
};

struct Query {
  int subject = 0;
  int relation = 0;
  friend bool operator==(const Query&, const Query&) = default;
};

enum class Split { Train = 0, Dev = 1, Test = 2 };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

// Slot kinds in the canonical template order.
enum class Slot { Subject = 0, Relation = 1, Function = 2, Mask = 3 };
inline constexpr int kNumSlots = 4;

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kMask = 1;
  static constexpr int kNumSpecials = 2;

  Vocabulary() = default;
  Vocabulary(const CorpusConfig& config, Rng& rng);

  int size() const { return kNumSpecials + num_languages_ * concepts_; }
  int num_languages() const { return num_languages_; }
  int concepts() const { return concepts_; }

  int syllable_token(int language, int syllable) const;
  int relation_token(int language, int relation) const;
  int function_token(int language, int relation) const;

  // Language owning a surface token, or -1 for specials.
  int language_of(int token) const;
  const std::array<int, kNumSlots>& slot_order(int language) const { return slot_order_[language]; }

  std::vector<int> render(int language, std::span<const int> syllables, int relation) const;
  // Inverse of render(); throws ConfigError on tokens that do not parse.
  std::pair<std::vector<int>, int> parse(std::span<const int> tokens) const;

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);
  friend bool operator==(const Vocabulary&, const Vocabulary&) = default;

 private:
  int concept_token(int language, int concept_id) const;

  int num_languages_ = 0;
  int num_syllables_ = 0;
  int num_relations_ = 0;
  int subject_length_ = 0;
  int concepts_ = 0;
  // permutation[l][concept] -> offset inside language l's range
  std::vector<std::vector<int>> permutation_;
  std::vector<std::vector<int>> inverse_;
  std::vector<std::array<int, kNumSlots>> slot_order_;
};

struct Dataset {
  CorpusConfig config;
  std::uint64_t seed = 0;
  Vocabulary vocab;
  std::vector<std::vector<int>> subjects;  // syllables per subject id
  std::vector<FactTriple> classes;         // indexed by class_id
  std::vector<Example> examples;           // class-major, language-minor

  int num_labels() const { return config.num_labels(); }
  // Half-open range of labels an edit of this class may request.
  std::pair<int, int> label_pool(int class_id) const;
  Query decode(const Example& example) const;
};

Dataset generate_corpus(std::uint64_t seed, const CorpusConfig& config);

// Examples of one split plus the indices needed for sampling.
class SplitData {
 public:
  SplitData() = default;
  SplitData(const Dataset& dataset, std::vector<Example> examples);

  const std::vector<Example>& examples() const { return examples_; }
  std::size_t size() const { return examples_.size(); }
  const Example& operator[](std::size_t i) const { return examples_[i]; }
  int num_languages() const { return num_languages_; }
  int num_labels() const { return num_labels_; }

  const std::vector<std::size_t>& by_language(int language) const { return by_language_.at(language); }
  // Index of the class member in `language`, or npos.
  std::size_t member(int class_id, int language) const;
  // All indices of I(x) for the example at `index` (including itself).
  std::vector<std::size_t> parallel(std::size_t index) const;
  std::pair<int, int> label_pool(int class_id) const { return pools_.at(class_id); }
  std::vector<int> class_ids() const;
  std::vector<int> subjects() const;

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

 private:
  std::vector<Example> examples_;
  int num_languages_ = 0;
  int num_labels_ = 0;
  std::vector<std::vector<std::size_t>> by_language_;
  std::unordered_map<int, std::vector<std::size_t>> members_;
  std::unordered_map<int, std::pair<int, int>> pools_;
  std::unordered_map<int, int> class_subject_;
};

struct Splits {
  std::vector<Split> class_split;  // indexed by class_id
  SplitData train;
  SplitData dev;
  SplitData test;

  const SplitData& get(Split s) const;
};

// Subject-disjoint split at the class level.
Splits split(const Dataset& dataset, std::uint64_t seed, std::array<int, 3> ratios = {8, 1, 1});
Splits make_splits(const Dataset& dataset, std::vector<Split> class_split);

struct LanguageMode {
  enum class Kind { CrossLingual, Monolingual };
  Kind kind = Kind::CrossLingual;
  int language = 0;

  static LanguageMode cross_lingual() { return {}; }
  static LanguageMode monolingual(int language) { return {Kind::Monolingual, language}; }
  bool is_monolingual() const { return kind == Kind::Monolingual; }
  friend bool operator==(const LanguageMode&, const LanguageMode&) = default;
};
std::string to_string(const LanguageMode& mode);
LanguageMode language_mode_from_string(const std::string& s);

struct EditBatch {
  std::size_t edit = 0;
  int desired_label = 0;
  int edit_language = 0;
  std::vector<std::size_t> update;
  std::vector<int> update_languages;
  std::vector<std::size_t> retain;
  std::vector<int> retain_languages;
};

EditBatch sample_edit_batch(const SplitData& split, const LanguageMode& mode, Rng& rng,
                            std::size_t num_update = 1, std::size_t num_retain = 1);

// examples.jsonl (one record per example) and metadata.json next to it.
void write_dataset(const std::filesystem::path& dir, const Dataset& dataset, const std::vector<Split>& class_split,
                   const nlohmann::json& extra = nlohmann::json::object());
struct LoadedDataset {
  Dataset dataset;
  std::vector<Split> class_split;
  nlohmann::json metadata;
};
LoadedDataset read_dataset(const std::filesystem::path& dir);

}  // namespace edlab::corpus

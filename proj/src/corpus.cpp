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

#include "edlab/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "edlab/checkpoint.hpp"
#include "edlab/errors.hpp"

namespace edlab::corpus {

namespace {

template <typename T>
T uniform_index(Rng& rng, T n) {
  return std::uniform_int_distribution<T>(0, n - 1)(rng);
}

}  // namespace

std::string to_string(TaskMode mode) { return mode == TaskMode::FactRecall ? "fact" : "classification"; }

TaskMode task_mode_from_string(const std::string& s) {
  if (s == "fact" || s == "fact_recall") return TaskMode::FactRecall;
  if (s == "classification") return TaskMode::Classification;
  throw ConfigError("unknown corpus mode '" + s + "' (expected fact or classification)");
}

void CorpusConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("corpus config: " + what); };
  if (num_languages < 1) fail("num_languages must be at least 1");
  if (num_relations < 1) fail("num_relations must be at least 1");
  if (objects_per_relation < 2) fail("objects_per_relation must be at least 2 (edits need an alternative label)");
  if (num_subjects < 3) fail("num_subjects must be at least 3 (subject-disjoint splits and retain examples)");
  if (num_syllables < 1 || subject_length < 1) fail("num_syllables and subject_length must be positive");
  const double combos = std::pow(static_cast<double>(num_syllables), subject_length);
  if (combos < num_subjects) fail("num_syllables^subject_length is smaller than num_subjects");
}

void to_json(nlohmann::json& j, const CorpusConfig& c) {
  j = {{"num_languages", c.num_languages},   {"num_relations", c.num_relations},
       {"num_subjects", c.num_subjects},     {"objects_per_relation", c.objects_per_relation},
       {"num_syllables", c.num_syllables},   {"subject_length", c.subject_length},
       {"mode", to_string(c.mode)}};
}

void from_json(const nlohmann::json& j, CorpusConfig& c) {
  j.at("num_languages").get_to(c.num_languages);
  j.at("num_relations").get_to(c.num_relations);
  j.at("num_subjects").get_to(c.num_subjects);
  j.at("objects_per_relation").get_to(c.objects_per_relation);
  j.at("num_syllables").get_to(c.num_syllables);
  j.at("subject_length").get_to(c.subject_length);
  c.mode = task_mode_from_string(j.at("mode").get<std::string>());
}

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Dev: return "dev";
    case Split::Test: return "test";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "dev") return Split::Dev;
  if (s == "test") return Split::Test;
  throw ConfigError("unknown split '" + s + "'");
}

// ---- Vocabulary ------------------------------------------------------------

Vocabulary::Vocabulary(const CorpusConfig& config, Rng& rng)
    : num_languages_(config.num_languages),
      num_syllables_(config.num_syllables),
      num_relations_(config.num_relations),
      subject_length_(config.subject_length),
      concepts_(config.num_syllables + 2 * config.num_relations) {
  for (int l = 0; l < num_languages_; ++l) {
    std::vector<int> perm(static_cast<std::size_t>(concepts_));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<int> inv(perm.size());
    for (std::size_t c = 0; c < perm.size(); ++c) inv[static_cast<std::size_t>(perm[c])] = static_cast<int>(c);
    permutation_.push_back(std::move(perm));
    inverse_.push_back(std::move(inv));

    std::array<int, kNumSlots> order{0, 1, 2, 3};
    if (l > 0) std::shuffle(order.begin(), order.end(), rng);
    slot_order_.push_back(order);
  }
}

int Vocabulary::concept_token(int language, int concept_id) const {
  return kNumSpecials + language * concepts_ + permutation_.at(language).at(concept_id);
}

int Vocabulary::syllable_token(int language, int syllable) const { return concept_token(language, syllable); }

int Vocabulary::relation_token(int language, int relation) const {
  return concept_token(language, num_syllables_ + relation);
}

int Vocabulary::function_token(int language, int relation) const {
  return concept_token(language, num_syllables_ + num_relations_ + relation);
}

int Vocabulary::language_of(int token) const {
  if (token < kNumSpecials || token >= size()) return -1;
  return (token - kNumSpecials) / concepts_;
}

std::vector<int> Vocabulary::render(int language, std::span<const int> syllables, int relation) const {
  std::vector<int> out;
  for (int slot : slot_order_.at(language)) {
    switch (static_cast<Slot>(slot)) {
      case Slot::Subject:
        for (int s : syllables) out.push_back(syllable_token(language, s));
        break;
      case Slot::Relation: out.push_back(relation_token(language, relation)); break;
      case Slot::Function: out.push_back(function_token(language, relation)); break;
      case Slot::Mask: out.push_back(kMask); break;
    }
  }
  return out;
}

std::pair<std::vector<int>, int> Vocabulary::parse(std::span<const int> tokens) const {
  int language = -1;
  for (int t : tokens) {
    if (language_of(t) >= 0) {
      language = language_of(t);
      break;
    }
  }
  if (language < 0) throw ConfigError("parse: sequence has no surface tokens");
  auto concept_of = [&](int token) {
    if (language_of(token) != language) throw ConfigError("parse: token from another language");
    return inverse_[language][static_cast<std::size_t>(token - kNumSpecials - language * concepts_)];
  };
  std::vector<int> syllables;
  int relation = -1;
  std::size_t pos = 0;
  auto next = [&]() {
    if (pos >= tokens.size()) throw ConfigError("parse: sequence too short");
    return tokens[pos++];
  };
  for (int slot : slot_order_.at(language)) {
    switch (static_cast<Slot>(slot)) {
      case Slot::Subject:
        for (int i = 0; i < subject_length_; ++i) {
          const int c = concept_of(next());
          if (c >= num_syllables_) throw ConfigError("parse: expected a subject syllable");
          syllables.push_back(c);
        }
        break;
      case Slot::Relation: {
        const int c = concept_of(next()) - num_syllables_;
        if (c < 0 || c >= num_relations_) throw ConfigError("parse: expected a relation word");
        relation = c;
        break;
      }
      case Slot::Function: {
        const int c = concept_of(next()) - num_syllables_ - num_relations_;
        if (c != relation && relation >= 0) throw ConfigError("parse: template word disagrees with relation");
        if (c < 0 || c >= num_relations_) throw ConfigError("parse: expected a template word");
        relation = c;
        break;
      }
      case Slot::Mask:
        if (next() != kMask) throw ConfigError("parse: expected [MASK]");
        break;
    }
  }
  if (pos != tokens.size()) throw ConfigError("parse: trailing tokens");
  return {syllables, relation};
}

nlohmann::json Vocabulary::to_json() const {
  return {{"num_languages", num_languages_}, {"num_syllables", num_syllables_},
          {"num_relations", num_relations_}, {"subject_length", subject_length_},
          {"concepts", concepts_},           {"permutation", permutation_},
          {"slot_order", slot_order_}};
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  Vocabulary v;
  j.at("num_languages").get_to(v.num_languages_);
  j.at("num_syllables").get_to(v.num_syllables_);
  j.at("num_relations").get_to(v.num_relations_);
  j.at("subject_length").get_to(v.subject_length_);
  j.at("concepts").get_to(v.concepts_);
  j.at("permutation").get_to(v.permutation_);
  j.at("slot_order").get_to(v.slot_order_);
  for (const auto& perm : v.permutation_) {
    std::vector<int> inv(perm.size());
    for (std::size_t c = 0; c < perm.size(); ++c) inv.at(static_cast<std::size_t>(perm[c])) = static_cast<int>(c);
    v.inverse_.push_back(std::move(inv));
  }
  return v;
}

// ---- Dataset ---------------------------------------------------------------

std::pair<int, int> Dataset::label_pool(int class_id) const {
  if (config.mode == TaskMode::Classification) return {0, 3};
  const int r = classes.at(static_cast<std::size_t>(class_id)).relation;
  return {r * config.objects_per_relation, (r + 1) * config.objects_per_relation};
}

Query Dataset::decode(const Example& example) const {
  auto [syllables, relation] = vocab.parse(example.tokens);
  auto it = std::find(subjects.begin(), subjects.end(), syllables);
  if (it == subjects.end()) throw ConfigError("decode: unknown subject");
  return {static_cast<int>(it - subjects.begin()), relation};
}

Dataset generate_corpus(std::uint64_t seed, const CorpusConfig& config) {
  config.validate();
  Rng rng(seed);
  Dataset d;
  d.config = config;
  d.seed = seed;
  d.vocab = Vocabulary(config, rng);

  // All syllable tuples, shuffled; the first num_subjects become subjects.
  std::vector<std::vector<int>> tuples{{}};
  for (int pos = 0; pos < config.subject_length; ++pos) {
    std::vector<std::vector<int>> next;
    for (const auto& t : tuples)
      for (int s = 0; s < config.num_syllables; ++s) {
        auto u = t;
        u.push_back(s);
        next.push_back(std::move(u));
      }
    tuples = std::move(next);
  }
  std::shuffle(tuples.begin(), tuples.end(), rng);
  d.subjects.assign(tuples.begin(), tuples.begin() + config.num_subjects);

  for (int s = 0; s < config.num_subjects; ++s) {
    for (int r = 0; r < config.num_relations; ++r) {
      FactTriple fact{s, r, 0};
      if (config.mode == TaskMode::FactRecall) {
        fact.object = r * config.objects_per_relation + uniform_index(rng, config.objects_per_relation);
      } else {
        fact.object = uniform_index(rng, 3);
      }
      const int class_id = static_cast<int>(d.classes.size());
      d.classes.push_back(fact);
      for (int l = 0; l < config.num_languages; ++l) {
        d.examples.push_back({class_id, l, d.vocab.render(l, d.subjects[static_cast<std::size_t>(s)], r), fact.object});
      }
    }
  }
  return d;
}

// ---- splits ----------------------------------------------------------------

SplitData::SplitData(const Dataset& dataset, std::vector<Example> examples)
    : examples_(std::move(examples)),
      num_languages_(dataset.config.num_languages),
      num_labels_(dataset.num_labels()),
      by_language_(static_cast<std::size_t>(dataset.config.num_languages)) {
  for (std::size_t i = 0; i < examples_.size(); ++i) {
    const Example& e = examples_[i];
    by_language_.at(static_cast<std::size_t>(e.language)).push_back(i);
    auto& m = members_[e.class_id];
    if (m.empty()) m.assign(static_cast<std::size_t>(num_languages_), npos);
    m[static_cast<std::size_t>(e.language)] = i;
    pools_[e.class_id] = dataset.label_pool(e.class_id);
    class_subject_[e.class_id] = dataset.classes.at(static_cast<std::size_t>(e.class_id)).subject;
  }
}

std::size_t SplitData::member(int class_id, int language) const {
  auto it = members_.find(class_id);
  if (it == members_.end() || language < 0 || language >= num_languages_) return npos;
  return it->second[static_cast<std::size_t>(language)];
}

std::vector<std::size_t> SplitData::parallel(std::size_t index) const {
  std::vector<std::size_t> out;
  for (std::size_t i : members_.at(examples_.at(index).class_id))
    if (i != npos) out.push_back(i);
  return out;
}

std::vector<int> SplitData::class_ids() const {
  std::vector<int> out;
  for (const auto& [c, _] : members_) out.push_back(c);
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<int> SplitData::subjects() const {
  std::vector<int> out;
  for (const auto& [_, s] : class_subject_) out.push_back(s);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

const SplitData& Splits::get(Split s) const {
  switch (s) {
    case Split::Train: return train;
    case Split::Dev: return dev;
    case Split::Test: return test;
  }
  throw ContractViolation("unknown split");
}

Splits make_splits(const Dataset& dataset, std::vector<Split> class_split) {
  if (class_split.size() != dataset.classes.size()) throw ConfigError("class split table size mismatch");
  std::array<std::vector<Example>, 3> parts;
  for (const Example& e : dataset.examples) {
    parts[static_cast<std::size_t>(class_split[static_cast<std::size_t>(e.class_id)])].push_back(e);
  }
  Splits out;
  out.class_split = std::move(class_split);
  out.train = SplitData(dataset, std::move(parts[0]));
  out.dev = SplitData(dataset, std::move(parts[1]));
  out.test = SplitData(dataset, std::move(parts[2]));
  return out;
}

Splits split(const Dataset& dataset, std::uint64_t seed, std::array<int, 3> ratios) {
  const int total_ratio = ratios[0] + ratios[1] + ratios[2];
  if (ratios[0] <= 0 || ratios[1] <= 0 || ratios[2] <= 0) throw ConfigError("split ratios must be positive");
  const int s = dataset.config.num_subjects;
  auto share = [&](int r) {
    return std::max(1, static_cast<int>(std::lround(static_cast<double>(s) * r / total_ratio)));
  };
  const int n_dev = share(ratios[1]);
  const int n_test = share(ratios[2]);
  const int n_train = s - n_dev - n_test;
  if (n_train < 1) {
    throw ConfigError("split: " + std::to_string(s) + " subjects cannot fill three subject-disjoint splits");
  }
  std::vector<int> order(static_cast<std::size_t>(s));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Split> subject_split(static_cast<std::size_t>(s));
  for (int i = 0; i < s; ++i) {
    const Split which = i < n_train ? Split::Train : (i < n_train + n_dev ? Split::Dev : Split::Test);
    subject_split[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = which;
  }
  std::vector<Split> class_split;
  class_split.reserve(dataset.classes.size());
  for (const FactTriple& f : dataset.classes) class_split.push_back(subject_split[static_cast<std::size_t>(f.subject)]);
  return make_splits(dataset, std::move(class_split));
}

// ---- sampling --------------------------------------------------------------

std::string to_string(const LanguageMode& mode) {
  if (mode.is_monolingual()) return "monolingual:" + std::to_string(mode.language);
  return "cross_lingual";
}

LanguageMode language_mode_from_string(const std::string& s) {
  if (s == "cross_lingual") return LanguageMode::cross_lingual();
  if (s == "monolingual") return LanguageMode::monolingual(0);
  const std::string prefix = "monolingual:";
  if (s.rfind(prefix, 0) == 0) {
    try {
      std::size_t used = 0;
      const int l = std::stoi(s.substr(prefix.size()), &used);
      if (used == s.size() - prefix.size() && l >= 0) return LanguageMode::monolingual(l);
    } catch (const std::exception&) {
    }
  }
  throw ConfigError("unknown language mode '" + s + "' (expected cross_lingual or monolingual:<id>)");
}

EditBatch sample_edit_batch(const SplitData& split, const LanguageMode& mode, Rng& rng, std::size_t num_update,
                            std::size_t num_retain) {
  const int k = split.num_languages();
  if (split.size() == 0) throw ContractViolation("sample_edit_batch: empty split");
  if (mode.is_monolingual() && (mode.language < 0 || mode.language >= k)) {
    throw ConfigError("sample_edit_batch: monolingual language " + std::to_string(mode.language) +
                      " outside the corpus languages");
  }
  // A single language consumes no randomness, so with K = 1 both modes draw
  // identical batches.
  auto draw_language = [&]() {
    if (mode.is_monolingual()) return mode.language;
    return k == 1 ? 0 : uniform_index(rng, k);
  };

  EditBatch b;
  b.edit_language = draw_language();
  const auto& pool = split.by_language(b.edit_language);
  if (pool.empty()) throw ContractViolation("sample_edit_batch: no examples in the edit language");
  b.edit = pool[uniform_index(rng, pool.size())];
  const int class_id = split[b.edit].class_id;
  const auto [lo, hi] = split.label_pool(class_id);
  b.desired_label = lo + uniform_index(rng, hi - lo);

  for (std::size_t i = 0; i < num_update; ++i) {
    const int l = draw_language();
    const std::size_t idx = split.member(class_id, l);
    if (idx == SplitData::npos) throw ContractViolation("sample_edit_batch: class lacks a parallel example");
    b.update.push_back(idx);
    b.update_languages.push_back(l);
  }
  for (std::size_t i = 0; i < num_retain; ++i) {
    const int l = draw_language();
    const auto& candidates = split.by_language(l);
    const bool any_other = std::any_of(candidates.begin(), candidates.end(),
                                       [&](std::size_t c) { return split[c].class_id != class_id; });
    if (!any_other) throw ContractViolation("sample_edit_batch: no unrelated example to retain");
    std::size_t idx;
    do {
      idx = candidates[uniform_index(rng, candidates.size())];
    } while (split[idx].class_id == class_id);
    b.retain.push_back(idx);
    b.retain_languages.push_back(l);
  }
  return b;
}

// ---- files -----------------------------------------------------------------

void write_dataset(const std::filesystem::path& dir, const Dataset& dataset, const std::vector<Split>& class_split,
                   const nlohmann::json& extra) {
  if (class_split.size() != dataset.classes.size()) throw ConfigError("class split table size mismatch");
  std::filesystem::create_directories(dir);
  std::string lines;
  for (const Example& e : dataset.examples) {
    nlohmann::json rec = {{"class_id", e.class_id},
                          {"language", e.language},
                          {"tokens", e.tokens},
                          {"label", e.label},
                          {"split", to_string(class_split[static_cast<std::size_t>(e.class_id)])}};
    lines += rec.dump();
    lines += '\n';
  }
  io::write_file_atomic(dir / "examples.jsonl", lines);

  nlohmann::json classes = nlohmann::json::array();
  for (const FactTriple& f : dataset.classes) classes.push_back({f.subject, f.relation, f.object});
  nlohmann::json meta = extra;
  meta["config"] = dataset.config;
  meta["seed"] = dataset.seed;
  meta["vocab"] = dataset.vocab.to_json();
  meta["vocab_size"] = dataset.vocab.size();
  meta["num_labels"] = dataset.num_labels();
  meta["subjects"] = dataset.subjects;
  meta["classes"] = std::move(classes);
  meta["num_examples"] = dataset.examples.size();
  io::write_file_atomic(dir / "metadata.json", meta.dump(2) + "\n");
}

LoadedDataset read_dataset(const std::filesystem::path& dir) {
  LoadedDataset out;
  out.metadata = nlohmann::json::parse(io::read_file(dir / "metadata.json"));
  Dataset& d = out.dataset;
  d.config = out.metadata.at("config").get<CorpusConfig>();
  d.seed = out.metadata.at("seed").get<std::uint64_t>();
  d.vocab = Vocabulary::from_json(out.metadata.at("vocab"));
  d.subjects = out.metadata.at("subjects").get<std::vector<std::vector<int>>>();
  for (const auto& c : out.metadata.at("classes")) {
    d.classes.push_back({c.at(0).get<int>(), c.at(1).get<int>(), c.at(2).get<int>()});
  }
  out.class_split.assign(d.classes.size(), Split::Train);
  std::vector<bool> seen(d.classes.size(), false);

  std::istringstream in(io::read_file(dir / "examples.jsonl"));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto rec = nlohmann::json::parse(line);
    Example e;
    rec.at("class_id").get_to(e.class_id);
    rec.at("language").get_to(e.language);
    rec.at("tokens").get_to(e.tokens);
    rec.at("label").get_to(e.label);
    if (e.class_id < 0 || static_cast<std::size_t>(e.class_id) >= d.classes.size()) {
      throw ConfigError("examples.jsonl: class_id out of range");
    }
    const Split s = split_from_string(rec.at("split").get<std::string>());
    const auto c = static_cast<std::size_t>(e.class_id);
    if (seen[c] && out.class_split[c] != s) throw ConfigError("examples.jsonl: class spans two splits");
    seen[c] = true;
    out.class_split[c] = s;
    d.examples.push_back(std::move(e));
  }
  return out;
}

}  // namespace edlab::corpus

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

// A small corpus and a raw model pretrained on it, built once per process.

#pragma once

#include "edlab/corpus.hpp"
#include "edlab/model.hpp"
#include "edlab/training.hpp"

namespace edlab::testing {

struct Fixture {
  corpus::Dataset dataset;
  corpus::Splits splits;
  model::ModelConfig config;
  model::Transformer model;
  model::ParameterSet raw;
};

inline corpus::CorpusConfig fixture_corpus() {
  corpus::CorpusConfig c;
  c.num_languages = 3;
  c.num_relations = 4;
  c.num_subjects = 30;
  c.objects_per_relation = 6;
  c.num_syllables = 8;
  return c;
}

inline model::ModelConfig fixture_model(const corpus::Dataset& d) {
  model::ModelConfig m;
  m.vocab_size = d.vocab.size();
  m.num_languages = d.config.num_languages;
  m.hidden_size = 16;
  m.num_layers = 3;
  m.num_heads = 2;
  m.max_seq_len = 8;
  m.num_editable_layers = 2;
  m.mlp_ratio = 2;
  m.num_classes = d.num_labels();
  return m;
}

inline const Fixture& fixture() {
  static const Fixture f = [] {
    corpus::Dataset d = corpus::generate_corpus(0, fixture_corpus());
    corpus::Splits s = corpus::split(d, 0);
    const model::ModelConfig cfg = fixture_model(d);
    model::Transformer m(cfg);
    training::PretrainOptions po;
    po.steps = 600;
    po.batch_size = 32;
    model::ParameterSet raw = training::pretrain_raw_model(m, s.train, po).params;
    return Fixture{std::move(d), std::move(s), cfg, m, std::move(raw)};
  }();
  return f;
}

}  // namespace edlab::testing

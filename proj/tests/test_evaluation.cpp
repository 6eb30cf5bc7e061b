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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "edlab/errors.hpp"
#include "edlab/evaluation.hpp"
#include "fixture.hpp"
#include "test_util.hpp"

using namespace edlab;
using namespace edlab::evaluation;
using edlab::testing::fixture;
using edlab::testing::random_array;

namespace {

// Rewrites the head so that every input predicts the desired label.
EditFn constant_head_edit(const EvalContext& ctx) {
  return [&ctx](const EditRequest& req, Rng&) {
    const ParameterSet& raw = ctx.raw();
    Array bias(raw.at("head.b").shape());
    bias[static_cast<std::size_t>(req.labels[0])] = 100.0;
    return model::apply_delta(raw, {{"head.w", scale(raw.at("head.w"), -1.0)},
                                    {"head.b", sub(Tensor::constant(bias), raw.at("head.b"))}});
  };
}

EditFn zero_editable_edit(const EvalContext& ctx) {
  return [&ctx](const EditRequest&, Rng&) {
    std::map<std::string, Tensor> deltas;
    for (const auto& name : ctx.model().editable_weights()) deltas.emplace(name, scale(ctx.raw().at(name), -1.0));
    return model::apply_delta(ctx.raw(), deltas);
  };
}

std::vector<std::size_t> all_indices(const SplitData& split) {
  std::vector<std::size_t> v(split.size());
  std::iota(v.begin(), v.end(), 0);
  return v;
}

// Independent brute-force version of the top-fraction cosine matrix.
std::vector<std::vector<double>> brute_similarity(const std::vector<Array>& g, double frac) {
  const std::size_t dim = g[0].size();
  const std::size_t k = std::min(dim, std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(frac * dim))));
  std::vector<std::vector<double>> out(g.size(), std::vector<double>(g.size()));
  for (std::size_t a = 0; a < g.size(); ++a) {
    std::vector<std::size_t> coords;
    std::vector<char> taken(dim, 0);
    for (std::size_t n = 0; n < k; ++n) {
      std::size_t best = dim;
      for (std::size_t i = 0; i < dim; ++i)
        if (!taken[i] && (best == dim || g[a][i] > g[a][best])) best = i;
      taken[best] = 1;
      coords.push_back(best);
    }
    for (std::size_t b = 0; b < g.size(); ++b) {
      double dot = 0, na = 0, nb = 0;
      for (std::size_t i : coords) {
        dot += g[a][i] * g[b][i];
        na += g[a][i] * g[a][i];
        nb += g[b][i] * g[b][i];
      }
      out[a][b] = (na == 0 || nb == 0) ? kUndefined : dot / std::sqrt(na * nb);
    }
  }
  return out;
}

}  // namespace

TEST_CASE("success rate") {
  CHECK(std::abs(success_rate(99.58, 75.76) - 86.05) <= 0.01);
  CHECK(std::abs(success_rate(64.69, 53.00) - 58.26) <= 0.01);
  CHECK(success_rate(1.0, 1.0) == 1.0);
  CHECK(success_rate(0.0, 0.7) == 0.0);
  CHECK(success_rate(0.0, 0.0) == 0.0);
  std::mt19937_64 rng(0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 10000; ++i) {
    const double a = u(rng), c = u(rng);
    const double s = success_rate(a, c);
    CHECK(s == success_rate(c, a));
    CHECK(s <= 2 * std::min(a, c) + 1e-15);
    CHECK(s <= std::max(a, c) + 1e-15);
    CHECK(s >= 0.0);
    CHECK(success_rate(a, a) == doctest::Approx(a).epsilon(1e-15));
  }
}

TEST_CASE("oracle and identity editors") {
  const auto& f = fixture();
  const EvalContext ctx(f.model, f.raw, f.splits.test);
  const auto all = all_indices(f.splits.test);
  const auto& d_edit = f.splits.test.by_language(0);
  EvalOptions o;
  CHECK(editing_accuracy(constant_head_edit(ctx), ctx, d_edit, all, o) == 1.0);
  CHECK(editing_consistency(identity_edit_fn(ctx), ctx, d_edit, all, o) == 1.0);
  const double zero_con = editing_consistency(zero_editable_edit(ctx), ctx, d_edit, all, o);
  CHECK(zero_con < 0.9);
}

TEST_CASE("identity editor agrees with the label pool by chance") {
  // Twelve candidate labels per relation.
  corpus::CorpusConfig cc = testing::fixture_corpus();
  cc.objects_per_relation = 12;
  cc.num_subjects = 60;
  const corpus::Dataset d = corpus::generate_corpus(1, cc);
  const corpus::Splits s = corpus::split(d, 0);
  const model::Transformer m(testing::fixture_model(d));
  training::PretrainOptions po;
  po.steps = 300;
  po.batch_size = 32;
  const ParameterSet raw = training::pretrain_raw_model(m, s.train, po).params;
  const EvalContext ctx(m, raw, s.train);
  const auto all = all_indices(s.train);

  EvalOptions o;
  o.samples_per_edit = 8;
  const auto outcomes = evaluate_edits(identity_edit_fn(ctx), ctx, all, all, o);
  std::size_t trials = 0;
  for (const auto& out : outcomes) trials += out.update_samples;
  REQUIRE(trials >= 1000);
  // Chance agreement: P(y_e = raw prediction) = 1/12 when the raw prediction lies in the pool.
  double in_pool = 0.0;
  for (std::size_t i = 0; i < s.train.size(); ++i) {
    const auto [lo, hi] = s.train.label_pool(s.train[i].class_id);
    const int p = ctx.raw_predictions()[i];
    in_pool += p >= lo && p < hi;
  }
  const double expected = in_pool / static_cast<double>(s.train.size()) / 12.0;
  const double acc = editing_accuracy(identity_edit_fn(ctx), ctx, all, all, o);
  CHECK(std::abs(acc - 1.0 / 12.0) <= 0.03);
  CHECK(std::abs(acc - expected) <= 0.03);
}

TEST_CASE("determinism, worker independence and set semantics") {
  const auto& f = fixture();
  const EvalContext ctx(f.model, f.raw, f.splits.test);
  const auto all = all_indices(f.splits.test);
  const EditFn noisy = [&](const EditRequest& req, Rng& rng) {
    Array bias(f.raw.at("head.b").shape());
    for (double& v : bias.values()) v = std::uniform_real_distribution<double>(-3, 3)(rng);
    bias[static_cast<std::size_t>(req.labels[0])] += 2.0;
    return model::apply_delta(f.raw, {{"head.b", Tensor::constant(bias)}});
  };
  EvalOptions o;
  const auto& d_edit = f.splits.test.by_language(1);
  const double a1 = editing_accuracy(noisy, ctx, d_edit, all, o);
  CHECK(a1 == editing_accuracy(noisy, ctx, d_edit, all, o));
  o.workers = 4;
  CHECK(a1 == editing_accuracy(noisy, ctx, d_edit, all, o));
  std::vector<std::size_t> doubled = all;
  doubled.insert(doubled.end(), all.begin(), all.end());
  CHECK(editing_consistency(noisy, ctx, d_edit, all, o) == editing_consistency(noisy, ctx, d_edit, doubled, o));
  CHECK(editing_accuracy(noisy, ctx, d_edit, all, o) == editing_accuracy(noisy, ctx, d_edit, doubled, o));
  o.seed = 1;
  CHECK(a1 != editing_accuracy(noisy, ctx, d_edit, all, o));
}

TEST_CASE("edits without parallel members in D_update are skipped") {
  const auto& f = fixture();
  const EvalContext ctx(f.model, f.raw, f.splits.test);
  const std::size_t e = f.splits.test.by_language(0)[0];
  std::vector<std::size_t> unrelated;
  for (std::size_t i = 0; i < f.splits.test.size(); ++i)
    if (f.splits.test[i].class_id != f.splits.test[e].class_id) unrelated.push_back(i);
  const std::size_t d_edit[] = {e};
  const auto out = evaluate_edits(identity_edit_fn(ctx), ctx, d_edit, unrelated, {});
  CHECK(out[0].skipped);
}

TEST_CASE("macro average") {
  const auto& f = fixture();
  const EvalContext ctx(f.model, f.raw, f.splits.test);
  const auto print = f.raw.fingerprint();
  const std::vector<int> langs = {0, 1, 2};
  EvalOptions o;

  const MetricsRecord id = macro_average_eval(identity_edit_fn(ctx), ctx, langs, o);
  for (const auto& row : id.per_language) {
    CHECK(row.con == 1.0);
    CHECK(row.succ == doctest::Approx(2 * row.acc / (row.acc + 1)).epsilon(1e-14));
  }
  CHECK(id.con == 1.0);

  const EditFn push = [&](const EditRequest& req, Rng&) {
    Array bias(f.raw.at("head.b").shape());
    bias[static_cast<std::size_t>(req.labels[0])] = 4.0;
    return model::apply_delta(f.raw, {{"head.b", Tensor::constant(bias)}});
  };
  const MetricsRecord r = macro_average_eval(push, ctx, langs, o);
  double acc = 0, con = 0;
  for (const auto& row : r.per_language) {
    acc += row.acc;
    con += row.con;
    CHECK(row.acc >= 0.0);
    CHECK(row.acc <= 1.0);
    CHECK(row.con >= 0.0);
    CHECK(row.con <= 1.0);
  }
  CHECK(std::abs(r.acc - acc / 3) <= 1e-12);
  CHECK(std::abs(r.con - con / 3) <= 1e-12);
  CHECK(std::abs(r.succ - success_rate(acc / 3, con / 3)) <= 1e-12);
  CHECK(f.raw.fingerprint() == print);

  const std::vector<int> one = {2};
  const MetricsRecord single = macro_average_eval(push, ctx, one, o);
  CHECK(single.acc == r.per_language[2].acc);
  CHECK(single.con == r.per_language[2].con);

  CHECK_THROWS_AS(macro_average_eval(push, ctx, std::vector<int>{3}, o), ConfigError);

  const nlohmann::json j = to_json(r);
  const MetricsRecord back = metrics_from_json(j);
  CHECK(back.acc == r.acc);
  CHECK(back.per_language.size() == 3);
  CHECK(back.per_language[1].retain_samples == r.per_language[1].retain_samples);
  const std::string csv = metrics_csv(r);
  CHECK(csv.rfind("scope,language,acc,con,succ,edits", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
}

TEST_CASE("single-language macro average equals the plain metrics") {
  corpus::CorpusConfig cc = testing::fixture_corpus();
  cc.num_languages = 1;
  const corpus::Dataset d = corpus::generate_corpus(2, cc);
  const corpus::Splits s = corpus::split(d, 0);
  const model::Transformer m(testing::fixture_model(d));
  const ParameterSet raw = m.init(0);
  const EvalContext ctx(m, raw, s.test);
  const auto all = all_indices(s.test);
  const EditFn push = [&](const EditRequest& req, Rng&) {
    Array bias(raw.at("head.b").shape());
    bias[static_cast<std::size_t>(req.labels[0])] = 1.0;
    return model::apply_delta(raw, {{"head.b", Tensor::constant(bias)}});
  };
  EvalOptions o;
  const MetricsRecord r = macro_average_eval(push, ctx, std::vector<int>{0}, o);
  CHECK(r.acc == editing_accuracy(push, ctx, all, all, o));
  CHECK(r.con == editing_consistency(push, ctx, all, all, o));
}

TEST_CASE("mask similarity") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Array> g;
    for (int l = 0; l < 4; ++l) g.push_back(random_array(rng, {300}, 0.0, 1.0));
    for (double frac : {0.01, 0.1, 0.5, 1.0}) {
      const auto m = mask_similarity_matrix(g, frac);
      const auto oracle = brute_similarity(g, frac);
      for (std::size_t a = 0; a < 4; ++a) {
        CHECK(std::abs(m[a][a] - 1.0) <= 1e-9);
        for (std::size_t b = 0; b < 4; ++b) CHECK(std::abs(m[a][b] - oracle[a][b]) <= 1e-12);
      }
    }
  }
  std::vector<Array> g;
  for (int l = 0; l < 4; ++l) g.push_back(random_array(rng, {300}, 0.0, 1.0));
  const auto m = mask_similarity_matrix(g, 0.1);
  bool asymmetric = false;
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t b = 0; b < 4; ++b) asymmetric |= std::abs(m[a][b] - m[b][a]) > 1e-6;
  CHECK(asymmetric);

  const std::vector<Array> same(3, g[0]);
  for (const auto& row : mask_similarity_matrix(same, 0.05))
    for (double v : row) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));

  std::vector<Array> with_zero = {g[0], Array({300})};
  const auto z = mask_similarity_matrix(with_zero, 0.1);
  CHECK(std::isnan(z[0][1]));
  CHECK(std::isnan(z[1][1]));
  const nlohmann::json j = similarity_to_json(z);
  CHECK(j[1][1].is_null());
  CHECK(j[0][0].get<double>() == doctest::Approx(1.0));

  const auto& f = fixture();
  editors::LanguageMaskSet masks(3, editors::weight_slots(f.model), 0.0);
  masks.set_language(1, 0.5);
  const auto from_set = mask_similarity_matrix(masks, 0.01);
  REQUIRE(from_set.size() == 3);
  for (std::size_t a = 0; a < 3; ++a) CHECK(std::abs(from_set[a][a] - 1.0) <= 1e-9);
}

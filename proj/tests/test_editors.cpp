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
#include <filesystem>

#include "edlab/editors.hpp"
#include "edlab/errors.hpp"
#include "edlab/evaluation.hpp"
#include "fixture.hpp"
#include "test_util.hpp"

using namespace edlab;
using namespace edlab::editors;
using edlab::testing::fixture;
using edlab::testing::random_array;

namespace {

// Direct autodiff gradient of the task loss with respect to each editable weight.
std::map<std::string, Array> task_gradients(const model::Transformer& m, const ParameterSet& raw,
                                            const EditRequest& req) {
  ParameterSet local;
  std::map<std::string, Tensor> leaves;
  for (const auto& name : m.editable_weights()) leaves.emplace(name, Tensor::parameter(raw.at(name).value()));
  for (const auto& [name, t] : raw) {
    auto it = leaves.find(name);
    local.insert(name, it == leaves.end() ? t : it->second);
  }
  Tape tape;
  TapeScope scope(tape);
  backward(softmax_cross_entropy(m.forward_tail(local, Tensor::constant(req.features)), req.labels));
  std::map<std::string, Array> out;
  for (const auto& [name, leaf] : leaves) out[name] = leaf.grad();
  return out;
}

EditRequest some_request(const evaluation::EvalContext& ctx, std::size_t index, int shift) {
  const auto& split = ctx.split();
  const auto [lo, hi] = split.label_pool(split[index].class_id);
  return ctx.request(index, lo + (split[index].label - lo + shift) % (hi - lo));
}

EditorOptions random_g_options(std::uint64_t seed) {
  EditorOptions o;
  o.transformer.hidden = 12;
  o.transformer.seed = seed;
  return o;
}

// Gives every g a nonzero residual branch.
void perturb_g(Editor& editor, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (Tensor t : editor.group("g")) t.assign(random_array(rng, t.shape(), -0.3, 0.3));
}

}  // namespace

TEST_CASE("deterministic gate saturation and range") {
  const Tensor hi = Tensor::constant(Array({3}, 50.0));
  const Tensor lo = Tensor::constant(Array({3}, -50.0));
  for (const Array vals = gate_deterministic(hi).value(); double v : vals.values()) CHECK(v == 1.0);
  for (const Array vals = gate_deterministic(lo).value(); double v : vals.values()) CHECK(v == 0.0);
  std::mt19937_64 rng(0);
  const Tensor la = Tensor::constant(random_array(rng, {200}, -6, 6));
  const Array u = random_array(rng, {200}, 1e-9, 1 - 1e-9);
  for (const Array vals = gate(la, u).value(); double v : vals.values()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  for (const Array vals = gate_deterministic(la).value(); double v : vals.values()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("sampled gate rejects noise outside (0, 1)") {
  const Tensor la = Tensor::constant(Array({2}));
  for (double bad : {0.0, 1.0, -0.5, 1.5}) {
    Array u({2}, 0.5);
    u[1] = bad;
    CHECK_THROWS_AS(gate(la, u), ContractViolation);
  }
  CHECK_THROWS_AS(gate(la, Array({3}, 0.5)), DimensionError);
}

TEST_CASE("half-open log-alpha gives P(z > 0) = 1/2") {
  const double half = HardConcrete::half_open_log_alpha();
  CHECK(half == doctest::Approx((2.0 / 3.0) * std::log(1.0 / 11.0)).epsilon(1e-15));
  CHECK(half == doctest::Approx(-1.5986).epsilon(1e-4));
  const int n = 100000;
  const Tensor la = Tensor::constant(Array({static_cast<std::size_t>(n)}, half));
  Rng rng(1);
  const Array z = gate(la, GateMode::Sampled, &rng).value();
  int open = 0;
  for (double v : z.values()) open += v > 0.0;
  CHECK(std::abs(static_cast<double>(open) / n - 0.5) <= 0.01);
}

TEST_CASE("expected L0") {
  CHECK(expected_l0(Tensor::constant(Array({10}, -50.0))).item() < 1e-20);
  CHECK(expected_l0(Tensor::constant(Array({10}, HardConcrete::half_open_log_alpha()))).item() ==
        doctest::Approx(5.0).epsilon(1e-14));

  // Monte Carlo oracle: the fraction of nonzero sampled gates.
  std::mt19937_64 pick(2);
  Rng rng(3);
  const std::size_t n = 100000;
  for (int i = 0; i < 20; ++i) {
    const double v = std::uniform_real_distribution<double>(-4.0, 3.0)(pick);
    const Tensor one = Tensor::constant(Array({1}, v));
    const Tensor many = Tensor::constant(Array({n}, v));
    int open = 0;
    for (const Array vals = gate(many, GateMode::Sampled, &rng).value(); double z : vals.values()) open += z > 0.0;
    CAPTURE(v);
    CHECK(std::abs(static_cast<double>(open) / n - expected_l0(one).item()) <= 0.01);
  }
  std::mt19937_64 r(4);
  CHECK(testing::gradient_error([](const Tensor& t) { return expected_l0(t); }, random_array(r, {7}, -3, 3)) < 1e-6);
}

TEST_CASE("mask_vector") {
  const Tensor v = Tensor::constant(Array::vector({1.0, -2.0, 3.0}));
  CHECK(mask_vector(v, Tensor::constant(Array({3}))).value() == v.value());
  CHECK(mask_vector(v, Tensor::constant(Array({3}, 1.0))).value() == Array::vector({2.0, -4.0, 6.0}));
  CHECK(mask_vector(v, Tensor::constant(Array::vector({0.0, 0.5, 1.0}))).value() == Array::vector({1.0, -3.0, 6.0}));
  CHECK_THROWS_AS(mask_vector(v, Tensor::constant(Array({4}))), DimensionError);

  std::mt19937_64 rng(5);
  const Array z = random_array(rng, {4}, 0, 1);
  const Array m = random_array(rng, {3, 4});
  const Array out = mask_vector(Tensor::constant(m), Tensor::constant(z)).value();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK(out.at(i, j) == m.at(i, j) + z[j] * m.at(i, j));
  CHECK(testing::gradient_error([&](const Tensor& t) { return sum(mask_vector(Tensor::constant(m), t)); }, z) < 1e-7);
  CHECK(testing::gradient_error([&](const Tensor& t) { return sum(mul(mask_vector(t, Tensor::constant(z)), t)); }, m) <
        1e-7);
}

TEST_CASE("mask storage is linear in the hidden size") {
  const auto& f = fixture();
  const LanguageMaskSet masks(3, weight_slots(f.model), 0.0);
  std::size_t per_language = 0;
  for (const auto& s : weight_slots(f.model)) per_language += s.rows + s.cols;
  CHECK(masks.num_gates() == 3 * per_language);
  CHECK(masks.gate_vector(1).size() == per_language);
  CHECK_THROWS_AS(masks.gate_vector(3), ConfigError);
}

TEST_CASE("identity-initialized g performs one gradient step") {
  const auto& f = fixture();
  evaluation::EvalContext ctx(f.model, f.raw, f.splits.test);
  for (EditorVariant variant : {EditorVariant::HyperNet, EditorVariant::IdentityG}) {
    Editor editor(variant, f.model, 3, random_g_options(1));
    CHECK(editor.transformer()->step_size("block.1.mlp.w1").item() == doctest::Approx(1e-4).epsilon(1e-12));
    editor.transformer()->fix_step_sizes(0.7);
    for (std::size_t index : {0u, 17u, 35u}) {
      const EditRequest req = some_request(ctx, index, 1);
      const ParameterSet edited = editor.edit(f.model, f.raw, req, GateMode::Deterministic, nullptr);
      const auto grads = task_gradients(f.model, f.raw, req);
      for (const auto& [name, g] : grads) {
        Array expected = f.raw.at(name).value();
        for (std::size_t i = 0; i < expected.size(); ++i) expected[i] -= 0.7 * g[i];
        CAPTURE(name);
        CHECK(max_abs_diff(edited.at(name).value(), expected) < 1e-9);
      }
    }
  }
}

TEST_CASE("closed gates bypass the masks") {
  const auto& f = fixture();
  evaluation::EvalContext ctx(f.model, f.raw, f.splits.test);
  Editor plain(EditorVariant::IdentityG, f.model, 3, {});
  Editor masked(EditorVariant::IdentityGMasked, f.model, 3, {});
  plain.transformer()->fix_step_sizes(0.3);
  masked.transformer()->fix_step_sizes(0.3);
  for (int l = 0; l < 3; ++l) masked.masks()->set_language(l, -50.0);
  const std::size_t index = f.splits.test.by_language(2)[3];
  const EditRequest req = some_request(ctx, index, 2);
  const ParameterSet a = plain.edit(f.model, f.raw, req, GateMode::Deterministic, nullptr);
  const ParameterSet b = masked.edit(f.model, f.raw, req, GateMode::Deterministic, nullptr);
  CHECK(a.fingerprint() == b.fingerprint());

  masked.masks()->set_language(2, 50.0);
  const ParameterSet c = masked.edit(f.model, f.raw, req, GateMode::Deterministic, nullptr);
  // Fully open gates double both factors, so the update is four times larger.
  for (const auto& name : f.model.editable_weights()) {
    const Array da = sub(a.at(name), f.raw.at(name)).value();
    const Array dc = sub(c.at(name), f.raw.at(name)).value();
    CHECK(max_abs_diff(scale(Tensor::constant(da), 4.0).value(), dc) < 1e-12);
  }
}

TEST_CASE("masks use the editing language only") {
  const auto& f = fixture();
  evaluation::EvalContext ctx(f.model, f.raw, f.splits.test);
  Editor masked(EditorVariant::HyperNetMasked, f.model, 3, random_g_options(2));
  perturb_g(masked, 3);
  const EditRequest req = some_request(ctx, f.splits.test.by_language(0)[0], 1);
  const auto before = masked.edit(f.model, f.raw, req, GateMode::Deterministic, nullptr).fingerprint();
  masked.masks()->set_language(1, 3.0);
  masked.masks()->set_language(2, -3.0);
  CHECK(masked.edit(f.model, f.raw, req, GateMode::Deterministic, nullptr).fingerprint() == before);
  masked.masks()->set_language(0, 3.0);
  CHECK(masked.edit(f.model, f.raw, req, GateMode::Deterministic, nullptr).fingerprint() != before);

  EditRequest bad = req;
  bad.language = 3;
  CHECK_THROWS_AS(masked.edit(f.model, f.raw, bad, GateMode::Deterministic, nullptr), ConfigError);
}

TEST_CASE("zero step size leaves the model bit-identical") {
  const auto& f = fixture();
  evaluation::EvalContext ctx(f.model, f.raw, f.splits.test);
  Editor editor(EditorVariant::HyperNetMasked, f.model, 3, random_g_options(4));
  perturb_g(editor, 5);
  editor.transformer()->fix_step_sizes(0.0);
  std::vector<std::size_t> all(f.splits.test.size());
  std::iota(all.begin(), all.end(), 0);
  const auto raw_preds = ctx.predict(f.raw, all);
  const ParameterSet edited = editor.edit(f.model, f.raw, some_request(ctx, 5, 1), GateMode::Deterministic, nullptr);
  CHECK(edited.fingerprint() == f.raw.fingerprint());
  CHECK(f.model.logits(edited, ctx.features()) == f.model.logits(f.raw, ctx.features()));
  CHECK(ctx.predict(edited, all) == raw_preds);
}

TEST_CASE("edits are independent, deterministic and touch only editable weights") {
  const auto& f = fixture();
  evaluation::EvalContext ctx(f.model, f.raw, f.splits.test);
  Editor editor(EditorVariant::HyperNetMasked, f.model, 3, random_g_options(6));
  perturb_g(editor, 7);
  const auto raw_print = f.raw.fingerprint();
  const EditRequest a = some_request(ctx, 2, 1);
  const EditRequest b = some_request(ctx, 30, 2);
  const auto a1 = editor.edit(f.model, f.raw, a, GateMode::Deterministic, nullptr).fingerprint();
  const auto b1 = editor.edit(f.model, f.raw, b, GateMode::Deterministic, nullptr).fingerprint();
  const auto b2 = editor.edit(f.model, f.raw, b, GateMode::Deterministic, nullptr).fingerprint();
  const ParameterSet a2 = editor.edit(f.model, f.raw, a, GateMode::Deterministic, nullptr);
  CHECK(a1 == a2.fingerprint());
  CHECK(b1 == b2);
  CHECK(a1 != b1);
  CHECK(f.raw.fingerprint() == raw_print);

  const auto editable = f.model.editable_weights();
  for (const auto& [name, t] : f.raw) {
    const bool is_editable = std::find(editable.begin(), editable.end(), name) != editable.end();
    CAPTURE(name);
    CHECK((a2.at(name).node() == t.node()) != is_editable);
  }

  Rng r1(9), r2(9);
  CHECK(editor.edit(f.model, f.raw, a, GateMode::Sampled, &r1).fingerprint() ==
        editor.edit(f.model, f.raw, a, GateMode::Sampled, &r2).fingerprint());
}

TEST_CASE("mask and g gradients through the edit match finite differences") {
  const auto& f = fixture();
  evaluation::EvalContext ctx(f.model, f.raw, f.splits.test);
  Editor editor(EditorVariant::HyperNetMasked, f.model, 3, random_g_options(8));
  perturb_g(editor, 9);
  editor.transformer()->fix_step_sizes(0.5);
  std::mt19937_64 init(10);
  for (Tensor t : editor.group("mask")) t.assign(random_array(init, t.shape(), -1.0, 1.0));

  const std::size_t index = f.splits.test.by_language(1)[4];
  const EditRequest req = some_request(ctx, index, 1);
  const auto parallel = f.splits.test.parallel(index);
  Array feats({parallel.size(), ctx.features().cols()});
  for (std::size_t r = 0; r < parallel.size(); ++r)
    for (std::size_t c = 0; c < feats.cols(); ++c) feats.at(r, c) = ctx.features().at(parallel[r], c);
  const std::vector<int> targets(parallel.size(), req.labels[0]);

  auto downstream = [&](GateMode mode) {
    Rng rng(11);
    const ParameterSet edited = editor.edit(f.model, f.raw, req, mode, &rng);
    return softmax_cross_entropy(f.model.forward_tail(edited, Tensor::constant(feats)), targets);
  };
  auto check_tensor = [&](Tensor target, GateMode mode) {
    const Array original = target.value();
    auto f_of = [&](const Tensor& t) {
      target.assign(t.value());
      Tensor out = downstream(mode);
      target.assign(original);
      return out;
    };
    // Autodiff with the live tensor as the leaf.
    Array analytic;
    {
      Tape tape;
      TapeScope scope(tape);
      target.zero_grad();
      backward(downstream(mode));
      analytic = target.grad();
      target.zero_grad();
    }
    const Array numeric =
        finite_difference_gradient([&](const Array& a) { return f_of(Tensor::constant(a)).item(); }, original, 1e-5);
    return relative_error(analytic, numeric);
  };
  for (GateMode mode : {GateMode::Deterministic, GateMode::Sampled}) {
    const LanguageMaskSet& masks = *editor.masks();
    for (const auto& slot : masks.slots()) {
      CAPTURE(slot.name);
      CHECK(check_tensor(masks.log_alpha_x(1, slot.name), mode) < 1e-5);
      CHECK(check_tensor(masks.log_alpha_delta(1, slot.name), mode) < 1e-5);
    }
  }
  const auto g = editor.group("g");
  for (std::size_t i = 0; i < g.size(); ++i) {
    CAPTURE(i);
    CHECK(check_tensor(g[i], GateMode::Deterministic) < 1e-5);
  }
}

TEST_CASE("finetune editor") {
  const auto& f = fixture();
  evaluation::EvalContext ctx(f.model, f.raw, f.splits.test);
  const auto& split = f.splits.test;

  SUBCASE("current prediction means no steps") {
    const std::size_t index = 7;
    const EditRequest req = ctx.request(index, ctx.raw_predictions()[index]);
    const FinetuneResult r = finetune_edit(f.model, f.raw, req, {});
    CHECK(r.steps == 0);
    CHECK(r.flipped);
    CHECK(r.params.fingerprint() == f.raw.fingerprint());
  }

  SUBCASE("reliable on the edit input, weaker on parallel inputs") {
    // The fixture model is four times narrower than the default one and
    // needs a proportionally larger rate.
    FinetuneOptions o;
    o.lr = 3e-4;
    Rng rng(12);
    int flips = 0;
    double own = 0.0, parallel_hits = 0.0, parallel_n = 0.0;
    for (int i = 0; i < 100; ++i) {
      const std::size_t e = std::uniform_int_distribution<std::size_t>(0, split.size() - 1)(rng);
      const auto [lo, hi] = split.label_pool(split[e].class_id);
      const int y = std::uniform_int_distribution<int>(lo, hi - 1)(rng);
      const FinetuneResult r = finetune_edit(f.model, f.raw, ctx.request(e, y), o);
      CHECK(r.steps <= 100);
      flips += r.flipped;
      const std::size_t self[] = {e};
      own += ctx.predict(r.params, self)[0] == y;
      std::vector<std::size_t> others;
      for (std::size_t j : split.parallel(e))
        if (j != e) others.push_back(j);
      for (int p : ctx.predict(r.params, others)) {
        parallel_hits += p == y;
        parallel_n += 1;
      }
      for (const auto& [name, t] : f.raw) {
        const auto editable = f.model.editable_weights();
        if (std::find(editable.begin(), editable.end(), name) == editable.end()) CHECK(r.params.at(name).node() == t.node());
      }
    }
    CHECK(flips >= 95);
    CHECK(parallel_hits / parallel_n < own / 100.0);
  }

  SUBCASE("non-convergence returns the last iterate") {
    FinetuneOptions o;
    o.max_steps = 1;
    o.lr = 1e-9;
    const std::size_t index = 3;
    const EditRequest req = some_request(ctx, index, 1);
    const FinetuneResult r = finetune_edit(f.model, f.raw, req, o);
    CHECK(r.steps == 1);
    CHECK_FALSE(r.flipped);
    CHECK(r.params.fingerprint() != f.raw.fingerprint());
  }
}

TEST_CASE("variants and options") {
  for (EditorVariant v : {EditorVariant::Finetune, EditorVariant::HyperNet, EditorVariant::HyperNetMasked,
                          EditorVariant::IdentityG, EditorVariant::IdentityGMasked})
    CHECK(editor_variant_from_string(to_string(v)) == v);
  CHECK_THROWS_AS(editor_variant_from_string("mend"), ConfigError);
  CHECK(uses_masks(EditorVariant::HyperNetMasked));
  CHECK(uses_masks(EditorVariant::IdentityGMasked));
  CHECK_FALSE(uses_masks(EditorVariant::HyperNet));

  const auto& f = fixture();
  const Editor identity(EditorVariant::IdentityGMasked, f.model, 3, {});
  CHECK(identity.group("g").empty());
  CHECK(identity.group("alpha").size() == 4);
  CHECK(identity.group("mask").size() == 24);
  const Editor hyper(EditorVariant::HyperNet, f.model, 3, {});
  CHECK_FALSE(hyper.group("g").empty());
  CHECK(hyper.group("mask").empty());
  CHECK_THROWS_AS(hyper.group("beta"), ContractViolation);

  EditorOptions o = random_g_options(3);
  o.mask_init = 1.5;
  o.finetune.max_steps = 7;
  const nlohmann::json j = o;
  const EditorOptions back = j.get<EditorOptions>();
  CHECK(nlohmann::json(back) == j);
}

TEST_CASE("editor checkpoint round trip") {
  const auto& f = fixture();
  evaluation::EvalContext ctx(f.model, f.raw, f.splits.test);
  Editor editor(EditorVariant::HyperNetMasked, f.model, 3, random_g_options(13));
  perturb_g(editor, 14);
  editor.masks()->set_language(1, 0.8);
  const auto dir = std::filesystem::temp_directory_path() / "edlab_test_editors";
  std::filesystem::remove_all(dir);
  const auto path = dir / "editor.edlb";
  editor.save(path, {{"note", 1}});
  const Editor back = Editor::load(path, f.model);
  CHECK(back.variant() == editor.variant());
  CHECK(back.describe() == editor.describe());
  const EditRequest req = some_request(ctx, 11, 1);
  CHECK(back.edit(f.model, f.raw, req, GateMode::Deterministic, nullptr).fingerprint() ==
        editor.edit(f.model, f.raw, req, GateMode::Deterministic, nullptr).fingerprint());

  model::ModelConfig other = f.config;
  other.num_editable_layers = 1;
  CHECK_THROWS(Editor::load(path, model::Transformer(other)));
  model::save_model(dir / "raw.edlb", f.config, f.raw);
  CHECK_THROWS_AS(Editor::load(dir / "raw.edlb", f.model), ConfigError);
  std::filesystem::remove_all(dir);
}

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

#include "edlab/editors.hpp"

#include <algorithm>
#include <cmath>

#include "edlab/errors.hpp"
#include "edlab/optim.hpp"

namespace edlab::editors {

namespace {

constexpr double kRmsEps = 1e-16;

Array uniform_open(Rng& rng, const Shape& shape) {
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  Array u(shape);
  for (double& v : u.values()) {
    do {
      v = dist(rng);
    } while (v <= 0.0 || v >= 1.0);
  }
  return u;
}

Tensor stretch_and_clamp(const Tensor& s) {
  constexpr double g = HardConcrete::gamma;
  constexpr double z = HardConcrete::zeta;
  return clamp(add_scalar(scale(s, z - g), g), 0.0, 1.0);
}

}  // namespace

double HardConcrete::half_open_log_alpha() { return beta * std::log(-gamma / zeta); }

Tensor gate(const Tensor& log_alpha, const Array& u) {
  if (u.size() != log_alpha.size()) {
    throw DimensionError("gate: noise " + shape_string(u.shape()) + " vs log-alpha " +
                         shape_string(log_alpha.shape()));
  }
  Array logistic(log_alpha.shape());
  for (std::size_t i = 0; i < u.size(); ++i) {
    if (!(u[i] > 0.0 && u[i] < 1.0)) throw ContractViolation("gate: uniform noise must lie in (0, 1)");
    logistic[i] = std::log(u[i]) - std::log1p(-u[i]);
  }
  const Tensor pre = scale(add(log_alpha, Tensor::constant(std::move(logistic))), 1.0 / HardConcrete::beta);
  return stretch_and_clamp(sigmoid(pre));
}

Tensor gate_deterministic(const Tensor& log_alpha) { return stretch_and_clamp(sigmoid(log_alpha)); }

Tensor gate(const Tensor& log_alpha, GateMode mode, Rng* rng) {
  if (mode == GateMode::Deterministic) return gate_deterministic(log_alpha);
  if (rng == nullptr) throw ContractViolation("gate: sampled mode needs a random stream");
  return gate(log_alpha, uniform_open(*rng, log_alpha.shape()));
}

Tensor expected_l0(const Tensor& log_alpha) {
  return sum(sigmoid(add_scalar(log_alpha, -HardConcrete::half_open_log_alpha())));
}

Tensor mask_vector(const Tensor& v, const Tensor& z) {
  if (v.value().rank() == 2 && v.value().cols() == z.size() && z.value().rank() == 1) {
    return add(v, mul_row(v, z));
  }
  if (v.shape() == z.shape()) return add(v, mul(v, z));
  throw DimensionError("mask_vector: vector " + shape_string(v.shape()) + " and gate " + shape_string(z.shape()) +
                       " differ in length");
}

std::vector<WeightSlot> weight_slots(const model::Transformer& model) {
  const auto shapes = model.parameter_shapes();
  std::vector<WeightSlot> out;
  for (const auto& name : model.editable_weights()) {
    const Shape& s = shapes.at(name);
    out.push_back({name, s[0], s[1]});
  }
  return out;
}

// ---- GradientTransformer ---------------------------------------------------

std::string GradientTransformer::shape_key(std::size_t n, std::size_t m) {
  return std::to_string(n) + "x" + std::to_string(m);
}

GradientTransformer::GradientTransformer(std::vector<WeightSlot> slots, TransformerOptions options)
    : slots_(std::move(slots)), options_(options) {
  if (!(options_.step_init > 0.0)) throw ConfigError("gradient transformer: step_init must be positive");
  Rng rng(options_.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (const auto& slot : slots_) {
    const double rho = std::log(std::expm1(options_.step_init));
    step_raw_.emplace(slot.name, Tensor::parameter(Array::scalar(rho)));
    if (options_.identity) continue;
    const std::string key = shape_key(slot.rows, slot.cols);
    if (nets_.contains(key)) continue;
    const std::size_t width = slot.rows + slot.cols;
    Array w1({width, options_.hidden});
    const double stddev = 1.0 / std::sqrt(static_cast<double>(width));
    for (double& v : w1.values()) v = normal(rng) * stddev;
    nets_.emplace(key, Net{Tensor::parameter(std::move(w1)), Tensor::parameter(Array({options_.hidden})),
                           Tensor::parameter(Array({options_.hidden, width})), Tensor::parameter(Array({width}))});
  }
}

std::pair<Tensor, Tensor> GradientTransformer::transform(const Tensor& x, const Tensor& delta) const {
  if (options_.identity) return {x, delta};
  const std::size_t n = x.value().cols();
  const std::size_t m = delta.value().cols();
  auto it = nets_.find(shape_key(n, m));
  if (it == nets_.end()) throw ContractViolation("gradient transformer has no network for shape " + shape_key(n, m));
  const Net& net = it->second;
  const Tensor rx = row_rms(x, kRmsEps);
  const Tensor rd = row_rms(delta, kRmsEps);
  const Tensor u = concat_cols({mul_col(x, reciprocal(rx)), mul_col(delta, reciprocal(rd))});
  const Tensor hidden = gelu(add_row(matmul(u, net.w1), net.b1));
  const Tensor r = add_row(matmul(hidden, net.w2), net.b2);
  return {add(x, mul_col(slice_cols(r, 0, n), rx)), add(delta, mul_col(slice_cols(r, n, n + m), rd))};
}

Tensor GradientTransformer::step_size(const std::string& weight) const {
  if (fixed_step_) return Tensor::constant(Array::scalar(*fixed_step_));
  auto it = step_raw_.find(weight);
  if (it == step_raw_.end()) throw ContractViolation("no step size for weight '" + weight + "'");
  return softplus(it->second);
}

void GradientTransformer::fix_step_sizes(double alpha) {
  if (!(alpha >= 0.0)) throw ContractViolation("fixed step size must be non-negative");
  fixed_step_ = alpha;
}

std::vector<Tensor> GradientTransformer::network_parameters() const {
  std::vector<Tensor> out;
  for (const auto& [_, net] : nets_) {
    out.push_back(net.w1);
    out.push_back(net.b1);
    out.push_back(net.w2);
    out.push_back(net.b2);
  }
  return out;
}

std::vector<Tensor> GradientTransformer::step_parameters() const {
  std::vector<Tensor> out;
  if (fixed_step_) return out;
  for (const auto& [_, rho] : step_raw_) out.push_back(rho);
  return out;
}

std::vector<io::NamedArray> GradientTransformer::export_tensors() const {
  std::vector<io::NamedArray> out;
  for (const auto& [key, net] : nets_) {
    out.push_back({"g." + key + ".w1", net.w1.value()});
    out.push_back({"g." + key + ".b1", net.b1.value()});
    out.push_back({"g." + key + ".w2", net.w2.value()});
    out.push_back({"g." + key + ".b2", net.b2.value()});
  }
  for (const auto& [name, rho] : step_raw_) out.push_back({"alpha." + name, rho.value()});
  return out;
}

void GradientTransformer::import_tensors(const io::Container& c) {
  for (auto& [key, net] : nets_) {
    net.w1.assign(c.at("g." + key + ".w1"));
    net.b1.assign(c.at("g." + key + ".b1"));
    net.w2.assign(c.at("g." + key + ".w2"));
    net.b2.assign(c.at("g." + key + ".b2"));
  }
  for (auto& [name, rho] : step_raw_) rho.assign(c.at("alpha." + name));
}

// ---- LanguageMaskSet -------------------------------------------------------

LanguageMaskSet::LanguageMaskSet(int num_languages, std::vector<WeightSlot> slots, double init_log_alpha)
    : num_languages_(num_languages), slots_(std::move(slots)) {
  if (num_languages_ < 1) throw ConfigError("mask set needs at least one language");
  for (int l = 0; l < num_languages_; ++l) {
    for (const auto& s : slots_) {
      log_alpha_.emplace(key(l, s.name, "x"), Tensor::parameter(Array({s.rows}, init_log_alpha)));
      log_alpha_.emplace(key(l, s.name, "delta"), Tensor::parameter(Array({s.cols}, init_log_alpha)));
    }
  }
}

std::string LanguageMaskSet::key(int language, const std::string& weight, const char* side) const {
  return "mask.l" + std::to_string(language) + "." + weight + "." + side;
}

void LanguageMaskSet::check_language(int language) const {
  if (language < 0 || language >= num_languages_) {
    throw ConfigError("mask set has no gates for language " + std::to_string(language));
  }
}

const Tensor& LanguageMaskSet::log_alpha_x(int language, const std::string& weight) const {
  check_language(language);
  auto it = log_alpha_.find(key(language, weight, "x"));
  if (it == log_alpha_.end()) throw ConfigError("mask set has no gates for weight '" + weight + "'");
  return it->second;
}

const Tensor& LanguageMaskSet::log_alpha_delta(int language, const std::string& weight) const {
  check_language(language);
  auto it = log_alpha_.find(key(language, weight, "delta"));
  if (it == log_alpha_.end()) throw ConfigError("mask set has no gates for weight '" + weight + "'");
  return it->second;
}

Tensor LanguageMaskSet::expected_l0_total() const {
  std::vector<Tensor> parts;
  for (const auto& [_, t] : log_alpha_) parts.push_back(expected_l0(t));
  Tensor total = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) total = add(total, parts[i]);
  return total;
}

std::size_t LanguageMaskSet::num_gates() const {
  std::size_t n = 0;
  for (const auto& [_, t] : log_alpha_) n += t.size();
  return n;
}

double LanguageMaskSet::mean_gate_activity() const {
  return expected_l0_total().item() / static_cast<double>(num_gates());
}

Array LanguageMaskSet::gate_vector(int language) const {
  check_language(language);
  std::vector<double> out;
  for (const auto& s : slots_) {
    for (const Tensor* t : {&log_alpha_x(language, s.name), &log_alpha_delta(language, s.name)}) {
      const Array z = gate_deterministic(t->detach()).value();
      out.insert(out.end(), z.values().begin(), z.values().end());
    }
  }
  return Array::vector(std::move(out));
}

Array LanguageMaskSet::log_alpha_vector(int language) const {
  check_language(language);
  std::vector<double> out;
  for (const auto& s : slots_) {
    for (const Tensor* t : {&log_alpha_x(language, s.name), &log_alpha_delta(language, s.name)}) {
      out.insert(out.end(), t->value().values().begin(), t->value().values().end());
    }
  }
  return Array::vector(std::move(out));
}

std::vector<Tensor> LanguageMaskSet::parameters() const {
  std::vector<Tensor> out;
  for (const auto& [_, t] : log_alpha_) out.push_back(t);
  return out;
}

std::vector<io::NamedArray> LanguageMaskSet::export_tensors() const {
  std::vector<io::NamedArray> out;
  for (const auto& [name, t] : log_alpha_) out.push_back({name, t.value()});
  return out;
}

void LanguageMaskSet::import_tensors(const io::Container& c) {
  for (auto& [name, t] : log_alpha_) t.assign(c.at(name));
}

void LanguageMaskSet::set_language(int language, double log_alpha) {
  check_language(language);
  for (const auto& s : slots_) {
    for (const char* side : {"x", "delta"}) {
      Tensor& t = log_alpha_.at(key(language, s.name, side));
      t.assign(Array(t.shape(), log_alpha));
    }
  }
}

// ---- edits -----------------------------------------------------------------

ParameterSet hypernet_edit(const model::Transformer& model, const ParameterSet& raw, const EditRequest& request,
                           const GradientTransformer& transformer, const LanguageMaskSet* masks, GateMode mode,
                           Rng* rng) {
  const auto editable = model.editable_weights();
  if (transformer.slots().size() != editable.size()) {
    throw ContractViolation("hypernet_edit: editor and model disagree on the editable weights");
  }
  for (const auto& slot : transformer.slots()) {
    if (std::find(editable.begin(), editable.end(), slot.name) == editable.end()) {
      throw ContractViolation("hypernet_edit: editor weight '" + slot.name + "' is not editable in this model");
    }
  }
  if (masks != nullptr && (request.language < 0 || request.language >= masks->num_languages())) {
    throw ConfigError("hypernet_edit: masks have no language " + std::to_string(request.language));
  }

  const model::TapResult taps = model.forward_with_taps(raw, request.features, request.labels);
  std::map<std::string, Tensor> deltas;
  for (const auto& tap : taps.taps) {
    Tensor x = Tensor::constant(tap.x);
    Tensor d = Tensor::constant(tap.delta);
    if (masks != nullptr) {
      x = mask_vector(x, gate(masks->log_alpha_x(request.language, tap.weight), mode, rng));
      d = mask_vector(d, gate(masks->log_alpha_delta(request.language, tap.weight), mode, rng));
    }
    auto [xt, dt] = transformer.transform(x, d);
    const Tensor pseudo_grad = matmul(transpose(xt), dt);
    deltas.emplace(tap.weight, scale(scale_by(pseudo_grad, transformer.step_size(tap.weight)), -1.0));
  }
  return apply_delta(raw, deltas);
}

FinetuneResult finetune_edit(const model::Transformer& model, const ParameterSet& raw, const EditRequest& request,
                             const FinetuneOptions& options) {
  const auto editable = model.editable_weights();
  std::map<std::string, Tensor> leaves;
  for (const auto& name : editable) leaves.emplace(name, Tensor::parameter(raw.at(name).value()));
  auto assemble = [&]() {
    ParameterSet p;
    for (const auto& [name, t] : raw) {
      auto it = leaves.find(name);
      p.insert(name, it == leaves.end() ? t : it->second);
    }
    return p;
  };
  std::vector<Tensor> trainable;
  for (const auto& [_, t] : leaves) trainable.push_back(t);
  Adam adam;
  adam.add_group("finetune", trainable, options.lr);

  FinetuneResult result;
  const ParameterSet current = assemble();
  for (int step = 0;; ++step) {
    const auto preds = argmax(model.logits(current, request.features));
    if (preds == request.labels) {
      result.flipped = true;
      break;
    }
    if (step >= options.max_steps) break;
    Tape tape;
    TapeScope scope(tape);
    const Tensor loss =
        softmax_cross_entropy(model.forward_tail(current, Tensor::constant(request.features)), request.labels);
    backward(loss);
    adam.step();
    result.steps = step + 1;
  }
  if (result.steps == 0) {
    result.params = raw;
    return result;
  }
  ParameterSet out;
  for (const auto& [name, t] : raw) {
    auto it = leaves.find(name);
    out.insert(name, it == leaves.end() ? t : Tensor::constant(it->second.value()));
  }
  result.params = std::move(out);
  return result;
}

// ---- Editor ----------------------------------------------------------------

std::string to_string(EditorVariant v) {
  switch (v) {
    case EditorVariant::Finetune: return "finetune";
    case EditorVariant::HyperNet: return "hypernet";
    case EditorVariant::HyperNetMasked: return "hypernet_masked";
    case EditorVariant::IdentityG: return "identity_g";
    case EditorVariant::IdentityGMasked: return "identity_g_masked";
  }
  return "?";
}

EditorVariant editor_variant_from_string(const std::string& s) {
  for (auto v : {EditorVariant::Finetune, EditorVariant::HyperNet, EditorVariant::HyperNetMasked,
                 EditorVariant::IdentityG, EditorVariant::IdentityGMasked}) {
    if (to_string(v) == s) return v;
  }
  throw ConfigError("unknown editor variant '" + s +
                    "' (expected finetune, hypernet, hypernet_masked, identity_g, identity_g_masked)");
}

bool uses_masks(EditorVariant v) {
  return v == EditorVariant::HyperNetMasked || v == EditorVariant::IdentityGMasked;
}

void to_json(nlohmann::json& j, const EditorOptions& o) {
  j = {{"g_hidden", o.transformer.hidden},
       {"step_init", o.transformer.step_init},
       {"identity", o.transformer.identity},
       {"g_seed", o.transformer.seed},
       {"mask_init", o.mask_init},
       {"finetune_max_steps", o.finetune.max_steps},
       {"finetune_lr", o.finetune.lr}};
}

void from_json(const nlohmann::json& j, EditorOptions& o) {
  j.at("g_hidden").get_to(o.transformer.hidden);
  j.at("step_init").get_to(o.transformer.step_init);
  j.at("identity").get_to(o.transformer.identity);
  j.at("g_seed").get_to(o.transformer.seed);
  j.at("mask_init").get_to(o.mask_init);
  j.at("finetune_max_steps").get_to(o.finetune.max_steps);
  j.at("finetune_lr").get_to(o.finetune.lr);
}

Editor::Editor(EditorVariant variant, const model::Transformer& model, int num_languages, EditorOptions options)
    : variant_(variant), options_(options), num_languages_(num_languages) {
  if (variant_ == EditorVariant::Finetune) return;
  options_.transformer.identity = variant_ == EditorVariant::IdentityG || variant_ == EditorVariant::IdentityGMasked;
  transformer_.emplace(weight_slots(model), options_.transformer);
  if (uses_masks(variant_)) masks_.emplace(num_languages, weight_slots(model), options_.mask_init);
}

ParameterSet Editor::edit(const model::Transformer& model, const ParameterSet& raw, const EditRequest& request,
                          GateMode mode, Rng* rng) const {
  if (variant_ == EditorVariant::Finetune) return finetune_edit(model, raw, request, options_.finetune).params;
  return hypernet_edit(model, raw, request, *transformer_, masks(), mode, rng);
}

std::vector<Tensor> Editor::group(const std::string& name) const {
  if (name == "g") return transformer_ ? transformer_->network_parameters() : std::vector<Tensor>{};
  if (name == "alpha") return transformer_ ? transformer_->step_parameters() : std::vector<Tensor>{};
  if (name == "mask") return masks_ ? masks_->parameters() : std::vector<Tensor>{};
  throw ContractViolation("unknown parameter group '" + name + "'");
}

std::vector<io::NamedArray> Editor::export_tensors() const {
  std::vector<io::NamedArray> out;
  if (transformer_) out = transformer_->export_tensors();
  if (masks_) {
    auto m = masks_->export_tensors();
    out.insert(out.end(), m.begin(), m.end());
  }
  return out;
}

void Editor::import_tensors(const io::Container& c) {
  if (transformer_) transformer_->import_tensors(c);
  if (masks_) masks_->import_tensors(c);
}

void Editor::copy_values_from(const Editor& other) {
  if (other.variant_ != variant_) throw ContractViolation("copy_values_from: variant mismatch");
  io::Container c;
  c.tensors = other.export_tensors();
  import_tensors(c);
  if (transformer_ && other.transformer_ && other.transformer_->fixed_step_size()) {
    transformer_->fix_step_sizes(*other.transformer_->fixed_step_size());
  }
}

nlohmann::json Editor::describe() const {
  nlohmann::json slots = nlohmann::json::array();
  if (transformer_) {
    for (const auto& s : transformer_->slots()) slots.push_back({{"name", s.name}, {"shape", {s.rows, s.cols}}});
  }
  nlohmann::json j = {{"variant", to_string(variant_)},
                      {"has_masks", has_masks()},
                      {"num_languages", num_languages_},
                      {"options", options_},
                      {"slots", slots}};
  if (transformer_ && transformer_->fixed_step_size()) {
    j["fixed_step_size"] = *transformer_->fixed_step_size();
  } else {
    j["fixed_step_size"] = nullptr;
  }
  return j;
}

void Editor::save(const std::filesystem::path& path, nlohmann::json extra) const {
  nlohmann::json meta = std::move(extra);
  meta["kind"] = "editor";
  meta["editor"] = describe();
  io::write_container(path, std::move(meta), export_tensors());
}

Editor Editor::load(const std::filesystem::path& path, const model::Transformer& model) {
  const io::Container c = io::read_container(path);
  if (c.metadata.value("kind", "") != "editor") throw ConfigError(path.string() + " is not an editor checkpoint");
  const auto& info = c.metadata.at("editor");
  const auto variant = editor_variant_from_string(info.at("variant").get<std::string>());
  Editor editor(variant, model, info.at("num_languages").get<int>(), info.at("options").get<EditorOptions>());
  if (editor.transformer_) {
    const auto& slots = info.at("slots");
    const auto expected = weight_slots(model);
    if (slots.size() != expected.size()) throw ConfigError("editor checkpoint does not match the model's editable weights");
    for (std::size_t i = 0; i < expected.size(); ++i) {
      const auto shape = slots[i].at("shape").get<std::vector<std::size_t>>();
      if (slots[i].at("name").get<std::string>() != expected[i].name || shape.at(0) != expected[i].rows ||
          shape.at(1) != expected[i].cols) {
        throw ConfigError("editor checkpoint weight '" + slots[i].at("name").get<std::string>() +
                          "' does not match the model");
      }
    }
    if (!info.at("fixed_step_size").is_null()) editor.transformer_->fix_step_sizes(info.at("fixed_step_size").get<double>());
  }
  editor.import_tensors(c);
  return editor;
}

}  // namespace edlab::editors

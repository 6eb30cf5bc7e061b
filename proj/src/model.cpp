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

#include "edlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>

#include "edlab/checkpoint.hpp"
#include "edlab/errors.hpp"

namespace edlab::model {

std::string to_string(HeadMode mode) {
  return mode == HeadMode::FactRecall ? "fact_recall" : "classification";
}

HeadMode head_mode_from_string(const std::string& s) {
  if (s == "fact_recall" || s == "fact") return HeadMode::FactRecall;
  if (s == "classification") return HeadMode::Classification;
  throw ConfigError("unknown head mode '" + s + "'");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("model config: " + what); };
  if (vocab_size <= 0) fail("vocab_size must be positive");
  if (num_languages <= 0) fail("num_languages must be positive");
  if (hidden_size <= 0 || num_heads <= 0) fail("hidden_size and num_heads must be positive");
  if (hidden_size % num_heads != 0) fail("hidden_size must be divisible by num_heads");
  if (num_layers <= 0) fail("num_layers must be positive");
  if (num_editable_layers < 1 || num_editable_layers > num_layers) {
    fail("num_editable_layers must lie in [1, num_layers]");
  }
  if (max_seq_len <= 0) fail("max_seq_len must be positive");
  if (mlp_ratio <= 0) fail("mlp_ratio must be positive");
  if (num_classes < 2) fail("num_classes must be at least 2");
  if (head_mode == HeadMode::Classification && num_classes != 3) {
    fail("classification head has exactly 3 classes");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"vocab_size", c.vocab_size},
       {"num_languages", c.num_languages},
       {"hidden_size", c.hidden_size},
       {"num_layers", c.num_layers},
       {"num_heads", c.num_heads},
       {"max_seq_len", c.max_seq_len},
       {"num_editable_layers", c.num_editable_layers},
       {"mlp_ratio", c.mlp_ratio},
       {"head_mode", to_string(c.head_mode)},
       {"num_classes", c.num_classes}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("num_languages").get_to(c.num_languages);
  j.at("hidden_size").get_to(c.hidden_size);
  j.at("num_layers").get_to(c.num_layers);
  j.at("num_heads").get_to(c.num_heads);
  j.at("max_seq_len").get_to(c.max_seq_len);
  j.at("num_editable_layers").get_to(c.num_editable_layers);
  j.at("mlp_ratio").get_to(c.mlp_ratio);
  c.head_mode = head_mode_from_string(j.at("head_mode").get<std::string>());
  j.at("num_classes").get_to(c.num_classes);
}

// ---- ParameterSet ----------------------------------------------------------

void ParameterSet::insert(const std::string& name, Tensor value) {
  if (!map_.emplace(name, std::move(value)).second) {
    throw ContractViolation("duplicate parameter name '" + name + "'");
  }
}

const Tensor& ParameterSet::at(const std::string& name) const {
  auto it = map_.find(name);
  if (it == map_.end()) throw ContractViolation("unknown parameter '" + name + "'");
  return it->second;
}

std::vector<std::string> ParameterSet::names() const {
  std::vector<std::string> out;
  out.reserve(map_.size());
  for (const auto& [name, _] : map_) out.push_back(name);
  return out;
}

std::vector<Tensor> ParameterSet::tensors() const {
  std::vector<Tensor> out;
  out.reserve(map_.size());
  for (const auto& [_, t] : map_) out.push_back(t);
  return out;
}

ParameterSet ParameterSet::detached() const {
  ParameterSet out;
  for (const auto& [name, t] : map_) out.insert(name, Tensor::constant(t.value()));
  return out;
}

ParameterSet ParameterSet::trainable() const {
  ParameterSet out;
  for (const auto& [name, t] : map_) out.insert(name, Tensor::parameter(t.value()));
  return out;
}

std::uint64_t ParameterSet::fingerprint() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [name, t] : map_) {
    mix(name.data(), name.size());
    for (std::size_t d : t.shape()) mix(&d, sizeof d);
    mix(t.value().data(), t.size() * sizeof(double));
  }
  return h;
}

// ---- Transformer -----------------------------------------------------------

namespace {

std::string block_name(int i, const char* suffix) { return "block." + std::to_string(i) + "." + suffix; }

}  // namespace

Transformer::Transformer(ModelConfig config) : config_(config) { config_.validate(); }

std::map<std::string, Shape> Transformer::parameter_shapes() const {
  const auto h = static_cast<std::size_t>(config_.hidden_size);
  const auto f = static_cast<std::size_t>(config_.mlp_size());
  std::map<std::string, Shape> shapes;
  shapes["tok_emb"] = {static_cast<std::size_t>(config_.vocab_size), h};
  shapes["pos_emb"] = {static_cast<std::size_t>(config_.max_seq_len), h};
  for (int i = 0; i < config_.num_layers; ++i) {
    shapes[block_name(i, "ln1.g")] = {h};
    shapes[block_name(i, "ln1.b")] = {h};
    shapes[block_name(i, "attn.wq")] = {h, h};
    shapes[block_name(i, "attn.wk")] = {h, h};
    shapes[block_name(i, "attn.wv")] = {h, h};
    shapes[block_name(i, "attn.wo")] = {h, h};
    shapes[block_name(i, "ln2.g")] = {h};
    shapes[block_name(i, "ln2.b")] = {h};
    shapes[block_name(i, "mlp.w1")] = {h, f};
    shapes[block_name(i, "mlp.b1")] = {f};
    shapes[block_name(i, "mlp.w2")] = {f, h};
    shapes[block_name(i, "mlp.b2")] = {h};
  }
  shapes["ln_f.g"] = {h};
  shapes["ln_f.b"] = {h};
  shapes["head.w"] = {h, static_cast<std::size_t>(config_.num_classes)};
  shapes["head.b"] = {static_cast<std::size_t>(config_.num_classes)};
  return shapes;
}

std::vector<std::string> Transformer::editable_weights() const {
  std::vector<std::string> out;
  for (int i = config_.num_prefix_layers(); i < config_.num_layers; ++i) {
    out.push_back(block_name(i, "mlp.w1"));
    out.push_back(block_name(i, "mlp.w2"));
  }
  std::sort(out.begin(), out.end());
  return out;
}

ParameterSet Transformer::init(std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double residual_scale = 1.0 / std::sqrt(2.0 * config_.num_layers);
  ParameterSet params;
  for (const auto& [name, shape] : parameter_shapes()) {
    Array value(shape);
    auto ends_with = [&name](std::string_view s) { return name.ends_with(s); };
    if (ends_with(".g")) {
      value.fill(1.0);
    } else if (ends_with(".b") || ends_with(".b1") || ends_with(".b2")) {
      value.fill(0.0);
    } else {
      double stddev = 1.0 / std::sqrt(static_cast<double>(shape[0]));
      if (name == "tok_emb" || name == "pos_emb") stddev = 1.0;
      if (ends_with("attn.wo") || ends_with("mlp.w2")) stddev *= residual_scale;
      for (double& v : value.values()) v = normal(rng) * stddev;
    }
    params.insert(name, Tensor::constant(std::move(value)));
  }
  return params;
}

void Transformer::check_compatible(const ParameterSet& params) const {
  const auto shapes = parameter_shapes();
  if (shapes.size() != params.size()) {
    throw ConfigError("parameter set has " + std::to_string(params.size()) + " tensors, model expects " +
                      std::to_string(shapes.size()));
  }
  for (const auto& [name, shape] : shapes) {
    if (!params.contains(name)) throw ConfigError("parameter set is missing '" + name + "'");
    if (params.at(name).shape() != shape) {
      throw ConfigError("parameter '" + name + "' has shape " + shape_string(params.at(name).shape()) +
                        ", model expects " + shape_string(shape));
    }
  }
}

Tensor Transformer::block(const ParameterSet& p, int i, const Tensor& x, std::size_t seq_len,
                          std::vector<TapPoint>* taps) const {
  const Tensor a1 = layer_norm(x, p.at(block_name(i, "ln1.g")), p.at(block_name(i, "ln1.b")));
  const Tensor q = matmul(a1, p.at(block_name(i, "attn.wq")));
  const Tensor k = matmul(a1, p.at(block_name(i, "attn.wk")));
  const Tensor v = matmul(a1, p.at(block_name(i, "attn.wv")));
  const Tensor att = attention(q, k, v, seq_len, static_cast<std::size_t>(config_.num_heads));
  const Tensor x1 = add(x, matmul(att, p.at(block_name(i, "attn.wo"))));

  const Tensor a2 = layer_norm(x1, p.at(block_name(i, "ln2.g")), p.at(block_name(i, "ln2.b")));
  const std::string w1 = block_name(i, "mlp.w1");
  const std::string w2 = block_name(i, "mlp.w2");
  const Tensor pre = matmul(a2, p.at(w1));
  const Tensor hidden = gelu(add_row(pre, p.at(block_name(i, "mlp.b1"))));
  const Tensor out = matmul(hidden, p.at(w2));
  if (taps != nullptr) {
    taps->push_back({w1, a2, pre});
    taps->push_back({w2, hidden, out});
  }
  return add(x1, add_row(out, p.at(block_name(i, "mlp.b2"))));
}

Tensor Transformer::encode(const ParameterSet& params, const TokenBatch& tokens) const {
  if (tokens.empty()) throw InputError("encode: empty batch");
  const std::size_t seq_len = tokens.front().size();
  if (seq_len == 0) throw InputError("encode: empty sequence");
  if (seq_len > static_cast<std::size_t>(config_.max_seq_len)) {
    throw InputError("encode: sequence of length " + std::to_string(seq_len) + " exceeds max_seq_len " +
                     std::to_string(config_.max_seq_len));
  }
  std::vector<int> ids;
  std::vector<int> positions;
  ids.reserve(tokens.size() * seq_len);
  positions.reserve(tokens.size() * seq_len);
  for (const auto& seq : tokens) {
    if (seq.size() != seq_len) throw InputError("encode: sequences in a batch must share one length");
    for (std::size_t t = 0; t < seq_len; ++t) {
      ids.push_back(seq[t]);
      positions.push_back(static_cast<int>(t));
    }
  }
  Tensor x = add(embedding(params.at("tok_emb"), ids), embedding(params.at("pos_emb"), positions));
  for (int i = 0; i < config_.num_prefix_layers(); ++i) x = block(params, i, x, seq_len, nullptr);
  return mean_pool(x, seq_len);
}

Tensor Transformer::forward_tail(const ParameterSet& params, const Tensor& pooled) const {
  if (pooled.value().rank() != 2 || pooled.value().cols() != static_cast<std::size_t>(config_.hidden_size)) {
    throw DimensionError("forward_tail: pooled input " + shape_string(pooled.shape()) + " does not match hidden size");
  }
  Tensor x = pooled;
  for (int i = config_.num_prefix_layers(); i < config_.num_layers; ++i) x = block(params, i, x, 1, nullptr);
  const Tensor y = layer_norm(x, params.at("ln_f.g"), params.at("ln_f.b"));
  return add_row(matmul(y, params.at("head.w")), params.at("head.b"));
}

Tensor Transformer::forward(const ParameterSet& params, const TokenBatch& tokens) const {
  return forward_tail(params, encode(params, tokens));
}

TapResult Transformer::forward_with_taps(const ParameterSet& params, const Array& pooled,
                                         std::span<const int> targets) const {
  const auto editable = editable_weights();
  Tape tape;
  TapeScope scope(tape);
  ParameterSet local;
  for (const auto& [name, t] : params) {
    const bool is_editable = std::find(editable.begin(), editable.end(), name) != editable.end();
    if (is_editable) {
      local.insert(name, Tensor::parameter(t.value()));
    } else {
      local.insert(name, t.requires_grad() ? Tensor::constant(t.value()) : t);
    }
  }
  std::vector<TapPoint> points;
  Tensor x = Tensor::constant(pooled);
  for (int i = config_.num_prefix_layers(); i < config_.num_layers; ++i) x = block(local, i, x, 1, &points);
  const Tensor y = layer_norm(x, local.at("ln_f.g"), local.at("ln_f.b"));
  const Tensor logits = add_row(matmul(y, local.at("head.w")), local.at("head.b"));
  const Tensor loss = softmax_cross_entropy(logits, targets);

  TapResult result;
  result.loss = loss.item();
  result.logits = logits.value();
  backward(loss);
  std::sort(points.begin(), points.end(),
            [](const TapPoint& a, const TapPoint& b) { return a.weight < b.weight; });
  for (const auto& pt : points) {
    result.taps.push_back({pt.weight, pt.input.value(), pt.output.grad()});
    result.weight_grads[pt.weight] = local.at(pt.weight).grad();
  }
  return result;
}

TapResult Transformer::forward_with_taps(const ParameterSet& params, const TokenBatch& tokens,
                                         std::span<const int> targets) const {
  const Array pooled = features(params, tokens);
  return forward_with_taps(params, pooled, targets);
}

Array Transformer::features(const ParameterSet& params, const TokenBatch& tokens, std::size_t chunk) const {
  const auto h = static_cast<std::size_t>(config_.hidden_size);
  Array out({tokens.size(), h});
  const ParameterSet frozen = params.detached();
  for (std::size_t start = 0; start < tokens.size(); start += chunk) {
    const std::size_t stop = std::min(tokens.size(), start + chunk);
    TokenBatch part(tokens.begin() + static_cast<std::ptrdiff_t>(start),
                    tokens.begin() + static_cast<std::ptrdiff_t>(stop));
    const Array pooled = encode(frozen, part).value();
    std::copy_n(pooled.data(), pooled.size(), out.data() + start * h);
  }
  return out;
}

Array Transformer::logits(const ParameterSet& params, const Array& pooled) const {
  return forward_tail(params, Tensor::constant(pooled)).value();
}

ParameterSet apply_delta(const ParameterSet& params, const std::map<std::string, Tensor>& deltas) {
  for (const auto& [name, delta] : deltas) {
    if (!params.contains(name)) throw ContractViolation("apply_delta: unknown weight '" + name + "'");
    if (params.at(name).shape() != delta.shape()) {
      throw ContractViolation("apply_delta: delta for '" + name + "' has shape " + shape_string(delta.shape()) +
                              ", weight has " + shape_string(params.at(name).shape()));
    }
  }
  ParameterSet out;
  for (const auto& [name, t] : params) {
    auto it = deltas.find(name);
    out.insert(name, it == deltas.end() ? t : add(t, it->second));
  }
  return out;
}

void save_model(const std::filesystem::path& path, const ModelConfig& config, const ParameterSet& params,
                nlohmann::json extra) {
  nlohmann::json meta = std::move(extra);
  meta["kind"] = "raw_model";
  meta["config"] = config;
  std::vector<io::NamedArray> tensors;
  for (const auto& [name, t] : params) tensors.push_back({name, t.value()});
  io::write_container(path, std::move(meta), tensors);
}

LoadedModel load_model(const std::filesystem::path& path) {
  io::Container c = io::read_container(path);
  if (c.metadata.value("kind", "") != "raw_model") {
    throw ConfigError(path.string() + " is not a raw-model checkpoint");
  }
  LoadedModel out;
  out.config = c.metadata.at("config").get<ModelConfig>();
  for (auto& t : c.tensors) out.params.insert(t.name, Tensor::constant(std::move(t.value)));
  Transformer(out.config).check_compatible(out.params);
  out.metadata = std::move(c.metadata);
  return out;
}

}  // namespace edlab::model

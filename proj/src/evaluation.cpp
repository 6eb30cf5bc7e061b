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

#include "edlab/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <thread>

#include "edlab/errors.hpp"

namespace edlab::evaluation {

namespace {

Rng edit_rng(std::uint64_t seed, std::uint64_t stream, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(static_cast<std::uint64_t>(index) >> 32)};
  return Rng(seq);
}

std::vector<std::size_t> pick(std::vector<std::size_t> pool, std::size_t n, Rng& rng) {
  if (pool.size() <= n) return pool;
  std::vector<std::size_t> out;
  out.reserve(n);
  std::sample(pool.begin(), pool.end(), std::back_inserter(out), n, rng);
  return out;
}

double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? 1.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

double success_rate(double acc, double con) {
  const double s = acc + con;
  return s > 0.0 ? 2.0 * acc * con / s : 0.0;
}

EvalContext::EvalContext(const model::Transformer& model, const ParameterSet& raw, const SplitData& split)
    : model_(&model), raw_(&raw), split_(&split) {
  model::TokenBatch tokens;
  tokens.reserve(split.size());
  for (const auto& ex : split.examples()) tokens.push_back(ex.tokens);
  features_ = model.features(raw, tokens);
  raw_logits_ = model.logits(raw.detached(), features_);
  raw_predictions_ = argmax(raw_logits_);
}

EditRequest EvalContext::request(std::size_t index, int desired_label) const {
  const std::size_t idx[] = {index};
  return {features_.gather_rows(idx), {desired_label}, (*split_)[index].language};
}

std::vector<int> EvalContext::predict(const ParameterSet& edited, std::span<const std::size_t> indices) const {
  if (indices.empty()) return {};
  return argmax(model_->logits(edited, features_.gather_rows(indices)));
}

EditFn make_edit_fn(const editors::Editor& editor, const EvalContext& context, editors::GateMode mode) {
  return [&editor, &context, mode](const EditRequest& request, Rng& rng) {
    return editor.edit(context.model(), context.raw(), request, mode, &rng);
  };
}

EditFn identity_edit_fn(const EvalContext& context) {
  return [&context](const EditRequest&, Rng&) { return context.raw(); };
}

std::vector<EditOutcome> evaluate_edits(const EditFn& edit, const EvalContext& context,
                                        std::span<const std::size_t> d_edit, std::span<const std::size_t> d_update,
                                        const EvalOptions& options, std::uint64_t stream) {
  const SplitData& split = context.split();
  std::vector<std::size_t> update(d_update.begin(), d_update.end());
  std::sort(update.begin(), update.end());
  update.erase(std::unique(update.begin(), update.end()), update.end());
  std::vector<char> in_update(split.size(), 0);
  for (std::size_t i : update) {
    if (i >= split.size()) throw IndexError("evaluate_edits: update index out of range");
    in_update[i] = 1;
  }

  std::vector<EditOutcome> outcomes(d_edit.size());
  auto run = [&](std::size_t begin, std::size_t end) {
    for (std::size_t p = begin; p < end; ++p) {
      const std::size_t e = d_edit[p];
      if (e >= split.size()) throw IndexError("evaluate_edits: edit index out of range");
      Rng rng = edit_rng(options.seed, stream, e);
      const auto [lo, hi] = split.label_pool(split[e].class_id);
      const int desired = std::uniform_int_distribution<int>(lo, hi - 1)(rng);

      std::vector<std::size_t> parallel;
      for (std::size_t i : split.parallel(e)) {
        if (in_update[i]) parallel.push_back(i);
      }
      EditOutcome& out = outcomes[p];
      if (parallel.empty()) {
        out.skipped = true;
        continue;
      }
      std::sort(parallel.begin(), parallel.end());
      std::vector<std::size_t> others;
      others.reserve(update.size());
      for (std::size_t i : update) {
        if (!std::binary_search(parallel.begin(), parallel.end(), i) &&
            split[i].class_id != split[e].class_id) {
          others.push_back(i);
        }
      }
      const auto u = pick(std::move(parallel), options.samples_per_edit, rng);
      const auto r = pick(std::move(others), options.samples_per_edit, rng);

      const ParameterSet edited = edit(context.request(e, desired), rng);
      std::vector<std::size_t> rows(u);
      rows.insert(rows.end(), r.begin(), r.end());
      const auto preds = context.predict(edited, rows);
      for (std::size_t k = 0; k < u.size(); ++k) out.hits += preds[k] == desired;
      for (std::size_t k = 0; k < r.size(); ++k) out.kept += preds[u.size() + k] == context.raw_predictions()[r[k]];
      out.update_samples = u.size();
      out.retain_samples = r.size();
    }
  };

  const std::size_t workers =
      std::clamp<std::size_t>(static_cast<std::size_t>(std::max(options.workers, 1)), 1, std::max<std::size_t>(d_edit.size(), 1));
  if (workers == 1) {
    run(0, d_edit.size());
    return outcomes;
  }
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(workers);
  const std::size_t chunk = (d_edit.size() + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = std::min(d_edit.size(), w * chunk);
    const std::size_t end = std::min(d_edit.size(), begin + chunk);
    threads.emplace_back([&, w, begin, end] {
      try {
        run(begin, end);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return outcomes;
}

namespace {

LanguageMetrics reduce(int language, const std::vector<EditOutcome>& outcomes) {
  LanguageMetrics m;
  m.language = language;
  std::size_t hits = 0, kept = 0;
  for (const auto& o : outcomes) {
    if (o.skipped) {
      ++m.skipped;
      continue;
    }
    ++m.edits;
    hits += o.hits;
    kept += o.kept;
    m.update_samples += o.update_samples;
    m.retain_samples += o.retain_samples;
  }
  m.acc = m.update_samples == 0 ? 0.0 : ratio(hits, m.update_samples);
  m.con = ratio(kept, m.retain_samples);
  m.succ = success_rate(m.acc, m.con);
  return m;
}

std::vector<std::size_t> limited(const std::vector<std::size_t>& edits, std::size_t max_edits) {
  if (max_edits == 0 || edits.size() <= max_edits) return edits;
  return {edits.begin(), edits.begin() + static_cast<std::ptrdiff_t>(max_edits)};
}

}  // namespace

double editing_accuracy(const EditFn& edit, const EvalContext& context, std::span<const std::size_t> d_edit,
                        std::span<const std::size_t> d_update, const EvalOptions& options) {
  return reduce(0, evaluate_edits(edit, context, d_edit, d_update, options)).acc;
}

double editing_consistency(const EditFn& edit, const EvalContext& context, std::span<const std::size_t> d_edit,
                           std::span<const std::size_t> d_update, const EvalOptions& options) {
  return reduce(0, evaluate_edits(edit, context, d_edit, d_update, options)).con;
}

MetricsRecord macro_average_eval(const EditFn& edit, const EvalContext& context, std::span<const int> languages,
                                 const EvalOptions& options) {
  const SplitData& split = context.split();
  if (languages.empty()) throw ContractViolation("macro_average_eval: no editing languages");
  std::vector<std::size_t> all;
  if (options.update_languages.empty()) {
    all.resize(split.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  } else {
    for (int l : options.update_languages) {
      if (l < 0 || l >= split.num_languages()) throw ConfigError("macro_average_eval: unknown language " + std::to_string(l));
      const auto& members = split.by_language(l);
      all.insert(all.end(), members.begin(), members.end());
    }
  }

  MetricsRecord record;
  for (int l : languages) {
    if (l < 0 || l >= split.num_languages()) throw ConfigError("macro_average_eval: unknown language " + std::to_string(l));
    const auto d_edit = limited(split.by_language(l), options.max_edits);
    record.per_language.push_back(
        reduce(l, evaluate_edits(edit, context, d_edit, all, options, static_cast<std::uint64_t>(l))));
  }
  for (const auto& m : record.per_language) {
    record.acc += m.acc;
    record.con += m.con;
  }
  record.acc /= static_cast<double>(record.per_language.size());
  record.con /= static_cast<double>(record.per_language.size());
  record.succ = success_rate(record.acc, record.con);
  return record;
}

std::vector<std::vector<double>> mask_similarity_matrix(std::span<const Array> gates, double top_fraction) {
  if (!(top_fraction > 0.0 && top_fraction <= 1.0)) throw ContractViolation("top_fraction must lie in (0, 1]");
  const std::size_t k = gates.size();
  if (k == 0) return {};
  const std::size_t dim = gates[0].size();
  for (const auto& g : gates) {
    if (g.size() != dim) throw DimensionError("mask_similarity_matrix: gate vectors differ in length");
  }
  const auto top = static_cast<std::size_t>(std::ceil(top_fraction * static_cast<double>(dim) - 1e-9));
  const std::size_t keep = std::clamp<std::size_t>(top, 1, dim);

  std::vector<std::vector<double>> out(k, std::vector<double>(k, kUndefined));
  std::vector<std::size_t> order(dim);
  for (std::size_t row = 0; row < k; ++row) {
    for (std::size_t i = 0; i < dim; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return gates[row][a] > gates[row][b]; });
    for (std::size_t col = 0; col < k; ++col) {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (std::size_t j = 0; j < keep; ++j) {
        const double a = gates[row][order[j]];
        const double b = gates[col][order[j]];
        dot += a * b;
        na += a * a;
        nb += b * b;
      }
      if (na > 0.0 && nb > 0.0) out[row][col] = dot / (std::sqrt(na) * std::sqrt(nb));
    }
  }
  return out;
}

std::string to_string(MaskBasis basis) { return basis == MaskBasis::Gates ? "gates" : "log_alpha"; }

MaskBasis mask_basis_from_string(const std::string& s) {
  if (s == "gates") return MaskBasis::Gates;
  if (s == "log_alpha") return MaskBasis::LogAlpha;
  throw ConfigError("unknown mask basis '" + s + "' (expected gates or log_alpha)");
}

std::vector<std::vector<double>> mask_similarity_matrix(const editors::LanguageMaskSet& masks, double top_fraction,
                                                        MaskBasis basis) {
  std::vector<Array> vectors;
  for (int l = 0; l < masks.num_languages(); ++l) {
    vectors.push_back(basis == MaskBasis::Gates ? masks.gate_vector(l) : masks.log_alpha_vector(l));
  }
  return mask_similarity_matrix(vectors, top_fraction);
}

nlohmann::json to_json(const MetricsRecord& record) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& m : record.per_language) {
    rows.push_back({{"language", m.language},
                    {"acc", m.acc},
                    {"con", m.con},
                    {"succ", m.succ},
                    {"edits", m.edits},
                    {"update_samples", m.update_samples},
                    {"retain_samples", m.retain_samples},
                    {"skipped", m.skipped}});
  }
  return {{"overall", {{"acc", record.acc}, {"con", record.con}, {"succ", record.succ}}}, {"per_language", rows}};
}

MetricsRecord metrics_from_json(const nlohmann::json& j) {
  MetricsRecord r;
  r.acc = j.at("overall").at("acc").get<double>();
  r.con = j.at("overall").at("con").get<double>();
  r.succ = j.at("overall").at("succ").get<double>();
  for (const auto& row : j.at("per_language")) {
    LanguageMetrics m;
    m.language = row.at("language").get<int>();
    m.acc = row.at("acc").get<double>();
    m.con = row.at("con").get<double>();
    m.succ = row.at("succ").get<double>();
    m.edits = row.at("edits").get<std::size_t>();
    m.update_samples = row.at("update_samples").get<std::size_t>();
    m.retain_samples = row.at("retain_samples").get<std::size_t>();
    m.skipped = row.at("skipped").get<std::size_t>();
    r.per_language.push_back(m);
  }
  return r;
}

nlohmann::json similarity_to_json(const std::vector<std::vector<double>>& matrix) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& row : matrix) {
    nlohmann::json r = nlohmann::json::array();
    for (double v : row) {
      if (std::isnan(v)) {
        r.push_back(nullptr);
      } else {
        r.push_back(v);
      }
    }
    out.push_back(r);
  }
  return out;
}

std::string metrics_csv(const MetricsRecord& record) {
  std::ostringstream os;
  os.precision(17);
  os << "scope,language,acc,con,succ,edits\n";
  std::size_t edits = 0;
  for (const auto& m : record.per_language) {
    os << "language," << m.language << ',' << m.acc << ',' << m.con << ',' << m.succ << ',' << m.edits << '\n';
    edits += m.edits;
  }
  os << "overall,all," << record.acc << ',' << record.con << ',' << record.succ << ',' << edits << '\n';
  return os.str();
}

}  // namespace edlab::evaluation

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

// Python bindings: corpus generation, hard-concrete gates, metrics, mask
// analysis of saved editors, and the command-line entry point.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "edlab/checkpoint.hpp"
#include "edlab/cli.hpp"
#include "edlab/corpus.hpp"
#include "edlab/editors.hpp"
#include "edlab/errors.hpp"
#include "edlab/evaluation.hpp"
#include "edlab/model.hpp"

namespace py = pybind11;
using namespace edlab;

namespace {

py::object to_python(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

nlohmann::json from_python(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

Array to_array(const std::vector<double>& v) { return Array::vector(v); }

std::vector<double> to_list(const Array& a) { return {a.values().begin(), a.values().end()}; }

py::dict generate(std::uint64_t seed, const py::dict& options) {
  nlohmann::json merged = corpus::CorpusConfig{};
  const nlohmann::json requested = from_python(options);
  for (const auto& [key, value] : requested.items()) {
    if (!merged.contains(key)) throw ConfigError("unknown corpus option '" + key + "'");
    merged[key] = value;
  }
  corpus::CorpusConfig cfg;
  try {
    cfg = merged.get<corpus::CorpusConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad corpus option: ") + e.what());
  }
  const corpus::Dataset d = corpus::generate_corpus(seed, cfg);
  py::list examples;
  for (const auto& e : d.examples) {
    const corpus::Query q = d.decode(e);
    examples.append(py::dict(py::arg("class_id") = e.class_id, py::arg("language") = e.language,
                             py::arg("tokens") = e.tokens, py::arg("label") = e.label,
                             py::arg("subject") = q.subject, py::arg("relation") = q.relation));
  }
  py::dict out;
  out["seed"] = seed;
  out["config"] = to_python(merged);
  out["vocab_size"] = d.vocab.size();
  out["num_labels"] = d.num_labels();
  out["examples"] = examples;
  return out;
}

editors::Editor load_editor(const std::string& path) {
  const auto meta = io::read_container(path).metadata;
  if (!meta.contains("model")) throw ConfigError(path + " does not record its model configuration");
  const model::Transformer model(meta.at("model").get<model::ModelConfig>());
  return editors::Editor::load(path, model);
}

py::dict editor_info(const std::string& path) {
  auto meta = io::read_container(path).metadata;
  meta.erase("tensors");
  const auto editor = load_editor(path);
  py::dict out;
  out["variant"] = editors::to_string(editor.variant());
  out["has_masks"] = editor.masks() != nullptr;
  if (editor.masks() != nullptr) out["mean_gate_activity"] = editor.masks()->mean_gate_activity();
  out["metadata"] = to_python(meta);
  return out;
}

std::vector<std::vector<double>> mask_similarity(const std::string& path, double top_fraction,
                                                 const std::string& basis) {
  const auto editor = load_editor(path);
  if (editor.masks() == nullptr) {
    throw ConfigError("editor " + path + " (" + editors::to_string(editor.variant()) + ") has no language masks");
  }
  return evaluation::mask_similarity_matrix(*editor.masks(), top_fraction, evaluation::mask_basis_from_string(basis));
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Cross-lingual model editing toolkit";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<InputError>(m, "InputError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

  m.def("success_rate", &evaluation::success_rate, py::arg("acc"), py::arg("con"),
        "Harmonic mean of accuracy and consistency; 0 when both are 0.");

  m.def(
      "expected_l0", [](const std::vector<double>& log_alpha) {
        std::vector<double> p;
        for (double v : log_alpha) p.push_back(editors::expected_l0(Tensor::constant(Array::vector({v}))).item());
        return p;
      },
      py::arg("log_alpha"), "P(gate > 0) for each hard-concrete log-alpha.");
  m.def(
      "gate", [](const std::vector<double>& log_alpha, const std::vector<double>& u) {
        return to_list(editors::gate(Tensor::constant(to_array(log_alpha)), to_array(u)).value());
      },
      py::arg("log_alpha"), py::arg("u"), "Hard-concrete sample for uniform noise u in (0, 1).");
  m.def(
      "gate_deterministic", [](const std::vector<double>& log_alpha) {
        return to_list(editors::gate_deterministic(Tensor::constant(to_array(log_alpha))).value());
      },
      py::arg("log_alpha"), "Noise-free hard-concrete gate.");

  m.def("generate_corpus", &generate, py::arg("seed"), py::arg("config") = py::dict(),
        "Generate the parallel corpus; config keys follow the [corpus] section.");
  m.def("editor_info", &editor_info, py::arg("path"), "Variant, mask activity and metadata of a saved editor.");
  m.def("mask_similarity", &mask_similarity, py::arg("path"), py::arg("top_fraction") = 0.01,
        py::arg("basis") = "gates", "Top-k overlap matrix between the language masks of a saved editor.");
  m.def(
      "run_cli", [](const std::vector<std::string>& args) {
        py::gil_scoped_release release;
        return cli::run_cli(args);
      },
      py::arg("args"), "Run an edlab subcommand; returns the process exit code.");
}

// SPDX-License-Identifier: Apache-2.0
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "scmoe/analysis.hpp"
#include "scmoe/cli.hpp"
#include "scmoe/core_math.hpp"
#include "scmoe/decoding.hpp"
#include "scmoe/error.hpp"
#include "scmoe/model.hpp"
#include "scmoe/model_io.hpp"
#include "scmoe/random.hpp"
#include "scmoe/routing.hpp"

namespace py = pybind11;
using namespace scmoe;

namespace {

std::vector<int> prompt_tokens(const py::object& prompt) {
  if (py::isinstance<py::str>(prompt)) return encode(prompt.cast<std::string>());
  return prompt.cast<std::vector<int>>();
}

/// Masked contrast entries come back as None.
py::list masked_to_none(const LogitVector& z) {
  py::list out;
  for (double v : z) {
    if (is_masked(v)) {
      out.append(py::none());
    } else {
      out.append(v);
    }
  }
  return out;
}

py::dict generation_dict(const GenerationResult& r) {
  py::dict d;
  d["tokens"] = r.tokens;
  d["text"] = py::bytes(r.text);
  d["total_ns"] = r.total_ns;
  py::list n_valid;
  for (const auto& s : r.steps) n_valid.append(s.n_valid);
  d["n_valid"] = n_valid;
  return d;
}

}  // namespace

PYBIND11_MODULE(_scmoe, m) {
  m.doc() = "Self-contrast decoding for mixture-of-experts models";

  static py::handle error_type =
      PyErr_NewException("scmoe._scmoe.ScmoeError", PyExc_RuntimeError, nullptr);
  m.add_object("ScmoeError", error_type);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object exc = py::reinterpret_borrow<py::object>(error_type)(e.what());
      exc.attr("code") = std::string(errc_name(e.code()));
      PyErr_SetObject(error_type.ptr(), exc.ptr());
    }
  });

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("n_layers", &ModelConfig::n_layers)
      .def_readwrite("d_model", &ModelConfig::d_model)
      .def_readwrite("n_heads", &ModelConfig::n_heads)
      .def_readwrite("n_experts", &ModelConfig::n_experts)
      .def_readwrite("n_shared_experts", &ModelConfig::n_shared_experts)
      .def_readwrite("d_ff", &ModelConfig::d_ff)
      .def_readwrite("vocab_size", &ModelConfig::vocab_size)
      .def_readwrite("max_seq_len", &ModelConfig::max_seq_len)
      .def_readwrite("moe_every", &ModelConfig::moe_every)
      .def("to_json", &config_to_json)
      .def_static("from_json", &config_from_json)
      .def("__eq__", [](const ModelConfig& a, const ModelConfig& b) { return a == b; });

  py::class_<Model>(m, "Model")
      .def_static("random", &generate_random_model, py::arg("config"), py::arg("seed") = 0)
      .def_static("load", [](const std::string& path) { return load_checkpoint(path); })
      .def("save", [](const Model& self, const std::string& path) { save_checkpoint(self, path); })
      .def("to_bytes",
           [](const Model& self) {
             const auto b = serialize_checkpoint(self);
             return py::bytes(reinterpret_cast<const char*>(b.data()), b.size());
           })
      .def_static("from_bytes",
                  [](const py::bytes& data) {
                    const std::string s = data;
                    return deserialize_checkpoint(
                        std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
                  })
      .def_property_readonly("config", &Model::config)
      .def(
          "logits",
          [](const Model& self, const py::object& prompt, const std::string& routing, std::uint64_t seed) {
            GenerationContext ctx(self, parse_routing(routing), seed);
            std::vector<std::vector<double>> out;
            for (const auto& step : ctx.forward(prompt_tokens(prompt))) out.push_back(step.logits);
            return out;
          },
          py::arg("prompt"), py::arg("routing") = "top:2", py::arg("seed") = 0,
          "Next-token logits at every position of the prompt.");

  m.def("encode", &encode);
  m.def("decode", [](const std::vector<int>& ids) { return py::bytes(decode(ids)); });

  m.def("softmax", [](const std::vector<double>& z) { return softmax(z); });
  m.def("kl_divergence", [](const std::vector<double>& p, const std::vector<double>& q) { return kl_divergence(p, q); });
  m.def("js_divergence", [](const std::vector<double>& p, const std::vector<double>& q) { return js_divergence(p, q); });

  m.def(
      "select_experts",
      [](const std::vector<double>& gates, const std::string& routing, std::uint64_t seed) {
        Rng rng(seed);
        const auto sel = select_experts(gates, parse_routing(routing), rng);
        return py::make_tuple(sel.indices, sel.weights);
      },
      py::arg("gates"), py::arg("routing"), py::arg("seed") = 0, "Returns (indices, weights).");

  m.def(
      "plausibility_mask", [](const std::vector<double>& z, double alpha) { return plausibility_mask(z, alpha); },
      py::arg("z"), py::arg("alpha"));
  m.def(
      "contrast_logits",
      [](const std::vector<double>& strong, const std::vector<double>& weak, double beta, double alpha) {
        return masked_to_none(contrast_logits(strong, weak, beta, alpha));
      },
      py::arg("strong"), py::arg("weak"), py::arg("beta") = 0.5, py::arg("alpha") = 0.1);

  m.def(
      "generate",
      [](const Model& model, const py::object& prompt, const std::string& decoder, int max_new_tokens,
         std::uint64_t seed, bool ignore_stop) {
        DecodeConfig cfg = parse_decoder_spec(decoder);
        cfg.max_new_tokens = max_new_tokens;
        cfg.seed = seed;
        cfg.ignore_stop = ignore_stop;
        std::unique_ptr<Model> amateur;
        if (const auto* cd = std::get_if<ContrastiveDecoding>(&cfg.decoder)) {
          amateur = std::make_unique<Model>(load_checkpoint(cd->amateur_checkpoint));
        }
        const std::vector<int> tokens = prompt_tokens(prompt);
        GenerationResult r;
        {
          py::gil_scoped_release release;
          r = generate(model, tokens, cfg, amateur.get());
        }
        return generation_dict(r);
      },
      py::arg("model"), py::arg("prompt"), py::arg("decoder") = "greedy", py::arg("max_new_tokens") = 64,
      py::arg("seed") = 0, py::arg("ignore_stop") = false);

  m.def(
      "kld_heatmap",
      [](const Model& model, const std::string& prompt, const std::string& reference, const std::string& strong,
         const std::vector<std::string>& weak) {
        std::vector<RoutingStrategy> weak_list;
        for (const auto& w : weak) weak_list.push_back(parse_routing(w));
        const auto hm = kld_heatmap(model, encode(prompt), reference_tokens(reference), parse_routing(strong),
                                    weak_list);
        py::dict d;
        d["tokens"] = hm.positions;
        d["columns"] = hm.columns;
        d["kld"] = hm.matrix;
        return d;
      },
      py::arg("model"), py::arg("prompt"), py::arg("reference"), py::arg("strong") = "top:2", py::arg("weak"));

  m.def(
      "expert_utilization",
      [](const Model& model, const std::string& text, const std::string& strong, const std::string& weak,
         std::uint64_t seed) {
        const auto r = expert_utilization(model, encode(text), parse_routing(strong), parse_routing(weak), seed);
        py::dict d;
        d["total_slots"] = r.total_slots;
        d["unchosen_hits"] = r.unchosen_hits;
        d["ratio"] = r.ratio;
        return d;
      },
      py::arg("model"), py::arg("text"), py::arg("strong") = "top:2", py::arg("weak") = "rank:2",
      py::arg("seed") = 0);

  m.def(
      "majority_vote",
      [](const std::vector<std::optional<std::string>>& answers) {
        const auto v = majority_vote(answers);
        return py::make_tuple(v.answer, v.count);
      },
      "Returns (answer, count); ties go to the answer seen first.");
  m.def("extract_numeric_answer", [](const std::string& text) { return extract_numeric_answer(text); });

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out;
        std::ostringstream err;
        int code;
        {
          py::gil_scoped_release release;
          code = cli::run(args, out, err);
        }
        return py::make_tuple(code, py::bytes(out.str()), py::bytes(err.str()));
      },
      "Runs the command-line interface; returns (exit_code, stdout, stderr).");

  m.attr("BOS") = kBos;
  m.attr("EOS") = kEos;
}

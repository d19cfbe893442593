// Python bindings for the compression replay engine. The surface mirrors the
// operations a notebook actually wants: compress/adapt features, drive the
// memory bank, run whole experiments from a JSON config, and call the
// self-check oracles.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <sstream>

#include "ahc/compressor.hpp"
#include "ahc/config.hpp"
#include "ahc/continual.hpp"
#include "ahc/memory.hpp"
#include "ahc/report.hpp"
#include "ahc/selfcheck.hpp"

namespace py = pybind11;

#define STRINGIFY(x) #x
#define MACRO_STRINGIFY(x) STRINGIFY(x)

namespace {

std::vector<std::uint8_t> to_bytes(const py::bytes& b) {
  const std::string s = b;
  return std::vector<std::uint8_t>(s.begin(), s.end());
}

py::bytes from_bytes(const std::vector<std::uint8_t>& v) {
  return py::bytes(reinterpret_cast<const char*>(v.data()), v.size());
}

// Thin value wrapper so Python holds the parameter pack opaquely.
struct PyCompressor {
  ahc::CompressorParams params;
};

py::dict report_to_dict(const ahc::ExperimentReport& report) {
  py::dict out;
  out["accuracy"] = report.accuracy.columns;
  out["final_accuracies"] = report.final_accuracies;
  out["mean_final_accuracy"] = report.mean_final_accuracy;
  if (report.forgetting) {
    out["forgetting"] = *report.forgetting;
  } else {
    out["forgetting"] = py::none();
  }
  out["bank_records_after_task"] = report.bank_records_after_task;
  out["peak_memory_bytes"] = report.peak_memory_bytes;
  out["final_memory_bytes"] = report.final_memory_bytes;
  const ahc::RenderedReport rendered = ahc::render_report(report);
  out["report_txt"] = rendered.report_txt;
  out["metrics_csv"] = rendered.metrics_csv;
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "feature-level compression replay engine for continual learning";

  py::register_exception<ahc::ConfigError>(m, "ConfigError", PyExc_ValueError);

  m.def(
      "importance",
      [](double uncertainty, double difficulty, std::uint32_t age, double alpha,
         double beta, double gamma, std::uint32_t age_max) {
        ahc::ImportanceWeights w;
        w.alpha = alpha;
        w.beta = beta;
        w.gamma = gamma;
        w.age_max = age_max;
        ahc::validate(w);
        return ahc::importance(uncertainty, difficulty, age, w);
      },
      py::arg("uncertainty"), py::arg("difficulty"), py::arg("age") = 0,
      py::arg("alpha") = 0.3, py::arg("beta") = 0.4, py::arg("gamma") = 0.3,
      py::arg("age_max") = 10000,
      "Importance score alpha*U + beta*D + gamma*(1 - min(age, age_max)/age_max).");

  m.def("derive_seed", &ahc::derive_seed, py::arg("base"), py::arg("tag"),
        py::arg("a") = 0, py::arg("b") = 0,
        "Deterministic seed splitting for independent RNG streams.");

  m.def(
      "forgetting",
      [](const std::vector<std::vector<double>>& columns) {
        ahc::AccuracyMatrix mtx;
        mtx.columns = columns;
        return ahc::forgetting(mtx);
      },
      py::arg("accuracy_columns"),
      "Average best-minus-final accuracy over all but the last task.");

  py::class_<PyCompressor>(m, "Compressor")
      .def(py::init([](std::size_t input_dim, std::size_t code_dim, std::size_t depth,
                       std::size_t hidden_dim, std::uint64_t seed) {
             ahc::CompressorConfig cfg{input_dim, code_dim, depth, hidden_dim};
             return PyCompressor{ahc::init_params(cfg, seed)};
           }),
           py::arg("input_dim") = 64, py::arg("code_dim") = 10, py::arg("depth") = 1,
           py::arg("hidden_dim") = 32, py::arg("seed") = 42)
      .def_property_readonly(
          "input_dim", [](const PyCompressor& c) { return c.params.input_dim(); })
      .def_property_readonly(
          "code_dim", [](const PyCompressor& c) { return c.params.code_dim(); })
      .def_property_readonly(
          "param_count", [](const PyCompressor& c) { return c.params.param_count(); })
      .def("encode",
           [](const PyCompressor& c, const ahc::Vec& f) {
             return ahc::encode(c.params, f);
           })
      .def("decode",
           [](const PyCompressor& c, const ahc::Vec& z) {
             return ahc::decode(c.params, z);
           })
      .def("recon_loss",
           [](const PyCompressor& c, const ahc::Batch& batch) {
             return ahc::recon_loss(c.params, batch);
           })
      .def(
          "adapt",
          [](const PyCompressor& c, const ahc::Batch& support, std::size_t inner_steps,
             double inner_lr) {
            ahc::MamlConfig mcfg;
            mcfg.inner_steps = inner_steps;
            mcfg.inner_lr = inner_lr;
            return PyCompressor{ahc::maml_adapt(c.params, support, mcfg)};
          },
          py::arg("support"), py::arg("inner_steps") = 5, py::arg("inner_lr") = 0.01,
          "K sgd steps on the support reconstruction loss; returns a new Compressor.")
      .def("save", [](const PyCompressor& c) { return from_bytes(ahc::save_params(c.params)); })
      .def_static("load", [](const py::bytes& b) {
        return PyCompressor{ahc::load_params(to_bytes(b))};
      });

  py::class_<ahc::FeatureRecord>(m, "FeatureRecord")
      .def(py::init<>())
      .def_readwrite("code", &ahc::FeatureRecord::code)
      .def_readwrite("class_id", &ahc::FeatureRecord::class_id)
      .def_readwrite("task_id", &ahc::FeatureRecord::task_id)
      .def_readwrite("importance", &ahc::FeatureRecord::importance)
      .def_readwrite("uncertainty", &ahc::FeatureRecord::uncertainty)
      .def_readwrite("difficulty", &ahc::FeatureRecord::difficulty)
      .def_readwrite("age", &ahc::FeatureRecord::age);

  py::class_<ahc::MemoryBank>(m, "MemoryBank")
      .def(py::init([](std::size_t code_dim, std::size_t stm_capacity,
                       std::size_t ltm_capacity, std::size_t budget_bytes) {
             ahc::BankConfig cfg;
             cfg.code_dim = code_dim;
             cfg.stm_capacity = stm_capacity;
             cfg.ltm_capacity = ltm_capacity;
             cfg.budget_bytes = budget_bytes;
             return ahc::MemoryBank(cfg);
           }),
           py::arg("code_dim") = 10, py::arg("stm_capacity") = 1000,
           py::arg("ltm_capacity") = 5000, py::arg("budget_bytes") = 102400)
      .def("stm_insert", &ahc::MemoryBank::stm_insert, py::arg("record"))
      .def("ltm_insert", &ahc::MemoryBank::ltm_insert, py::arg("record"))
      .def("consolidate", &ahc::MemoryBank::consolidate)
      .def("tick_age", &ahc::MemoryBank::tick_age)
      .def("record_bytes", &ahc::MemoryBank::record_bytes)
      .def("memory_bytes", &ahc::MemoryBank::memory_bytes)
      .def("size", &ahc::MemoryBank::size)
      .def("stm_count", [](const ahc::MemoryBank& b) { return b.stm().size(); })
      .def("ltm_count", [](const ahc::MemoryBank& b) { return b.ltm().size(); })
      .def(
          "sample_replay",
          [](const ahc::MemoryBank& b, std::size_t n, std::uint64_t seed) {
            std::mt19937_64 rng(seed);
            return b.sample_replay(n, rng);
          },
          py::arg("n"), py::arg("seed") = 42)
      .def("serialize",
           [](const ahc::MemoryBank& b) { return from_bytes(b.serialize()); })
      .def_static(
          "deserialize",
          [](const py::bytes& bytes, std::size_t stm_capacity, std::size_t ltm_capacity,
             std::size_t budget_bytes) {
            const std::vector<std::uint8_t> raw = to_bytes(bytes);
            const ahc::BankImage image = ahc::parse_bank(raw);
            ahc::BankConfig cfg;
            cfg.code_dim = image.code_dim;
            cfg.stm_capacity = stm_capacity;
            cfg.ltm_capacity = ltm_capacity;
            cfg.budget_bytes = budget_bytes;
            return ahc::MemoryBank::deserialize(raw, cfg);
          },
          py::arg("bytes"), py::arg("stm_capacity") = 1000,
          py::arg("ltm_capacity") = 5000, py::arg("budget_bytes") = 102400);

  m.def(
      "default_config_json",
      []() { return ahc::experiment_config_json(ahc::ExperimentConfig{}); },
      "Every experiment knob with its default value, as flat JSON.");

  m.def(
      "run_experiment",
      [](const std::string& config_json) {
        const ahc::ExperimentConfig cfg = ahc::parse_config_text(config_json);
        return report_to_dict(ahc::run_experiment(cfg));
      },
      py::arg("config_json"),
      "Train the full task stream described by a flat JSON config; returns the "
      "report as a dict.");

  m.def(
      "gradient_checks",
      [](std::uint64_t seed) {
        py::list out;
        for (const ahc::CheckResult& r : ahc::run_gradient_checks(seed)) {
          out.append(py::make_tuple(r.name, r.rel_error, r.tolerance, r.passed));
        }
        return out;
      },
      py::arg("seed") = 42,
      "Finite-difference oracles for every analytic gradient; returns (name, "
      "rel_error, tolerance, passed) tuples.");

#ifdef VERSION_INFO
  m.attr("__version__") = MACRO_STRINGIFY(VERSION_INFO);
#else
  m.attr("__version__") = "dev";
#endif
}

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "flgames/errors.hpp"
#include "flgames/harness.hpp"
#include "flgames/verify.hpp"

namespace py = pybind11;
using namespace flgames;

namespace {

py::dict record_dict(const RunRecord& r) {
    py::dict d;
    d["seed"] = r.seed;
    d["stopped"] = r.stopped;
    d["stop_round"] = r.stop_round;
    d["rounds_to_stop"] = r.rounds_to_stop;
    d["final_train_acc"] = r.final_train;
    d["final_test_acc"] = r.final_test;
    d["last_train_acc"] = r.last_train;
    d["last_test_acc"] = r.last_test;
    d["oscillation_frequency"] = r.oscillation.frequency;
    d["oscillation_interval"] = r.oscillation.interval;
    return d;
}

py::dict check_dict(const CheckResult& c) {
    py::dict d;
    d["name"] = c.name;
    d["passed"] = c.passed;
    d["detail"] = c.detail;
    d["value"] = c.value;
    return d;
}

template <class T>
py::array_t<T> to_array(const std::vector<T>& v) {
    return py::array_t<T>(static_cast<py::ssize_t>(v.size()), v.data());
}

}  // namespace

PYBIND11_MODULE(_flgames, m) {
    m.doc() = "Federated ensemble games on spurious-correlation benchmarks";

    py::register_exception<Error>(m, "FlgamesError", PyExc_RuntimeError);

    py::class_<ExperimentConfig>(m, "Config")
        .def_readwrite("name", &ExperimentConfig::name)
        .def_readwrite("repeat", &ExperimentConfig::repeat)
        .def_readwrite("master_seed", &ExperimentConfig::master_seed)
        .def_readwrite("n_clients", &ExperimentConfig::n_clients)
        .def_readwrite("output_dir", &ExperimentConfig::output_dir)
        .def_readwrite("oscillation_window", &ExperimentConfig::oscillation_window)
        .def_property(
            "max_rounds", [](const ExperimentConfig& c) { return c.game.max_rounds; },
            [](ExperimentConfig& c, std::size_t v) { c.game.max_rounds = v; })
        .def_property(
            "stop_threshold", [](const ExperimentConfig& c) { return c.game.stop_threshold; },
            [](ExperimentConfig& c, double v) { c.game.stop_threshold = v; })
        .def_property(
            "stop_enabled", [](const ExperimentConfig& c) { return c.game.stop_enabled; },
            [](ExperimentConfig& c, bool v) { c.game.stop_enabled = v; })
        .def_property("variant", &ExperimentConfig::variant, &apply_variant)
        .def("seeds", &ExperimentConfig::seeds)
        .def("validate", &ExperimentConfig::validate);

    m.def("parse_config", &parse_config, py::arg("text"));
    m.def("load_config", &load_config, py::arg("path"));

    m.def(
        "run_single",
        [](const ExperimentConfig& config, std::uint64_t seed) {
            RunOutput out;
            {
                py::gil_scoped_release release;
                out = run_single(config, seed);
            }
            py::dict d = record_dict(out.record);
            d["train_series"] = predictor_round_series(out.logs);
            std::vector<double> test;
            for (const auto& l : out.logs) test.push_back(l.test_acc);
            d["test_curve"] = test;
            return d;
        },
        py::arg("config"), py::arg("seed"));

    // Returns summary.json text; the Python wrapper decodes it.
    m.def(
        "run_experiment",
        [](const ExperimentConfig& config) {
            py::gil_scoped_release release;
            return summary_json(run_experiment(config));
        },
        py::arg("config"));

    m.def(
        "synth_sem",
        [](std::size_t n, double p_spurious, double delta, std::uint64_t seed, bool centered) {
            EnvSpec spec;
            spec.n_samples = n;
            spec.p_spurious = p_spurious;
            spec.delta = delta;
            spec.validate();
            SemOptions opt;
            opt.centered = centered;
            const auto data = synth_sem_generate(spec, opt, seed);
            py::array_t<double> x({data.size(), data.dim()});
            std::copy(data.inputs.values().begin(), data.inputs.values().end(), x.mutable_data());
            return py::make_tuple(x, to_array(data.labels), to_array(data.spurious));
        },
        py::arg("n"), py::arg("p_spurious"), py::arg("delta") = 0.25, py::arg("seed") = 0,
        py::arg("centered") = false);

    m.def(
        "oscillation_metrics",
        [](const std::vector<double>& series, std::size_t window) {
            const auto o = oscillation_metrics(series, window);
            return py::make_tuple(o.frequency, o.interval);
        },
        py::arg("series"), py::arg("window"));

    m.def(
        "check_gradients", [](std::uint64_t seed) { return check_dict(check_gradients(seed)); },
        py::arg("seed") = 1);
    m.def(
        "verify",
        [](std::uint64_t seed) {
            std::vector<CheckResult> checks;
            {
                py::gil_scoped_release release;
                checks = run_property_suite(seed);
            }
            py::list out;
            for (const auto& c : checks) out.append(check_dict(c));
            return out;
        },
        py::arg("seed") = 1);
}

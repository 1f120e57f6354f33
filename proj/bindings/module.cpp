// Python bindings for the core operations: model losses and derivatives,
// task generation, pools, hypergradients, and the training entry points.

#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "rwmeta/fpenv.hpp"
#include "rwmeta/harness.hpp"
#include "rwmeta/meta.hpp"
#include "rwmeta/oracle.hpp"
#include "rwmeta/reweight.hpp"

namespace py = pybind11;
using namespace rwmeta;
using diffcore::ParamVector;

namespace {

Mat mat_from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    if (a.ndim() == 1) {
        Mat m(static_cast<int>(a.shape(0)), 1);
        std::copy(a.data(), a.data() + a.size(), m.data.begin());
        return m;
    }
    if (a.ndim() != 2) throw ShapeError("expected a 1-D or 2-D array");
    Mat m(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
    std::copy(a.data(), a.data() + a.size(), m.data.begin());
    return m;
}

py::array_t<double> numpy_from_mat(const Mat& m) {
    py::array_t<double> out({m.rows, m.cols});
    std::copy(m.data.begin(), m.data.end(), out.mutable_data());
    return out;
}

py::array_t<double> numpy_from_vector(const std::vector<double>& v) {
    py::array_t<double> out(static_cast<py::ssize_t>(v.size()));
    std::copy(v.begin(), v.end(), out.mutable_data());
    return out;
}

ParamVector vector_from_numpy(
    const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    return ParamVector(a.data(), a.data() + a.size());
}

models::Model make_model(const std::vector<int>& widths, const std::string& activation,
                         std::uint64_t init_seed, double init_scale, bool use_bias,
                         const std::string& loss) {
    models::Model model;
    model.spec.layer_widths = widths;
    model.spec.activation =
        activation == "tanh" ? models::Activation::tanh : models::Activation::relu;
    model.spec.init_seed = init_seed;
    model.spec.init_scale = init_scale;
    model.spec.use_bias = use_bias;
    model.loss = loss == "cross_entropy" ? models::LossKind::cross_entropy : models::LossKind::mse;
    return model;
}

py::dict metrics_dict(const std::vector<harness::MetricRecord>& metrics) {
    std::vector<long> iters;
    std::vector<double> train, val, test, hg, wid, wood, wclean, wnoisy, wall;
    for (const auto& r : metrics) {
        iters.push_back(r.iter);
        train.push_back(r.train_meta_loss);
        val.push_back(r.val_meta_loss);
        test.push_back(r.test_metric);
        hg.push_back(r.hypergrad_norm_sq);
        wid.push_back(r.mean_weight_id);
        wood.push_back(r.mean_weight_ood);
        wclean.push_back(r.mean_weight_clean);
        wnoisy.push_back(r.mean_weight_noisy);
        wall.push_back(r.wallclock_seconds);
    }
    py::dict out;
    out["iter"] = iters;
    out["train_meta_loss"] = train;
    out["val_meta_loss"] = val;
    out["test_metric"] = test;
    out["hypergrad_norm_sq"] = hg;
    out["mean_weight_id"] = wid;
    out["mean_weight_ood"] = wood;
    out["mean_weight_clean"] = wclean;
    out["mean_weight_noisy"] = wnoisy;
    out["wallclock_seconds"] = wall;
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Reweighted meta-learning toolkit (MAML and RW-MAML at desk scale)";
    tune_runtime();

    py::register_exception<NonFiniteValue>(m, "NonFiniteValue");
    py::register_exception<ShapeError>(m, "ShapeError");
    py::register_exception<ConfigError>(m, "ConfigError");
    py::register_exception<DivergenceError>(m, "DivergenceError");
    py::register_exception<WeightLookupError>(m, "WeightLookupError");
    py::register_exception<AlignmentError>(m, "AlignmentError");
    py::register_exception<UnsupportedTask>(m, "UnsupportedTask");
    py::register_exception<UnsupportedConfig>(m, "UnsupportedConfig");

    py::class_<models::Model>(m, "Model")
        .def(py::init(&make_model), py::arg("widths"), py::arg("activation") = "relu",
             py::arg("init_seed") = 0, py::arg("init_scale") = 1.0, py::arg("use_bias") = true,
             py::arg("loss") = "mse")
        .def_property_readonly(
            "param_count", [](const models::Model& mod) { return models::param_count(mod.spec); });

    m.def(
        "init_params",
        [](const models::Model& model) { return numpy_from_vector(models::init_params(model.spec)); },
        py::arg("model"));

    m.def(
        "model_loss",
        [](const models::Model& model, const py::array_t<double>& p, const py::array_t<double>& x,
           const py::array_t<double>& y) {
            return models::model_loss(model, vector_from_numpy(p), mat_from_numpy(x),
                                      mat_from_numpy(y));
        },
        py::arg("model"), py::arg("params"), py::arg("inputs"), py::arg("targets"));

    m.def(
        "instance_losses",
        [](const models::Model& model, const py::array_t<double>& p, const py::array_t<double>& x,
           const py::array_t<double>& y) {
            return numpy_from_vector(models::instance_losses(model, vector_from_numpy(p),
                                                             mat_from_numpy(x), mat_from_numpy(y)));
        },
        py::arg("model"), py::arg("params"), py::arg("inputs"), py::arg("targets"));

    m.def(
        "model_gradient",
        [](const models::Model& model, const py::array_t<double>& p, const py::array_t<double>& x,
           const py::array_t<double>& y) {
            const Mat xm = mat_from_numpy(x), ym = mat_from_numpy(y);
            const diffcore::DiffFn f = [&](diffcore::Tape& t, diffcore::Var q) {
                return models::loss_graph(t, model, q, xm, ym);
            };
            return numpy_from_vector(diffcore::gradient(f, vector_from_numpy(p)));
        },
        py::arg("model"), py::arg("params"), py::arg("inputs"), py::arg("targets"));

    m.def(
        "model_hvp",
        [](const models::Model& model, const py::array_t<double>& p, const py::array_t<double>& v,
           const py::array_t<double>& x, const py::array_t<double>& y) {
            const Mat xm = mat_from_numpy(x), ym = mat_from_numpy(y);
            const diffcore::DiffFn f = [&](diffcore::Tape& t, diffcore::Var q) {
                return models::loss_graph(t, model, q, xm, ym);
            };
            return numpy_from_vector(
                diffcore::hvp(f, vector_from_numpy(p), vector_from_numpy(v)));
        },
        py::arg("model"), py::arg("params"), py::arg("v"), py::arg("inputs"), py::arg("targets"));

    m.def(
        "inner_adapt",
        [](const models::Model& model, const py::array_t<double>& p, const py::array_t<double>& sx,
           const py::array_t<double>& sy, double alpha, int inner_steps) {
            return numpy_from_vector(meta::inner_adapt(model, vector_from_numpy(p),
                                                       mat_from_numpy(sx), mat_from_numpy(sy),
                                                       {alpha, inner_steps}));
        },
        py::arg("model"), py::arg("params"), py::arg("support_inputs"),
        py::arg("support_targets"), py::arg("alpha") = 0.01, py::arg("inner_steps") = 1);

    py::class_<tasks::TaskData>(m, "TaskData")
        .def_property_readonly("task_id", [](const tasks::TaskData& t) { return t.task_id; })
        .def_property_readonly("is_ood", [](const tasks::TaskData& t) { return t.is_ood; })
        .def_property_readonly("num_classes",
                               [](const tasks::TaskData& t) { return t.num_classes; })
        .def_property_readonly(
            "noise_mask",
            [](const tasks::TaskData& t) { return std::vector<int>(t.noise_mask.begin(), t.noise_mask.end()); })
        .def_property_readonly(
            "support_inputs", [](const tasks::TaskData& t) { return numpy_from_mat(t.support_inputs); })
        .def_property_readonly(
            "support_targets",
            [](const tasks::TaskData& t) { return numpy_from_mat(t.support_targets); })
        .def_property_readonly(
            "query_inputs", [](const tasks::TaskData& t) { return numpy_from_mat(t.query_inputs); })
        .def_property_readonly("query_targets", [](const tasks::TaskData& t) {
            return numpy_from_mat(t.query_targets);
        });

    py::class_<tasks::TaskPool>(m, "TaskPool")
        .def_property_readonly("train", [](const tasks::TaskPool& p) { return p.train; })
        .def_property_readonly("val", [](const tasks::TaskPool& p) { return p.val; })
        .def_property_readonly("test", [](const tasks::TaskPool& p) { return p.test; })
        .def("save", [](const tasks::TaskPool& p, const std::string& path) {
            tasks::save_pool_file(p, path);
        });

    m.def("load_pool", &tasks::load_pool_file, py::arg("path"));

    m.def(
        "sample_sine_task",
        [](std::uint64_t seed, int k_support, int k_query) {
            tasks::Rng rng(seed);
            return tasks::sample_sine_task(rng, k_support, k_query);
        },
        py::arg("seed"), py::arg("k_support") = 10, py::arg("k_query") = 10);

    m.def(
        "sample_linear_ood_task",
        [](std::uint64_t seed, int k_support, int k_query) {
            tasks::Rng rng(seed);
            return tasks::sample_linear_ood_task(rng, k_support, k_query);
        },
        py::arg("seed"), py::arg("k_support") = 10, py::arg("k_query") = 10);

    m.def(
        "sample_classification_task",
        [](std::uint64_t seed, int ways, int shots, int k_query) {
            tasks::Rng rng(seed);
            return tasks::sample_classification_task(rng, ways, shots, k_query);
        },
        py::arg("seed"), py::arg("ways") = 5, py::arg("shots") = 3, py::arg("k_query") = 10);

    m.def("parse_config", [](const std::string& text) {
        harness::ExperimentConfig cfg = harness::parse_config(text);
        harness::validate(cfg);
        return harness::serialize_config(cfg);
    });

    m.def(
        "build_pool",
        [](const std::string& config_text) {
            return tasks::build_pool(harness::pool_spec(harness::parse_config(config_text)));
        },
        py::arg("config_text"));

    auto train_result = [](const ParamVector& params,
                           const std::vector<harness::MetricRecord>& metrics,
                           const std::vector<double>& hg_history, double seconds) {
        py::dict out;
        out["params"] = numpy_from_vector(params);
        out["metrics"] = metrics_dict(metrics);
        out["hypergrad_norm_sq"] = numpy_from_vector(hg_history);
        out["train_seconds"] = seconds;
        return out;
    };

    m.def(
        "train_maml",
        [train_result](const std::string& config_text) {
            harness::ExperimentConfig cfg = harness::parse_config(config_text);
            const auto pool = tasks::build_pool(harness::pool_spec(cfg));
            auto r = meta::train_maml(pool, cfg);
            return train_result(r.params, r.metrics, r.hypergrad_sq_history, r.train_seconds);
        },
        py::arg("config_text"));

    m.def(
        "train_rwmaml",
        [train_result](const std::string& config_text) {
            harness::ExperimentConfig cfg = harness::parse_config(config_text);
            cfg.run.baseline = harness::Baseline::rwmaml;
            const auto pool = tasks::build_pool(harness::pool_spec(cfg));
            auto r = reweight::train_rwmaml(pool, cfg);
            py::dict out = train_result(r.params, r.metrics, r.hypergrad_sq_history,
                                        r.train_seconds);
            out["weights"] = numpy_from_vector(r.weights.storage);
            return out;
        },
        py::arg("config_text"));

    m.def(
        "run_experiment",
        [](const std::string& config_text) {
            const auto out = harness::run_experiment(harness::parse_config(config_text));
            py::dict d;
            d["dir"] = out.dir;
            d["diverged"] = out.diverged;
            d["metrics"] = metrics_dict(out.metrics);
            d["train_seconds"] = out.train_seconds;
            return d;
        },
        py::arg("config_text"));

    m.def(
        "gradcheck",
        [](const std::string& config_text) {
            const auto report = harness::gradcheck(harness::parse_config(config_text));
            py::list checks;
            for (const auto& c : report.checks) {
                py::dict d;
                d["name"] = c.name;
                d["max_rel_err"] = c.max_rel_err;
                d["tolerance"] = c.tolerance;
                d["pass"] = c.pass;
                checks.append(d);
            }
            py::dict out;
            out["checks"] = checks;
            out["all_pass"] = report.all_pass();
            return out;
        },
        py::arg("config_text") = "");
}

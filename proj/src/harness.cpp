#include "rwmeta/harness.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "rwmeta/oracle.hpp"

namespace rwmeta::harness {

namespace fs = std::filesystem;

namespace {

std::string format_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot open for writing: " + path);
    return out;
}

}  // namespace

std::string format_metric_row(const MetricRecord& r) {
    std::string row = std::to_string(r.iter);
    for (double v : {r.train_meta_loss, r.val_meta_loss, r.test_metric, r.hypergrad_norm_sq,
                     r.mean_weight_id, r.mean_weight_ood, r.mean_weight_clean, r.mean_weight_noisy,
                     r.wallclock_seconds})
        row += "," + format_double(v);
    return row;
}

std::vector<MetricRecord> read_metrics_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open metrics file: " + path);
    std::string line;
    if (!std::getline(in, line)) throw ConfigError("metrics file is empty: " + path);
    if (line != kMetricsHeader) throw ConfigError("metrics file has unexpected header: " + path);
    std::vector<MetricRecord> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<double> cells;
        while (std::getline(ss, cell, ',')) cells.push_back(std::stod(cell));
        if (cells.size() != 10) throw ConfigError("metrics row has wrong arity: " + path);
        MetricRecord r;
        r.iter = static_cast<long>(cells[0]);
        r.train_meta_loss = cells[1];
        r.val_meta_loss = cells[2];
        r.test_metric = cells[3];
        r.hypergrad_norm_sq = cells[4];
        r.mean_weight_id = cells[5];
        r.mean_weight_ood = cells[6];
        r.mean_weight_clean = cells[7];
        r.mean_weight_noisy = cells[8];
        r.wallclock_seconds = cells[9];
        out.push_back(r);
    }
    return out;
}

void write_weight_dump(const std::string& path, const reweight::WeightMatrix& w,
                       const tasks::TaskPool& pool) {
    auto out = open_out(path);
    out << "unit_id,cluster_id,weight,is_ood,is_noisy\n";
    for (const tasks::TaskData& task : pool.train) {
        if (w.scheme == reweight::Scheme::task) {
            bool noisy = false;
            for (auto m : task.noise_mask) noisy |= m != 0;
            out << task.task_id << ',' << w.entry_of(task.task_id, 0) << ','
                << format_double(w.weight_of(task.task_id, 0)) << ',' << (task.is_ood ? 1 : 0)
                << ',' << (noisy ? 1 : 0) << '\n';
        } else {
            for (int k = 0; k < task.query_size(); ++k) {
                out << w.unit_index(task.task_id, k) << ',' << w.entry_of(task.task_id, k) << ','
                    << format_double(w.weight_of(task.task_id, k)) << ','
                    << (task.is_ood ? 1 : 0) << ',' << (task.noise_mask[k] ? 1 : 0) << '\n';
            }
        }
    }
}

void write_params(const std::string& path, const diffcore::ParamVector& p) {
    auto out = open_out(path);
    out << p.size() << '\n';
    char buf[48];
    for (double v : p) {
        std::snprintf(buf, sizeof buf, "%a", v);
        out << buf << '\n';
    }
}

diffcore::ParamVector read_params(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open params file: " + path);
    size_t n = 0;
    in >> n;
    diffcore::ParamVector p(n);
    std::string tok;
    for (size_t i = 0; i < n; ++i) {
        if (!(in >> tok)) throw ConfigError("params file truncated: " + path);
        p[i] = std::strtod(tok.c_str(), nullptr);
    }
    return p;
}

RunOutput run_experiment(const ExperimentConfig& cfg) {
    validate(cfg);
    RunOutput out;
    out.dir = cfg.run.out_dir;
    fs::create_directories(out.dir);

    {
        auto c = open_out(out.dir + "/config.txt");
        c << serialize_config(cfg);
    }

    const tasks::TaskPool pool = tasks::build_pool(pool_spec(cfg));

    auto metrics_file = open_out(out.dir + "/metrics.csv");
    metrics_file << kMetricsHeader << '\n';
    const MetricSink sink = [&](const MetricRecord& r) {
        out.metrics.push_back(r);
        metrics_file << format_metric_row(r) << '\n';
        metrics_file.flush();
    };
    const reweight::WeightDumpSink dump_sink = [&](long iter, const reweight::WeightMatrix& w) {
        const std::string name =
            iter < 0 ? "weights_final.csv" : "weights_iter_" + std::to_string(iter) + ".csv";
        write_weight_dump(out.dir + "/" + name, w, pool);
    };

    try {
        if (cfg.run.baseline == Baseline::rwmaml) {
            auto result = reweight::train_rwmaml(pool, cfg, sink, dump_sink);
            out.final_params = std::move(result.params);
            out.final_weights = std::move(result.weights);
            out.hypergrad_sq_history = std::move(result.hypergrad_sq_history);
            out.train_seconds = result.train_seconds;
        } else {
            auto result = meta::train_maml(pool, cfg, sink);
            out.final_params = std::move(result.params);
            out.train_seconds = result.train_seconds;
        }
    } catch (const DivergenceError& e) {
        out.diverged = true;
        out.diverged_at = e.iter;
        auto note = open_out(out.dir + "/diverged.txt");
        note << e.what() << '\n';
    }

    if (!out.final_params.empty()) write_params(out.dir + "/params_final.txt", out.final_params);

    // Plot-data series extracted from the metric records.
    {
        auto f = open_out(out.dir + "/plot_test_metric.csv");
        f << "iter,test_metric\n";
        for (const auto& r : out.metrics)
            f << r.iter << ',' << format_double(r.test_metric) << '\n';
    }
    {
        auto f = open_out(out.dir + "/plot_weight_groups.csv");
        f << "iter,mean_weight_id,mean_weight_ood,mean_weight_clean,mean_weight_noisy\n";
        for (const auto& r : out.metrics)
            f << r.iter << ',' << format_double(r.mean_weight_id) << ','
              << format_double(r.mean_weight_ood) << ',' << format_double(r.mean_weight_clean)
              << ',' << format_double(r.mean_weight_noisy) << '\n';
    }
    {
        auto f = open_out(out.dir + "/plot_hypergrad_norm.csv");
        f << "iter,hypergrad_norm_sq\n";
        for (size_t i = 0; i < out.hypergrad_sq_history.size(); ++i)
            f << i + 1 << ',' << format_double(out.hypergrad_sq_history[i]) << '\n';
    }
    return out;
}

namespace {

std::string format_axis_value(double v) {
    if (v == std::floor(v) && std::abs(v) < 1e15) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%" PRId64, static_cast<std::int64_t>(v));
        return buf;
    }
    return format_double(v);
}

}  // namespace

SweepResult run_sweep(const ExperimentConfig& base, const std::string& axis,
                      const std::vector<double>& values) {
    SweepResult result;
    result.axis = axis;
    fs::create_directories(base.run.out_dir);
    result.summary_path = base.run.out_dir + "/sweep_summary.csv";

    for (size_t r = 0; r < values.size(); ++r) {
        ExperimentConfig cfg = base;
        const std::string value_text = format_axis_value(values[r]);
        apply_override(cfg, axis, value_text);
        cfg.run.out_dir = base.run.out_dir + "/" + axis + "_" + value_text;
        const RunOutput run = run_experiment(cfg);
        SweepRow row;
        row.value = values[r];
        row.test_metric = run.metrics.empty() ? std::nan("") : run.metrics.back().test_metric;
        row.train_seconds = run.train_seconds;
        row.diverged = run.diverged;
        result.rows.push_back(row);
    }

    auto f = open_out(result.summary_path);
    f << axis << ",test_metric,train_wallclock_seconds,diverged\n";
    for (const auto& row : result.rows)
        f << format_axis_value(row.value) << ',' << format_double(row.test_metric) << ','
          << format_double(row.train_seconds) << ',' << (row.diverged ? 1 : 0) << '\n';
    return result;
}

bool GradcheckReport::all_pass() const {
    for (const auto& c : checks)
        if (!c.pass) return false;
    return !checks.empty();
}

std::string GradcheckReport::to_string() const {
    std::string out;
    for (const auto& c : checks) {
        out += (c.pass ? "[pass] " : "[FAIL] ") + c.name +
               ": max_rel_err=" + format_double(c.max_rel_err) +
               " tol=" + format_double(c.tolerance) + "\n";
    }
    out += all_pass() ? "gradcheck: all checks passed\n" : "gradcheck: FAILURES present\n";
    return out;
}

GradcheckReport gradcheck(const ExperimentConfig& cfg, GradcheckMutation mutation) {
    GradcheckReport report;
    auto push = [&](const std::string& name, double err, double tol) {
        report.checks.push_back({name, err, tol, err <= tol});
    };
    auto rel = [](const std::vector<double>& a, const std::vector<double>& b) {
        double worst = 0.0;
        for (size_t i = 0; i < a.size(); ++i) {
            const double scale = std::max({std::abs(a[i]), std::abs(b[i]), 1e-10});
            worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
        }
        return worst;
    };

    // Instances are sized for the finite-difference oracles regardless of the
    // experiment scale in cfg; seeds and step sizes follow the config.
    models::Model model;
    model.spec.layer_widths = {1, 5, 1};
    model.spec.init_seed = cfg.seed + 101;
    std::mt19937_64 rng(cfg.seed + 7);
    std::normal_distribution<double> normal(0.0, 0.8);
    const size_t dim = static_cast<size_t>(models::param_count(model.spec));
    diffcore::ParamVector p(dim);
    for (double& x : p) x = normal(rng);

    tasks::Rng trng(cfg.seed + 11);
    Mat gx(4, 1), gy(4, 1);
    {
        std::uniform_real_distribution<double> u(-2.0, 2.0);
        for (int i = 0; i < 4; ++i) {
            gx.at(i, 0) = u(trng);
            gy.at(i, 0) = u(trng);
        }
    }
    const diffcore::DiffFn f = [&](diffcore::Tape& t, diffcore::Var q) {
        return models::loss_graph(t, model, q, gx, gy);
    };

    {
        auto grad = diffcore::gradient(f, p);
        auto fd = oracle::fd_gradient(
            [&](const diffcore::ParamVector& q) { return diffcore::evaluate(f, q).value; }, p,
            {1e-5});
        push("gradient_vs_fd", rel(grad, fd), 1e-5);
    }
    {
        diffcore::ParamVector v(dim);
        for (double& x : v) x = normal(rng);
        auto h = diffcore::hvp(f, p, v);
        const double eps = 1e-5;
        diffcore::ParamVector pp = p, pm = p;
        for (size_t i = 0; i < dim; ++i) {
            pp[i] += eps * v[i];
            pm[i] -= eps * v[i];
        }
        auto gp = diffcore::gradient(f, pp);
        auto gm = diffcore::gradient(f, pm);
        std::vector<double> fd(dim);
        for (size_t i = 0; i < dim; ++i) fd[i] = (gp[i] - gm[i]) / (2 * eps);
        push("hvp_vs_fd_of_gradient", rel(h, fd), 1e-4);
    }

    // Hypergradient oracle comparison on a m=2, n=2, K=3 instance.
    std::vector<tasks::TaskData> batch, val;
    for (int i = 0; i < 2; ++i) {
        batch.push_back(tasks::sample_sine_task(trng, 3, 3));
        batch.back().task_id = i;
        val.push_back(tasks::sample_sine_task(trng, 3, 3));
        val.back().task_id = i;
    }
    auto w = reweight::make_weight_matrix(reweight::Scheme::instance, 2, 3, 0.4);
    const meta::AdaptConfig adapt{cfg.adapt.alpha > 0 ? cfg.adapt.alpha : 0.05, 1};
    const meta::MetaConfig mc{cfg.meta.eta > 0 ? cfg.meta.eta : 0.05, 2, 2};
    {
        auto hg = reweight::hypergrad_exact(model, p, batch, val, w, adapt, mc);
        oracle::HyperFdProblem prob;
        prob.model = model;
        prob.alpha = adapt.alpha;
        prob.inner_steps = 1;
        prob.eta = mc.eta;
        prob.train_batch = &batch;
        prob.val_batch = &val;
        prob.num_entries = w.storage.size();
        prob.weight_of = [&](const std::vector<double>& storage, size_t i, int k) {
            return storage[static_cast<size_t>(w.entry_of(batch[i].task_id, k))];
        };
        auto fd = oracle::fd_hypergradient(prob, p, w.storage, {1e-4});
        push("hypergrad_exact_vs_fd", rel(hg.values, fd), 1e-3);
    }
    {
        const meta::AdaptConfig zero{0.0, 1};
        auto exact = reweight::hypergrad_exact(model, p, batch, val, w, zero, mc);
        auto approx = reweight::hypergrad_approx(model, p, batch, val, w, zero, mc);
        if (mutation == GradcheckMutation::flip_approx_sign)
            for (double& v : approx.values) v = -v;
        double worst = 0.0;
        for (size_t i = 0; i < exact.values.size(); ++i)
            worst = std::max(worst, std::abs(exact.values[i] - approx.values[i]));
        push("alpha_zero_exact_equals_approx", worst, 0.0);
    }
    {
        auto w_task = reweight::make_weight_matrix(reweight::Scheme::task, 2, 3, 0.4);
        auto hg_task = reweight::hypergrad_exact(model, p, batch, val, w_task, adapt, mc);
        auto hg_inst = reweight::hypergrad_exact(model, p, batch, val, w, adapt, mc);
        std::vector<double> summed(2, 0.0), task_vals = hg_task.values;
        for (int task = 0; task < 2; ++task)
            for (int k = 0; k < 3; ++k)
                summed[static_cast<size_t>(task)] +=
                    hg_inst.values[static_cast<size_t>(w.entry_of(task, k))];
        double worst = 0.0;
        for (int task = 0; task < 2; ++task)
            worst = std::max(worst, std::abs(summed[static_cast<size_t>(task)] -
                                             task_vals[static_cast<size_t>(task)]));
        push("task_scheme_matches_instance_sum", worst, 1e-10);
    }
    return report;
}

}  // namespace rwmeta::harness

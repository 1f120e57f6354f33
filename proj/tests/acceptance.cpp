// Acceptance suite: one pass/fail line per criterion. Heavy workloads run
// once up front and are shared by the criteria that read them.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "rwmeta/fpenv.hpp"
#include "rwmeta/harness.hpp"
#include "rwmeta/meta.hpp"
#include "rwmeta/oracle.hpp"
#include "rwmeta/reweight.hpp"

using namespace rwmeta;
using diffcore::ParamVector;
using harness::ExperimentConfig;
using harness::RunOutput;
using models::Model;
using tasks::TaskData;

namespace {

int g_failures = 0;

void report(int criterion, bool pass, const std::string& detail) {
    std::printf("[%s] criterion %2d: %s\n", pass ? "PASS" : "FAIL", criterion, detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

double mean(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// ---- shared recipes ------------------------------------------------------

ExperimentConfig sine_recipe(std::uint64_t seed, double ood_ratio, const std::string& dir) {
    ExperimentConfig cfg;
    cfg.seed = seed;
    cfg.pool.task_kind = harness::TaskKind::sine_ood;
    cfg.pool.ood_ratio = ood_ratio;
    cfg.meta.eta = 0.004;
    cfg.reweight.gamma = 0.01;
    cfg.reweight.scheme = reweight::Scheme::task;
    cfg.reweight.hypergrad = harness::HypergradMode::approx;
    cfg.reweight.clusters = 200;
    cfg.reweight.weight_init = harness::WeightInit::maml_uniform;
    cfg.run.iterations = 18000;
    cfg.run.eval_every = 6000;
    cfg.run.dump_every = 6000;
    cfg.run.out_dir = dir;
    return cfg;
}

ExperimentConfig noise_recipe(std::uint64_t seed, const std::string& dir) {
    ExperimentConfig cfg;
    cfg.seed = seed;
    cfg.pool.task_kind = harness::TaskKind::classify_noise;
    cfg.pool.noise_ratio = 0.5;
    cfg.pool.class_sigma = 1.0;
    cfg.model.widths = {2, 32, 32, 5};
    cfg.adapt.alpha = 0.3;
    cfg.meta.eta = 0.04;
    cfg.reweight.gamma = 1.0;
    cfg.reweight.scheme = reweight::Scheme::instance;
    cfg.reweight.hypergrad = harness::HypergradMode::exact;
    cfg.reweight.clusters = 200;  // instance weights shared over 200 clusters, init 0.005
    cfg.run.iterations = 16000;
    cfg.run.eval_every = 8000;
    cfg.run.dump_every = 8000;
    cfg.run.out_dir = dir;
    return cfg;
}

struct DumpStats {
    double min_weight = std::numeric_limits<double>::max();
    long dumps = 0;
};

void scan_dumps(const std::string& dir, DumpStats& stats) {
    namespace fs = std::filesystem;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("weights_", 0) != 0) continue;
        std::ifstream in(entry.path());
        std::string line;
        std::getline(in, line);  // header
        while (std::getline(in, line)) {
            const auto c2 = line.find(',', line.find(',') + 1);
            const auto c3 = line.find(',', c2 + 1);
            stats.min_weight =
                std::min(stats.min_weight, std::stod(line.substr(c2 + 1, c3 - c2 - 1)));
        }
        ++stats.dumps;
    }
}

}  // namespace

int main() {
    tune_runtime();
    const std::string root = "acceptance_runs";
    std::filesystem::create_directories(root);

    // ---- heavy workloads -------------------------------------------------

    std::vector<double> c4_maml, c4_rw, c4_sky, c4_wratio, c4_maml_wall, c4_rw_wall;
    DumpStats dumps;
    std::printf("running criterion 4/5/10 workloads (3 seeds x {maml, rwmaml, skyline})...\n");
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        ExperimentConfig cfg =
            sine_recipe(seed, 0.6, root + "/c4_maml_" + std::to_string(seed));
        cfg.run.baseline = harness::Baseline::maml;
        RunOutput m = harness::run_experiment(cfg);
        c4_maml.push_back(m.metrics.back().test_metric);
        c4_maml_wall.push_back(m.train_seconds);

        cfg = sine_recipe(seed, 0.6, root + "/c4_rw_" + std::to_string(seed));
        cfg.run.baseline = harness::Baseline::rwmaml;
        RunOutput r = harness::run_experiment(cfg);
        c4_rw.push_back(r.metrics.back().test_metric);
        c4_rw_wall.push_back(r.train_seconds);
        c4_wratio.push_back(r.metrics.back().mean_weight_id /
                            std::max(1e-300, r.metrics.back().mean_weight_ood));
        scan_dumps(r.dir, dumps);

        cfg = sine_recipe(seed, 0.6, root + "/c4_sky_" + std::to_string(seed));
        cfg.run.baseline = harness::Baseline::skyline;
        RunOutput s = harness::run_experiment(cfg);
        c4_sky.push_back(s.metrics.back().test_metric);
        std::printf("  seed %llu: maml %.3f  rwmaml %.3f  skyline %.3f\n",
                    static_cast<unsigned long long>(seed), c4_maml.back(), c4_rw.back(),
                    c4_sky.back());
    }

    std::printf("running criterion 6 workloads (MAML over OOD ratios)...\n");
    std::vector<double> trend;  // mean MSE per ratio {0, 0.3, 0.6, 0.9}
    for (double ratio : {0.0, 0.3, 0.9}) {
        std::vector<double> per_seed;
        for (std::uint64_t seed = 0; seed < 3; ++seed) {
            ExperimentConfig cfg = sine_recipe(
                seed, ratio,
                root + "/c6_" + std::to_string(static_cast<int>(ratio * 10)) + "_" +
                    std::to_string(seed));
            cfg.run.baseline = harness::Baseline::maml;
            per_seed.push_back(harness::run_experiment(cfg).metrics.back().test_metric);
        }
        trend.push_back(mean(per_seed));
    }
    trend.insert(trend.begin() + 2, mean(c4_maml));  // 0.6 column reused

    std::printf("running criterion 7 workloads (3 seeds x {maml, rwmaml})...\n");
    std::vector<double> c7_maml, c7_rw, c7_clean, c7_noisy;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        ExperimentConfig cfg = noise_recipe(seed, root + "/c7_maml_" + std::to_string(seed));
        cfg.run.baseline = harness::Baseline::maml;
        c7_maml.push_back(harness::run_experiment(cfg).metrics.back().test_metric);

        cfg = noise_recipe(seed, root + "/c7_rw_" + std::to_string(seed));
        cfg.run.baseline = harness::Baseline::rwmaml;
        RunOutput r = harness::run_experiment(cfg);
        c7_rw.push_back(r.metrics.back().test_metric);
        c7_clean.push_back(r.metrics.back().mean_weight_clean);
        c7_noisy.push_back(r.metrics.back().mean_weight_noisy);
        scan_dumps(r.dir, dumps);
        std::printf("  seed %llu: maml %.3f  rwmaml %.3f  (clean %.4f / noisy %.4f)\n",
                    static_cast<unsigned long long>(seed), c7_maml.back(), c7_rw.back(),
                    c7_clean.back(), c7_noisy.back());
    }

    std::printf("running criterion 9 workload (convex toy, Theorem-1 schedules)...\n");
    std::vector<double> toy_history;
    {
        ExperimentConfig cfg;
        cfg.seed = 0;
        cfg.pool.M = 200;
        cfg.pool.N = 20;
        cfg.pool.M_test = 20;
        cfg.model.widths = {1, 1};  // affine model: quadratic loss, convex in theta
        cfg.reweight.scheme = reweight::Scheme::task;
        cfg.reweight.schedule = harness::StepSchedule::theorem1;
        cfg.reweight.t1_k = 20.0;
        cfg.reweight.t1_C = 10.0;
        cfg.reweight.t1_sigma = 1.0;
        cfg.reweight.t1_L = 1.0;
        cfg.run.iterations = 2000;
        cfg.run.eval_every = 2000;
        cfg.run.baseline = harness::Baseline::rwmaml;
        cfg.run.out_dir = root + "/c9";
        RunOutput r = harness::run_experiment(cfg);
        toy_history = r.hypergrad_sq_history;
        scan_dumps(r.dir, dumps);
    }

    std::printf("running criterion 11 workload (cluster-count sweep)...\n");
    ExperimentConfig sweep_base = sine_recipe(0, 0.6, root + "/c11");
    sweep_base.run.baseline = harness::Baseline::rwmaml;
    sweep_base.run.dump_every = 0;
    const auto sweep =
        harness::run_sweep(sweep_base, "reweight.clusters", {10.0, 50.0, 200.0, 1000.0});
    for (const auto& row : sweep.rows) {
        std::printf("  clusters %g: mse %.3f\n", row.value, row.test_metric);
        DumpStats ds;
        scan_dumps(sweep_base.run.out_dir + "/reweight.clusters_" +
                       std::to_string(static_cast<long>(row.value)),
                   ds);
        dumps.min_weight = std::min(dumps.min_weight, ds.min_weight);
        dumps.dumps += ds.dumps;
    }

    std::printf("\n");

    // ---- criterion 1: hypergradient exactness ----------------------------
    {
        double worst = 0.0;
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            Model model;
            const bool classify = seed % 4 == 3;
            model.spec.layer_widths = classify ? std::vector<int>{2, 4, 3}   // 35 params
                                               : std::vector<int>{1, 4, 1};  // 13 params
            model.spec.init_seed = 900 + seed;
            model.loss = classify ? models::LossKind::cross_entropy : models::LossKind::mse;
            std::mt19937_64 prng(500 + seed);
            std::normal_distribution<double> normal(0.0, 0.7);
            ParamVector p(static_cast<size_t>(models::param_count(model.spec)));
            for (double& x : p) x = normal(prng);

            tasks::Rng trng(700 + seed);
            std::vector<TaskData> batch, val;
            for (int i = 0; i < 2; ++i) {
                if (classify) {
                    batch.push_back(tasks::sample_classification_task(trng, 3, 2, 3));
                    val.push_back(tasks::sample_classification_task(trng, 3, 2, 3));
                } else {
                    batch.push_back(tasks::sample_sine_task(trng, 3, 3));
                    val.push_back(tasks::sample_sine_task(trng, 3, 3));
                }
                batch.back().task_id = i;
                val.back().task_id = i;
            }
            auto w = reweight::make_weight_matrix(reweight::Scheme::instance, 2, 3, 0.4);
            const meta::AdaptConfig adapt{0.05, 1};
            const meta::MetaConfig mc{0.1, 2, 2};
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
            for (size_t e = 0; e < fd.size(); ++e) {
                const double scale =
                    std::max({std::abs(hg.values[e]), std::abs(fd[e]), 1e-10});
                worst = std::max(worst, std::abs(hg.values[e] - fd[e]) / scale);
            }
        }
        report(1, worst <= 1e-3,
               "hypergradient exactness: max relative error " + fmt(worst) +
                   " <= 1e-3 over 20 seeded instances");
    }

    // ---- criterion 2: approximation consistency ---------------------------
    {
        Model model;
        model.spec.layer_widths = {1, 5, 1};
        model.spec.init_seed = 42;
        tasks::Rng trng(43);
        std::vector<TaskData> batch, val;
        for (int i = 0; i < 3; ++i) {
            batch.push_back(tasks::sample_sine_task(trng, 4, 4));
            batch.back().task_id = i;
        }
        for (int i = 0; i < 2; ++i) {
            val.push_back(tasks::sample_sine_task(trng, 4, 4));
            val.back().task_id = i;
        }
        auto w = reweight::make_weight_matrix(reweight::Scheme::instance, 3, 4, 0.3);
        auto p = models::init_params(model.spec);
        const meta::MetaConfig mc{0.05, 3, 2};

        auto exact0 = reweight::hypergrad_exact(model, p, batch, val, w, {0.0, 1}, mc);
        auto approx0 = reweight::hypergrad_approx(model, p, batch, val, w, {0.0, 1}, mc);
        const bool bitwise = exact0.values == approx0.values;

        bool monotone = true;
        double prev = -1.0;
        std::string gaps;
        for (double alpha : {1e-1, 1e-2, 1e-3}) {
            auto ex = reweight::hypergrad_exact(model, p, batch, val, w, {alpha, 1}, mc);
            auto ap = reweight::hypergrad_approx(model, p, batch, val, w, {alpha, 1}, mc);
            double diff = 0, norm = 0;
            for (size_t e = 0; e < ex.values.size(); ++e) {
                diff += (ex.values[e] - ap.values[e]) * (ex.values[e] - ap.values[e]);
                norm += ex.values[e] * ex.values[e];
            }
            const double gap = std::sqrt(diff / norm);
            if (prev >= 0 && gap >= prev) monotone = false;
            prev = gap;
            gaps += fmt(gap) + " ";
        }
        report(2, bitwise && monotone,
               std::string("approximation consistency: alpha=0 bitwise ") +
                   (bitwise ? "equal" : "UNEQUAL") + "; gap over alpha {1e-1,1e-2,1e-3}: " +
                   gaps + (monotone ? "(monotone)" : "(NOT monotone)"));
    }

    // ---- criterion 3: MAML reduction --------------------------------------
    {
        ExperimentConfig cfg;
        cfg.seed = 5;
        cfg.pool.M = 60;
        cfg.pool.N = 6;
        cfg.pool.M_test = 6;
        cfg.model.widths = {1, 8, 1};
        cfg.meta.eta = 0.01;
        cfg.meta.batch_m = 5;
        cfg.meta.batch_n = 3;
        cfg.run.iterations = 100;
        cfg.run.eval_every = 20;
        auto pool = tasks::build_pool(harness::pool_spec(cfg));
        cfg.run.baseline = harness::Baseline::maml;
        auto m = meta::train_maml(pool, cfg);
        cfg.run.baseline = harness::Baseline::rwmaml;
        cfg.reweight.gamma = 0.0;
        cfg.reweight.weight_init = harness::WeightInit::maml_uniform;
        auto r = reweight::train_rwmaml(pool, cfg);
        bool same_metrics = m.metrics.size() == r.metrics.size();
        if (same_metrics)
            for (size_t i = 0; i < m.metrics.size(); ++i)
                same_metrics &= m.metrics[i].train_meta_loss == r.metrics[i].train_meta_loss &&
                                m.metrics[i].val_meta_loss == r.metrics[i].val_meta_loss &&
                                m.metrics[i].test_metric == r.metrics[i].test_metric;
        const bool pass = m.params == r.params && same_metrics;
        report(3, pass,
               std::string("MAML reduction: gamma=0 trajectory over 100 iterations is ") +
                   (pass ? "bit-identical" : "NOT bit-identical"));
    }

    // ---- criterion 4: OOD robustness ---------------------------------------
    {
        const double m_avg = mean(c4_maml), r_avg = mean(c4_rw), s_avg = mean(c4_sky);
        const bool pass = r_avg <= 0.8 * m_avg && r_avg >= s_avg;
        report(4, pass,
               "OOD robustness (60% OOD, 3 seeds): rwmaml " + fmt(r_avg) + " vs 0.8*maml " +
                   fmt(0.8 * m_avg) + ", skyline " + fmt(s_avg));
    }

    // ---- criterion 5: weight separation ------------------------------------
    {
        const double avg = mean(c4_wratio);
        bool each = true;
        for (double v : c4_wratio) each &= v >= 2.0;
        report(5, avg >= 2.0 && each,
               "weight separation: ID/OOD mean-weight ratios " + fmt(c4_wratio[0]) + ", " +
                   fmt(c4_wratio[1]) + ", " + fmt(c4_wratio[2]) + " (all >= 2)");
    }

    // ---- criterion 6: degradation trend ------------------------------------
    {
        bool ok = true;
        std::string series;
        for (size_t i = 0; i < trend.size(); ++i) {
            series += fmt(trend[i]) + (i + 1 < trend.size() ? " -> " : "");
            if (i > 0 && trend[i] < 0.95 * trend[i - 1]) ok = false;
        }
        report(6, ok, "MAML degradation over OOD ratio {0,0.3,0.6,0.9}: " + series);
    }

    // ---- criterion 7: noisy-label instance weighting ------------------------
    {
        bool weights_ok = true;
        for (size_t i = 0; i < c7_clean.size(); ++i) weights_ok &= c7_clean[i] > c7_noisy[i];
        const double m_avg = mean(c7_maml), r_avg = mean(c7_rw);
        const bool pass = weights_ok && r_avg >= m_avg;
        report(7, pass,
               "noisy labels: clean/noisy weights " + fmt(mean(c7_clean)) + "/" +
                   fmt(mean(c7_noisy)) + "; accuracy rwmaml " + fmt(r_avg) + " vs maml " +
                   fmt(m_avg));
    }

    // ---- criterion 8: rectification invariant ------------------------------
    {
        report(8, dumps.dumps > 0 && dumps.min_weight >= 0.0,
               "rectification: min weight " + fmt(dumps.min_weight) + " over " +
                   std::to_string(dumps.dumps) + " dumps");
    }

    // ---- criterion 9: Theorem 1 diagnostic ----------------------------------
    {
        const double first = toy_history.front();
        const double run_min = *std::min_element(toy_history.begin(), toy_history.end());
        report(9, run_min <= 0.5 * first,
               "convergence diagnostic: running min " + fmt(run_min) + " vs 0.5 x first " +
                   fmt(0.5 * first));
    }

    // ---- criterion 10: runtime overhead -------------------------------------
    {
        const double ratio = mean(c4_rw_wall) / mean(c4_maml_wall);
        report(10, ratio <= 2.5,
               "runtime overhead: rwmaml/maml wallclock " + fmt(ratio) + " <= 2.5");
    }

    // ---- criterion 11: cluster-count unimodality -----------------------------
    {
        size_t best = 0;
        for (size_t i = 1; i < sweep.rows.size(); ++i)
            if (sweep.rows[i].test_metric < sweep.rows[best].test_metric) best = i;
        const bool interior = best != 0 && best + 1 != sweep.rows.size();
        std::string series;
        for (const auto& row : sweep.rows)
            series += std::to_string(static_cast<long>(row.value)) + ":" + fmt(row.test_metric) + " ";
        report(11, interior, "cluster sweep: " + series + "(best at " +
                                 std::to_string(static_cast<long>(sweep.rows[best].value)) + ")");
    }

    std::printf("\nacceptance: %d of 11 criteria passed\n", 11 - g_failures);
    return g_failures == 0 ? 0 : 1;
}

#include "rwmeta/meta.hpp"

#include <chrono>
#include <numeric>

#include "rwmeta/config.hpp"
#include "rwmeta/fpenv.hpp"

namespace rwmeta::meta {

using diffcore::ParamVector;
using diffcore::Tape;
using diffcore::Var;
using models::Model;
using tasks::TaskData;
using tasks::TaskPool;

diffcore::Var adapt_graph(Tape& tape, const Model& model, Var theta, const Mat& support_inputs,
                          const Mat& support_targets, const AdaptConfig& adapt) {
    if (support_inputs.rows < 1) throw ShapeError("inner_adapt: empty support set");
    Var cur = theta;
    if (adapt.alpha == 0.0) return cur;  // zero step: parameters pass through untouched
    for (int step = 0; step < adapt.inner_steps; ++step) {
        Var loss = models::loss_graph(tape, model, cur, support_inputs, support_targets);
        const Var wrt[] = {cur};
        auto adj = tape.backward(loss, wrt);
        if (!adj[0].valid()) return cur;
        cur = tape.add(cur, tape.scale(adj[0], -adapt.alpha));
    }
    return cur;
}

ParamVector inner_adapt(const Model& model, const ParamVector& p, const Mat& support_inputs,
                        const Mat& support_targets, const AdaptConfig& adapt) {
    Tape tape;
    Var theta = tape.leaf(Mat(static_cast<int>(p.size()), 1, p));
    Var adapted = adapt_graph(tape, model, theta, support_inputs, support_targets, adapt);
    const MatBuffer& out = tape.value(adapted).data;
    return diffcore::ParamVector(out.begin(), out.end());
}

std::vector<double> task_query_losses(const Model& model, const ParamVector& p,
                                      const TaskData& task, const AdaptConfig& adapt) {
    Tape tape;
    Var theta = tape.leaf(Mat(static_cast<int>(p.size()), 1, p));
    Var adapted = adapt_graph(tape, model, theta, task.support_inputs, task.support_targets, adapt);
    Var losses =
        models::instance_loss_graph(tape, model, adapted, task.query_inputs, task.query_targets);
    const MatBuffer& out = tape.value(losses).data;
    return std::vector<double>(out.begin(), out.end());
}

TaskTape record_task(const Model& model, const ParamVector& theta, const TaskData& task,
                     const AdaptConfig& adapt, const std::vector<double>& effective_weights) {
    if (effective_weights.size() != static_cast<size_t>(task.query_size()))
        throw WeightLookupError("record_task: weight count differs from query size");
    TaskTape tt;
    tt.theta = tt.tape.leaf(Mat(static_cast<int>(theta.size()), 1, theta));
    tt.weights = tt.tape.leaf(Mat::column(effective_weights));
    Var adapted =
        adapt_graph(tt.tape, model, tt.theta, task.support_inputs, task.support_targets, adapt);
    tt.inst_losses =
        models::instance_loss_graph(tt.tape, model, adapted, task.query_inputs, task.query_targets);
    tt.wloss = tt.tape.dot(tt.weights, tt.inst_losses);
    const Var wrt[] = {tt.theta};
    auto adj = tt.tape.backward(tt.wloss, wrt);
    tt.theta_adj = adj[0];
    return tt;
}

namespace {

std::vector<double> effective_weights_for(const reweight::WeightMatrix& w, const TaskData& task) {
    std::vector<double> out(static_cast<size_t>(task.query_size()));
    for (int k = 0; k < task.query_size(); ++k) out[k] = w.weight_of(task.task_id, k);
    return out;
}

}  // namespace

double weighted_meta_loss(const Model& model, const ParamVector& p,
                          std::span<const TaskData> batch, const reweight::WeightMatrix& w,
                          const AdaptConfig& adapt) {
    double acc = 0.0;
    for (const TaskData& task : batch) {
        TaskTape tt = record_task(model, p, task, adapt, effective_weights_for(w, task));
        acc += tt.tape.value(tt.wloss).data[0];
    }
    return acc / static_cast<double>(batch.size());
}

ParamVector meta_update(const Model& model, const ParamVector& p, std::span<const TaskData> batch,
                        const reweight::WeightMatrix& w, const AdaptConfig& adapt,
                        const MetaConfig& meta) {
    ParamVector next = p;
    const double step = meta.eta / static_cast<double>(batch.size());
    for (const TaskData& task : batch) {
        TaskTape tt = record_task(model, p, task, adapt, effective_weights_for(w, task));
        ParamVector g = tt.tape.adjoint_values(tt.theta_adj, static_cast<int>(p.size()));
        for (size_t i = 0; i < next.size(); ++i) next[i] -= step * g[i];
    }
    return next;
}

tasks::Rng make_stream(std::uint64_t seed, std::uint32_t stream_id) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xFFFFFFFFu),
                      static_cast<std::uint32_t>(seed >> 32), stream_id};
    return tasks::Rng(seq);
}

std::vector<int> sample_batch(tasks::Rng& rng, int pool_size, int m) {
    if (m > pool_size) throw ConfigError("batch size exceeds pool size");
    std::vector<int> idx(static_cast<size_t>(pool_size));
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = 0; i < m; ++i) {
        std::uniform_int_distribution<int> pick(i, pool_size - 1);
        std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(static_cast<size_t>(m));
    return idx;
}

double pool_meta_loss(const Model& model, const ParamVector& p, std::span<const TaskData> pool,
                      const AdaptConfig& adapt) {
    double acc = 0.0;
    for (const TaskData& task : pool) {
        ParamVector phi = inner_adapt(model, p, task.support_inputs, task.support_targets, adapt);
        acc += models::model_loss(model, phi, task.query_inputs, task.query_targets);
    }
    return pool.empty() ? 0.0 : acc / static_cast<double>(pool.size());
}

double pool_test_metric(const Model& model, const ParamVector& p, std::span<const TaskData> pool,
                        const AdaptConfig& adapt) {
    if (model.loss == models::LossKind::mse) return pool_meta_loss(model, p, pool, adapt);
    double acc = 0.0;
    for (const TaskData& task : pool) {
        ParamVector phi = inner_adapt(model, p, task.support_inputs, task.support_targets, adapt);
        acc += models::accuracy(model.spec, phi, task.query_inputs, task.query_targets);
    }
    return pool.empty() ? 0.0 : acc / static_cast<double>(pool.size());
}

tasks::TaskPool skyline_filter(const TaskPool& pool) {
    TaskPool out;
    out.seed = pool.seed;
    out.val = pool.val;
    out.test = pool.test;
    for (const TaskData& task : pool.train) {
        if (task.is_ood) continue;
        bool noisy = false;
        for (auto m : task.noise_mask) noisy |= m != 0;
        if (!noisy) {
            out.train.push_back(task);
            continue;
        }
        TaskData kept = task;
        int rows = 0;
        for (auto m : task.noise_mask) rows += m ? 0 : 1;
        kept.query_inputs = Mat(rows, task.query_inputs.cols);
        kept.query_targets = Mat(rows, task.query_targets.cols);
        kept.noise_mask.assign(static_cast<size_t>(rows), 0);
        int r = 0;
        for (int i = 0; i < task.query_size(); ++i) {
            if (task.noise_mask[i]) continue;
            for (int c = 0; c < task.query_inputs.cols; ++c)
                kept.query_inputs.at(r, c) = task.query_inputs.at(i, c);
            for (int c = 0; c < task.query_targets.cols; ++c)
                kept.query_targets.at(r, c) = task.query_targets.at(i, c);
            ++r;
        }
        out.train.push_back(std::move(kept));
    }
    return out;
}

TrainResult train_maml(const TaskPool& pool, const harness::ExperimentConfig& cfg,
                       const harness::MetricSink& sink) {
    tune_runtime();
    harness::validate(cfg);
    const Model model = harness::resolve_model(cfg);
    const TaskPool filtered =
        cfg.run.baseline == harness::Baseline::skyline ? skyline_filter(pool) : TaskPool{};
    const auto& train_pool =
        cfg.run.baseline == harness::Baseline::skyline ? filtered.train : pool.train;
    if (train_pool.empty()) throw ConfigError("train_maml: empty training pool");

    TrainResult result;
    result.params = models::init_params(model.spec);
    const int m = std::min<int>(cfg.meta.batch_m, static_cast<int>(train_pool.size()));
    const double eta = harness::effective_eta(cfg);

    tasks::Rng train_rng = make_stream(cfg.seed, 1);

    using Clock = std::chrono::steady_clock;
    const size_t dim = result.params.size();
    ParamVector grad_sum(dim);

    for (long t = 0; t < cfg.run.iterations; ++t) {
        const auto tick = Clock::now();
        const auto batch = sample_batch(train_rng, static_cast<int>(train_pool.size()), m);
        std::fill(grad_sum.begin(), grad_sum.end(), 0.0);
        double batch_loss = 0.0;
        try {
            for (int idx : batch) {
                const TaskData& task = train_pool[static_cast<size_t>(idx)];
                // Uniform effective instance weights 1/K reproduce the
                // mean-over-instances objective.
                const std::vector<double> uniform(static_cast<size_t>(task.query_size()),
                                                  1.0 / static_cast<double>(task.query_size()));
                TaskTape tt = record_task(model, result.params, task, cfg.adapt, uniform);
                batch_loss += tt.tape.value(tt.wloss).data[0];
                if (tt.theta_adj.valid()) {
                    const Mat& g = tt.tape.value(tt.theta_adj);
                    for (size_t i = 0; i < dim; ++i) grad_sum[i] += g.data[i];
                }
            }
        } catch (const NonFiniteValue& e) {
            throw DivergenceError("train_maml: " + std::string(e.what()) + " at iteration " +
                                      std::to_string(t),
                                  t);
        }
        batch_loss /= static_cast<double>(m);
        if (batch_loss > kDivergenceLimit)
            throw DivergenceError("train_maml: meta loss exceeded divergence guard at iteration " +
                                      std::to_string(t),
                                  t);
        const double step = eta / static_cast<double>(m);
        for (size_t i = 0; i < dim; ++i) result.params[i] -= step * grad_sum[i];
        result.train_seconds += std::chrono::duration<double>(Clock::now() - tick).count();

        if ((t + 1) % cfg.run.eval_every == 0 || t + 1 == cfg.run.iterations) {
            harness::MetricRecord rec;
            rec.iter = t + 1;
            rec.train_meta_loss = batch_loss;
            rec.val_meta_loss = pool_meta_loss(model, result.params, pool.val, cfg.adapt);
            rec.test_metric = pool_test_metric(model, result.params, pool.test, cfg.adapt);
            rec.wallclock_seconds = result.train_seconds;
            result.metrics.push_back(rec);
            if (sink) sink(rec);
        }
    }
    return result;
}

}  // namespace rwmeta::meta

#include "rwmeta/reweight.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>

#include "rwmeta/config.hpp"
#include "rwmeta/fpenv.hpp"

namespace rwmeta::reweight {

using diffcore::DiffFn;
using diffcore::ParamVector;
using diffcore::Tape;
using diffcore::Var;
using models::Model;
using tasks::TaskData;
using tasks::TaskPool;

// Below this, a shared task weight is treated as zero and the unweighted
// gradient is recomputed instead of divided out.
constexpr double kSharedWeightFloor = 1e-8;

WeightMatrix make_weight_matrix(Scheme scheme, int num_tasks, int k_query, double init_value,
                                const std::optional<ClusterAssignment>& clusters) {
    if (num_tasks < 1 || k_query < 1)
        throw ConfigError("weight matrix: pool and query sizes must be positive");
    WeightMatrix w;
    w.scheme = scheme;
    w.num_tasks = num_tasks;
    w.k_query = k_query;
    const int units = w.units();
    if (clusters) {
        if (static_cast<int>(clusters->labels.size()) != units)
            throw AlignmentError("weight matrix: cluster assignment covers " +
                                 std::to_string(clusters->labels.size()) + " units, expected " +
                                 std::to_string(units));
        w.unit_to_entry = clusters->labels;
        w.storage.assign(static_cast<size_t>(clusters->k), init_value);
    } else {
        w.unit_to_entry.resize(static_cast<size_t>(units));
        std::iota(w.unit_to_entry.begin(), w.unit_to_entry.end(), 0);
        w.storage.assign(static_cast<size_t>(units), init_value);
    }
    return w;
}

namespace {

std::vector<double> effective_weights_for(const WeightMatrix& w, const TaskData& task) {
    std::vector<double> out(static_cast<size_t>(task.query_size()));
    for (int k = 0; k < task.query_size(); ++k) out[k] = w.weight_of(task.task_id, k);
    return out;
}

/// Recorded train batch: per-task tapes, extracted weighted meta-gradients,
/// and the virtual parameters. Caches fill lazily during the hypergradient.
struct BatchRecord {
    std::vector<meta::TaskTape> tapes;
    std::vector<ParamVector> grads;            // G_i = grad of <w_i, L_i> at theta
    std::vector<ParamVector> unweighted_sums;  // U_i = grad of <1, L_i>; empty until needed
    ParamVector theta_w;
    double batch_loss = 0.0;
};

BatchRecord record_batch(const Model& model, const ParamVector& theta,
                         std::span<const TaskData> batch, const WeightMatrix& w,
                         const meta::AdaptConfig& adapt, double eta) {
    BatchRecord rec;
    rec.theta_w = theta;
    rec.tapes.reserve(batch.size());
    rec.grads.reserve(batch.size());
    rec.unweighted_sums.resize(batch.size());
    const double step = eta / static_cast<double>(batch.size());
    const size_t dim = theta.size();
    for (const TaskData& task : batch) {
        rec.tapes.push_back(
            meta::record_task(model, theta, task, adapt, effective_weights_for(w, task)));
        meta::TaskTape& tt = rec.tapes.back();
        rec.batch_loss += tt.tape.value(tt.wloss).data[0];
        rec.grads.push_back(tt.tape.adjoint_values(tt.theta_adj, static_cast<int>(dim)));
        const ParamVector& g = rec.grads.back();
        for (size_t i = 0; i < dim; ++i) rec.theta_w[i] -= step * g[i];
    }
    rec.batch_loss /= static_cast<double>(batch.size());
    return rec;
}

/// grad of the unweighted instance-loss sum w.r.t. theta, via a second
/// backward pass on the recorded task tape.
const ParamVector& unweighted_sum_grad(BatchRecord& rec, size_t i, size_t dim) {
    if (!rec.unweighted_sums[i].empty()) return rec.unweighted_sums[i];
    meta::TaskTape& tt = rec.tapes[i];
    Tape& tape = tt.tape;
    Var ones = tape.constant(Mat::ones(tape.value(tt.inst_losses).rows, 1));
    Var s = tape.dot(ones, tt.inst_losses);
    const Var wrt[] = {tt.theta};
    auto adj = tape.backward(s, wrt);
    rec.unweighted_sums[i] = tape.adjoint_values(adj[0], static_cast<int>(dim));
    return rec.unweighted_sums[i];
}

HyperGradient hypergrad_core(const Model& model, std::span<const TaskData> train_batch,
                             std::span<const TaskData> val_batch, const WeightMatrix& w,
                             const meta::AdaptConfig& adapt, double eta, BatchRecord& rec,
                             bool exact) {
    const size_t dim = rec.theta_w.size();
    const double m = static_cast<double>(train_batch.size());
    const double n = static_cast<double>(val_batch.size());

    // A = sum_j (I - alpha * H_j) grad_phi L_Vj: the validation direction the
    // train-task gradients are matched against. H_j is the Hessian of the
    // validation support loss at theta_W; by symmetry it may be applied to
    // the validation gradient instead of each train gradient, costing n HVPs
    // per batch. The HVP term carries the factor alpha and is elided when
    // alpha = 0, which makes the exact and approximate modes identical there.
    ParamVector a_total(dim, 0.0);
    for (const TaskData& vt : val_batch) {
        // One tape per validation task: adapt theta_W, then read the adjoint
        // AT the adapted node, which is grad_phi of the query loss. The
        // barrier stops the walk from descending into the adaptation graph.
        Tape tape;
        Var leaf = tape.leaf(Mat(static_cast<int>(dim), 1, rec.theta_w));
        Var phi = meta::adapt_graph(tape, model, leaf, vt.support_inputs, vt.support_targets, adapt);
        Var loss = models::loss_graph(tape, model, phi, vt.query_inputs, vt.query_targets);
        const Var wrt[] = {phi};
        auto adj = tape.backward(loss, wrt, wrt);
        ParamVector gj = tape.adjoint_values(adj[0], static_cast<int>(dim));
        if (exact && adapt.alpha != 0.0) {
            const DiffFn support_loss = [&](Tape& t, Var p) {
                return models::loss_graph(t, model, p, vt.support_inputs, vt.support_targets);
            };
            ParamVector hj = diffcore::hvp(support_loss, rec.theta_w, gj);
            for (size_t i = 0; i < dim; ++i) a_total[i] += gj[i] - adapt.alpha * hj[i];
        } else {
            for (size_t i = 0; i < dim; ++i) a_total[i] += gj[i];
        }
    }

    HyperGradient hg{std::vector<double>(w.storage.size(), 0.0)};
    const double coef = -eta / (m * n);
    for (size_t i = 0; i < train_batch.size(); ++i) {
        const TaskData& task = train_batch[i];
        meta::TaskTape& tt = rec.tapes[i];
        if (w.task_shares_entry(task.task_id)) {
            const double w_shared = w.weight_of(task.task_id, 0);
            double d = 0.0;
            if (w_shared >= kSharedWeightFloor) {
                // G_i = w * grad of the unweighted sum, so one division
                // recovers the unweighted inner product.
                const ParamVector& g = rec.grads[i];
                for (size_t c = 0; c < dim; ++c) d += a_total[c] * g[c];
                d /= w_shared;
            } else {
                const ParamVector& u = unweighted_sum_grad(rec, i, dim);
                for (size_t c = 0; c < dim; ++c) d += a_total[c] * u[c];
            }
            hg.values[static_cast<size_t>(w.entry_of(task.task_id, 0))] += coef * d;
        } else {
            // d/dw_k of <grad_theta <w, L>, A> recovers <A, grad_theta l_k>
            // per instance in one reverse pass over the recorded gradient.
            if (!tt.theta_adj.valid()) continue;
            Var a_const = tt.tape.constant(Mat(static_cast<int>(dim), 1, a_total));
            Var s = tt.tape.dot(tt.theta_adj, a_const);
            const Var wrt[] = {tt.weights};
            auto adj = tt.tape.backward(s, wrt);
            if (!adj[0].valid()) continue;
            const Mat& d_vec = tt.tape.value(adj[0]);
            for (int k = 0; k < task.query_size(); ++k)
                hg.values[static_cast<size_t>(w.entry_of(task.task_id, k))] +=
                    coef * d_vec.data[static_cast<size_t>(k)];
        }
    }
    return hg;
}

}  // namespace

ParamVector virtual_theta(const Model& model, const ParamVector& p,
                          std::span<const TaskData> train_batch, const WeightMatrix& w,
                          const meta::AdaptConfig& adapt, const meta::MetaConfig& meta) {
    BatchRecord rec = record_batch(model, p, train_batch, w, adapt, meta.eta);
    return rec.theta_w;
}

HyperGradient hypergrad_exact(const Model& model, const ParamVector& p,
                              std::span<const TaskData> train_batch,
                              std::span<const TaskData> val_batch, const WeightMatrix& w,
                              const meta::AdaptConfig& adapt, const meta::MetaConfig& meta) {
    if (adapt.inner_steps != 1)
        throw UnsupportedConfig("hypergrad_exact: requires inner_steps = 1");
    BatchRecord rec = record_batch(model, p, train_batch, w, adapt, meta.eta);
    return hypergrad_core(model, train_batch, val_batch, w, adapt, meta.eta, rec, true);
}

HyperGradient hypergrad_approx(const Model& model, const ParamVector& p,
                               std::span<const TaskData> train_batch,
                               std::span<const TaskData> val_batch, const WeightMatrix& w,
                               const meta::AdaptConfig& adapt, const meta::MetaConfig& meta) {
    BatchRecord rec = record_batch(model, p, train_batch, w, adapt, meta.eta);
    return hypergrad_core(model, train_batch, val_batch, w, adapt, meta.eta, rec, false);
}

WeightMatrix weight_step(const WeightMatrix& w, const HyperGradient& hg, double gamma) {
    if (hg.values.size() != w.storage.size())
        throw AlignmentError("weight_step: hypergradient has " + std::to_string(hg.values.size()) +
                             " entries, weights " + std::to_string(w.storage.size()));
    WeightMatrix out = w;
    for (size_t e = 0; e < out.storage.size(); ++e)
        out.storage[e] = std::max(0.0, w.storage[e] - gamma * hg.values[e]);
    return out;
}

void normalize_weight_mass(WeightMatrix& w, double target_mass) {
    double mass = 0.0;
    const int units = w.units();
    for (int u = 0; u < units; ++u) mass += w.storage[static_cast<size_t>(w.unit_to_entry[u])];
    mass /= static_cast<double>(units);
    if (mass <= 0.0) return;
    const double scale = target_mass / mass;
    for (double& v : w.storage) v *= scale;
}

void normalize_task_weights(WeightMatrix& w) {
    if (w.storage.size() != static_cast<size_t>(w.units()))
        throw UnsupportedConfig("normalize_task_weights: incompatible with weight sharing");
    if (w.scheme == Scheme::task) {
        for (double& v : w.storage) v = v > 0.0 ? 1.0 : 0.0;
        return;
    }
    for (int task = 0; task < w.num_tasks; ++task) {
        double norm_sq = 0.0;
        for (int k = 0; k < w.k_query; ++k) {
            const double v = w.storage[static_cast<size_t>(task) * w.k_query + k];
            norm_sq += v * v;
        }
        if (norm_sq == 0.0) continue;
        const double inv = 1.0 / std::sqrt(norm_sq);
        for (int k = 0; k < w.k_query; ++k)
            w.storage[static_cast<size_t>(task) * w.k_query + k] *= inv;
    }
}

namespace {

std::vector<double> moments(const Mat& m) {
    double mean = 0.0;
    for (double x : m.data) mean += x;
    mean /= static_cast<double>(m.size());
    double var = 0.0, mn = m.data[0], mx = m.data[0];
    for (double x : m.data) {
        var += (x - mean) * (x - mean);
        mn = std::min(mn, x);
        mx = std::max(mx, x);
    }
    var /= static_cast<double>(m.size());
    return {mean, std::sqrt(var), mn, mx};
}

// Pearson correlation between the first input coordinate and the target;
// the mixed moment separates collinear tasks from oscillatory ones where the
// marginal moments overlap.
double input_target_corr(const Mat& x, const Mat& y) {
    const int n = x.rows;
    double mx = 0, my = 0;
    for (int i = 0; i < n; ++i) {
        mx += x.at(i, 0);
        my += y.at(i, 0);
    }
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0, syy = 0;
    for (int i = 0; i < n; ++i) {
        const double dx = x.at(i, 0) - mx, dy = y.at(i, 0) - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    const double denom = std::sqrt(sxx * syy);
    return denom > 0.0 ? sxy / denom : 0.0;
}

std::vector<std::vector<double>> unit_features(const TaskPool& pool, Scheme scheme,
                                               const Model& model, const ParamVector& theta0) {
    std::vector<std::vector<double>> feats;
    if (scheme == Scheme::task) {
        feats.reserve(pool.train.size());
        for (const TaskData& t : pool.train) {
            std::vector<double> f;
            for (const Mat* m :
                 {&t.support_inputs, &t.support_targets, &t.query_inputs, &t.query_targets}) {
                auto mm = moments(*m);
                f.insert(f.end(), mm.begin(), mm.end());
            }
            f.push_back(input_target_corr(t.support_inputs, t.support_targets));
            f.push_back(input_target_corr(t.query_inputs, t.query_targets));
            feats.push_back(std::move(f));
        }
        return feats;
    }
    for (const TaskData& t : pool.train) {
        const auto losses = models::instance_losses(model, theta0, t.query_inputs, t.query_targets);
        for (int k = 0; k < t.query_size(); ++k) {
            std::vector<double> f;
            // Raw coordinates and labels are task-local and carry no shared
            // meaning across episodes, so classification instances cluster on
            // support-consistency and loss only.
            if (!t.is_classification()) {
                for (int c = 0; c < t.query_inputs.cols; ++c) f.push_back(t.query_inputs.at(k, c));
                f.push_back(t.query_targets.at(k, 0));
            }
            f.push_back(losses[static_cast<size_t>(k)]);
            if (t.is_classification()) {
                // Support-label consistency: distance to the nearest support
                // point of the instance's own class minus the distance to the
                // nearest support point overall. Instances whose label blob
                // sits far away stand out, which raw coordinates cannot
                // express across tasks.
                double d_any = std::numeric_limits<double>::max();
                double d_same = std::numeric_limits<double>::max();
                const int label = static_cast<int>(t.query_targets.at(k, 0));
                for (int s = 0; s < t.support_inputs.rows; ++s) {
                    double dist = 0.0;
                    for (int c = 0; c < t.query_inputs.cols; ++c) {
                        const double diff = t.query_inputs.at(k, c) - t.support_inputs.at(s, c);
                        dist += diff * diff;
                    }
                    dist = std::sqrt(dist);
                    d_any = std::min(d_any, dist);
                    if (static_cast<int>(t.support_targets.at(s, 0)) == label)
                        d_same = std::min(d_same, dist);
                }
                f.push_back(d_same - d_any);
            }
            feats.push_back(std::move(f));
        }
    }
    return feats;
}

void standardize(std::vector<std::vector<double>>& feats) {
    if (feats.empty()) return;
    const size_t d = feats[0].size();
    for (size_t c = 0; c < d; ++c) {
        double mean = 0.0;
        for (const auto& f : feats) mean += f[c];
        mean /= static_cast<double>(feats.size());
        double var = 0.0;
        for (const auto& f : feats) var += (f[c] - mean) * (f[c] - mean);
        var /= static_cast<double>(feats.size());
        const double sd = std::sqrt(var);
        for (auto& f : feats) f[c] = sd > 0.0 ? (f[c] - mean) / sd : 0.0;
    }
}

double dist_sq(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

}  // namespace

ClusterAssignment cluster_units(const TaskPool& pool, Scheme scheme, int k, const Model& model,
                                const ParamVector& theta0, std::uint64_t seed) {
    auto feats = unit_features(pool, scheme, model, theta0);
    const int units = static_cast<int>(feats.size());
    if (k < 1) throw ConfigError("cluster_units: k must be >= 1");
    if (k > units)
        throw ConfigError("cluster_units: k = " + std::to_string(k) + " exceeds " +
                          std::to_string(units) + " units");
    ClusterAssignment out;
    out.k = k;
    if (k == units) {  // singleton clusters: no sharing
        out.labels.resize(static_cast<size_t>(units));
        std::iota(out.labels.begin(), out.labels.end(), 0);
        out.centroids = feats;
        return out;
    }
    standardize(feats);

    tasks::Rng rng = meta::make_stream(seed, 4);
    // k-means++ seeding with an explicit cumulative-sum pick.
    std::vector<std::vector<double>> centers;
    centers.reserve(static_cast<size_t>(k));
    std::uniform_int_distribution<int> first(0, units - 1);
    centers.push_back(feats[static_cast<size_t>(first(rng))]);
    std::vector<double> dist(static_cast<size_t>(units), 0.0);
    while (static_cast<int>(centers.size()) < k) {
        double total = 0.0;
        for (int i = 0; i < units; ++i) {
            double best = std::numeric_limits<double>::max();
            for (const auto& c : centers) best = std::min(best, dist_sq(feats[i], c));
            dist[i] = best;
            total += best;
        }
        int chosen = 0;
        if (total > 0.0) {
            std::uniform_real_distribution<double> u(0.0, total);
            double target = u(rng), cum = 0.0;
            for (int i = 0; i < units; ++i) {
                cum += dist[i];
                if (cum >= target) {
                    chosen = i;
                    break;
                }
            }
        } else {
            chosen = first(rng);
        }
        centers.push_back(feats[static_cast<size_t>(chosen)]);
    }

    out.labels.assign(static_cast<size_t>(units), 0);
    std::vector<int> counts(static_cast<size_t>(k), 0);
    for (int iter = 0; iter < 100; ++iter) {
        bool changed = false;
        for (int i = 0; i < units; ++i) {
            int best = 0;
            double best_d = dist_sq(feats[i], centers[0]);
            for (int c = 1; c < k; ++c) {
                const double d = dist_sq(feats[i], centers[c]);
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            if (out.labels[i] != best) {
                out.labels[i] = best;
                changed = true;
            }
        }
        std::fill(counts.begin(), counts.end(), 0);
        for (auto& c : centers) std::fill(c.begin(), c.end(), 0.0);
        for (int i = 0; i < units; ++i) {
            const int c = out.labels[i];
            ++counts[c];
            for (size_t j = 0; j < feats[i].size(); ++j) centers[c][j] += feats[i][j];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[c] == 0) continue;
            for (double& v : centers[c]) v /= static_cast<double>(counts[c]);
        }
        for (int c = 0; c < k; ++c) {
            if (counts[c] > 0) continue;
            // Reseed an empty cluster at the point farthest from its current
            // centroid (first occurrence).
            int far = 0;
            double far_d = -1.0;
            for (int i = 0; i < units; ++i) {
                const double d = dist_sq(feats[i], centers[out.labels[i]]);
                if (d > far_d) {
                    far_d = d;
                    far = i;
                }
            }
            centers[c] = feats[static_cast<size_t>(far)];
            changed = true;
        }
        if (!changed) break;
    }
    out.centroids = std::move(centers);
    return out;
}

WeightGroupMeans weight_group_means(const WeightMatrix& w, const TaskPool& pool) {
    WeightGroupMeans out;
    double id_sum = 0, ood_sum = 0, clean_sum = 0, noisy_sum = 0;
    long id_n = 0, ood_n = 0, clean_n = 0, noisy_n = 0;
    for (const TaskData& task : pool.train) {
        double task_mean = 0.0;
        for (int k = 0; k < task.query_size(); ++k) {
            const double v = w.weight_of(task.task_id, k);
            task_mean += v;
            if (k < static_cast<int>(task.noise_mask.size()) && task.noise_mask[k]) {
                noisy_sum += v;
                ++noisy_n;
            } else {
                clean_sum += v;
                ++clean_n;
            }
        }
        task_mean /= static_cast<double>(task.query_size());
        if (task.is_ood) {
            ood_sum += task_mean;
            ++ood_n;
        } else {
            id_sum += task_mean;
            ++id_n;
        }
    }
    out.id = id_n ? id_sum / static_cast<double>(id_n) : 0.0;
    out.ood = ood_n ? ood_sum / static_cast<double>(ood_n) : 0.0;
    out.clean = clean_n ? clean_sum / static_cast<double>(clean_n) : 0.0;
    out.noisy = noisy_n ? noisy_sum / static_cast<double>(noisy_n) : 0.0;
    return out;
}

RwTrainResult train_rwmaml(const TaskPool& pool, const harness::ExperimentConfig& cfg,
                           const harness::MetricSink& sink, const WeightDumpSink& dumps,
                           const std::optional<ClusterAssignment>& injected_clusters) {
    tune_runtime();
    harness::validate(cfg);
    const Model model = harness::resolve_model(cfg);
    if (pool.train.empty()) throw ConfigError("train_rwmaml: empty training pool");
    if (pool.val.empty()) throw ConfigError("train_rwmaml: empty validation pool");
    const int num_tasks = static_cast<int>(pool.train.size());
    const int k_query = pool.train.front().query_size();

    RwTrainResult result;
    result.params = models::init_params(model.spec);

    std::optional<ClusterAssignment> clusters = injected_clusters;
    if (!clusters && cfg.reweight.clusters > 0)
        clusters = cluster_units(pool, cfg.reweight.scheme, cfg.reweight.clusters, model,
                                 result.params, cfg.seed);

    double init_value = 0.0;
    switch (cfg.reweight.weight_init) {
        case harness::WeightInit::scheme_default:
            init_value = cfg.reweight.scheme == Scheme::task ? 1.0 : 0.005;
            break;
        case harness::WeightInit::maml_uniform:
            init_value = 1.0 / static_cast<double>(k_query);
            break;
        case harness::WeightInit::random:
            init_value = 0.0;
            break;
        case harness::WeightInit::custom:
            init_value = cfg.reweight.weight_init_value;
            break;
    }
    result.weights =
        make_weight_matrix(cfg.reweight.scheme, num_tasks, k_query, init_value, clusters);
    if (cfg.reweight.weight_init == harness::WeightInit::random) {
        tasks::Rng wrng = meta::make_stream(cfg.seed, 3);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (double& v : result.weights.storage) v = u(wrng);
    }

    tasks::Rng train_rng = meta::make_stream(cfg.seed, 1);
    tasks::Rng val_rng = meta::make_stream(cfg.seed, 2);
    const double eta = harness::effective_eta(cfg);
    const double gamma = harness::effective_gamma(cfg);
    const int m = std::min<int>(cfg.meta.batch_m, num_tasks);
    const int n = std::min<int>(cfg.meta.batch_n, static_cast<int>(pool.val.size()));
    const bool exact = cfg.reweight.hypergrad == harness::HypergradMode::exact;
    const size_t dim = result.params.size();

    using Clock = std::chrono::steady_clock;
    ParamVector grad_sum(dim);
    std::vector<TaskData> batch, val_batch;

    for (long t = 0; t < cfg.run.iterations; ++t) {
        const auto tick = Clock::now();
        const auto batch_idx = meta::sample_batch(train_rng, num_tasks, m);
        const auto val_idx = meta::sample_batch(val_rng, static_cast<int>(pool.val.size()), n);
        batch.clear();
        val_batch.clear();
        for (int idx : batch_idx) batch.push_back(pool.train[static_cast<size_t>(idx)]);
        for (int idx : val_idx) val_batch.push_back(pool.val[static_cast<size_t>(idx)]);

        WeightMatrix next;
        double batch_loss = 0.0;
        std::fill(grad_sum.begin(), grad_sum.end(), 0.0);
        try {
            BatchRecord rec =
                record_batch(model, result.params, batch, result.weights, cfg.adapt, eta);
            if (rec.batch_loss > meta::kDivergenceLimit)
                throw DivergenceError(
                    "train_rwmaml: meta loss exceeded divergence guard at iteration " +
                        std::to_string(t),
                    t);
            batch_loss = rec.batch_loss;

            HyperGradient hg = hypergrad_core(model, batch, val_batch, result.weights, cfg.adapt,
                                              eta, rec, exact);
            result.hypergrad_sq_history.push_back(hg.norm_sq());

            next = weight_step(result.weights, hg, gamma);
            if (cfg.reweight.normalize_weights) {
                if (next.storage.size() == static_cast<size_t>(next.units()))
                    normalize_task_weights(next);
                else
                    normalize_weight_mass(next, 1.0 / static_cast<double>(k_query));
            }

            // Model update with the new weights. Unchanged task weights reuse
            // the recorded gradient bit-for-bit; shared-entry tasks rescale
            // the cached unweighted gradient; everything else replays the
            // tape.
            for (size_t i = 0; i < batch.size(); ++i) {
                const TaskData& task = batch[i];
                bool same = true;
                for (int k = 0; k < task.query_size() && same; ++k)
                    same = next.weight_of(task.task_id, k) ==
                           result.weights.weight_of(task.task_id, k);
                if (same) {
                    const ParamVector& g = rec.grads[i];
                    for (size_t c = 0; c < dim; ++c) grad_sum[c] += g[c];
                } else if (next.task_shares_entry(task.task_id)) {
                    const double w_new = next.weight_of(task.task_id, 0);
                    const double w_old = result.weights.weight_of(task.task_id, 0);
                    if (w_old >= kSharedWeightFloor) {
                        const double ratio = w_new / w_old;
                        const ParamVector& g = rec.grads[i];
                        for (size_t c = 0; c < dim; ++c) grad_sum[c] += ratio * g[c];
                    } else {
                        const ParamVector& u = unweighted_sum_grad(rec, i, dim);
                        for (size_t c = 0; c < dim; ++c) grad_sum[c] += w_new * u[c];
                    }
                } else {
                    meta::TaskTape& tt = rec.tapes[i];
                    tt.tape.set_leaf(tt.weights, Mat::column(effective_weights_for(next, task)));
                    tt.tape.recompute();
                    const ParamVector g =
                        tt.tape.adjoint_values(tt.theta_adj, static_cast<int>(dim));
                    for (size_t c = 0; c < dim; ++c) grad_sum[c] += g[c];
                }
            }
        } catch (const NonFiniteValue& e) {
            throw DivergenceError("train_rwmaml: " + std::string(e.what()) + " at iteration " +
                                      std::to_string(t),
                                  t);
        }
        const double step = eta / static_cast<double>(m);
        for (size_t c = 0; c < dim; ++c) result.params[c] -= step * grad_sum[c];
        result.weights = std::move(next);
        result.train_seconds += std::chrono::duration<double>(Clock::now() - tick).count();

        if (dumps && cfg.run.dump_every > 0 && (t + 1) % cfg.run.dump_every == 0)
            dumps(t + 1, result.weights);
        if ((t + 1) % cfg.run.eval_every == 0 || t + 1 == cfg.run.iterations) {
            harness::MetricRecord rec_out;
            rec_out.iter = t + 1;
            rec_out.train_meta_loss = batch_loss;
            rec_out.val_meta_loss = pool_meta_loss(model, result.params, pool.val, cfg.adapt);
            rec_out.test_metric = pool_test_metric(model, result.params, pool.test, cfg.adapt);
            rec_out.hypergrad_norm_sq = result.hypergrad_sq_history.back();
            const WeightGroupMeans wm = weight_group_means(result.weights, pool);
            rec_out.mean_weight_id = wm.id;
            rec_out.mean_weight_ood = wm.ood;
            rec_out.mean_weight_clean = wm.clean;
            rec_out.mean_weight_noisy = wm.noisy;
            rec_out.wallclock_seconds = result.train_seconds;
            result.metrics.push_back(rec_out);
            if (sink) sink(rec_out);
        }
    }
    if (dumps) dumps(-1, result.weights);
    return result;
}

}  // namespace rwmeta::reweight

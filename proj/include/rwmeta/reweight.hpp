#pragma once

#include <optional>

#include "rwmeta/meta.hpp"
#include "rwmeta/weights.hpp"

namespace rwmeta::reweight {

/// Weight matrix over the training pool. `init_value` fills the storage;
/// with a cluster assignment, storage holds one entry per cluster.
WeightMatrix make_weight_matrix(Scheme scheme, int num_tasks, int k_query, double init_value,
                                const std::optional<ClusterAssignment>& clusters = std::nullopt);

/// One-step virtual parameters theta_W = theta - (eta/m) sum_i grad <w_i, L_i>,
/// the quantity whose dependence on the weights drives the weight update.
diffcore::ParamVector virtual_theta(const models::Model& model, const diffcore::ParamVector& p,
                                    std::span<const tasks::TaskData> train_batch,
                                    const WeightMatrix& w, const meta::AdaptConfig& adapt,
                                    const meta::MetaConfig& meta);

/// Exact hypergradient of the validation meta-loss w.r.t. the weight storage:
/// the analytic one-step expression including the Hessian-vector-product
/// correction (one HVP of each validation support loss at theta_W).
/// Requires inner_steps = 1.
HyperGradient hypergrad_exact(const models::Model& model, const diffcore::ParamVector& p,
                              std::span<const tasks::TaskData> train_batch,
                              std::span<const tasks::TaskData> val_batch, const WeightMatrix& w,
                              const meta::AdaptConfig& adapt, const meta::MetaConfig& meta);

/// First-order hypergradient: the exact expression with the HVP term (whose
/// coefficient carries the factor alpha) dropped. Identical to the exact mode
/// at alpha = 0, bit for bit.
HyperGradient hypergrad_approx(const models::Model& model, const diffcore::ParamVector& p,
                               std::span<const tasks::TaskData> train_batch,
                               std::span<const tasks::TaskData> val_batch, const WeightMatrix& w,
                               const meta::AdaptConfig& adapt, const meta::MetaConfig& meta);

/// Descent step followed by element-wise rectification max(0, .). Shared
/// entries receive the summed hypergradient of their constituents (already
/// aggregated into hg).
WeightMatrix weight_step(const WeightMatrix& w, const HyperGradient& hg, double gamma);

/// Opt-in renormalization (||w_i|| = 1 per task); only valid without weight
/// sharing.
void normalize_task_weights(WeightMatrix& w);

/// Opt-in renormalization for shared (clustered) weights: rescales storage so
/// the mean effective instance weight equals `target_mass`. Keeps the total
/// training rate pinned while relative weights shift.
void normalize_weight_mass(WeightMatrix& w, double target_mass);

/// K-means (Lloyd, seeded k-means++ init, at most 100 iterations) over unit
/// feature vectors. Task features: moments of support/query inputs and
/// targets. Instance features: input coordinates, target value, and the
/// initial per-instance loss under theta0.
ClusterAssignment cluster_units(const tasks::TaskPool& pool, Scheme scheme, int k,
                                const models::Model& model, const diffcore::ParamVector& theta0,
                                std::uint64_t seed);

struct RwTrainResult {
    diffcore::ParamVector params;
    WeightMatrix weights;
    std::vector<harness::MetricRecord> metrics;
    std::vector<double> hypergrad_sq_history;  // ||grad_W L_V^meta||^2 per iteration
    double train_seconds = 0.0;
};

/// Called after every weight dump with the dump iteration (-1 for the final
/// dump) and the current weights.
using WeightDumpSink = std::function<void(long, const WeightMatrix&)>;

/// The full reweighted training loop: per iteration, sample train/validation
/// batches, take the virtual step, update the sampled tasks' weights from the
/// hypergradient, rectify, then update the model with the new weights.
/// `injected_clusters` overrides the feature-based clustering (sharing
/// schemes other than k-means, e.g. one entry per task).
RwTrainResult train_rwmaml(const tasks::TaskPool& pool, const harness::ExperimentConfig& cfg,
                           const harness::MetricSink& sink = {},
                           const WeightDumpSink& dumps = {},
                           const std::optional<ClusterAssignment>& injected_clusters = std::nullopt);

/// Mean stored weight over train tasks grouped by the OOD flag
/// {id_mean, ood_mean}, and over instances grouped by the noise mask
/// {clean_mean, noisy_mean}.
struct WeightGroupMeans {
    double id = 0.0, ood = 0.0, clean = 0.0, noisy = 0.0;
};
WeightGroupMeans weight_group_means(const WeightMatrix& w, const tasks::TaskPool& pool);

}  // namespace rwmeta::reweight

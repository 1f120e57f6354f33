#pragma once

#include <span>
#include <vector>

#include "rwmeta/metrics.hpp"
#include "rwmeta/models.hpp"
#include "rwmeta/tasks.hpp"
#include "rwmeta/weights.hpp"

namespace rwmeta::harness {
struct ExperimentConfig;
}

namespace rwmeta::meta {

struct AdaptConfig {
    double alpha = 0.01;
    int inner_steps = 1;
};

struct MetaConfig {
    double eta = 0.001;
    int batch_m = 10;
    int batch_n = 10;
};

/// Adapted parameters as a tape node: inner_steps gradient steps on the
/// support loss, recorded so the result stays differentiable w.r.t. theta.
diffcore::Var adapt_graph(diffcore::Tape& tape, const models::Model& model, diffcore::Var theta,
                          const Mat& support_inputs, const Mat& support_targets,
                          const AdaptConfig& adapt);

/// Value-level inner adaptation: theta - alpha * grad, inner_steps times.
diffcore::ParamVector inner_adapt(const models::Model& model, const diffcore::ParamVector& p,
                                  const Mat& support_inputs, const Mat& support_targets,
                                  const AdaptConfig& adapt);

/// Per-instance query losses of the adapted model.
std::vector<double> task_query_losses(const models::Model& model, const diffcore::ParamVector& p,
                                      const tasks::TaskData& task, const AdaptConfig& adapt);

/// (1/m) sum_i <w_i, L_i>: the instance-weighted meta objective. With all
/// effective weights at 1/K this is the plain MAML objective.
double weighted_meta_loss(const models::Model& model, const diffcore::ParamVector& p,
                          std::span<const tasks::TaskData> batch, const reweight::WeightMatrix& w,
                          const AdaptConfig& adapt);

/// One meta step: theta - (eta/m) sum_i grad of <w_i, L_i>, with the gradient
/// flowing through the inner adaptation.
diffcore::ParamVector meta_update(const models::Model& model, const diffcore::ParamVector& p,
                                  std::span<const tasks::TaskData> batch,
                                  const reweight::WeightMatrix& w, const AdaptConfig& adapt,
                                  const MetaConfig& meta);

struct TrainResult {
    diffcore::ParamVector params;
    std::vector<harness::MetricRecord> metrics;
    std::vector<double> hypergrad_sq_history;  // per iteration; empty for MAML
    double train_seconds = 0.0;
};

/// Plain MAML training (uniform effective instance weights 1/K). In skyline
/// mode the pool is pre-filtered: OOD tasks removed for regression pools,
/// noise-masked query instances removed for classification pools.
TrainResult train_maml(const tasks::TaskPool& pool, const harness::ExperimentConfig& cfg,
                       const harness::MetricSink& sink = {});

// Shared engine pieces, also used by the reweight module and the harness.

/// Per-task computation record: forward, inner adaptation, per-instance query
/// losses, weighted loss, and the backward pass w.r.t. theta.
struct TaskTape {
    diffcore::Tape tape;
    diffcore::Var theta;        // leaf
    diffcore::Var weights;      // leaf, K x 1 effective instance weights
    diffcore::Var inst_losses;  // K x 1
    diffcore::Var wloss;        // scalar <w, L>
    diffcore::Var theta_adj;    // adjoint of theta (invalid if independent)
};

TaskTape record_task(const models::Model& model, const diffcore::ParamVector& theta,
                     const tasks::TaskData& task, const AdaptConfig& adapt,
                     const std::vector<double>& effective_weights);

/// Uniform batch sample without replacement, deterministic in rng state.
std::vector<int> sample_batch(tasks::Rng& rng, int pool_size, int m);

/// Independent deterministic rng streams derived from the run seed. Train
/// and validation sampling use distinct streams so adding validation draws
/// does not disturb the training batch sequence.
tasks::Rng make_stream(std::uint64_t seed, std::uint32_t stream_id);

/// Mean post-adaptation meta loss over a task list.
double pool_meta_loss(const models::Model& model, const diffcore::ParamVector& p,
                      std::span<const tasks::TaskData> pool, const AdaptConfig& adapt);

/// Post-adaptation test metric: MSE for regression, accuracy for
/// classification.
double pool_test_metric(const models::Model& model, const diffcore::ParamVector& p,
                        std::span<const tasks::TaskData> pool, const AdaptConfig& adapt);

/// Ground-truth filtering for the skyline baselines: drops is_ood tasks and
/// removes noise-masked query instances.
tasks::TaskPool skyline_filter(const tasks::TaskPool& pool);

inline constexpr double kDivergenceLimit = 1e6;

}  // namespace rwmeta::meta

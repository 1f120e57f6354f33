#pragma once

#include <functional>
#include <vector>

#include "rwmeta/models.hpp"

namespace rwmeta {
namespace tasks {
struct TaskData;
}

namespace oracle {

/// Central-difference settings. epsilon defaults: 1e-5 for first-order
/// checks, 1e-4 for hypergradients (the composed map multiplies three step
/// sizes, so smaller steps drown in round-off).
struct FdSpec {
    double epsilon = 1e-5;
};

void validate(const FdSpec& fd);

/// Scalar objective for finite differencing.
using ScalarFn = std::function<double(const diffcore::ParamVector&)>;

/// Central differences per coordinate. Gated to dim <= 5000.
diffcore::ParamVector fd_gradient(const ScalarFn& f, const diffcore::ParamVector& p,
                                  const FdSpec& fd);

/// Independent scalar re-implementation of the MLP loss (no tape). Used as
/// the second path of dual-path forward checks, so it deliberately shares no
/// evaluation code with the models module.
double plain_mlp_loss(const models::Model& model, const diffcore::ParamVector& p, const Mat& inputs,
                      const Mat& targets);

std::vector<double> plain_mlp_instance_losses(const models::Model& model,
                                              const diffcore::ParamVector& p, const Mat& inputs,
                                              const Mat& targets);

/// Inputs of the finite-difference hypergradient: the weighted one-step
/// virtual update followed by the validation meta-loss, recomposed here from
/// diffcore primitives only (no meta/reweight code).
struct HyperFdProblem {
    models::Model model;
    double alpha = 0.01;
    int inner_steps = 1;
    double eta = 0.001;
    const std::vector<tasks::TaskData>* train_batch = nullptr;
    const std::vector<tasks::TaskData>* val_batch = nullptr;
    // weight_of(i, k): effective weight of query instance k of train_batch[i]
    // under the flat weight vector being perturbed.
    std::function<double(const std::vector<double>&, size_t, int)> weight_of;
    size_t num_entries = 0;
};

/// Validation meta-loss as a function of the flat weight vector: computes
/// theta_W by the one-step weighted update, adapts it on each validation
/// support set, and averages the validation query losses.
double hyper_objective(const HyperFdProblem& prob, const diffcore::ParamVector& theta,
                       const std::vector<double>& weights);

/// Central differences of hyper_objective over every weight entry.
/// Gated to num_entries <= 500 (cost is 2 * entries full evaluations).
std::vector<double> fd_hypergradient(const HyperFdProblem& prob,
                                     const diffcore::ParamVector& theta,
                                     const std::vector<double>& weights, const FdSpec& fd);

}  // namespace oracle
}  // namespace rwmeta

#pragma once

#include <cstdint>
#include <vector>

#include "rwmeta/diffcore.hpp"

namespace rwmeta::models {

enum class Activation { tanh, relu };
enum class LossKind { mse, cross_entropy };

/// Fully connected network description. Parameters are stored flat, layer by
/// layer: the in x out weight block (row-major), then the out bias entries
/// when use_bias is set.
struct MlpSpec {
    std::vector<int> layer_widths;  // input, hidden..., output
    Activation activation = Activation::relu;
    std::uint64_t init_seed = 0;
    double init_scale = 1.0;
    bool use_bias = true;
};

struct Model {
    MlpSpec spec;
    LossKind loss = LossKind::mse;
};

int param_count(const MlpSpec& spec);

/// Deterministic initialization: per layer uniform in [-s, s) with
/// s = init_scale / sqrt(fan_in). init_scale = 0 gives all zeros.
diffcore::ParamVector init_params(const MlpSpec& spec);

/// Network outputs for a batch of inputs (rows = instances), as tape nodes.
diffcore::Var forward_graph(diffcore::Tape& tape, const MlpSpec& spec, diffcore::Var params,
                            const Mat& inputs);

/// Per-instance losses as a K x 1 tape node.
diffcore::Var instance_loss_graph(diffcore::Tape& tape, const Model& model, diffcore::Var params,
                                  const Mat& inputs, const Mat& targets);

/// Mean-over-instances scalar loss node.
diffcore::Var loss_graph(diffcore::Tape& tape, const Model& model, diffcore::Var params,
                         const Mat& inputs, const Mat& targets);

double model_loss(const Model& model, const diffcore::ParamVector& p, const Mat& inputs,
                  const Mat& targets);

std::vector<double> instance_losses(const Model& model, const diffcore::ParamVector& p,
                                    const Mat& inputs, const Mat& targets);

/// Plain (tape-free) forward pass; used for evaluation metrics.
Mat forward_values(const MlpSpec& spec, const diffcore::ParamVector& p, const Mat& inputs);

/// Softmax probabilities per instance from the plain forward pass.
Mat softmax_probs(const MlpSpec& spec, const diffcore::ParamVector& p, const Mat& inputs);

/// Fraction of instances whose argmax logit matches the integer target.
double accuracy(const MlpSpec& spec, const diffcore::ParamVector& p, const Mat& inputs,
                const Mat& targets);

}  // namespace rwmeta::models

#include "rwmeta/oracle.hpp"

#include <cmath>
#include <string>

#include "rwmeta/tasks.hpp"

namespace rwmeta::oracle {

using diffcore::ParamVector;
using diffcore::Tape;
using diffcore::Var;
using models::LossKind;
using models::MlpSpec;
using models::Model;

void validate(const FdSpec& fd) {
    if (!(fd.epsilon >= 1e-8 && fd.epsilon <= 1e-2))
        throw ConfigError("FdSpec.epsilon: expected value in [1e-8, 1e-2]");
}

ParamVector fd_gradient(const ScalarFn& f, const ParamVector& p, const FdSpec& fd) {
    validate(fd);
    if (p.size() > 5000) throw ConfigError("fd_gradient: dim(p) <= 5000");
    ParamVector g(p.size(), 0.0);
    ParamVector q = p;
    for (size_t i = 0; i < p.size(); ++i) {
        q[i] = p[i] + fd.epsilon;
        const double fp = f(q);
        q[i] = p[i] - fd.epsilon;
        const double fm = f(q);
        q[i] = p[i];
        g[i] = (fp - fm) / (2.0 * fd.epsilon);
    }
    return g;
}

namespace {

// The oracle evaluates the network one instance at a time with its own loop,
// deliberately not reusing the batched path in models.
double plain_instance_loss(const Model& model, const ParamVector& p, const Mat& inputs,
                           const Mat& targets, int row) {
    const MlpSpec& spec = model.spec;
    std::vector<double> x(static_cast<size_t>(inputs.cols));
    for (int c = 0; c < inputs.cols; ++c) x[c] = inputs.at(row, c);
    size_t offset = 0;
    for (size_t l = 0; l + 1 < spec.layer_widths.size(); ++l) {
        const int in = spec.layer_widths[l];
        const int out = spec.layer_widths[l + 1];
        std::vector<double> z(static_cast<size_t>(out), 0.0);
        for (int j = 0; j < out; ++j) {
            double acc = 0.0;
            for (int t = 0; t < in; ++t) acc += x[t] * p[offset + static_cast<size_t>(t) * out + j];
            z[j] = acc;
        }
        offset += static_cast<size_t>(in) * out;
        if (spec.use_bias) {
            for (int j = 0; j < out; ++j) z[j] += p[offset + j];
            offset += out;
        }
        if (l + 2 < spec.layer_widths.size())
            for (double& v : z)
                v = spec.activation == models::Activation::tanh ? std::tanh(v)
                                                                : (v > 0.0 ? v : 0.0);
        x = std::move(z);
    }
    if (model.loss == LossKind::mse) {
        double acc = 0.0;
        for (size_t j = 0; j < x.size(); ++j) {
            const double d = x[j] - targets.at(row, static_cast<int>(j));
            acc += d * d;
        }
        return acc / static_cast<double>(x.size());
    }
    const int label = static_cast<int>(targets.at(row, 0));
    double mx = x[0];
    for (double v : x) mx = std::max(mx, v);
    double s = 0.0;
    for (double v : x) s += std::exp(v - mx);
    return std::log(s) + mx - x[static_cast<size_t>(label)];
}

// Graph-level per-instance loss built row by row (the engine path batches).
Var graph_instance_loss(Tape& tape, const Model& model, Var params, const Mat& inputs,
                        const Mat& targets, int row) {
    const MlpSpec& spec = model.spec;
    Mat xrow(1, inputs.cols);
    for (int c = 0; c < inputs.cols; ++c) xrow.at(0, c) = inputs.at(row, c);
    Var x = tape.constant(xrow);
    int offset = 0;
    for (size_t l = 0; l + 1 < spec.layer_widths.size(); ++l) {
        const int in = spec.layer_widths[l];
        const int out = spec.layer_widths[l + 1];
        Var w = tape.slice(params, offset, in, out);
        offset += in * out;
        Var z = tape.matmul(x, w);
        if (spec.use_bias) {
            Var b = tape.slice(params, offset, 1, out);
            offset += out;
            z = tape.add(z, b);
        }
        if (l + 2 < spec.layer_widths.size())
            z = spec.activation == models::Activation::tanh ? tape.tanh(z) : tape.relu(z);
        x = z;
    }
    const int out = spec.layer_widths.back();
    if (model.loss == LossKind::mse) {
        Mat yrow(1, out);
        for (int c = 0; c < out; ++c) yrow.at(0, c) = targets.at(row, c);
        Var d = tape.sub(x, tape.constant(yrow));
        return tape.mean(tape.square(d));
    }
    const int label = static_cast<int>(targets.at(row, 0));
    const Mat& logits = tape.value(x);
    double mx = logits.at(0, 0);
    for (int c = 1; c < out; ++c) mx = std::max(mx, logits.at(0, c));
    Var shifted = tape.sub(x, tape.constant(Mat::full(1, out, mx)));
    Var lse = tape.add(tape.log(tape.sum(tape.exp(shifted))), tape.constant(Mat::scalar(mx)));
    Mat onehot(1, out);
    onehot.at(0, label) = 1.0;
    return tape.sub(lse, tape.dot(x, tape.constant(onehot)));
}

Var graph_mean_loss(Tape& tape, const Model& model, Var params, const Mat& inputs,
                    const Mat& targets) {
    Var acc;
    for (int row = 0; row < inputs.rows; ++row) {
        Var li = graph_instance_loss(tape, model, params, inputs, targets, row);
        acc = row == 0 ? li : tape.add(acc, li);
    }
    return tape.scale(acc, 1.0 / static_cast<double>(inputs.rows));
}

Var graph_adapt(Tape& tape, const Model& model, Var theta, const Mat& sx, const Mat& sy,
                double alpha, int steps) {
    Var cur = theta;
    for (int s = 0; s < steps; ++s) {
        Var loss = graph_mean_loss(tape, model, cur, sx, sy);
        const Var wrt[] = {cur};
        auto adj = tape.backward(loss, wrt);
        if (!adj[0].valid()) return cur;
        cur = tape.add(cur, tape.scale(adj[0], -alpha));
    }
    return cur;
}

ParamVector value_adapt(const Model& model, const ParamVector& theta, const Mat& sx, const Mat& sy,
                        double alpha, int steps) {
    ParamVector cur = theta;
    for (int s = 0; s < steps; ++s) {
        Tape tape;
        Var leaf = tape.leaf(Mat(static_cast<int>(cur.size()), 1, cur));
        Var loss = graph_mean_loss(tape, model, leaf, sx, sy);
        const Var wrt[] = {leaf};
        auto adj = tape.backward(loss, wrt);
        ParamVector g = tape.adjoint_values(adj[0], static_cast<int>(cur.size()));
        for (size_t i = 0; i < cur.size(); ++i) cur[i] -= alpha * g[i];
    }
    return cur;
}

}  // namespace

double plain_mlp_loss(const Model& model, const ParamVector& p, const Mat& inputs,
                      const Mat& targets) {
    double acc = 0.0;
    for (int row = 0; row < inputs.rows; ++row)
        acc += plain_instance_loss(model, p, inputs, targets, row);
    return acc / static_cast<double>(inputs.rows);
}

std::vector<double> plain_mlp_instance_losses(const Model& model, const ParamVector& p,
                                              const Mat& inputs, const Mat& targets) {
    std::vector<double> out(static_cast<size_t>(inputs.rows));
    for (int row = 0; row < inputs.rows; ++row)
        out[row] = plain_instance_loss(model, p, inputs, targets, row);
    return out;
}

double hyper_objective(const HyperFdProblem& prob, const ParamVector& theta,
                       const std::vector<double>& weights) {
    const auto& train = *prob.train_batch;
    const auto& val = *prob.val_batch;
    const size_t dim = theta.size();

    // One weighted virtual step: theta_W = theta - (eta/m) sum_i grad of the
    // instance-weighted query loss through the inner adaptation.
    ParamVector theta_w = theta;
    const double step = prob.eta / static_cast<double>(train.size());
    for (size_t i = 0; i < train.size(); ++i) {
        const tasks::TaskData& task = train[i];
        Tape tape;
        Var leaf = tape.leaf(Mat(static_cast<int>(dim), 1, theta));
        Var phi = graph_adapt(tape, prob.model, leaf, task.support_inputs, task.support_targets,
                              prob.alpha, prob.inner_steps);
        Var weighted;
        for (int k = 0; k < task.query_size(); ++k) {
            Var lk = graph_instance_loss(tape, prob.model, phi, task.query_inputs,
                                         task.query_targets, k);
            Var wk = tape.scale(lk, prob.weight_of(weights, i, k));
            weighted = k == 0 ? wk : tape.add(weighted, wk);
        }
        const Var wrt[] = {leaf};
        auto adj = tape.backward(weighted, wrt);
        ParamVector g = tape.adjoint_values(adj[0], static_cast<int>(dim));
        for (size_t d = 0; d < dim; ++d) theta_w[d] -= step * g[d];
    }

    // Validation meta-loss at theta_W.
    double acc = 0.0;
    for (const tasks::TaskData& task : val) {
        ParamVector phi = value_adapt(prob.model, theta_w, task.support_inputs,
                                      task.support_targets, prob.alpha, prob.inner_steps);
        acc += plain_mlp_loss(prob.model, phi, task.query_inputs, task.query_targets);
    }
    return acc / static_cast<double>(val.size());
}

std::vector<double> fd_hypergradient(const HyperFdProblem& prob, const ParamVector& theta,
                                     const std::vector<double>& weights, const FdSpec& fd) {
    validate(fd);
    if (prob.num_entries > 500) throw ConfigError("fd_hypergradient: at most 500 weight entries");
    if (prob.num_entries != weights.size())
        throw ConfigError("fd_hypergradient: weights size mismatch");
    std::vector<double> hg(weights.size(), 0.0);
    std::vector<double> w = weights;
    for (size_t e = 0; e < weights.size(); ++e) {
        w[e] = weights[e] + fd.epsilon;
        const double fp = hyper_objective(prob, theta, w);
        w[e] = weights[e] - fd.epsilon;
        const double fm = hyper_objective(prob, theta, w);
        w[e] = weights[e];
        hg[e] = (fp - fm) / (2.0 * fd.epsilon);
    }
    return hg;
}

}  // namespace rwmeta::oracle

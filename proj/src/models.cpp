#include "rwmeta/models.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

namespace rwmeta::models {

using diffcore::Tape;
using diffcore::Var;

namespace {

void validate_spec(const MlpSpec& spec) {
    if (spec.layer_widths.size() < 2) throw ShapeError("MlpSpec: need at least 2 layers");
    for (int w : spec.layer_widths)
        if (w <= 0) throw ShapeError("MlpSpec: layer widths must be positive");
    if (spec.init_scale < 0.0) throw ShapeError("MlpSpec: init_scale must be >= 0");
}

void validate_targets(const Model& model, const Mat& inputs, const Mat& targets) {
    const int out = model.spec.layer_widths.back();
    if (inputs.cols != model.spec.layer_widths.front())
        throw ShapeError("inputs: expected " + std::to_string(model.spec.layer_widths.front()) +
                         " columns, got " + std::to_string(inputs.cols));
    if (targets.rows != inputs.rows) throw ShapeError("targets: row count differs from inputs");
    if (model.loss == LossKind::mse) {
        if (targets.cols != out) throw ShapeError("mse targets: expected " + std::to_string(out) +
                                                  " columns, got " + std::to_string(targets.cols));
    } else {
        if (targets.cols != 1) throw ShapeError("cross_entropy targets: expected 1 column");
        for (double y : targets.data) {
            if (y != std::floor(y) || y < 0.0 || y >= static_cast<double>(out))
                throw ShapeError("cross_entropy targets: class ids must be integers in [0, " +
                                 std::to_string(out) + ")");
        }
    }
}

}  // namespace

int param_count(const MlpSpec& spec) {
    int n = 0;
    for (size_t l = 0; l + 1 < spec.layer_widths.size(); ++l) {
        const int in = spec.layer_widths[l];
        const int out = spec.layer_widths[l + 1];
        n += in * out + (spec.use_bias ? out : 0);
    }
    return n;
}

diffcore::ParamVector init_params(const MlpSpec& spec) {
    validate_spec(spec);
    diffcore::ParamVector p;
    p.reserve(static_cast<size_t>(param_count(spec)));
    std::mt19937_64 rng(spec.init_seed);
    for (size_t l = 0; l + 1 < spec.layer_widths.size(); ++l) {
        const int in = spec.layer_widths[l];
        const int out = spec.layer_widths[l + 1];
        const double s = spec.init_scale / std::sqrt(static_cast<double>(in));
        const int n = in * out + (spec.use_bias ? out : 0);
        if (s == 0.0) {
            p.insert(p.end(), static_cast<size_t>(n), 0.0);
        } else {
            std::uniform_real_distribution<double> u(-s, s);
            for (int i = 0; i < n; ++i) p.push_back(u(rng));
        }
    }
    return p;
}

Var forward_graph(Tape& tape, const MlpSpec& spec, Var params, const Mat& inputs) {
    validate_spec(spec);
    if (tape.value(params).size() != static_cast<size_t>(param_count(spec)))
        throw ShapeError("forward_graph: parameter vector has wrong dimension");
    const int k = inputs.rows;
    Var x = tape.constant(inputs);
    Var ones_col = tape.constant(Mat::ones(k, 1));
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
            z = tape.add(z, tape.matmul(ones_col, b));
        }
        const bool last = l + 2 == spec.layer_widths.size();
        if (!last)
            z = spec.activation == Activation::tanh ? tape.tanh(z) : tape.relu(z);
        x = z;
    }
    return x;
}

Var instance_loss_graph(Tape& tape, const Model& model, Var params, const Mat& inputs,
                        const Mat& targets) {
    validate_targets(model, inputs, targets);
    Var pred = forward_graph(tape, model.spec, params, inputs);
    const int k = inputs.rows;
    const int out = model.spec.layer_widths.back();
    if (model.loss == LossKind::mse) {
        Var diff = tape.sub(pred, tape.constant(targets));
        Var sq = tape.square(diff);
        // Row mean over output dims via matmul with a constant column.
        Var avg = tape.constant(Mat::full(out, 1, 1.0 / static_cast<double>(out)));
        return tape.matmul(sq, avg);
    }
    // Cross entropy via log-sum-exp with a constant per-row shift for
    // stability; the shift cancels in the gradient.
    Mat shift(k, out);
    Mat shift_col(k, 1);
    const Mat& logits = tape.value(pred);
    for (int i = 0; i < k; ++i) {
        double mx = logits.at(i, 0);
        for (int j = 1; j < out; ++j) mx = std::max(mx, logits.at(i, j));
        shift_col.at(i, 0) = mx;
        for (int j = 0; j < out; ++j) shift.at(i, j) = mx;
    }
    Mat onehot(k, out);
    for (int i = 0; i < k; ++i) onehot.at(i, static_cast<int>(targets.at(i, 0))) = 1.0;
    Var shifted = tape.sub(pred, tape.constant(shift));
    Var sum_exp = tape.matmul(tape.exp(shifted), tape.constant(Mat::ones(out, 1)));
    Var lse = tape.add(tape.log(sum_exp), tape.constant(shift_col));
    Var picked = tape.matmul(tape.mul(pred, tape.constant(onehot)), tape.constant(Mat::ones(out, 1)));
    return tape.sub(lse, picked);
}

Var loss_graph(Tape& tape, const Model& model, Var params, const Mat& inputs,
               const Mat& targets) {
    return tape.mean(instance_loss_graph(tape, model, params, inputs, targets));
}

double model_loss(const Model& model, const diffcore::ParamVector& p, const Mat& inputs,
                  const Mat& targets) {
    Tape tape;
    Var params = tape.leaf(Mat(static_cast<int>(p.size()), 1, p));
    Var loss = loss_graph(tape, model, params, inputs, targets);
    return tape.value(loss).data[0];
}

std::vector<double> instance_losses(const Model& model, const diffcore::ParamVector& p,
                                    const Mat& inputs, const Mat& targets) {
    Tape tape;
    Var params = tape.leaf(Mat(static_cast<int>(p.size()), 1, p));
    Var losses = instance_loss_graph(tape, model, params, inputs, targets);
    const MatBuffer& out = tape.value(losses).data;
    return std::vector<double>(out.begin(), out.end());
}

Mat forward_values(const MlpSpec& spec, const diffcore::ParamVector& p, const Mat& inputs) {
    validate_spec(spec);
    Mat x = inputs;
    size_t offset = 0;
    for (size_t l = 0; l + 1 < spec.layer_widths.size(); ++l) {
        const int in = spec.layer_widths[l];
        const int out = spec.layer_widths[l + 1];
        Mat z(x.rows, out);
        for (int i = 0; i < x.rows; ++i)
            for (int t = 0; t < in; ++t) {
                const double xv = x.at(i, t);
                for (int j = 0; j < out; ++j) z.at(i, j) += xv * p[offset + t * out + j];
            }
        offset += static_cast<size_t>(in) * out;
        if (spec.use_bias) {
            for (int i = 0; i < z.rows; ++i)
                for (int j = 0; j < out; ++j) z.at(i, j) += p[offset + j];
            offset += out;
        }
        const bool last = l + 2 == spec.layer_widths.size();
        if (!last) {
            for (double& v : z.data)
                v = spec.activation == Activation::tanh ? std::tanh(v) : std::max(0.0, v);
        }
        x = std::move(z);
    }
    return x;
}

Mat softmax_probs(const MlpSpec& spec, const diffcore::ParamVector& p, const Mat& inputs) {
    Mat z = forward_values(spec, p, inputs);
    for (int i = 0; i < z.rows; ++i) {
        double mx = z.at(i, 0);
        for (int j = 1; j < z.cols; ++j) mx = std::max(mx, z.at(i, j));
        double s = 0.0;
        for (int j = 0; j < z.cols; ++j) {
            z.at(i, j) = std::exp(z.at(i, j) - mx);
            s += z.at(i, j);
        }
        for (int j = 0; j < z.cols; ++j) z.at(i, j) /= s;
    }
    return z;
}

double accuracy(const MlpSpec& spec, const diffcore::ParamVector& p, const Mat& inputs,
                const Mat& targets) {
    Mat z = forward_values(spec, p, inputs);
    int correct = 0;
    for (int i = 0; i < z.rows; ++i) {
        int arg = 0;
        for (int j = 1; j < z.cols; ++j)
            if (z.at(i, j) > z.at(i, arg)) arg = j;
        if (arg == static_cast<int>(targets.at(i, 0))) ++correct;
    }
    return z.rows == 0 ? 0.0 : static_cast<double>(correct) / z.rows;
}

}  // namespace rwmeta::models

#include "rwmeta/diffcore.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace rwmeta::diffcore {

namespace {

const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::Constant: return "constant";
        case OpKind::Leaf: return "leaf";
        case OpKind::Add: return "add";
        case OpKind::Mul: return "mul";
        case OpKind::Scale: return "scale";
        case OpKind::MatMul: return "matmul";
        case OpKind::Transpose: return "transpose";
        case OpKind::Slice: return "slice";
        case OpKind::Embed: return "embed";
        case OpKind::Broadcast: return "broadcast";
        case OpKind::Sum: return "sum";
        case OpKind::Tanh: return "tanh";
        case OpKind::Relu: return "relu";
        case OpKind::ReluGrad: return "relu_grad";
        case OpKind::Exp: return "exp";
        case OpKind::Log: return "log";
        case OpKind::Recip: return "recip";
    }
    return "?";
}

}  // namespace

Var Tape::push(Node n) {
    if (n.op != OpKind::Constant && n.op != OpKind::Leaf) compute(n);
    int id = static_cast<int>(nodes_.size());
    check_finite(n, id);
    nodes_.push_back(std::move(n));
    return Var{id};
}

void Tape::check_finite(const Node& n, int id) const {
    if (!n.value.all_finite())
        throw NonFiniteValue("non-finite value at node " + std::to_string(id) + " (" +
                             op_name(n.op) + ")");
}

Var Tape::constant(Mat v) {
    Node n;
    n.op = OpKind::Constant;
    n.value = std::move(v);
    return push(std::move(n));
}

Var Tape::leaf(Mat v) {
    Node n;
    n.op = OpKind::Leaf;
    n.value = std::move(v);
    return push(std::move(n));
}

void Tape::set_leaf(Var v, Mat value) {
    Node& n = nodes_[v.id];
    if (n.op != OpKind::Leaf) throw ShapeError("set_leaf: node is not a leaf");
    if (!n.value.same_shape(value)) throw ShapeError("set_leaf: shape mismatch");
    n.value = std::move(value);
    check_finite(n, v.id);
}

Var Tape::add(Var a, Var b) {
    if (!value(a).same_shape(value(b))) throw ShapeError("add: shape mismatch");
    Node n;
    n.op = OpKind::Add;
    n.a = a.id;
    n.b = b.id;
    return push(std::move(n));
}

Var Tape::sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

Var Tape::mul(Var a, Var b) {
    if (!value(a).same_shape(value(b))) throw ShapeError("mul: shape mismatch");
    Node n;
    n.op = OpKind::Mul;
    n.a = a.id;
    n.b = b.id;
    return push(std::move(n));
}

Var Tape::scale(Var a, double c) {
    Node n;
    n.op = OpKind::Scale;
    n.a = a.id;
    n.scale = c;
    return push(std::move(n));
}

Var Tape::matmul(Var a, Var b) {
    if (value(a).cols != value(b).rows) throw ShapeError("matmul: inner dims differ");
    Node n;
    n.op = OpKind::MatMul;
    n.a = a.id;
    n.b = b.id;
    return push(std::move(n));
}

Var Tape::transpose(Var a) {
    Node n;
    n.op = OpKind::Transpose;
    n.a = a.id;
    return push(std::move(n));
}

Var Tape::slice(Var a, int offset, int rows, int cols) {
    if (offset < 0 || static_cast<size_t>(offset) + static_cast<size_t>(rows) * cols >
                          value(a).size())
        throw ShapeError("slice: range out of bounds");
    Node n;
    n.op = OpKind::Slice;
    n.a = a.id;
    n.offset = offset;
    n.value = Mat::uninit(rows, cols);
    return push(std::move(n));
}

Var Tape::broadcast(Var a, int rows, int cols) {
    if (value(a).size() != 1) throw ShapeError("broadcast: source must be 1x1");
    Node n;
    n.op = OpKind::Broadcast;
    n.a = a.id;
    n.value = Mat::uninit(rows, cols);
    return push(std::move(n));
}

Var Tape::sum(Var a) {
    Node n;
    n.op = OpKind::Sum;
    n.a = a.id;
    return push(std::move(n));
}

Var Tape::mean(Var a) {
    const double inv = 1.0 / static_cast<double>(value(a).size());
    return scale(sum(a), inv);
}

Var Tape::tanh(Var a) {
    Node n;
    n.op = OpKind::Tanh;
    n.a = a.id;
    return push(std::move(n));
}

Var Tape::relu(Var a) {
    Node n;
    n.op = OpKind::Relu;
    n.a = a.id;
    return push(std::move(n));
}

Var Tape::exp(Var a) {
    Node n;
    n.op = OpKind::Exp;
    n.a = a.id;
    return push(std::move(n));
}

Var Tape::log(Var a) {
    Node n;
    n.op = OpKind::Log;
    n.a = a.id;
    return push(std::move(n));
}

Var Tape::recip(Var a) {
    Node n;
    n.op = OpKind::Recip;
    n.a = a.id;
    return push(std::move(n));
}

Var Tape::square(Var a) { return mul(a, a); }

Var Tape::dot(Var a, Var b) { return sum(mul(a, b)); }

void Tape::compute(Node& n) const {
    const Mat* A = n.a >= 0 ? &nodes_[n.a].value : nullptr;
    const Mat* B = n.b >= 0 ? &nodes_[n.b].value : nullptr;
    // Output buffers are recycled across recomputations; ensure_shape only
    // allocates the first time.
    auto ensure_shape = [&n](int r, int c) {
        if (n.value.rows != r || n.value.cols != c ||
            n.value.data.size() != static_cast<size_t>(r) * c) {
            n.value.rows = r;
            n.value.cols = c;
            n.value.data.resize(static_cast<size_t>(r) * c);
        }
    };
    switch (n.op) {
        case OpKind::Constant:
        case OpKind::Leaf:
            break;
        case OpKind::Add: {
            ensure_shape(A->rows, A->cols);
            const double* a = A->data.data();
            const double* b = B->data.data();
            double* o = n.value.data.data();
            for (size_t i = 0; i < n.value.data.size(); ++i) o[i] = a[i] + b[i];
            break;
        }
        case OpKind::Mul: {
            ensure_shape(A->rows, A->cols);
            const double* a = A->data.data();
            const double* b = B->data.data();
            double* o = n.value.data.data();
            for (size_t i = 0; i < n.value.data.size(); ++i) o[i] = a[i] * b[i];
            break;
        }
        case OpKind::Scale: {
            ensure_shape(A->rows, A->cols);
            const double* a = A->data.data();
            double* o = n.value.data.data();
            for (size_t i = 0; i < n.value.data.size(); ++i) o[i] = a[i] * n.scale;
            break;
        }
        case OpKind::MatMul: {
            const int r = A->rows, k = A->cols, c = B->cols;
            ensure_shape(r, c);
            std::fill(n.value.data.begin(), n.value.data.end(), 0.0);
            for (int i = 0; i < r; ++i) {
                const double* arow = A->data.data() + static_cast<size_t>(i) * k;
                double* orow = n.value.data.data() + static_cast<size_t>(i) * c;
                for (int t = 0; t < k; ++t) {
                    const double av = arow[t];
                    const double* brow = B->data.data() + static_cast<size_t>(t) * c;
                    for (int j = 0; j < c; ++j) orow[j] += av * brow[j];
                }
            }
            break;
        }
        case OpKind::Transpose: {
            ensure_shape(A->cols, A->rows);
            for (int i = 0; i < A->rows; ++i)
                for (int j = 0; j < A->cols; ++j) n.value.at(j, i) = A->at(i, j);
            break;
        }
        case OpKind::Slice: {
            const double* a = A->data.data() + n.offset;
            double* o = n.value.data.data();
            for (size_t i = 0; i < n.value.data.size(); ++i) o[i] = a[i];
            break;
        }
        case OpKind::Embed: {
            std::fill(n.value.data.begin(), n.value.data.end(), 0.0);
            double* o = n.value.data.data() + n.offset;
            const double* a = A->data.data();
            for (size_t i = 0; i < A->data.size(); ++i) o[i] = a[i];
            break;
        }
        case OpKind::Broadcast: {
            std::fill(n.value.data.begin(), n.value.data.end(), A->data[0]);
            break;
        }
        case OpKind::Sum: {
            ensure_shape(1, 1);
            double s = 0.0;
            for (double x : A->data) s += x;
            n.value.data[0] = s;
            break;
        }
        case OpKind::Tanh: {
            ensure_shape(A->rows, A->cols);
            const double* a = A->data.data();
            double* o = n.value.data.data();
            for (size_t i = 0; i < n.value.data.size(); ++i) o[i] = std::tanh(a[i]);
            break;
        }
        case OpKind::Relu: {
            ensure_shape(A->rows, A->cols);
            const double* a = A->data.data();
            double* o = n.value.data.data();
            for (size_t i = 0; i < n.value.data.size(); ++i) o[i] = a[i] > 0.0 ? a[i] : 0.0;
            break;
        }
        case OpKind::ReluGrad: {
            ensure_shape(B->rows, B->cols);
            const double* a = A->data.data();
            const double* b = B->data.data();
            double* o = n.value.data.data();
            for (size_t i = 0; i < n.value.data.size(); ++i) o[i] = a[i] > 0.0 ? b[i] : 0.0;
            break;
        }
        case OpKind::Exp: {
            ensure_shape(A->rows, A->cols);
            const double* a = A->data.data();
            double* o = n.value.data.data();
            for (size_t i = 0; i < n.value.data.size(); ++i) o[i] = std::exp(a[i]);
            break;
        }
        case OpKind::Log: {
            ensure_shape(A->rows, A->cols);
            const double* a = A->data.data();
            double* o = n.value.data.data();
            for (size_t i = 0; i < n.value.data.size(); ++i) o[i] = std::log(a[i]);
            break;
        }
        case OpKind::Recip: {
            ensure_shape(A->rows, A->cols);
            const double* a = A->data.data();
            double* o = n.value.data.data();
            for (size_t i = 0; i < n.value.data.size(); ++i) o[i] = 1.0 / a[i];
            break;
        }
    }
}

std::vector<Var> Tape::backward(Var output, std::span<const Var> wrt,
                                std::span<const Var> barriers) {
    if (value(output).size() != 1) throw ShapeError("backward: output must be scalar");

    // adj[i] holds the node id of the accumulated adjoint of node i, or -1.
    std::vector<int> adj(static_cast<size_t>(output.id) + 1, -1);
    adj[output.id] = constant(Mat::scalar(1.0)).id;

    // Only nodes from which a requested leaf is reachable need adjoints;
    // everything else is pruned from the walk.
    std::vector<char> reach(static_cast<size_t>(output.id) + 1, 0);
    for (const Var& v : wrt)
        if (v.valid() && v.id <= output.id) reach[v.id] = 1;
    for (int i = 0; i <= output.id; ++i) {
        if (reach[i]) continue;
        const Node& n = nodes_[i];
        reach[i] = (n.a >= 0 && reach[n.a]) || (n.b >= 0 && reach[n.b]);
    }

    auto accumulate = [&](int target, Var contrib) {
        if (!reach[target]) return;
        if (adj[target] < 0)
            adj[target] = contrib.id;
        else
            adj[target] = add(Var{adj[target]}, contrib).id;
    };

    // Metadata is copied out per node: push() may reallocate nodes_.
    struct Meta {
        OpKind op;
        int a, b, offset, rows, cols;
        double scale;
    };

    auto want = [&](int target) { return target >= 0 && reach[target] != 0; };

    for (int i = output.id; i >= 0; --i) {
        if (adj[i] < 0 || !reach[i]) continue;
        bool blocked = false;
        for (const Var& b : barriers) blocked |= b.id == i;
        if (blocked) continue;
        const Node& nref = nodes_[i];
        const Meta node{nref.op,     nref.a,          nref.b,        nref.offset,
                        nref.value.rows, nref.value.cols, nref.scale};
        const Var g{adj[i]};
        switch (node.op) {
            case OpKind::Constant:
            case OpKind::Leaf:
                break;
            case OpKind::Add:
                if (want(node.a)) accumulate(node.a, g);
                if (want(node.b)) accumulate(node.b, g);
                break;
            case OpKind::Mul:
                if (want(node.a)) accumulate(node.a, mul(g, Var{node.b}));
                if (want(node.b)) accumulate(node.b, mul(g, Var{node.a}));
                break;
            case OpKind::Scale:
                if (want(node.a)) accumulate(node.a, scale(g, node.scale));
                break;
            case OpKind::MatMul:
                if (want(node.a)) accumulate(node.a, matmul(g, transpose(Var{node.b})));
                if (want(node.b)) accumulate(node.b, matmul(transpose(Var{node.a}), g));
                break;
            case OpKind::Transpose:
                if (want(node.a)) accumulate(node.a, transpose(g));
                break;
            case OpKind::Slice: {
                if (!want(node.a)) break;
                Node e;
                e.op = OpKind::Embed;
                e.a = g.id;
                e.offset = node.offset;
                e.value = Mat::uninit(nodes_[node.a].value.rows, nodes_[node.a].value.cols);
                accumulate(node.a, push(std::move(e)));
                break;
            }
            case OpKind::Embed:
                if (want(node.a))
                    accumulate(node.a, slice(g, node.offset, nodes_[node.a].value.rows,
                                             nodes_[node.a].value.cols));
                break;
            case OpKind::Broadcast:
                if (want(node.a)) accumulate(node.a, sum(g));
                break;
            case OpKind::Sum:
                if (want(node.a))
                    accumulate(node.a,
                               broadcast(g, nodes_[node.a].value.rows, nodes_[node.a].value.cols));
                break;
            case OpKind::Tanh: {
                if (!want(node.a)) break;
                // d tanh = 1 - tanh^2, built from the tanh node so second
                // derivatives flow through it.
                Var y{i};
                Var one = constant(Mat::ones(node.rows, node.cols));
                Var d = add(one, scale(square(y), -1.0));
                accumulate(node.a, mul(g, d));
                break;
            }
            case OpKind::Relu: {
                if (!want(node.a)) break;
                Node rg;
                rg.op = OpKind::ReluGrad;
                rg.a = node.a;
                rg.b = g.id;
                accumulate(node.a, push(std::move(rg)));
                break;
            }
            case OpKind::ReluGrad: {
                // Mask is constant by convention (relu'' = 0), so only the
                // upstream operand receives a contribution.
                if (!want(node.b)) break;
                Node rg;
                rg.op = OpKind::ReluGrad;
                rg.a = node.a;
                rg.b = g.id;
                accumulate(node.b, push(std::move(rg)));
                break;
            }
            case OpKind::Exp:
                if (want(node.a)) accumulate(node.a, mul(g, Var{i}));
                break;
            case OpKind::Log:
                if (want(node.a)) accumulate(node.a, mul(g, recip(Var{node.a})));
                break;
            case OpKind::Recip: {
                if (!want(node.a)) break;
                Var r{i};
                accumulate(node.a, scale(mul(g, square(r)), -1.0));
                break;
            }
        }
    }

    std::vector<Var> out;
    out.reserve(wrt.size());
    for (const Var& v : wrt)
        out.push_back(v.id <= output.id && adj[v.id] >= 0 ? Var{adj[v.id]} : Var{});
    return out;
}

void Tape::recompute() {
    for (size_t i = 0; i < nodes_.size(); ++i) {
        compute(nodes_[i]);
        check_finite(nodes_[i], static_cast<int>(i));
    }
}

ParamVector Tape::adjoint_values(Var adj, int dim) const {
    if (!adj.valid()) return ParamVector(static_cast<size_t>(dim), 0.0);
    const Mat& m = value(adj);
    if (m.size() != static_cast<size_t>(dim)) throw ShapeError("adjoint_values: dim mismatch");
    return ParamVector(m.data.begin(), m.data.end());
}

Evaluation evaluate(const DiffFn& f, const ParamVector& p) {
    Evaluation ev;
    ev.param = ev.tape.leaf(Mat(static_cast<int>(p.size()), 1, p));
    ev.output = f(ev.tape, ev.param);
    if (ev.tape.value(ev.output).size() != 1)
        throw ShapeError("evaluate: function did not produce a scalar");
    ev.value = ev.tape.value(ev.output).data[0];
    return ev;
}

ParamVector gradient(const DiffFn& f, const ParamVector& p) {
    Evaluation ev = evaluate(f, p);
    const Var wrt[] = {ev.param};
    auto adj = ev.tape.backward(ev.output, wrt);
    return ev.tape.adjoint_values(adj[0], static_cast<int>(p.size()));
}

ParamVector hvp(const DiffFn& f, const ParamVector& p, const ParamVector& v) {
    if (v.size() != p.size()) throw ShapeError("hvp: dim(v) != dim(p)");
    Evaluation ev = evaluate(f, p);
    const Var wrt[] = {ev.param};
    auto adj = ev.tape.backward(ev.output, wrt);
    if (!adj[0].valid()) return ParamVector(p.size(), 0.0);
    Var vconst = ev.tape.constant(Mat(static_cast<int>(v.size()), 1, v));
    Var inner = ev.tape.dot(adj[0], vconst);
    auto adj2 = ev.tape.backward(inner, wrt);
    return ev.tape.adjoint_values(adj2[0], static_cast<int>(p.size()));
}

}  // namespace rwmeta::diffcore

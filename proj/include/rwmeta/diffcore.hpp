#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "rwmeta/mat.hpp"

namespace rwmeta::diffcore {

using ParamVector = std::vector<double>;

/// Handle to a node on a Tape.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

enum class OpKind : std::uint8_t {
    Constant,   // fixed value, no derivative
    Leaf,       // differentiable input
    Add,        // a + b, same shape
    Mul,        // a .* b, same shape
    Scale,      // a * c, immediate constant c
    MatMul,     // a (r x k) * b (k x c)
    Transpose,  // a'
    Slice,      // reshape of a contiguous range of flattened a
    Embed,      // inverse of Slice: place block into zeros of given shape
    Broadcast,  // 1x1 -> r x c
    Sum,        // full reduction -> 1x1
    Tanh,
    Relu,
    ReluGrad,   // b .* (a > 0); derivative w.r.t. a defined as zero
    Exp,
    Log,
    Recip,
};

/// One recorded primitive operation. Parents always precede the node.
struct Node {
    OpKind op = OpKind::Constant;
    int a = -1;
    int b = -1;
    double scale = 0.0;  // immediate for Scale
    int offset = 0;      // flat offset for Slice/Embed
    Mat value;
};

/// Record of a forward computation, extendable by backward passes so that the
/// recorded gradient computation can itself be differentiated.
///
/// A Tape is confined to one thread. Recording an op computes its value
/// eagerly and rejects non-finite results.
class Tape {
public:
    Var constant(Mat v);
    Var leaf(Mat v);

    /// Overwrites a leaf value (used for replay). The node must be a Leaf.
    void set_leaf(Var v, Mat value);

    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double c);
    Var matmul(Var a, Var b);
    Var transpose(Var a);
    Var slice(Var a, int offset, int rows, int cols);
    Var broadcast(Var a, int rows, int cols);
    Var sum(Var a);
    Var mean(Var a);
    Var tanh(Var a);
    Var relu(Var a);
    Var exp(Var a);
    Var log(Var a);
    Var recip(Var a);
    Var square(Var a);
    Var dot(Var a, Var b);

    const Mat& value(Var v) const { return nodes_[v.id].value; }
    size_t size() const { return nodes_.size(); }
    OpKind op(Var v) const { return nodes_[v.id].op; }

    /// Graph-extending reverse pass from a scalar output. Returns one adjoint
    /// Var per requested node; an invalid Var means the output does not depend
    /// on that node (zero gradient). Barrier nodes accumulate their adjoint
    /// but do not propagate into their ancestry.
    std::vector<Var> backward(Var output, std::span<const Var> wrt,
                              std::span<const Var> barriers = {});

    /// Recomputes every node value in recording order from current leaf and
    /// constant values. Re-running on unchanged inputs reproduces values
    /// bit-for-bit.
    void recompute();

    /// Adjoint values of a leaf flattened to a vector; zeros if `adj` invalid.
    ParamVector adjoint_values(Var adj, int dim) const;

private:
    Var push(Node n);
    void compute(Node& n) const;
    void check_finite(const Node& n, int id) const;

    std::vector<Node> nodes_;
};

/// A differentiable scalar function of a flat parameter vector. The parameter
/// enters the graph as a single dim x 1 leaf; models carve it up with slice().
using DiffFn = std::function<Var(Tape&, Var)>;

struct Evaluation {
    double value = 0.0;
    Tape tape;
    Var output;
    Var param;
};

/// Runs f on p, returning the scalar value together with the computation
/// record needed for differentiation.
Evaluation evaluate(const DiffFn& f, const ParamVector& p);

/// Reverse-mode gradient of f at p.
ParamVector gradient(const DiffFn& f, const ParamVector& p);

/// Hessian-vector product (d2f/dp2) * v, computed by differentiating the
/// inner product <gradient(f, p), v> with respect to p (reverse-over-reverse).
ParamVector hvp(const DiffFn& f, const ParamVector& p, const ParamVector& v);

}  // namespace rwmeta::diffcore

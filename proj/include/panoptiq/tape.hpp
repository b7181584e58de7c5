#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "panoptiq/tensor.hpp"

namespace panoptiq {

// Handle into a Tape. Valid only for the tape that produced it.
struct Var {
    std::uint32_t id = UINT32_MAX;
    bool valid() const { return id != UINT32_MAX; }
};

// Reverse-mode tape over dense double tensors. Each tape records one forward
// computation; backward() walks it once and accumulates adjoints for every
// node, leaves included. A tape is confined to a single thread; independent
// tapes may run concurrently.
class Tape {
public:
    // Leaves. input() marks a differentiable leaf and registers it in the
    // parameter list; constant() is a plain value whose gradient is ignored.
    Var input(Tensor t);
    Var constant(Tensor t);

    // Elementwise binary (shapes must match).
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var div(Var a, Var b);

    // y = scale * x + shift, elementwise.
    Var affine(Var x, double scale, double shift);

    // Elementwise unary.
    Var relu(Var x);
    Var sigmoid(Var x);
    Var log(Var x);   // rejects non-positive values
    Var exp(Var x);
    Var powc(Var x, double c);  // x^c for x > 0
    Var clamp(Var x, double lo, double hi);

    // Row-vector broadcast: b is 1xC, applied to every row of x (RxC).
    Var add_rowvec(Var x, Var b);
    Var mul_rowvec(Var x, Var g);

    // Structure.
    Var matmul(Var a, Var b);
    Var transpose(Var x);
    Var concat_rows(Var a, Var b);
    Var concat_cols(Var a, Var b);
    Var slice_cols(Var x, std::size_t start, std::size_t count);
    Var gather_rows(Var x, std::vector<std::size_t> index);
    // y[i,0] = x[i, index[i]]
    Var gather_col_per_row(Var x, std::vector<std::size_t> index);
    // mask is a fixed selector: y = mask != 0 ? a : b
    Var where(Tensor mask, Var a, Var b);

    // Row-wise softmax with max subtraction.
    Var row_softmax(Var x);
    // Row-wise normalization to zero mean / unit variance, eps 1e-5 inside
    // the square root. Affine rescale is applied separately via mul_rowvec /
    // add_rowvec.
    Var layer_norm(Var x);

    // x*w + bias row broadcast.
    Var linear(Var x, Var w, Var b);

    // Reductions. axis 0 collapses rows (result 1xC), axis 1 collapses
    // columns (result Rx1).
    Var sum_all(Var x);
    Var mean_all(Var x);
    Var sum_axis(Var x, int axis);
    Var mean_axis(Var x, int axis);

    const Tensor& val(Var x) const;
    std::size_t node_count() const { return nodes_.size(); }
    const std::vector<Var>& params() const { return params_; }

    // Accumulates adjoints of every node with respect to the selected scalar
    // output. Rejects non-scalar selectors.
    void backward(Var scalar_output);
    const Tensor& grad(Var x) const;

    // Recomputes every node's value from the leaves in recorded order.
    void replay();

    // Smallest |input| over all relu nodes; infinity when none. Used by
    // finite-difference harnesses to confirm the point sits away from kinks.
    double min_relu_margin() const;

private:
    enum class Op : std::uint8_t {
        Leaf,
        Add,
        Sub,
        Mul,
        Div,
        Affine,
        Relu,
        Sigmoid,
        Log,
        Exp,
        PowC,
        Clamp,
        AddRowVec,
        MulRowVec,
        MatMul,
        Transpose,
        ConcatRows,
        ConcatCols,
        SliceCols,
        GatherRows,
        GatherColPerRow,
        Where,
        RowSoftmax,
        LayerNorm,
        SumAll,
        MeanAll,
        SumAxis,
        MeanAxis,
    };

    struct Node {
        Op op = Op::Leaf;
        std::uint32_t a = UINT32_MAX;
        std::uint32_t b = UINT32_MAX;
        Tensor value;
        double c0 = 0.0;  // affine scale / clamp lo / pow exponent
        double c1 = 0.0;  // affine shift / clamp hi
        int axis = -1;
        std::vector<std::size_t> index;  // gather targets
        Tensor aux;                      // where-mask
    };

    Var push(Node n);
    const Node& node(Var x) const;
    void compute(Node& n) const;
    static const char* op_name(Op op);

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    std::vector<Var> params_;
    bool grads_valid_ = false;
};

// A graph description: builds a computation on the tape from ordered inputs
// and returns the output variable.
using GraphFn = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::size_t coords_checked = 0;
};

// Compares analytic gradients of a scalar-valued graph against central
// differences at the given point. Relative error per coordinate is
// |analytic - numeric| / max(1, |numeric|).
GradCheckReport grad_check(const GraphFn& graph, const std::vector<Tensor>& point, double step);

}  // namespace panoptiq

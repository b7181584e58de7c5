#include "panoptiq/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace panoptiq {

namespace {

constexpr double kLayerNormEps = 1e-5;

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

void matmul_accumulate(const Tensor& a, const Tensor& b, Tensor& out) {
    const std::size_t r = a.rows(), k = a.cols(), c = b.cols();
    const double* pa = a.v.data();
    const double* pb = b.v.data();
    double* po = out.v.data();
    for (std::size_t i = 0; i < r; ++i) {
        const double* arow = pa + i * k;
        double* orow = po + i * c;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            if (av == 0.0) continue;
            const double* brow = pb + kk * c;
            for (std::size_t j = 0; j < c; ++j) orow[j] += av * brow[j];
        }
    }
}

Tensor transposed(const Tensor& x) {
    Tensor t({x.cols(), x.rows()});
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) t.at(j, i) = x.at(i, j);
    return t;
}

}  // namespace

const char* Tape::op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Div: return "div";
        case Op::Affine: return "affine";
        case Op::Relu: return "relu";
        case Op::Sigmoid: return "sigmoid";
        case Op::Log: return "log";
        case Op::Exp: return "exp";
        case Op::PowC: return "powc";
        case Op::Clamp: return "clamp";
        case Op::AddRowVec: return "add_rowvec";
        case Op::MulRowVec: return "mul_rowvec";
        case Op::MatMul: return "matmul";
        case Op::Transpose: return "transpose";
        case Op::ConcatRows: return "concat_rows";
        case Op::ConcatCols: return "concat_cols";
        case Op::SliceCols: return "slice_cols";
        case Op::GatherRows: return "gather_rows";
        case Op::GatherColPerRow: return "gather_col_per_row";
        case Op::Where: return "where";
        case Op::RowSoftmax: return "row_softmax";
        case Op::LayerNorm: return "layer_norm";
        case Op::SumAll: return "sum_all";
        case Op::MeanAll: return "mean_all";
        case Op::SumAxis: return "sum_axis";
        case Op::MeanAxis: return "mean_axis";
    }
    return "?";
}

Var Tape::push(Node n) {
    grads_valid_ = false;
    compute(n);
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Tape::Node& Tape::node(Var x) const {
    if (!x.valid() || x.id >= nodes_.size()) throw std::logic_error("Tape: invalid var");
    return nodes_[x.id];
}

const Tensor& Tape::val(Var x) const { return node(x).value; }

Var Tape::input(Tensor t) {
    Node n;
    n.op = Op::Leaf;
    n.value = std::move(t);
    Var v = push(std::move(n));
    params_.push_back(v);
    return v;
}

Var Tape::constant(Tensor t) {
    Node n;
    n.op = Op::Leaf;
    n.value = std::move(t);
    return push(std::move(n));
}

#define PQ_BINARY(NAME, OPK)                                                              \
    Var Tape::NAME(Var a, Var b) {                                                       \
        require(node(a).value.same_shape(node(b).value),                                  \
                std::string(#NAME) + ": shape mismatch " + node(a).value.shape_str() +    \
                    " vs " + node(b).value.shape_str());                                  \
        Node n;                                                                           \
        n.op = OPK;                                                                       \
        n.a = a.id;                                                                       \
        n.b = b.id;                                                                       \
        return push(std::move(n));                                                        \
    }

PQ_BINARY(add, Op::Add)
PQ_BINARY(sub, Op::Sub)
PQ_BINARY(mul, Op::Mul)
PQ_BINARY(div, Op::Div)
#undef PQ_BINARY

Var Tape::affine(Var x, double scale, double shift) {
    Node n;
    n.op = Op::Affine;
    n.a = x.id;
    n.c0 = scale;
    n.c1 = shift;
    return push(std::move(n));
}

#define PQ_UNARY(NAME, OPK)          \
    Var Tape::NAME(Var x) {          \
        Node n;                      \
        n.op = OPK;                  \
        n.a = x.id;                  \
        return push(std::move(n));   \
    }

PQ_UNARY(relu, Op::Relu)
PQ_UNARY(sigmoid, Op::Sigmoid)
PQ_UNARY(exp, Op::Exp)
PQ_UNARY(row_softmax, Op::RowSoftmax)
PQ_UNARY(layer_norm, Op::LayerNorm)
PQ_UNARY(sum_all, Op::SumAll)
PQ_UNARY(mean_all, Op::MeanAll)
#undef PQ_UNARY

Var Tape::log(Var x) {
    for (double v : node(x).value.v)
        require(v > 0.0, "log: non-positive input");
    Node n;
    n.op = Op::Log;
    n.a = x.id;
    return push(std::move(n));
}

Var Tape::powc(Var x, double c) {
    Node n;
    n.op = Op::PowC;
    n.a = x.id;
    n.c0 = c;
    return push(std::move(n));
}

Var Tape::clamp(Var x, double lo, double hi) {
    require(lo < hi, "clamp: lo must be < hi");
    Node n;
    n.op = Op::Clamp;
    n.a = x.id;
    n.c0 = lo;
    n.c1 = hi;
    return push(std::move(n));
}

Var Tape::add_rowvec(Var x, Var b) {
    require(node(b).value.rows() == 1 && node(b).value.cols() == node(x).value.cols(),
            "add_rowvec: shape mismatch " + node(x).value.shape_str() + " vs " +
                node(b).value.shape_str());
    Node n;
    n.op = Op::AddRowVec;
    n.a = x.id;
    n.b = b.id;
    return push(std::move(n));
}

Var Tape::mul_rowvec(Var x, Var g) {
    require(node(g).value.rows() == 1 && node(g).value.cols() == node(x).value.cols(),
            "mul_rowvec: shape mismatch " + node(x).value.shape_str() + " vs " +
                node(g).value.shape_str());
    Node n;
    n.op = Op::MulRowVec;
    n.a = x.id;
    n.b = g.id;
    return push(std::move(n));
}

Var Tape::matmul(Var a, Var b) {
    require(node(a).value.cols() == node(b).value.rows(),
            "matmul: shape mismatch " + node(a).value.shape_str() + " vs " +
                node(b).value.shape_str());
    Node n;
    n.op = Op::MatMul;
    n.a = a.id;
    n.b = b.id;
    return push(std::move(n));
}

Var Tape::transpose(Var x) {
    Node n;
    n.op = Op::Transpose;
    n.a = x.id;
    return push(std::move(n));
}

Var Tape::concat_rows(Var a, Var b) {
    require(node(a).value.cols() == node(b).value.cols(),
            "concat_rows: column mismatch");
    Node n;
    n.op = Op::ConcatRows;
    n.a = a.id;
    n.b = b.id;
    return push(std::move(n));
}

Var Tape::concat_cols(Var a, Var b) {
    require(node(a).value.rows() == node(b).value.rows(),
            "concat_cols: row mismatch");
    Node n;
    n.op = Op::ConcatCols;
    n.a = a.id;
    n.b = b.id;
    return push(std::move(n));
}

Var Tape::slice_cols(Var x, std::size_t start, std::size_t count) {
    require(start + count <= node(x).value.cols(), "slice_cols: range out of bounds");
    Node n;
    n.op = Op::SliceCols;
    n.a = x.id;
    n.index = {start, count};
    return push(std::move(n));
}

Var Tape::gather_rows(Var x, std::vector<std::size_t> index) {
    for (std::size_t i : index)
        require(i < node(x).value.rows(), "gather_rows: index out of range");
    Node n;
    n.op = Op::GatherRows;
    n.a = x.id;
    n.index = std::move(index);
    return push(std::move(n));
}

Var Tape::gather_col_per_row(Var x, std::vector<std::size_t> index) {
    require(index.size() == node(x).value.rows(), "gather_col_per_row: index size mismatch");
    for (std::size_t j : index)
        require(j < node(x).value.cols(), "gather_col_per_row: index out of range");
    Node n;
    n.op = Op::GatherColPerRow;
    n.a = x.id;
    n.index = std::move(index);
    return push(std::move(n));
}

Var Tape::where(Tensor mask, Var a, Var b) {
    require(mask.same_shape(node(a).value) && mask.same_shape(node(b).value),
            "where: shape mismatch");
    Node n;
    n.op = Op::Where;
    n.a = a.id;
    n.b = b.id;
    n.aux = std::move(mask);
    return push(std::move(n));
}

Var Tape::linear(Var x, Var w, Var b) {
    return add_rowvec(matmul(x, w), b);
}

Var Tape::sum_axis(Var x, int axis) {
    require(axis == 0 || axis == 1, "sum_axis: axis must be 0 or 1");
    Node n;
    n.op = Op::SumAxis;
    n.a = x.id;
    n.axis = axis;
    return push(std::move(n));
}

Var Tape::mean_axis(Var x, int axis) {
    require(axis == 0 || axis == 1, "mean_axis: axis must be 0 or 1");
    Node n;
    n.op = Op::MeanAxis;
    n.a = x.id;
    n.axis = axis;
    return push(std::move(n));
}

void Tape::compute(Node& n) const {
    auto A = [&]() -> const Tensor& { return nodes_[n.a].value; };
    auto B = [&]() -> const Tensor& { return nodes_[n.b].value; };
    switch (n.op) {
        case Op::Leaf:
            break;
        case Op::Add: {
            n.value = A();
            for (std::size_t i = 0; i < n.value.size(); ++i) n.value.v[i] += B().v[i];
            break;
        }
        case Op::Sub: {
            n.value = A();
            for (std::size_t i = 0; i < n.value.size(); ++i) n.value.v[i] -= B().v[i];
            break;
        }
        case Op::Mul: {
            n.value = A();
            for (std::size_t i = 0; i < n.value.size(); ++i) n.value.v[i] *= B().v[i];
            break;
        }
        case Op::Div: {
            n.value = A();
            for (std::size_t i = 0; i < n.value.size(); ++i) n.value.v[i] /= B().v[i];
            break;
        }
        case Op::Affine: {
            n.value = A();
            for (double& x : n.value.v) x = n.c0 * x + n.c1;
            break;
        }
        case Op::Relu: {
            n.value = A();
            for (double& x : n.value.v) x = x > 0.0 ? x : 0.0;
            break;
        }
        case Op::Sigmoid: {
            n.value = A();
            for (double& x : n.value.v) x = 1.0 / (1.0 + std::exp(-x));
            break;
        }
        case Op::Log: {
            n.value = A();
            for (double& x : n.value.v) x = std::log(x);
            break;
        }
        case Op::Exp: {
            n.value = A();
            for (double& x : n.value.v) x = std::exp(x);
            break;
        }
        case Op::PowC: {
            n.value = A();
            for (double& x : n.value.v) x = std::pow(x, n.c0);
            break;
        }
        case Op::Clamp: {
            n.value = A();
            for (double& x : n.value.v) x = std::min(std::max(x, n.c0), n.c1);
            break;
        }
        case Op::AddRowVec: {
            const Tensor& x = A();
            const Tensor& b = B();
            n.value = x;
            for (std::size_t i = 0; i < x.rows(); ++i)
                for (std::size_t j = 0; j < x.cols(); ++j) n.value.at(i, j) += b.v[j];
            break;
        }
        case Op::MulRowVec: {
            const Tensor& x = A();
            const Tensor& g = B();
            n.value = x;
            for (std::size_t i = 0; i < x.rows(); ++i)
                for (std::size_t j = 0; j < x.cols(); ++j) n.value.at(i, j) *= g.v[j];
            break;
        }
        case Op::MatMul: {
            n.value = Tensor({A().rows(), B().cols()});
            matmul_accumulate(A(), B(), n.value);
            break;
        }
        case Op::Transpose: {
            n.value = transposed(A());
            break;
        }
        case Op::ConcatRows: {
            const Tensor& a = A();
            const Tensor& b = B();
            n.value = Tensor({a.rows() + b.rows(), a.cols()});
            std::copy(a.v.begin(), a.v.end(), n.value.v.begin());
            std::copy(b.v.begin(), b.v.end(), n.value.v.begin() + a.size());
            break;
        }
        case Op::ConcatCols: {
            const Tensor& a = A();
            const Tensor& b = B();
            n.value = Tensor({a.rows(), a.cols() + b.cols()});
            for (std::size_t i = 0; i < a.rows(); ++i) {
                for (std::size_t j = 0; j < a.cols(); ++j) n.value.at(i, j) = a.at(i, j);
                for (std::size_t j = 0; j < b.cols(); ++j)
                    n.value.at(i, a.cols() + j) = b.at(i, j);
            }
            break;
        }
        case Op::SliceCols: {
            const Tensor& x = A();
            const std::size_t start = n.index[0], count = n.index[1];
            n.value = Tensor({x.rows(), count});
            for (std::size_t i = 0; i < x.rows(); ++i)
                for (std::size_t j = 0; j < count; ++j)
                    n.value.at(i, j) = x.at(i, start + j);
            break;
        }
        case Op::GatherRows: {
            const Tensor& x = A();
            n.value = Tensor({n.index.size(), x.cols()});
            for (std::size_t i = 0; i < n.index.size(); ++i)
                for (std::size_t j = 0; j < x.cols(); ++j)
                    n.value.at(i, j) = x.at(n.index[i], j);
            break;
        }
        case Op::GatherColPerRow: {
            const Tensor& x = A();
            n.value = Tensor({x.rows(), 1});
            for (std::size_t i = 0; i < x.rows(); ++i) n.value.v[i] = x.at(i, n.index[i]);
            break;
        }
        case Op::Where: {
            const Tensor& a = A();
            const Tensor& b = B();
            n.value = a;
            for (std::size_t i = 0; i < a.size(); ++i)
                n.value.v[i] = n.aux.v[i] != 0.0 ? a.v[i] : b.v[i];
            break;
        }
        case Op::RowSoftmax: {
            const Tensor& x = A();
            n.value = x;
            for (std::size_t i = 0; i < x.rows(); ++i) {
                double mx = -HUGE_VAL;
                for (std::size_t j = 0; j < x.cols(); ++j) mx = std::max(mx, x.at(i, j));
                double sum = 0.0;
                for (std::size_t j = 0; j < x.cols(); ++j) {
                    const double e = std::exp(x.at(i, j) - mx);
                    n.value.at(i, j) = e;
                    sum += e;
                }
                for (std::size_t j = 0; j < x.cols(); ++j) n.value.at(i, j) /= sum;
            }
            break;
        }
        case Op::LayerNorm: {
            const Tensor& x = A();
            n.value = x;
            const double inv_c = 1.0 / static_cast<double>(x.cols());
            for (std::size_t i = 0; i < x.rows(); ++i) {
                double mean = 0.0;
                for (std::size_t j = 0; j < x.cols(); ++j) mean += x.at(i, j);
                mean *= inv_c;
                double var = 0.0;
                for (std::size_t j = 0; j < x.cols(); ++j) {
                    const double d = x.at(i, j) - mean;
                    var += d * d;
                }
                var *= inv_c;
                const double inv_std = 1.0 / std::sqrt(var + kLayerNormEps);
                for (std::size_t j = 0; j < x.cols(); ++j)
                    n.value.at(i, j) = (x.at(i, j) - mean) * inv_std;
            }
            break;
        }
        case Op::SumAll: {
            double s = 0.0;
            for (double x : A().v) s += x;
            n.value = Tensor::scalar(s);
            break;
        }
        case Op::MeanAll: {
            double s = 0.0;
            for (double x : A().v) s += x;
            n.value = Tensor::scalar(s / static_cast<double>(A().size()));
            break;
        }
        case Op::SumAxis:
        case Op::MeanAxis: {
            const Tensor& x = A();
            const bool mean = n.op == Op::MeanAxis;
            if (n.axis == 0) {
                n.value = Tensor({1, x.cols()});
                for (std::size_t i = 0; i < x.rows(); ++i)
                    for (std::size_t j = 0; j < x.cols(); ++j) n.value.v[j] += x.at(i, j);
                if (mean)
                    for (double& v : n.value.v) v /= static_cast<double>(x.rows());
            } else {
                n.value = Tensor({x.rows(), 1});
                for (std::size_t i = 0; i < x.rows(); ++i) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < x.cols(); ++j) s += x.at(i, j);
                    n.value.v[i] = mean ? s / static_cast<double>(x.cols()) : s;
                }
            }
            break;
        }
    }
}

void Tape::replay() {
    for (Node& n : nodes_) {
        if (n.op != Op::Leaf) compute(n);
    }
}

double Tape::min_relu_margin() const {
    double margin = std::numeric_limits<double>::infinity();
    for (const Node& n : nodes_) {
        if (n.op != Op::Relu) continue;
        for (double v : nodes_[n.a].value.v) margin = std::min(margin, std::abs(v));
    }
    return margin;
}

void Tape::backward(Var scalar_output) {
    const Node& out = node(scalar_output);
    if (out.value.size() != 1)
        throw std::invalid_argument("backward: selected output is not scalar");

    grads_.assign(nodes_.size(), Tensor());
    auto grad_of = [&](std::uint32_t id) -> Tensor& {
        if (grads_[id].size() == 0) grads_[id] = Tensor(nodes_[id].value.shape);
        return grads_[id];
    };
    grad_of(scalar_output.id).v[0] = 1.0;

    for (std::size_t ni = nodes_.size(); ni-- > 0;) {
        const Node& n = nodes_[ni];
        if (n.op == Op::Leaf || grads_[ni].size() == 0) continue;
        const Tensor& g = grads_[ni];
        switch (n.op) {
            case Op::Leaf:
                break;
            case Op::Add: {
                Tensor& ga = grad_of(n.a);
                Tensor& gb = grad_of(n.b);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    ga.v[i] += g.v[i];
                    gb.v[i] += g.v[i];
                }
                break;
            }
            case Op::Sub: {
                Tensor& ga = grad_of(n.a);
                Tensor& gb = grad_of(n.b);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    ga.v[i] += g.v[i];
                    gb.v[i] -= g.v[i];
                }
                break;
            }
            case Op::Mul: {
                const Tensor& a = nodes_[n.a].value;
                const Tensor& b = nodes_[n.b].value;
                Tensor& ga = grad_of(n.a);
                Tensor& gb = grad_of(n.b);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    ga.v[i] += g.v[i] * b.v[i];
                    gb.v[i] += g.v[i] * a.v[i];
                }
                break;
            }
            case Op::Div: {
                const Tensor& a = nodes_[n.a].value;
                const Tensor& b = nodes_[n.b].value;
                Tensor& ga = grad_of(n.a);
                Tensor& gb = grad_of(n.b);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    ga.v[i] += g.v[i] / b.v[i];
                    gb.v[i] -= g.v[i] * a.v[i] / (b.v[i] * b.v[i]);
                }
                break;
            }
            case Op::Affine: {
                Tensor& ga = grad_of(n.a);
                for (std::size_t i = 0; i < g.size(); ++i) ga.v[i] += n.c0 * g.v[i];
                break;
            }
            case Op::Relu: {
                const Tensor& a = nodes_[n.a].value;
                Tensor& ga = grad_of(n.a);
                for (std::size_t i = 0; i < g.size(); ++i)
                    if (a.v[i] > 0.0) ga.v[i] += g.v[i];
                break;
            }
            case Op::Sigmoid: {
                Tensor& ga = grad_of(n.a);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    const double s = n.value.v[i];
                    ga.v[i] += g.v[i] * s * (1.0 - s);
                }
                break;
            }
            case Op::Log: {
                const Tensor& a = nodes_[n.a].value;
                Tensor& ga = grad_of(n.a);
                for (std::size_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i] / a.v[i];
                break;
            }
            case Op::Exp: {
                Tensor& ga = grad_of(n.a);
                for (std::size_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i] * n.value.v[i];
                break;
            }
            case Op::PowC: {
                const Tensor& a = nodes_[n.a].value;
                Tensor& ga = grad_of(n.a);
                for (std::size_t i = 0; i < g.size(); ++i)
                    ga.v[i] += g.v[i] * n.c0 * std::pow(a.v[i], n.c0 - 1.0);
                break;
            }
            case Op::Clamp: {
                const Tensor& a = nodes_[n.a].value;
                Tensor& ga = grad_of(n.a);
                for (std::size_t i = 0; i < g.size(); ++i)
                    if (a.v[i] > n.c0 && a.v[i] < n.c1) ga.v[i] += g.v[i];
                break;
            }
            case Op::AddRowVec: {
                Tensor& ga = grad_of(n.a);
                Tensor& gb = grad_of(n.b);
                const std::size_t c = n.value.cols();
                for (std::size_t i = 0; i < n.value.rows(); ++i)
                    for (std::size_t j = 0; j < c; ++j) {
                        ga.at(i, j) += g.at(i, j);
                        gb.v[j] += g.at(i, j);
                    }
                break;
            }
            case Op::MulRowVec: {
                const Tensor& x = nodes_[n.a].value;
                const Tensor& w = nodes_[n.b].value;
                Tensor& ga = grad_of(n.a);
                Tensor& gb = grad_of(n.b);
                const std::size_t c = n.value.cols();
                for (std::size_t i = 0; i < n.value.rows(); ++i)
                    for (std::size_t j = 0; j < c; ++j) {
                        ga.at(i, j) += g.at(i, j) * w.v[j];
                        gb.v[j] += g.at(i, j) * x.at(i, j);
                    }
                break;
            }
            case Op::MatMul: {
                const Tensor& a = nodes_[n.a].value;
                const Tensor& b = nodes_[n.b].value;
                // dA += G * B^T ; dB += A^T * G
                Tensor bt = transposed(b);
                matmul_accumulate(g, bt, grad_of(n.a));
                Tensor at = transposed(a);
                matmul_accumulate(at, g, grad_of(n.b));
                break;
            }
            case Op::Transpose: {
                Tensor gt = transposed(g);
                Tensor& ga = grad_of(n.a);
                for (std::size_t i = 0; i < gt.size(); ++i) ga.v[i] += gt.v[i];
                break;
            }
            case Op::ConcatRows: {
                Tensor& ga = grad_of(n.a);
                Tensor& gb = grad_of(n.b);
                for (std::size_t i = 0; i < ga.size(); ++i) ga.v[i] += g.v[i];
                for (std::size_t i = 0; i < gb.size(); ++i) gb.v[i] += g.v[ga.size() + i];
                break;
            }
            case Op::ConcatCols: {
                const Tensor& a = nodes_[n.a].value;
                Tensor& ga = grad_of(n.a);
                Tensor& gb = grad_of(n.b);
                for (std::size_t i = 0; i < a.rows(); ++i) {
                    for (std::size_t j = 0; j < a.cols(); ++j) ga.at(i, j) += g.at(i, j);
                    for (std::size_t j = 0; j < gb.cols(); ++j)
                        gb.at(i, j) += g.at(i, a.cols() + j);
                }
                break;
            }
            case Op::SliceCols: {
                Tensor& ga = grad_of(n.a);
                const std::size_t start = n.index[0], count = n.index[1];
                for (std::size_t i = 0; i < g.rows(); ++i)
                    for (std::size_t j = 0; j < count; ++j)
                        ga.at(i, start + j) += g.at(i, j);
                break;
            }
            case Op::GatherRows: {
                Tensor& ga = grad_of(n.a);
                for (std::size_t i = 0; i < n.index.size(); ++i)
                    for (std::size_t j = 0; j < g.cols(); ++j)
                        ga.at(n.index[i], j) += g.at(i, j);
                break;
            }
            case Op::GatherColPerRow: {
                Tensor& ga = grad_of(n.a);
                for (std::size_t i = 0; i < n.index.size(); ++i)
                    ga.at(i, n.index[i]) += g.v[i];
                break;
            }
            case Op::Where: {
                Tensor& ga = grad_of(n.a);
                Tensor& gb = grad_of(n.b);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    if (n.aux.v[i] != 0.0)
                        ga.v[i] += g.v[i];
                    else
                        gb.v[i] += g.v[i];
                }
                break;
            }
            case Op::RowSoftmax: {
                const Tensor& s = n.value;
                Tensor& ga = grad_of(n.a);
                for (std::size_t i = 0; i < s.rows(); ++i) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < s.cols(); ++j)
                        dot += g.at(i, j) * s.at(i, j);
                    for (std::size_t j = 0; j < s.cols(); ++j)
                        ga.at(i, j) += s.at(i, j) * (g.at(i, j) - dot);
                }
                break;
            }
            case Op::LayerNorm: {
                const Tensor& x = nodes_[n.a].value;
                const Tensor& y = n.value;
                Tensor& ga = grad_of(n.a);
                const std::size_t c = x.cols();
                const double inv_c = 1.0 / static_cast<double>(c);
                for (std::size_t i = 0; i < x.rows(); ++i) {
                    double mean = 0.0, var = 0.0;
                    for (std::size_t j = 0; j < c; ++j) mean += x.at(i, j);
                    mean *= inv_c;
                    for (std::size_t j = 0; j < c; ++j) {
                        const double d = x.at(i, j) - mean;
                        var += d * d;
                    }
                    var *= inv_c;
                    const double inv_std = 1.0 / std::sqrt(var + kLayerNormEps);
                    double g_mean = 0.0, gy_mean = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                        g_mean += g.at(i, j);
                        gy_mean += g.at(i, j) * y.at(i, j);
                    }
                    g_mean *= inv_c;
                    gy_mean *= inv_c;
                    for (std::size_t j = 0; j < c; ++j)
                        ga.at(i, j) +=
                            inv_std * (g.at(i, j) - g_mean - y.at(i, j) * gy_mean);
                }
                break;
            }
            case Op::SumAll: {
                Tensor& ga = grad_of(n.a);
                for (double& v : ga.v) v += g.v[0];
                break;
            }
            case Op::MeanAll: {
                Tensor& ga = grad_of(n.a);
                const double w = g.v[0] / static_cast<double>(ga.size());
                for (double& v : ga.v) v += w;
                break;
            }
            case Op::SumAxis:
            case Op::MeanAxis: {
                Tensor& ga = grad_of(n.a);
                const std::size_t r = ga.rows(), c = ga.cols();
                const bool mean = n.op == Op::MeanAxis;
                if (n.axis == 0) {
                    const double w = mean ? 1.0 / static_cast<double>(r) : 1.0;
                    for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < c; ++j) ga.at(i, j) += w * g.v[j];
                } else {
                    const double w = mean ? 1.0 / static_cast<double>(c) : 1.0;
                    for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < c; ++j) ga.at(i, j) += w * g.v[i];
                }
                break;
            }
        }
    }
    grads_valid_ = true;
}

const Tensor& Tape::grad(Var x) const {
    if (!grads_valid_) throw std::logic_error("grad: backward() has not run");
    const Node& n = node(x);
    static const thread_local Tensor empty;
    if (grads_[x.id].size() == 0) {
        // untouched node: zero gradient of matching shape
        const_cast<Tape*>(this)->grads_[x.id] = Tensor(n.value.shape);
    }
    return grads_[x.id];
}

GradCheckReport grad_check(const GraphFn& graph, const std::vector<Tensor>& point,
                           double step) {
    if (step <= 0.0) throw std::invalid_argument("grad_check: step must be positive");

    Tape tape;
    std::vector<Var> vars;
    vars.reserve(point.size());
    for (const Tensor& t : point) vars.push_back(tape.input(t));
    Var out = graph(tape, vars);
    if (tape.val(out).size() != 1)
        throw std::invalid_argument("grad_check: graph output is not scalar");
    tape.backward(out);

    std::vector<Tensor> analytic;
    analytic.reserve(vars.size());
    for (Var v : vars) analytic.push_back(tape.grad(v));

    auto eval_at = [&](const std::vector<Tensor>& p) {
        Tape t2;
        std::vector<Var> vs;
        vs.reserve(p.size());
        for (const Tensor& t : p) vs.push_back(t2.input(t));
        return t2.val(graph(t2, vs)).v[0];
    };

    GradCheckReport report;
    std::vector<Tensor> probe = point;
    for (std::size_t i = 0; i < point.size(); ++i) {
        for (std::size_t j = 0; j < point[i].size(); ++j) {
            const double orig = probe[i].v[j];
            probe[i].v[j] = orig + step;
            const double fp = eval_at(probe);
            probe[i].v[j] = orig - step;
            const double fm = eval_at(probe);
            probe[i].v[j] = orig;
            const double numeric = (fp - fm) / (2.0 * step);
            const double err =
                std::abs(analytic[i].v[j] - numeric) / std::max(1.0, std::abs(numeric));
            report.max_rel_err = std::max(report.max_rel_err, err);
            ++report.coords_checked;
        }
    }
    return report;
}

}  // namespace panoptiq

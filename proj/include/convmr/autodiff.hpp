#pragma once
// Reverse-mode differentiation over dense Eigen matrices.
//
// A Tape records every operation in execution order. Nodes only reference
// earlier nodes, so backward() is a single reverse sweep. Column vectors are
// k x 1 matrices; scalars are 1 x 1.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace convmr::ad {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Op : std::uint8_t {
    leaf,
    constant,
    matmul,
    add,
    sub,
    mul,
    scale,
    tanh,
    sigmoid,
    relu,
    softmax,
    concat_rows,
    concat_cols,
    transpose,
    flatten,
    dot,
    conv1x3,
    softplus,
    l2_norm_sq,
    lookup,
    sum,
};

template <typename Scalar>
class Tape;

template <typename Scalar>
struct Var {
    Tape<Scalar>* tape = nullptr;
    int id = -1;

    const Matrix<Scalar>& value() const { return tape->value(*this); }
    const Matrix<Scalar>& grad() const { return tape->grad(*this); }
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    Scalar scalar() const { return value()(0, 0); }
};

inline std::string shape_str(Eigen::Index r, Eigen::Index c) {
    return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
}

template <typename Scalar>
class Tape {
public:
    using Mat = Matrix<Scalar>;
    using V = Var<Scalar>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    V leaf(Mat value) { return push(Op::leaf, std::move(value), {}); }
    V constant(Mat value) { return push(Op::constant, std::move(value), {}); }

    const Mat& value(V v) const { return node(v).value; }
    // Zero-sized until backward() has run.
    const Mat& grad(V v) const { return node(v).grad; }

    std::size_t size() const { return nodes_.size(); }

    // Records the sign of every relu input; used to keep finite differences
    // away from the kink.
    void track_kinks(bool on) { track_kinks_ = on; }
    const std::vector<std::int8_t>& kink_signature() const { return kinks_; }

    void backward(V root);

    // Recording API for the free functions below.
    V push(Op op, Mat value, std::initializer_list<int> parents, Scalar c = Scalar(0), Eigen::Index aux = 0) {
        return push(op, std::move(value), std::vector<int>(parents), c, aux);
    }
    V push(Op op, Mat value, std::vector<int> parents, Scalar c = Scalar(0), Eigen::Index aux = 0) {
        nodes_.push_back(Node{op, std::move(parents), std::move(value), Mat(), c, aux});
        return V{this, static_cast<int>(nodes_.size() - 1)};
    }
    void note_relu_input(const Mat& x) {
        if (!track_kinks_) return;
        for (Eigen::Index j = 0; j < x.size(); ++j) {
            const Scalar v = x.data()[j];
            kinks_.push_back(v > 0 ? 1 : (v < 0 ? -1 : 0));
        }
    }

private:
    struct Node {
        Op op;
        std::vector<int> parents;
        Mat value;
        Mat grad;
        Scalar c;
        Eigen::Index aux;
    };

    const Node& node(V v) const {
        if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
            throw std::invalid_argument("variable does not belong to this tape");
        return nodes_[static_cast<std::size_t>(v.id)];
    }

    void propagate(int index);

    std::vector<Node> nodes_;
    bool track_kinks_ = false;
    std::vector<std::int8_t> kinks_;
};

namespace detail {

template <typename Scalar>
Tape<Scalar>& same_tape(const Var<Scalar>& a, const Var<Scalar>& b) {
    if (a.tape == nullptr || a.tape != b.tape) throw std::invalid_argument("variables live on different tapes");
    return *a.tape;
}

template <typename Scalar>
void require_same_shape(const char* op, const Var<Scalar>& a, const Var<Scalar>& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.rows(), a.cols()) + " vs " +
                         shape_str(b.rows(), b.cols()));
}

template <typename Scalar>
Scalar softplus(Scalar z) {
    return z > Scalar(30) ? z : std::log1p(std::exp(z));
}

template <typename Scalar>
Scalar sigmoid(Scalar z) {
    if (z >= 0) return Scalar(1) / (Scalar(1) + std::exp(-z));
    const Scalar e = std::exp(z);
    return e / (Scalar(1) + e);
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
    auto& t = detail::same_tape(a, b);
    if (a.cols() != b.rows())
        throw ShapeError("matmul: shape mismatch " + shape_str(a.rows(), a.cols()) + " vs " +
                         shape_str(b.rows(), b.cols()));
    Matrix<Scalar> out = a.value() * b.value();
    return t.push(Op::matmul, std::move(out), {a.id, b.id});
}

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) {
    auto& t = detail::same_tape(a, b);
    detail::require_same_shape("add", a, b);
    return t.push(Op::add, a.value() + b.value(), {a.id, b.id});
}

template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) {
    auto& t = detail::same_tape(a, b);
    detail::require_same_shape("sub", a, b);
    return t.push(Op::sub, a.value() - b.value(), {a.id, b.id});
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) { return a + b; }

// Elementwise (Hadamard) product.
template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
    auto& t = detail::same_tape(a, b);
    detail::require_same_shape("mul", a, b);
    return t.push(Op::mul, a.value().cwiseProduct(b.value()), {a.id, b.id});
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, std::type_identity_t<Scalar> c) {
    return a.tape->push(Op::scale, a.value() * c, {a.id}, c);
}

template <typename Scalar>
Var<Scalar> tanh(const Var<Scalar>& a) {
    return a.tape->push(Op::tanh, a.value().array().tanh().matrix(), {a.id});
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& a) {
    return a.tape->push(Op::sigmoid, a.value().unaryExpr([](Scalar z) { return detail::sigmoid(z); }), {a.id});
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& a) {
    a.tape->note_relu_input(a.value());
    return a.tape->push(Op::relu, a.value().cwiseMax(Scalar(0)), {a.id});
}

// Softmax over a row or column vector.
template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& a) {
    const auto& x = a.value();
    if (x.size() == 0) throw ShapeError("softmax: empty input");
    if (x.rows() != 1 && x.cols() != 1) throw ShapeError("softmax: input must be 1-D, got " + shape_str(x.rows(), x.cols()));
    Matrix<Scalar> e = (x.array() - x.maxCoeff()).exp().matrix();
    e /= e.sum();
    return a.tape->push(Op::softmax, std::move(e), {a.id});
}

// Stacks the inputs vertically; all must share a column count.
template <typename Scalar>
Var<Scalar> concat_rows(std::span<const Var<Scalar>> parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    Eigen::Index rows = 0;
    const Eigen::Index cols = parts[0].cols();
    std::vector<int> ids;
    for (const auto& p : parts) {
        detail::same_tape(parts[0], p);
        if (p.cols() != cols)
            throw ShapeError("concat_rows: shape mismatch " + shape_str(parts[0].rows(), cols) + " vs " +
                             shape_str(p.rows(), p.cols()));
        rows += p.rows();
        ids.push_back(p.id);
    }
    Matrix<Scalar> out(rows, cols);
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        out.middleRows(at, p.rows()) = p.value();
        at += p.rows();
    }
    return parts[0].tape->push(Op::concat_rows, std::move(out), std::move(ids));
}

// Places the inputs side by side; all must share a row count.
template <typename Scalar>
Var<Scalar> concat_cols(std::span<const Var<Scalar>> parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    Eigen::Index cols = 0;
    const Eigen::Index rows = parts[0].rows();
    std::vector<int> ids;
    for (const auto& p : parts) {
        detail::same_tape(parts[0], p);
        if (p.rows() != rows)
            throw ShapeError("concat_cols: shape mismatch " + shape_str(rows, parts[0].cols()) + " vs " +
                             shape_str(p.rows(), p.cols()));
        cols += p.cols();
        ids.push_back(p.id);
    }
    Matrix<Scalar> out(rows, cols);
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        out.middleCols(at, p.cols()) = p.value();
        at += p.cols();
    }
    return parts[0].tape->push(Op::concat_cols, std::move(out), std::move(ids));
}

template <typename Scalar>
Var<Scalar> concat_rows(std::initializer_list<Var<Scalar>> parts) {
    return concat_rows(std::span<const Var<Scalar>>(parts.begin(), parts.size()));
}

template <typename Scalar>
Var<Scalar> concat_cols(std::initializer_list<Var<Scalar>> parts) {
    return concat_cols(std::span<const Var<Scalar>>(parts.begin(), parts.size()));
}

template <typename Scalar>
Var<Scalar> transpose(const Var<Scalar>& a) {
    return a.tape->push(Op::transpose, a.value().transpose(), {a.id});
}

// Column-major flattening to a column vector: column j lands in rows [j*r, (j+1)*r).
template <typename Scalar>
Var<Scalar> flatten(const Var<Scalar>& a) {
    const auto& x = a.value();
    Matrix<Scalar> out = Eigen::Map<const Matrix<Scalar>>(x.data(), x.size(), 1);
    return a.tape->push(Op::flatten, std::move(out), {a.id});
}

template <typename Scalar>
Var<Scalar> dot(const Var<Scalar>& a, const Var<Scalar>& b) {
    auto& t = detail::same_tape(a, b);
    detail::require_same_shape("dot", a, b);
    // Left-to-right accumulation, so straight-line scorers can reproduce it exactly.
    const Scalar* x = a.value().data();
    const Scalar* y = b.value().data();
    Scalar acc(0);
    for (Eigen::Index i = 0; i < a.value().size(); ++i) acc += x[i] * y[i];
    Matrix<Scalar> out(1, 1);
    out(0, 0) = acc;
    return t.push(Op::dot, std::move(out), {a.id, b.id});
}

// Slides each 1x3 filter (a row of `filters`) down the k rows of a k x 3
// input. Output is k x tau; column f is the feature map of filter f.
template <typename Scalar>
Var<Scalar> conv1x3(const Var<Scalar>& input, const Var<Scalar>& filters) {
    auto& t = detail::same_tape(input, filters);
    if (input.cols() != 3) throw ShapeError("conv1x3: input must be k x 3, got " + shape_str(input.rows(), input.cols()));
    if (filters.cols() != 3)
        throw ShapeError("conv1x3: filters must be tau x 3, got " + shape_str(filters.rows(), filters.cols()));
    const auto& x = input.value();
    const auto& w = filters.value();
    Matrix<Scalar> out(x.rows(), w.rows());
    for (Eigen::Index f = 0; f < w.rows(); ++f)
        for (Eigen::Index i = 0; i < x.rows(); ++i)
            out(i, f) = (w(f, 0) * x(i, 0) + w(f, 1) * x(i, 1)) + w(f, 2) * x(i, 2);
    return t.push(Op::conv1x3, std::move(out), {input.id, filters.id});
}

template <typename Scalar>
Var<Scalar> softplus(const Var<Scalar>& a) {
    return a.tape->push(Op::softplus, a.value().unaryExpr([](Scalar z) { return detail::softplus(z); }), {a.id});
}

template <typename Scalar>
Var<Scalar> l2_norm_sq(const Var<Scalar>& a) {
    Matrix<Scalar> out(1, 1);
    out(0, 0) = a.value().squaredNorm();
    return a.tape->push(Op::l2_norm_sq, std::move(out), {a.id});
}

// Row `row` of `table`, returned as a column vector.
template <typename Scalar>
Var<Scalar> lookup(const Var<Scalar>& table, Eigen::Index row) {
    if (row < 0 || row >= table.rows())
        throw ShapeError("lookup: row " + std::to_string(row) + " out of range for " +
                         shape_str(table.rows(), table.cols()));
    Matrix<Scalar> out = table.value().row(row).transpose();
    return table.tape->push(Op::lookup, std::move(out), {table.id}, Scalar(0), row);
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
    Matrix<Scalar> out(1, 1);
    out(0, 0) = a.value().sum();
    return a.tape->push(Op::sum, std::move(out), {a.id});
}

template <typename Scalar>
void Tape<Scalar>::backward(V root) {
    const Node& r = node(root);
    if (r.value.rows() != 1 || r.value.cols() != 1)
        throw ShapeError("backward: root must be scalar, got " + shape_str(r.value.rows(), r.value.cols()));
    for (auto& n : nodes_) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    nodes_[static_cast<std::size_t>(root.id)].grad(0, 0) = Scalar(1);
    for (int i = root.id; i >= 0; --i) propagate(i);
}

template <typename Scalar>
void Tape<Scalar>::propagate(int index) {
    Node& n = nodes_[static_cast<std::size_t>(index)];
    const Mat& g = n.grad;
    auto parent = [&](std::size_t j) -> Node& { return nodes_[static_cast<std::size_t>(n.parents[j])]; };

    switch (n.op) {
    case Op::leaf:
    case Op::constant:
        break;
    case Op::matmul: {
        Node& a = parent(0);
        Node& b = parent(1);
        a.grad.noalias() += g * b.value.transpose();
        b.grad.noalias() += a.value.transpose() * g;
        break;
    }
    case Op::add:
        parent(0).grad += g;
        parent(1).grad += g;
        break;
    case Op::sub:
        parent(0).grad += g;
        parent(1).grad -= g;
        break;
    case Op::mul: {
        Node& a = parent(0);
        Node& b = parent(1);
        a.grad += g.cwiseProduct(b.value);
        b.grad += g.cwiseProduct(a.value);
        break;
    }
    case Op::scale:
        parent(0).grad += g * n.c;
        break;
    case Op::tanh:
        parent(0).grad += g.cwiseProduct((Scalar(1) - n.value.array().square()).matrix());
        break;
    case Op::sigmoid:
        parent(0).grad += g.cwiseProduct((n.value.array() * (Scalar(1) - n.value.array())).matrix());
        break;
    case Op::relu: {
        Node& a = parent(0);
        a.grad += g.cwiseProduct((a.value.array() > Scalar(0)).template cast<Scalar>().matrix());
        break;
    }
    case Op::softmax: {
        const Scalar inner = g.cwiseProduct(n.value).sum();
        parent(0).grad += n.value.cwiseProduct((g.array() - inner).matrix());
        break;
    }
    case Op::concat_rows: {
        Eigen::Index at = 0;
        for (std::size_t j = 0; j < n.parents.size(); ++j) {
            Node& p = parent(j);
            p.grad += g.middleRows(at, p.value.rows());
            at += p.value.rows();
        }
        break;
    }
    case Op::concat_cols: {
        Eigen::Index at = 0;
        for (std::size_t j = 0; j < n.parents.size(); ++j) {
            Node& p = parent(j);
            p.grad += g.middleCols(at, p.value.cols());
            at += p.value.cols();
        }
        break;
    }
    case Op::transpose:
        parent(0).grad += g.transpose();
        break;
    case Op::flatten: {
        Node& a = parent(0);
        a.grad += Eigen::Map<const Mat>(g.data(), a.value.rows(), a.value.cols());
        break;
    }
    case Op::dot: {
        Node& a = parent(0);
        Node& b = parent(1);
        const Scalar s = g(0, 0);
        a.grad += s * b.value;
        b.grad += s * a.value;
        break;
    }
    case Op::conv1x3: {
        Node& x = parent(0);
        Node& w = parent(1);
        x.grad.noalias() += g * w.value;
        w.grad.noalias() += g.transpose() * x.value;
        break;
    }
    case Op::softplus: {
        Node& a = parent(0);
        a.grad += g.cwiseProduct(a.value.unaryExpr([](Scalar z) { return detail::sigmoid(z); }));
        break;
    }
    case Op::l2_norm_sq: {
        Node& a = parent(0);
        a.grad += (Scalar(2) * g(0, 0)) * a.value;
        break;
    }
    case Op::lookup:
        parent(0).grad.row(n.aux) += g.transpose();
        break;
    case Op::sum:
        parent(0).grad.array() += g(0, 0);
        break;
    }
}

template <typename Scalar>
struct GradCheckReport {
    Scalar max_rel_error = 0;
    std::size_t checked = 0;
    std::size_t skipped = 0;  // entries whose perturbation crosses a relu kink
};

// Compares reverse-mode gradients of `build(tape, leaves)` against central
// finite differences for every entry of every matrix in `params`.
// Relative error is |analytic - numeric| / max(1, |analytic|, |numeric|).
template <typename Scalar, typename Builder>
GradCheckReport<Scalar> grad_check(Builder&& build, std::vector<Matrix<Scalar>>& params, Scalar step) {
    if (!(step > Scalar(0) && step <= Scalar(1e-3))) throw std::invalid_argument("grad_check: step must lie in (0, 1e-3]");

    auto evaluate = [&](std::vector<std::int8_t>* kinks) {
        Tape<Scalar> tape;
        tape.track_kinks(true);
        std::vector<Var<Scalar>> leaves;
        leaves.reserve(params.size());
        for (const auto& p : params) leaves.push_back(tape.leaf(p));
        const Var<Scalar> root = build(tape, std::span<const Var<Scalar>>(leaves));
        const Scalar f = root.scalar();
        if (!std::isfinite(f)) throw NumericError("grad_check: non-finite forward value");
        if (kinks) *kinks = tape.kink_signature();
        return f;
    };

    Tape<Scalar> tape;
    tape.track_kinks(true);
    std::vector<Var<Scalar>> leaves;
    for (const auto& p : params) leaves.push_back(tape.leaf(p));
    const Var<Scalar> root = build(tape, std::span<const Var<Scalar>>(leaves));
    if (!std::isfinite(root.scalar())) throw NumericError("grad_check: non-finite forward value");
    tape.backward(root);
    const std::vector<std::int8_t> base_kinks = tape.kink_signature();

    GradCheckReport<Scalar> report;
    std::vector<std::int8_t> kinks_plus, kinks_minus;
    for (std::size_t b = 0; b < params.size(); ++b) {
        const Matrix<Scalar> analytic = leaves[b].grad();
        for (Eigen::Index j = 0; j < params[b].size(); ++j) {
            Scalar& x = params[b].data()[j];
            const Scalar saved = x;
            x = saved + step;
            const Scalar f_plus = evaluate(&kinks_plus);
            x = saved - step;
            const Scalar f_minus = evaluate(&kinks_minus);
            x = saved;
            if (kinks_plus != base_kinks || kinks_minus != base_kinks) {
                ++report.skipped;
                continue;
            }
            const Scalar numeric = (f_plus - f_minus) / (Scalar(2) * step);
            const Scalar a = analytic.data()[j];
            const Scalar denom = std::max({Scalar(1), std::abs(a), std::abs(numeric)});
            report.max_rel_error = std::max(report.max_rel_error, std::abs(a - numeric) / denom);
            ++report.checked;
        }
    }
    return report;
}

}  // namespace convmr::ad

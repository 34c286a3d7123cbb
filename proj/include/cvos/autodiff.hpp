#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// A Tape records every operation in execution order; Var is a lightweight
// handle (tape, node id). Values stored on the tape are never modified after
// recording. Gradients can be requested for any node created with
// Tape::variable, which covers both network weights and input masks.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cvos/tensor.hpp"

namespace cvos {

enum class OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    MulScalar,
    Sigmoid,
    Relu,
    Log,
    Exp,
    Minimum,
    Maximum,
    Clamp,
    Sum,
    Mean,
    MatMul,
    Conv2d,
    Upsample2x,
    Concat,
    Softmax,
    Reshape,
    Transpose,
    Slice,
};

const char* op_name(OpKind kind);

template <typename T>
class Tape;

template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    std::size_t id = 0;

    const Tensor<T>& value() const;
    const Shape& shape() const { return value().shape; }
    std::size_t size() const { return value().size(); }
    bool requires_grad() const;
};

template <typename T>
class Gradients {
public:
    Gradients() = default;
    Gradients(std::vector<Shape> shapes, std::vector<std::vector<T>> grads)
        : shapes_(std::move(shapes)), grads_(std::move(grads)) {}

    // Gradient of the loss with respect to v; zeros when v was not reached.
    Tensor<T> operator[](const Var<T>& v) const;
    bool reached(const Var<T>& v) const { return v.id < grads_.size() && !grads_[v.id].empty(); }

private:
    std::vector<Shape> shapes_;
    std::vector<std::vector<T>> grads_;
};

template <typename T>
class BackwardContext;

template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void(BackwardContext<T>&)>;

    struct Node {
        OpKind kind = OpKind::Leaf;
        Tensor<T> value;
        std::vector<std::size_t> inputs;
        bool requires_grad = false;
        BackwardFn backward;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> constant(Tensor<T> value);
    Var<T> variable(Tensor<T> value);

    // Appends an operation. The backward function is dropped when no input
    // requires a gradient.
    Var<T> record(OpKind kind, Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn backward);

    // Reverse sweep from a scalar loss. Each recorded operation is visited at
    // most once; fan-out contributions accumulate additively.
    Gradients<T> backward(const Var<T>& loss) const;

    const Node& node(std::size_t id) const { return nodes_.at(id); }
    std::size_t size() const { return nodes_.size(); }

private:
    // deque: references to recorded values stay valid while recording continues
    std::deque<Node> nodes_;
};

template <typename T>
class BackwardContext {
public:
    BackwardContext(const Tape<T>& tape, std::size_t id, std::vector<std::vector<T>>& grads)
        : tape_(tape), id_(id), grads_(grads) {}

    std::span<const T> grad_out() const { return grads_[id_]; }
    const Tensor<T>& output() const { return tape_.node(id_).value; }
    const Tensor<T>& input(std::size_t i) const { return tape_.node(tape_.node(id_).inputs[i]).value; }
    // Gradient buffer of input i, or an empty span when it needs no gradient.
    std::span<T> grad_in(std::size_t i);

private:
    const Tape<T>& tape_;
    std::size_t id_;
    std::vector<std::vector<T>>& grads_;
};

namespace ad {

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> div(Var<T> a, Var<T> b);
template <typename T> Var<T> add_scalar(Var<T> a, T c);
template <typename T> Var<T> mul_scalar(Var<T> a, T c);
template <typename T> Var<T> sigmoid(Var<T> a);
template <typename T> Var<T> relu(Var<T> a);
// Throws std::domain_error on any non-positive element.
template <typename T> Var<T> log(Var<T> a);
template <typename T> Var<T> exp(Var<T> a);
// Elementwise; on exact ties the gradient goes to the first operand.
template <typename T> Var<T> minimum(Var<T> a, Var<T> b);
template <typename T> Var<T> maximum(Var<T> a, Var<T> b);
// Gradient passes only strictly inside (lo, hi).
template <typename T> Var<T> clamp(Var<T> a, T lo, T hi);
template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> mean(Var<T> a);
// [m,k] x [k,n] -> [m,n]
template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
// x: [C,H,W], w: [O,C,k,k], b: [O] -> [O,H',W'] with zero padding.
template <typename T> Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, std::size_t stride, std::size_t pad);
template <typename T> Var<T> conv2d(Var<T> x, Var<T> w, std::size_t stride, std::size_t pad);
// [C,H,W] -> [C,2H,2W]
template <typename T> Var<T> upsample2x(Var<T> x);
template <typename T> Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis);
template <typename T> Var<T> softmax(Var<T> a, std::size_t axis);
template <typename T> Var<T> reshape(Var<T> a, Shape shape);
// [m,n] -> [n,m]
template <typename T> Var<T> transpose(Var<T> a);
// Index `index` along axis 0, dropping that axis.
template <typename T> Var<T> select(Var<T> a, std::size_t index);
// Copies the value onto the tape as a constant; no gradient flows back.
template <typename T> Var<T> stop_gradient(Var<T> a);

}  // namespace ad

template <typename T> Var<T> operator+(Var<T> a, Var<T> b) { return ad::add(a, b); }
template <typename T> Var<T> operator-(Var<T> a, Var<T> b) { return ad::sub(a, b); }
template <typename T> Var<T> operator*(Var<T> a, Var<T> b) { return ad::mul(a, b); }
template <typename T> Var<T> operator/(Var<T> a, Var<T> b) { return ad::div(a, b); }
template <typename T> Var<T> operator+(Var<T> a, T c) { return ad::add_scalar(a, c); }
template <typename T> Var<T> operator*(Var<T> a, T c) { return ad::mul_scalar(a, c); }
template <typename T> Var<T> operator*(T c, Var<T> a) { return ad::mul_scalar(a, c); }
// c - a
template <typename T> Var<T> operator-(T c, Var<T> a) { return ad::add_scalar(ad::mul_scalar(a, T{-1}), c); }

// Maximum over elements of |analytic - central difference| /
// max(|analytic|, |fd|, 1e-8) for the gradient of f at x.
double finite_diff_check(const std::function<Var<double>(Var<double>)>& f, const Tensor<double>& x,
                         double h = 1e-5);

// Which side of its kink every relu, clamp, minimum and maximum element
// evaluated on. Two tapes with equal patterns traced the same smooth piece.
template <typename T>
std::vector<std::uint8_t> branch_pattern(const Tape<T>& tape);

struct FiniteDiffReport {
    double max_relative_error = 0.0;
    std::size_t checked = 0;
    // coordinates whose +-h probes changed the branch pattern
    std::size_t skipped = 0;
};

// finite_diff_check restricted to coordinates where f is smooth on [x-h, x+h].
FiniteDiffReport finite_diff_report(const std::function<Var<double>(Var<double>)>& f, const Tensor<double>& x,
                                    double h = 1e-5);

}  // namespace cvos

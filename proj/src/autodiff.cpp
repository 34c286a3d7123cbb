#include "cvos/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "cvos/kernels.hpp"

namespace cvos {

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

const char* op_name(OpKind kind) {
    switch (kind) {
        case OpKind::Leaf: return "leaf";
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::Mul: return "mul";
        case OpKind::Div: return "div";
        case OpKind::AddScalar: return "add_scalar";
        case OpKind::MulScalar: return "mul_scalar";
        case OpKind::Sigmoid: return "sigmoid";
        case OpKind::Relu: return "relu";
        case OpKind::Log: return "log";
        case OpKind::Exp: return "exp";
        case OpKind::Minimum: return "minimum";
        case OpKind::Maximum: return "maximum";
        case OpKind::Clamp: return "clamp";
        case OpKind::Sum: return "sum";
        case OpKind::Mean: return "mean";
        case OpKind::MatMul: return "matmul";
        case OpKind::Conv2d: return "conv2d";
        case OpKind::Upsample2x: return "upsample2x";
        case OpKind::Concat: return "concat";
        case OpKind::Softmax: return "softmax";
        case OpKind::Reshape: return "reshape";
        case OpKind::Transpose: return "transpose";
        case OpKind::Slice: return "select";
    }
    return "?";
}

template <typename T>
const Tensor<T>& Var<T>::value() const {
    return tape->node(id).value;
}

template <typename T>
bool Var<T>::requires_grad() const {
    return tape->node(id).requires_grad;
}

template <typename T>
Tensor<T> Gradients<T>::operator[](const Var<T>& v) const {
    if (v.id >= shapes_.size()) throw std::out_of_range("Gradients: unknown node");
    if (grads_[v.id].empty()) return Tensor<T>(shapes_[v.id]);
    return Tensor<T>(shapes_[v.id], grads_[v.id]);
}

template <typename T>
std::span<T> BackwardContext<T>::grad_in(std::size_t i) {
    const std::size_t in_id = tape_.node(id_).inputs[i];
    const auto& in = tape_.node(in_id);
    if (!in.requires_grad) return {};
    auto& g = grads_[in_id];
    if (g.empty()) g.assign(in.value.size(), T{0});
    return g;
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
    nodes_.push_back(Node{OpKind::Leaf, std::move(value), {}, false, {}});
    return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::variable(Tensor<T> value) {
    nodes_.push_back(Node{OpKind::Leaf, std::move(value), {}, true, {}});
    return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::record(OpKind kind, Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn backward) {
    bool needs = false;
    for (auto id : inputs) {
        if (id >= nodes_.size()) throw std::logic_error("Tape: input recorded after its consumer");
        needs = needs || nodes_[id].requires_grad;
    }
    if (!needs) backward = nullptr;
    nodes_.push_back(Node{kind, std::move(value), std::move(inputs), needs, std::move(backward)});
    return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Gradients<T> Tape<T>::backward(const Var<T>& loss) const {
    if (loss.tape != this) throw std::invalid_argument("backward: loss belongs to another tape");
    const auto& out = nodes_.at(loss.id);
    if (out.value.size() != 1) {
        throw std::invalid_argument("backward: loss must be a scalar, got shape " + to_string(out.value.shape));
    }
    std::vector<std::vector<T>> grads(nodes_.size());
    std::vector<Shape> shapes(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) shapes[i] = nodes_[i].value.shape;
    if (out.requires_grad) {
        grads[loss.id].assign(1, T{1});
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            const auto& n = nodes_[i];
            if (!n.backward || grads[i].empty()) continue;
            BackwardContext<T> ctx(*this, i, grads);
            n.backward(ctx);
        }
    }
    // Leaves that require a gradient but were not reached get explicit zeros.
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        if (nodes_[i].requires_grad && nodes_[i].kind == OpKind::Leaf && grads[i].empty())
            grads[i].assign(nodes_[i].value.size(), T{0});
    }
    return Gradients<T>(std::move(shapes), std::move(grads));
}

namespace ad {

namespace {

template <typename T>
Tape<T>& same_tape(const char* op, Var<T> a, Var<T> b) {
    if (a.tape == nullptr || a.tape != b.tape) throw std::invalid_argument(std::string(op) + ": operands on different tapes");
    return *a.tape;
}

template <typename T>
void require_same_shape(const char* op, const Var<T>& a, const Var<T>& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                                    to_string(b.shape()));
    }
}

// Neumaier-compensated sum; keeps reductions over whole masks accurate to a
// few ulps, which finite-difference checks rely on.
template <typename T>
T compensated_sum(const std::vector<T>& values) {
    T total{0};
    T carry{0};
    for (T v : values) {
        const T t = total + v;
        if (std::abs(total) >= std::abs(v)) {
            carry += (total - t) + v;
        } else {
            carry += (v - t) + total;
        }
        total = t;
    }
    return total + carry;
}

template <typename T, typename F>
Tensor<T> map(const Tensor<T>& a, F f) {
    Tensor<T> out(a.shape);
    const T* src = a.data.data();
    T* dst = out.data.data();
    const std::size_t n = a.size();
#pragma omp simd
    for (std::size_t i = 0; i < n; ++i) dst[i] = f(src[i]);
    return out;
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    auto& tape = same_tape("add", a, b);
    require_same_shape("add", a, b);
    Tensor<T> out(a.shape());
    const auto &av = a.value().data, &bv = b.value().data;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return tape.record(OpKind::Add, std::move(out), {a.id, b.id}, [](BackwardContext<T>& c) {
        auto g = c.grad_out();
        for (std::size_t k = 0; k < 2; ++k)
            if (auto gi = c.grad_in(k); !gi.empty())
                for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    auto& tape = same_tape("sub", a, b);
    require_same_shape("sub", a, b);
    Tensor<T> out(a.shape());
    const auto &av = a.value().data, &bv = b.value().data;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return tape.record(OpKind::Sub, std::move(out), {a.id, b.id}, [](BackwardContext<T>& c) {
        auto g = c.grad_out();
        if (auto ga = c.grad_in(0); !ga.empty())
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        if (auto gb = c.grad_in(1); !gb.empty())
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    auto& tape = same_tape("mul", a, b);
    require_same_shape("mul", a, b);
    Tensor<T> out(a.shape());
    const auto &av = a.value().data, &bv = b.value().data;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return tape.record(OpKind::Mul, std::move(out), {a.id, b.id}, [](BackwardContext<T>& c) {
        auto g = c.grad_out();
        const auto &av = c.input(0).data, &bv = c.input(1).data;
        if (auto ga = c.grad_in(0); !ga.empty())
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
        if (auto gb = c.grad_in(1); !gb.empty())
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    });
}

template <typename T>
Var<T> div(Var<T> a, Var<T> b) {
    auto& tape = same_tape("div", a, b);
    require_same_shape("div", a, b);
    Tensor<T> out(a.shape());
    const auto &av = a.value().data, &bv = b.value().data;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
    return tape.record(OpKind::Div, std::move(out), {a.id, b.id}, [](BackwardContext<T>& c) {
        auto g = c.grad_out();
        const auto &bv = c.input(1).data, &ov = c.output().data;
        if (auto ga = c.grad_in(0); !ga.empty())
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv[i];
        if (auto gb = c.grad_in(1); !gb.empty())
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * ov[i] / bv[i];
    });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T s) {
    Tensor<T> out = map(a.value(), [s](T v) { return v + s; });
    return a.tape->record(OpKind::AddScalar, std::move(out), {a.id}, [](BackwardContext<T>& c) {
        auto g = c.grad_out();
        auto gi = c.grad_in(0);
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    });
}

template <typename T>
Var<T> mul_scalar(Var<T> a, T s) {
    Tensor<T> out = map(a.value(), [s](T v) { return v * s; });
    return a.tape->record(OpKind::MulScalar, std::move(out), {a.id}, [s](BackwardContext<T>& c) {
        auto g = c.grad_out();
        auto gi = c.grad_in(0);
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * s;
    });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
    Tensor<T> out = map(a.value(), [](T v) { return T{1} / (T{1} + std::exp(-v)); });
    return a.tape->record(OpKind::Sigmoid, std::move(out), {a.id}, [](BackwardContext<T>& c) {
        auto g = c.grad_out();
        auto gi = c.grad_in(0);
        const auto& y = c.output().data;
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * y[i] * (T{1} - y[i]);
    });
}

template <typename T>
Var<T> relu(Var<T> a) {
    Tensor<T> out = map(a.value(), [](T v) { return v > T{0} ? v : T{0}; });
    return a.tape->record(OpKind::Relu, std::move(out), {a.id}, [](BackwardContext<T>& c) {
        auto g = c.grad_out();
        auto gi = c.grad_in(0);
        const auto& x = c.input(0).data;
        for (std::size_t i = 0; i < g.size(); ++i)
            if (x[i] > T{0}) gi[i] += g[i];
    });
}

template <typename T>
Var<T> log(Var<T> a) {
    const auto& x = a.value().data;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!(x[i] > T{0})) {
            throw std::domain_error("log: non-positive input " + std::to_string(x[i]) + " at element " +
                                    std::to_string(i) + " of " + to_string(a.shape()));
        }
    }
    Tensor<T> out = map(a.value(), [](T v) { return std::log(v); });
    return a.tape->record(OpKind::Log, std::move(out), {a.id}, [](BackwardContext<T>& c) {
        auto g = c.grad_out();
        auto gi = c.grad_in(0);
        const auto& x = c.input(0).data;
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] / x[i];
    });
}

template <typename T>
Var<T> exp(Var<T> a) {
    Tensor<T> out = map(a.value(), [](T v) { return std::exp(v); });
    return a.tape->record(OpKind::Exp, std::move(out), {a.id}, [](BackwardContext<T>& c) {
        auto g = c.grad_out();
        auto gi = c.grad_in(0);
        const auto& y = c.output().data;
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * y[i];
    });
}

namespace {

// pick_first(a, b) decides whether the first operand is selected.
template <typename T, typename Pick>
Var<T> select_binary(const char* name, OpKind kind, Var<T> a, Var<T> b, Pick pick_first) {
    auto& tape = same_tape(name, a, b);
    require_same_shape(name, a, b);
    Tensor<T> out(a.shape());
    const auto &av = a.value().data, &bv = b.value().data;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pick_first(av[i], bv[i]) ? av[i] : bv[i];
    return tape.record(kind, std::move(out), {a.id, b.id}, [pick_first](BackwardContext<T>& c) {
        auto g = c.grad_out();
        const auto &av = c.input(0).data, &bv = c.input(1).data;
        auto ga = c.grad_in(0);
        auto gb = c.grad_in(1);
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (pick_first(av[i], bv[i])) {
                if (!ga.empty()) ga[i] += g[i];
            } else if (!gb.empty()) {
                gb[i] += g[i];
            }
        }
    });
}

}  // namespace

template <typename T>
Var<T> minimum(Var<T> a, Var<T> b) {
    return select_binary("minimum", OpKind::Minimum, a, b, [](T x, T y) { return x <= y; });
}

template <typename T>
Var<T> maximum(Var<T> a, Var<T> b) {
    return select_binary("maximum", OpKind::Maximum, a, b, [](T x, T y) { return x >= y; });
}

template <typename T>
Var<T> clamp(Var<T> a, T lo, T hi) {
    if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
    Tensor<T> out = map(a.value(), [lo, hi](T v) { return std::min(std::max(v, lo), hi); });
    return a.tape->record(OpKind::Clamp, std::move(out), {a.id}, [lo, hi](BackwardContext<T>& c) {
        auto g = c.grad_out();
        auto gi = c.grad_in(0);
        const auto& x = c.input(0).data;
        for (std::size_t i = 0; i < g.size(); ++i)
            if (x[i] > lo && x[i] < hi) gi[i] += g[i];
    });
}

template <typename T>
Var<T> sum(Var<T> a) {
    const T acc = compensated_sum(a.value().data);
    return a.tape->record(OpKind::Sum, Tensor<T>::scalar(acc), {a.id}, [](BackwardContext<T>& c) {
        const T g = c.grad_out()[0];
        for (auto& v : c.grad_in(0)) v += g;
    });
}

template <typename T>
Var<T> mean(Var<T> a) {
    if (a.size() == 0) throw std::invalid_argument("mean: empty tensor");
    const T acc = compensated_sum(a.value().data);
    const T inv = T{1} / static_cast<T>(a.size());
    return a.tape->record(OpKind::Mean, Tensor<T>::scalar(acc * inv), {a.id}, [inv](BackwardContext<T>& c) {
        const T g = c.grad_out()[0] * inv;
        for (auto& v : c.grad_in(0)) v += g;
    });
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    auto& tape = same_tape("matmul", a, b);
    const auto &as = a.shape(), &bs = b.shape();
    if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0]) {
        throw std::invalid_argument("matmul: shape mismatch " + to_string(as) + " vs " + to_string(bs));
    }
    const std::size_t m = as[0], k = as[1], n = bs[1];
    Tensor<T> out(Shape{m, n});
    kernels::matmul<T>(m, k, n, a.value().data, b.value().data, out.data);
    return tape.record(OpKind::MatMul, std::move(out), {a.id, b.id}, [m, k, n](BackwardContext<T>& c) {
        auto g = c.grad_out();
        if (auto ga = c.grad_in(0); !ga.empty()) {
            // dA = dC * B^T
            std::vector<T> bt(n * k), tmp(m * k);
            kernels::transpose<T>(k, n, c.input(1).data, bt);
            kernels::matmul<T>(m, n, k, g, bt, tmp);
            for (std::size_t i = 0; i < tmp.size(); ++i) ga[i] += tmp[i];
        }
        if (auto gb = c.grad_in(1); !gb.empty()) {
            // dB = A^T * dC
            std::vector<T> at(k * m), tmp(k * n);
            kernels::transpose<T>(m, k, c.input(0).data, at);
            kernels::matmul<T>(k, m, n, at, g, tmp);
            for (std::size_t i = 0; i < tmp.size(); ++i) gb[i] += tmp[i];
        }
    });
}

namespace {

template <typename T>
Var<T> conv2d_impl(Var<T> x, Var<T> w, const Var<T>* b, std::size_t stride, std::size_t pad) {
    auto& tape = same_tape("conv2d", x, w);
    if (b) same_tape("conv2d", x, *b);
    const auto &xs = x.shape(), &ws = w.shape();
    const bool shapes_ok = xs.size() == 3 && ws.size() == 4 && ws[1] == xs[0] && ws[2] == ws[3] &&
                           (!b || b->shape() == Shape{ws[0]});
    if (!shapes_ok) {
        throw std::invalid_argument("conv2d: shape mismatch input " + to_string(xs) + " vs weight " + to_string(ws) +
                                    (b ? " bias " + to_string(b->shape()) : std::string()));
    }
    if (stride != 1 && stride != 2) throw std::invalid_argument("conv2d: stride must be 1 or 2");
    if (xs[1] + 2 * pad < ws[2] || xs[2] + 2 * pad < ws[2]) {
        throw std::invalid_argument("conv2d: kernel larger than padded input " + to_string(xs));
    }
    kernels::ConvGeometry g{xs[0], xs[1], xs[2], ws[0], ws[2], stride, pad};
    Tensor<T> out(Shape{g.out_channels, g.out_height(), g.out_width()});
    std::span<const T> bias_values;
    if (b) bias_values = b->value().data;
    kernels::conv2d_forward<T>(g, x.value().data, w.value().data, bias_values, out.data);
    std::vector<std::size_t> inputs{x.id, w.id};
    if (b) inputs.push_back(b->id);
    const bool has_bias = b != nullptr;
    return tape.record(OpKind::Conv2d, std::move(out), std::move(inputs), [g, has_bias](BackwardContext<T>& c) {
        auto gout = c.grad_out();
        if (auto gx = c.grad_in(0); !gx.empty())
            kernels::conv2d_backward_input<T>(g, gout, c.input(1).data, gx);
        auto gw = c.grad_in(1);
        std::span<T> gb;
        if (has_bias) gb = c.grad_in(2);
        if (!gw.empty()) {
            kernels::conv2d_backward_weight<T>(g, gout, c.input(0).data, gw, gb);
        } else if (!gb.empty()) {
            const std::size_t plane = g.out_height() * g.out_width();
            for (std::size_t o = 0; o < g.out_channels; ++o)
                for (std::size_t i = 0; i < plane; ++i) gb[o] += gout[o * plane + i];
        }
    });
}

}  // namespace

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, std::size_t stride, std::size_t pad) {
    return conv2d_impl(x, w, &b, stride, pad);
}

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, std::size_t stride, std::size_t pad) {
    return conv2d_impl<T>(x, w, nullptr, stride, pad);
}

template <typename T>
Var<T> upsample2x(Var<T> x) {
    const auto& xs = x.shape();
    if (xs.size() != 3) throw std::invalid_argument("upsample2x: expected [C,H,W], got " + to_string(xs));
    const std::size_t C = xs[0], H = xs[1], W = xs[2];
    Tensor<T> out(Shape{C, 2 * H, 2 * W});
    kernels::upsample2x<T>(C, H, W, x.value().data, out.data);
    return x.tape->record(OpKind::Upsample2x, std::move(out), {x.id}, [C, H, W](BackwardContext<T>& c) {
        kernels::upsample2x_backward<T>(C, H, W, c.grad_out(), c.grad_in(0));
    });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    auto& tape = *parts[0].tape;
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) throw std::invalid_argument("concat: axis out of range for " + to_string(s0));
    Shape out_shape = s0;
    out_shape[axis] = 0;
    std::vector<std::size_t> ids;
    std::vector<std::size_t> extents;
    for (const auto& p : parts) {
        same_tape("concat", parts[0], p);
        const Shape& s = p.shape();
        bool ok = s.size() == s0.size();
        for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == s0[d];
        if (!ok) throw std::invalid_argument("concat: shape mismatch " + to_string(s0) + " vs " + to_string(s));
        out_shape[axis] += s[axis];
        ids.push_back(p.id);
        extents.push_back(s[axis]);
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
    for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];
    Tensor<T> out(out_shape);
    const std::size_t out_row = out_shape[axis] * inner;
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const auto& src = parts[p].value().data;
        const std::size_t row = extents[p] * inner;
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(src.begin() + o * row, row, out.data.begin() + o * out_row + offset);
        offset += row;
    }
    return tape.record(OpKind::Concat, std::move(out), ids, [extents, outer, inner, out_row](BackwardContext<T>& c) {
        auto g = c.grad_out();
        std::size_t offset = 0;
        for (std::size_t p = 0; p < extents.size(); ++p) {
            const std::size_t row = extents[p] * inner;
            if (auto gi = c.grad_in(p); !gi.empty())
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t i = 0; i < row; ++i) gi[o * row + i] += g[o * out_row + offset + i];
            offset += row;
        }
    });
}

template <typename T>
Var<T> softmax(Var<T> a, std::size_t axis) {
    const Shape& s = a.shape();
    if (axis >= s.size()) throw std::invalid_argument("softmax: axis " + std::to_string(axis) + " invalid for " + to_string(s));
    std::size_t outer = 1, inner = 1;
    const std::size_t len = s[axis];
    for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
    for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
    Tensor<T> out(s);
    const auto& x = a.value().data;
    if (inner == 1) {
        kernels::softmax_rows<T>(outer, len, x, out.data);
    } else {
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t base = o * len * inner + i;
                T mx = x[base];
                for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, x[base + j * inner]);
                T total{0};
                for (std::size_t j = 0; j < len; ++j) total += out[base + j * inner] = std::exp(x[base + j * inner] - mx);
                for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= total;
            }
    }
    return a.tape->record(OpKind::Softmax, std::move(out), {a.id}, [outer, inner, len](BackwardContext<T>& c) {
        auto g = c.grad_out();
        auto gi = c.grad_in(0);
        const auto& y = c.output().data;
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t base = o * len * inner + i;
                T dot{0};
                for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
                for (std::size_t j = 0; j < len; ++j) {
                    const std::size_t k = base + j * inner;
                    gi[k] += y[k] * (g[k] - dot);
                }
            }
    });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
    if (numel(shape) != a.size()) {
        throw std::invalid_argument("reshape: shape mismatch " + to_string(a.shape()) + " vs " + to_string(shape));
    }
    Tensor<T> out(std::move(shape), a.value().data);
    return a.tape->record(OpKind::Reshape, std::move(out), {a.id}, [](BackwardContext<T>& c) {
        auto g = c.grad_out();
        auto gi = c.grad_in(0);
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    });
}

template <typename T>
Var<T> transpose(Var<T> a) {
    const Shape& s = a.shape();
    if (s.size() != 2) throw std::invalid_argument("transpose: expected rank 2, got " + to_string(s));
    const std::size_t r = s[0], cols = s[1];
    Tensor<T> out(Shape{cols, r});
    kernels::transpose<T>(r, cols, a.value().data, out.data);
    return a.tape->record(OpKind::Transpose, std::move(out), {a.id}, [r, cols](BackwardContext<T>& c) {
        auto g = c.grad_out();
        auto gi = c.grad_in(0);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < cols; ++j) gi[i * cols + j] += g[j * r + i];
    });
}

template <typename T>
Var<T> select(Var<T> a, std::size_t index) {
    const Shape& s = a.shape();
    if (s.empty() || index >= s[0]) {
        throw std::invalid_argument("select: index " + std::to_string(index) + " out of range for " + to_string(s));
    }
    Shape out_shape(s.begin() + 1, s.end());
    const std::size_t n = numel(out_shape);
    const std::size_t offset = index * n;
    std::vector<T> vals(a.value().data.begin() + offset, a.value().data.begin() + offset + n);
    return a.tape->record(OpKind::Slice, Tensor<T>(std::move(out_shape), std::move(vals)), {a.id},
                          [offset, n](BackwardContext<T>& c) {
                              auto g = c.grad_out();
                              auto gi = c.grad_in(0);
                              for (std::size_t i = 0; i < n; ++i) gi[offset + i] += g[i];
                          });
}

template <typename T>
Var<T> stop_gradient(Var<T> a) {
    return a.tape->constant(a.value());
}

#define CVOS_INSTANTIATE_OPS(T)                                                   \
    template Var<T> add<T>(Var<T>, Var<T>);                                       \
    template Var<T> sub<T>(Var<T>, Var<T>);                                       \
    template Var<T> mul<T>(Var<T>, Var<T>);                                       \
    template Var<T> div<T>(Var<T>, Var<T>);                                       \
    template Var<T> add_scalar<T>(Var<T>, T);                                     \
    template Var<T> mul_scalar<T>(Var<T>, T);                                     \
    template Var<T> sigmoid<T>(Var<T>);                                           \
    template Var<T> relu<T>(Var<T>);                                              \
    template Var<T> log<T>(Var<T>);                                               \
    template Var<T> exp<T>(Var<T>);                                               \
    template Var<T> minimum<T>(Var<T>, Var<T>);                                   \
    template Var<T> maximum<T>(Var<T>, Var<T>);                                   \
    template Var<T> clamp<T>(Var<T>, T, T);                                       \
    template Var<T> sum<T>(Var<T>);                                               \
    template Var<T> mean<T>(Var<T>);                                              \
    template Var<T> matmul<T>(Var<T>, Var<T>);                                    \
    template Var<T> conv2d<T>(Var<T>, Var<T>, Var<T>, std::size_t, std::size_t); \
    template Var<T> conv2d<T>(Var<T>, Var<T>, std::size_t, std::size_t);         \
    template Var<T> upsample2x<T>(Var<T>);                                        \
    template Var<T> concat<T>(const std::vector<Var<T>>&, std::size_t);           \
    template Var<T> softmax<T>(Var<T>, std::size_t);                              \
    template Var<T> reshape<T>(Var<T>, Shape);                                    \
    template Var<T> transpose<T>(Var<T>);                                         \
    template Var<T> select<T>(Var<T>, std::size_t);                               \
    template Var<T> stop_gradient<T>(Var<T>);

CVOS_INSTANTIATE_OPS(float)
CVOS_INSTANTIATE_OPS(double)

#undef CVOS_INSTANTIATE_OPS

}  // namespace ad

namespace {

FiniteDiffReport central_differences(const std::function<Var<double>(Var<double>)>& f, const Tensor<double>& x,
                                     double h, bool skip_kinks) {
    Tape<double> tape;
    auto xv = tape.variable(x);
    auto loss = f(xv);
    const Tensor<double> analytic = tape.backward(loss)[xv];
    const auto base_pattern = skip_kinks ? branch_pattern(tape) : std::vector<std::uint8_t>{};

    bool smooth = true;
    auto eval = [&](const Tensor<double>& point) {
        Tape<double> t;
        const double v = f(t.constant(point)).value().item();
        if (skip_kinks && branch_pattern(t) != base_pattern) smooth = false;
        return v;
    };
    FiniteDiffReport report;
    Tensor<double> probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        smooth = true;
        probe[i] = x[i] + h;
        const double up = eval(probe);
        probe[i] = x[i] - h;
        const double down = eval(probe);
        probe[i] = x[i];
        if (!smooth) {
            ++report.skipped;
            continue;
        }
        const double fd = (up - down) / (2.0 * h);
        const double denom = std::max({std::abs(analytic[i]), std::abs(fd), 1e-8});
        report.max_relative_error = std::max(report.max_relative_error, std::abs(analytic[i] - fd) / denom);
        ++report.checked;
    }
    return report;
}

}  // namespace

template <typename T>
std::vector<std::uint8_t> branch_pattern(const Tape<T>& tape) {
    std::vector<std::uint8_t> pattern;
    for (std::size_t id = 0; id < tape.size(); ++id) {
        const auto& n = tape.node(id);
        switch (n.kind) {
            case OpKind::Relu:
                for (T v : tape.node(n.inputs[0]).value.data) pattern.push_back(v > T{0});
                break;
            case OpKind::Clamp: {
                const auto& in = tape.node(n.inputs[0]).value;
                for (std::size_t i = 0; i < in.size(); ++i) {
                    pattern.push_back(n.value[i] < in[i] ? 2 : (n.value[i] > in[i] ? 1 : 0));
                }
                break;
            }
            case OpKind::Minimum:
            case OpKind::Maximum: {
                const auto& a = tape.node(n.inputs[0]).value;
                const auto& b = tape.node(n.inputs[1]).value;
                for (std::size_t i = 0; i < a.size(); ++i) pattern.push_back(a[i] == b[i] ? 2 : (a[i] < b[i] ? 1 : 0));
                break;
            }
            default:
                break;
        }
    }
    return pattern;
}

double finite_diff_check(const std::function<Var<double>(Var<double>)>& f, const Tensor<double>& x, double h) {
    return central_differences(f, x, h, false).max_relative_error;
}

FiniteDiffReport finite_diff_report(const std::function<Var<double>(Var<double>)>& f, const Tensor<double>& x,
                                    double h) {
    return central_differences(f, x, h, true);
}

template std::vector<std::uint8_t> branch_pattern<float>(const Tape<float>&);
template std::vector<std::uint8_t> branch_pattern<double>(const Tape<double>&);

template struct Var<float>;
template struct Var<double>;
template class Gradients<float>;
template class Gradients<double>;
template class BackwardContext<float>;
template class BackwardContext<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace cvos

#include "cvos/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <string>
#include <vector>

namespace cvos::kernels {

namespace {

using isize = std::ptrdiff_t;

// Output index range [lo, hi) whose sampled input coordinate o*stride + k - pad
// lands inside [0, extent).
struct Span1D {
    isize lo;
    isize hi;
};

Span1D valid_range(isize out_extent, isize in_extent, isize k, isize stride, isize pad) {
    // smallest o with o*stride + k - pad >= 0
    isize lo = pad - k <= 0 ? 0 : (pad - k + stride - 1) / stride;
    // largest o with o*stride + k - pad <= in_extent - 1
    isize num = in_extent - 1 + pad - k;
    isize hi = num < 0 ? 0 : num / stride + 1;
    return {std::min(lo, out_extent), std::min(hi, out_extent)};
}

// Rows of the patch matrix are (c, ky, kx); columns are output positions.
template <typename T>
void im2col(const ConvGeometry& g, const T* in, T* col) {
    const isize C = g.in_channels, H = g.in_height, W = g.in_width;
    const isize K = g.kernel, S = g.stride, P = g.pad;
    const isize OH = g.out_height(), OW = g.out_width();
#pragma omp parallel for schedule(static)
    for (isize r = 0; r < C * K * K; ++r) {
        const isize c = r / (K * K), ky = (r / K) % K, kx = r % K;
        const T* src = in + c * H * W;
        T* dst = col + r * OH * OW;
        std::fill(dst, dst + OH * OW, T{0});
        const Span1D ys = valid_range(OH, H, ky, S, P);
        const Span1D xs = valid_range(OW, W, kx, S, P);
        for (isize oy = ys.lo; oy < ys.hi; ++oy) {
            const T* row = src + (oy * S + ky - P) * W + (kx - P);
            T* d = dst + oy * OW;
            if (S == 1) {
                std::copy(row + xs.lo, row + xs.hi, d + xs.lo);
            } else {
                for (isize ox = xs.lo; ox < xs.hi; ++ox) d[ox] = row[ox * S];
            }
        }
    }
}

// Adds each patch-matrix entry back onto the input location it was read from.
template <typename T>
void col2im_add(const ConvGeometry& g, const T* col, T* in) {
    const isize C = g.in_channels, H = g.in_height, W = g.in_width;
    const isize K = g.kernel, S = g.stride, P = g.pad;
    const isize OH = g.out_height(), OW = g.out_width();
#pragma omp parallel for schedule(static)
    for (isize c = 0; c < C; ++c) {
        T* dst = in + c * H * W;
        for (isize ky = 0; ky < K; ++ky) {
            const Span1D ys = valid_range(OH, H, ky, S, P);
            for (isize kx = 0; kx < K; ++kx) {
                const Span1D xs = valid_range(OW, W, kx, S, P);
                const T* src = col + ((c * K + ky) * K + kx) * OH * OW;
                for (isize oy = ys.lo; oy < ys.hi; ++oy) {
                    T* row = dst + (oy * S + ky - P) * W + (kx - P);
                    const T* s = src + oy * OW;
                    if (S == 1) {
                        for (isize ox = xs.lo; ox < xs.hi; ++ox) row[ox] += s[ox];
                    } else {
                        for (isize ox = xs.lo; ox < xs.hi; ++ox) row[ox * S] += s[ox];
                    }
                }
            }
        }
    }
}

bool is_pointwise(const ConvGeometry& g) { return g.kernel == 1 && g.stride == 1 && g.pad == 0; }

template <typename T>
std::vector<T>& scratch() {
    thread_local std::vector<T> buffer;
    return buffer;
}

// sum_p a[p] * b[p] with eight interleaved partial sums in a fixed order.
template <typename T>
T dot(const T* a, const T* b, isize n) {
    constexpr isize kLanes = 8;
    T lanes[kLanes] = {};
    isize p = 0;
    for (; p + kLanes <= n; p += kLanes)
        for (isize l = 0; l < kLanes; ++l) lanes[l] += a[p + l] * b[p + l];
    T acc{0};
    for (isize l = 0; l < kLanes; ++l) acc += lanes[l];
    for (; p < n; ++p) acc += a[p] * b[p];
    return acc;
}

template <typename T>
const T* patches(const ConvGeometry& g, const T* in) {
    if (is_pointwise(g)) return in;
    auto& buf = scratch<T>();
    buf.resize(g.in_channels * g.kernel * g.kernel * g.out_height() * g.out_width());
    im2col(g, in, buf.data());
    return buf.data();
}

}  // namespace

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> in, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> out) {
    const isize O = g.out_channels, R = g.in_channels * g.kernel * g.kernel;
    const isize N = g.out_height() * g.out_width();
    const T* col = patches(g, in.data());
    const T* w_p = weight.data();
    T* out_p = out.data();
    const bool has_bias = !bias.empty();

#pragma omp parallel for schedule(static)
    for (isize o = 0; o < O; ++o) {
        T* dst = out_p + o * N;
        std::fill(dst, dst + N, has_bias ? bias[o] : T{0});
        for (isize r = 0; r < R; ++r) {
            const T w = w_p[o * R + r];
            const T* src = col + r * N;
            for (isize p = 0; p < N; ++p) dst[p] += w * src[p];
        }
    }
}

template <typename T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> grad_out, std::span<const T> weight,
                           std::span<T> grad_in) {
    const isize O = g.out_channels, R = g.in_channels * g.kernel * g.kernel;
    const isize N = g.out_height() * g.out_width();
    const T* go_p = grad_out.data();
    const T* w_p = weight.data();
    const bool pointwise = is_pointwise(g);
    std::vector<T> local;
    T* gcol;
    if (pointwise) {
        local.assign(static_cast<std::size_t>(R * N), T{0});
        gcol = local.data();
    } else {
        auto& buf = scratch<T>();
        buf.resize(static_cast<std::size_t>(R * N));
        gcol = buf.data();
    }

#pragma omp parallel for schedule(static)
    for (isize r = 0; r < R; ++r) {
        T* dst = gcol + r * N;
        std::fill(dst, dst + N, T{0});
        for (isize o = 0; o < O; ++o) {
            const T w = w_p[o * R + r];
            const T* src = go_p + o * N;
            for (isize p = 0; p < N; ++p) dst[p] += w * src[p];
        }
    }
    if (pointwise) {
        T* gi = grad_in.data();
        for (isize i = 0; i < R * N; ++i) gi[i] += gcol[i];
    } else {
        col2im_add(g, gcol, grad_in.data());
    }
}

template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, std::span<const T> grad_out, std::span<const T> in,
                            std::span<T> grad_weight, std::span<T> grad_bias) {
    const isize O = g.out_channels, R = g.in_channels * g.kernel * g.kernel;
    const isize N = g.out_height() * g.out_width();
    const T* col = patches(g, in.data());
    const T* go_p = grad_out.data();
    T* gw_p = grad_weight.data();
    const bool has_bias = !grad_bias.empty();

    if (has_bias) {
        for (isize o = 0; o < O; ++o) {
            const T* gplane = go_p + o * N;
            T acc{0};
            for (isize i = 0; i < N; ++i) acc += gplane[i];
            grad_bias[o] += acc;
        }
    }
    std::vector<T> col_t(static_cast<std::size_t>(R * N));
    transpose(static_cast<std::size_t>(R), static_cast<std::size_t>(N), std::span<const T>(col, R * N),
              std::span<T>(col_t));
#pragma omp parallel for schedule(static)
    for (isize o = 0; o < O; ++o) {
        std::vector<T> acc(static_cast<std::size_t>(R), T{0});
        const T* gplane = go_p + o * N;
        for (isize p = 0; p < N; ++p) {
            const T a = gplane[p];
            if (a == T{0}) continue;
            const T* src = col_t.data() + p * R;
            for (isize r = 0; r < R; ++r) acc[r] += a * src[r];
        }
        for (isize r = 0; r < R; ++r) gw_p[o * R + r] += acc[r];
    }
}

template <typename T>
void matmul(std::size_t m, std::size_t k, std::size_t n, std::span<const T> a, std::span<const T> b,
            std::span<T> c) {
    const T* a_p = a.data();
    const T* b_p = b.data();
    T* c_p = c.data();
    const isize M = static_cast<isize>(m), Kd = static_cast<isize>(k), N = static_cast<isize>(n);

#pragma omp parallel for schedule(static)
    for (isize i = 0; i < M; ++i) {
        T* crow = c_p + i * N;
        std::fill(crow, crow + N, T{0});
        for (isize kk = 0; kk < Kd; ++kk) {
            const T av = a_p[i * Kd + kk];
            const T* brow = b_p + kk * N;
            for (isize j = 0; j < N; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename T>
void transpose(std::size_t rows, std::size_t cols, std::span<const T> in, std::span<T> out) {
    constexpr std::size_t kBlock = 32;
    for (std::size_t r0 = 0; r0 < rows; r0 += kBlock) {
        for (std::size_t c0 = 0; c0 < cols; c0 += kBlock) {
            const std::size_t r1 = std::min(rows, r0 + kBlock), c1 = std::min(cols, c0 + kBlock);
            for (std::size_t r = r0; r < r1; ++r)
                for (std::size_t cc = c0; cc < c1; ++cc) out[cc * rows + r] = in[r * cols + cc];
        }
    }
}

template <typename T>
void softmax_rows(std::size_t rows, std::size_t cols, std::span<const T> in, std::span<T> out) {
    const isize R = static_cast<isize>(rows);
#pragma omp parallel for schedule(static)
    for (isize r = 0; r < R; ++r) {
        const T* src = in.data() + r * cols;
        T* dst = out.data() + r * cols;
        T mx = src[0];
        for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, src[j]);
        T sum{0};
        for (std::size_t j = 0; j < cols; ++j) {
            dst[j] = std::exp(src[j] - mx);
            sum += dst[j];
        }
        const T inv = T{1} / sum;
        for (std::size_t j = 0; j < cols; ++j) dst[j] *= inv;
    }
}

template <typename T>
void upsample2x(std::size_t channels, std::size_t height, std::size_t width, std::span<const T> in,
                std::span<T> out) {
    const std::size_t ow = 2 * width;
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t y = 0; y < height; ++y) {
            const T* src = in.data() + (c * height + y) * width;
            T* d0 = out.data() + (c * 2 * height + 2 * y) * ow;
            for (std::size_t x = 0; x < width; ++x) d0[2 * x] = d0[2 * x + 1] = src[x];
            std::copy(d0, d0 + ow, d0 + ow);
        }
    }
}

template <typename T>
void upsample2x_backward(std::size_t channels, std::size_t height, std::size_t width,
                         std::span<const T> grad_out, std::span<T> grad_in) {
    const std::size_t ow = 2 * width;
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t y = 0; y < height; ++y) {
            const T* r0 = grad_out.data() + (c * 2 * height + 2 * y) * ow;
            const T* r1 = r0 + ow;
            T* dst = grad_in.data() + (c * height + y) * width;
            for (std::size_t x = 0; x < width; ++x)
                dst[x] += (r0[2 * x] + r0[2 * x + 1]) + (r1[2 * x] + r1[2 * x + 1]);
        }
    }
}

namespace reference {

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> in, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> out) {
    const isize C = g.in_channels, H = g.in_height, W = g.in_width, O = g.out_channels;
    const isize K = g.kernel, S = g.stride, P = g.pad;
    const isize OH = g.out_height(), OW = g.out_width();
    for (isize o = 0; o < O; ++o)
        for (isize y = 0; y < OH; ++y)
            for (isize x = 0; x < OW; ++x) {
                T acc = bias.empty() ? T{0} : bias[o];
                for (isize c = 0; c < C; ++c)
                    for (isize ky = 0; ky < K; ++ky)
                        for (isize kx = 0; kx < K; ++kx) {
                            const isize iy = y * S + ky - P, ix = x * S + kx - P;
                            if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                            acc += weight[((o * C + c) * K + ky) * K + kx] * in[(c * H + iy) * W + ix];
                        }
                out[(o * OH + y) * OW + x] = acc;
            }
}

template <typename T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> grad_out, std::span<const T> weight,
                           std::span<T> grad_in) {
    const isize C = g.in_channels, H = g.in_height, W = g.in_width, O = g.out_channels;
    const isize K = g.kernel, S = g.stride, P = g.pad;
    const isize OH = g.out_height(), OW = g.out_width();
    for (isize o = 0; o < O; ++o)
        for (isize y = 0; y < OH; ++y)
            for (isize x = 0; x < OW; ++x)
                for (isize c = 0; c < C; ++c)
                    for (isize ky = 0; ky < K; ++ky)
                        for (isize kx = 0; kx < K; ++kx) {
                            const isize iy = y * S + ky - P, ix = x * S + kx - P;
                            if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                            grad_in[(c * H + iy) * W + ix] +=
                                weight[((o * C + c) * K + ky) * K + kx] * grad_out[(o * OH + y) * OW + x];
                        }
}

template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, std::span<const T> grad_out, std::span<const T> in,
                            std::span<T> grad_weight, std::span<T> grad_bias) {
    const isize C = g.in_channels, H = g.in_height, W = g.in_width, O = g.out_channels;
    const isize K = g.kernel, S = g.stride, P = g.pad;
    const isize OH = g.out_height(), OW = g.out_width();
    for (isize o = 0; o < O; ++o)
        for (isize y = 0; y < OH; ++y)
            for (isize x = 0; x < OW; ++x) {
                const T go = grad_out[(o * OH + y) * OW + x];
                if (!grad_bias.empty()) grad_bias[o] += go;
                for (isize c = 0; c < C; ++c)
                    for (isize ky = 0; ky < K; ++ky)
                        for (isize kx = 0; kx < K; ++kx) {
                            const isize iy = y * S + ky - P, ix = x * S + kx - P;
                            if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                            grad_weight[((o * C + c) * K + ky) * K + kx] += go * in[(c * H + iy) * W + ix];
                        }
            }
}

template <typename T>
void matmul(std::size_t m, std::size_t k, std::size_t n, std::span<const T> a, std::span<const T> b,
            std::span<T> c) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            T acc{0};
            for (std::size_t kk = 0; kk < k; ++kk) acc += a[i * k + kk] * b[kk * n + j];
            c[i * n + j] = acc;
        }
}

template <typename T>
void softmax_rows(std::size_t rows, std::size_t cols, std::span<const T> in, std::span<T> out) {
    for (std::size_t r = 0; r < rows; ++r) {
        T mx = in[r * cols];
        for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, in[r * cols + j]);
        T sum{0};
        for (std::size_t j = 0; j < cols; ++j) sum += std::exp(in[r * cols + j] - mx);
        for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = std::exp(in[r * cols + j] - mx) / sum;
    }
}

}  // namespace reference

void set_threads(int n) {
    if (n > 0) omp_set_num_threads(n);
}

void configure_threads() {
    if (const char* env = std::getenv("CYCLEVOS_THREADS")) {
        try {
            set_threads(std::stoi(env));
        } catch (const std::exception&) {
            // unparsable value: keep the runtime default
        }
    }
}

int max_threads() { return omp_get_max_threads(); }

#define CVOS_INSTANTIATE_KERNELS(T)                                                                       \
    template void conv2d_forward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,         \
                                    std::span<const T>, std::span<T>);                                   \
    template void conv2d_backward_input<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,  \
                                           std::span<T>);                                                \
    template void conv2d_backward_weight<T>(const ConvGeometry&, std::span<const T>, std::span<const T>, \
                                            std::span<T>, std::span<T>);                                 \
    template void matmul<T>(std::size_t, std::size_t, std::size_t, std::span<const T>,                   \
                            std::span<const T>, std::span<T>);                                           \
    template void transpose<T>(std::size_t, std::size_t, std::span<const T>, std::span<T>);              \
    template void softmax_rows<T>(std::size_t, std::size_t, std::span<const T>, std::span<T>);           \
    template void upsample2x<T>(std::size_t, std::size_t, std::size_t, std::span<const T>, std::span<T>); \
    template void upsample2x_backward<T>(std::size_t, std::size_t, std::size_t, std::span<const T>,      \
                                         std::span<T>);                                                  \
    template void reference::conv2d_forward<T>(const ConvGeometry&, std::span<const T>,                  \
                                               std::span<const T>, std::span<const T>, std::span<T>);    \
    template void reference::conv2d_backward_input<T>(const ConvGeometry&, std::span<const T>,           \
                                                      std::span<const T>, std::span<T>);                 \
    template void reference::conv2d_backward_weight<T>(const ConvGeometry&, std::span<const T>,          \
                                                       std::span<const T>, std::span<T>, std::span<T>);  \
    template void reference::matmul<T>(std::size_t, std::size_t, std::size_t, std::span<const T>,        \
                                       std::span<const T>, std::span<T>);                                \
    template void reference::softmax_rows<T>(std::size_t, std::size_t, std::span<const T>, std::span<T>);

CVOS_INSTANTIATE_KERNELS(float)
CVOS_INSTANTIATE_KERNELS(double)

#undef CVOS_INSTANTIATE_KERNELS

}  // namespace cvos::kernels

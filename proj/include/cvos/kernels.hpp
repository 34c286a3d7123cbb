#pragma once

// Compute kernels behind the autodiff ops. Two implementations share one
// signature set:
//
//   cvos::kernels            OpenMP-parallel versions used by the library.
//   cvos::kernels::reference plain serial loops, kept as the test oracle and
//                            benchmark baseline.
//
// All tensors are dense row-major. Convolutions operate on a single CHW image
// with OIHW weights. The parallel kernels partition work so that every output
// element is accumulated by exactly one thread in a fixed order, which keeps
// results independent of the thread count.

#include <cstddef>
#include <span>

namespace cvos::kernels {

struct ConvGeometry {
    std::size_t in_channels = 0;
    std::size_t in_height = 0;
    std::size_t in_width = 0;
    std::size_t out_channels = 0;
    std::size_t kernel = 3;
    std::size_t stride = 1;
    std::size_t pad = 1;

    std::size_t out_height() const { return (in_height + 2 * pad - kernel) / stride + 1; }
    std::size_t out_width() const { return (in_width + 2 * pad - kernel) / stride + 1; }
};

// out[o] = bias[o] + sum_c,ky,kx w[o,c,ky,kx] * in[c, y*s+ky-p, x*s+kx-p]
template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> in, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> out);

// Accumulates (+=) the input gradient.
template <typename T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> grad_out, std::span<const T> weight,
                           std::span<T> grad_in);

// Accumulates (+=) weight and bias gradients. grad_bias may be empty.
template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, std::span<const T> grad_out, std::span<const T> in,
                            std::span<T> grad_weight, std::span<T> grad_bias);

// c[m,n] = sum_k a[m,k] * b[k,n]  (overwrites c)
template <typename T>
void matmul(std::size_t m, std::size_t k, std::size_t n, std::span<const T> a, std::span<const T> b,
            std::span<T> c);

// out[cols, rows] = in[rows, cols]^T
template <typename T>
void transpose(std::size_t rows, std::size_t cols, std::span<const T> in, std::span<T> out);

// Softmax over each contiguous row of length cols.
template <typename T>
void softmax_rows(std::size_t rows, std::size_t cols, std::span<const T> in, std::span<T> out);

// Nearest-neighbour x2 upsampling of a CHW image.
template <typename T>
void upsample2x(std::size_t channels, std::size_t height, std::size_t width, std::span<const T> in,
                std::span<T> out);

// Accumulates (+=) the gradient of upsample2x.
template <typename T>
void upsample2x_backward(std::size_t channels, std::size_t height, std::size_t width,
                         std::span<const T> grad_out, std::span<T> grad_in);

namespace reference {

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> in, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> out);
template <typename T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> grad_out, std::span<const T> weight,
                           std::span<T> grad_in);
template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, std::span<const T> grad_out, std::span<const T> in,
                            std::span<T> grad_weight, std::span<T> grad_bias);
template <typename T>
void matmul(std::size_t m, std::size_t k, std::size_t n, std::span<const T> a, std::span<const T> b,
            std::span<T> c);
template <typename T>
void softmax_rows(std::size_t rows, std::size_t cols, std::span<const T> in, std::span<T> out);

}  // namespace reference

// Caps OpenMP parallelism (0 leaves the runtime default). Reads
// CYCLEVOS_THREADS when called with no argument.
void configure_threads();
void set_threads(int n);
int max_threads();

}  // namespace cvos::kernels

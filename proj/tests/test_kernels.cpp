// Parallel kernels against the serial reference implementations.

#include <omp.h>

#include <cmath>
#include <random>

#include "cvos/kernels.hpp"
#include "doctest.h"
#include "test_helpers.hpp"

using namespace cvos;
using cvos::testing::random_tensor;

namespace {

template <typename T>
double max_abs_diff(const std::vector<T>& a, const std::vector<T>& b) {
    REQUIRE(a.size() == b.size());
    double worst = 0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(double(a[i]) - double(b[i])));
    return worst;
}

struct ThreadGuard {
    int saved = omp_get_max_threads();
    ~ThreadGuard() { omp_set_num_threads(saved); }
};

}  // namespace

TEST_CASE_TEMPLATE("conv2d kernels agree with the reference", T, float, double) {
    std::mt19937_64 rng(1);
    const double tol = std::is_same_v<T, float> ? 1e-5 : 1e-12;
    for (std::size_t stride : {1u, 2u}) {
        for (std::size_t kernel : {1u, 3u}) {
            kernels::ConvGeometry g{5, 13, 10, 7, kernel, stride, kernel / 2};
            auto in = random_tensor<T>(Shape{5, 13, 10}, rng);
            auto w = random_tensor<T>(Shape{7, 5, kernel, kernel}, rng);
            auto b = random_tensor<T>(Shape{7}, rng);
            auto gout = random_tensor<T>(Shape{7, g.out_height(), g.out_width()}, rng);
            Tensor<T> out(gout.shape), ref(gout.shape);
            kernels::conv2d_forward<T>(g, in.data, w.data, b.data, out.data);
            kernels::reference::conv2d_forward<T>(g, in.data, w.data, b.data, ref.data);
            CHECK(max_abs_diff(out.data, ref.data) < tol);

            Tensor<T> gi(in.shape), gi_ref(in.shape);
            kernels::conv2d_backward_input<T>(g, gout.data, w.data, gi.data);
            kernels::reference::conv2d_backward_input<T>(g, gout.data, w.data, gi_ref.data);
            CHECK(max_abs_diff(gi.data, gi_ref.data) < tol);

            Tensor<T> gw(w.shape), gw_ref(w.shape), gb(b.shape), gb_ref(b.shape);
            kernels::conv2d_backward_weight<T>(g, gout.data, in.data, gw.data, gb.data);
            kernels::reference::conv2d_backward_weight<T>(g, gout.data, in.data, gw_ref.data, gb_ref.data);
            CHECK(max_abs_diff(gw.data, gw_ref.data) < tol * 10);
            CHECK(max_abs_diff(gb.data, gb_ref.data) < tol * 10);
        }
    }
}

TEST_CASE_TEMPLATE("matmul and softmax kernels agree with the reference", T, float, double) {
    std::mt19937_64 rng(2);
    const double tol = std::is_same_v<T, float> ? 1e-5 : 1e-12;
    auto a = random_tensor<T>(Shape{17, 9}, rng);
    auto b = random_tensor<T>(Shape{9, 23}, rng);
    Tensor<T> c(Shape{17, 23}), c_ref(Shape{17, 23});
    kernels::matmul<T>(17, 9, 23, a.data, b.data, c.data);
    kernels::reference::matmul<T>(17, 9, 23, a.data, b.data, c_ref.data);
    CHECK(max_abs_diff(c.data, c_ref.data) < tol);

    auto s = random_tensor<T>(Shape{11, 31}, rng, -5, 5);
    Tensor<T> y(s.shape), y_ref(s.shape);
    kernels::softmax_rows<T>(11, 31, s.data, y.data);
    kernels::reference::softmax_rows<T>(11, 31, s.data, y_ref.data);
    CHECK(max_abs_diff(y.data, y_ref.data) < tol);
}

TEST_CASE("parallel kernels are bit-identical across thread counts") {
    ThreadGuard guard;
    std::mt19937_64 rng(3);
    kernels::ConvGeometry g{8, 32, 32, 16, 3, 2, 1};
    auto in = random_tensor<float>(Shape{8, 32, 32}, rng);
    auto w = random_tensor<float>(Shape{16, 8, 3, 3}, rng);
    auto b = random_tensor<float>(Shape{16}, rng);
    auto gout = random_tensor<float>(Shape{16, 16, 16}, rng);
    auto run = [&](int threads) {
        omp_set_num_threads(threads);
        Tensor<float> out(Shape{16, 16, 16}), gi(in.shape), gw(w.shape), gb(b.shape), mm(Shape{32, 16});
        kernels::conv2d_forward<float>(g, in.data, w.data, b.data, out.data);
        kernels::conv2d_backward_input<float>(g, gout.data, w.data, gi.data);
        kernels::conv2d_backward_weight<float>(g, gout.data, in.data, gw.data, gb.data);
        kernels::matmul<float>(32, 16, 16, std::span<const float>(in.data).first(32 * 16),
                               std::span<const float>(gout.data).first(16 * 16), mm.data);
        return std::vector<Tensor<float>>{out, gi, gw, gb, mm};
    };
    auto one = run(1);
    auto four = run(4);
    for (std::size_t i = 0; i < one.size(); ++i) CHECK(one[i] == four[i]);
}

TEST_CASE("upsample and its adjoint") {
    Tensor<float> in(Shape{1, 2, 2}, {1, 2, 3, 4});
    Tensor<float> out(Shape{1, 4, 4});
    kernels::upsample2x<float>(1, 2, 2, in.data, out.data);
    CHECK(out.data == std::vector<float>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4});
    Tensor<float> back(Shape{1, 2, 2});
    kernels::upsample2x_backward<float>(1, 2, 2, out.data, back.data);
    CHECK(back.data == std::vector<float>{4, 8, 12, 16});
}

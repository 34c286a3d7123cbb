#pragma once

#include <random>

#include "cvos/tensor.hpp"

namespace cvos::testing {

template <typename T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<T>(dist(rng));
    return t;
}

}  // namespace cvos::testing

#pragma once

// Shared helpers for the test binaries.

#include <functional>

#include "vivim/rng.hpp"
#include "vivim/tensor.hpp"

namespace vtest {

// Gradient check through an arbitrary tensor-valued op: contract the output
// against a fixed random weight so the adjoint is nondegenerate everywhere.
template <class Op>
double fd(Op op, const vivim::Tensor& x0, double h = 1e-4,
          const std::vector<std::size_t>* coords = nullptr) {
    vivim::Tensor probe;
    {
        vivim::NoGradGuard ng;
        probe = op(x0);
    }
    vivim::Rng rng(99);
    vivim::Tensor wfix = vivim::Tensor::randn(probe.shape(), rng);
    std::function<vivim::Tensor(const vivim::Tensor&)> f =
        [op, wfix](const vivim::Tensor& x) { return sum_all(mul(op(x), wfix)); };
    return vivim::finite_diff_check<double>(f, x0, h, coords);
}

inline vivim::Tensor randt(vivim::Shape shape, std::uint64_t seed, double stddev = 1.0) {
    vivim::Rng rng(seed);
    return vivim::Tensor::randn(std::move(shape), rng, stddev);
}

inline double max_abs_diff(const vivim::Tensor& a, const vivim::Tensor& b) {
    if (a.shape() != b.shape()) throw vivim::ShapeError("max_abs_diff: shape mismatch");
    double m = 0.0;
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(pa[i] - pb[i]));
    return m;
}

}  // namespace vtest

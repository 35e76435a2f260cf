#pragma once

#include <doctest.h>

#include <functional>
#include <vector>

#include "dex/kernels.hpp"
#include "dex/ops.hpp"
#include "dex/rng.hpp"
#include "dex/tensor.hpp"

namespace dextest {

inline double rel_err(double a, double b) {
    const double denom = std::max({std::abs(a), std::abs(b), 1e-3});
    return std::abs(a - b) / denom;
}

// Central finite differences against the tape for an arbitrary op graph.
// The op output is projected to a scalar through a fixed random weighting so
// every output coordinate contributes to the check.
inline void check_op_gradients(std::vector<dex::Tensor<double>> inputs,
                               const std::function<dex::Tensor<double>()> &op, double h = 1e-5,
                               double tol = 1e-6, uint64_t seed = 99) {
    dex::Rng wrng(seed);
    dex::Tensor<double> w;

    auto loss_value = [&]() {
        auto out = op();
        if (!w.defined()) w = dex::Tensor<double>::randn(out.shape(), wrng, 1.0);
        return dex::kernels<double>().dot(out.data(), w.data(), out.numel());
    };

    for (auto &in : inputs) in.zero_grad();
    {
        dex::Tape<double> tape;
        auto out = op();
        if (!w.defined()) w = dex::Tensor<double>::randn(out.shape(), wrng, 1.0);
        auto loss = dex::sum(dex::mul(out, w));
        tape.backward(loss);
    }

    for (size_t t = 0; t < inputs.size(); ++t) {
        auto &in = inputs[t];
        REQUIRE(in.requires_grad());
        for (int64_t i = 0; i < in.numel(); ++i) {
            const double orig = in.data()[i];
            in.data()[i] = orig + h;
            const double up = loss_value();
            in.data()[i] = orig - h;
            const double down = loss_value();
            in.data()[i] = orig;
            const double numeric = (up - down) / (2 * h);
            const double analytic = in.has_grad() ? in.grad()[i] : 0.0;
            INFO("input ", t, " coord ", i, " analytic=", analytic, " numeric=", numeric);
            CHECK(rel_err(analytic, numeric) < tol);
        }
    }
}

inline dex::Tensor<double> randt(dex::Shape shape, dex::Rng &rng, bool rg = true,
                                 double stddev = 1.0) {
    return dex::Tensor<double>::randn(std::move(shape), rng, stddev, rg);
}

}  // namespace dextest

#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "dhm/tensor.hpp"

namespace dhm::testing {

inline std::mt19937_64 test_rng(unsigned seed = 12345) { return std::mt19937_64(seed); }

template <class T>
Tensor<T> random_tensor(std::vector<int> shape, std::mt19937_64& rng, T lo = T(-1), T hi = T(1)) {
    Tensor<T> t(std::move(shape));
    std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
    for (auto& v : t.values()) v = static_cast<T>(dist(rng));
    return t;
}

// Central finite differences of forward() w.r.t. every element of param.
inline std::vector<double> fd_grad(Tensor<double>& param, const std::function<double()>& forward,
                                   double h = 1e-5) {
    std::vector<double> g(param.size());
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double orig = param.data()[i];
        param.data()[i] = orig + h;
        const double fp = forward();
        param.data()[i] = orig - h;
        const double fm = forward();
        param.data()[i] = orig;
        g[i] = (fp - fm) / (2 * h);
    }
    return g;
}

// Element-wise relative error check over elements with |grad| above a floor.
inline void check_grads_close(const double* analytic, const std::vector<double>& fd,
                              double rel_tol = 1e-6, double floor = 1e-8) {
    for (std::size_t i = 0; i < fd.size(); ++i) {
        const double a = analytic[i], b = fd[i];
        const double scale = std::max(std::abs(a), std::abs(b));
        if (scale < floor) continue;
        CHECK(std::abs(a - b) / scale <= rel_tol);
    }
}

}  // namespace dhm::testing

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "dhm/ops.hpp"
#include "dhm/tensor.hpp"

namespace dhm {

// Local binary convolution: a frozen sparse ternary convolution followed by
// ReLU and a trainable 1x1 combiner. Only the combiner ever learns.
template <class T>
struct LbcLayer {
    Parameter<T> fixed;          // [inter, in, kH, kW], entries in {-1,0,+1}, trainable=false
    Parameter<T> combiner;       // [out, inter, 1, 1]
    Parameter<T> combiner_bias;  // [out], zero-initialized
    int stride = 1;
    int pad = 0;
};

// Exactly round(sparsity * total) entries are nonzero; positions drawn
// uniformly without replacement, signs i.i.d. +-1.
template <class T>
Tensor<T> make_ternary_kernel(std::vector<int> shape, double sparsity_level, std::mt19937_64& rng) {
    if (sparsity_level <= 0.0 || sparsity_level > 1.0)
        throw ConfigError("sparsity_level must be in (0,1], got " + std::to_string(sparsity_level));
    Tensor<T> k(std::move(shape));
    const std::size_t total = k.size();
    const std::size_t nonzero = static_cast<std::size_t>(std::llround(sparsity_level * static_cast<double>(total)));
    if (nonzero == 0) throw ConfigError("sparsity_level rounds to zero nonzero kernel entries");
    std::vector<std::size_t> idx(total);
    std::iota(idx.begin(), idx.end(), std::size_t(0));
    std::shuffle(idx.begin(), idx.end(), rng);
    std::bernoulli_distribution coin(0.5);
    for (std::size_t i = 0; i < nonzero; ++i) k.data()[idx[i]] = coin(rng) ? T(1) : T(-1);
    return k;
}

template <class T>
LbcLayer<T> init_lbc(int in_ch, int out_ch, int kh, int kw, int stride, int pad,
                     double sparsity_level, int intermediate_channels, std::mt19937_64& rng,
                     const std::string& name = {}) {
    if (intermediate_channels < 1) throw ConfigError("intermediate_channels must be >= 1");
    LbcLayer<T> l;
    l.stride = stride;
    l.pad = pad;
    l.fixed = Parameter<T>(make_ternary_kernel<T>({intermediate_channels, in_ch, kh, kw},
                                                  sparsity_level, rng),
                           /*trainable=*/false, name + ".fixed");
    l.fixed.value.set_requires_grad(false);

    Tensor<T> comb({out_ch, intermediate_channels, 1, 1});
    const T bound = static_cast<T>(std::sqrt(1.0 / intermediate_channels));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : comb.values()) v = static_cast<T>(dist(rng));
    l.combiner = Parameter<T>(std::move(comb), true, name + ".comb");
    l.combiner_bias = Parameter<T>(Tensor<T>({out_ch}), true, name + ".comb_b");
    return l;
}

template <class T>
Tensor<T> lbc_forward(const LbcLayer<T>& layer, const Tensor<T>& input) {
    auto maps = ops::conv2d(input, layer.fixed.value, nullptr, layer.stride, layer.pad);
    return ops::conv2d(ops::relu(maps), layer.combiner.value, &layer.combiner_bias.value, 1, 0);
}

}  // namespace dhm

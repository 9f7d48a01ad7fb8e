#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "dhm/tree.hpp"

namespace dhm {

// Guards the log for 32-bit underflow in deep trees.
inline constexpr double kLikelihoodEps = 1e-12;

// P(y|x) = sum over leaves of w_i * p_i(y).
template <class T>
T likelihood(const TreeTopology<T>& tree, const Tensor<T>& input, int label) {
    if (label < 0 || label >= tree.leaf_dim) throw ConfigError("label out of range");
    auto rs = route(tree, input);
    T p = T(0);
    for (int j = 0; j < tree.n_leaves(); ++j)
        p += rs.weights[j] * tree.leaf_values[j][static_cast<std::size_t>(label)];
    return p;
}

// Per-sample likelihoods over a dataset, from precomputed scores [n_div][N].
template <class T>
std::vector<T> likelihoods_from_scores(const TreeTopology<T>& tree, const std::vector<T>& scores,
                                       int n, const std::vector<int>& labels) {
    const int n_div = tree.n_div();
    std::vector<const T*> rows(n_div);
    for (int i = 0; i < n_div; ++i) rows[i] = scores.data() + static_cast<std::size_t>(i) * n;
    auto w = leaf_weights_from_scores<T>(tree.depth, rows, n);
    std::vector<T> lik(static_cast<std::size_t>(n), T(0));
    for (int j = 0; j < tree.n_leaves(); ++j) {
        const T* wj = w.data() + static_cast<std::size_t>(j) * n;
        const auto& p = tree.leaf_values[j];
        for (int b = 0; b < n; ++b) lik[b] += wj[b] * p[static_cast<std::size_t>(labels[b])];
    }
    return lik;
}

// -sum_i log P(y_i | x_i)
template <class T>
double nll_loss(const TreeTopology<T>& tree, const Tensor<T>& images, const std::vector<int>& labels) {
    const int n = images.dim(0);
    if (n == 0) throw ConfigError("nll_loss on empty batch");
    if (static_cast<int>(labels.size()) != n) throw ShapeError("label count mismatch");
    auto lik = likelihoods_from_scores(tree, all_scores(tree, images), n, labels);
    double loss = 0;
    for (auto p : lik) loss -= std::log(std::max(static_cast<double>(p), kLikelihoodEps));
    return loss;
}

// dL/ds_i of the negative log-likelihood, per dividing node and per sample.
// The closed form decomposes the likelihood into the two subtree masses under
// each node; its sign convention is fixed against finite differences of the
// loss (the gradient of -log P, not of log P).
template <class T>
struct ClassRoutingGrad {
    std::vector<T> per_sample;     // [n_div * B]
    std::vector<double> per_node;  // summed over the batch
};

template <class T>
ClassRoutingGrad<T> classification_routing_gradient(int depth, const std::vector<const T*>& scores,
                                                    int batch,
                                                    const std::vector<std::vector<T>>& leaf_values,
                                                    const std::vector<int>& labels) {
    const int n_div = (1 << depth) - 1;
    const int n_leaves = 1 << depth;
    ClassRoutingGrad<T> g;
    g.per_sample.assign(static_cast<std::size_t>(n_div) * batch, T(0));
    g.per_node.assign(static_cast<std::size_t>(n_div), 0.0);

    auto w = leaf_weights_from_scores<T>(depth, scores, batch);
    std::vector<double> mass(static_cast<std::size_t>(n_div + n_leaves));
    for (int b = 0; b < batch; ++b) {
        // subtree masses of w_j * p_j(y), bottom-up over the heap
        for (int j = 0; j < n_leaves; ++j)
            mass[static_cast<std::size_t>(n_div + j)] =
                static_cast<double>(w[static_cast<std::size_t>(j) * batch + b]) *
                static_cast<double>(leaf_values[j][static_cast<std::size_t>(labels[b])]);
        for (int i = n_div - 1; i >= 0; --i)
            mass[i] = mass[left_child(i)] + mass[right_child(i)];
        const double lik = std::max(mass[0], kLikelihoodEps);
        for (int i = 0; i < n_div; ++i) {
            const double s = static_cast<double>(scores[static_cast<std::size_t>(i)][b]);
            const double d = (mass[right_child(i)] / (1.0 - s) - mass[left_child(i)] / s) / lik;
            g.per_sample[static_cast<std::size_t>(i) * batch + b] = static_cast<T>(d);
            g.per_node[static_cast<std::size_t>(i)] += d;
        }
    }
    return g;
}

template <class T>
std::vector<double> routing_gradient(const TreeTopology<T>& tree, const Tensor<T>& images,
                                     const std::vector<int>& labels) {
    const int n = images.dim(0);
    auto scores = all_scores(tree, images);
    std::vector<const T*> rows(tree.n_div());
    for (int i = 0; i < tree.n_div(); ++i) rows[i] = scores.data() + static_cast<std::size_t>(i) * n;
    return classification_routing_gradient(tree.depth, rows, n, tree.leaf_values, labels).per_node;
}

// Fixed-point leaf re-estimation with the dividing nodes frozen. Leaves that
// receive zero routing mass keep their previous distribution.
template <class T>
void leaf_update(TreeTopology<T>& tree, const Tensor<T>& images, const std::vector<int>& labels,
                 int iterations) {
    if (iterations < 1) throw ConfigError("leaf_update iterations must be >= 1");
    const int n = images.dim(0);
    const int n_leaves = tree.n_leaves();
    const int classes = tree.leaf_dim;
    auto scores = all_scores(tree, images);
    std::vector<const T*> rows(tree.n_div());
    for (int i = 0; i < tree.n_div(); ++i) rows[i] = scores.data() + static_cast<std::size_t>(i) * n;
    auto w = leaf_weights_from_scores<T>(tree.depth, rows, n);

    for (int it = 0; it < iterations; ++it) {
        // P(y_b | x_b) under current leaves
        std::vector<double> lik(static_cast<std::size_t>(n), 0.0);
        for (int j = 0; j < n_leaves; ++j) {
            const T* wj = w.data() + static_cast<std::size_t>(j) * n;
            const auto& p = tree.leaf_values[j];
            for (int b = 0; b < n; ++b)
                lik[b] += static_cast<double>(wj[b]) * static_cast<double>(p[labels[b]]);
        }
        for (auto& v : lik) v = std::max(v, kLikelihoodEps);

        for (int j = 0; j < n_leaves; ++j) {
            const T* wj = w.data() + static_cast<std::size_t>(j) * n;
            auto& p = tree.leaf_values[j];
            std::vector<double> next(static_cast<std::size_t>(classes), 0.0);
            double q = 0.0;
            for (int b = 0; b < n; ++b) {
                const double add = static_cast<double>(p[labels[b]]) * static_cast<double>(wj[b]) / lik[b];
                next[labels[b]] += add;
                q += add;
            }
            if (q <= 0.0) continue;  // zero routing mass: freeze
            for (int y = 0; y < classes; ++y) p[y] = static_cast<T>(next[y] / q);
        }
    }
}

}  // namespace dhm

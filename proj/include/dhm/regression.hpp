#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "dhm/tree.hpp"

namespace dhm {

template <class T>
std::vector<T> predict_regression(const TreeTopology<T>& tree, const Tensor<T>& input) {
    return predict(tree, route(tree, input));
}

// Predictions for a whole set from precomputed scores [n_div][N]: [N x dim].
template <class T>
std::vector<T> predictions_from_scores(const TreeTopology<T>& tree, const std::vector<T>& scores,
                                       int n) {
    const int n_div = tree.n_div();
    const int dim = tree.leaf_dim;
    std::vector<const T*> rows(n_div);
    for (int i = 0; i < n_div; ++i) rows[i] = scores.data() + static_cast<std::size_t>(i) * n;
    auto w = leaf_weights_from_scores<T>(tree.depth, rows, n);
    std::vector<T> pred(static_cast<std::size_t>(n) * dim, T(0));
    for (int j = 0; j < tree.n_leaves(); ++j) {
        const T* wj = w.data() + static_cast<std::size_t>(j) * n;
        const auto& p = tree.leaf_values[j];
        for (int b = 0; b < n; ++b) {
            T* row = pred.data() + static_cast<std::size_t>(b) * dim;
            const T wv = wj[b];
            for (int k = 0; k < dim; ++k) row[k] += wv * p[k];
        }
    }
    return pred;
}

// 1/2 sum_i ||P_i - y_i||^2; targets is [N, dim].
template <class T>
double squared_loss(const TreeTopology<T>& tree, const Tensor<T>& images, const Tensor<T>& targets) {
    const int n = images.dim(0);
    if (n == 0) throw ConfigError("squared_loss on empty batch");
    if (targets.ndim() != 2 || targets.dim(0) != n || targets.dim(1) != tree.leaf_dim)
        throw ShapeError("targets must be [N," + std::to_string(tree.leaf_dim) + "]");
    auto pred = predictions_from_scores(tree, all_scores(tree, images), n);
    double loss = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = static_cast<double>(pred[i]) - static_cast<double>(targets.data()[i]);
        loss += d * d;
    }
    return 0.5 * loss;
}

// dL/ds_i of the squared loss: (P_t - y_t)^T (A_l/s_i - A_r/(1-s_i)) with A_l
// and A_r the routing-weighted leaf-vector sums of the two subtrees.
template <class T>
struct RegRoutingGrad {
    std::vector<T> per_sample;     // [n_div * B]
    std::vector<double> per_node;  // summed over the batch
};

template <class T>
RegRoutingGrad<T> regression_routing_gradient(int depth, const std::vector<const T*>& scores,
                                              int batch,
                                              const std::vector<std::vector<T>>& leaf_values,
                                              const T* targets, int dim) {
    const int n_div = (1 << depth) - 1;
    const int n_leaves = 1 << depth;
    RegRoutingGrad<T> g;
    g.per_sample.assign(static_cast<std::size_t>(n_div) * batch, T(0));
    g.per_node.assign(static_cast<std::size_t>(n_div), 0.0);

    auto w = leaf_weights_from_scores<T>(depth, scores, batch);
    // subtree vector sums of w_j * p_j, bottom-up over the heap
    std::vector<double> acc(static_cast<std::size_t>(n_div + n_leaves) * dim);
    std::vector<double> resid(static_cast<std::size_t>(dim));
    for (int b = 0; b < batch; ++b) {
        for (int j = 0; j < n_leaves; ++j) {
            const double wv = static_cast<double>(w[static_cast<std::size_t>(j) * batch + b]);
            double* a = acc.data() + static_cast<std::size_t>(n_div + j) * dim;
            const auto& p = leaf_values[j];
            for (int k = 0; k < dim; ++k) a[k] = wv * static_cast<double>(p[k]);
        }
        for (int i = n_div - 1; i >= 0; --i) {
            const double* l = acc.data() + static_cast<std::size_t>(left_child(i)) * dim;
            const double* r = acc.data() + static_cast<std::size_t>(right_child(i)) * dim;
            double* a = acc.data() + static_cast<std::size_t>(i) * dim;
            for (int k = 0; k < dim; ++k) a[k] = l[k] + r[k];
        }
        const T* y = targets + static_cast<std::size_t>(b) * dim;
        // P - y (acc[0] is the full prediction)
        for (int k = 0; k < dim; ++k) resid[k] = acc[k] - static_cast<double>(y[k]);
        for (int i = 0; i < n_div; ++i) {
            const double s = static_cast<double>(scores[static_cast<std::size_t>(i)][b]);
            const double* l = acc.data() + static_cast<std::size_t>(left_child(i)) * dim;
            const double* r = acc.data() + static_cast<std::size_t>(right_child(i)) * dim;
            double d = 0;
            for (int k = 0; k < dim; ++k) d += resid[k] * (l[k] / s - r[k] / (1.0 - s));
            g.per_sample[static_cast<std::size_t>(i) * batch + b] = static_cast<T>(d);
            g.per_node[static_cast<std::size_t>(i)] += d;
        }
    }
    return g;
}

template <class T>
std::vector<double> routing_gradient_regression(const TreeTopology<T>& tree, const Tensor<T>& images,
                                                const Tensor<T>& targets) {
    const int n = images.dim(0);
    auto scores = all_scores(tree, images);
    std::vector<const T*> rows(tree.n_div());
    for (int i = 0; i < tree.n_div(); ++i) rows[i] = scores.data() + static_cast<std::size_t>(i) * n;
    return regression_routing_gradient(tree.depth, rows, n, tree.leaf_values, targets.data(),
                                       tree.leaf_dim)
        .per_node;
}

// Routing-weighted mean of the targets per leaf; the exact minimizer of the
// squared loss in each leaf for fixed routing. Zero-mass leaves are left
// unchanged.
template <class T>
void leaf_update_regression(TreeTopology<T>& tree, const Tensor<T>& images, const Tensor<T>& targets) {
    const int n = images.dim(0);
    const int dim = tree.leaf_dim;
    auto scores = all_scores(tree, images);
    std::vector<const T*> rows(tree.n_div());
    for (int i = 0; i < tree.n_div(); ++i) rows[i] = scores.data() + static_cast<std::size_t>(i) * n;
    auto w = leaf_weights_from_scores<T>(tree.depth, rows, n);
    for (int j = 0; j < tree.n_leaves(); ++j) {
        const T* wj = w.data() + static_cast<std::size_t>(j) * n;
        std::vector<double> num(static_cast<std::size_t>(dim), 0.0);
        double den = 0.0;
        for (int b = 0; b < n; ++b) {
            const double wv = static_cast<double>(wj[b]);
            den += wv;
            const T* y = targets.data() + static_cast<std::size_t>(b) * dim;
            for (int k = 0; k < dim; ++k) num[k] += wv * static_cast<double>(y[k]);
        }
        if (den <= 0.0) continue;
        for (int k = 0; k < dim; ++k) tree.leaf_values[j][k] = static_cast<T>(num[k] / den);
    }
}

}  // namespace dhm

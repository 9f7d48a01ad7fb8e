#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "dhm/architecture.hpp"
#include "dhm/pruning.hpp"
#include "dhm/rng.hpp"
#include "dhm/tensor.hpp"

namespace dhm {

enum class TreeMode { separated, connected, ndf };

inline TreeMode parse_mode(const std::string& s) {
    if (s == "separated") return TreeMode::separated;
    if (s == "connected") return TreeMode::connected;
    if (s == "ndf") return TreeMode::ndf;
    throw ConfigError("unknown mode '" + s + "'");
}

inline std::string mode_name(TreeMode m) {
    switch (m) {
        case TreeMode::separated: return "separated";
        case TreeMode::connected: return "connected";
        case TreeMode::ndf: return "ndf";
    }
    return "?";
}

// Heap order: root 0, children of i are 2i+1 / 2i+2. For depth D the dividing
// nodes are 0 .. 2^D-2 and heap slots 2^D-1 .. 2^(D+1)-2 are the leaves.
inline int left_child(int i) { return 2 * i + 1; }
inline int right_child(int i) { return 2 * i + 2; }
inline int node_depth(int i) {
    int d = 0;
    while (i > 0) {
        i = (i - 1) / 2;
        ++d;
    }
    return d;
}

// Inclusive range of leaf indices (0-based among leaves) under heap node h.
inline std::pair<int, int> leaf_range(int depth, int h) {
    const int n_div = (1 << depth) - 1;
    int lo = h, hi = h;
    while (lo < n_div) lo = left_child(lo);
    while (hi < n_div) hi = right_child(hi);
    return {lo - n_div, hi - n_div};
}

template <class T>
struct RoutingState {
    std::vector<T> scores;        // s_i per dividing node; NaN where not evaluated
    std::vector<T> weights;       // per-leaf path weight
    std::vector<char> evaluated;  // dividing nodes actually computed
};

template <class T>
struct TreeTopology {
    int depth = 0;
    TreeMode mode = TreeMode::separated;
    ArchitectureSpec arch;
    std::vector<int> input_shape;  // per-node (separated) or root (connected/ndf) input, no batch dim
    int leaf_dim = 0;

    std::vector<NodeNet<T>> gates;  // separated: full gate nets; connected: score heads
    std::vector<NodeNet<T>> maps;   // connected: mapping nets (maps[0] built from root_map)
    NodeNet<T> trunk;               // ndf

    std::vector<std::vector<T>> leaf_values;

    int n_div() const { return (1 << depth) - 1; }
    int n_leaves() const { return 1 << depth; }

    std::vector<Parameter<T>*> parameters() {
        std::vector<Parameter<T>*> ps;
        trunk.collect_parameters(ps);
        for (auto& m : maps) m.collect_parameters(ps);
        for (auto& g : gates) g.collect_parameters(ps);
        return ps;
    }
};

template <class T>
TreeTopology<T> build_tree(int depth, TreeMode mode, const ArchitectureSpec& arch,
                           std::vector<int> input_shape, int leaf_dim, std::uint64_t seed) {
    if (depth < 1) throw ConfigError("tree depth must be >= 1");
    if (leaf_dim < 1) throw ConfigError("leaf dimension must be >= 1");
    TreeTopology<T> tree;
    tree.depth = depth;
    tree.mode = mode;
    tree.arch = arch;
    tree.input_shape = input_shape;
    tree.leaf_dim = leaf_dim;
    const int n_div = tree.n_div();

    switch (mode) {
        case TreeMode::separated: {
            if (arch.gate.empty()) throw ConfigError("separated mode needs a gate architecture");
            const auto descs = parse_layers(arch.gate);
            for (int i = 0; i < n_div; ++i) {
                auto rng = make_rng(seed, "gate/" + std::to_string(i));
                tree.gates.push_back(build_net<T>(descs, input_shape, arch, rng, "node" + std::to_string(i)));
            }
            if (tree.gates[0].output_shape() != std::vector<int>{1})
                throw ConfigError("gate net must produce a single score");
            break;
        }
        case TreeMode::connected: {
            if (arch.root_map.empty() || arch.node_map.empty() || arch.gate_head.empty())
                throw ConfigError("connected mode needs root_map, node_map and gate_head");
            const auto root_descs = parse_layers(arch.root_map);
            const auto map_descs = parse_layers(arch.node_map);
            const auto head_descs = parse_layers(arch.gate_head);
            std::vector<std::vector<int>> feat(n_div);
            for (int i = 0; i < n_div; ++i) {
                auto mrng = make_rng(seed, "map/" + std::to_string(i));
                if (i == 0) {
                    tree.maps.push_back(build_net<T>(root_descs, input_shape, arch, mrng, "node0.map"));
                } else {
                    tree.maps.push_back(build_net<T>(map_descs, feat[(i - 1) / 2], arch, mrng,
                                                     "node" + std::to_string(i) + ".map"));
                }
                feat[i] = tree.maps[i].output_shape();
                auto grng = make_rng(seed, "gate/" + std::to_string(i));
                tree.gates.push_back(build_net<T>(head_descs, feat[i], arch, grng,
                                                  "node" + std::to_string(i)));
                if (tree.gates[i].output_shape() != std::vector<int>{1})
                    throw ConfigError("gate_head must produce a single score");
            }
            break;
        }
        case TreeMode::ndf: {
            if (arch.trunk.empty()) throw ConfigError("ndf mode needs a trunk architecture");
            auto rng = make_rng(seed, "trunk");
            tree.trunk = build_net<T>(parse_layers(arch.trunk), input_shape, arch, rng, "trunk", n_div);
            if (tree.trunk.output_shape() != std::vector<int>{n_div})
                throw ConfigError("ndf trunk must end with one sigmoid output per dividing node");
            break;
        }
    }

    tree.leaf_values.assign(static_cast<std::size_t>(tree.n_leaves()),
                            std::vector<T>(static_cast<std::size_t>(leaf_dim), T(1) / static_cast<T>(leaf_dim)));
    return tree;
}

template <class T>
using NodeInputFn = std::function<Tensor<T>(int node)>;

namespace detail_tree {

template <class T>
Tensor<T> ensure_batched(const Tensor<T>& x, const std::vector<int>& expect) {
    if (x.shape() == expect) {
        std::vector<int> b{1};
        b.insert(b.end(), expect.begin(), expect.end());
        return x.reshaped(b);
    }
    return x;
}

template <class T>
T gate_scalar(const NodeNet<T>& net, const Tensor<T>& input) {
    return net.forward(input).data()[0];
}

// Shared recursion for all modes: `score_at(node, feature)` yields s_i and the
// next feature to hand to the children.
template <class T>
void descend(const TreeTopology<T>& tree, int node, T weight, const Tensor<T>& feat,
             const NodeInputFn<T>& input_for_node, const PruneConfig* prune,
             const std::vector<T>* precomputed, RoutingState<T>& rs) {
    const int n_div = tree.n_div();
    if (node >= n_div) {
        rs.weights[node - n_div] = weight;
        return;
    }
    T s;
    Tensor<T> child_feat = feat;
    switch (tree.mode) {
        case TreeMode::separated:
            s = gate_scalar(tree.gates[node], ensure_batched(input_for_node(node), tree.input_shape));
            break;
        case TreeMode::connected: {
            const Tensor<T> in = node == 0 ? ensure_batched(input_for_node(0), tree.input_shape) : feat;
            child_feat = tree.maps[node].forward(in);
            s = gate_scalar(tree.gates[node], child_feat);
            break;
        }
        case TreeMode::ndf:
            s = (*precomputed)[node];
            break;
    }
    rs.scores[node] = s;
    rs.evaluated[node] = 1;
    std::vector<T> pair{s, T(1) - s};
    if (prune && prune->threshold > 0.0) pair = prune_scores(pair, *prune);
    if (pair[0] > T(0))
        descend(tree, left_child(node), weight * pair[0], child_feat, input_for_node, prune, precomputed, rs);
    if (pair[1] > T(0))
        descend(tree, right_child(node), weight * pair[1], child_feat, input_for_node, prune, precomputed, rs);
}

}  // namespace detail_tree

template <class T>
RoutingState<T> route(const TreeTopology<T>& tree, const NodeInputFn<T>& input_for_node,
                      const PruneConfig* prune = nullptr) {
    RoutingState<T> rs;
    rs.scores.assign(tree.n_div(), std::numeric_limits<T>::quiet_NaN());
    rs.weights.assign(tree.n_leaves(), T(0));
    rs.evaluated.assign(tree.n_div(), 0);

    std::vector<T> trunk_scores;
    if (tree.mode == TreeMode::ndf) {
        auto out = tree.trunk.forward(detail_tree::ensure_batched(input_for_node(0), tree.input_shape));
        trunk_scores.assign(out.data(), out.data() + out.size());
        // the whole trunk runs regardless of routing
        rs.evaluated.assign(tree.n_div(), 1);
    }
    detail_tree::descend(tree, 0, T(1), Tensor<T>(), input_for_node, prune,
                         tree.mode == TreeMode::ndf ? &trunk_scores : nullptr, rs);
    return rs;
}

template <class T>
RoutingState<T> route(const TreeTopology<T>& tree, const Tensor<T>& input,
                      const PruneConfig* prune = nullptr) {
    return route(tree, NodeInputFn<T>([&input](int) { return input; }), prune);
}

// P = sum_i w_i p_i : a convex combination of the leaf predictors.
template <class T>
std::vector<T> predict(const TreeTopology<T>& tree, const RoutingState<T>& routing) {
    std::vector<T> out(static_cast<std::size_t>(tree.leaf_dim), T(0));
    for (int j = 0; j < tree.n_leaves(); ++j) {
        const T w = routing.weights[j];
        if (w == T(0)) continue;
        const auto& p = tree.leaf_values[j];
        for (int k = 0; k < tree.leaf_dim; ++k) out[k] += w * p[k];
    }
    return out;
}

// ---- batched evaluation (training / whole-set metrics) ----

// Per-dividing-node score tensors, each shaped [B]. `node_inputs` holds either
// one batch shared by every node or one batch per node (per-landmark crops).
// Runs under the active tape if one is set.
template <class T>
std::vector<Tensor<T>> batched_scores(const TreeTopology<T>& tree,
                                      const std::vector<Tensor<T>>& node_inputs) {
    const int n_div = tree.n_div();
    if (node_inputs.size() != 1 && static_cast<int>(node_inputs.size()) != n_div)
        throw ShapeError("node_inputs must have 1 or n_div entries");
    auto input_of = [&](int i) -> const Tensor<T>& {
        return node_inputs.size() == 1 ? node_inputs[0] : node_inputs[static_cast<std::size_t>(i)];
    };
    std::vector<Tensor<T>> scores;
    scores.reserve(n_div);
    switch (tree.mode) {
        case TreeMode::separated:
            for (int i = 0; i < n_div; ++i) {
                const int B = input_of(i).dim(0);
                scores.push_back(tree.gates[i].forward(input_of(i)).reshaped({B}));
            }
            break;
        case TreeMode::connected: {
            std::vector<Tensor<T>> feats(n_div);
            for (int i = 0; i < n_div; ++i) {
                feats[i] = tree.maps[i].forward(i == 0 ? input_of(0) : feats[(i - 1) / 2]);
                const int B = feats[i].dim(0);
                scores.push_back(tree.gates[i].forward(feats[i]).reshaped({B}));
            }
            break;
        }
        case TreeMode::ndf: {
            auto m = tree.trunk.forward(input_of(0));  // [B, n_div]
            for (int i = 0; i < n_div; ++i) scores.push_back(ops::select_col(m, i));
            break;
        }
    }
    return scores;
}

// Every dividing node's score over a whole dataset, row-major [n_div][N].
// Chunked over the batch dimension and never recorded on a tape.
template <class T>
std::vector<T> all_scores(const TreeTopology<T>& tree, const Tensor<T>& images, int chunk = 500) {
    const int N = images.dim(0);
    const int n_div = tree.n_div();
    const std::size_t per = images.size() / static_cast<std::size_t>(N);
    std::vector<T> out(static_cast<std::size_t>(n_div) * N);
    std::vector<int> sub_shape = images.shape();
    for (int start = 0; start < N; start += chunk) {
        const int B = std::min(chunk, N - start);
        sub_shape[0] = B;
        Tensor<T> sub(sub_shape);
        std::copy(images.data() + start * per, images.data() + (start + B) * per, sub.data());
        auto scores = batched_scores(tree, {sub});
        for (int i = 0; i < n_div; ++i)
            std::copy(scores[i].data(), scores[i].data() + B,
                      out.data() + static_cast<std::size_t>(i) * N + start);
    }
    return out;
}

// Leaf weights for a batch from per-node score values: weights[j*B + b].
template <class T>
std::vector<T> leaf_weights_from_scores(int depth, const std::vector<const T*>& scores, int batch) {
    const int n_div = (1 << depth) - 1;
    const int n_leaves = 1 << depth;
    std::vector<T> pw(static_cast<std::size_t>(n_div + n_leaves) * batch);
    for (int b = 0; b < batch; ++b) pw[b] = T(1);
    for (int i = 0; i < n_div; ++i) {
        const T* s = scores[static_cast<std::size_t>(i)];
        const T* cur = pw.data() + static_cast<std::size_t>(i) * batch;
        T* l = pw.data() + static_cast<std::size_t>(left_child(i)) * batch;
        T* r = pw.data() + static_cast<std::size_t>(right_child(i)) * batch;
        for (int b = 0; b < batch; ++b) {
            l[b] = cur[b] * s[b];
            r[b] = cur[b] * (T(1) - s[b]);
        }
    }
    return {pw.begin() + static_cast<std::size_t>(n_div) * batch, pw.end()};
}

}  // namespace dhm

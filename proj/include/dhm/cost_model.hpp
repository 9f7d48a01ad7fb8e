#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dhm/tree.hpp"

namespace dhm {

// Multiplies in one convolution layer: every output pixel of every output
// channel takes an in_ch*k_h*k_w dot product.
inline std::int64_t nom_conv(int out_h, int out_w, int out_ch, int in_ch, int k_h, int k_w) {
    if (out_h <= 0 || out_w <= 0 || out_ch <= 0 || in_ch <= 0 || k_h <= 0 || k_w <= 0)
        throw ConfigError("nom_conv needs positive dimensions");
    return static_cast<std::int64_t>(out_h) * out_w * out_ch * in_ch * k_h * k_w;
}

inline std::int64_t nom_linear(int in_f, int out_f) {
    if (in_f <= 0 || out_f <= 0) throw ConfigError("nom_linear needs positive dimensions");
    return static_cast<std::int64_t>(in_f) * out_f;
}

struct NomLayerEntry {
    std::string id;
    std::string shape;  // output shape of the layer
    std::int64_t count = 0;
};

struct NomReport {
    std::vector<NomLayerEntry> per_layer;  // exact counts, one entry per multiplying layer
    std::int64_t total_unpruned = 0;
    std::int64_t total_pruned = 0;  // rounded expected count under the threshold
    double pruned_mean = 0.0;
    std::int64_t pruned_min = 0;
    std::int64_t pruned_max = 0;
    std::map<int, std::int64_t> evaluated_node_histogram;  // node-count -> frequency
};

namespace detail_cost {

template <class T>
void append_layers(const NodeNet<T>& net, int intermediate_channels, const std::string& prefix,
                   std::vector<NomLayerEntry>& out, std::int64_t& total) {
    std::vector<int> s = net.input_shape;
    int li = 0;
    for (const auto& l : net.layers) {
        const std::int64_t c = layer_nom(l.desc, s, intermediate_channels);
        s = layer_out_shape(l.desc, s);
        if (c > 0) {
            out.push_back({prefix + ".l" + std::to_string(li), shape_str(s), c});
            total += c;
        }
        ++li;
    }
}

// Multiplies charged when dividing node i is evaluated.
template <class T>
std::int64_t node_cost(const TreeTopology<T>& tree, int i) {
    switch (tree.mode) {
        case TreeMode::separated:
            return tree.gates[static_cast<std::size_t>(i)].nom(tree.arch.intermediate_channels);
        case TreeMode::connected:
            return tree.maps[static_cast<std::size_t>(i)].nom(tree.arch.intermediate_channels) +
                   tree.gates[static_cast<std::size_t>(i)].nom(tree.arch.intermediate_channels);
        case TreeMode::ndf:
            return 0;  // the shared trunk is charged once, not per node
    }
    return 0;
}

}  // namespace detail_cost

// Full accounting for a tree. When `prune` is given, the pruned totals are the
// dataset statistics of the multiplies actually executed by the pruned route;
// that requires a dataset because the surviving paths are data-dependent.
template <class T>
NomReport nom_model(const TreeTopology<T>& tree, const PruneConfig* prune = nullptr,
                    const Tensor<T>* dataset = nullptr) {
    NomReport rep;
    const int inter = tree.arch.intermediate_channels;
    switch (tree.mode) {
        case TreeMode::separated:
            for (int i = 0; i < tree.n_div(); ++i)
                detail_cost::append_layers(tree.gates[i], inter, "node" + std::to_string(i),
                                           rep.per_layer, rep.total_unpruned);
            break;
        case TreeMode::connected:
            for (int i = 0; i < tree.n_div(); ++i) {
                detail_cost::append_layers(tree.maps[i], inter, "node" + std::to_string(i) + ".map",
                                           rep.per_layer, rep.total_unpruned);
                detail_cost::append_layers(tree.gates[i], inter, "node" + std::to_string(i) + ".head",
                                           rep.per_layer, rep.total_unpruned);
            }
            break;
        case TreeMode::ndf:
            detail_cost::append_layers(tree.trunk, inter, "trunk", rep.per_layer,
                                       rep.total_unpruned);
            break;
    }

    if (!prune) {
        rep.total_pruned = rep.total_unpruned;
        rep.pruned_mean = static_cast<double>(rep.total_unpruned);
        rep.pruned_min = rep.pruned_max = rep.total_unpruned;
        return rep;
    }
    if (!dataset) throw ConfigError("pruned cost accounting needs a dataset");

    const int n = dataset->dim(0);
    if (n == 0) throw ConfigError("pruned cost accounting on empty dataset");
    const std::size_t per = dataset->size() / static_cast<std::size_t>(n);
    std::vector<int> sub_shape = dataset->shape();
    sub_shape[0] = 1;

    std::vector<std::int64_t> node_costs(tree.n_div());
    for (int i = 0; i < tree.n_div(); ++i) node_costs[i] = detail_cost::node_cost(tree, i);
    const std::int64_t shared =
        tree.mode == TreeMode::ndf ? tree.trunk.nom(inter) : 0;

    double sum = 0;
    std::int64_t mn = 0, mx = 0;
    for (int b = 0; b < n; ++b) {
        Tensor<T> x(sub_shape);
        std::copy(dataset->data() + b * per, dataset->data() + (b + 1) * per, x.data());
        auto rs = route(tree, x, prune);
        std::int64_t c = shared;
        int evaluated = 0;
        for (int i = 0; i < tree.n_div(); ++i)
            if (rs.evaluated[i]) {
                c += node_costs[i];
                ++evaluated;
            }
        rep.evaluated_node_histogram[evaluated] += 1;
        sum += static_cast<double>(c);
        mn = b == 0 ? c : std::min(mn, c);
        mx = b == 0 ? c : std::max(mx, c);
    }
    rep.pruned_mean = sum / n;
    rep.pruned_min = mn;
    rep.pruned_max = mx;
    rep.total_pruned = static_cast<std::int64_t>(std::llround(rep.pruned_mean));
    return rep;
}

}  // namespace dhm

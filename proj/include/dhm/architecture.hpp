#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dhm/lbc.hpp"
#include "dhm/ops.hpp"
#include "dhm/tensor.hpp"

namespace dhm {

// One entry of a declarative layer list. Architectures are data, not code, so
// the per-node network reconstructions stay auditable in config files.
struct LayerDesc {
    enum class Kind { conv, lbc, linear, relu, sigmoid, maxpool, flatten };
    Kind kind;
    int out = 0, kh = 0, kw = 0, stride = 1, pad = 0;  // conv / lbc
    int win = 0;                                       // maxpool (stride reuses `stride`)
};

// Grammar: layers separated by '|'; each "name" or "name:arg,arg,...".
//   conv:out,kh,kw,stride,pad   lbc:out,kh,kw,stride,pad   linear:out
//   maxpool:win,stride          relu | sigmoid | flatten
// linear:0 means "width chosen by the builder" (used for the ndf gate layer).
inline std::vector<LayerDesc> parse_layers(const std::string& spec) {
    std::vector<LayerDesc> layers;
    std::stringstream ss(spec);
    std::string tok;
    while (std::getline(ss, tok, '|')) {
        // trim
        const auto b = tok.find_first_not_of(" \t");
        const auto e = tok.find_last_not_of(" \t");
        if (b == std::string::npos) continue;
        tok = tok.substr(b, e - b + 1);
        std::string name = tok, args;
        if (auto colon = tok.find(':'); colon != std::string::npos) {
            name = tok.substr(0, colon);
            args = tok.substr(colon + 1);
        }
        std::vector<int> a;
        std::stringstream as(args);
        std::string num;
        while (std::getline(as, num, ','))
            try {
                a.push_back(std::stoi(num));
            } catch (const std::exception&) {
                throw ConfigError("bad layer argument '" + num + "' in '" + tok + "'");
            }
        LayerDesc d{};
        if (name == "conv" || name == "lbc") {
            if (a.size() != 5) throw ConfigError(name + " needs out,kh,kw,stride,pad: '" + tok + "'");
            d.kind = name == "conv" ? LayerDesc::Kind::conv : LayerDesc::Kind::lbc;
            d.out = a[0];
            d.kh = a[1];
            d.kw = a[2];
            d.stride = a[3];
            d.pad = a[4];
        } else if (name == "linear") {
            if (a.size() != 1) throw ConfigError("linear needs out: '" + tok + "'");
            d.kind = LayerDesc::Kind::linear;
            d.out = a[0];
        } else if (name == "maxpool") {
            if (a.size() != 2) throw ConfigError("maxpool needs win,stride: '" + tok + "'");
            d.kind = LayerDesc::Kind::maxpool;
            d.win = a[0];
            d.stride = a[1];
        } else if (name == "relu") {
            d.kind = LayerDesc::Kind::relu;
        } else if (name == "sigmoid") {
            d.kind = LayerDesc::Kind::sigmoid;
        } else if (name == "flatten") {
            d.kind = LayerDesc::Kind::flatten;
        } else {
            throw ConfigError("unknown layer '" + name + "'");
        }
        layers.push_back(d);
    }
    if (layers.empty()) throw ConfigError("empty layer list");
    return layers;
}

struct ArchitectureSpec {
    std::string gate;       // separated: raw input -> score
    std::string root_map;   // connected: root mapping net
    std::string node_map;   // connected: per-node mapping net
    std::string gate_head;  // connected: score head on mapped features
    std::string trunk;      // ndf: shared trunk, last linear:0 widened to the gate count
    double sparsity_level = 0.5;
    int intermediate_channels = 16;

    std::string canonical() const {
        std::ostringstream os;
        os << "gate=" << gate << ";root_map=" << root_map << ";node_map=" << node_map
           << ";gate_head=" << gate_head << ";trunk=" << trunk
           << ";sparsity=" << sparsity_level << ";inter=" << intermediate_channels;
        return os.str();
    }

    std::uint64_t digest() const {
        std::uint64_t h = 1469598103934665603ull;
        for (char c : canonical()) {
            h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
            h *= 1099511628211ull;
        }
        return h;
    }
};

inline std::vector<int> layer_out_shape(const LayerDesc& d, const std::vector<int>& in) {
    using K = LayerDesc::Kind;
    switch (d.kind) {
        case K::conv:
        case K::lbc: {
            if (in.size() != 3) throw ConfigError("conv layer needs [C,H,W] input");
            const int h = (in[1] + 2 * d.pad - d.kh) / d.stride + 1;
            const int w = (in[2] + 2 * d.pad - d.kw) / d.stride + 1;
            if (d.kh > in[1] + 2 * d.pad || d.kw > in[2] + 2 * d.pad)
                throw ConfigError("conv kernel larger than padded input");
            return {d.out, h, w};
        }
        case K::maxpool: {
            if (in.size() != 3) throw ConfigError("maxpool layer needs [C,H,W] input");
            if (d.win > in[1] || d.win > in[2]) throw ConfigError("maxpool window too large");
            return {in[0], (in[1] - d.win) / d.stride + 1, (in[2] - d.win) / d.stride + 1};
        }
        case K::flatten: {
            int f = 1;
            for (int v : in) f *= v;
            return {f};
        }
        case K::linear: {
            if (in.size() != 1) throw ConfigError("linear layer needs flattened input");
            return {d.out};
        }
        case K::relu:
        case K::sigmoid:
            return in;
    }
    throw ConfigError("unreachable layer kind");
}

// Multiplies charged to a layer: convolution and linear layers only. The LBC
// fixed ternary convolution runs on adds/subtracts, so only its combiner
// counts.
inline std::int64_t layer_nom(const LayerDesc& d, const std::vector<int>& in, int intermediate_channels) {
    using K = LayerDesc::Kind;
    const auto out = layer_out_shape(d, in);
    switch (d.kind) {
        case K::conv:
            return static_cast<std::int64_t>(out[1]) * out[2] * d.out * in[0] * d.kh * d.kw;
        case K::lbc:
            return static_cast<std::int64_t>(out[1]) * out[2] * d.out * intermediate_channels;
        case K::linear:
            return static_cast<std::int64_t>(in[0]) * d.out;
        default:
            return 0;
    }
}

template <class T>
struct Layer {
    LayerDesc desc;
    Parameter<T> weight;  // conv kernel / linear weight
    Parameter<T> bias;
    LbcLayer<T> lbc;
};

template <class T>
struct NodeNet {
    std::vector<Layer<T>> layers;
    std::vector<int> input_shape;  // without batch dim

    Tensor<T> forward(const Tensor<T>& x) const {
        using K = LayerDesc::Kind;
        Tensor<T> h = x;
        for (const auto& l : layers) {
            switch (l.desc.kind) {
                case K::conv: h = ops::conv2d(h, l.weight.value, &l.bias.value, l.desc.stride, l.desc.pad); break;
                case K::lbc: h = lbc_forward(l.lbc, h); break;
                case K::linear: h = ops::linear(h, l.weight.value, &l.bias.value); break;
                case K::relu: h = ops::relu(h); break;
                case K::sigmoid: h = ops::sigmoid(h); break;
                case K::maxpool: h = ops::maxpool2d(h, l.desc.win, l.desc.stride); break;
                case K::flatten: h = ops::flatten(h); break;
            }
        }
        return h;
    }

    void collect_parameters(std::vector<Parameter<T>*>& out) {
        for (auto& l : layers) {
            switch (l.desc.kind) {
                case LayerDesc::Kind::conv:
                case LayerDesc::Kind::linear:
                    out.push_back(&l.weight);
                    out.push_back(&l.bias);
                    break;
                case LayerDesc::Kind::lbc:
                    out.push_back(&l.lbc.fixed);
                    out.push_back(&l.lbc.combiner);
                    out.push_back(&l.lbc.combiner_bias);
                    break;
                default:
                    break;
            }
        }
    }

    std::vector<int> output_shape() const {
        std::vector<int> s = input_shape;
        for (const auto& l : layers) s = layer_out_shape(l.desc, s);
        return s;
    }

    std::int64_t nom(int intermediate_channels) const {
        std::vector<int> s = input_shape;
        std::int64_t total = 0;
        for (const auto& l : layers) {
            total += layer_nom(l.desc, s, intermediate_channels);
            s = layer_out_shape(l.desc, s);
        }
        return total;
    }
};

namespace detail_arch {

template <class T>
Tensor<T> uniform_init(std::vector<int> shape, int fan_in, std::mt19937_64& rng) {
    Tensor<T> t(std::move(shape));
    const double bound = std::sqrt(1.0 / fan_in);
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.values()) v = static_cast<T>(dist(rng));
    return t;
}

}  // namespace detail_arch

// `auto_linear_width`: replaces the out-width of any `linear:0` layer (ndf
// trunk's gate layer whose width is the dividing-node count).
template <class T>
NodeNet<T> build_net(const std::vector<LayerDesc>& descs, std::vector<int> input_shape,
                     const ArchitectureSpec& arch, std::mt19937_64& rng,
                     const std::string& prefix, int auto_linear_width = 0) {
    using K = LayerDesc::Kind;
    NodeNet<T> net;
    net.input_shape = input_shape;
    std::vector<int> s = std::move(input_shape);
    int li = 0;
    for (LayerDesc d : descs) {
        if (d.kind == K::linear && d.out == 0) {
            if (auto_linear_width <= 0) throw ConfigError("linear:0 used where no auto width is defined");
            d.out = auto_linear_width;
        }
        Layer<T> l;
        l.desc = d;
        const std::string name = prefix + ".l" + std::to_string(li);
        switch (d.kind) {
            case K::conv: {
                if (s.size() != 3) throw ConfigError("conv layer needs [C,H,W] input at " + name);
                const int fan_in = s[0] * d.kh * d.kw;
                l.weight = Parameter<T>(detail_arch::uniform_init<T>({d.out, s[0], d.kh, d.kw}, fan_in, rng),
                                        true, name + ".w");
                l.bias = Parameter<T>(detail_arch::uniform_init<T>({d.out}, fan_in, rng), true, name + ".b");
                break;
            }
            case K::lbc: {
                if (s.size() != 3) throw ConfigError("lbc layer needs [C,H,W] input at " + name);
                l.lbc = init_lbc<T>(s[0], d.out, d.kh, d.kw, d.stride, d.pad, arch.sparsity_level,
                                    arch.intermediate_channels, rng, name);
                break;
            }
            case K::linear: {
                if (s.size() != 1) throw ConfigError("linear layer needs flattened input at " + name);
                l.weight = Parameter<T>(detail_arch::uniform_init<T>({s[0], d.out}, s[0], rng), true,
                                        name + ".w");
                l.bias = Parameter<T>(detail_arch::uniform_init<T>({d.out}, s[0], rng), true, name + ".b");
                break;
            }
            default:
                break;
        }
        s = layer_out_shape(d, s);
        net.layers.push_back(std::move(l));
        ++li;
    }
    return net;
}

}  // namespace dhm

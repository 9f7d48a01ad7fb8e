#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "dhm/tree.hpp"

namespace dhm {

// Versioned binary container: magic "DHM1", scalar width, mode, depth, the
// architecture strings plus their digest, the leaf table, then named parameter
// blobs in deterministic node order. Round-trips are bit-exact.

namespace detail_ckpt {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}
inline void write_u64(std::ostream& os, std::uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), 8);
}
inline void write_f64(std::ostream& os, double v) {
    os.write(reinterpret_cast<const char*>(&v), 8);
}
inline void write_str(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::uint32_t read_u32(std::istream& is, const char* field) {
    std::uint32_t v;
    if (!is.read(reinterpret_cast<char*>(&v), 4)) throw FormatError(std::string("checkpoint truncated at ") + field);
    return v;
}
inline std::uint64_t read_u64(std::istream& is, const char* field) {
    std::uint64_t v;
    if (!is.read(reinterpret_cast<char*>(&v), 8)) throw FormatError(std::string("checkpoint truncated at ") + field);
    return v;
}
inline double read_f64(std::istream& is, const char* field) {
    double v;
    if (!is.read(reinterpret_cast<char*>(&v), 8)) throw FormatError(std::string("checkpoint truncated at ") + field);
    return v;
}
inline std::string read_str(std::istream& is, const char* field) {
    const std::uint32_t n = read_u32(is, field);
    if (n > (1u << 20)) throw FormatError(std::string("implausible string length at ") + field);
    std::string s(n, '\0');
    if (!is.read(s.data(), n)) throw FormatError(std::string("checkpoint truncated at ") + field);
    return s;
}

}  // namespace detail_ckpt

template <class T>
void save_checkpoint(const std::string& path, TreeTopology<T>& tree) {
    using namespace detail_ckpt;
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot create checkpoint '" + path + "'");
    os.write("DHM1", 4);
    write_u32(os, sizeof(T));
    write_u32(os, static_cast<std::uint32_t>(tree.mode));
    write_u32(os, static_cast<std::uint32_t>(tree.depth));
    write_u32(os, static_cast<std::uint32_t>(tree.leaf_dim));
    write_u32(os, static_cast<std::uint32_t>(tree.input_shape.size()));
    for (int d : tree.input_shape) write_u32(os, static_cast<std::uint32_t>(d));
    write_str(os, tree.arch.gate);
    write_str(os, tree.arch.root_map);
    write_str(os, tree.arch.node_map);
    write_str(os, tree.arch.gate_head);
    write_str(os, tree.arch.trunk);
    write_f64(os, tree.arch.sparsity_level);
    write_u32(os, static_cast<std::uint32_t>(tree.arch.intermediate_channels));
    write_u64(os, tree.arch.digest());

    for (const auto& lf : tree.leaf_values)
        os.write(reinterpret_cast<const char*>(lf.data()),
                 static_cast<std::streamsize>(lf.size() * sizeof(T)));

    auto params = tree.parameters();
    write_u32(os, static_cast<std::uint32_t>(params.size()));
    for (const Parameter<T>* p : params) {
        write_str(os, p->name);
        write_u32(os, static_cast<std::uint32_t>(p->value.size()));
        os.write(reinterpret_cast<const char*>(p->value.data()),
                 static_cast<std::streamsize>(p->value.size() * sizeof(T)));
    }
    if (!os) throw FormatError("write failed for checkpoint '" + path + "'");
}

template <class T>
TreeTopology<T> load_checkpoint(const std::string& path) {
    using namespace detail_ckpt;
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open checkpoint '" + path + "'");
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "DHM1", 4) != 0)
        throw FormatError("'" + path + "' is not a DHM1 checkpoint");
    if (read_u32(is, "scalar width") != sizeof(T))
        throw FormatError("checkpoint scalar width does not match this build");
    const auto mode = static_cast<TreeMode>(read_u32(is, "mode"));
    if (mode != TreeMode::separated && mode != TreeMode::connected && mode != TreeMode::ndf)
        throw FormatError("checkpoint mode field is invalid");
    const int depth = static_cast<int>(read_u32(is, "depth"));
    const int leaf_dim = static_cast<int>(read_u32(is, "leaf_dim"));
    const int rank = static_cast<int>(read_u32(is, "input rank"));
    if (depth < 1 || depth > 24 || leaf_dim < 1 || rank < 1 || rank > 8)
        throw FormatError("checkpoint header fields out of range");
    std::vector<int> input_shape(rank);
    for (auto& d : input_shape) d = static_cast<int>(read_u32(is, "input dim"));

    ArchitectureSpec arch;
    arch.gate = read_str(is, "gate");
    arch.root_map = read_str(is, "root_map");
    arch.node_map = read_str(is, "node_map");
    arch.gate_head = read_str(is, "gate_head");
    arch.trunk = read_str(is, "trunk");
    arch.sparsity_level = read_f64(is, "sparsity");
    arch.intermediate_channels = static_cast<int>(read_u32(is, "intermediate channels"));
    const std::uint64_t digest = read_u64(is, "digest");
    if (digest != arch.digest())
        throw FormatError("checkpoint architecture digest mismatch (corrupt or incompatible file)");

    auto tree = build_tree<T>(depth, mode, arch, input_shape, leaf_dim, /*seed=*/0);
    for (auto& lf : tree.leaf_values)
        if (!is.read(reinterpret_cast<char*>(lf.data()),
                     static_cast<std::streamsize>(lf.size() * sizeof(T))))
            throw FormatError("checkpoint truncated at leaf values");

    auto params = tree.parameters();
    const std::uint32_t count = read_u32(is, "parameter count");
    if (count != params.size())
        throw FormatError("checkpoint parameter count " + std::to_string(count) +
                          " does not match the architecture's " + std::to_string(params.size()));
    for (Parameter<T>* p : params) {
        const std::string name = read_str(is, "parameter name");
        if (name != p->name)
            throw FormatError("checkpoint parameter '" + name + "' where '" + p->name +
                              "' was expected");
        const std::uint32_t n = read_u32(is, "parameter size");
        if (n != p->value.size())
            throw FormatError("checkpoint parameter '" + name + "' has wrong size");
        if (!is.read(reinterpret_cast<char*>(p->value.data()),
                     static_cast<std::streamsize>(n * sizeof(T))))
            throw FormatError("checkpoint truncated in parameter '" + name + "'");
    }
    return tree;
}

}  // namespace dhm

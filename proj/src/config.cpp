#include "dhm/config.hpp"

#include <fstream>

#include "dhm/errors.hpp"

namespace dhm {

ArchitectureSpec default_mnist_arch(TreeMode mode, bool sparse, double sparsity) {
    ArchitectureSpec a;
    a.sparsity_level = sparsity;
    const std::string conv = sparse ? "lbc:16,5,5,1,2" : "conv:16,5,5,1,2";
    switch (mode) {
        case TreeMode::separated:
            a.gate = "maxpool:2,2|" + conv + "|relu|maxpool:2,2|flatten|linear:64|relu|linear:1|sigmoid";
            break;
        case TreeMode::connected:
            a.root_map = "maxpool:2,2|" + conv + "|relu|maxpool:2,2|flatten";
            a.node_map = "linear:64|relu";
            a.gate_head = "linear:1|sigmoid";
            break;
        case TreeMode::ndf:
            a.trunk = "maxpool:2,2|" + conv + "|relu|maxpool:2,2|flatten|linear:128|relu|linear:0|sigmoid";
            break;
    }
    return a;
}

std::string default_cascade_gate_arch() { return "flatten|linear:16|relu|linear:1|sigmoid"; }

std::map<std::string, std::string> parse_flat_config(std::istream& in) {
    std::map<std::string, std::string> out;
    std::string line;
    int lineno = 0;
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + " has no '='");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + " has an empty key");
        out[key] = value;
    }
    return out;
}

std::map<std::string, std::string> load_flat_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file '" + path + "'");
    return parse_flat_config(f);
}

}  // namespace dhm

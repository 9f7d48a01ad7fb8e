#pragma once

#include <istream>
#include <map>
#include <string>

#include "dhm/architecture.hpp"
#include "dhm/tree.hpp"

namespace dhm {

// Default node architectures for the 28x28 digit task, one per topology.
// `sparse` swaps the dense convolution for the local-binary variant.
ArchitectureSpec default_mnist_arch(TreeMode mode, bool sparse = false, double sparsity = 0.5);

// Default dividing-node architecture for the landmark cascade (crop input).
std::string default_cascade_gate_arch();

// Flat `key = value` configuration text; '#' starts a comment. Used for
// standalone parsing outside the CLI (which reads the same format).
std::map<std::string, std::string> parse_flat_config(std::istream& in);
std::map<std::string, std::string> load_flat_config(const std::string& path);

}  // namespace dhm

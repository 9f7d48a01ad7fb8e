#pragma once

#include <stdexcept>
#include <string>

namespace dhm {

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error("format error: " + msg) {}
};

// All local recommendation scores fell below the pruning threshold; the
// renormalization in the pruning rule would divide by zero.
struct DegeneratePruneError : std::runtime_error {
    explicit DegeneratePruneError(const std::string& msg)
        : std::runtime_error("degenerate prune: " + msg) {}
};

struct TrainDivergence : std::runtime_error {
    explicit TrainDivergence(const std::string& msg) : std::runtime_error("divergence: " + msg) {}
};

}  // namespace dhm

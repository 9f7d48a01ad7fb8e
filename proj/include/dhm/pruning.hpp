#pragma once

#include <string>
#include <vector>

#include "dhm/errors.hpp"

namespace dhm {

struct PruneConfig {
    double threshold = 0.0;  // 0 disables
};

// Zero out entries strictly below the threshold and renormalize the survivors
// by their sum. Ties at the threshold survive. If nothing survives the
// renormalization would divide by zero; that case is surfaced as an error.
template <class T>
std::vector<T> prune_scores(std::vector<T> scores, const PruneConfig& cfg) {
    if (scores.empty()) throw ConfigError("prune_scores on empty score vector");
    if (cfg.threshold < 0.0) throw ConfigError("prune threshold must be >= 0");
    T sum = T(0);
    for (auto& s : scores) {
        if (static_cast<double>(s) < cfg.threshold)
            s = T(0);
        else
            sum += s;
    }
    if (sum == T(0))
        throw DegeneratePruneError("all " + std::to_string(scores.size()) +
                                   " scores below threshold " + std::to_string(cfg.threshold));
    for (auto& s : scores) s /= sum;
    return scores;
}

}  // namespace dhm

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dhm/tensor.hpp"

namespace dhm {

struct LabeledImageSet {
    Tensor<float> images;  // [N,1,H,W], values in [0,1]
    std::vector<int> labels;
    int num_classes = 0;
};

struct LandmarkSet {
    Tensor<float> images;          // [N,1,S,S]
    Tensor<float> shapes;          // [N, 2L] pixel coordinates (x0,y0,x1,y1,...)
    std::vector<float> mean_shape; // [2L] dataset mean
    int num_landmarks = 0;
    int image_size = 0;
};

// Big-endian IDX pair (images + labels). Gzip-compressed files are accepted
// transparently.
LabeledImageSet load_idx(const std::string& images_path, const std::string& labels_path);

// Writes an IDX pair; a ".gz" suffix selects gzip output.
void save_idx(const std::string& images_path, const std::string& labels_path,
              const LabeledImageSet& set);

// Synthetic multi-landmark task: a regular polygon with `num_landmarks`
// vertices under random rotation / scale / translation / per-vertex jitter,
// all deviation magnitudes scaled by `noise` (0 = one canonical figure).
// Samples whose vertices would leave the canvas are re-drawn.
LandmarkSet gen_landmark_task(int n, int image_size, int num_landmarks, double noise,
                              std::uint64_t seed);

// Mean per-landmark Euclidean error normalized by the ground-truth shape's
// tight bounding-box diagonal, averaged over samples. Both are [N, 2L] flat.
double landmark_error(const std::vector<float>& pred, const Tensor<float>& truth,
                      int num_landmarks);

}  // namespace dhm

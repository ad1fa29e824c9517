#pragma once

#include "sedt/autograd.hpp"

#include <vector>

namespace sedt {

using ag::Matrix;
using ag::RowVector;

/// Outputs of one decoder block for the N event slots.
struct BlockOutput {
    Matrix class_probs;  // N x (K+1), softmax rows, last column is the empty class
    Matrix boundaries;   // N x 2, (center, duration) in [0, 1]
};

/// Model output for one clip: every decoder block plus the clip-level tags
/// from the audio slot of the final block.
struct PredictionSet {
    std::vector<BlockOutput> blocks;
    RowVector tag_probs;  // K sigmoid values

    const BlockOutput& final_block() const { return blocks.back(); }
    Eigen::Index num_queries() const { return blocks.empty() ? 0 : blocks.front().class_probs.rows(); }
    Eigen::Index num_classes() const { return tag_probs.size(); }
};

/// Gradient of a scalar loss with respect to every tensor of a PredictionSet.
struct PredictionGrad {
    std::vector<BlockOutput> blocks;
    RowVector tag_probs;

    static PredictionGrad zeros_like(const PredictionSet& p) {
        PredictionGrad g;
        for (const auto& b : p.blocks) {
            g.blocks.push_back({Matrix::Zero(b.class_probs.rows(), b.class_probs.cols()),
                                Matrix::Zero(b.boundaries.rows(), b.boundaries.cols())});
        }
        g.tag_probs = RowVector::Zero(p.tag_probs.size());
        return g;
    }
};

}  // namespace sedt

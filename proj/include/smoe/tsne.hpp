#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "smoe/common.hpp"

namespace smoe {

struct TsneOptions {
    double perplexity = 30.0;
    Index iterations = 1000;
    std::uint64_t seed = 0;
    double learning_rate = 200.0;
    double exaggeration = 12.0;
    Index exaggeration_iters = 250; // momentum also switches 0.5 -> 0.8 here
    double initial_momentum = 0.5;
    double final_momentum = 0.8;
};

struct EmbeddingResult {
    Eigen::MatrixX2d points;
    double final_kl = 0;
    std::vector<double> trace; // KL against the true (unexaggerated) P, per iteration
};

// Exact O(M^2) embedding into the plane. Per-point bandwidths come from a
// <=50-step binary search matching the target perplexity to 1e-5 on the
// entropy scale; the low-dimensional kernel is Student-t with one degree of
// freedom. M is capped at 10,000 points.
EmbeddingResult tsne(const Eigen::MatrixXd& x, const TsneOptions& opts = {});

constexpr Index kTsneMaxPoints = 10000;

} // namespace smoe

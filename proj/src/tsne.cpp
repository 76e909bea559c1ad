#include "smoe/tsne.hpp"

#include <cmath>

#include "smoe/rng.hpp"

namespace smoe {

namespace {

Eigen::MatrixXd pairwise_sq_dists(const Eigen::MatrixXd& x) {
    const Eigen::VectorXd sq = x.rowwise().squaredNorm();
    Eigen::MatrixXd d = -2.0 * x * x.transpose();
    d.colwise() += sq;
    d.rowwise() += sq.transpose();
    return d.cwiseMax(0.0);
}

// Row-normalized conditional affinities with per-point precision found by
// binary search on the Shannon entropy.
Eigen::MatrixXd conditional_affinities(const Eigen::MatrixXd& d2, double perplexity) {
    const Index m = d2.rows();
    const double target_entropy = std::log(perplexity);
    Eigen::MatrixXd p(m, m);
    Eigen::VectorXd row(m);

    for (Index i = 0; i < m; ++i) {
        double beta = 1.0, beta_min = -1.0, beta_max = -1.0;
        bool has_min = false, has_max = false;
        double sum = 0;
        for (int iter = 0; iter < 50; ++iter) {
            sum = 0;
            double dot = 0;
            for (Index j = 0; j < m; ++j) {
                if (j == i) {
                    row[j] = 0;
                    continue;
                }
                row[j] = std::exp(-beta * d2(i, j));
                sum += row[j];
                dot += row[j] * d2(i, j);
            }
            // H = log(sum) + beta * E[d2]
            const double h = std::log(std::max(sum, 1e-300)) + beta * dot / std::max(sum, 1e-300);
            const double diff = h - target_entropy;
            if (std::abs(diff) < 1e-5) break;
            if (diff > 0) {
                has_min = true;
                beta_min = beta;
                beta = has_max ? (beta + beta_max) / 2.0 : beta * 2.0;
            } else {
                has_max = true;
                beta_max = beta;
                beta = has_min ? (beta + beta_min) / 2.0 : beta / 2.0;
            }
        }
        if (sum <= 0) sum = 1e-300;
        for (Index j = 0; j < m; ++j) p(i, j) = row[j] / sum;
    }
    return p;
}

} // namespace

EmbeddingResult tsne(const Eigen::MatrixXd& x, const TsneOptions& opts) {
    const Index m = x.rows();
    if (m > kTsneMaxPoints)
        throw ParameterError("tsne: " + std::to_string(m) + " points exceed the exact-variant cap of " +
                             std::to_string(kTsneMaxPoints));
    if (m < 4) throw ParameterError("tsne: need at least 4 points");
    if (opts.perplexity < 1.0 || opts.perplexity >= double(m) / 3.0)
        throw ParameterError("tsne: perplexity " + format_number(opts.perplexity) +
                             " infeasible for " + std::to_string(m) + " points (need 1 <= u < M/3)");

    Eigen::MatrixXd p = conditional_affinities(pairwise_sq_dists(x), opts.perplexity);
    // symmetrize and normalize to a joint distribution
    p = (p + p.transpose()).eval();
    p /= p.sum();

    Rng rng(opts.seed);
    Eigen::MatrixX2d y(m, 2);
    for (Index i = 0; i < m; ++i)
        for (Index c = 0; c < 2; ++c) y(i, c) = 1e-4 * rng.normal();

    Eigen::MatrixX2d velocity = Eigen::MatrixX2d::Zero(m, 2);
    Eigen::MatrixX2d gains = Eigen::MatrixX2d::Ones(m, 2);
    Eigen::MatrixX2d grad(m, 2);
    Eigen::MatrixXd num(m, m);

    EmbeddingResult result;
    result.trace.reserve(std::size_t(opts.iterations));

    auto pass = [&](bool exaggerate, Eigen::MatrixX2d* grad_out) {
        // Student-t numerators and the partition value
        double z = 0;
        for (Index i = 0; i < m; ++i) {
            num(i, i) = 0;
            for (Index j = i + 1; j < m; ++j) {
                const double dx = y(i, 0) - y(j, 0);
                const double dy = y(i, 1) - y(j, 1);
                const double v = 1.0 / (1.0 + dx * dx + dy * dy);
                num(i, j) = v;
                num(j, i) = v;
                z += 2.0 * v;
            }
        }
        z = std::max(z, 1e-300);

        double kl = 0;
        if (grad_out) grad_out->setZero();
        const double exag = exaggerate ? opts.exaggeration : 1.0;
        for (Index i = 0; i < m; ++i) {
            for (Index j = 0; j < m; ++j) {
                if (j == i) continue;
                const double pij = p(i, j);
                const double qij = std::max(num(i, j) / z, 1e-12);
                if (pij > 0) kl += pij * std::log(std::max(pij, 1e-12) / qij);
                if (grad_out) {
                    const double mult = 4.0 * (exag * pij - num(i, j) / z) * num(i, j);
                    (*grad_out)(i, 0) += mult * (y(i, 0) - y(j, 0));
                    (*grad_out)(i, 1) += mult * (y(i, 1) - y(j, 1));
                }
            }
        }
        return kl;
    };

    for (Index it = 0; it < opts.iterations; ++it) {
        const bool exaggerate = it < opts.exaggeration_iters;
        const double momentum = exaggerate ? opts.initial_momentum : opts.final_momentum;
        result.trace.push_back(pass(exaggerate, &grad));
        // per-coordinate adaptive rates from the reference method; without
        // them the exaggeration phase diverges at this learning rate
        for (Index i = 0; i < m; ++i)
            for (Index c = 0; c < 2; ++c) {
                const bool opposing = (grad(i, c) > 0) != (velocity(i, c) > 0);
                gains(i, c) = opposing ? gains(i, c) + 0.2 : gains(i, c) * 0.8;
                gains(i, c) = std::max(gains(i, c), 0.01);
            }
        velocity = momentum * velocity - opts.learning_rate * (gains.array() * grad.array()).matrix();
        y += velocity;
        y.rowwise() -= y.colwise().mean(); // keep the embedding centered
    }
    result.final_kl = pass(false, nullptr);
    result.points = std::move(y);
    return result;
}

} // namespace smoe

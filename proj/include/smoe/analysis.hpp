#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "smoe/data.hpp"
#include "smoe/model.hpp"
#include "smoe/pgm.hpp"
#include "smoe/train.hpp"

namespace smoe {

// Per-sample latent means with the hard expert assignment and ground-truth
// label, the input to every downstream analysis.
struct AssignmentTable {
    Eigen::MatrixXd mu;         // M x d
    std::vector<Index> expert;  // e* per sample
    std::vector<Index> label;   // class per sample
    Index num_experts = 0;
    Index num_classes = 0;

    Index size() const { return Index(expert.size()); }
};

template <typename S>
AssignmentTable assignments(const SmoeVae<S>& model, const Dataset& data, Index batch = 256) {
    const Index m = data.size();
    AssignmentTable t;
    t.mu.resize(m, model.config.latent_dim);
    t.expert.reserve(std::size_t(m));
    t.label = data.labels;
    t.num_experts = model.config.num_experts;
    t.num_classes = data.num_classes();

    std::vector<Index> order(static_cast<std::size_t>(m));
    for (Index i = 0; i < m; ++i) order[std::size_t(i)] = i;
    for (Index start = 0; start < m; start += batch) {
        const Index n = std::min(batch, m - start);
        Tensor<S> x = gather_images<S>(data, order, start, n);
        auto [mu, logvar] = encode(model, x);
        GateOutput<S> g = gate(model, mu);
        for (Index i = 0; i < n; ++i) {
            for (Index j = 0; j < model.config.latent_dim; ++j)
                t.mu(start + i, j) = double(mu.mat()(i, j));
            t.expert.push_back(g.argmax[std::size_t(i)]);
        }
    }
    return t;
}

struct Utilization {
    std::vector<double> fraction; // per expert, sums to 1
    Index dead = 0;               // strictly below 1%
};

Utilization utilization(const std::vector<Index>& expert, Index num_experts);

// ---- linear probe ------------------------------------------------------------

enum class ProbeTarget { expert, label };

struct ProbeResult {
    ProbeTarget target;
    double train_accuracy = 0;
    double test_accuracy = 0;
    Eigen::MatrixXd confusion; // rows: true target, cols: predicted (test split)
};

struct ProbeOptions {
    double learning_rate = 0.1;
    Index iterations = 500;
    double l2 = 1e-4;
    double train_fraction = 0.8; // stratified
};

// Multinomial logistic regression on raw features, full-batch gradient
// descent from zero init.
ProbeResult probe_features(const Eigen::MatrixXd& x, const std::vector<Index>& target,
                           std::uint64_t seed, const ProbeOptions& opts = {});

ProbeResult linear_probe(const AssignmentTable& table, ProbeTarget target, std::uint64_t seed,
                         const ProbeOptions& opts = {});

// ---- partition agreement -----------------------------------------------------

struct AgreementScores {
    double nmi = 0;             // arithmetic-mean normalization
    double ari = 0;             // Hubert-Arabie adjusted Rand index
    double mapped_accuracy = 0; // greedy best-match expert -> class mapping
};

AgreementScores agreement_scores(const std::vector<Index>& a, const std::vector<Index>& b);
AgreementScores agreement(const AssignmentTable& table);

// ---- reconstruction grids ------------------------------------------------------

struct GridReport {
    std::vector<std::string> files;   // one pgm per active expert
    std::vector<Index> skipped;       // experts with zero routed samples
    std::string caption_file;
};

// For each active expert: per_expert routed inputs on top, their hard-gated
// reconstructions below, 2px separators, written as binary PGM plus a text
// caption with labels and utilization.
template <typename S>
GridReport recon_grid(const SmoeVae<S>& model, const AssignmentTable& table, const Dataset& data,
                      const std::string& out_dir, Index per_expert = 5, std::uint64_t seed = 0);

namespace detail {
PgmImage render_grid(const std::vector<const std::uint8_t*>& inputs,
                     const std::vector<std::vector<std::uint8_t>>& recons);
GridReport write_grid_outputs(const std::string& out_dir, Index num_experts,
                              const std::vector<PgmImage>& grids,
                              const std::vector<std::vector<Index>>& chosen,
                              const std::vector<std::vector<Index>>& labels,
                              const Utilization& util,
                              const std::vector<std::string>& class_names);
} // namespace detail

template <typename S>
GridReport recon_grid(const SmoeVae<S>& model, const AssignmentTable& table, const Dataset& data,
                      const std::string& out_dir, Index per_expert, std::uint64_t seed) {
    const Index e_count = model.config.num_experts;
    Rng rng(seed);
    Utilization util = utilization(table.expert, e_count);

    std::vector<PgmImage> grids(static_cast<std::size_t>(e_count));
    std::vector<std::vector<Index>> chosen(static_cast<std::size_t>(e_count));
    std::vector<std::vector<Index>> labels(static_cast<std::size_t>(e_count));
    for (Index e = 0; e < e_count; ++e) {
        std::vector<Index> routed;
        for (Index i = 0; i < table.size(); ++i)
            if (table.expert[std::size_t(i)] == e) routed.push_back(i);
        if (routed.empty()) continue;
        rng.shuffle(routed.begin(), routed.end());
        routed.resize(std::size_t(std::min<Index>(per_expert, Index(routed.size()))));

        Tensor<S> x = gather_images<S>(data, routed, 0, Index(routed.size()));
        std::vector<Index> forced(routed.size(), e);
        HardForward<S> h = forward_hard(model, x, &forced);

        std::vector<const std::uint8_t*> inputs;
        std::vector<std::vector<std::uint8_t>> recons;
        for (std::size_t i = 0; i < routed.size(); ++i) {
            inputs.push_back(data.image(routed[i]));
            std::vector<std::uint8_t> rec(static_cast<std::size_t>(kImagePixels));
            const S* src = h.x_hat.data() + Index(i) * kImagePixels;
            for (Index p = 0; p < kImagePixels; ++p)
                rec[std::size_t(p)] = std::uint8_t(std::lround(std::clamp(double(src[p]), 0.0, 1.0) * 255.0));
            recons.push_back(std::move(rec));
            labels[std::size_t(e)].push_back(table.label[std::size_t(routed[i])]);
        }
        chosen[std::size_t(e)] = routed;
        grids[std::size_t(e)] = detail::render_grid(inputs, recons);
    }
    return detail::write_grid_outputs(out_dir, e_count, grids, chosen, labels, util, data.class_names);
}

} // namespace smoe

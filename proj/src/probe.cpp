#include "smoe/analysis.hpp"

#include <algorithm>
#include <map>

#include "smoe/rng.hpp"

namespace smoe {

namespace {

Index count_targets(const std::vector<Index>& target) {
    Index k = 0;
    for (Index t : target) {
        if (t < 0) throw ParameterError("probe: negative target value");
        k = std::max(k, t + 1);
    }
    return k;
}

} // namespace

ProbeResult probe_features(const Eigen::MatrixXd& x, const std::vector<Index>& target,
                           std::uint64_t seed, const ProbeOptions& opts) {
    const Index m = x.rows();
    if (Index(target.size()) != m)
        throw DimensionError("probe: feature rows " + std::to_string(m) + " vs targets " +
                             std::to_string(target.size()));
    const Index k = count_targets(target);
    {
        std::vector<bool> seen(static_cast<std::size_t>(k), false);
        for (Index t : target) seen[std::size_t(t)] = true;
        Index distinct = 0;
        for (bool s : seen) distinct += s ? 1 : 0;
        if (distinct < 2) throw ParameterError("probe: need at least 2 distinct target values");
    }

    // Stratified 80/20 split from one global shuffle; the assignment depends
    // only on class membership sets, so relabeling targets cannot change it.
    Rng rng(seed);
    std::vector<Index> order(static_cast<std::size_t>(m));
    for (Index i = 0; i < m; ++i) order[std::size_t(i)] = i;
    rng.shuffle(order.begin(), order.end());
    std::vector<Index> class_count(static_cast<std::size_t>(k), 0);
    for (Index t : target) ++class_count[std::size_t(t)];
    std::vector<Index> quota(static_cast<std::size_t>(k));
    for (Index c = 0; c < k; ++c)
        quota[std::size_t(c)] = Index(double(class_count[std::size_t(c)]) * opts.train_fraction);
    std::vector<Index> taken(static_cast<std::size_t>(k), 0);
    std::vector<Index> train_idx, test_idx;
    for (Index i : order) {
        const Index cls = target[std::size_t(i)];
        if (taken[std::size_t(cls)] < quota[std::size_t(cls)]) {
            ++taken[std::size_t(cls)];
            train_idx.push_back(i);
        } else {
            test_idx.push_back(i);
        }
    }
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(test_idx.begin(), test_idx.end());

    const Index d = x.cols();
    const Index n = Index(train_idx.size());
    Eigen::MatrixXd xt(n, d);
    Eigen::VectorXi yt(n);
    for (Index i = 0; i < n; ++i) {
        xt.row(i) = x.row(train_idx[std::size_t(i)]);
        yt[i] = int(target[std::size_t(train_idx[std::size_t(i)])]);
    }

    // Softmax regression, full batch, zero init.
    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(k, d);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(k);
    Eigen::MatrixXd logits(n, k), p(n, k);
    for (Index it = 0; it < opts.iterations; ++it) {
        logits.noalias() = xt * w.transpose();
        logits.rowwise() += b.transpose();
        for (Index i = 0; i < n; ++i) {
            const double mx = logits.row(i).maxCoeff();
            p.row(i) = (logits.row(i).array() - mx).exp();
            p.row(i) /= p.row(i).sum();
        }
        for (Index i = 0; i < n; ++i) p(i, yt[i]) -= 1.0;
        p /= double(n);
        Eigen::MatrixXd gw = p.transpose() * xt + 2.0 * opts.l2 * w;
        Eigen::VectorXd gb = p.colwise().sum().transpose();
        w -= opts.learning_rate * gw;
        b -= opts.learning_rate * gb;
    }

    auto accuracy = [&](const std::vector<Index>& idx, Eigen::MatrixXd* confusion) {
        if (idx.empty()) return 0.0;
        Index hits = 0;
        for (Index i : idx) {
            Eigen::VectorXd row = w * x.row(i).transpose() + b;
            Index pred = 0;
            row.maxCoeff(&pred);
            if (pred == target[std::size_t(i)]) ++hits;
            if (confusion) (*confusion)(target[std::size_t(i)], pred) += 1.0;
        }
        return double(hits) / double(idx.size());
    };

    ProbeResult r;
    r.confusion = Eigen::MatrixXd::Zero(k, k);
    r.train_accuracy = accuracy(train_idx, nullptr);
    r.test_accuracy = accuracy(test_idx, &r.confusion);
    return r;
}

} // namespace smoe

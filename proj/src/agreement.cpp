#include "smoe/analysis.hpp"

#include <cmath>

namespace smoe {

namespace {

Index max_value(const std::vector<Index>& v) {
    Index k = 0;
    for (Index x : v) {
        if (x < 0) throw ParameterError("agreement: negative partition value");
        k = std::max(k, x + 1);
    }
    return k;
}

} // namespace

AgreementScores agreement_scores(const std::vector<Index>& a, const std::vector<Index>& b) {
    if (a.size() != b.size() || a.empty())
        throw DimensionError("agreement: partitions must be equal-length and non-empty");
    const Index m = Index(a.size());
    const Index ka = max_value(a), kb = max_value(b);

    Eigen::MatrixXd n = Eigen::MatrixXd::Zero(ka, kb);
    for (Index i = 0; i < m; ++i) n(a[std::size_t(i)], b[std::size_t(i)]) += 1.0;
    Eigen::VectorXd ra = n.rowwise().sum();
    Eigen::VectorXd cb = n.colwise().sum().transpose();

    AgreementScores s;

    // Mutual information and entropies, natural log.
    double mi = 0, ha = 0, hb = 0;
    for (Index i = 0; i < ka; ++i)
        for (Index j = 0; j < kb; ++j)
            if (n(i, j) > 0)
                mi += n(i, j) / double(m) *
                      std::log(double(m) * n(i, j) / (ra[i] * cb[j]));
    for (Index i = 0; i < ka; ++i)
        if (ra[i] > 0) ha -= ra[i] / double(m) * std::log(ra[i] / double(m));
    for (Index j = 0; j < kb; ++j)
        if (cb[j] > 0) hb -= cb[j] / double(m) * std::log(cb[j] / double(m));
    s.nmi = (ha + hb) > 0 ? mi / ((ha + hb) / 2.0) : 1.0;

    // Hubert-Arabie ARI from pair counts.
    auto comb2 = [](double x) { return x * (x - 1.0) / 2.0; };
    double sum_ij = 0, sum_a = 0, sum_b = 0;
    for (Index i = 0; i < ka; ++i)
        for (Index j = 0; j < kb; ++j) sum_ij += comb2(n(i, j));
    for (Index i = 0; i < ka; ++i) sum_a += comb2(ra[i]);
    for (Index j = 0; j < kb; ++j) sum_b += comb2(cb[j]);
    const double expected = sum_a * sum_b / comb2(double(m));
    const double maximum = 0.5 * (sum_a + sum_b);
    s.ari = std::abs(maximum - expected) < 1e-12 ? 1.0 : (sum_ij - expected) / (maximum - expected);

    // Greedy best-match mapping between partitions.
    Eigen::MatrixXd work = n;
    double matched = 0;
    const Index rounds = std::min(ka, kb);
    for (Index r = 0; r < rounds; ++r) {
        Index bi = 0, bj = 0;
        double best = -1;
        for (Index i = 0; i < ka; ++i)
            for (Index j = 0; j < kb; ++j)
                if (work(i, j) > best) {
                    best = work(i, j);
                    bi = i;
                    bj = j;
                }
        if (best <= 0) break;
        matched += best;
        work.row(bi).setConstant(-1);
        work.col(bj).setConstant(-1);
    }
    s.mapped_accuracy = matched / double(m);
    return s;
}

} // namespace smoe

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <unistd.h>

#include "smoe/analysis.hpp"
#include "smoe/sweep.hpp"
#include "smoe/tsne.hpp"

using namespace smoe;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("smoe_an_" + std::to_string(::getpid()) + "_" +
                                            std::to_string(counter()++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    static int& counter() {
        static int c = 0;
        return c;
    }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

// Exhaustive pair-count ARI, the agreement oracle.
double ari_ref(const std::vector<Index>& a, const std::vector<Index>& b) {
    const Index m = Index(a.size());
    double n00 = 0, n01 = 0, n10 = 0, n11 = 0;
    for (Index i = 0; i < m; ++i)
        for (Index j = i + 1; j < m; ++j) {
            const bool same_a = a[std::size_t(i)] == a[std::size_t(j)];
            const bool same_b = b[std::size_t(i)] == b[std::size_t(j)];
            if (same_a && same_b)
                ++n11;
            else if (same_a)
                ++n10;
            else if (same_b)
                ++n01;
            else
                ++n00;
        }
    const double total = n00 + n01 + n10 + n11;
    const double expected = (n11 + n10) * (n11 + n01) / total;
    const double maximum = 0.5 * ((n11 + n10) + (n11 + n01));
    if (std::abs(maximum - expected) < 1e-12) return 1.0;
    return (n11 - expected) / (maximum - expected);
}

double silhouette(const Eigen::MatrixX2d& y, const std::vector<Index>& cluster, Index k) {
    const Index m = y.rows();
    double acc = 0;
    for (Index i = 0; i < m; ++i) {
        std::vector<double> mean_dist(static_cast<std::size_t>(k), 0.0);
        std::vector<Index> count(static_cast<std::size_t>(k), 0);
        for (Index j = 0; j < m; ++j) {
            if (j == i) continue;
            const double d = (y.row(i) - y.row(j)).norm();
            mean_dist[std::size_t(cluster[std::size_t(j)])] += d;
            ++count[std::size_t(cluster[std::size_t(j)])];
        }
        for (Index c = 0; c < k; ++c)
            if (count[std::size_t(c)] > 0) mean_dist[std::size_t(c)] /= double(count[std::size_t(c)]);
        const double a = mean_dist[std::size_t(cluster[std::size_t(i)])];
        double b = 1e300;
        for (Index c = 0; c < k; ++c)
            if (c != cluster[std::size_t(i)]) b = std::min(b, mean_dist[std::size_t(c)]);
        acc += (b - a) / std::max(a, b);
    }
    return acc / double(m);
}

} // namespace

TEST_CASE("utilization fractions and the dead threshold") {
    SUBCASE("uniform assignments") {
        std::vector<Index> e{0, 1, 2, 3, 0, 1, 2, 3};
        auto u = utilization(e, 4);
        for (double f : u.fraction) CHECK(f == doctest::Approx(0.25));
        CHECK(u.dead == 0);
    }
    SUBCASE("full collapse") {
        std::vector<Index> e(40, 0);
        auto u = utilization(e, 4);
        CHECK(u.fraction[0] == doctest::Approx(1.0));
        CHECK(u.dead == 3);
    }
    SUBCASE("exactly 1% is not dead") {
        std::vector<Index> e(100, 0);
        e[0] = 1;
        auto u = utilization(e, 2);
        CHECK(u.fraction[1] == doctest::Approx(0.01));
        CHECK(u.dead == 0);
    }
}

TEST_CASE("probe separates two well-split Gaussians") {
    Rng rng(101);
    const Index n = 1000;
    Eigen::MatrixXd x(n, 4);
    std::vector<Index> y(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
        const Index cls = i % 2;
        y[std::size_t(i)] = cls;
        for (Index j = 0; j < 4; ++j) x(i, j) = rng.normal() + (cls ? 5.0 : -5.0);
    }
    auto r = probe_features(x, y, 1);
    CHECK(r.test_accuracy > 0.99);
    CHECK(r.train_accuracy > 0.99);
    // confusion row sums equal per-target test counts (stratified 80/20 of 500 each)
    CHECK(r.confusion.row(0).sum() == doctest::Approx(100));
    CHECK(r.confusion.row(1).sum() == doctest::Approx(100));
}

TEST_CASE("probe on shuffled labels sits at chance") {
    Rng rng(103);
    const Index n = 2000, k = 4;
    Eigen::MatrixXd x(n, 6);
    std::vector<Index> y(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
        y[std::size_t(i)] = Index(rng.below(std::uint64_t(k)));
        for (Index j = 0; j < 6; ++j) x(i, j) = rng.normal();
    }
    auto r = probe_features(x, y, 2);
    CHECK(std::abs(r.test_accuracy - 0.25) < 0.05);
}

TEST_CASE("probe rejects degenerate targets") {
    Eigen::MatrixXd x(10, 3);
    x.setZero();
    std::vector<Index> y(10, 0);
    CHECK_THROWS_AS(probe_features(x, y, 1), ParameterError);
}

TEST_CASE("agreement scores") {
    SUBCASE("identical partitions score 1 on all three") {
        std::vector<Index> a{0, 0, 1, 1, 2, 2};
        auto s = agreement_scores(a, a);
        CHECK(s.nmi == doctest::Approx(1.0));
        CHECK(s.ari == doctest::Approx(1.0));
        CHECK(s.mapped_accuracy == doctest::Approx(1.0));
    }
    SUBCASE("4-point worked case matches brute-force pair counting") {
        std::vector<Index> labels{0, 0, 1, 1}, experts{0, 1, 0, 1};
        auto s = agreement_scores(experts, labels);
        CHECK(s.ari == doctest::Approx(-0.5));
        CHECK(ari_ref(experts, labels) == doctest::Approx(-0.5));
    }
    SUBCASE("matches the pair-count oracle on random partitions") {
        Rng rng(107);
        for (int rep = 0; rep < 8; ++rep) {
            const Index m = 30 + Index(rng.below(40));
            std::vector<Index> a(static_cast<std::size_t>(m));
            std::vector<Index> b(static_cast<std::size_t>(m));
            for (Index i = 0; i < m; ++i) {
                a[std::size_t(i)] = Index(rng.below(4));
                b[std::size_t(i)] = Index(rng.below(3));
            }
            auto s = agreement_scores(a, b);
            CHECK(s.ari == doctest::Approx(ari_ref(a, b)).epsilon(1e-9));
        }
    }
    SUBCASE("permutation null: ARI near zero at M=10000") {
        Rng rng(109);
        const Index m = 10000;
        std::vector<Index> a(static_cast<std::size_t>(m));
            std::vector<Index> b(static_cast<std::size_t>(m));
        for (Index i = 0; i < m; ++i) {
            a[std::size_t(i)] = Index(rng.below(7));
            b[std::size_t(i)] = Index(rng.below(5));
        }
        auto s = agreement_scores(a, b);
        CHECK(std::abs(s.ari) < 0.02);
    }
    SUBCASE("relabeling invariance") {
        Rng rng(113);
        std::vector<Index> a(200), b(200);
        for (auto& v : a) v = Index(rng.below(5));
        for (auto& v : b) v = Index(rng.below(4));
        auto s1 = agreement_scores(a, b);
        std::vector<Index> perm{3, 0, 4, 2, 1};
        std::vector<Index> a2(a.size());
        for (std::size_t i = 0; i < a.size(); ++i) a2[i] = perm[std::size_t(a[i])];
        auto s2 = agreement_scores(a2, b);
        CHECK(s1.nmi == doctest::Approx(s2.nmi).epsilon(1e-12));
        CHECK(s1.ari == doctest::Approx(s2.ari).epsilon(1e-12));
        CHECK(s1.mapped_accuracy == doctest::Approx(s2.mapped_accuracy).epsilon(1e-12));
    }
    SUBCASE("greedy mapping on an unbalanced contingency") {
        // best greedy match maps 0->0 (3 hits) then 1->1 (2 hits): 5/7
        std::vector<Index> experts{0, 0, 0, 0, 1, 1, 1};
        std::vector<Index> classes{0, 0, 0, 1, 1, 1, 0};
        auto s = agreement_scores(experts, classes);
        CHECK(s.mapped_accuracy == doctest::Approx(5.0 / 7.0));
    }
}

TEST_CASE("tsne parameter validation") {
    Eigen::MatrixXd x(30, 3);
    x.setRandom();
    TsneOptions opts;
    opts.perplexity = 10.0; // >= 30/3
    CHECK_THROWS_AS(tsne(x, opts), ParameterError);
    opts.perplexity = 0.5;
    CHECK_THROWS_AS(tsne(x, opts), ParameterError);
}

TEST_CASE("tsne: three separated Gaussian clusters stay separated") {
    Rng rng(127);
    const Index per = 150;
    Eigen::MatrixXd x(3 * per, 5);
    std::vector<Index> cluster(static_cast<std::size_t>(3 * per));
    const double centers[3][5] = {{0, 0, 0, 0, 0}, {20, 0, 0, 0, 0}, {0, 20, 0, 0, 0}};
    for (Index c = 0; c < 3; ++c)
        for (Index i = 0; i < per; ++i) {
            const Index row = c * per + i;
            cluster[std::size_t(row)] = c;
            for (Index j = 0; j < 5; ++j) x(row, j) = centers[c][j] + rng.normal();
        }

    TsneOptions opts;
    opts.seed = 1;
    auto emb = tsne(x, opts);
    REQUIRE(emb.points.rows() == 450);
    CHECK(emb.points.allFinite());
    CHECK(silhouette(emb.points, cluster, 3) > 0.5);

    // objective non-increasing over the final 100 iterations
    REQUIRE(emb.trace.size() == 1000);
    for (std::size_t i = 901; i < emb.trace.size(); ++i)
        CHECK(emb.trace[i] <= emb.trace[i - 1] + 1e-9);
    CHECK(emb.final_kl <= emb.trace.back() + 1e-9);
}

TEST_CASE("tsne: cluster structure survives input permutation") {
    Rng rng(137);
    const Index per = 60;
    Eigen::MatrixXd x(3 * per, 4);
    std::vector<Index> cluster(static_cast<std::size_t>(3 * per));
    const double centers[3][4] = {{0, 0, 0, 0}, {20, 0, 0, 0}, {0, 20, 0, 0}};
    for (Index c = 0; c < 3; ++c)
        for (Index i = 0; i < per; ++i) {
            cluster[std::size_t(c * per + i)] = c;
            for (Index j = 0; j < 4; ++j) x(c * per + i, j) = centers[c][j] + rng.normal();
        }
    TsneOptions opts;
    opts.perplexity = 15;
    opts.iterations = 500;
    opts.seed = 5;
    auto emb = tsne(x, opts);
    CHECK(silhouette(emb.points, cluster, 3) > 0.5);

    // permute rows, embed again: per-cluster separation is preserved
    std::vector<Index> perm(static_cast<std::size_t>(3 * per));
    for (Index i = 0; i < 3 * per; ++i) perm[std::size_t(i)] = i;
    Rng prng(7);
    prng.shuffle(perm.begin(), perm.end());
    Eigen::MatrixXd xp(3 * per, 4);
    std::vector<Index> cp(static_cast<std::size_t>(3 * per));
    for (Index i = 0; i < 3 * per; ++i) {
        xp.row(i) = x.row(perm[std::size_t(i)]);
        cp[std::size_t(i)] = cluster[std::size_t(perm[std::size_t(i)])];
    }
    auto emb2 = tsne(xp, opts);
    CHECK(silhouette(emb2.points, cp, 3) > 0.5);
}

TEST_CASE("probe accuracy is invariant under target relabeling") {
    Rng rng(139);
    const Index n = 600;
    Eigen::MatrixXd x(n, 4);
    std::vector<Index> y(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
        const Index cls = i % 3;
        y[std::size_t(i)] = cls;
        for (Index j = 0; j < 4; ++j) x(i, j) = rng.normal() + 3.0 * double(cls == j);
    }
    auto r1 = probe_features(x, y, 9);
    std::vector<Index> relabel{2, 0, 1};
    std::vector<Index> y2(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) y2[i] = relabel[std::size_t(y[i])];
    auto r2 = probe_features(x, y2, 9);
    CHECK(r1.test_accuracy == doctest::Approx(r2.test_accuracy).epsilon(1e-12));
    CHECK(r1.train_accuracy == doctest::Approx(r2.train_accuracy).epsilon(1e-12));
}

TEST_CASE("tsne: duplicate points land together") {
    // duplicate pair inside one of three clusters; the embedding must bring
    // the pair orders of magnitude closer than any distinct neighbor
    Rng rng(97);
    const Index per = 100;
    Eigen::MatrixXd x(3 * per, 5);
    const double centers[3][5] = {{0, 0, 0, 0, 0}, {20, 0, 0, 0, 0}, {0, 20, 0, 0, 0}};
    for (Index c = 0; c < 3; ++c)
        for (Index i = 0; i < per; ++i)
            for (Index j = 0; j < 5; ++j) x(c * per + i, j) = centers[c][j] + rng.normal();
    x.row(7) = x.row(3);
    TsneOptions opts;
    opts.seed = 1;
    opts.iterations = 2000;
    auto emb = tsne(x, opts);
    const double dup = (emb.points.row(7) - emb.points.row(3)).norm();
    CHECK(dup < 1e-3);
    double nearest_other = 1e300;
    for (Index j = 0; j < 3 * per; ++j)
        if (j != 3 && j != 7)
            nearest_other = std::min(nearest_other, (emb.points.row(3) - emb.points.row(j)).norm());
    CHECK(dup < nearest_other / 100.0);
}

TEST_CASE("assignments and grids on a trained tiny model") {
    SyntheticSpec spec;
    spec.per_class = 120;
    spec.seed = 9;
    auto data = build_synthetic_dataset(spec, 1.0, 9);

    TrainConfig cfg;
    cfg.model = ModelConfig::miniature(5, 28, 8);
    cfg.epochs = 6;
    cfg.lr = 1e-3;
    cfg.batch.batch_size = 90;
    cfg.seed = 21;
    auto state = train<float>(cfg, data.train, data.test);

    auto table = assignments(state.model, data.test);
    CHECK(table.size() == data.test.size());
    CHECK(table.mu.rows() == data.test.size());
    CHECK(table.mu.cols() == 8);
    for (Index e : table.expert) {
        CHECK(e >= 0);
        CHECK(e < 5);
    }
    // assignments equal hard-eval routing computed independently
    EvalResult ev = evaluate(state.model, data.test, RoutingMode::unsupervised);
    for (Index i = 0; i < table.size(); ++i)
        CHECK(table.expert[std::size_t(i)] == ev.assignments[std::size_t(i)]);

    SUBCASE("E=1 assigns everything to expert zero") {
        TrainConfig c1 = cfg;
        c1.model.num_experts = 1;
        c1.epochs = 1;
        auto s1 = train<float>(c1, data.train, data.test);
        auto t1 = assignments(s1.model, data.test);
        for (Index e : t1.expert) CHECK(e == 0);
    }

    SUBCASE("a gate forced one-hot routes every sample to the forced expert") {
        auto forced = init_model<float>(ModelConfig::miniature(5, 28, 8), Rng(77));
        forced.gate_net.out.b.value[3] = 50.0f;
        auto tf = assignments(forced, data.test);
        for (Index e : tf.expert) CHECK(e == 3);
    }

    SUBCASE("grid files, layout, and caption") {
        TempDir tmp;
        auto rep = recon_grid(state.model, table, data.test, tmp.file("grids"), 5, 3);
        CHECK(rep.files.size() + rep.skipped.size() == 5);
        REQUIRE(!rep.files.empty());
        auto img = read_pgm(rep.files[0]);
        CHECK(img.height == 62);
        CHECK(img.width == 152);

        // header bytes are exactly "P5\n<w> <h>\n255\n"
        std::ifstream in(rep.files[0], std::ios::binary);
        std::string head(14, '\0');
        in.read(head.data(), 14);
        CHECK(head == "P5\n152 62\n255\n");

        std::ifstream cap(rep.caption_file);
        REQUIRE(cap);
        std::string text((std::istreambuf_iterator<char>(cap)), std::istreambuf_iterator<char>());
        CHECK(text.find("utilization") != std::string::npos);
        for (Index e : rep.skipped)
            CHECK(text.find("expert " + std::to_string(e) + ": no routed samples") != std::string::npos);
    }
}

TEST_CASE("sweep csv: counting, resume, and arithmetic") {
    TempDir tmp;
    RunConfig base;
    base.synthetic = true;
    base.per_class = 60;
    base.fraction = 1.0;
    base.split_seed = 4;
    base.epochs = 1;
    base.batch_size = 50;
    base.latent_dim = 6;

    SweepOptions opts;
    opts.expert_counts = {1, 2};
    opts.fractions = {0.5, 1.0};
    opts.seeds = {1};

    const std::string csv = tmp.file("sweep.csv");
    auto rows = run_sweep(base, opts, csv, nullptr);
    CHECK(rows.size() == 4); // |E| * |fractions| * |seeds|

    // samples_per_expert = train size / E
    for (const auto& r : rows) {
        const Index take = Index(std::llround(60 * r.fraction));
        const Index train_size = 5 * (take * 9 / 10);
        CHECK(r.samples_per_expert == train_size / r.experts);
        CHECK(r.status == "ok");
    }

    // resume: a second call adds only the missing seed
    SweepOptions more = opts;
    more.seeds = {1, 2};
    auto rows2 = run_sweep(base, more, csv, nullptr);
    CHECK(rows2.size() == 8);
    auto reread = read_sweep_csv(csv);
    CHECK(reread.size() == 8);

    // rerunning a cell reproduces its row exactly: compare a fresh file
    const std::string csv2 = tmp.file("sweep2.csv");
    auto rows3 = run_sweep(base, opts, csv2, nullptr);
    for (const auto& r : rows3) {
        bool found = false;
        for (const auto& r2 : reread)
            if (r2.experts == r.experts && r2.fraction == r.fraction && r2.seed == r.seed) {
                CHECK(r2.test_recon == r.test_recon);
                CHECK(r2.dead_experts == r.dead_experts);
                found = true;
            }
        CHECK(found);
    }

    auto cells = aggregate_cells(rows2);
    CHECK(cells.size() == 4);
    for (const auto& c : cells) CHECK(c.runs == 2);

    SUBCASE("diverged cells are flagged, not dropped") {
        RunConfig blowup = base;
        blowup.lr = 1e12;
        SweepOptions one;
        one.expert_counts = {1};
        one.fractions = {1.0};
        one.seeds = {1};
        auto bad = run_sweep(blowup, one, tmp.file("diverged.csv"), nullptr);
        REQUIRE(bad.size() == 1);
        CHECK(bad[0].status == "diverged");
        auto reparsed = read_sweep_csv(tmp.file("diverged.csv"));
        REQUIRE(reparsed.size() == 1);
        CHECK(reparsed[0].status == "diverged");
        CHECK(std::isnan(reparsed[0].test_recon));
        // aggregation ignores diverged rows
        CHECK(aggregate_cells(bad).empty());
    }
}

TEST_CASE("homogeneity protocol: budgets match and report shape") {
    RunConfig base;
    base.synthetic = true;
    base.epochs = 1;
    base.batch_size = 64;
    base.latent_dim = 6;

    HomogeneityOptions opts;
    opts.budget = 200;
    opts.seeds = {1, 2};
    opts.include_big = false;

    auto rep = homogeneity_experiment(base, opts, nullptr);
    REQUIRE(rep.per_seed.size() == 2);
    for (const auto& ps : rep.per_seed) {
        CHECK(ps.single_per_class.size() == 5);
        CHECK(ps.multi > 0);
        CHECK(ps.single_mean > 0);
    }
    CHECK(rep.multi_class_loss > 0);
    CHECK(rep.mean_single_class_loss > 0);
    CHECK(std::isnan(rep.big_data_loss));
}

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <unistd.h>

#include "smoe/checkpoint.hpp"
#include "smoe/train.hpp"

using namespace smoe;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("smoe_train_" + std::to_string(::getpid()) + "_" +
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

// Tiny synthetic fixture: 5 classes x 200 samples, 8x8 miniature model.
SplitPair tiny_data() {
    SyntheticSpec spec;
    spec.per_class = 200;
    spec.seed = 5;
    return build_synthetic_dataset(spec, 1.0, 5);
}

TrainConfig tiny_config(Index experts, RoutingMode routing = RoutingMode::unsupervised) {
    TrainConfig cfg;
    cfg.model = ModelConfig::miniature(experts, 28, 8);
    cfg.model.num_experts = experts;
    cfg.epochs = 2;
    cfg.lr = 1e-3;
    cfg.batch.batch_size = 100;
    cfg.routing = routing;
    cfg.seed = 11;
    return cfg;
}

bool params_equal(SmoeVae<float>& a, SmoeVae<float>& b) {
    auto pa = a.params(), pb = b.params();
    if (pa.size() != pb.size()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i)
        for (Index k = 0; k < pa[i]->size(); ++k)
            if (pa[i]->value[k] != pb[i]->value[k]) return false;
    return true;
}

std::string file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

TEST_CASE("tiny run decreases the training loss") {
    auto data = tiny_data();
    auto cfg = tiny_config(2);
    auto state = train<float>(cfg, data.train, data.test);
    REQUIRE(state.metrics.size() == 2);
    CHECK(state.metrics.back().train_losses.total < state.metrics.front().train_losses.total);
    CHECK(state.epochs_done == 2);
    // metric history is append-only and monotone in epoch index
    for (std::size_t i = 0; i < state.metrics.size(); ++i) CHECK(state.metrics[i].epoch == Index(i));
    // utilization rows sum to one
    for (const auto& row : state.metrics) {
        double acc = 0;
        for (double f : row.utilization) acc += f;
        CHECK(acc == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("supervised-oracle: balanced batches give near-zero balance, frozen gate") {
    auto data = tiny_data();
    auto cfg = tiny_config(5, RoutingMode::supervised_oracle);
    auto init_state = TrainState<float>(cfg);
    std::vector<Tensor<float>> gate_at_init;
    {
        auto before = init_state.model.gate_params();
        for (auto* p : before) gate_at_init.push_back(p->value);
    }

    auto state = train<float>(cfg, data.train, data.test);
    // one-hot routing keeps the balance term at batch-composition noise and
    // the entropy term at the eps floor
    for (const auto& row : state.metrics) {
        CHECK(row.train_losses.balance < 0.02);
        CHECK(row.train_losses.entropy < 1e-6);
    }
    // gate parameters never moved
    auto after = state.model.gate_params();
    for (std::size_t i = 0; i < after.size(); ++i)
        for (Index k = 0; k < after[i]->size(); ++k)
            CHECK(after[i]->value[k] == gate_at_init[i][k]);
}

TEST_CASE("supervised modes require experts == classes") {
    auto data = tiny_data();
    auto cfg = tiny_config(3, RoutingMode::supervised_oracle);
    CHECK_THROWS_AS(train<float>(cfg, data.train, data.test), ConfigError);
}

TEST_CASE("supervised-gate trains the gate as a latent classifier") {
    auto data = tiny_data();
    auto cfg = tiny_config(5, RoutingMode::supervised_gate);
    cfg.epochs = 20;
    auto state = train<float>(cfg, data.train, data.test);
    // the gate now predicts labels from latents well above chance
    EvalResult ev = evaluate(state.model, data.test, RoutingMode::supervised_gate);
    Index hits = 0;
    for (Index i = 0; i < data.test.size(); ++i)
        if (ev.assignments[std::size_t(i)] == data.test.labels[std::size_t(i)]) ++hits;
    // chance is 0.2 with five balanced classes
    CHECK(double(hits) / double(data.test.size()) > 0.35);
}

TEST_CASE("identical seeds give identical metrics, different seeds differ") {
    auto data = tiny_data();
    auto cfg = tiny_config(2);
    auto a = train<float>(cfg, data.train, data.test);
    auto b = train<float>(cfg, data.train, data.test);
    REQUIRE(a.metrics.size() == b.metrics.size());
    for (std::size_t i = 0; i < a.metrics.size(); ++i) {
        CHECK(metrics_csv_row(a.metrics[i]) == metrics_csv_row(b.metrics[i]));
    }
    CHECK(params_equal(a.model, b.model));

    cfg.seed = 12;
    auto c = train<float>(cfg, data.train, data.test);
    CHECK_FALSE(params_equal(a.model, c.model));
}

TEST_CASE("metrics csv is byte-identical across reruns") {
    TempDir tmp;
    auto data = tiny_data();
    auto cfg = tiny_config(2);
    auto a = train<float>(cfg, data.train, data.test);
    auto b = train<float>(cfg, data.train, data.test);
    write_metrics_csv(tmp.file("a.csv"), a.metrics, 2);
    write_metrics_csv(tmp.file("b.csv"), b.metrics, 2);
    CHECK(file_bytes(tmp.file("a.csv")) == file_bytes(tmp.file("b.csv")));

    // header prefix is fixed
    std::ifstream in(tmp.file("a.csv"));
    std::string header;
    std::getline(in, header);
    CHECK(header ==
          "epoch,train_recon,train_kl,train_balance,train_entropy,train_total,"
          "test_recon,test_kl,test_balance,test_entropy,test_total,dead_experts,util_0,util_1");
}

TEST_CASE("checkpoint round trip: params, rng, metrics, evaluation") {
    TempDir tmp;
    auto data = tiny_data();
    auto cfg = tiny_config(3);
    auto state = train<float>(cfg, data.train, data.test);

    EvalResult before = evaluate(state.model, data.test, cfg.routing);
    save_checkpoint(tmp.file("m.smoe"), state, data.train.class_names, data.train.provenance);
    auto loaded = load_checkpoint(tmp.file("m.smoe"));

    CHECK(params_equal(state.model, loaded.state.model));
    CHECK(loaded.state.model.rng.state() == state.model.rng.state());
    CHECK(loaded.state.epochs_done == state.epochs_done);
    CHECK(loaded.state.adam.step_count() == state.adam.step_count());
    CHECK(loaded.class_names == data.train.class_names);
    CHECK(loaded.provenance.kind == "synthetic");
    REQUIRE(loaded.state.metrics.size() == state.metrics.size());
    for (std::size_t i = 0; i < state.metrics.size(); ++i)
        CHECK(metrics_csv_row(loaded.state.metrics[i]) == metrics_csv_row(state.metrics[i]));

    EvalResult after = evaluate(loaded.state.model, data.test, cfg.routing);
    CHECK(after.losses.recon == before.losses.recon);
    CHECK(after.losses.kl == before.losses.kl);

    // manifest lists every parameter exactly once
    std::set<std::string> names;
    for (auto* p : loaded.state.model.params()) names.insert(p->name);
    CHECK(names.size() == loaded.state.model.params().size());
}

TEST_CASE("checkpoint corruption and format errors") {
    TempDir tmp;
    auto data = tiny_data();
    auto cfg = tiny_config(2);
    cfg.epochs = 1;
    auto state = train<float>(cfg, data.train, data.test);
    save_checkpoint(tmp.file("m.smoe"), state, data.train.class_names, data.train.provenance);

    SUBCASE("truncated payload") {
        auto bytes = file_bytes(tmp.file("m.smoe"));
        std::ofstream out(tmp.file("t.smoe"), std::ios::binary);
        out.write(bytes.data(), std::streamsize(bytes.size() - 4));
        out.close();
        CHECK_THROWS_AS(load_checkpoint(tmp.file("t.smoe")), CheckpointError);
    }
    SUBCASE("bad magic") {
        auto bytes = file_bytes(tmp.file("m.smoe"));
        bytes[0] = 'X';
        std::ofstream out(tmp.file("bad.smoe"), std::ios::binary);
        out.write(bytes.data(), std::streamsize(bytes.size()));
        out.close();
        CHECK_THROWS_AS(load_checkpoint(tmp.file("bad.smoe")), CheckpointError);
    }
    SUBCASE("missing file") { CHECK_THROWS_AS(load_checkpoint(tmp.file("no.smoe")), CheckpointError); }
}

TEST_CASE("resuming from a mid-training checkpoint replays the full run bitwise") {
    TempDir tmp;
    auto data = tiny_data();
    auto cfg = tiny_config(2);
    cfg.epochs = 4;

    // uninterrupted
    auto full = train<float>(cfg, data.train, data.test);

    // interrupted at epoch 2, checkpointed, resumed
    TrainState<float> half(cfg);
    train_run(half, data.train, data.test, 2);
    save_checkpoint(tmp.file("half.smoe"), half, data.train.class_names, data.train.provenance);
    auto resumed = load_checkpoint(tmp.file("half.smoe"));
    train_run(resumed.state, data.train, data.test, 4);

    CHECK(params_equal(full.model, resumed.state.model));
    REQUIRE(resumed.state.metrics.size() == full.metrics.size());
    for (std::size_t i = 0; i < full.metrics.size(); ++i)
        CHECK(metrics_csv_row(resumed.state.metrics[i]) == metrics_csv_row(full.metrics[i]));
}

TEST_CASE("divergence guard reports epoch and batch") {
    auto data = tiny_data();
    auto cfg = tiny_config(2);
    cfg.lr = 1e10; // force blow-up
    cfg.epochs = 3;
    CHECK_THROWS_AS(train<float>(cfg, data.train, data.test), DivergedError);
}

TEST_CASE("overfit capacity: one sample memorized to near zero recon") {
    // single-sample training set, heavy overtraining
    SyntheticSpec spec;
    spec.classes = {"disk"};
    spec.per_class = 12;
    auto pool = synthesize(spec);

    Dataset one = pool;
    one.images.assign(pool.images.begin(), pool.images.begin() + kImagePixels);
    one.labels = {0};

    TrainConfig cfg;
    cfg.model = ModelConfig::miniature(1, 28, 8);
    cfg.epochs = 400;
    cfg.lr = 2e-3;
    cfg.batch.batch_size = 1;
    cfg.seed = 3;
    auto state = train<float>(cfg, one, one);
    CHECK(state.metrics.back().test_losses.recon < 0.5);
}

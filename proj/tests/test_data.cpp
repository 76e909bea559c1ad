#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <unistd.h>

#include "smoe/data.hpp"
#include "smoe/npy.hpp"

using namespace smoe;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("smoe_test_" + std::to_string(::getpid()) + "_" +
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

npy::U8Array make_array(std::vector<Index> shape, std::uint8_t fill = 0) {
    npy::U8Array a;
    a.shape = std::move(shape);
    std::size_t n = 1;
    for (Index e : a.shape) n *= std::size_t(e);
    a.data.assign(n, fill);
    return a;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

} // namespace

TEST_CASE("npy round trip through the fixture writer") {
    TempDir tmp;
    auto arr = make_array({2, 28, 28});
    Rng rng(1);
    for (auto& b : arr.data) b = std::uint8_t(rng.below(256));

    const std::string path = tmp.file("a.npy");
    npy::save_u8(path, arr);
    auto loaded = npy::load_u8(path);
    CHECK(loaded.shape == arr.shape);
    CHECK(loaded.data == arr.data);

    // byte-identical re-encode
    auto bytes1 = read_file(path);
    auto bytes2 = npy::encode_u8(loaded);
    CHECK(bytes1 == bytes2);

    // header starts with the magic and v1.0
    CHECK(bytes1[0] == 0x93);
    CHECK(std::string(bytes1.begin() + 1, bytes1.begin() + 6) == "NUMPY");
    CHECK(bytes1[6] == 1);
    CHECK(bytes1[7] == 0);
    // total header block is 64-byte aligned
    const std::size_t header_len = std::size_t(bytes1[8]) | (std::size_t(bytes1[9]) << 8);
    CHECK((10 + header_len) % 64 == 0);
}

TEST_CASE("npy flat shape reshapes to images") {
    TempDir tmp;
    auto arr = make_array({2, 784}, 7);
    const std::string path = tmp.file("flat.npy");
    npy::save_u8(path, arr);
    auto loaded = npy::load_u8(path);
    CHECK(loaded.shape == std::vector<Index>{2, 784});
    CHECK(loaded.data.size() == 2 * 784);
    for (auto b : loaded.data) CHECK(b == 7);
}

TEST_CASE("npy malformed inputs") {
    TempDir tmp;
    auto arr = make_array({2, 784});
    auto bytes = npy::encode_u8(arr);

    SUBCASE("bad magic") {
        bytes[0] = 'X';
        CHECK_THROWS_AS(npy::decode_u8(bytes), FormatError);
    }
    SUBCASE("truncated payload names expected vs actual") {
        bytes.resize(bytes.size() - 9);
        CHECK_THROWS_WITH_AS(npy::decode_u8(bytes),
                             doctest::Contains("header promises 1568 bytes, found 1559"), FormatError);
    }
    SUBCASE("unsupported dtype") {
        auto text = std::string(bytes.begin(), bytes.end());
        auto pos = text.find("|u1");
        bytes[pos] = '<';
        bytes[pos + 1] = 'f';
        bytes[pos + 2] = '4';
        CHECK_THROWS_AS(npy::decode_u8(bytes), DataError);
    }
    SUBCASE("fortran order rejected") {
        auto text = std::string(bytes.begin(), bytes.end());
        auto pos = text.find("False");
        const char* t = "True,";
        for (int i = 0; i < 5; ++i) bytes[pos + std::size_t(i)] = std::uint8_t(t[i]);
        CHECK_THROWS_AS(npy::decode_u8(bytes), DataError);
    }
    SUBCASE("missing file") { CHECK_THROWS_AS(npy::load_u8(tmp.file("nope.npy")), DataError); }
}

TEST_CASE("build_dataset splits, balance, determinism") {
    TempDir tmp;
    // two classes, 100 samples each, each sample filled with its own index
    for (int c = 0; c < 2; ++c) {
        auto arr = make_array({100, 28, 28});
        for (Index i = 0; i < 100; ++i)
            std::fill(arr.data.begin() + i * 784, arr.data.begin() + (i + 1) * 784, std::uint8_t(i));
        npy::save_u8(tmp.file("c" + std::to_string(c) + ".npy"), arr);
    }
    std::vector<std::pair<std::string, std::string>> sources{{"a", tmp.file("c0.npy")},
                                                             {"b", tmp.file("c1.npy")}};

    auto split = build_dataset(sources, 100, 0.5, 42);
    // round(100*0.5) = 50 per class, 45/5 train/test
    CHECK(split.train.size() == 90);
    CHECK(split.test.size() == 10);
    CHECK(split.train.class_names == std::vector<std::string>{"a", "b"});

    // balance
    for (const Dataset* d : {&split.train, &split.test}) {
        Index a = 0, b = 0;
        for (Index lab : d->labels) (lab == 0 ? a : b)++;
        CHECK(a == b);
    }

    // split disjointness per class: sample ids encoded in pixel values
    std::set<int> train_ids, test_ids;
    for (Index i = 0; i < split.train.size(); ++i)
        if (split.train.labels[std::size_t(i)] == 0) train_ids.insert(split.train.image(i)[0]);
    for (Index i = 0; i < split.test.size(); ++i)
        if (split.test.labels[std::size_t(i)] == 0) test_ids.insert(split.test.image(i)[0]);
    CHECK(train_ids.size() == 45);
    CHECK(test_ids.size() == 5);
    for (int id : test_ids) CHECK(train_ids.count(id) == 0);

    // determinism
    auto split2 = build_dataset(sources, 100, 0.5, 42);
    CHECK(split2.train.images == split.train.images);
    CHECK(split2.train.labels == split.train.labels);

    // different seed, different subsample
    auto split3 = build_dataset(sources, 100, 0.5, 43);
    CHECK(split3.train.images != split.train.images);

    // insufficient data
    CHECK_THROWS_AS(build_dataset(sources, 300, 1.0, 1), DataError);
    // precondition on the subsample size
    CHECK_THROWS_AS(build_dataset(sources, 100, 0.05, 1), ParameterError);
}

TEST_CASE("full-scale split arithmetic") {
    // 5 classes x 70,000 at fraction 1.0 -> 315,000 / 35,000
    const Index per_class = 70000;
    const Index n_take = Index(std::llround(double(per_class) * 1.0));
    CHECK(n_take * 9 / 10 * 5 == 315000);
    CHECK((n_take - n_take * 9 / 10) * 5 == 35000);
    // fraction 0.05 of 70,000 -> 3,500 per class pre-split
    CHECK(Index(std::llround(70000 * 0.05)) == 3500);
}

TEST_CASE("synthesize determinism and class statistics") {
    SyntheticSpec spec;
    spec.per_class = 40;
    spec.seed = 7;

    auto d = synthesize(spec);
    CHECK(d.size() == 200);
    CHECK(d.num_classes() == 5);
    Index per_class_count[5] = {0, 0, 0, 0, 0};
    for (Index lab : d.labels) ++per_class_count[lab];
    for (Index c = 0; c < 5; ++c) CHECK(per_class_count[c] == 40);

    auto d2 = synthesize(spec);
    CHECK(d2.images == d.images);

    SUBCASE("zero jitter collapses each class to one image") {
        SyntheticSpec frozen;
        frozen.classes = {"disk"};
        frozen.per_class = 10;
        frozen.center_jitter = 0;
        frozen.size_jitter = 0;
        frozen.stroke_min = frozen.stroke_max = 1.5;
        auto dd = synthesize(frozen);
        for (Index i = 1; i < dd.size(); ++i)
            CHECK(std::equal(dd.image(0), dd.image(0) + kImagePixels, dd.image(i)));
    }
    SUBCASE("disk ink mass exceeds cross ink mass") {
        double disk_mean = 0, cross_mean = 0;
        Index disks = 0, crosses = 0;
        for (Index i = 0; i < d.size(); ++i) {
            double acc = 0;
            for (Index p = 0; p < kImagePixels; ++p) acc += d.image(i)[p];
            if (d.class_names[std::size_t(d.labels[std::size_t(i)])] == "disk") {
                disk_mean += acc;
                ++disks;
            } else if (d.class_names[std::size_t(d.labels[std::size_t(i)])] == "cross") {
                cross_mean += acc;
                ++crosses;
            }
        }
        CHECK(disks == 40);
        CHECK(crosses == 40);
        CHECK(disk_mean / disks > cross_mean / crosses);
    }
}

TEST_CASE("batch iteration") {
    SyntheticSpec spec;
    spec.per_class = 200;
    auto pool = synthesize(spec); // 1000 samples

    BatchPlan plan;
    plan.batch_size = 128;
    plan.shuffle_seed = 3;
    plan.drop_last = true;

    SUBCASE("drop_last yields floor(M/N) batches") {
        CHECK(batches_per_epoch(1000, plan) == 7);
        BatchPlan keep = plan;
        keep.drop_last = false;
        CHECK(batches_per_epoch(1000, keep) == 8);
    }
    SUBCASE("epoch orders differ and reproduce") {
        auto e0 = epoch_order(1000, plan, 0);
        auto e1 = epoch_order(1000, plan, 1);
        CHECK(e0 != e1);
        CHECK(epoch_order(1000, plan, 0) == e0);
        auto sorted = e0;
        std::sort(sorted.begin(), sorted.end());
        for (Index i = 0; i < 1000; ++i) CHECK(sorted[std::size_t(i)] == i);
    }
    SUBCASE("pixel scaling endpoints and range") {
        pool.images[0] = 255;
        pool.images[1] = 0;
        std::vector<Index> order{0};
        auto x = gather_images<float>(pool, order, 0, 1);
        CHECK(x[0] == 1.0f);
        CHECK(x[1] == 0.0f);
        for (Index i = 0; i < x.size(); ++i) {
            CHECK(x[i] >= 0.0f);
            CHECK(x[i] <= 1.0f);
        }
        auto labs = gather_labels(pool, order, 0, 1);
        CHECK(labs[0] == pool.labels[0]);
    }
}

TEST_CASE("synthetic split keeps provenance") {
    SyntheticSpec spec;
    spec.per_class = 100;
    auto split = build_synthetic_dataset(spec, 0.5, 11);
    CHECK(split.train.size() == 5 * 45);
    CHECK(split.test.size() == 5 * 5);
    CHECK(split.train.provenance.kind == "synthetic");
    CHECK(split.train.provenance.fraction == 0.5);
    CHECK(split.train.provenance.subsample_seed == 11);
}

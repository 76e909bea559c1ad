#include "smoe/data.hpp"

#include <algorithm>
#include <cmath>

#include "smoe/npy.hpp"

namespace smoe {

namespace {

// Pool of raw per-class images; shared subsample/split logic below.
struct ClassPool {
    std::string name;
    std::vector<std::uint8_t> images; // count * 784
    Index count = 0;
};

SplitPair subsample_split(std::vector<ClassPool> pools, Index per_class, double fraction,
                          std::uint64_t seed, Provenance prov) {
    if (fraction <= 0.0 || fraction > 1.0)
        throw ParameterError("build_dataset: fraction must be in (0, 1], got " + format_number(fraction));
    const Index n_take = Index(std::llround(double(per_class) * fraction));
    if (n_take < 10)
        throw ParameterError("build_dataset: per_class * fraction must be at least 10, got " +
                             std::to_string(n_take));
    const Index n_train = n_take * 9 / 10;

    SplitPair out;
    for (Dataset* d : {&out.train, &out.test}) {
        d->provenance = prov;
        for (const auto& p : pools) d->class_names.push_back(p.name);
    }
    out.train.split = "train";
    out.test.split = "test";

    Rng base(seed);
    for (std::size_t ci = 0; ci < pools.size(); ++ci) {
        ClassPool& pool = pools[ci];
        if (pool.count < n_take)
            throw DataError("build_dataset: class '" + pool.name + "' has " + std::to_string(pool.count) +
                            " samples, need " + std::to_string(n_take));
        std::vector<Index> idx(static_cast<std::size_t>(pool.count));
        for (Index i = 0; i < pool.count; ++i) idx[std::size_t(i)] = i;
        Rng shuffler = base.fork(1000 + ci);
        shuffler.shuffle(idx.begin(), idx.end());

        for (Index i = 0; i < n_take; ++i) {
            Dataset& dst = i < n_train ? out.train : out.test;
            const std::uint8_t* src = pool.images.data() + idx[std::size_t(i)] * kImagePixels;
            dst.images.insert(dst.images.end(), src, src + kImagePixels);
            dst.labels.push_back(Index(ci));
        }
    }
    return out;
}

} // namespace

SplitPair build_dataset(const std::vector<std::pair<std::string, std::string>>& sources,
                        Index per_class, double fraction, std::uint64_t seed) {
    std::vector<ClassPool> pools;
    Provenance prov;
    prov.kind = "npy";
    prov.sources = sources;
    prov.subsample_seed = seed;
    prov.fraction = fraction;
    prov.per_class = per_class;

    for (const auto& [name, path] : sources) {
        npy::U8Array arr = npy::load_u8(path);
        Index count = 0;
        if (arr.shape.size() == 2 && arr.shape[1] == kImagePixels) {
            count = arr.shape[0];
        } else if (arr.shape.size() == 3 && arr.shape[1] == kImageSide && arr.shape[2] == kImageSide) {
            count = arr.shape[0];
        } else {
            throw DataError(path + ": expected shape (M,784) or (M,28,28), got " +
                            Tensor<float>::shape_string(arr.shape));
        }
        pools.push_back({name, std::move(arr.data), count});
    }
    return subsample_split(std::move(pools), per_class, fraction, seed, std::move(prov));
}

namespace {

double coverage(double signed_inside) {
    // soft 1px edge: full coverage half a pixel inside, zero half outside
    return std::clamp(signed_inside + 0.5, 0.0, 1.0);
}

struct Jitter {
    double cx, cy, size, stroke;
};

void render_shape(const std::string& cls, const Jitter& j, std::uint8_t* out) {
    for (Index y = 0; y < kImageSide; ++y) {
        for (Index x = 0; x < kImageSide; ++x) {
            const double dx = double(x) - j.cx;
            const double dy = double(y) - j.cy;
            const double r = std::sqrt(dx * dx + dy * dy);
            double v = 0.0;
            if (cls == "disk") {
                v = coverage(j.size - r);
            } else if (cls == "ring") {
                v = coverage(j.stroke / 2 - std::abs(r - j.size));
            } else if (cls == "hbar") {
                v = coverage(j.size - std::abs(dx)) * coverage(j.stroke / 2 - std::abs(dy));
            } else if (cls == "vbar") {
                v = coverage(j.size - std::abs(dy)) * coverage(j.stroke / 2 - std::abs(dx));
            } else if (cls == "cross") {
                const double h = coverage(j.size - std::abs(dx)) * coverage(j.stroke / 2 - std::abs(dy));
                const double vv = coverage(j.size - std::abs(dy)) * coverage(j.stroke / 2 - std::abs(dx));
                v = std::max(h, vv);
            } else {
                throw ParameterError("synthesize: unknown class '" + cls + "'");
            }
            out[y * kImageSide + x] = std::uint8_t(std::lround(v * 255.0));
        }
    }
}

// Rings share the disk radius, so a thick small ring is nearly a disk and
// class membership gets ambiguous the way sketch categories are.
double base_size(const std::string& cls) {
    if (cls == "disk") return 5.5;
    if (cls == "ring") return 5.5; // outer radius; the hole shrinks with the stroke
    return 8.5;                    // half-length of bars and cross arms
}

} // namespace

Dataset synthesize(const SyntheticSpec& spec) {
    Dataset d;
    d.split = "all";
    d.provenance.kind = "synthetic";
    d.provenance.subsample_seed = spec.seed;
    d.provenance.per_class = spec.per_class;
    d.class_names = spec.classes;
    d.images.resize(std::size_t(spec.per_class) * spec.classes.size() * kImagePixels);
    d.labels.resize(std::size_t(spec.per_class) * spec.classes.size());

    std::uint8_t* out = d.images.data();
    std::size_t n = 0;
    Rng base(spec.seed);
    for (std::size_t ci = 0; ci < spec.classes.size(); ++ci) {
        Rng rng = base.fork(ci);
        for (Index i = 0; i < spec.per_class; ++i, ++n, out += kImagePixels) {
            Jitter j;
            j.cx = 13.5 + rng.uniform(-spec.center_jitter, spec.center_jitter);
            j.cy = 13.5 + rng.uniform(-spec.center_jitter, spec.center_jitter);
            j.size = base_size(spec.classes[ci]) + rng.uniform(-spec.size_jitter, spec.size_jitter);
            // thin and thick strokes form two drawing styles per class, the
            // kind of sub-categorical structure sketch data carries
            j.stroke = rng.below(2) ? spec.stroke_max : spec.stroke_min;
            render_shape(spec.classes[ci], j, out);
            d.labels[n] = Index(ci);
        }
    }
    return d;
}

SplitPair build_synthetic_dataset(const SyntheticSpec& spec, double fraction, std::uint64_t seed) {
    Dataset pool = synthesize(spec);
    std::vector<ClassPool> pools;
    for (std::size_t ci = 0; ci < spec.classes.size(); ++ci) {
        ClassPool p;
        p.name = spec.classes[ci];
        p.count = spec.per_class;
        const std::uint8_t* src = pool.images.data() + Index(ci) * spec.per_class * kImagePixels;
        p.images.assign(src, src + spec.per_class * kImagePixels);
        pools.push_back(std::move(p));
    }
    Provenance prov = pool.provenance;
    prov.fraction = fraction;
    prov.subsample_seed = seed;
    return subsample_split(std::move(pools), spec.per_class, fraction, seed, std::move(prov));
}

std::vector<Index> epoch_order(Index count, const BatchPlan& plan, Index epoch) {
    std::vector<Index> order(static_cast<std::size_t>(count));
    for (Index i = 0; i < count; ++i) order[std::size_t(i)] = i;
    Rng rng = Rng(plan.shuffle_seed).fork(std::uint64_t(epoch));
    rng.shuffle(order.begin(), order.end());
    return order;
}

Index batches_per_epoch(Index count, const BatchPlan& plan) {
    if (plan.batch_size <= 0) throw ParameterError("batch_size must be positive");
    if (plan.drop_last) return count / plan.batch_size;
    return (count + plan.batch_size - 1) / plan.batch_size;
}

} // namespace smoe

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "smoe/rng.hpp"
#include "smoe/tensor.hpp"

namespace smoe {

constexpr Index kImageSide = 28;
constexpr Index kImagePixels = kImageSide * kImageSide;

struct Provenance {
    std::string kind; // "npy" or "synthetic"
    std::vector<std::pair<std::string, std::string>> sources; // class name -> file
    std::uint64_t subsample_seed = 0;
    double fraction = 1.0;
    Index per_class = 0;
};

// Labeled 28x28 u8 images, balanced across classes, with the split and
// subsampling decisions recorded so runs can be reproduced.
struct Dataset {
    std::vector<std::uint8_t> images; // M * 784, row-major, ink = high
    std::vector<Index> labels;        // M
    std::vector<std::string> class_names;
    std::string split; // "train" | "test" | "all"
    Provenance provenance;

    Index size() const { return Index(labels.size()); }
    Index num_classes() const { return Index(class_names.size()); }
    const std::uint8_t* image(Index i) const { return images.data() + i * kImagePixels; }
};

struct SplitPair {
    Dataset train, test;
};

// Per class: shuffle by seed, keep round(per_class * fraction) samples, then
// split 90/10 in shuffled order. Both splits stay exactly balanced.
SplitPair build_dataset(const std::vector<std::pair<std::string, std::string>>& sources,
                        Index per_class, double fraction, std::uint64_t seed);

struct SyntheticSpec {
    std::vector<std::string> classes{"disk", "cross", "hbar", "vbar", "ring"};
    Index per_class = 200;
    double center_jitter = 2.0; // +-px on the shape center
    double size_jitter = 2.0;   // +-px on radius / half-length
    double stroke_min = 1.0;    // stroke width range in px
    double stroke_max = 2.0;
    std::uint64_t seed = 0;
};

// Deterministic rasterized stand-in classes for data-free tests.
Dataset synthesize(const SyntheticSpec& spec);

// Same subsample/split protocol as build_dataset on top of a synthetic pool.
SplitPair build_synthetic_dataset(const SyntheticSpec& spec, double fraction, std::uint64_t seed);

struct BatchPlan {
    Index batch_size = 128;
    std::uint64_t shuffle_seed = 0;
    bool drop_last = true;
};

// Deterministic visit order for one epoch, keyed by (seed, epoch).
std::vector<Index> epoch_order(Index count, const BatchPlan& plan, Index epoch);

// Number of batches the plan yields per epoch.
Index batches_per_epoch(Index count, const BatchPlan& plan);

// u8 -> [0,1] scaling of the selected rows.
template <typename S>
Tensor<S> gather_images(const Dataset& d, const std::vector<Index>& order, Index begin, Index count) {
    Tensor<S> x({count, 1, kImageSide, kImageSide});
    for (Index i = 0; i < count; ++i) {
        const std::uint8_t* src = d.image(order[std::size_t(begin + i)]);
        S* dst = x.data() + i * kImagePixels;
        for (Index p = 0; p < kImagePixels; ++p) dst[p] = S(src[p]) / S(255);
    }
    return x;
}

inline std::vector<Index> gather_labels(const Dataset& d, const std::vector<Index>& order, Index begin,
                                        Index count) {
    std::vector<Index> out(static_cast<std::size_t>(count));
    for (Index i = 0; i < count; ++i) out[std::size_t(i)] = d.labels[std::size_t(order[std::size_t(begin + i)])];
    return out;
}

} // namespace smoe

#pragma once

#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "smoe/run_config.hpp"

namespace smoe {

// Run fn(i) for i in [0, count) on up to jobs threads. Each i must own its
// work exclusively; callers index shared output slots by i so result order
// stays deterministic regardless of completion order.
void parallel_runs(Index count, Index jobs, const std::function<void(Index)>& fn);

struct SweepOptions {
    std::vector<Index> expert_counts{1, 2, 3, 5, 7, 10, 14, 23};
    std::vector<double> fractions{0.05, 0.1, 0.2, 0.4, 0.7, 1.0};
    std::vector<std::uint64_t> seeds{1, 2, 3};
    Index jobs = 1;
};

// One training run inside the sweep grid; samples_per_expert is the train
// split size divided by the expert count (integer division).
struct SweepRow {
    Index experts = 0;
    double fraction = 0;
    Index samples_per_expert = 0;
    std::uint64_t seed = 0;
    double test_recon = 0;
    Index dead_experts = 0;
    std::string status; // "ok" or "diverged"
};

struct SweepCell {
    Index experts = 0;
    double fraction = 0;
    Index samples_per_expert = 0;
    double mean_recon = 0;
    double std_recon = 0;
    double mean_dead = 0;
    Index runs = 0;
};

// Trains every missing (experts, fraction, seed) triple and appends its row
// to the CSV; rows already present are kept as-is, so interrupted sweeps
// resume where they stopped. Row order is the deterministic grid order
// regardless of worker count.
std::vector<SweepRow> run_sweep(const RunConfig& base, const SweepOptions& opts,
                                const std::string& csv_path, std::ostream* log = nullptr);

std::vector<SweepRow> read_sweep_csv(const std::string& path);
std::vector<SweepCell> aggregate_cells(const std::vector<SweepRow>& rows);

extern const char* kSweepCsvHeader;

// ---- homogeneity -------------------------------------------------------------

struct HomogeneityOptions {
    Index budget = 2000;  // samples per run before the 90/10 split
    std::vector<std::uint64_t> seeds{1, 2, 3};
    Index big_factor = 20;
    bool include_big = true;
    Index jobs = 1;
    std::optional<ModelConfig> model; // plan override; num_experts is forced to 1
};

struct HomogeneitySeedResult {
    std::uint64_t seed = 0;
    double multi = 0;                      // E=1 on the mixed dataset
    std::vector<double> single_per_class;  // E=1 per single-class dataset
    double single_mean = 0;
    double big = 0; // E=1 on big_factor x the mixed budget
};

struct HomogeneityReport {
    double multi_class_loss = 0;       // medians across seeds
    double mean_single_class_loss = 0;
    double big_data_loss = 0;
    std::vector<HomogeneitySeedResult> per_seed;
};

// Single-expert capacity probe: mixed data vs per-class homogeneous data of
// the same total size, vs big_factor times more mixed data.
HomogeneityReport homogeneity_experiment(const RunConfig& base, const HomogeneityOptions& opts,
                                         std::ostream* log = nullptr);

} // namespace smoe

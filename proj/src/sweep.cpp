#include "smoe/sweep.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

namespace smoe {

const char* kSweepCsvHeader = "experts,fraction,samples_per_expert,seed,test_recon,dead_experts,status";

void parallel_runs(Index count, Index jobs, const std::function<void(Index)>& fn) {
    jobs = std::max<Index>(1, std::min(jobs, count));
    if (jobs == 1) {
        for (Index i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<Index> next{0};
    std::vector<std::thread> pool;
    std::exception_ptr first_error;
    std::mutex error_mutex;
    for (Index t = 0; t < jobs; ++t)
        pool.emplace_back([&] {
            while (true) {
                const Index i = next.fetch_add(1);
                if (i >= count) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!first_error) first_error = std::current_exception();
                }
            }
        });
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(item);
    return out;
}

} // namespace

std::vector<SweepRow> read_sweep_csv(const std::string& path) {
    std::vector<SweepRow> rows;
    std::ifstream in(path);
    if (!in) return rows;
    std::string line;
    if (!std::getline(in, line)) return rows;
    if (line != kSweepCsvHeader)
        throw DataError(path + ": unexpected sweep csv header '" + line + "'");
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto f = split_csv_line(line);
        if (f.size() != 7) throw DataError(path + ": malformed sweep row '" + line + "'");
        SweepRow r;
        r.experts = std::stoll(f[0]);
        r.fraction = std::stod(f[1]);
        r.samples_per_expert = std::stoll(f[2]);
        r.seed = std::stoull(f[3]);
        r.test_recon = std::stod(f[4]);
        r.dead_experts = std::stoll(f[5]);
        r.status = f[6];
        rows.push_back(r);
    }
    return rows;
}

namespace {

std::string sweep_row_csv(const SweepRow& r) {
    return std::to_string(r.experts) + "," + format_number(r.fraction) + "," +
           std::to_string(r.samples_per_expert) + "," + std::to_string(r.seed) + "," +
           format_number(r.test_recon) + "," + std::to_string(r.dead_experts) + "," + r.status;
}

SweepRow run_one_cell(const RunConfig& base, Index experts, double fraction, std::uint64_t seed) {
    RunConfig rc = base;
    rc.num_experts = experts;
    rc.fraction = fraction;
    rc.seed = seed;
    rc.split_seed = base.split_seed; // one data universe across the grid

    SweepRow row;
    row.experts = experts;
    row.fraction = fraction;
    row.seed = seed;

    SplitPair data = rc.build_datasets();
    row.samples_per_expert = data.train.size() / experts;
    try {
        TrainConfig tc = rc.train_config();
        if (tc.batch.batch_size > data.train.size()) tc.batch.batch_size = data.train.size();
        auto state = train<float>(tc, data.train, data.test);
        const MetricRow& last = state.metrics.back();
        row.test_recon = last.test_losses.recon;
        row.dead_experts = last.dead_experts;
        row.status = "ok";
    } catch (const DivergedError&) {
        row.test_recon = std::nan("");
        row.dead_experts = experts;
        row.status = "diverged";
    }
    return row;
}

} // namespace

std::vector<SweepRow> run_sweep(const RunConfig& base, const SweepOptions& opts,
                                const std::string& csv_path, std::ostream* log) {
    if (opts.expert_counts.empty() || opts.fractions.empty() || opts.seeds.empty())
        throw ParameterError("sweep: expert, fraction, and seed grids must be non-empty");

    std::vector<SweepRow> existing = read_sweep_csv(csv_path);
    auto done = [&](Index e, double f, std::uint64_t s) {
        for (const auto& r : existing)
            if (r.experts == e && r.seed == s && std::abs(r.fraction - f) < 1e-12) return true;
        return false;
    };

    struct Pending {
        Index experts;
        double fraction;
        std::uint64_t seed;
    };
    std::vector<Pending> pending;
    for (Index e : opts.expert_counts)
        for (double f : opts.fractions)
            for (std::uint64_t s : opts.seeds)
                if (!done(e, f, s)) pending.push_back({e, f, s});

    std::vector<SweepRow> fresh(pending.size());
    std::mutex log_mutex;
    parallel_runs(Index(pending.size()), opts.jobs, [&](Index i) {
        const Pending& p = pending[std::size_t(i)];
        fresh[std::size_t(i)] = run_one_cell(base, p.experts, p.fraction, p.seed);
        if (log) {
            std::lock_guard<std::mutex> lock(log_mutex);
            (*log) << "sweep cell experts=" << p.experts << " fraction=" << format_number(p.fraction)
                   << " seed=" << p.seed << " recon=" << format_number(fresh[std::size_t(i)].test_recon)
                   << " status=" << fresh[std::size_t(i)].status << "\n";
        }
    });

    const bool new_file = !std::filesystem::exists(csv_path);
    std::ofstream out(csv_path, std::ios::app | std::ios::binary);
    if (!out) throw DataError(csv_path + ": cannot open for appending");
    if (new_file) out << kSweepCsvHeader << "\n";
    for (const auto& r : fresh) out << sweep_row_csv(r) << "\n";

    existing.insert(existing.end(), fresh.begin(), fresh.end());
    return existing;
}

std::vector<SweepCell> aggregate_cells(const std::vector<SweepRow>& rows) {
    std::vector<SweepCell> cells;
    std::vector<std::vector<double>> values;
    for (const auto& r : rows) {
        if (r.status != "ok") continue;
        std::size_t idx = cells.size();
        for (std::size_t i = 0; i < cells.size(); ++i)
            if (cells[i].experts == r.experts && std::abs(cells[i].fraction - r.fraction) < 1e-12) idx = i;
        if (idx == cells.size()) {
            cells.push_back({r.experts, r.fraction, r.samples_per_expert, 0, 0, 0, 0});
            values.emplace_back();
        }
        values[idx].push_back(r.test_recon);
        cells[idx].mean_dead += double(r.dead_experts);
        ++cells[idx].runs;
    }
    for (std::size_t i = 0; i < cells.size(); ++i) {
        SweepCell& c = cells[i];
        c.mean_dead /= double(c.runs);
        for (double v : values[i]) c.mean_recon += v;
        c.mean_recon /= double(c.runs);
        double var = 0;
        for (double v : values[i]) var += (v - c.mean_recon) * (v - c.mean_recon);
        c.std_recon = c.runs > 1 ? std::sqrt(var / double(c.runs)) : 0.0;
    }
    return cells;
}

// ---- homogeneity ---------------------------------------------------------------

namespace {

double median(std::vector<double> v) {
    if (v.empty()) return 0;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Build a mixed or single-class dataset of `total` samples (pre-split).
SplitPair homogeneity_data(const RunConfig& base, const std::vector<std::string>& classes,
                           Index keep_class, Index total, std::uint64_t seed) {
    if (base.synthetic) {
        SyntheticSpec spec;
        if (keep_class >= 0) {
            spec.classes = {classes[std::size_t(keep_class)]};
            spec.per_class = total;
        } else {
            spec.classes = classes;
            spec.per_class = total / Index(classes.size());
        }
        spec.seed = seed;
        return build_synthetic_dataset(spec, 1.0, seed);
    }
    std::vector<std::pair<std::string, std::string>> sources;
    if (keep_class >= 0) {
        sources.push_back(base.sources[std::size_t(keep_class)]);
        return build_dataset(sources, total, 1.0, seed);
    }
    return build_dataset(base.sources, total / Index(base.sources.size()), 1.0, seed);
}

double run_single_expert(const RunConfig& base, const HomogeneityOptions& opts,
                         const SplitPair& data, std::uint64_t seed) {
    RunConfig rc = base;
    rc.num_experts = 1;
    rc.seed = seed;
    rc.routing_mode = "unsupervised";
    TrainConfig tc = rc.train_config();
    if (opts.model) {
        tc.model = *opts.model;
        tc.model.num_experts = 1;
        tc.model.validate();
    }
    if (tc.batch.batch_size > data.train.size()) tc.batch.batch_size = data.train.size();
    auto state = train<float>(tc, data.train, data.test);
    return state.metrics.back().test_losses.recon;
}

} // namespace

HomogeneityReport homogeneity_experiment(const RunConfig& base, const HomogeneityOptions& opts,
                                         std::ostream* log) {
    const std::vector<std::string> classes =
        base.synthetic ? SyntheticSpec{}.classes : [&] {
            std::vector<std::string> names;
            for (const auto& [name, path] : base.sources) names.push_back(name);
            return names;
        }();
    const Index k = Index(classes.size());
    if (k < 2) throw ParameterError("homogeneity: need at least 2 classes");
    if (opts.budget / k < 12)
        throw ParameterError("homogeneity: budget too small for " + std::to_string(k) + " classes");

    HomogeneityReport report;
    report.per_seed.resize(opts.seeds.size());

    struct Task {
        std::size_t seed_idx;
        Index kind; // -2 big, -1 mixed, >=0 single class index
    };
    std::vector<Task> tasks;
    for (std::size_t si = 0; si < opts.seeds.size(); ++si) {
        tasks.push_back({si, -1});
        for (Index c = 0; c < k; ++c) tasks.push_back({si, c});
        if (opts.include_big) tasks.push_back({si, -2});
        report.per_seed[si].seed = opts.seeds[si];
        report.per_seed[si].single_per_class.assign(std::size_t(k), 0.0);
    }

    std::mutex log_mutex;
    parallel_runs(Index(tasks.size()), opts.jobs, [&](Index ti) {
        const Task& t = tasks[std::size_t(ti)];
        const std::uint64_t seed = opts.seeds[t.seed_idx];
        double loss = 0;
        if (t.kind == -1) {
            loss = run_single_expert(base, opts, homogeneity_data(base, classes, -1, opts.budget, seed), seed);
            report.per_seed[t.seed_idx].multi = loss;
        } else if (t.kind == -2) {
            loss = run_single_expert(
                base, opts, homogeneity_data(base, classes, -1, opts.budget * opts.big_factor, seed),
                seed);
            report.per_seed[t.seed_idx].big = loss;
        } else {
            loss = run_single_expert(base, opts,
                                     homogeneity_data(base, classes, t.kind, opts.budget, seed), seed);
            report.per_seed[t.seed_idx].single_per_class[std::size_t(t.kind)] = loss;
        }
        if (log) {
            std::lock_guard<std::mutex> lock(log_mutex);
            (*log) << "homogeneity seed=" << seed << " kind="
                   << (t.kind == -1 ? "mixed" : t.kind == -2 ? "big" : classes[std::size_t(t.kind)])
                   << " recon=" << format_number(loss) << "\n";
        }
    });

    std::vector<double> multi, single, big;
    for (auto& ps : report.per_seed) {
        double acc = 0;
        for (double v : ps.single_per_class) acc += v;
        ps.single_mean = acc / double(k);
        multi.push_back(ps.multi);
        single.push_back(ps.single_mean);
        if (opts.include_big) big.push_back(ps.big);
    }
    report.multi_class_loss = median(multi);
    report.mean_single_class_loss = median(single);
    report.big_data_loss = opts.include_big ? median(big) : std::nan("");
    return report;
}

} // namespace smoe

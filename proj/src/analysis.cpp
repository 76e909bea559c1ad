#include "smoe/analysis.hpp"

#include <filesystem>
#include <fstream>

namespace smoe {

Utilization utilization(const std::vector<Index>& expert, Index num_experts) {
    Utilization u;
    u.fraction.assign(std::size_t(num_experts), 0.0);
    for (Index e : expert) {
        if (e < 0 || e >= num_experts)
            throw ParameterError("utilization: expert index " + std::to_string(e) + " out of range");
        u.fraction[std::size_t(e)] += 1.0;
    }
    const double m = double(expert.size());
    for (auto& f : u.fraction) f /= m;
    for (double f : u.fraction)
        if (f < kDeadExpertThreshold) ++u.dead;
    return u;
}

namespace detail {

constexpr Index kGap = 2;
constexpr std::uint8_t kGapValue = 128;

PgmImage render_grid(const std::vector<const std::uint8_t*>& inputs,
                     const std::vector<std::vector<std::uint8_t>>& recons) {
    const Index count = Index(inputs.size());
    PgmImage img;
    img.height = 2 * kImageSide + 3 * kGap;
    img.width = count * kImageSide + (count + 1) * kGap;
    img.pixels.assign(std::size_t(img.width * img.height), kGapValue);

    auto blit = [&](const std::uint8_t* tile, Index row, Index col) {
        const Index y0 = kGap + row * (kImageSide + kGap);
        const Index x0 = kGap + col * (kImageSide + kGap);
        for (Index y = 0; y < kImageSide; ++y)
            for (Index x = 0; x < kImageSide; ++x)
                img.pixels[std::size_t((y0 + y) * img.width + x0 + x)] = tile[y * kImageSide + x];
    };
    for (Index c = 0; c < count; ++c) {
        blit(inputs[std::size_t(c)], 0, c);
        blit(recons[std::size_t(c)].data(), 1, c);
    }
    return img;
}

GridReport write_grid_outputs(const std::string& out_dir, Index num_experts,
                              const std::vector<PgmImage>& grids,
                              const std::vector<std::vector<Index>>& chosen,
                              const std::vector<std::vector<Index>>& labels,
                              const Utilization& util,
                              const std::vector<std::string>& class_names) {
    std::filesystem::create_directories(out_dir);
    GridReport report;
    report.caption_file = out_dir + "/captions.txt";
    std::ofstream cap(report.caption_file, std::ios::binary);
    if (!cap) throw DataError(report.caption_file + ": cannot open for writing");

    for (Index e = 0; e < num_experts; ++e) {
        if (chosen[std::size_t(e)].empty()) {
            report.skipped.push_back(e);
            cap << "expert " << e << ": no routed samples, grid skipped\n";
            continue;
        }
        const std::string file = out_dir + "/expert_" + std::to_string(e) + ".pgm";
        write_pgm(file, grids[std::size_t(e)]);
        report.files.push_back(file);
        cap << "expert " << e << ": utilization " << format_number(util.fraction[std::size_t(e)] * 100.0)
            << "% labels";
        for (Index lab : labels[std::size_t(e)]) {
            cap << " " << (lab >= 0 && lab < Index(class_names.size()) ? class_names[std::size_t(lab)]
                                                                       : std::to_string(lab));
        }
        cap << "\n";
    }
    return report;
}

} // namespace detail

AgreementScores agreement(const AssignmentTable& table) {
    return agreement_scores(table.expert, table.label);
}

ProbeResult linear_probe(const AssignmentTable& table, ProbeTarget target, std::uint64_t seed,
                         const ProbeOptions& opts) {
    ProbeResult r = probe_features(table.mu, target == ProbeTarget::expert ? table.expert : table.label,
                                   seed, opts);
    r.target = target;
    return r;
}

} // namespace smoe

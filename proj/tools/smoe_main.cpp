#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "smoe/analysis.hpp"
#include "smoe/checkpoint.hpp"
#include "smoe/run_config.hpp"
#include "smoe/sweep.hpp"
#include "smoe/tsne.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace smoe;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;
constexpr int kExitCheckpoint = 4;
constexpr int kExitData = 5;

RunConfig load_config_with_overrides(const std::string& path, const std::vector<std::string>& sets) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    json doc;
    try {
        in >> doc;
    } catch (const json::exception& e) {
        throw ConfigError("config: parse error in '" + path + "': " + e.what());
    }
    for (const auto& s : sets) apply_override(doc, s);
    return run_config_from_json(doc);
}

std::string resolve_out_dir(const RunConfig& rc) {
    if (!rc.out_dir.empty()) return rc.out_dir;
    if (const char* env = std::getenv("SMOE_OUT_DIR")) return env;
    throw ConfigError("config: out_dir not set and SMOE_OUT_DIR is empty");
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(path + ": cannot open for writing");
    out << text;
}

// Rebuild the evaluation dataset recorded in a checkpoint's provenance.
SplitPair datasets_from_provenance(const Provenance& prov, const std::vector<std::string>& classes) {
    if (prov.kind == "synthetic") {
        SyntheticSpec spec;
        spec.classes = classes;
        spec.per_class = prov.per_class;
        spec.seed = prov.subsample_seed;
        return build_synthetic_dataset(spec, prov.fraction, prov.subsample_seed);
    }
    return build_dataset(prov.sources, prov.per_class, prov.fraction, prov.subsample_seed);
}

struct CheckpointContext {
    LoadedCheckpoint loaded;
    SplitPair data;
    std::string out_dir;
};

CheckpointContext open_checkpoint(const std::string& ckpt_path, const std::string& config_path,
                                  const std::vector<std::string>& sets, const std::string& out_flag) {
    CheckpointContext ctx{load_checkpoint(ckpt_path), {}, {}};
    if (!config_path.empty()) {
        RunConfig rc = load_config_with_overrides(config_path, sets);
        ctx.data = rc.build_datasets();
    } else {
        ctx.data = datasets_from_provenance(ctx.loaded.provenance, ctx.loaded.class_names);
    }
    ctx.out_dir = out_flag.empty() ? fs::path(ckpt_path).parent_path().string() : out_flag;
    if (ctx.out_dir.empty()) ctx.out_dir = ".";
    return ctx;
}

json probe_to_json(const ProbeResult& r) {
    json conf = json::array();
    for (Index i = 0; i < r.confusion.rows(); ++i) {
        json row = json::array();
        for (Index j = 0; j < r.confusion.cols(); ++j) row.push_back(r.confusion(i, j));
        conf.push_back(row);
    }
    return {{"target", r.target == ProbeTarget::expert ? "expert" : "class"},
            {"train_accuracy", r.train_accuracy},
            {"test_accuracy", r.test_accuracy},
            {"confusion", conf}};
}

int run(int argc, char** argv) {
    CLI::App app{"Sparse mixture-of-experts VAE: training and analysis"};
    app.option_defaults()->always_capture_default();
    app.require_subcommand(1);

    std::string config_path, ckpt_path, out_flag;
    std::vector<std::string> sets;

    // train
    auto* c_train = app.add_subcommand("train", "Train a model from a JSON run config");
    c_train->add_option("--config", config_path, "Run config JSON path")->required();
    c_train->add_option("--set", sets, "Override config values, e.g. --set train.seed=7");

    // eval
    auto* c_eval = app.add_subcommand("eval", "Hard-gated evaluation of a checkpoint");
    c_eval->add_option("--checkpoint", ckpt_path, "Checkpoint path")->required();
    c_eval->add_option("--config", config_path, "Run config JSON for the dataset (default: provenance)");
    c_eval->add_option("--set", sets, "Config overrides");

    // probe
    std::uint64_t probe_seed = 0;
    auto* c_probe = app.add_subcommand("probe", "Linear probes on latent means");
    c_probe->add_option("--checkpoint", ckpt_path)->required();
    c_probe->add_option("--config", config_path, "Dataset config (default: provenance)");
    c_probe->add_option("--set", sets, "Config overrides");
    c_probe->add_option("--seed", probe_seed, "Probe split seed");
    c_probe->add_option("--out", out_flag, "Output directory (default: checkpoint directory)");

    // agreement
    auto* c_agree = app.add_subcommand("agreement", "Partition agreement between experts and classes");
    c_agree->add_option("--checkpoint", ckpt_path)->required();
    c_agree->add_option("--config", config_path, "Dataset config (default: provenance)");
    c_agree->add_option("--set", sets, "Config overrides");
    c_agree->add_option("--out", out_flag, "Output directory (default: checkpoint directory)");

    // tsne
    TsneOptions tsne_opts;
    Index tsne_cap = kTsneMaxPoints;
    auto* c_tsne = app.add_subcommand("tsne", "Exact 2-d embedding of latent means");
    c_tsne->add_option("--checkpoint", ckpt_path)->required();
    c_tsne->add_option("--config", config_path, "Dataset config (default: provenance)");
    c_tsne->add_option("--set", sets, "Config overrides");
    c_tsne->add_option("--perplexity", tsne_opts.perplexity, "Gaussian neighborhood size");
    c_tsne->add_option("--iters", tsne_opts.iterations, "Gradient iterations");
    c_tsne->add_option("--seed", tsne_opts.seed, "Init / subsample seed");
    c_tsne->add_option("--max-points", tsne_cap, "Seeded subsample cap");
    c_tsne->add_option("--out", out_flag, "Output directory (default: checkpoint directory)");

    // grid
    Index per_expert = 5;
    std::uint64_t grid_seed = 0;
    auto* c_grid = app.add_subcommand("grid", "Per-expert input/reconstruction grids");
    c_grid->add_option("--checkpoint", ckpt_path)->required();
    c_grid->add_option("--config", config_path, "Dataset config (default: provenance)");
    c_grid->add_option("--set", sets, "Config overrides");
    c_grid->add_option("--per-expert", per_expert, "Samples per expert");
    c_grid->add_option("--seed", grid_seed, "Sample selection seed");
    c_grid->add_option("--out", out_flag, "Output directory (default: checkpoint directory)");

    // sweep
    SweepOptions sweep_opts;
    auto* c_sweep = app.add_subcommand("sweep", "Experts x dataset-fraction grid of training runs");
    c_sweep->add_option("--config", config_path, "Run config JSON path")->required();
    c_sweep->add_option("--set", sets, "Config overrides");
    c_sweep->add_option("--experts", sweep_opts.expert_counts, "Expert counts")->delimiter(',');
    c_sweep->add_option("--fractions", sweep_opts.fractions, "Dataset fractions")->delimiter(',');
    c_sweep->add_option("--seeds", sweep_opts.seeds, "Training seeds")->delimiter(',');
    c_sweep->add_option("--jobs", sweep_opts.jobs, "Parallel training runs");

    // homogeneity
    HomogeneityOptions hom_opts;
    bool skip_big = false;
    auto* c_hom = app.add_subcommand("homogeneity", "Single-expert mixed vs per-class data comparison");
    c_hom->add_option("--config", config_path, "Run config JSON path")->required();
    c_hom->add_option("--set", sets, "Config overrides");
    c_hom->add_option("--budget", hom_opts.budget, "Samples per run before the 90/10 split");
    c_hom->add_option("--seeds", hom_opts.seeds, "Training seeds")->delimiter(',');
    c_hom->add_option("--big-factor", hom_opts.big_factor, "Data multiplier for the big run");
    c_hom->add_flag("--skip-big", skip_big, "Skip the big-data run");
    c_hom->add_option("--jobs", hom_opts.jobs, "Parallel training runs");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    if (c_train->parsed()) {
        RunConfig rc = load_config_with_overrides(config_path, sets);
        const std::string out_dir = resolve_out_dir(rc);
        fs::create_directories(out_dir);
        write_text(out_dir + "/config.json", run_config_to_json(rc).dump(2) + "\n");

        SplitPair data = rc.build_datasets();
        TrainConfig tc = rc.train_config();
        std::cout << "training " << routing_name(tc.routing) << " E=" << tc.model.num_experts
                  << " train=" << data.train.size() << " test=" << data.test.size() << "\n";
        auto state = train<float>(tc, data.train, data.test, &std::cout);
        write_metrics_csv(out_dir + "/metrics.csv", state.metrics, tc.model.num_experts);
        save_checkpoint(out_dir + "/checkpoint.smoe", state, data.train.class_names,
                        data.train.provenance);
        std::cout << "wrote " << out_dir << "/metrics.csv and checkpoint.smoe\n";
        return kExitOk;
    }

    if (c_eval->parsed()) {
        auto ctx = open_checkpoint(ckpt_path, config_path, sets, "");
        EvalResult ev = evaluate(ctx.loaded.state.model, ctx.data.test, ctx.loaded.state.config.routing);
        finalize_eval_losses(ev, ctx.loaded.state.config.loss);
        json out = loss_breakdown_to_json(ev.losses);
        out["mean_probs"] = ev.losses.mean_probs;
        out["dead_experts"] = ev.dead_experts;
        std::cout << out.dump() << "\n";
        return kExitOk;
    }

    if (c_probe->parsed()) {
        auto ctx = open_checkpoint(ckpt_path, config_path, sets, out_flag);
        AssignmentTable table = assignments(ctx.loaded.state.model, ctx.data.test);
        json out = {{"seed", probe_seed},
                    {"expert", probe_to_json(linear_probe(table, ProbeTarget::expert, probe_seed))},
                    {"class", probe_to_json(linear_probe(table, ProbeTarget::label, probe_seed))}};
        write_text(ctx.out_dir + "/probe.json", out.dump(2) + "\n");
        std::cout << out.dump() << "\n";
        return kExitOk;
    }

    if (c_agree->parsed()) {
        auto ctx = open_checkpoint(ckpt_path, config_path, sets, out_flag);
        AssignmentTable table = assignments(ctx.loaded.state.model, ctx.data.test);
        AgreementScores s = agreement(table);
        Utilization util = utilization(table.expert, table.num_experts);
        json out = {{"nmi", s.nmi},
                    {"ari", s.ari},
                    {"mapped_accuracy", s.mapped_accuracy},
                    {"utilization", util.fraction},
                    {"dead_experts", util.dead}};
        write_text(ctx.out_dir + "/agreement.json", out.dump(2) + "\n");
        std::cout << out.dump() << "\n";
        return kExitOk;
    }

    if (c_tsne->parsed()) {
        auto ctx = open_checkpoint(ckpt_path, config_path, sets, out_flag);
        AssignmentTable table = assignments(ctx.loaded.state.model, ctx.data.test);

        std::vector<Index> keep(static_cast<std::size_t>(table.size()));
        for (Index i = 0; i < table.size(); ++i) keep[std::size_t(i)] = i;
        if (table.size() > tsne_cap) {
            Rng rng(tsne_opts.seed);
            rng.shuffle(keep.begin(), keep.end());
            keep.resize(std::size_t(tsne_cap));
            std::sort(keep.begin(), keep.end());
        }
        Eigen::MatrixXd mu(Index(keep.size()), table.mu.cols());
        for (Index i = 0; i < Index(keep.size()); ++i) mu.row(i) = table.mu.row(keep[std::size_t(i)]);

        EmbeddingResult emb = tsne(mu, tsne_opts);
        std::string csv = "# perplexity=" + format_number(tsne_opts.perplexity) +
                          " iters=" + std::to_string(tsne_opts.iterations) +
                          " seed=" + std::to_string(tsne_opts.seed) +
                          " final_kl=" + format_number(emb.final_kl) + "\n";
        csv += "x,y,expert,class\n";
        for (Index i = 0; i < Index(keep.size()); ++i) {
            const Index src = keep[std::size_t(i)];
            csv += format_number(emb.points(i, 0)) + "," + format_number(emb.points(i, 1)) + "," +
                   std::to_string(table.expert[std::size_t(src)]) + "," +
                   std::to_string(table.label[std::size_t(src)]) + "\n";
        }
        write_text(ctx.out_dir + "/embedding.csv", csv);
        std::cout << "wrote " << ctx.out_dir << "/embedding.csv final_kl=" << format_number(emb.final_kl)
                  << "\n";
        return kExitOk;
    }

    if (c_grid->parsed()) {
        auto ctx = open_checkpoint(ckpt_path, config_path, sets, out_flag);
        AssignmentTable table = assignments(ctx.loaded.state.model, ctx.data.test);
        GridReport rep = recon_grid(ctx.loaded.state.model, table, ctx.data.test,
                                    ctx.out_dir + "/grids", per_expert, grid_seed);
        std::cout << "wrote " << rep.files.size() << " grids to " << ctx.out_dir << "/grids ("
                  << rep.skipped.size() << " experts skipped)\n";
        return kExitOk;
    }

    if (c_sweep->parsed()) {
        RunConfig rc = load_config_with_overrides(config_path, sets);
        const std::string out_dir = resolve_out_dir(rc);
        fs::create_directories(out_dir);
        write_text(out_dir + "/sweep_config.json", run_config_to_json(rc).dump(2) + "\n");
        auto rows = run_sweep(rc, sweep_opts, out_dir + "/sweep.csv", &std::cout);
        for (const auto& c : aggregate_cells(rows))
            std::cout << "cell experts=" << c.experts << " fraction=" << format_number(c.fraction)
                      << " samples_per_expert=" << c.samples_per_expert
                      << " recon=" << format_number(c.mean_recon) << "+-" << format_number(c.std_recon)
                      << " dead=" << format_number(c.mean_dead) << "\n";
        return kExitOk;
    }

    if (c_hom->parsed()) {
        hom_opts.include_big = !skip_big;
        RunConfig rc = load_config_with_overrides(config_path, sets);
        const std::string out_dir = resolve_out_dir(rc);
        fs::create_directories(out_dir);
        HomogeneityReport rep = homogeneity_experiment(rc, hom_opts, &std::cout);
        json per_seed = json::array();
        for (const auto& ps : rep.per_seed)
            per_seed.push_back({{"seed", ps.seed},
                                {"multi", ps.multi},
                                {"single_per_class", ps.single_per_class},
                                {"single_mean", ps.single_mean},
                                {"big", ps.big}});
        json out = {{"multi_class_loss", rep.multi_class_loss},
                    {"mean_single_class_loss", rep.mean_single_class_loss},
                    {"big_data_loss", rep.big_data_loss},
                    {"budget", hom_opts.budget},
                    {"per_seed", per_seed}};
        write_text(out_dir + "/homogeneity.json", out.dump(2) + "\n");
        std::cout << out.dump() << "\n";
        return kExitOk;
    }

    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DivergedError& e) {
        std::cerr << "diverged: " << e.what() << "\n";
        return kExitDiverged;
    } catch (const CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return kExitCheckpoint;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

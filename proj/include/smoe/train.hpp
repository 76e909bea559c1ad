#pragma once

#include <chrono>
#include <fstream>
#include <ostream>

#include "smoe/adam.hpp"
#include "smoe/data.hpp"
#include "smoe/model.hpp"

namespace smoe {

enum class RoutingMode { unsupervised, supervised_oracle, supervised_gate };

inline const char* routing_name(RoutingMode m) {
    switch (m) {
        case RoutingMode::unsupervised: return "unsupervised";
        case RoutingMode::supervised_oracle: return "supervised-oracle";
        case RoutingMode::supervised_gate: return "supervised-gate";
    }
    return "?";
}

inline RoutingMode routing_from_name(const std::string& s) {
    if (s == "unsupervised") return RoutingMode::unsupervised;
    if (s == "supervised-oracle") return RoutingMode::supervised_oracle;
    if (s == "supervised-gate") return RoutingMode::supervised_gate;
    throw ConfigError("unknown routing_mode '" + s + "'");
}

struct TrainConfig {
    Index epochs = 20;
    double lr = 1e-4;
    BatchPlan batch;
    LossConfig loss;
    ModelConfig model;
    RoutingMode routing = RoutingMode::unsupervised;
    std::uint64_t seed = 0;
};

struct MetricRow {
    Index epoch = 0;
    LossBreakdown train_losses; // epoch mean of soft-gated batch values
    LossBreakdown test_losses;  // hard-gated full test set
    std::vector<double> utilization; // hard assignment fractions on the test set
    Index dead_experts = 0;          // utilization below 1%
    double wall_seconds = 0;         // reported to the log, never to metrics.csv
};

struct EvalResult {
    LossBreakdown losses;
    std::vector<double> utilization;
    Index dead_experts = 0;
    std::vector<Index> assignments;
};

constexpr double kDeadExpertThreshold = 0.01;

// Hard-gated evaluation: z = mu, argmax expert (or the label in
// supervised-oracle mode), losses averaged over the whole set. The balance
// term is computed from the set-wide assignment distribution.
template <typename S>
EvalResult evaluate(const SmoeVae<S>& model, const Dataset& data, RoutingMode routing,
                    Index eval_batch = 256) {
    const Index m = data.size();
    const Index e_count = model.config.num_experts;
    EvalResult r;
    r.assignments.reserve(std::size_t(m));
    std::vector<Index> counts(static_cast<std::size_t>(e_count), 0);

    double recon = 0, kl = 0;
    std::vector<Index> order(static_cast<std::size_t>(m));
    for (Index i = 0; i < m; ++i) order[std::size_t(i)] = i;

    for (Index start = 0; start < m; start += eval_batch) {
        const Index n = std::min(eval_batch, m - start);
        Tensor<S> x = gather_images<S>(data, order, start, n);
        auto [mu, logvar] = encode(model, x);

        std::vector<Index> forced;
        const std::vector<Index>* forced_ptr = nullptr;
        if (routing == RoutingMode::supervised_oracle) {
            forced = gather_labels(data, order, start, n);
            forced_ptr = &forced;
        }
        HardForward<S> h = decode_hard(model, mu, forced_ptr);

        recon += double((x.array() - h.x_hat.array()).square().sum());
        kl += kl_divergence(mu, logvar) * double(n);
        for (Index i = 0; i < n; ++i) {
            r.assignments.push_back(h.expert[std::size_t(i)]);
            ++counts[std::size_t(h.expert[std::size_t(i)])];
        }
    }
    r.losses.recon = recon / double(m);
    r.losses.kl = kl / double(m);

    // hard one-hot probabilities: entropy is only the eps floor
    r.utilization.resize(std::size_t(e_count));
    for (Index e = 0; e < e_count; ++e) r.utilization[std::size_t(e)] = double(counts[std::size_t(e)]) / double(m);
    const double u = 1.0 / double(e_count);
    double bal = 0;
    for (double f : r.utilization) bal += (f - u) * (f - u);
    r.losses.balance = bal;
    r.losses.entropy = 0.0;
    r.losses.mean_probs = r.utilization;
    for (double f : r.utilization)
        if (f < kDeadExpertThreshold) ++r.dead_experts;
    return r;
}

inline void finalize_eval_losses(EvalResult& r, const LossConfig& cfg) {
    r.losses.gating = cfg.lambda_balance * r.losses.balance + cfg.lambda_entropy * r.losses.entropy;
    r.losses.total = r.losses.recon + cfg.beta * r.losses.kl + cfg.alpha * r.losses.gating;
}

template <typename S>
struct TrainState {
    TrainConfig config;
    SmoeVae<S> model;
    AdamState<S> adam;
    std::vector<MetricRow> metrics;
    Index epochs_done = 0;

    explicit TrainState(const TrainConfig& cfg)
        : config(cfg), model(init_model<S>(cfg.model, Rng(cfg.seed))),
          adam(model.params(), S(cfg.lr)) {}
};

// Run epochs [state.epochs_done, target); appends one MetricRow per epoch.
// Deterministic per (config, datasets): batch order is keyed by (seed,
// epoch), sampling noise comes from the model stream captured in checkpoints.
template <typename S>
void train_run(TrainState<S>& state, const Dataset& train_set, const Dataset& test_set,
               Index target_epochs, std::ostream* log = nullptr) {
    TrainConfig& cfg = state.config;
    const Index e_count = cfg.model.num_experts;
    if (cfg.routing != RoutingMode::unsupervised && e_count != train_set.num_classes())
        throw ConfigError("supervised routing needs num_experts == number of classes (" +
                          std::to_string(e_count) + " vs " + std::to_string(train_set.num_classes()) + ")");

    BatchPlan plan = cfg.batch;
    plan.shuffle_seed = cfg.seed;
    const Index m = train_set.size();
    if (plan.batch_size > m)
        throw ConfigError("batch_size " + std::to_string(plan.batch_size) + " exceeds train set size " +
                          std::to_string(m));
    const Index nb = batches_per_epoch(m, plan);

    for (Index epoch = state.epochs_done; epoch < target_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        auto order = epoch_order(m, plan, epoch);

        double acc_recon = 0, acc_kl = 0, acc_bal = 0, acc_ent = 0, acc_ce = 0;
        for (Index b = 0; b < nb; ++b) {
            const Index start = b * plan.batch_size;
            const Index n = std::min(plan.batch_size, m - start);
            Tensor<S> x = gather_images<S>(train_set, order, start, n);
            std::vector<Index> labels = gather_labels(train_set, order, start, n);

            GateOutput<S> override_gate;
            const GateOutput<S>* override_ptr = nullptr;
            if (cfg.routing != RoutingMode::unsupervised) {
                override_gate = route_supervised<S>(labels, e_count);
                override_ptr = &override_gate;
            }

            SoftForward<S> fwd = forward_soft(state.model, x, state.model.rng, override_ptr);
            LossBreakdown lb = total_loss(x, fwd, cfg.loss);
            if (!std::isfinite(lb.total))
                throw DivergedError("training diverged at epoch " + std::to_string(epoch) + " batch " +
                                    std::to_string(b) + " (total=" + format_number(lb.total) + ")");

            zero_grads(state.model.params());
            backward_soft(state.model, fwd, x, cfg.loss);
            if (cfg.routing == RoutingMode::supervised_oracle) {
                for (auto* p : state.model.gate_params())
                    if (p->grad.array().abs().sum() != S(0))
                        throw StateError("supervised-oracle: gating gradients must stay zero");
            } else if (cfg.routing == RoutingMode::supervised_gate) {
                acc_ce += gate_classifier_step(state.model, fwd.latent.mu, labels);
            }
            state.adam.step(state.model.params());

            acc_recon += lb.recon;
            acc_kl += lb.kl;
            acc_bal += lb.balance;
            acc_ent += lb.entropy;
        }

        MetricRow row;
        row.epoch = epoch;
        row.train_losses.recon = acc_recon / double(nb);
        row.train_losses.kl = acc_kl / double(nb);
        row.train_losses.balance = acc_bal / double(nb);
        row.train_losses.entropy = acc_ent / double(nb);
        row.train_losses.gating = cfg.loss.lambda_balance * row.train_losses.balance +
                                  cfg.loss.lambda_entropy * row.train_losses.entropy;
        row.train_losses.total = row.train_losses.recon + cfg.loss.beta * row.train_losses.kl +
                                 cfg.loss.alpha * row.train_losses.gating;

        EvalResult ev = evaluate(state.model, test_set, cfg.routing);
        finalize_eval_losses(ev, cfg.loss);
        row.test_losses = ev.losses;
        row.utilization = ev.utilization;
        row.dead_experts = ev.dead_experts;
        row.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        state.metrics.push_back(row);
        state.epochs_done = epoch + 1;

        if (log) {
            (*log) << "epoch " << epoch << " train_total " << format_number(row.train_losses.total)
                   << " test_recon " << format_number(row.test_losses.recon) << " dead "
                   << row.dead_experts << " wall_s " << format_number(row.wall_seconds);
            if (cfg.routing == RoutingMode::supervised_gate)
                (*log) << " gate_ce " << format_number(acc_ce / double(nb));
            (*log) << "\n";
        }
    }
}

template <typename S>
TrainState<S> train(const TrainConfig& cfg, const Dataset& train_set, const Dataset& test_set,
                    std::ostream* log = nullptr) {
    TrainState<S> state(cfg);
    train_run(state, train_set, test_set, cfg.epochs, log);
    return state;
}

// ---- metrics CSV -------------------------------------------------------------

inline std::string metrics_csv_header(Index num_experts) {
    std::string h =
        "epoch,train_recon,train_kl,train_balance,train_entropy,train_total,"
        "test_recon,test_kl,test_balance,test_entropy,test_total,dead_experts";
    for (Index e = 0; e < num_experts; ++e) h += ",util_" + std::to_string(e);
    return h;
}

inline std::string metrics_csv_row(const MetricRow& r) {
    std::string s = std::to_string(r.epoch);
    for (const LossBreakdown* b : {&r.train_losses, &r.test_losses}) {
        s += "," + format_number(b->recon);
        s += "," + format_number(b->kl);
        s += "," + format_number(b->balance);
        s += "," + format_number(b->entropy);
        s += "," + format_number(b->total);
    }
    s += "," + std::to_string(r.dead_experts);
    for (double u : r.utilization) s += "," + format_number(u);
    return s;
}

inline void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows,
                              Index num_experts) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(path + ": cannot open for writing");
    out << metrics_csv_header(num_experts) << "\n";
    for (const auto& r : rows) out << metrics_csv_row(r) << "\n";
}

} // namespace smoe

#include "smoe/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace smoe {

using nlohmann::json;

namespace {

json model_config_to_json(const ModelConfig& m) {
    return {{"latent_dim", m.latent_dim}, {"num_experts", m.num_experts},
            {"image_side", m.image_side}, {"enc_c1", m.enc_c1},
            {"enc_c2", m.enc_c2},         {"enc_fc", m.enc_fc},
            {"dec_fc1", m.dec_fc1},       {"dec_c1", m.dec_c1},
            {"dec_c2", m.dec_c2},         {"gate_h1", m.gate_h1},
            {"gate_h2", m.gate_h2},       {"logvar_clamp", m.logvar_clamp}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig m;
    m.latent_dim = j.at("latent_dim");
    m.num_experts = j.at("num_experts");
    m.image_side = j.at("image_side");
    m.enc_c1 = j.at("enc_c1");
    m.enc_c2 = j.at("enc_c2");
    m.enc_fc = j.at("enc_fc");
    m.dec_fc1 = j.at("dec_fc1");
    m.dec_c1 = j.at("dec_c1");
    m.dec_c2 = j.at("dec_c2");
    m.gate_h1 = j.at("gate_h1");
    m.gate_h2 = j.at("gate_h2");
    m.logvar_clamp = j.at("logvar_clamp");
    return m;
}

json provenance_to_json(const Provenance& p) {
    json src = json::array();
    for (const auto& [name, path] : p.sources) src.push_back({{"class", name}, {"path", path}});
    return {{"kind", p.kind},
            {"sources", src},
            {"subsample_seed", std::to_string(p.subsample_seed)},
            {"fraction", p.fraction},
            {"per_class", p.per_class}};
}

Provenance provenance_from_json(const json& j) {
    Provenance p;
    p.kind = j.at("kind");
    for (const auto& s : j.at("sources"))
        p.sources.emplace_back(s.at("class").get<std::string>(), s.at("path").get<std::string>());
    p.subsample_seed = std::stoull(j.at("subsample_seed").get<std::string>());
    p.fraction = j.at("fraction");
    p.per_class = j.at("per_class");
    return p;
}

void append_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}
void append_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}

struct Reader {
    const std::vector<std::uint8_t>& bytes;
    std::size_t pos = 0;
    const std::string& origin;

    void need(std::size_t n, const char* what) const {
        if (pos + n > bytes.size())
            throw CheckpointError(origin + ": truncated checkpoint while reading " + std::string(what));
    }
    std::uint32_t u32() {
        need(4, "u32");
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(bytes[pos + std::size_t(i)]) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8, "u64");
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(bytes[pos + std::size_t(i)]) << (8 * i);
        pos += 8;
        return v;
    }
};

} // namespace

json loss_breakdown_to_json(const LossBreakdown& b) {
    return {{"recon", b.recon},   {"kl", b.kl},         {"balance", b.balance},
            {"entropy", b.entropy}, {"gating", b.gating}, {"total", b.total}};
}

namespace {
LossBreakdown loss_breakdown_from_json(const json& j) {
    LossBreakdown b;
    b.recon = j.at("recon");
    b.kl = j.at("kl");
    b.balance = j.at("balance");
    b.entropy = j.at("entropy");
    b.gating = j.at("gating");
    b.total = j.at("total");
    return b;
}
} // namespace

json metric_row_to_json(const MetricRow& r) {
    return {{"epoch", r.epoch},
            {"train", loss_breakdown_to_json(r.train_losses)},
            {"test", loss_breakdown_to_json(r.test_losses)},
            {"utilization", r.utilization},
            {"dead_experts", r.dead_experts}};
}

MetricRow metric_row_from_json(const json& j) {
    MetricRow r;
    r.epoch = j.at("epoch");
    r.train_losses = loss_breakdown_from_json(j.at("train"));
    r.test_losses = loss_breakdown_from_json(j.at("test"));
    r.utilization = j.at("utilization").get<std::vector<double>>();
    r.dead_experts = j.at("dead_experts");
    return r;
}

void save_checkpoint(const std::string& path, const TrainState<float>& state,
                     const std::vector<std::string>& class_names, const Provenance& provenance) {
    auto& model = const_cast<SmoeVae<float>&>(state.model);
    const auto& params = model.params();

    json manifest;
    manifest["model"] = model_config_to_json(state.config.model);
    manifest["loss"] = {{"beta", state.config.loss.beta},
                        {"alpha", state.config.loss.alpha},
                        {"lambda_balance", state.config.loss.lambda_balance},
                        {"lambda_entropy", state.config.loss.lambda_entropy},
                        {"eps", state.config.loss.eps}};
    manifest["train"] = {{"epochs", state.config.epochs},
                         {"lr", state.config.lr},
                         {"batch_size", state.config.batch.batch_size},
                         {"seed", std::to_string(state.config.seed)},
                         {"routing_mode", routing_name(state.config.routing)}};
    manifest["class_names"] = class_names;
    manifest["provenance"] = provenance_to_json(provenance);
    json metrics = json::array();
    for (const auto& r : state.metrics) metrics.push_back(metric_row_to_json(r));
    manifest["metrics"] = metrics;
    manifest["epochs_done"] = state.epochs_done;

    json rng_state = json::array();
    for (std::uint64_t w : model.rng.state()) rng_state.push_back(std::to_string(w));
    manifest["rng_state"] = rng_state;

    manifest["adam"] = {{"lr", double(state.adam.lr())},
                        {"beta1", double(state.adam.beta1())},
                        {"beta2", double(state.adam.beta2())},
                        {"eps", double(state.adam.eps())},
                        {"step_count", state.adam.step_count()}};

    json plist = json::array();
    for (const auto* p : params) plist.push_back({{"name", p->name}, {"shape", p->value.shape()}});
    manifest["params"] = plist;

    const std::string mtext = manifest.dump();
    Index value_count = 0;
    for (const auto* p : params) value_count += p->size();

    std::vector<std::uint8_t> out;
    out.insert(out.end(), kCheckpointMagic, kCheckpointMagic + 8);
    append_u32(out, kCheckpointVersion);
    append_u64(out, mtext.size());
    out.insert(out.end(), mtext.begin(), mtext.end());

    const std::uint64_t payload_bytes = std::uint64_t(value_count) * 3 * sizeof(float);
    append_u64(out, payload_bytes);
    out.reserve(out.size() + payload_bytes);
    auto append_tensor = [&out](const Tensor<float>& t) {
        const auto* raw = reinterpret_cast<const std::uint8_t*>(t.data());
        out.insert(out.end(), raw, raw + std::size_t(t.size()) * sizeof(float));
    };
    for (const auto* p : params) append_tensor(p->value);
    for (const auto& t : state.adam.first_moments()) append_tensor(t);
    for (const auto& t : state.adam.second_moments()) append_tensor(t);

    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError(path + ": cannot open for writing");
    f.write(reinterpret_cast<const char*>(out.data()), std::streamsize(out.size()));
    if (!f) throw DataError(path + ": short write");
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError(path + ": cannot open checkpoint");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    Reader r{bytes, 0, path};

    r.need(8, "magic");
    if (std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
        throw CheckpointError(path + ": bad checkpoint magic");
    r.pos = 8;
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw CheckpointError(path + ": unsupported checkpoint version " + std::to_string(version));

    const std::uint64_t mlen = r.u64();
    r.need(mlen, "manifest");
    json manifest;
    try {
        manifest = json::parse(bytes.begin() + std::ptrdiff_t(r.pos),
                               bytes.begin() + std::ptrdiff_t(r.pos + mlen));
    } catch (const json::exception& e) {
        throw CheckpointError(path + ": manifest parse error: " + e.what());
    }
    r.pos += mlen;

    TrainConfig cfg;
    try {
        cfg.model = model_config_from_json(manifest.at("model"));
        const json& l = manifest.at("loss");
        cfg.loss.beta = l.at("beta");
        cfg.loss.alpha = l.at("alpha");
        cfg.loss.lambda_balance = l.at("lambda_balance");
        cfg.loss.lambda_entropy = l.at("lambda_entropy");
        cfg.loss.eps = l.at("eps");
        const json& t = manifest.at("train");
        cfg.epochs = t.at("epochs");
        cfg.lr = t.at("lr");
        cfg.batch.batch_size = t.at("batch_size");
        cfg.seed = std::stoull(t.at("seed").get<std::string>());
        cfg.routing = routing_from_name(t.at("routing_mode"));
    } catch (const json::exception& e) {
        throw CheckpointError(path + ": manifest missing fields: " + e.what());
    }

    LoadedCheckpoint loaded{TrainState<float>(cfg), {}, {}};
    TrainState<float>& state = loaded.state;
    loaded.class_names = manifest.at("class_names").get<std::vector<std::string>>();
    loaded.provenance = provenance_from_json(manifest.at("provenance"));
    for (const auto& mj : manifest.at("metrics")) state.metrics.push_back(metric_row_from_json(mj));
    state.epochs_done = manifest.at("epochs_done");

    std::array<std::uint64_t, 4> rng_state{};
    const auto& rs = manifest.at("rng_state");
    for (int i = 0; i < 4; ++i) rng_state[std::size_t(i)] = std::stoull(rs.at(i).get<std::string>());
    state.model.rng.set_state(rng_state);
    state.adam.set_step_count(manifest.at("adam").at("step_count"));

    // Validate the manifest against the reconstructed model, then copy payload.
    const auto& params = state.model.params();
    const json& plist = manifest.at("params");
    if (plist.size() != params.size())
        throw CheckpointError(path + ": manifest lists " + std::to_string(plist.size()) +
                              " params, model has " + std::to_string(params.size()));
    Index value_count = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (plist.at(i).at("name") != params[i]->name)
            throw CheckpointError(path + ": manifest param '" +
                                  plist.at(i).at("name").get<std::string>() + "' does not match model '" +
                                  params[i]->name + "'");
        value_count += params[i]->size();
    }

    const std::uint64_t payload_bytes = r.u64();
    const std::uint64_t expect = std::uint64_t(value_count) * 3 * sizeof(float);
    if (payload_bytes != expect || r.pos + payload_bytes > bytes.size())
        throw CheckpointError(path + ": corrupt payload, expected " + std::to_string(expect) +
                              " bytes, header says " + std::to_string(payload_bytes) + ", file has " +
                              std::to_string(bytes.size() - r.pos));

    auto read_tensor = [&](Tensor<float>& t) {
        std::memcpy(t.data(), bytes.data() + r.pos, std::size_t(t.size()) * sizeof(float));
        r.pos += std::size_t(t.size()) * sizeof(float);
    };
    for (auto* p : params) read_tensor(p->value);
    for (auto& t : state.adam.first_moments()) read_tensor(t);
    for (auto& t : state.adam.second_moments()) read_tensor(t);
    return loaded;
}

} // namespace smoe

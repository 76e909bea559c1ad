#include "smoe/run_config.hpp"

#include <fstream>
#include <set>

namespace smoe {

using nlohmann::json;

namespace {

void reject_unknown(const json& obj, const std::string& scope, const std::set<std::string>& allowed) {
    for (auto it = obj.begin(); it != obj.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError("config: unknown key '" + scope + it.key() + "'");
}

template <typename T>
void read(const json& obj, const char* key, T& out) {
    if (obj.contains(key)) {
        try {
            out = obj.at(key).get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(std::string("config: bad value for '") + key + "': " + e.what());
        }
    }
}

} // namespace

RunConfig run_config_from_json(const json& j) {
    RunConfig rc;
    if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
    reject_unknown(j, "", {"model", "loss", "train", "data", "out_dir"});

    if (j.contains("model")) {
        const json& m = j.at("model");
        reject_unknown(m, "model.", {"latent_dim", "num_experts"});
        read(m, "latent_dim", rc.latent_dim);
        read(m, "num_experts", rc.num_experts);
    }
    if (j.contains("loss")) {
        const json& l = j.at("loss");
        reject_unknown(l, "loss.", {"beta", "alpha", "lambda_balance", "lambda_entropy"});
        read(l, "beta", rc.loss.beta);
        read(l, "alpha", rc.loss.alpha);
        read(l, "lambda_balance", rc.loss.lambda_balance);
        read(l, "lambda_entropy", rc.loss.lambda_entropy);
    }
    if (j.contains("train")) {
        const json& t = j.at("train");
        reject_unknown(t, "train.", {"epochs", "lr", "batch_size", "seed", "routing_mode"});
        read(t, "epochs", rc.epochs);
        read(t, "lr", rc.lr);
        read(t, "batch_size", rc.batch_size);
        read(t, "seed", rc.seed);
        read(t, "routing_mode", rc.routing_mode);
        routing_from_name(rc.routing_mode); // validate
    }
    if (j.contains("data")) {
        const json& d = j.at("data");
        reject_unknown(d, "data.", {"synthetic", "sources", "per_class", "fraction", "split_seed"});
        read(d, "synthetic", rc.synthetic);
        if (d.contains("sources")) {
            rc.synthetic = d.contains("synthetic") ? rc.synthetic : false;
            if (rc.synthetic && d.contains("synthetic"))
                throw ConfigError("config: data.sources and data.synthetic=true are mutually exclusive");
            rc.sources.clear();
            for (auto it = d.at("sources").begin(); it != d.at("sources").end(); ++it)
                rc.sources.emplace_back(it.key(), it.value().get<std::string>());
            rc.synthetic = false;
        }
        read(d, "per_class", rc.per_class);
        read(d, "fraction", rc.fraction);
        read(d, "split_seed", rc.split_seed);
    }
    read(j, "out_dir", rc.out_dir);
    return rc;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config: parse error in '" + path + "': " + e.what());
    }
    return run_config_from_json(j);
}

json run_config_to_json(const RunConfig& rc) {
    json j;
    j["model"] = {{"latent_dim", rc.latent_dim}, {"num_experts", rc.num_experts}};
    j["loss"] = {{"beta", rc.loss.beta},
                 {"alpha", rc.loss.alpha},
                 {"lambda_balance", rc.loss.lambda_balance},
                 {"lambda_entropy", rc.loss.lambda_entropy}};
    j["train"] = {{"epochs", rc.epochs},
                  {"lr", rc.lr},
                  {"batch_size", rc.batch_size},
                  {"seed", rc.seed},
                  {"routing_mode", rc.routing_mode}};
    json data;
    data["synthetic"] = rc.synthetic;
    if (!rc.sources.empty()) {
        json src = json::object();
        for (const auto& [name, path] : rc.sources) src[name] = path;
        data["sources"] = src;
    }
    data["per_class"] = rc.per_class;
    data["fraction"] = rc.fraction;
    data["split_seed"] = rc.split_seed;
    j["data"] = data;
    j["out_dir"] = rc.out_dir;
    return j;
}

void apply_override(json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos)
        throw ConfigError("--set expects key.path=value, got '" + assignment + "'");
    const std::string path = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);

    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw; // unquoted strings like routing modes
    }

    json* node = &doc;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos
                                                                            : dot - start);
        if (key.empty()) throw ConfigError("--set: empty key segment in '" + path + "'");
        if (dot == std::string::npos) {
            (*node)[key] = value;
            break;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

ModelConfig RunConfig::model_config() const {
    ModelConfig m;
    m.latent_dim = latent_dim;
    m.num_experts = num_experts;
    m.validate();
    return m;
}

TrainConfig RunConfig::train_config() const {
    TrainConfig t;
    t.epochs = epochs;
    t.lr = lr;
    t.batch.batch_size = batch_size;
    t.loss = loss;
    t.model = model_config();
    t.routing = routing_from_name(routing_mode);
    t.seed = seed;
    return t;
}

SplitPair RunConfig::build_datasets() const {
    if (synthetic) {
        SyntheticSpec spec;
        spec.per_class = per_class;
        spec.seed = split_seed;
        return build_synthetic_dataset(spec, fraction, split_seed);
    }
    if (sources.empty()) throw ConfigError("config: data.sources required when synthetic=false");
    return build_dataset(sources, per_class, fraction, split_seed);
}

} // namespace smoe

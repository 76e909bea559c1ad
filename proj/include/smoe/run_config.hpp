#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "smoe/data.hpp"
#include "smoe/train.hpp"

namespace smoe {

// The JSON run configuration: keys `model`, `loss`, `train`, `data`,
// `out_dir`. Parsing is strict; unknown keys are fatal so a typo in a
// hyperparameter name cannot silently fall back to a default.
struct RunConfig {
    // model
    Index latent_dim = 32;
    Index num_experts = 7;
    // loss
    LossConfig loss;
    // train
    Index epochs = 20;
    double lr = 1e-4;
    Index batch_size = 128;
    std::uint64_t seed = 0;
    std::string routing_mode = "unsupervised";
    // data
    bool synthetic = true;
    std::vector<std::pair<std::string, std::string>> sources; // class -> npy path
    Index per_class = 2000;
    double fraction = 1.0;
    std::uint64_t split_seed = 1;

    std::string out_dir;

    ModelConfig model_config() const;
    TrainConfig train_config() const;
    SplitPair build_datasets() const;
};

RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);
nlohmann::json run_config_to_json(const RunConfig& rc);

// Apply a dotted-path override like "train.seed=7" onto the raw document.
void apply_override(nlohmann::json& doc, const std::string& assignment);

} // namespace smoe

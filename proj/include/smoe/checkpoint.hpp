#pragma once

#include <string>

#include <json.hpp>

#include "smoe/train.hpp"

namespace smoe {

// Checkpoint file: magic "SMOEVAE1", u32 version, u64-length-prefixed JSON
// manifest, u64-length-prefixed raw little-endian f32 payload. The payload
// holds parameter values in manifest order followed by the Adam first and
// second moments, so a resumed run replays the uninterrupted one bitwise.
constexpr char kCheckpointMagic[9] = "SMOEVAE1";
constexpr std::uint32_t kCheckpointVersion = 1;

struct LoadedCheckpoint {
    TrainState<float> state;
    std::vector<std::string> class_names;
    Provenance provenance;
};

void save_checkpoint(const std::string& path, const TrainState<float>& state,
                     const std::vector<std::string>& class_names, const Provenance& provenance);

LoadedCheckpoint load_checkpoint(const std::string& path);

// Manifest helpers shared with the CLI.
nlohmann::json metric_row_to_json(const MetricRow& r);
MetricRow metric_row_from_json(const nlohmann::json& j);
nlohmann::json loss_breakdown_to_json(const LossBreakdown& b);

} // namespace smoe

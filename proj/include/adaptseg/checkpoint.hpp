#ifndef ADAPTSEG_CHECKPOINT_HPP
#define ADAPTSEG_CHECKPOINT_HPP

#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

#include "adaptseg/model.hpp"

namespace adaptseg {

struct CheckpointMeta {
    int step = 1;
    int epoch = 0;
    std::vector<int> registered_domains = {1};
    bool has_frozen_m1 = false;
    ArchConfig arch;
    nlohmann::json metric_history = nlohmann::json::array();
};

/// Single-archive checkpoint: every parameter and buffer under its
/// hierarchical schema key (encoder.stage2.unit1.alpha_w1.domain2.weight, ...)
/// plus a "__meta__" JSON record.
void save_checkpoint(const std::filesystem::path& path, const ModelBundle& bundle,
                     const CheckpointMeta& meta);

struct LoadedCheckpoint {
    ModelBundle bundle;
    CheckpointMeta meta;
};

/// Rebuilds the bundle from the stored arch config (applying add_domain when
/// the snapshot is present) and restores all tensors bitwise.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json arch_to_json(const ArchConfig& arch);
ArchConfig arch_from_json(const nlohmann::json& j);

}  // namespace adaptseg

#endif

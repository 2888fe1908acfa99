#ifndef ADAPTSEG_RUN_CONFIG_HPP
#define ADAPTSEG_RUN_CONFIG_HPP

#include <filesystem>
#include <string>

#include "adaptseg/model.hpp"
#include "adaptseg/trainer.hpp"

namespace adaptseg {

/// Serializable run configuration: sectioned key=value text, flags override
/// file values. A persisted config re-runs identically given the same data
/// and seed.
struct RunConfig {
    struct DataSection {
        std::string root;
        std::string target_root;
        std::string excluded;
        int input_height = 256;
        int input_width = 256;

        bool operator==(const DataSection&) const = default;
    } data;

    TrainConfig train;
    ArchConfig model;

    struct IoSection {
        std::string output_dir = "run";

        bool operator==(const IoSection&) const = default;
    } io;

    std::string to_ini() const;
    static RunConfig from_ini(const std::string& text);

    void save(const std::filesystem::path& path) const;
    static RunConfig load(const std::filesystem::path& path);

    bool operator==(const RunConfig& other) const;
};

}  // namespace adaptseg

#endif

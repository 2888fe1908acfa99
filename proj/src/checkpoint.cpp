#include "adaptseg/checkpoint.hpp"

#include <torch/torch.h>

namespace adaptseg {

nlohmann::json arch_to_json(const ArchConfig& arch) {
    return {
        {"input_height", arch.input_height},
        {"input_width", arch.input_width},
        {"in_channels", arch.in_channels},
        {"num_classes", arch.num_classes},
        {"encoder_widths", arch.encoder_widths},
        {"encoder_units", arch.encoder_units},
        {"decoder_units", arch.decoder_units},
        {"discriminator_widths", arch.discriminator_widths},
        {"discriminator_leaky_slope", arch.discriminator_leaky_slope},
        {"adapt_downsamplers", arch.adapt_downsamplers},
    };
}

ArchConfig arch_from_json(const nlohmann::json& j) {
    ArchConfig arch;
    arch.input_height = j.at("input_height").get<int>();
    arch.input_width = j.at("input_width").get<int>();
    arch.in_channels = j.at("in_channels").get<int>();
    arch.num_classes = j.at("num_classes").get<int>();
    arch.encoder_widths = j.at("encoder_widths").get<std::vector<int>>();
    arch.encoder_units = j.at("encoder_units").get<std::vector<int>>();
    arch.decoder_units = j.at("decoder_units").get<std::vector<int>>();
    arch.discriminator_widths = j.at("discriminator_widths").get<std::vector<int>>();
    arch.discriminator_leaky_slope = j.at("discriminator_leaky_slope").get<double>();
    arch.adapt_downsamplers = j.at("adapt_downsamplers").get<bool>();
    return arch;
}

namespace {

nlohmann::json meta_to_json(const CheckpointMeta& meta) {
    return {
        {"step", meta.step},
        {"epoch", meta.epoch},
        {"registered_domains", meta.registered_domains},
        {"has_frozen_m1", meta.has_frozen_m1},
        {"arch", arch_to_json(meta.arch)},
        {"metric_history", meta.metric_history},
    };
}

CheckpointMeta meta_from_json(const nlohmann::json& j) {
    CheckpointMeta meta;
    meta.step = j.at("step").get<int>();
    meta.epoch = j.at("epoch").get<int>();
    meta.registered_domains = j.at("registered_domains").get<std::vector<int>>();
    meta.has_frozen_m1 = j.at("has_frozen_m1").get<bool>();
    meta.arch = arch_from_json(j.at("arch"));
    meta.metric_history = j.at("metric_history");
    return meta;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelBundle& bundle,
                     const CheckpointMeta& meta) {
    torch::serialize::OutputArchive archive;
    for (const auto& nt : bundle.named_state()) {
        archive.write(nt.name, nt.tensor.detach().cpu(), nt.is_buffer);
    }
    archive.write("__meta__", c10::IValue(meta_to_json(meta).dump()));
    archive.save_to(path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) {
        throw ConfigError("checkpoint does not exist: " + path.string());
    }
    torch::serialize::InputArchive archive;
    archive.load_from(path.string());

    c10::IValue meta_value;
    archive.read("__meta__", meta_value);
    const auto meta = meta_from_json(nlohmann::json::parse(meta_value.toStringRef()));

    ModelBundle bundle = [&] {
        if (meta.has_frozen_m1) {
            ModelBundle b(meta.arch, 1);
            b.add_domain();
            return b;
        }
        return ModelBundle(meta.arch, static_cast<int>(meta.registered_domains.size()));
    }();

    torch::NoGradGuard guard;
    for (const auto& nt : bundle.named_state()) {
        torch::Tensor stored;
        archive.read(nt.name, stored, nt.is_buffer);
        if (stored.sizes() != nt.tensor.sizes()) {
            throw StateError("checkpoint tensor " + nt.name + " has unexpected shape");
        }
        nt.tensor.copy_(stored);
    }
    return {std::move(bundle), meta};
}

}  // namespace adaptseg

#ifndef ADAPTSEG_TRAINER_HPP
#define ADAPTSEG_TRAINER_HPP

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "adaptseg/data.hpp"
#include "adaptseg/losses.hpp"
#include "adaptseg/metrics.hpp"
#include "adaptseg/model.hpp"

namespace adaptseg {

struct TrainConfig {
    double lr = 5e-4;
    int batch_size = 8;
    double beta1 = 0.9;
    double beta2 = 0.999;

    int step1_epochs = 150;
    int step2_total_epochs = 150;
    int seg_epochs_per_cycle = 10;  // m
    int adv_epochs_per_cycle = 5;   // n

    LossWeights loss_weights{};
    double grl_gamma = 10.0;
    std::uint64_t seed = 0;

    std::filesystem::path output_dir = "run";
    bool routing_check_each_cycle = true;
    int eval_batch_size = 8;

    int step2_cycles() const { return step2_total_epochs / (seg_epochs_per_cycle + adv_epochs_per_cycle); }

    /// step2_total_epochs must divide into whole (m+n) cycles.
    void validate() const;

    bool operator==(const TrainConfig&) const = default;
};

struct CheckpointRecord {
    int step = 1;
    int epoch = 0;
    double source_miou = 0.0;
    std::optional<double> target_miou;
    std::filesystem::path path;
};

/// Dual-improvement policy: a candidate is saved iff both mIoUs strictly
/// exceed the best previously saved pair; the first candidate always saves.
bool checkpoint_policy(const std::vector<std::pair<double, double>>& saved_history,
                       std::pair<double, double> candidate);

/// Append-only line-delimited JSON records.
class MetricsLogger {
public:
    explicit MetricsLogger(const std::filesystem::path& path);
    void log(const nlohmann::json& record);

private:
    std::ofstream out_;
};

/// Step 1: supervised segmentation on the labeled source, L_CE only,
/// updating phi_i, phi_s1 and D_1. Saves the best-by-source-mIoU checkpoint
/// under output_dir and returns its record.
CheckpointRecord train_step1(ModelBundle& bundle, const SampleSource& train_source,
                             const SampleSource& val_source, const TrainConfig& cfg);

/// Step 2: alternating cycles of m segmentation epochs (L_CE routed to
/// {D_2, phi_s2}, L_KLD routed to phi_i against the frozen M_1) and n
/// adversarial epochs (balanced source/target batches through GRL and the
/// discriminator). Checkpoints follow the dual-improvement policy; if the
/// target pool is unlabeled the policy falls back to source-only with a
/// warning. Requires add_domain + set_trainability(step2) already applied.
CheckpointRecord train_step2(ModelBundle& bundle, const SampleSource& train_source,
                             const SampleSource& val_source, const SampleSource& target_pool,
                             const TrainConfig& cfg);

/// The applied segmentation-phase update, shared by the trainer and the
/// routing check: d(L_CE)/d{D_2, phi_s2} scaled by lambda_ce and
/// d(L_KLD)/d{phi_i} scaled by lambda_kld.
struct SegStepGrads {
    NamedTensors ce_params;   // D_2 + phi_s2
    NamedTensors phi_params;  // phi_i
    std::vector<torch::Tensor> ce_grads;
    std::vector<torch::Tensor> phi_grads;
    double l_ce = 0.0;
    double l_kld = 0.0;
};

SegStepGrads routed_segmentation_grads(ModelBundle& bundle, const SegBatch& batch,
                                       const LossWeights& weights);

struct RoutingReport {
    bool passed = true;
    std::vector<std::string> violations;
    std::string summary() const;
};

/// Verifies the step-2 gradient contract on one batch pair: freeze flags on
/// phi_s1/D_1, CE and KLD update footprints, and the post-GRL BCE footprint
/// ({d_rho, phi_i, phi_s2}, no decoder; zero encoder grads at lambda = 0).
RoutingReport gradient_routing_check(ModelBundle& bundle, const SegBatch& seg_batch,
                                     const AdvBatch& adv_batch, const LossWeights& weights,
                                     double lambda);

}  // namespace adaptseg

#endif

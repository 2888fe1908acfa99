#ifndef ADAPTSEG_LOSSES_HPP
#define ADAPTSEG_LOSSES_HPP

#include <torch/torch.h>

#include <optional>

namespace adaptseg {

/// Weights of the combined segmentation loss
/// L_total = lambda_ce * L_ce + lambda_kld * L_kld.
struct LossWeights {
    double lambda_ce = 1.0;
    double lambda_kld = 0.1;

    void validate() const;

    bool operator==(const LossWeights&) const = default;
};

/// Sigmoid ramp for the gradient-reversal scale:
/// lambda(p) = 2 / (1 + exp(-gamma * p)) - 1 with p = epoch / total_epochs.
struct LambdaSchedule {
    double gamma = 10.0;
    int total_epochs = 150;

    void validate() const;
};

/// Mean softmax cross-entropy over all pixels and samples.
/// logits: [B,K,H,W] raw scores, labels: [B,H,W] integer class ids in {0,1}.
/// Optional per-class weights counteract the background/crack imbalance.
torch::Tensor cross_entropy_loss(const torch::Tensor& logits, const torch::Tensor& labels,
                                 const std::optional<torch::Tensor>& class_weights = std::nullopt);

enum class KldDirection {
    reference_m1,  // KL(m1 || m2): frozen model is the reference (default)
    reference_m2,  // KL(m2 || m1)
};

/// Per-pixel KL divergence between two softmax maps, channel-summed then
/// averaged over batch and pixels. Both inputs are [B,K,H,W] probability
/// distributions over the channel axis (validated to 1e-4).
torch::Tensor kld_loss(const torch::Tensor& probs_m2, const torch::Tensor& probs_m1,
                       KldDirection direction = KldDirection::reference_m1);

/// lambda_ce * l_ce + lambda_kld * l_kld.
torch::Tensor total_segmentation_loss(const torch::Tensor& l_ce, const torch::Tensor& l_kld,
                                      const LossWeights& weights);

/// Mean binary cross-entropy between sigmoid(logit) and the domain label.
/// domain_logits: [B] raw scores, domain_labels: [B] in {0 = source, 1 = target}.
torch::Tensor adversarial_loss(const torch::Tensor& domain_logits, const torch::Tensor& domain_labels);

/// Adaptive GRL scale at a given epoch. Output is in [0, 1), zero at epoch 0,
/// and nondecreasing in the epoch.
double lambda_schedule(int epoch, const LambdaSchedule& schedule);

}  // namespace adaptseg

#endif

#include "adaptseg/losses.hpp"

#include <cmath>

#include "adaptseg/errors.hpp"

namespace adaptseg {

namespace F = torch::nn::functional;

void LossWeights::validate() const {
    if (lambda_ce < 0.0 || lambda_kld < 0.0) {
        throw ConfigError("loss weights must be nonnegative, got lambda_ce=" +
                          std::to_string(lambda_ce) + " lambda_kld=" + std::to_string(lambda_kld));
    }
}

void LambdaSchedule::validate() const {
    if (gamma <= 0.0) throw ConfigError("lambda schedule gamma must be positive");
    if (total_epochs < 1) throw ConfigError("lambda schedule total_epochs must be >= 1");
}

namespace {

void check_binary_labels(const torch::Tensor& labels, int num_classes) {
    if (!torch::isIntegralType(labels.scalar_type(), /*includeBool=*/false)) {
        throw ValidationError("labels must be an integral tensor");
    }
    if (labels.numel() == 0) throw ValidationError("labels tensor is empty");
    const auto lo = labels.min().item<std::int64_t>();
    const auto hi = labels.max().item<std::int64_t>();
    if (lo < 0 || hi >= num_classes) {
        throw ValidationError("label values must lie in {0,...," + std::to_string(num_classes - 1) +
                              "}, found range [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    }
}

void check_normalized(const torch::Tensor& probs, const char* which) {
    const auto sums = probs.sum(/*dim=*/1);
    const double worst = (sums - 1.0).abs().max().item<double>();
    if (worst > 1e-4) {
        throw ValidationError(std::string(which) +
                              " is not a per-pixel distribution over channels (max |sum-1| = " +
                              std::to_string(worst) + ")");
    }
}

}  // namespace

torch::Tensor cross_entropy_loss(const torch::Tensor& logits, const torch::Tensor& labels,
                                 const std::optional<torch::Tensor>& class_weights) {
    if (logits.dim() != 4) throw ValidationError("logits must be [B,K,H,W]");
    if (labels.dim() != 3) throw ValidationError("labels must be [B,H,W]");
    if (logits.size(0) != labels.size(0) || logits.size(2) != labels.size(1) ||
        logits.size(3) != labels.size(2)) {
        throw ValidationError("logits/labels shapes are inconsistent");
    }
    check_binary_labels(labels, static_cast<int>(logits.size(1)));

    auto opts = F::CrossEntropyFuncOptions().reduction(torch::kMean);
    if (class_weights) opts = opts.weight(*class_weights);
    return F::cross_entropy(logits, labels.to(torch::kLong), opts);
}

torch::Tensor kld_loss(const torch::Tensor& probs_m2, const torch::Tensor& probs_m1,
                       KldDirection direction) {
    if (probs_m2.sizes() != probs_m1.sizes()) throw ValidationError("probability maps differ in shape");
    if (probs_m2.dim() != 4) throw ValidationError("probability maps must be [B,K,H,W]");
    check_normalized(probs_m2, "probs_m2");
    check_normalized(probs_m1, "probs_m1");

    const auto& ref = direction == KldDirection::reference_m1 ? probs_m1 : probs_m2;
    const auto& other = direction == KldDirection::reference_m1 ? probs_m2 : probs_m1;
    // sum_c ref * (log ref - log other). The log difference keeps the
    // divergence exactly zero on bit-identical inputs; the clamp keeps
    // 0 * log 0 finite without disturbing valid probabilities.
    constexpr double kTiny = 1e-12;
    const auto log_ratio = torch::log(ref.clamp_min(kTiny)) - torch::log(other.clamp_min(kTiny));
    return (ref * log_ratio).sum(/*dim=*/1).mean();
}

torch::Tensor total_segmentation_loss(const torch::Tensor& l_ce, const torch::Tensor& l_kld,
                                      const LossWeights& weights) {
    weights.validate();
    return weights.lambda_ce * l_ce + weights.lambda_kld * l_kld;
}

torch::Tensor adversarial_loss(const torch::Tensor& domain_logits, const torch::Tensor& domain_labels) {
    if (domain_logits.sizes() != domain_labels.sizes()) {
        throw ValidationError("domain logits/labels differ in shape");
    }
    const auto labels = domain_labels.to(domain_logits.dtype());
    const double lo = labels.min().item<double>();
    const double hi = labels.max().item<double>();
    if (lo < 0.0 || hi > 1.0) throw ValidationError("domain labels must lie in {0,1}");
    return F::binary_cross_entropy_with_logits(
        domain_logits, labels, F::BinaryCrossEntropyWithLogitsFuncOptions().reduction(torch::kMean));
}

double lambda_schedule(int epoch, const LambdaSchedule& schedule) {
    schedule.validate();
    if (epoch < 0) throw ValidationError("epoch must be nonnegative");
    const double p = static_cast<double>(epoch) / static_cast<double>(schedule.total_epochs);
    return 2.0 / (1.0 + std::exp(-schedule.gamma * p)) - 1.0;
}

}  // namespace adaptseg

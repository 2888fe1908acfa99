#ifndef ADAPTSEG_MODEL_HPP
#define ADAPTSEG_MODEL_HPP

#include <torch/torch.h>

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "adaptseg/errors.hpp"

namespace adaptseg {

/// Architecture of the adapter segmentation network. Defaults give an
/// ERFNet-style encoder with three downsampling stages (output stride 8).
struct ArchConfig {
    int input_height = 256;
    int input_width = 256;
    int in_channels = 3;
    int num_classes = 2;

    /// Channel width after each downsampler stage.
    std::vector<int> encoder_widths = {16, 64, 128};
    /// Residual-adapter units following each downsampler stage.
    std::vector<int> encoder_units = {0, 2, 2};
    /// Plain residual units after each decoder upsampling stage.
    std::vector<int> decoder_units = {1, 1};

    /// Hidden widths of the FCN domain classifier (a final width-1 conv
    /// producing the logit map is appended automatically).
    std::vector<int> discriminator_widths = {64, 128, 256};
    double discriminator_leaky_slope = 0.2;

    /// When set, downsampler convolutions also get per-domain 1x1 adapters
    /// and per-domain batch norm; by default only residual units are adapted.
    bool adapt_downsamplers = false;

    int downsampling_factor() const { return 1 << static_cast<int>(encoder_widths.size()); }

    /// Throws ConfigError on invalid channel/stride combinations.
    void validate() const;

    bool operator==(const ArchConfig&) const = default;
};

/// Gradient-reversal scale. Forward is identity; backward multiplies the
/// upstream gradient by -lambda_value.
struct GrlConfig {
    double lambda_value = 0.0;
};

/// Identity in the forward pass; replaces the upstream gradient g by
/// -lambda * g during backpropagation.
torch::Tensor grl_apply(const torch::Tensor& features, const GrlConfig& grl);

namespace detail {

/// Container registering one child module per domain as "<prefix>1",
/// "<prefix>2", ... so checkpoint keys carry the owning domain
/// (adapters use "domain", decoders use "d").
template <typename Holder>
struct PerDomainImpl : torch::nn::Module {
    std::vector<Holder> items;
    std::string prefix;

    explicit PerDomainImpl(std::string name_prefix = "domain") : prefix(std::move(name_prefix)) {}

    Holder add(Holder m) {
        items.push_back(register_module(prefix + std::to_string(items.size() + 1), std::move(m)));
        return items.back();
    }
    Holder& at(int domain_index) { return items.at(static_cast<std::size_t>(domain_index)); }
    int size() const { return static_cast<int>(items.size()); }
};

using PerDomainConv = PerDomainImpl<torch::nn::Conv2d>;
using PerDomainBn = PerDomainImpl<torch::nn::BatchNorm2d>;

/// ERFNet downsampler: concat(3x3 stride-2 conv, 2x2 max-pool) -> BN -> ReLU.
/// When adapted, the conv gains per-domain 1x1 stride-2 parallel adapters and
/// the batch norm becomes per-domain.
class DownsamplerBlockImpl : public torch::nn::Module {
public:
    DownsamplerBlockImpl(int in_channels, int out_channels, int num_domains, bool adapted);

    torch::Tensor forward(const torch::Tensor& x, int domain_index);
    void add_domain_copying(int src_index);

    bool adapted() const { return adapted_; }

private:
    torch::nn::Conv2d conv_{nullptr};
    torch::nn::MaxPool2d pool_{nullptr};
    torch::nn::BatchNorm2d bn_{nullptr};  // shared; null when adapted
    std::shared_ptr<PerDomainConv> alpha_w_;
    std::shared_ptr<PerDomainBn> ds_bn_;
    bool adapted_ = false;
    int in_channels_ = 0;
    int conv_channels_ = 0;
};

/// Residual unit of two shared 3x3 convs (phi_w1, phi_w2), each paralleled by
/// a per-domain 1x1 adapter (DS-RAP) and followed by per-domain batch norm
/// (DS-BN, scale alpha_s / shift alpha_b with per-domain running stats).
class ResidualAdapterUnitImpl : public torch::nn::Module {
public:
    ResidualAdapterUnitImpl(int channels, int num_domains);

    torch::Tensor forward(const torch::Tensor& x, int domain_index);
    void add_domain_copying(int src_index);

private:
    torch::nn::Conv2d phi_w1_{nullptr}, phi_w2_{nullptr};
    std::shared_ptr<PerDomainConv> alpha_w1_, alpha_w2_;
    std::shared_ptr<PerDomainBn> bn1_, bn2_;
};

class EncoderStageImpl : public torch::nn::Module {
public:
    EncoderStageImpl(int in_channels, int out_channels, int units, int num_domains, bool adapt_downsampler);

    torch::Tensor forward(const torch::Tensor& x, int domain_index);
    void add_domain_copying(int src_index);

private:
    std::shared_ptr<DownsamplerBlockImpl> down_;
    std::vector<std::shared_ptr<ResidualAdapterUnitImpl>> units_;
};

/// Encoder E_phi: shared weights phi_i plus per-domain adapter sets phi_s_k.
class AdapterEncoderImpl : public torch::nn::Module {
public:
    AdapterEncoderImpl(const ArchConfig& arch, int num_domains);

    torch::Tensor forward(const torch::Tensor& x, int domain_index);
    void add_domain_copying(int src_index);

    int num_domains() const { return num_domains_; }

private:
    std::vector<std::shared_ptr<EncoderStageImpl>> stages_;
    int num_domains_ = 0;
};

class UpsamplerBlockImpl : public torch::nn::Module {
public:
    UpsamplerBlockImpl(int in_channels, int out_channels);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::ConvTranspose2d deconv_{nullptr};
    torch::nn::BatchNorm2d bn_{nullptr};
};

/// Plain residual unit (two 3x3 convs with BN); decoders are wholly
/// domain-specific so their units carry no adapters.
class DecoderResUnitImpl : public torch::nn::Module {
public:
    explicit DecoderResUnitImpl(int channels);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
    torch::nn::BatchNorm2d bn1_{nullptr}, bn2_{nullptr};
};

class DecoderStageImpl : public torch::nn::Module {
public:
    DecoderStageImpl(int in_channels, int out_channels, int units);
    torch::Tensor forward(const torch::Tensor& x);

private:
    std::shared_ptr<UpsamplerBlockImpl> up_;
    std::vector<std::shared_ptr<DecoderResUnitImpl>> units_;
};

/// Decoder D_k: deconvolution stages mirroring the encoder widths, ending in
/// a 2x2 stride-2 transposed conv onto K classes at input resolution.
class SegDecoderImpl : public torch::nn::Module {
public:
    explicit SegDecoderImpl(const ArchConfig& arch);
    torch::Tensor forward(const torch::Tensor& features);

private:
    std::vector<std::shared_ptr<DecoderStageImpl>> stages_;
    torch::nn::ConvTranspose2d head_{nullptr};
};

/// FCN domain classifier d_rho: stride-2 3x3 convs with leaky ReLU, final
/// width-1 conv, spatial mean pool to one logit per sample.
class DiscriminatorImpl : public torch::nn::Module {
public:
    explicit DiscriminatorImpl(const ArchConfig& arch);
    torch::Tensor forward(const torch::Tensor& features);

private:
    std::vector<torch::nn::Conv2d> convs_;
    double leaky_slope_ = 0.2;
};

/// Frozen copy of the step-1 model M_1 = D_1 o E_phi1.
class FrozenM1Impl : public torch::nn::Module {
public:
    explicit FrozenM1Impl(const ArchConfig& arch);
    torch::Tensor forward_logits(const torch::Tensor& x);

    std::shared_ptr<AdapterEncoderImpl> encoder;
    std::shared_ptr<SegDecoderImpl> d1;
};

class BundleModuleImpl : public torch::nn::Module {
public:
    BundleModuleImpl(const ArchConfig& arch, int num_domains);

    std::shared_ptr<AdapterEncoderImpl> encoder;
    std::shared_ptr<PerDomainImpl<std::shared_ptr<SegDecoderImpl>>> decoders;
    std::shared_ptr<DiscriminatorImpl> discriminator;
    std::shared_ptr<FrozenM1Impl> frozen_m1;  // null until add_domain

    void attach_frozen(std::shared_ptr<FrozenM1Impl> frozen);
};

}  // namespace detail

enum class Phase { step1, step2 };

/// A named parameter (or buffer) subset of the bundle.
struct NamedTensors {
    std::vector<std::string> names;
    std::vector<torch::Tensor> tensors;

    void append(std::string name, torch::Tensor t) {
        names.push_back(std::move(name));
        tensors.push_back(std::move(t));
    }
    std::size_t size() const { return tensors.size(); }
};

struct NamedTensor {
    std::string name;
    torch::Tensor tensor;
    bool is_buffer = false;
};

/// The full model family: adapter encoder, per-domain decoders, domain
/// discriminator, and (after add_domain) the immutable step-1 snapshot M_1.
///
/// Domain ids are 1-based, matching checkpoint keys (domain1, domain2).
/// Construction and forward/backward are single-threaded from the caller's
/// perspective; a bundle may be moved between threads but not mutated
/// concurrently.
class ModelBundle {
public:
    ModelBundle(const ArchConfig& arch, int num_domains);

    const ArchConfig& arch() const { return arch_; }
    std::vector<int> registered_domains() const;
    int num_domains() const;

    /// Encoder features under the given domain's adapter set.
    torch::Tensor forward_encoder(const torch::Tensor& x, int domain_id);
    /// Per-pixel logits [B,K,H,W] at input resolution.
    torch::Tensor forward_decoder(const torch::Tensor& features, int domain_id);
    /// One domain logit per sample; sigmoid gives P(target).
    torch::Tensor forward_discriminator(const torch::Tensor& features);

    /// Registers domain 2 with adapters and decoder copied from domain 1 and
    /// snapshots (phi_i, phi_s1, D_1) into the frozen M_1. One incremental
    /// step only; calling twice is a StateError.
    void add_domain();

    /// step1: phi_i, phi_s1, D_1 trainable. step2: phi_s1 and D_1 frozen;
    /// phi_i, phi_s2, D_2, d_rho trainable (requires add_domain).
    void set_trainability(Phase phase);

    bool has_frozen_m1() const { return root_->frozen_m1 != nullptr; }
    /// Logits of the frozen step-1 model (caller manages NoGradGuard).
    torch::Tensor frozen_m1_logits(const torch::Tensor& x);

    // Parameter groups, classified from checkpoint-schema names.
    NamedTensors shared_group() const;                  // phi_i
    NamedTensors adapter_group(int domain_id) const;    // phi_s_k = {alpha_w, alpha_s, alpha_b}
    NamedTensors decoder_group(int domain_id) const;    // D_k
    NamedTensors discriminator_group() const;           // d_rho

    /// All parameters and buffers keyed by the documented checkpoint schema,
    /// including the frozen M_1 snapshot when present.
    std::vector<NamedTensor> named_state() const;

    /// Snapshot state (frozen_m1.* keys) for freeze-invariance checks.
    std::vector<NamedTensor> frozen_m1_state() const;

    /// Current values of the live tensors frozen in step 2 (phi_s1, D_1
    /// params and buffers), keyed to match the frozen_m1 snapshot.
    std::vector<NamedTensor> live_frozen_counterparts() const;

    /// Names of live phi_s1 / D_1 tensors that differ bitwise from the
    /// frozen M_1 snapshot; empty means the freeze invariant holds.
    std::vector<std::string> frozen_drift() const;

    void train(bool on = true) { root_->train(on); }
    void eval() { root_->eval(); }

    std::shared_ptr<detail::BundleModuleImpl> module() { return root_; }

private:
    ArchConfig arch_;
    std::shared_ptr<detail::BundleModuleImpl> root_;

    void check_domain(int domain_id) const;
};

/// Builds a bundle with num_domains fresh adapter sets and decoders.
ModelBundle build_model(const ArchConfig& arch, int num_domains);

/// Scoped freeze of batch-norm running-statistic updates (momentum 0):
/// forwards still normalize with batch statistics, but running stats stay
/// put. The adversarial phase runs under this guard so mixed source/target
/// batches never blend the per-domain statistics DS-BN keeps separate.
class BnStatsFreeze {
public:
    explicit BnStatsFreeze(torch::nn::Module& root);
    ~BnStatsFreeze();
    BnStatsFreeze(const BnStatsFreeze&) = delete;
    BnStatsFreeze& operator=(const BnStatsFreeze&) = delete;

private:
    std::vector<std::pair<torch::nn::BatchNorm2dImpl*, c10::optional<double>>> saved_;
};

/// Copies every parameter and buffer of `src` into same-named entries of
/// `dst`; missing or shape-mismatched names are an error.
void copy_state(const torch::nn::Module& src, torch::nn::Module& dst);

}  // namespace adaptseg

#endif

#include "adaptseg/model.hpp"

#include <torch/torch.h>

#include <algorithm>
#include <sstream>

namespace adaptseg {

void ArchConfig::validate() const {
    const auto stages = encoder_widths.size();
    if (stages < 1) throw ConfigError("encoder needs at least one downsampling stage");
    if (encoder_units.size() != stages) {
        throw ConfigError("encoder_units must list one entry per stage");
    }
    if (decoder_units.size() + 1 != stages) {
        throw ConfigError("decoder_units must list one entry per upsampling stage (stages - 1)");
    }
    if (in_channels < 1) throw ConfigError("in_channels must be positive");
    if (num_classes != 2) throw ConfigError("binary segmentation only (num_classes must be 2)");

    int prev = in_channels;
    for (std::size_t i = 0; i < stages; ++i) {
        if (encoder_widths[i] <= prev) {
            std::ostringstream msg;
            msg << "stage " << i + 1 << " width " << encoder_widths[i]
                << " must exceed its input channels " << prev
                << " (the downsampler concatenates a conv with a max-pool of the input)";
            throw ConfigError(msg.str());
        }
        if (encoder_units[i] < 0) throw ConfigError("encoder_units must be nonnegative");
        prev = encoder_widths[i];
    }
    for (const int u : decoder_units) {
        if (u < 0) throw ConfigError("decoder_units must be nonnegative");
    }

    const int stride = downsampling_factor();
    if (input_height <= 0 || input_width <= 0 || input_height % stride != 0 ||
        input_width % stride != 0) {
        std::ostringstream msg;
        msg << "input size " << input_height << "x" << input_width
            << " must be a positive multiple of the downsampling factor " << stride;
        throw ConfigError(msg.str());
    }

    if (discriminator_widths.empty()) throw ConfigError("discriminator needs at least one layer");
    for (const int w : discriminator_widths) {
        if (w < 1) throw ConfigError("discriminator widths must be positive");
    }
    if (discriminator_leaky_slope <= 0.0 || discriminator_leaky_slope >= 1.0) {
        throw ConfigError("discriminator leaky slope must be in (0, 1)");
    }
}

namespace {

struct GradReverseFunction : torch::autograd::Function<GradReverseFunction> {
    static torch::Tensor forward(torch::autograd::AutogradContext* ctx, const torch::Tensor& x,
                                 double lambda) {
        ctx->saved_data["lambda"] = lambda;
        return x.view_as(x);
    }

    static torch::autograd::tensor_list backward(torch::autograd::AutogradContext* ctx,
                                                 torch::autograd::tensor_list grad_outputs) {
        const double lambda = ctx->saved_data["lambda"].toDouble();
        return {grad_outputs[0] * (-lambda), torch::Tensor()};
    }
};

}  // namespace

torch::Tensor grl_apply(const torch::Tensor& features, const GrlConfig& grl) {
    if (grl.lambda_value < 0.0) throw ValidationError("GRL lambda must be nonnegative");
    return GradReverseFunction::apply(features, grl.lambda_value);
}

void copy_state(const torch::nn::Module& src, torch::nn::Module& dst) {
    torch::NoGradGuard guard;
    const auto src_params = src.named_parameters();
    for (auto& item : dst.named_parameters()) {
        const auto* t = src_params.find(item.key());
        if (t == nullptr) throw StateError("copy_state: missing parameter " + item.key());
        item.value().copy_(*t);
    }
    const auto src_buffers = src.named_buffers();
    for (auto& item : dst.named_buffers()) {
        const auto* t = src_buffers.find(item.key());
        if (t == nullptr) throw StateError("copy_state: missing buffer " + item.key());
        item.value().copy_(*t);
    }
}

namespace detail {

// ---------------------------------------------------------------- encoder

DownsamplerBlockImpl::DownsamplerBlockImpl(int in_channels, int out_channels, int num_domains,
                                           bool adapted)
    : adapted_(adapted), in_channels_(in_channels), conv_channels_(out_channels - in_channels) {
    conv_ = register_module(
        "conv", torch::nn::Conv2d(
                    torch::nn::Conv2dOptions(in_channels, conv_channels_, 3).stride(2).padding(1)));
    pool_ = register_module("pool", torch::nn::MaxPool2d(torch::nn::MaxPool2dOptions(2).stride(2)));
    if (adapted_) {
        alpha_w_ = register_module("alpha_w", std::make_shared<PerDomainConv>());
        ds_bn_ = register_module("ds_bn", std::make_shared<PerDomainBn>());
        for (int k = 0; k < num_domains; ++k) {
            alpha_w_->add(torch::nn::Conv2d(
                torch::nn::Conv2dOptions(in_channels, conv_channels_, 1).stride(2).bias(false)));
            ds_bn_->add(torch::nn::BatchNorm2d(out_channels));
        }
    } else {
        bn_ = register_module("bn", torch::nn::BatchNorm2d(out_channels));
    }
}

torch::Tensor DownsamplerBlockImpl::forward(const torch::Tensor& x, int domain_index) {
    auto conv_out = conv_->forward(x);
    if (adapted_) conv_out = conv_out + alpha_w_->at(domain_index)->forward(x);
    auto y = torch::cat({conv_out, pool_->forward(x)}, /*dim=*/1);
    y = adapted_ ? ds_bn_->at(domain_index)->forward(y) : bn_->forward(y);
    return torch::relu(y);
}

void DownsamplerBlockImpl::add_domain_copying(int src_index) {
    if (!adapted_) return;
    auto conv = torch::nn::Conv2d(
        torch::nn::Conv2dOptions(in_channels_, conv_channels_, 1).stride(2).bias(false));
    copy_state(*alpha_w_->at(src_index), *conv);
    alpha_w_->add(std::move(conv));

    auto bn = torch::nn::BatchNorm2d(in_channels_ + conv_channels_);
    copy_state(*ds_bn_->at(src_index), *bn);
    ds_bn_->add(std::move(bn));
}

ResidualAdapterUnitImpl::ResidualAdapterUnitImpl(int channels, int num_domains) {
    const auto conv3 = torch::nn::Conv2dOptions(channels, channels, 3).padding(1).bias(false);
    phi_w1_ = register_module("phi_w1", torch::nn::Conv2d(conv3));
    phi_w2_ = register_module("phi_w2", torch::nn::Conv2d(conv3));
    alpha_w1_ = register_module("alpha_w1", std::make_shared<PerDomainConv>());
    alpha_w2_ = register_module("alpha_w2", std::make_shared<PerDomainConv>());
    bn1_ = register_module("bn1", std::make_shared<PerDomainBn>());
    bn2_ = register_module("bn2", std::make_shared<PerDomainBn>());
    const auto conv1 = torch::nn::Conv2dOptions(channels, channels, 1).bias(false);
    for (int k = 0; k < num_domains; ++k) {
        alpha_w1_->add(torch::nn::Conv2d(conv1));
        alpha_w2_->add(torch::nn::Conv2d(conv1));
        bn1_->add(torch::nn::BatchNorm2d(channels));
        bn2_->add(torch::nn::BatchNorm2d(channels));
    }
}

torch::Tensor ResidualAdapterUnitImpl::forward(const torch::Tensor& x, int domain_index) {
    auto y = phi_w1_->forward(x) + alpha_w1_->at(domain_index)->forward(x);
    y = torch::relu(bn1_->at(domain_index)->forward(y));
    y = phi_w2_->forward(y) + alpha_w2_->at(domain_index)->forward(y);
    y = bn2_->at(domain_index)->forward(y);
    return torch::relu(x + y);
}

void ResidualAdapterUnitImpl::add_domain_copying(int src_index) {
    const int channels = static_cast<int>(phi_w1_->weight.size(0));
    const auto conv1 = torch::nn::Conv2dOptions(channels, channels, 1).bias(false);
    for (auto* list : {&alpha_w1_, &alpha_w2_}) {
        auto conv = torch::nn::Conv2d(conv1);
        copy_state(*(*list)->at(src_index), *conv);
        (*list)->add(std::move(conv));
    }
    for (auto* list : {&bn1_, &bn2_}) {
        auto bn = torch::nn::BatchNorm2d(channels);
        copy_state(*(*list)->at(src_index), *bn);
        (*list)->add(std::move(bn));
    }
}

EncoderStageImpl::EncoderStageImpl(int in_channels, int out_channels, int units, int num_domains,
                                   bool adapt_downsampler) {
    down_ = register_module("down", std::make_shared<DownsamplerBlockImpl>(
                                        in_channels, out_channels, num_domains, adapt_downsampler));
    for (int u = 0; u < units; ++u) {
        units_.push_back(register_module(
            "unit" + std::to_string(u + 1),
            std::make_shared<ResidualAdapterUnitImpl>(out_channels, num_domains)));
    }
}

torch::Tensor EncoderStageImpl::forward(const torch::Tensor& x, int domain_index) {
    auto y = down_->forward(x, domain_index);
    for (auto& unit : units_) y = unit->forward(y, domain_index);
    return y;
}

void EncoderStageImpl::add_domain_copying(int src_index) {
    down_->add_domain_copying(src_index);
    for (auto& unit : units_) unit->add_domain_copying(src_index);
}

AdapterEncoderImpl::AdapterEncoderImpl(const ArchConfig& arch, int num_domains)
    : num_domains_(num_domains) {
    int prev = arch.in_channels;
    for (std::size_t i = 0; i < arch.encoder_widths.size(); ++i) {
        stages_.push_back(register_module(
            "stage" + std::to_string(i + 1),
            std::make_shared<EncoderStageImpl>(prev, arch.encoder_widths[i], arch.encoder_units[i],
                                               num_domains, arch.adapt_downsamplers)));
        prev = arch.encoder_widths[i];
    }
}

torch::Tensor AdapterEncoderImpl::forward(const torch::Tensor& x, int domain_index) {
    auto y = x;
    for (auto& stage : stages_) y = stage->forward(y, domain_index);
    return y;
}

void AdapterEncoderImpl::add_domain_copying(int src_index) {
    for (auto& stage : stages_) stage->add_domain_copying(src_index);
    ++num_domains_;
}

// ---------------------------------------------------------------- decoder

UpsamplerBlockImpl::UpsamplerBlockImpl(int in_channels, int out_channels) {
    deconv_ = register_module(
        "deconv", torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(in_channels, out_channels, 3)
                                                 .stride(2)
                                                 .padding(1)
                                                 .output_padding(1)));
    bn_ = register_module("bn", torch::nn::BatchNorm2d(out_channels));
}

torch::Tensor UpsamplerBlockImpl::forward(const torch::Tensor& x) {
    return torch::relu(bn_->forward(deconv_->forward(x)));
}

DecoderResUnitImpl::DecoderResUnitImpl(int channels) {
    const auto conv3 = torch::nn::Conv2dOptions(channels, channels, 3).padding(1).bias(false);
    conv1_ = register_module("conv1", torch::nn::Conv2d(conv3));
    conv2_ = register_module("conv2", torch::nn::Conv2d(conv3));
    bn1_ = register_module("bn1", torch::nn::BatchNorm2d(channels));
    bn2_ = register_module("bn2", torch::nn::BatchNorm2d(channels));
}

torch::Tensor DecoderResUnitImpl::forward(const torch::Tensor& x) {
    auto y = torch::relu(bn1_->forward(conv1_->forward(x)));
    y = bn2_->forward(conv2_->forward(y));
    return torch::relu(x + y);
}

DecoderStageImpl::DecoderStageImpl(int in_channels, int out_channels, int units) {
    up_ = register_module("up", std::make_shared<UpsamplerBlockImpl>(in_channels, out_channels));
    for (int u = 0; u < units; ++u) {
        units_.push_back(register_module("unit" + std::to_string(u + 1),
                                         std::make_shared<DecoderResUnitImpl>(out_channels)));
    }
}

torch::Tensor DecoderStageImpl::forward(const torch::Tensor& x) {
    auto y = up_->forward(x);
    for (auto& unit : units_) y = unit->forward(y);
    return y;
}

SegDecoderImpl::SegDecoderImpl(const ArchConfig& arch) {
    const auto& widths = arch.encoder_widths;
    int prev = widths.back();
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
        const int out = widths[widths.size() - 2 - i];
        stages_.push_back(register_module(
            "stage" + std::to_string(i + 1),
            std::make_shared<DecoderStageImpl>(prev, out, arch.decoder_units[i])));
        prev = out;
    }
    head_ = register_module(
        "head", torch::nn::ConvTranspose2d(
                    torch::nn::ConvTranspose2dOptions(prev, arch.num_classes, 2).stride(2)));
}

torch::Tensor SegDecoderImpl::forward(const torch::Tensor& features) {
    auto y = features;
    for (auto& stage : stages_) y = stage->forward(y);
    return head_->forward(y);
}

// ----------------------------------------------------------- discriminator

DiscriminatorImpl::DiscriminatorImpl(const ArchConfig& arch)
    : leaky_slope_(arch.discriminator_leaky_slope) {
    int prev = arch.encoder_widths.back();
    int idx = 1;
    for (const int w : arch.discriminator_widths) {
        convs_.push_back(register_module(
            "conv" + std::to_string(idx++),
            torch::nn::Conv2d(torch::nn::Conv2dOptions(prev, w, 3).stride(2).padding(1))));
        prev = w;
    }
    convs_.push_back(register_module(
        "head", torch::nn::Conv2d(torch::nn::Conv2dOptions(prev, 1, 3).stride(2).padding(1))));
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& features) {
    auto y = features;
    for (std::size_t i = 0; i + 1 < convs_.size(); ++i) {
        y = torch::leaky_relu(convs_[i]->forward(y), leaky_slope_);
    }
    y = convs_.back()->forward(y);
    return y.mean({1, 2, 3});
}

// ----------------------------------------------------------------- bundle

FrozenM1Impl::FrozenM1Impl(const ArchConfig& arch) {
    encoder = register_module("encoder", std::make_shared<AdapterEncoderImpl>(arch, 1));
    d1 = register_module("d1", std::make_shared<SegDecoderImpl>(arch));
}

torch::Tensor FrozenM1Impl::forward_logits(const torch::Tensor& x) {
    return d1->forward(encoder->forward(x, 0));
}

BundleModuleImpl::BundleModuleImpl(const ArchConfig& arch, int num_domains) {
    encoder = register_module("encoder", std::make_shared<AdapterEncoderImpl>(arch, num_domains));
    decoders = register_module("decoder",
                               std::make_shared<PerDomainImpl<std::shared_ptr<SegDecoderImpl>>>("d"));
    for (int k = 0; k < num_domains; ++k) decoders->add(std::make_shared<SegDecoderImpl>(arch));
    discriminator = register_module("discriminator", std::make_shared<DiscriminatorImpl>(arch));
}

void BundleModuleImpl::attach_frozen(std::shared_ptr<FrozenM1Impl> frozen) {
    frozen_m1 = register_module("frozen_m1", std::move(frozen));
    frozen_m1->eval();
    for (auto& p : frozen_m1->parameters()) p.set_requires_grad(false);
}

}  // namespace detail

namespace {

enum class Kind { shared, adapter, decoder, discriminator, frozen };

struct ParamClass {
    Kind kind;
    int domain = 0;  // 1-based; adapters and decoders only
};

ParamClass classify_name(const std::string& name) {
    if (name.rfind("frozen_m1.", 0) == 0) return {Kind::frozen};
    if (name.rfind("discriminator.", 0) == 0) return {Kind::discriminator};
    if (name.rfind("decoder.d", 0) == 0) {
        const auto digits_at = std::string("decoder.d").size();
        return {Kind::decoder, std::stoi(name.substr(digits_at))};
    }
    const auto pos = name.find(".domain");
    if (pos != std::string::npos) {
        return {Kind::adapter, std::stoi(name.substr(pos + std::string(".domain").size()))};
    }
    if (name.rfind("encoder.", 0) == 0) return {Kind::shared};
    throw StateError("unclassifiable parameter name: " + name);
}

}  // namespace

ModelBundle::ModelBundle(const ArchConfig& arch, int num_domains) : arch_(arch) {
    arch_.validate();
    if (num_domains < 1) throw ConfigError("num_domains must be >= 1");
    root_ = std::make_shared<detail::BundleModuleImpl>(arch_, num_domains);
}

ModelBundle build_model(const ArchConfig& arch, int num_domains) {
    return ModelBundle(arch, num_domains);
}

BnStatsFreeze::BnStatsFreeze(torch::nn::Module& root) {
    for (const auto& m : root.modules(/*include_self=*/false)) {
        if (auto* bn = m->as<torch::nn::BatchNorm2d>()) {
            saved_.emplace_back(bn, bn->options.momentum());
            bn->options.momentum(0.0);
        }
    }
}

BnStatsFreeze::~BnStatsFreeze() {
    for (auto& [bn, momentum] : saved_) bn->options.momentum(momentum);
}

std::vector<int> ModelBundle::registered_domains() const {
    std::vector<int> out;
    for (int k = 1; k <= root_->decoders->size(); ++k) out.push_back(k);
    return out;
}

int ModelBundle::num_domains() const { return root_->decoders->size(); }

void ModelBundle::check_domain(int domain_id) const {
    if (domain_id < 1 || domain_id > num_domains()) {
        throw ValidationError("domain " + std::to_string(domain_id) + " is not registered (have " +
                              std::to_string(num_domains()) + ")");
    }
}

torch::Tensor ModelBundle::forward_encoder(const torch::Tensor& x, int domain_id) {
    check_domain(domain_id);
    if (x.dim() != 4 || x.size(1) != arch_.in_channels || x.size(2) != arch_.input_height ||
        x.size(3) != arch_.input_width) {
        std::ostringstream msg;
        msg << "encoder input must be [B," << arch_.in_channels << "," << arch_.input_height << ","
            << arch_.input_width << "], got " << x.sizes();
        throw ValidationError(msg.str());
    }
    return root_->encoder->forward(x, domain_id - 1);
}

torch::Tensor ModelBundle::forward_decoder(const torch::Tensor& features, int domain_id) {
    check_domain(domain_id);
    if (features.dim() != 4 || features.size(1) != arch_.encoder_widths.back()) {
        throw ValidationError("decoder expects encoder features with " +
                              std::to_string(arch_.encoder_widths.back()) + " channels");
    }
    return root_->decoders->at(domain_id - 1)->forward(features);
}

torch::Tensor ModelBundle::forward_discriminator(const torch::Tensor& features) {
    return root_->discriminator->forward(features);
}

void ModelBundle::add_domain() {
    if (num_domains() != 1 || has_frozen_m1()) {
        throw StateError("add_domain supports exactly one incremental step from a one-domain bundle");
    }
    // Snapshot M_1 = (phi_i, phi_s1, D_1) before any new slots exist.
    auto frozen = std::make_shared<detail::FrozenM1Impl>(arch_);
    copy_state(*root_->encoder, *frozen->encoder);
    copy_state(*root_->decoders->at(0), *frozen->d1);

    root_->encoder->add_domain_copying(0);
    auto d2 = std::make_shared<detail::SegDecoderImpl>(arch_);
    copy_state(*root_->decoders->at(0), *d2);
    root_->decoders->add(std::move(d2));

    root_->attach_frozen(std::move(frozen));
}

void ModelBundle::set_trainability(Phase phase) {
    if (phase == Phase::step2 && !has_frozen_m1()) {
        throw StateError("set_trainability(step2) requires add_domain first");
    }
    for (auto& item : root_->named_parameters()) {
        const auto cls = classify_name(item.key());
        bool trainable = false;
        switch (cls.kind) {
            case Kind::shared:
                trainable = true;
                break;
            case Kind::adapter:
                trainable = phase == Phase::step1 ? cls.domain == 1 : cls.domain == 2;
                break;
            case Kind::decoder:
                trainable = phase == Phase::step1 ? cls.domain == 1 : cls.domain == 2;
                break;
            case Kind::discriminator:
                trainable = phase == Phase::step2;
                break;
            case Kind::frozen:
                trainable = false;
                break;
        }
        item.value().set_requires_grad(trainable);
    }
}

torch::Tensor ModelBundle::frozen_m1_logits(const torch::Tensor& x) {
    if (!has_frozen_m1()) throw StateError("frozen M_1 is absent before add_domain");
    return root_->frozen_m1->forward_logits(x);
}

namespace {

NamedTensors collect(const detail::BundleModuleImpl& root,
                     const std::function<bool(const ParamClass&)>& pred) {
    NamedTensors out;
    for (const auto& item : root.named_parameters()) {
        if (pred(classify_name(item.key()))) out.append(item.key(), item.value());
    }
    return out;
}

}  // namespace

NamedTensors ModelBundle::shared_group() const {
    return collect(*root_, [](const ParamClass& c) { return c.kind == Kind::shared; });
}

NamedTensors ModelBundle::adapter_group(int domain_id) const {
    check_domain(domain_id);
    return collect(*root_, [domain_id](const ParamClass& c) {
        return c.kind == Kind::adapter && c.domain == domain_id;
    });
}

NamedTensors ModelBundle::decoder_group(int domain_id) const {
    check_domain(domain_id);
    return collect(*root_, [domain_id](const ParamClass& c) {
        return c.kind == Kind::decoder && c.domain == domain_id;
    });
}

NamedTensors ModelBundle::discriminator_group() const {
    return collect(*root_, [](const ParamClass& c) { return c.kind == Kind::discriminator; });
}

std::vector<NamedTensor> ModelBundle::named_state() const {
    std::vector<NamedTensor> out;
    for (const auto& item : root_->named_parameters()) {
        out.push_back({item.key(), item.value(), false});
    }
    for (const auto& item : root_->named_buffers()) {
        out.push_back({item.key(), item.value(), true});
    }
    return out;
}

std::vector<NamedTensor> ModelBundle::frozen_m1_state() const {
    if (!has_frozen_m1()) throw StateError("frozen M_1 is absent before add_domain");
    std::vector<NamedTensor> out;
    for (const auto& item : root_->named_parameters()) {
        if (item.key().rfind("frozen_m1.", 0) == 0) out.push_back({item.key(), item.value(), false});
    }
    for (const auto& item : root_->named_buffers()) {
        if (item.key().rfind("frozen_m1.", 0) == 0) out.push_back({item.key(), item.value(), true});
    }
    return out;
}

std::vector<NamedTensor> ModelBundle::live_frozen_counterparts() const {
    if (!has_frozen_m1()) throw StateError("frozen M_1 is absent before add_domain");
    std::vector<NamedTensor> out;
    const auto take = [&out](const std::string& name, const torch::Tensor& t, bool is_buffer) {
        const auto cls = classify_name(name);
        if ((cls.kind == Kind::adapter && cls.domain == 1) ||
            (cls.kind == Kind::decoder && cls.domain == 1)) {
            out.push_back({name, t, is_buffer});
        }
    };
    for (const auto& item : root_->named_parameters()) take(item.key(), item.value(), false);
    for (const auto& item : root_->named_buffers()) take(item.key(), item.value(), true);
    return out;
}

std::vector<std::string> ModelBundle::frozen_drift() const {
    // Live keys map onto snapshot keys:
    //   encoder.<path>    -> frozen_m1.encoder.<path>   (phi_s1 adapters)
    //   decoder.d1.<path> -> frozen_m1.d1.<path>
    std::map<std::string, torch::Tensor> snapshot;
    for (const auto& nt : frozen_m1_state()) snapshot.emplace(nt.name, nt.tensor);

    std::vector<std::string> drift;
    for (const auto& nt : live_frozen_counterparts()) {
        std::string snap_key;
        if (nt.name.rfind("decoder.d1.", 0) == 0) {
            snap_key = "frozen_m1.d1." + nt.name.substr(std::string("decoder.d1.").size());
        } else {
            snap_key = "frozen_m1." + nt.name;
        }
        const auto it = snapshot.find(snap_key);
        if (it == snapshot.end()) {
            drift.push_back(nt.name + " (no snapshot counterpart " + snap_key + ")");
            continue;
        }
        if (!torch::equal(nt.tensor, it->second)) drift.push_back(nt.name);
    }
    return drift;
}

}  // namespace adaptseg

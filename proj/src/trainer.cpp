#include "adaptseg/trainer.hpp"

#include <torch/torch.h>

#include <algorithm>
#include <iostream>
#include <numeric>
#include <sstream>

#include "adaptseg/checkpoint.hpp"
#include "adaptseg/rng.hpp"

namespace fs = std::filesystem;

namespace adaptseg {

void TrainConfig::validate() const {
    if (lr < 0.0) throw ConfigError("learning rate must be nonnegative");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (step1_epochs < 1) throw ConfigError("step1_epochs must be >= 1");
    if (seg_epochs_per_cycle < 1 || adv_epochs_per_cycle < 1) {
        throw ConfigError("cycle lengths m and n must be >= 1");
    }
    const int cycle = seg_epochs_per_cycle + adv_epochs_per_cycle;
    if (step2_total_epochs < cycle || step2_total_epochs % cycle != 0) {
        std::ostringstream msg;
        msg << "step2_total_epochs (" << step2_total_epochs << ") must be a positive multiple of m+n ("
            << seg_epochs_per_cycle << "+" << adv_epochs_per_cycle << ")";
        throw ConfigError(msg.str());
    }
    loss_weights.validate();
    if (grl_gamma <= 0.0) throw ConfigError("grl_gamma must be positive");
}

bool checkpoint_policy(const std::vector<std::pair<double, double>>& saved_history,
                       std::pair<double, double> candidate) {
    if (saved_history.empty()) return true;
    const auto& best = saved_history.back();
    return candidate.first > best.first && candidate.second > best.second;
}

MetricsLogger::MetricsLogger(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    out_.open(path, std::ios::app);
    if (!out_) throw ConfigError("cannot open metrics log: " + path.string());
}

void MetricsLogger::log(const nlohmann::json& record) {
    out_ << record.dump() << "\n";
    out_.flush();
}

namespace {

std::vector<torch::Tensor> concat_tensors(std::initializer_list<NamedTensors> groups) {
    std::vector<torch::Tensor> out;
    for (const auto& g : groups) out.insert(out.end(), g.tensors.begin(), g.tensors.end());
    return out;
}

void clear_grads(const std::vector<torch::Tensor>& params) {
    for (const auto& p : params) {
        auto& mutable_p = const_cast<torch::Tensor&>(p);
        mutable_p.mutable_grad() = torch::Tensor();
    }
}

torch::optim::Adam make_adam(std::vector<torch::Tensor> params, const TrainConfig& cfg) {
    return torch::optim::Adam(std::move(params),
                              torch::optim::AdamOptions(cfg.lr).betas({cfg.beta1, cfg.beta2}));
}

nlohmann::json record_base(int step, std::optional<int> cycle, int epoch, const char* phase) {
    nlohmann::json j{{"step", step}, {"epoch", epoch}, {"phase", phase}};
    if (cycle) j["cycle"] = *cycle;
    return j;
}

}  // namespace

CheckpointRecord train_step1(ModelBundle& bundle, const SampleSource& train_source,
                             const SampleSource& val_source, const TrainConfig& cfg) {
    cfg.validate();
    if (bundle.num_domains() != 1 || bundle.has_frozen_m1()) {
        throw StateError("step 1 trains a fresh one-domain bundle");
    }
    fs::create_directories(cfg.output_dir);
    MetricsLogger logger(cfg.output_dir / "metrics.jsonl");

    bundle.set_trainability(Phase::step1);
    auto opt = make_adam(
        concat_tensors({bundle.shared_group(), bundle.adapter_group(1), bundle.decoder_group(1)}), cfg);

    SegBatchStream stream(train_source, cfg.batch_size, Rng::mix(cfg.seed, 0x51e1));
    nlohmann::json history = nlohmann::json::array();
    CheckpointRecord best;
    bool have_best = false;

    for (int epoch = 0; epoch < cfg.step1_epochs; ++epoch) {
        bundle.train();
        stream.start_epoch(epoch);
        double ce_sum = 0.0;
        int batches = 0;
        while (auto batch = stream.next()) {
            opt.zero_grad();
            const auto logits =
                bundle.forward_decoder(bundle.forward_encoder(batch->images, 1), 1);
            auto loss = adaptseg::cross_entropy_loss(logits, batch->labels);
            loss.backward();
            opt.step();
            ce_sum += loss.item<double>();
            ++batches;
        }

        const auto val = evaluate(bundle, val_source, 1, cfg.eval_batch_size);
        history.push_back({{"epoch", epoch}, {"source_miou", val.ious.miou}});

        auto record = record_base(1, std::nullopt, epoch, "seg");
        record["l_ce"] = ce_sum / std::max(batches, 1);
        record["batches"] = batches;
        record["source_miou"] = val.ious.miou;
        logger.log(record);

        if (!have_best || val.ious.miou > best.source_miou) {
            const auto path = cfg.output_dir / "step1_best.pt";
            CheckpointMeta meta;
            meta.step = 1;
            meta.epoch = epoch;
            meta.registered_domains = bundle.registered_domains();
            meta.has_frozen_m1 = false;
            meta.arch = bundle.arch();
            meta.metric_history = history;
            save_checkpoint(path, bundle, meta);
            best = {1, epoch, val.ious.miou, std::nullopt, path};
            have_best = true;

            nlohmann::json best_json{{"step", 1},
                                     {"epoch", epoch},
                                     {"source_miou", val.ious.miou},
                                     {"checkpoint", path.string()}};
            std::ofstream(cfg.output_dir / "best.json") << best_json.dump(2) << "\n";
        }
    }
    return best;
}

SegStepGrads routed_segmentation_grads(ModelBundle& bundle, const SegBatch& batch,
                                       const LossWeights& weights) {
    weights.validate();
    if (!bundle.has_frozen_m1()) throw StateError("segmentation routing requires the frozen M_1");

    SegStepGrads out;
    out.ce_params = bundle.decoder_group(2);
    {
        const auto adapters = bundle.adapter_group(2);
        for (std::size_t i = 0; i < adapters.size(); ++i) {
            out.ce_params.append(adapters.names[i], adapters.tensors[i]);
        }
    }
    out.phi_params = bundle.shared_group();

    // Forward order follows Alg. 2: y2, y1, then Y_hat. The KLD forwards run
    // first so the batch-norm stats they read are the ones the CE forward is
    // about to update, not the other way around.
    //
    // L_KLD path: y2 = D_2(E(x; phi_i_live, phi_s1_frozen)) with the encoder
    // in eval mode (domain-1 running stats are frozen state), y1 from the
    // frozen M_1 snapshot.
    bundle.eval();
    const auto logits_m2 = bundle.forward_decoder(bundle.forward_encoder(batch.images, 1), 2);
    const auto probs_m2 = torch::softmax(logits_m2, 1);
    torch::Tensor probs_m1;
    {
        torch::NoGradGuard guard;
        probs_m1 = torch::softmax(bundle.frozen_m1_logits(batch.images), 1);
    }
    auto l_kld = kld_loss(probs_m2, probs_m1);

    // L_CE path: Y_hat = D_2(E(x; phi_i, phi_s2)), train mode.
    bundle.train();
    const auto logits = bundle.forward_decoder(bundle.forward_encoder(batch.images, 2), 2);
    auto l_ce = adaptseg::cross_entropy_loss(logits, batch.labels);

    out.l_ce = l_ce.item<double>();
    out.l_kld = l_kld.item<double>();

    // Alg. 2 routing as a masked combined backward: phi_i receives only the
    // L_KLD component, D_2 and phi_s2 only the L_CE component.
    if (weights.lambda_ce > 0.0) {
        auto grads = torch::autograd::grad({l_ce}, out.ce_params.tensors, {}, c10::nullopt,
                                           /*create_graph=*/false, /*allow_unused=*/true);
        out.ce_grads.reserve(grads.size());
        for (auto& g : grads) {
            out.ce_grads.push_back(g.defined() ? g * weights.lambda_ce : g);
        }
    } else {
        out.ce_grads.assign(out.ce_params.size(), torch::Tensor());
    }
    if (weights.lambda_kld > 0.0) {
        auto grads = torch::autograd::grad({l_kld}, out.phi_params.tensors, {}, c10::nullopt,
                                           /*create_graph=*/false, /*allow_unused=*/true);
        out.phi_grads.reserve(grads.size());
        for (auto& g : grads) {
            out.phi_grads.push_back(g.defined() ? g * weights.lambda_kld : g);
        }
    } else {
        out.phi_grads.assign(out.phi_params.size(), torch::Tensor());
    }
    return out;
}

namespace {

void apply_routed_grads(const SegStepGrads& grads) {
    for (std::size_t i = 0; i < grads.ce_params.size(); ++i) {
        if (grads.ce_grads[i].defined()) {
            auto& p = const_cast<torch::Tensor&>(grads.ce_params.tensors[i]);
            p.mutable_grad() = grads.ce_grads[i];
        }
    }
    for (std::size_t i = 0; i < grads.phi_params.size(); ++i) {
        if (grads.phi_grads[i].defined()) {
            auto& p = const_cast<torch::Tensor&>(grads.phi_params.tensors[i]);
            p.mutable_grad() = grads.phi_grads[i];
        }
    }
}

}  // namespace

CheckpointRecord train_step2(ModelBundle& bundle, const SampleSource& train_source,
                             const SampleSource& val_source, const SampleSource& target_pool,
                             const TrainConfig& cfg) {
    cfg.validate();
    if (!bundle.has_frozen_m1()) {
        throw StateError("step 2 requires add_domain first (frozen M_1 missing)");
    }
    bundle.set_trainability(Phase::step2);
    fs::create_directories(cfg.output_dir);
    MetricsLogger logger(cfg.output_dir / "metrics.jsonl");

    const bool target_labeled = target_pool.labeled();
    if (!target_labeled) {
        std::cerr << "warning: target pool carries no labels; checkpoint policy falls back to "
                     "source-only improvement\n";
    }

    auto seg_params =
        concat_tensors({bundle.shared_group(), bundle.adapter_group(2), bundle.decoder_group(2)});
    auto opt_seg = make_adam(seg_params, cfg);
    auto opt_adv = make_adam(
        concat_tensors({bundle.shared_group(), bundle.adapter_group(2), bundle.discriminator_group()}),
        cfg);

    SegBatchStream seg_stream(train_source, cfg.batch_size, Rng::mix(cfg.seed, 0x5e62));
    AdvBatchStream adv_stream(train_source, target_pool, cfg.batch_size, Rng::mix(cfg.seed, 0xadb2));
    const LambdaSchedule schedule{cfg.grl_gamma, cfg.step2_total_epochs};

    std::vector<std::pair<double, double>> saved_pairs;
    nlohmann::json history = nlohmann::json::array();
    CheckpointRecord best;
    bool have_best = false;
    int epoch = 0;  // step-2 epochs elapsed (segmentation + adversarial)

    for (int cycle = 1; cycle <= cfg.step2_cycles(); ++cycle) {
        if (cfg.routing_check_each_cycle) {
            std::vector<std::size_t> probe(std::min<std::size_t>(train_source.size(),
                                                                 static_cast<std::size_t>(cfg.batch_size)));
            std::iota(probe.begin(), probe.end(), 0);
            const auto seg_probe = stack_seg_batch(train_source, probe);
            AdvBatchStream probe_stream(train_source, target_pool, cfg.batch_size,
                                        Rng::mix(cfg.seed, 0xc4ec));
            const auto adv_probe = probe_stream.next().value();
            const auto report = gradient_routing_check(bundle, seg_probe, adv_probe, cfg.loss_weights,
                                                       lambda_schedule(epoch, schedule));
            if (!report.passed) {
                throw StateError("gradient routing check failed in cycle " + std::to_string(cycle) +
                                 ":\n" + report.summary());
            }
            logger.log(record_base(2, cycle, epoch, "check"));
        }

        for (int e = 0; e < cfg.seg_epochs_per_cycle; ++e) {
            bundle.train();
            seg_stream.start_epoch(epoch);
            double ce_sum = 0.0, kld_sum = 0.0;
            int batches = 0;
            while (auto batch = seg_stream.next()) {
                auto grads = routed_segmentation_grads(bundle, *batch, cfg.loss_weights);
                clear_grads(seg_params);
                apply_routed_grads(grads);
                opt_seg.step();
                ce_sum += grads.l_ce;
                kld_sum += grads.l_kld;
                ++batches;
            }
            auto record = record_base(2, cycle, epoch, "seg");
            record["l_ce"] = ce_sum / std::max(batches, 1);
            record["l_kld"] = kld_sum / std::max(batches, 1);
            record["batches"] = batches;
            record["lambda"] = lambda_schedule(epoch, schedule);
            logger.log(record);
            ++epoch;
        }

        for (int e = 0; e < cfg.adv_epochs_per_cycle; ++e) {
            const double lambda = lambda_schedule(epoch, schedule);
            bundle.train();
            // Mixed batches normalize with their own batch statistics but do
            // not update running stats (per-domain statistics stay separate).
            BnStatsFreeze stats_guard(*bundle.module());
            adv_stream.start_epoch(epoch);
            double bce_sum = 0.0;
            int batches = 0;
            while (auto batch = adv_stream.next()) {
                opt_adv.zero_grad();
                const auto features = bundle.forward_encoder(batch->images, 2);
                const auto logits = bundle.forward_discriminator(grl_apply(features, GrlConfig{lambda}));
                auto loss = adversarial_loss(logits, batch->domain_labels);
                loss.backward();
                opt_adv.step();
                bce_sum += loss.item<double>();
                ++batches;
            }
            auto record = record_base(2, cycle, epoch, "adv");
            record["l_bce"] = bce_sum / std::max(batches, 1);
            record["batches"] = batches;
            record["lambda"] = lambda;
            logger.log(record);
            ++epoch;
        }

        // End of cycle: freeze invariant, then the dual-improvement policy.
        const auto drift = bundle.frozen_drift();
        if (!drift.empty()) {
            std::string msg = "frozen phi_s1 / D_1 drifted during cycle " + std::to_string(cycle) + ":";
            for (const auto& name : drift) msg += "\n  " + name;
            throw StateError(msg);
        }

        const auto source_val = evaluate(bundle, val_source, 2, cfg.eval_batch_size);
        std::optional<double> target_miou;
        if (target_labeled) {
            target_miou = evaluate(bundle, target_pool, 2, cfg.eval_batch_size).ious.miou;
        }

        auto record = record_base(2, cycle, epoch, "eval");
        record["source_miou"] = source_val.ious.miou;
        if (target_miou) record["target_miou"] = *target_miou;
        logger.log(record);
        history.push_back(record);

        bool save;
        if (target_labeled) {
            save = checkpoint_policy(saved_pairs, {source_val.ious.miou, *target_miou});
        } else {
            save = !have_best || source_val.ious.miou > best.source_miou;
        }
        if (save) {
            const auto path = cfg.output_dir / "step2_best.pt";
            CheckpointMeta meta;
            meta.step = 2;
            meta.epoch = epoch;
            meta.registered_domains = bundle.registered_domains();
            meta.has_frozen_m1 = true;
            meta.arch = bundle.arch();
            meta.metric_history = history;
            save_checkpoint(path, bundle, meta);
            if (target_labeled) saved_pairs.emplace_back(source_val.ious.miou, *target_miou);
            best = {2, epoch, source_val.ious.miou, target_miou, path};
            have_best = true;

            nlohmann::json best_json{{"step", 2},
                                     {"cycle", cycle},
                                     {"epoch", epoch},
                                     {"source_miou", source_val.ious.miou},
                                     {"checkpoint", path.string()}};
            if (target_miou) best_json["target_miou"] = *target_miou;
            std::ofstream(cfg.output_dir / "best.json") << best_json.dump(2) << "\n";
        }
    }

    if (!have_best) throw StateError("step 2 finished without saving any checkpoint");
    return best;
}

std::string RoutingReport::summary() const {
    if (passed) return "gradient routing: ok";
    std::string s = "gradient routing violations:";
    for (const auto& v : violations) s += "\n  " + v;
    return s;
}

namespace {

/// Raw (unscaled, unrouted) gradients of `loss` w.r.t. every live trainable
/// parameter; returns name -> grad (undefined when the loss does not reach
/// the parameter).
std::vector<std::pair<std::string, torch::Tensor>> raw_grads(ModelBundle& bundle,
                                                             const torch::Tensor& loss) {
    NamedTensors trainable;
    for (const auto& group :
         {bundle.shared_group(), bundle.adapter_group(2), bundle.decoder_group(2),
          bundle.discriminator_group()}) {
        for (std::size_t i = 0; i < group.size(); ++i) {
            if (group.tensors[i].requires_grad()) trainable.append(group.names[i], group.tensors[i]);
        }
    }
    const auto grads = torch::autograd::grad({loss}, trainable.tensors, {}, c10::nullopt,
                                             /*create_graph=*/false, /*allow_unused=*/true);
    std::vector<std::pair<std::string, torch::Tensor>> out;
    for (std::size_t i = 0; i < grads.size(); ++i) out.emplace_back(trainable.names[i], grads[i]);
    return out;
}

bool grad_is_nonzero(const torch::Tensor& g) {
    return g.defined() && g.abs().max().item<double>() > 0.0;
}

bool name_in(const std::string& name, const NamedTensors& group) {
    return std::find(group.names.begin(), group.names.end(), name) != group.names.end();
}

}  // namespace

RoutingReport gradient_routing_check(ModelBundle& bundle, const SegBatch& seg_batch,
                                     const AdvBatch& adv_batch, const LossWeights& weights,
                                     double lambda) {
    RoutingReport report;
    const auto violate = [&report](const std::string& msg) {
        report.passed = false;
        report.violations.push_back(msg);
    };

    if (!bundle.has_frozen_m1()) {
        violate("frozen M_1 missing: add_domain has not been applied");
        return report;
    }

    // Freeze flags: phi_s1 and D_1 must not be trainable.
    for (const auto& group : {bundle.adapter_group(1), bundle.decoder_group(1)}) {
        for (std::size_t i = 0; i < group.size(); ++i) {
            if (group.tensors[i].requires_grad()) {
                violate("frozen parameter is trainable: " + group.names[i]);
            }
        }
    }
    if (!report.passed) return report;  // grads below assume a valid freeze setup

    const auto decoder2 = bundle.decoder_group(2);
    const auto adapter2 = bundle.adapter_group(2);
    const auto shared = bundle.shared_group();
    const auto disc = bundle.discriminator_group();

    // L_CE footprint: reaches only D_2, phi_s2 and phi_i (via the D_2 path).
    bundle.train();
    {
        const auto logits = bundle.forward_decoder(bundle.forward_encoder(seg_batch.images, 2), 2);
        auto l_ce = adaptseg::cross_entropy_loss(logits, seg_batch.labels);
        for (const auto& [name, g] : raw_grads(bundle, l_ce)) {
            if (grad_is_nonzero(g) && name_in(name, disc)) {
                violate("L_CE gradient reaches the discriminator: " + name);
            }
        }
    }

    // Applied routing: L_CE update excludes phi_i; L_KLD update is phi_i only.
    {
        const auto routed = routed_segmentation_grads(bundle, seg_batch, weights);
        for (std::size_t i = 0; i < routed.ce_params.size(); ++i) {
            const auto& name = routed.ce_params.names[i];
            if (!name_in(name, decoder2) && !name_in(name, adapter2)) {
                violate("L_CE update routed outside {D_2, phi_s2}: " + name);
            }
        }
        for (std::size_t i = 0; i < routed.phi_params.size(); ++i) {
            const auto& name = routed.phi_params.names[i];
            if (!name_in(name, shared)) {
                violate("L_KLD update routed outside phi_i: " + name);
            }
        }
    }

    // L_BCE footprint through the GRL: {d_rho, phi_i, phi_s2}, never a decoder;
    // lambda = 0 blocks the encoder exactly.
    const auto bce_grads_at = [&](double lam) {
        bundle.train();
        BnStatsFreeze stats_guard(*bundle.module());
        const auto features = bundle.forward_encoder(adv_batch.images, 2);
        const auto logits = bundle.forward_discriminator(grl_apply(features, GrlConfig{lam}));
        auto l_bce = adversarial_loss(logits, adv_batch.domain_labels);
        return raw_grads(bundle, l_bce);
    };
    for (const auto& [name, g] : bce_grads_at(lambda)) {
        if (grad_is_nonzero(g) && name_in(name, decoder2)) {
            violate("L_BCE gradient reaches a decoder: " + name);
        }
    }
    for (const auto& [name, g] : bce_grads_at(0.0)) {
        if (name_in(name, shared) || name_in(name, adapter2)) {
            if (grad_is_nonzero(g)) {
                violate("encoder gradient from L_BCE is nonzero at lambda = 0: " + name);
            }
        }
    }

    // Freeze invariant against the snapshot.
    for (const auto& name : bundle.frozen_drift()) {
        violate("live tensor drifted from the frozen M_1 snapshot: " + name);
    }
    return report;
}

}  // namespace adaptseg

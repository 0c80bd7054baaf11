#pragma once

#include <algorithm>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ddlab/analysis.hpp"
#include "ddlab/config.hpp"
#include "ddlab/data.hpp"
#include "ddlab/domaindrop.hpp"
#include "ddlab/losses.hpp"
#include "ddlab/model.hpp"
#include "ddlab/rng.hpp"
#include "ddlab/scheduler.hpp"

namespace ddlab {

inline BackboneConfig make_backbone_config(const TrainConfig& cfg, const DatasetSpec& data) {
    BackboneConfig bc;
    bc.input_channels = data.channels;
    bc.input_height = data.height;
    bc.input_width = data.width;
    bc.num_classes = data.num_classes;
    if (cfg.backbone == "conv") {
        bc.blocks = {{BlockKind::Conv, 8, 3}, {BlockKind::Conv, 16, 3}, {BlockKind::Conv, 16, 3}};
    } else {
        bc.blocks = {{BlockKind::Linear, 32, 0}, {BlockKind::Linear, 32, 0},
                     {BlockKind::Linear, 32, 0}};
    }
    return bc;
}

struct ModelState {
    Backbone backbone;
    std::vector<DomainDiscriminator> discriminators;
};

inline double accuracy(const Backbone& bb, const std::vector<DomainSample>& samples) {
    if (samples.empty()) return 0.0;
    std::size_t correct = 0;
    for (const DomainSample& s : samples)
        if (argmax(logits_values(bb, s.features)) == s.class_label) ++correct;
    return static_cast<double>(correct) / static_cast<double>(samples.size());
}

// ---- checkpoint ---------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'D', 'D', 'L', 'A', 'B', 'C', 'K', '1'};

struct Checkpoint {
    ModelState model;
    SgdState backbone_opt;
    std::vector<SgdState> disc_opt;
    std::size_t epoch = 0;
    std::size_t total_epochs = 0;
    std::string rng_masks;
    std::string rng_layer_select;
    std::string rng_data_shuffle;
};

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path);
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    io::write_u64(os, 1);  // format version
    const BackboneConfig& bc = ck.model.backbone.config;
    io::write_u64(os, bc.input_channels);
    io::write_u64(os, bc.input_height);
    io::write_u64(os, bc.input_width);
    io::write_u64(os, bc.num_classes);
    io::write_u64(os, bc.blocks.size());
    for (const BlockSpec& b : bc.blocks) {
        io::write_u64(os, b.kind == BlockKind::Conv ? 0 : 1);
        io::write_u64(os, b.channels);
        io::write_u64(os, b.kernel);
    }
    const Backbone& bb = ck.model.backbone;
    for (std::size_t i = 0; i < bb.block_w.size(); ++i) {
        io::write_tensor(os, bb.block_w[i]);
        io::write_tensor(os, bb.block_b[i]);
    }
    io::write_tensor(os, bb.fc_w);
    io::write_tensor(os, bb.fc_b);
    io::write_u64(os, ck.model.discriminators.size());
    for (const DomainDiscriminator& d : ck.model.discriminators) {
        io::write_u64(os, d.layer);
        io::write_tensor(os, d.w);
        io::write_tensor(os, d.b);
    }
    io::write_u64(os, ck.backbone_opt.velocity.size());
    for (const Tensor& t : ck.backbone_opt.velocity) io::write_tensor(os, t);
    io::write_u64(os, ck.disc_opt.size());
    for (const SgdState& st : ck.disc_opt) {
        io::write_u64(os, st.velocity.size());
        for (const Tensor& t : st.velocity) io::write_tensor(os, t);
    }
    io::write_u64(os, ck.epoch);
    io::write_u64(os, ck.total_epochs);
    io::write_string(os, ck.rng_masks);
    io::write_string(os, ck.rng_layer_select);
    io::write_string(os, ck.rng_data_shuffle);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read " + path);
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::string(magic, 8) != std::string(kCheckpointMagic, 8))
        throw IoError("not a ddlab checkpoint: " + path);
    if (io::read_u64(is) != 1) throw IoError("unsupported checkpoint version");
    Checkpoint ck;
    BackboneConfig& bc = ck.model.backbone.config;
    bc.input_channels = io::read_u64(is);
    bc.input_height = io::read_u64(is);
    bc.input_width = io::read_u64(is);
    bc.num_classes = io::read_u64(is);
    bc.blocks.resize(io::read_u64(is));
    for (BlockSpec& b : bc.blocks) {
        b.kind = io::read_u64(is) == 0 ? BlockKind::Conv : BlockKind::Linear;
        b.channels = io::read_u64(is);
        b.kernel = io::read_u64(is);
    }
    Backbone& bb = ck.model.backbone;
    for (std::size_t i = 0; i < bc.blocks.size(); ++i) {
        bb.block_w.push_back(io::read_tensor(is));
        bb.block_b.push_back(io::read_tensor(is));
    }
    bb.fc_w = io::read_tensor(is);
    bb.fc_b = io::read_tensor(is);
    const std::size_t n_disc = io::read_u64(is);
    for (std::size_t i = 0; i < n_disc; ++i) {
        DomainDiscriminator d;
        d.layer = io::read_u64(is);
        d.w = io::read_tensor(is);
        d.b = io::read_tensor(is);
        ck.model.discriminators.push_back(std::move(d));
    }
    const std::size_t n_vel = io::read_u64(is);
    for (std::size_t i = 0; i < n_vel; ++i)
        ck.backbone_opt.velocity.push_back(io::read_tensor(is));
    const std::size_t n_dopt = io::read_u64(is);
    ck.disc_opt.resize(n_dopt);
    for (SgdState& st : ck.disc_opt) {
        const std::size_t n = io::read_u64(is);
        for (std::size_t j = 0; j < n; ++j) st.velocity.push_back(io::read_tensor(is));
    }
    ck.epoch = io::read_u64(is);
    ck.total_epochs = io::read_u64(is);
    ck.rng_masks = io::read_string(is);
    ck.rng_layer_select = io::read_string(is);
    ck.rng_data_shuffle = io::read_string(is);
    return ck;
}

// ---- training loop ------------------------------------------------------

struct TrainResult {
    ModelState best;      // best-validation snapshot
    std::size_t best_epoch = 0;
    double best_val_acc = 0.0;
    double final_target_acc = 0.0;
};

inline std::size_t resolve_target_domain(const DomainDataset& ds, const std::string& name) {
    for (std::size_t d = 0; d < ds.domain_names.size(); ++d)
        if (ds.domain_names[d] == name) return d;
    throw DataError("unknown target domain: " + name);
}

inline TrainResult train(const TrainConfig& cfg, const DomainDataset& dataset,
                         std::ostream& metrics) {
    cfg.validate();
    const std::size_t target = resolve_target_domain(dataset, cfg.target_domain);
    Splits splits = split_leave_one_out(dataset, target, cfg.val_fraction, cfg.seed);
    const std::size_t num_domains = splits.num_source_domains;

    Backbone bb = init_params(make_backbone_config(cfg, dataset.spec), cfg.seed);
    const std::size_t n_middle = bb.config.num_middle_layers();

    LayerSchedule schedule;
    schedule.candidates = cfg.candidate_layers;
    if (schedule.candidates.empty())
        for (std::size_t l = 0; l < n_middle; ++l) schedule.candidates.push_back(l);
    schedule.validate(n_middle);

    const bool use_dd = variant_uses_domaindrop(cfg.variant);
    const bool use_lt = variant_uses_layerwise(cfg.variant);
    const bool use_cl = variant_uses_consistency(cfg.variant);

    std::vector<DomainDiscriminator> discs;
    std::vector<SgdState> disc_opt;
    if (use_dd) {
        Rng disc_rng(stream_seed(cfg.seed, "disc-init"));
        const std::vector<std::size_t> chans = bb.config.middle_layer_channels();
        for (std::size_t l = 0; l < n_middle; ++l)
            discs.push_back(init_discriminator(l, num_domains, chans[l], disc_rng));
        disc_opt.resize(n_middle);
    }

    Rng mask_rng(stream_seed(cfg.seed, "masks"));
    Rng layer_rng(stream_seed(cfg.seed, "layer-select"));
    Rng shuffle_rng(stream_seed(cfg.seed, "data-shuffle"));

    SgdConfig opt{cfg.lr, cfg.momentum, cfg.weight_decay};
    SgdState opt_state;

    TrainResult result;
    result.best = {bb, discs};
    double best_metric = -1.0;

    std::vector<std::size_t> order(splits.train.size());
    std::iota(order.begin(), order.end(), 0);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_at_epoch(cfg.lr, epoch, cfg.epochs);
        shuffle_rng.shuffle(order.begin(), order.end());

        for (std::size_t start = 0, iter = 0; start < order.size();
             start += cfg.batch_size, ++iter) {
            const std::size_t end = std::min(start + cfg.batch_size, order.size());
            std::vector<const DomainSample*> batch;
            for (std::size_t i = start; i < end; ++i) batch.push_back(&splits.train[order[i]]);

            const std::size_t layer =
                use_lt ? select_layer(schedule, layer_rng) : schedule.candidates.back();

            Tape tape;
            BackboneNodes bbn = register_backbone(tape, bb);
            DiscriminatorNodes dn;
            if (use_dd) dn = register_discriminator(tape, discs[layer]);

            BatchLossResult loss = total_loss(tape, bb, bbn, use_dd ? &discs[layer] : nullptr,
                                              use_dd ? &dn : nullptr, batch, layer, cfg.drop,
                                              cfg.weights, use_cl, num_domains, mask_rng);
            if (!std::isfinite(tape.value(loss.total).item()))
                throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) +
                                    " iter " + std::to_string(iter) +
                                    " (cls=" + std::to_string(loss.cls) +
                                    " cons=" + std::to_string(loss.cons) +
                                    " domain=" + std::to_string(loss.domain) + ")");
            tape.backward(loss.total);

            std::vector<Tensor*> params = bb.parameters();
            std::vector<const Tensor*> grads;
            for (std::size_t i = 0; i < bbn.block_w.size(); ++i) {
                grads.push_back(&tape.grad(bbn.block_w[i]));
                if (bbn.block_b[i] >= 0) grads.push_back(&tape.grad(bbn.block_b[i]));
            }
            grads.push_back(&tape.grad(bbn.fc_w));
            grads.push_back(&tape.grad(bbn.fc_b));
            sgd_step(params, grads, opt_state, opt, lr);
            if (use_dd) {
                std::vector<Tensor*> dparams = discs[layer].parameters();
                std::vector<const Tensor*> dgrads = {&tape.grad(dn.w), &tape.grad(dn.b)};
                sgd_step(dparams, dgrads, disc_opt[layer], opt, lr);
            }

            nlohmann::json rec{{"epoch", epoch},        {"iter", iter},
                               {"loss_cls", loss.cls},  {"loss_cons", loss.cons},
                               {"loss_domain", loss.domain}, {"layer", layer},
                               {"lr", lr}};
            metrics << rec.dump() << "\n";
        }

        const double train_acc = accuracy(bb, splits.train);
        const double val_acc = accuracy(bb, splits.val);
        const double target_acc = accuracy(bb, splits.target);
        nlohmann::json rec{{"epoch", epoch},
                           {"train_acc", train_acc},
                           {"val_acc", val_acc},
                           {"target_acc", target_acc}};
        metrics << rec.dump() << "\n";

        // Model selection on source validation accuracy; falls back to
        // train accuracy when the val split is empty.
        const double selection = splits.val.empty() ? train_acc : val_acc;
        if (selection > best_metric) {
            best_metric = selection;
            result.best = {bb, discs};
            result.best_epoch = epoch;
            result.best_val_acc = val_acc;
        }
    }

    result.final_target_acc = accuracy(result.best.backbone, splits.target);
    nlohmann::json rec{{"best_epoch", result.best_epoch},
                       {"best_val_acc", result.best_val_acc},
                       {"final_target_acc", result.final_target_acc}};
    metrics << rec.dump() << "\n";
    return result;
}

}  // namespace ddlab

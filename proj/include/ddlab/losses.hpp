#pragma once

#include <array>
#include <vector>

#include "ddlab/data.hpp"
#include "ddlab/domaindrop.hpp"
#include "ddlab/model.hpp"
#include "ddlab/tensor.hpp"

namespace ddlab {

struct LossWeights {
    double consistency = 1.5;
    double temperature = 5.0;
    double grl_lambda = 0.25;

    void validate() const {
        if (temperature <= 0.0) throw ConfigError("temperature must be > 0");
        if (consistency < 0.0 || grl_lambda < 0.0) throw ConfigError("loss weights must be >= 0");
    }
};

// Symmetric temperature-softened KL between two prediction vectors:
//   1/2 (KL(s(z1/T)||s(z2/T)) + KL(s(z2/T)||s(z1/T)))
inline NodeId consistency_loss(Tape& tape, NodeId logits1, NodeId logits2, double temperature) {
    if (!tape.value(logits1).same_shape(tape.value(logits2)))
        throw DimensionError("consistency_loss: shape mismatch");
    NodeId p1 = tape.softmax_t(logits1, temperature);
    NodeId p2 = tape.softmax_t(logits2, temperature);
    return tape.scale(tape.add(tape.kl_div(p1, p2), tape.kl_div(p2, p1)), 0.5);
}

struct BatchLossResult {
    NodeId total = -1;
    double cls = 0.0;
    double cons = 0.0;
    double domain = 0.0;
};

// Pre-drawn masks for one sample's two passes; used to freeze the
// stochastic elements (finite-difference checks, forced-equal masks).
struct FrozenMasks {
    std::array<DropMask, 2> mask;  // dropped == 0 means "did not fire"
};

// Composite objective over one batch:
//   mean over samples of the classification term (average CE of the
//   two dropout passes when the consistency path is on, single-pass CE
//   otherwise), plus weighted consistency, plus the domain loss
//   evaluated once on the first pass's unmasked hooked features.
// When `disc` is null the whole DomainDrop path is off (baseline).
inline BatchLossResult total_loss(Tape& tape, const Backbone& bb, const BackboneNodes& bbn,
                                  const DomainDiscriminator* disc,
                                  const DiscriminatorNodes* disc_nodes,
                                  const std::vector<const DomainSample*>& batch,
                                  std::size_t selected_layer, const DropConfig& drop_cfg,
                                  const LossWeights& weights, bool use_consistency,
                                  std::size_t num_domains, Rng& mask_rng,
                                  const std::vector<FrozenMasks>* frozen = nullptr) {
    if (batch.empty()) throw ParameterError("total_loss: empty batch");
    std::vector<NodeId> cls_terms, cons_terms, dom_logits;
    std::vector<std::size_t> dom_labels;

    for (std::size_t i = 0; i < batch.size(); ++i) {
        const DomainSample& s = *batch[i];
        NodeId first_pass_domain_logits = -1;
        auto run_pass = [&](int pass) -> NodeId {
            if (!disc) {
                return forward(tape, bb, bbn, s.features).logits;
            }
            ForwardHook hook;
            hook.layer = selected_layer;
            hook.transform = [&, pass](Tape& t, NodeId feat) -> NodeId {
                if (frozen) {
                    if (pass == 0)
                        first_pass_domain_logits =
                            discriminate(t, *disc_nodes, feat, weights.grl_lambda);
                    const DropMask& m = (*frozen)[i].mask[static_cast<std::size_t>(pass)];
                    return m.dropped > 0 ? apply_mask(t, feat, m, drop_cfg.rescale) : feat;
                }
                DomainDropResult r = domaindrop_forward(t, feat, *disc, *disc_nodes,
                                                        s.domain_label, drop_cfg, mask_rng, true);
                if (pass == 0) first_pass_domain_logits = r.domain_logits;
                return r.feature;
            };
            return forward(tape, bb, bbn, s.features, hook).logits;
        };

        NodeId logits1 = run_pass(0);
        NodeId ce1 = tape.cross_entropy(logits1, s.class_label);
        if (use_consistency) {
            NodeId logits2 = run_pass(1);
            NodeId ce2 = tape.cross_entropy(logits2, s.class_label);
            cls_terms.push_back(tape.scale(tape.add(ce1, ce2), 0.5));
            cons_terms.push_back(consistency_loss(tape, logits1, logits2, weights.temperature));
        } else {
            cls_terms.push_back(ce1);
        }
        if (disc) {
            dom_logits.push_back(first_pass_domain_logits);
            dom_labels.push_back(s.domain_label);
        }
    }

    BatchLossResult out;
    NodeId total = tape.mean_scalars(cls_terms);
    out.cls = tape.value(total).item();
    if (!cons_terms.empty()) {
        NodeId cons = tape.mean_scalars(cons_terms);
        out.cons = tape.value(cons).item();
        total = tape.add(total, tape.scale(cons, weights.consistency));
    }
    if (disc) {
        NodeId dom = domain_loss(tape, dom_logits, dom_labels, num_domains);
        out.domain = tape.value(dom).item();
        total = tape.add(total, dom);
    }
    out.total = total;
    return out;
}

}  // namespace ddlab

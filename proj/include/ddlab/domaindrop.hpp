#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "ddlab/model.hpp"
#include "ddlab/rng.hpp"
#include "ddlab/scheduler.hpp"
#include "ddlab/tensor.hpp"

namespace ddlab {

// GAP + FC head over one middle layer's channels, predicting the
// source domain.
struct DomainDiscriminator {
    std::size_t layer = 0;
    Tensor w;  // {K domains, C channels}
    Tensor b;  // {K}

    std::size_t num_domains() const { return w.shape.at(0); }
    std::size_t channels() const { return w.shape.at(1); }

    std::vector<Tensor*> parameters() { return {&w, &b}; }
};

inline DomainDiscriminator init_discriminator(std::size_t layer, std::size_t num_domains,
                                              std::size_t channels, Rng& rng) {
    DomainDiscriminator d;
    d.layer = layer;
    d.w = uniform_init({num_domains, channels}, channels, rng);
    d.b = uniform_init({num_domains}, channels, rng);
    return d;
}

struct DropMask {
    std::vector<std::uint8_t> keep;  // 1 = keep, 0 = drop
    std::size_t dropped = 0;

    std::size_t channels() const { return keep.size(); }
    static DropMask all_ones(std::size_t c) { return DropMask{std::vector<std::uint8_t>(c, 1), 0}; }
};

struct DropConfig {
    double p_drop = 0.33;
    double p_active = 0.8;
    double grl_lambda = 0.25;
    bool rescale = true;
    double score_floor = 1e-12;

    void validate() const {
        if (p_drop < 0.0 || p_drop >= 1.0) throw ConfigError("p_drop must be in [0,1)");
        if (p_active < 0.0 || p_active > 1.0) throw ConfigError("p_active must be in [0,1]");
        if (grl_lambda < 0.0) throw ConfigError("grl_lambda must be >= 0");
        if (score_floor <= 0.0) throw ConfigError("score_floor must be > 0");
    }

    std::size_t dropped_count(std::size_t channels) const {
        return static_cast<std::size_t>(std::llround(p_drop * static_cast<double>(channels)));
    }
};

// Tape handles for one discriminator's parameters.
struct DiscriminatorNodes {
    NodeId w = -1;
    NodeId b = -1;
};

inline DiscriminatorNodes register_discriminator(Tape& tape, const DomainDiscriminator& d) {
    return {tape.leaf(d.w), tape.leaf(d.b)};
}

// Domain logits = W . GAP(feature) + b, with a gradient reversal layer
// in front so the backbone sees the discrimination gradient scaled by
// -lambda while the discriminator itself trains normally.
inline NodeId discriminate(Tape& tape, const DiscriminatorNodes& nodes, NodeId feature,
                           double grl_lambda) {
    NodeId pooled = tape.global_avg_pool(feature);
    NodeId reversed = tape.grl(pooled, grl_lambda);
    return tape.linear(nodes.w, reversed, nodes.b);
}

// Value-only variant for analysis and tests.
inline std::vector<double> discriminate_values(const DomainDiscriminator& d, const Tensor& feature) {
    Tape tape;
    DiscriminatorNodes nodes = register_discriminator(tape, d);
    NodeId f = tape.leaf(feature);
    return tape.value(discriminate(tape, nodes, f, 0.0)).data;
}

inline std::vector<double> gap_values(const Tensor& feature) {
    Tape tape;
    NodeId f = tape.leaf(feature);
    return tape.value(tape.global_avg_pool(f)).data;
}

// Channel score s_j = W[true_domain][j] * GAP(feature)_j, floored at
// eps. Detached: a selection statistic, no gradient flows through it.
inline std::vector<double> channel_scores(const DomainDiscriminator& disc, const Tensor& feature,
                                          std::size_t true_domain, double eps = 1e-12) {
    if (true_domain >= disc.num_domains())
        throw IndexError("channel_scores: domain index out of range");
    const std::vector<double> pooled = gap_values(feature);
    if (pooled.size() != disc.channels())
        throw DimensionError("channel_scores: channel count mismatch");
    const std::size_t c = disc.channels();
    std::vector<double> s(c);
    for (std::size_t j = 0; j < c; ++j)
        s[j] = std::max(disc.w.data[true_domain * c + j] * pooled[j], eps);
    return s;
}

inline std::vector<double> drop_probabilities(const std::vector<double>& scores) {
    double total = 0.0;
    for (double s : scores) {
        if (s <= 0.0) throw ValidationError("drop_probabilities: non-positive score");
        total += s;
    }
    std::vector<double> p(scores.size());
    for (std::size_t j = 0; j < scores.size(); ++j) p[j] = scores[j] / total;
    return p;
}

// Weighted random selection: key k_j = r_j^(1/s_j); the M largest keys
// are dropped. Computed in log space, log k_j = log(r_j)/s_j, which is
// monotone in k_j and never underflows for floored scores.
inline DropMask wrs_mask(const std::vector<double>& scores, std::size_t dropped, Rng& rng) {
    const std::size_t c = scores.size();
    if (dropped >= c) throw ParameterError("wrs_mask: M must be < C");
    for (double s : scores)
        if (s <= 0.0) throw ValidationError("wrs_mask: scores must be positive");
    DropMask mask = DropMask::all_ones(c);
    if (dropped == 0) return mask;
    std::vector<double> log_keys(c);
    for (std::size_t j = 0; j < c; ++j)
        log_keys[j] = std::log(rng.uniform_open()) / scores[j];
    std::vector<std::size_t> order(c);
    std::iota(order.begin(), order.end(), 0);
    std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(dropped) - 1,
                     order.end(),
                     [&](std::size_t a, std::size_t b) { return log_keys[a] > log_keys[b]; });
    for (std::size_t i = 0; i < dropped; ++i) mask.keep[order[i]] = 0;
    mask.dropped = dropped;
    return mask;
}

// Zero dropped channels; optionally rescale survivors by C/(C-M) so
// expected activation magnitude is preserved. Gradients flow through
// surviving channels only.
inline NodeId apply_mask(Tape& tape, NodeId feature, const DropMask& mask, bool rescale) {
    const Tensor& f = tape.value(feature);
    const std::size_t c = f.rank() == 3 ? f.shape[0] : f.shape.at(0);
    if (mask.channels() != c) throw DimensionError("apply_mask: mask length mismatch");
    const double factor =
        rescale && mask.dropped > 0
            ? static_cast<double>(c) / static_cast<double>(c - mask.dropped)
            : 1.0;
    std::vector<double> factors(c);
    for (std::size_t j = 0; j < c; ++j) factors[j] = mask.keep[j] ? factor : 0.0;
    return tape.channel_scale(feature, std::move(factors));
}

struct DomainDropResult {
    NodeId feature = -1;        // possibly masked feature
    NodeId domain_logits = -1;  // -1 when not training
    DropMask mask;
    bool fired = false;
};

// Full per-sample pipeline. Domain logits are computed on the UNMASKED
// feature; masking itself fires with probability p_active.
inline DomainDropResult domaindrop_forward(Tape& tape, NodeId feature,
                                           const DomainDiscriminator& disc,
                                           const DiscriminatorNodes& disc_nodes,
                                           std::size_t true_domain, const DropConfig& cfg,
                                           Rng& rng, bool training) {
    const Tensor& f = tape.value(feature);
    const std::size_t c = f.rank() == 3 ? f.shape[0] : f.shape.at(0);
    DomainDropResult res;
    res.mask = DropMask::all_ones(c);
    res.feature = feature;
    if (!training) return res;
    res.domain_logits = discriminate(tape, disc_nodes, feature, cfg.grl_lambda);
    if (gate_active(cfg.p_active, rng)) {
        const std::size_t m = cfg.dropped_count(c);
        if (m > 0) {
            const std::vector<double> s = channel_scores(disc, tape.value(feature), true_domain,
                                                         cfg.score_floor);
            res.mask = wrs_mask(s, m, rng);
            res.feature = apply_mask(tape, feature, res.mask, cfg.rescale);
            res.fired = true;
        }
    }
    return res;
}

// Discrimination loss: per-domain mean cross-entropy, then averaged
// over the domains present.
inline NodeId domain_loss(Tape& tape, const std::vector<NodeId>& domain_logits,
                          const std::vector<std::size_t>& domain_labels, std::size_t num_domains) {
    if (domain_logits.size() != domain_labels.size() || domain_logits.empty())
        throw ParameterError("domain_loss: empty or mismatched batch");
    std::vector<std::vector<NodeId>> per_domain(num_domains);
    for (std::size_t i = 0; i < domain_logits.size(); ++i) {
        const std::size_t k = domain_labels[i];
        if (k >= num_domains) throw IndexError("domain_loss: domain label out of range");
        per_domain[k].push_back(tape.cross_entropy(domain_logits[i], k));
    }
    std::vector<NodeId> domain_means;
    for (const auto& terms : per_domain)
        if (!terms.empty()) domain_means.push_back(tape.mean_scalars(terms));
    return tape.mean_scalars(domain_means);
}

}  // namespace ddlab

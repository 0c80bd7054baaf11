#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "ddlab/data.hpp"
#include "ddlab/model.hpp"
#include "ddlab/rng.hpp"
#include "ddlab/tensor.hpp"

namespace ddlab {

using SampleGroup = std::vector<const DomainSample*>;

inline std::vector<SampleGroup> group_by_domain(const std::vector<DomainSample>& samples,
                                                std::size_t num_domains) {
    std::vector<SampleGroup> groups(num_domains);
    for (const DomainSample& s : samples) groups.at(s.domain_label).push_back(&s);
    return groups;
}

// Mean feature map at a middle layer, averaged over a sample group.
inline Tensor mean_feature(const Backbone& bb, const SampleGroup& samples, std::size_t layer) {
    if (samples.empty()) throw DataError("mean_feature: empty domain");
    Tensor acc = middle_feature(bb, samples[0]->features, layer);
    for (std::size_t i = 1; i < samples.size(); ++i) {
        const Tensor f = middle_feature(bb, samples[i]->features, layer);
        for (std::size_t j = 0; j < acc.size(); ++j) acc.data[j] += f.data[j];
    }
    for (double& v : acc.data) v /= static_cast<double>(samples.size());
    return acc;
}

// Per-channel mean of the pooled (GAP) activation over a sample group.
inline std::vector<double> mean_pooled_activation(const Backbone& bb, const SampleGroup& samples,
                                                  std::size_t layer) {
    if (samples.empty()) throw DataError("mean_pooled_activation: empty domain");
    const Tensor mean = mean_feature(bb, samples, layer);
    const std::size_t c = mean.rank() == 3 ? mean.shape[0] : mean.shape.at(0);
    const std::size_t hw = mean.size() / c;
    std::vector<double> pooled(c, 0.0);
    for (std::size_t i = 0; i < c; ++i) {
        for (std::size_t s = 0; s < hw; ++s) pooled[i] += mean.data[i * hw + s];
        pooled[i] /= static_cast<double>(hw);
    }
    return pooled;
}

struct ChannelStats {
    std::size_t layer = 0;
    std::vector<std::vector<double>> mean_per_domain;  // K x C
    std::vector<double> stddev;                        // C, over the domain axis

    double mean_stddev() const {
        double acc = 0.0;
        for (double v : stddev) acc += v;
        return acc / static_cast<double>(stddev.size());
    }
};

// Cross-domain channel sensitivity: per-channel mean pooled activation
// per domain, then the population stddev across domains.
inline ChannelStats channel_sensitivity(const Backbone& bb, const std::vector<SampleGroup>& domains,
                                        std::size_t layer) {
    if (domains.size() < 2) throw DataError("channel_sensitivity: need >= 2 domains");
    ChannelStats out;
    out.layer = layer;
    for (const SampleGroup& g : domains)
        out.mean_per_domain.push_back(mean_pooled_activation(bb, g, layer));
    const std::size_t c = out.mean_per_domain[0].size();
    const double k = static_cast<double>(domains.size());
    out.stddev.resize(c);
    for (std::size_t j = 0; j < c; ++j) {
        double mu = 0.0;
        for (const auto& m : out.mean_per_domain) mu += m[j];
        mu /= k;
        double var = 0.0;
        for (const auto& m : out.mean_per_domain) var += (m[j] - mu) * (m[j] - mu);
        out.stddev[j] = std::sqrt(var / k);
    }
    return out;
}

// CMMD estimate between two domain mean features:
//   (1/C) sum_c || mean_a[c,:,:] - mean_b[c,:,:] ||_2
// The per-channel embedding is the per-spatial-position mean over the
// domain; for pooled (H=W=1) features it collapses to |a_c - b_c|.
inline double cmmd_from_means(const Tensor& mean_a, const Tensor& mean_b) {
    if (!mean_a.same_shape(mean_b)) throw DimensionError("cmmd: mean shape mismatch");
    const std::size_t c = mean_a.rank() == 3 ? mean_a.shape[0] : mean_a.shape.at(0);
    const std::size_t hw = mean_a.size() / c;
    double acc = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
        double sq = 0.0;
        for (std::size_t s = 0; s < hw; ++s) {
            const double d = mean_a.data[i * hw + s] - mean_b.data[i * hw + s];
            sq += d * d;
        }
        acc += std::sqrt(sq);
    }
    return acc / static_cast<double>(c);
}

inline double cmmd_hat(const Backbone& bb, const SampleGroup& domain_a, const SampleGroup& domain_b,
                       std::size_t layer) {
    return cmmd_from_means(mean_feature(bb, domain_a, layer), mean_feature(bb, domain_b, layer));
}

struct DivergenceReport {
    std::size_t layer = 0;
    std::vector<std::vector<double>> pairwise;  // K x K over source domains
    double beta_hat = 0.0;                      // max pairwise source divergence
    double gamma_hat = 0.0;                     // mean source-target divergence
    double inter_domain_gap = 0.0;
};

// Mean pairwise L2 distance between averaged full feature maps:
//   2/(K(K-1)) sum_{k1<k2} ||Fbar_k1 - Fbar_k2||_2
inline double inter_domain_gap(const Backbone& bb, const std::vector<SampleGroup>& sources,
                               std::size_t layer) {
    const std::size_t k = sources.size();
    if (k < 2) throw DataError("inter_domain_gap: need >= 2 domains");
    std::vector<Tensor> means;
    for (const SampleGroup& g : sources) means.push_back(mean_feature(bb, g, layer));
    double acc = 0.0;
    for (std::size_t a = 0; a < k; ++a)
        for (std::size_t b = a + 1; b < k; ++b) {
            double sq = 0.0;
            for (std::size_t j = 0; j < means[a].size(); ++j) {
                const double d = means[a].data[j] - means[b].data[j];
                sq += d * d;
            }
            acc += std::sqrt(sq);
        }
    return 2.0 / (static_cast<double>(k) * static_cast<double>(k - 1)) * acc;
}

inline DivergenceReport divergence_report(const Backbone& bb, const std::vector<SampleGroup>& sources,
                                          const SampleGroup& target, std::size_t layer) {
    const std::size_t k = sources.size();
    if (k < 2) throw DataError("divergence_report: need >= 2 source domains");
    DivergenceReport out;
    out.layer = layer;
    std::vector<Tensor> source_means;
    for (const SampleGroup& g : sources) source_means.push_back(mean_feature(bb, g, layer));
    const Tensor target_mean = mean_feature(bb, target, layer);
    out.pairwise.assign(k, std::vector<double>(k, 0.0));
    for (std::size_t a = 0; a < k; ++a)
        for (std::size_t b = a + 1; b < k; ++b) {
            const double d = cmmd_from_means(source_means[a], source_means[b]);
            out.pairwise[a][b] = out.pairwise[b][a] = d;
            out.beta_hat = std::max(out.beta_hat, d);
        }
    for (std::size_t a = 0; a < k; ++a)
        out.gamma_hat += cmmd_from_means(source_means[a], target_mean);
    out.gamma_hat /= static_cast<double>(k);
    out.inter_domain_gap = inter_domain_gap(bb, sources, layer);
    return out;
}

// ---- frozen-backbone domain probe --------------------------------------

struct ProbeConfig {
    std::size_t iterations = 200;
    double lr = 0.01;
    double holdout_fraction = 0.2;
    std::uint64_t seed = 1;
};

// Trains a fresh GAP+FC domain classifier on frozen features at one
// layer (full-batch gradient descent on the probe weights only) and
// reports held-out domain accuracy.
inline double layer_probe_accuracy(const Backbone& bb, const std::vector<DomainSample>& samples,
                                   std::size_t layer, const ProbeConfig& cfg) {
    if (samples.empty()) throw DataError("layer_probe_accuracy: no samples");
    std::size_t num_domains = 0;
    for (const DomainSample& s : samples) num_domains = std::max(num_domains, s.domain_label + 1);

    // Pooled features, computed once.
    std::vector<std::vector<double>> feats;
    std::vector<std::size_t> labels;
    feats.reserve(samples.size());
    for (const DomainSample& s : samples) {
        Tape tape;
        BackboneNodes nodes = register_backbone(tape, bb);
        std::vector<NodeId> middles;
        forward(tape, bb, nodes, s.features, {}, &middles);
        feats.push_back(tape.value(tape.global_avg_pool(middles.at(layer))).data);
        labels.push_back(s.domain_label);
    }
    const std::size_t c = feats[0].size();

    // Per-domain holdout split.
    Rng rng(stream_seed(cfg.seed, "probe-split"));
    std::vector<std::vector<std::size_t>> by_domain(num_domains);
    for (std::size_t i = 0; i < feats.size(); ++i) by_domain[labels[i]].push_back(i);
    std::vector<std::size_t> train_idx, test_idx;
    for (auto& idx : by_domain) {
        rng.shuffle(idx.begin(), idx.end());
        const std::size_t n_test =
            static_cast<std::size_t>(cfg.holdout_fraction * static_cast<double>(idx.size()));
        for (std::size_t i = 0; i < idx.size(); ++i)
            (i < n_test ? test_idx : train_idx).push_back(idx[i]);
    }
    if (train_idx.empty()) throw DataError("layer_probe_accuracy: empty train split");

    Rng wrng(stream_seed(cfg.seed, "probe-init"));
    Tensor w = uniform_init({num_domains, c}, c, wrng);
    Tensor b = uniform_init({num_domains}, c, wrng);

    std::vector<double> logits(num_domains);
    Tensor gw({num_domains, c});
    Tensor gb({num_domains});
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        std::fill(gw.data.begin(), gw.data.end(), 0.0);
        std::fill(gb.data.begin(), gb.data.end(), 0.0);
        for (std::size_t i : train_idx) {
            const std::vector<double>& x = feats[i];
            double mx = -1e300;
            for (std::size_t k = 0; k < num_domains; ++k) {
                double acc = b.data[k];
                for (std::size_t j = 0; j < c; ++j) acc += w.data[k * c + j] * x[j];
                logits[k] = acc;
                mx = std::max(mx, acc);
            }
            double z = 0.0;
            for (std::size_t k = 0; k < num_domains; ++k) z += std::exp(logits[k] - mx);
            for (std::size_t k = 0; k < num_domains; ++k) {
                const double g = std::exp(logits[k] - mx) / z - (k == labels[i] ? 1.0 : 0.0);
                gb.data[k] += g;
                for (std::size_t j = 0; j < c; ++j) gw.data[k * c + j] += g * x[j];
            }
        }
        const double step = cfg.lr / static_cast<double>(train_idx.size());
        for (std::size_t j = 0; j < gw.size(); ++j) {
            w.data[j] -= step * gw.data[j];
            if (!std::isfinite(w.data[j])) throw TrainingError("probe diverged (non-finite weight)");
        }
        for (std::size_t j = 0; j < gb.size(); ++j) b.data[j] -= step * gb.data[j];
    }

    const std::vector<std::size_t>& eval_idx = test_idx.empty() ? train_idx : test_idx;
    std::size_t correct = 0;
    for (std::size_t i : eval_idx) {
        const std::vector<double>& x = feats[i];
        std::size_t best = 0;
        double best_v = -1e300;
        for (std::size_t k = 0; k < num_domains; ++k) {
            double acc = b.data[k];
            for (std::size_t j = 0; j < c; ++j) acc += w.data[k * c + j] * x[j];
            if (acc > best_v) {
                best_v = acc;
                best = k;
            }
        }
        if (best == labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(eval_idx.size());
}

// ---- report files -------------------------------------------------------

inline void write_divergence_csv(const DivergenceReport& r, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path);
    os << "# pairwise cmmd_hat matrix, layer " << r.layer << "\n";
    for (const auto& row : r.pairwise) {
        for (std::size_t j = 0; j < row.size(); ++j) os << (j ? "," : "") << format_double(row[j]);
        os << "\n";
    }
}

inline void write_channel_stats_csv(const ChannelStats& s, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path);
    os << "channel";
    for (std::size_t d = 0; d < s.mean_per_domain.size(); ++d) os << ",mean_d" << d;
    os << ",stddev\n";
    for (std::size_t j = 0; j < s.stddev.size(); ++j) {
        os << j;
        for (const auto& m : s.mean_per_domain) os << "," << format_double(m[j]);
        os << "," << format_double(s.stddev[j]) << "\n";
    }
}

}  // namespace ddlab

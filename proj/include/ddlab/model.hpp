#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ddlab/rng.hpp"
#include "ddlab/tensor.hpp"

namespace ddlab {

class ConfigError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};
class TrainingError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};
class IoError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class BlockKind { Conv, Linear };

struct BlockSpec {
    BlockKind kind = BlockKind::Conv;
    std::size_t channels = 0;
    std::size_t kernel = 3;  // conv blocks only
};

struct BackboneConfig {
    std::size_t input_channels = 1;
    std::size_t input_height = 12;
    std::size_t input_width = 12;
    std::vector<BlockSpec> blocks = {{BlockKind::Conv, 8, 3},
                                     {BlockKind::Conv, 16, 3},
                                     {BlockKind::Conv, 16, 3}};
    std::size_t num_classes = 4;

    // Middle layers eligible for feature hooks: every block output plus
    // the pooled pre-classifier feature.
    std::size_t num_middle_layers() const { return blocks.size() + 1; }

    std::vector<std::size_t> middle_layer_channels() const {
        std::vector<std::size_t> c;
        for (const BlockSpec& b : blocks) c.push_back(b.channels);
        c.push_back(blocks.back().channels);  // pooled feature
        return c;
    }
};

struct Backbone {
    BackboneConfig config;
    // One weight tensor per block: {C_out,C_in,k,k} for conv blocks,
    // {C_out,C_in} plus bias for linear blocks.
    std::vector<Tensor> block_w;
    std::vector<Tensor> block_b;  // empty tensor for conv blocks
    Tensor fc_w;                  // {num_classes, C_last}
    Tensor fc_b;                  // {num_classes}

    std::vector<Tensor*> parameters() {
        std::vector<Tensor*> ps;
        for (std::size_t i = 0; i < block_w.size(); ++i) {
            ps.push_back(&block_w[i]);
            if (block_b[i].size() > 0) ps.push_back(&block_b[i]);
        }
        ps.push_back(&fc_w);
        ps.push_back(&fc_b);
        return ps;
    }
};

inline Tensor uniform_init(std::vector<std::size_t> shape, std::size_t fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& v : t.data) v = rng.uniform(-bound, bound);
    return t;
}

inline Backbone init_params(const BackboneConfig& config, std::uint64_t seed) {
    Rng rng(stream_seed(seed, "init"));
    Backbone bb;
    bb.config = config;
    std::size_t c = config.input_channels;
    std::size_t h = config.input_height;
    std::size_t w = config.input_width;
    for (const BlockSpec& spec : config.blocks) {
        if (spec.channels == 0) throw ConfigError("backbone block with zero channels");
        if (spec.kind == BlockKind::Conv) {
            if (spec.kernel > h || spec.kernel > w)
                throw ConfigError("backbone conv kernel larger than its input");
            const std::size_t fan_in = c * spec.kernel * spec.kernel;
            bb.block_w.push_back(uniform_init({spec.channels, c, spec.kernel, spec.kernel}, fan_in, rng));
            bb.block_b.push_back(Tensor{});
            h = h - spec.kernel + 1;
            w = w - spec.kernel + 1;
        } else {
            const std::size_t in_dim = c * h * w;  // linear blocks see the flattened feature
            bb.block_w.push_back(uniform_init({spec.channels, in_dim}, in_dim, rng));
            bb.block_b.push_back(uniform_init({spec.channels}, in_dim, rng));
            h = w = 1;
        }
        c = spec.channels;
    }
    bb.fc_w = uniform_init({config.num_classes, c}, c, rng);
    bb.fc_b = uniform_init({config.num_classes}, c, rng);
    return bb;
}

// A feature transform applied at one middle layer during the forward pass.
struct ForwardHook {
    std::size_t layer = 0;  // index into the middle-layer set
    std::function<NodeId(Tape&, NodeId)> transform;
};

struct ForwardResult {
    NodeId logits = -1;
    NodeId hooked_before = -1;  // feature at the hooked layer, pre-transform
    NodeId hooked_after = -1;   // post-transform (equal to before if no hook)
};

// Tape forward. Registers parameter leaves via `param_nodes` (filled on
// first use so one tape can run many samples against shared leaves).
struct BackboneNodes {
    std::vector<NodeId> block_w;
    std::vector<NodeId> block_b;
    NodeId fc_w = -1;
    NodeId fc_b = -1;
};

inline BackboneNodes register_backbone(Tape& tape, const Backbone& bb) {
    BackboneNodes n;
    for (std::size_t i = 0; i < bb.block_w.size(); ++i) {
        n.block_w.push_back(tape.leaf(bb.block_w[i]));
        n.block_b.push_back(bb.block_b[i].size() > 0 ? tape.leaf(bb.block_b[i]) : -1);
    }
    n.fc_w = tape.leaf(bb.fc_w);
    n.fc_b = tape.leaf(bb.fc_b);
    return n;
}

inline ForwardResult forward(Tape& tape, const Backbone& bb, const BackboneNodes& nodes,
                             const Tensor& input, const std::optional<ForwardHook>& hook = {},
                             std::vector<NodeId>* capture_middle = nullptr) {
    const std::size_t n_middle = bb.config.num_middle_layers();
    if (hook && hook->layer >= n_middle)
        throw ParameterError("forward: hook layer out of range");
    ForwardResult res;
    NodeId x = tape.leaf(input);
    auto maybe_hook = [&](std::size_t layer, NodeId feature) -> NodeId {
        if (capture_middle) capture_middle->push_back(feature);
        if (hook && hook->layer == layer) {
            res.hooked_before = feature;
            res.hooked_after = hook->transform ? hook->transform(tape, feature) : feature;
            return res.hooked_after;
        }
        return feature;
    };
    for (std::size_t i = 0; i < bb.block_w.size(); ++i) {
        if (bb.config.blocks[i].kind == BlockKind::Conv) {
            x = tape.relu(tape.conv2d(x, nodes.block_w[i]));
        } else {
            if (tape.value(x).rank() != 1) x = tape.flatten(x);
            x = tape.relu(tape.linear(nodes.block_w[i], x, nodes.block_b[i]));
        }
        x = maybe_hook(i, x);
    }
    NodeId pooled = tape.value(x).rank() == 1 ? x : tape.global_avg_pool(x);
    pooled = maybe_hook(bb.block_w.size(), pooled);
    res.logits = tape.linear(nodes.fc_w, pooled, nodes.fc_b);
    return res;
}

// Fast value-only forward for evaluation and analysis. Returns logits
// and every middle-layer feature.
struct ForwardValues {
    std::vector<Tensor> middle_features;
    std::vector<double> logits;
};

inline ForwardValues forward_values(const Backbone& bb, const Tensor& input) {
    Tape tape;
    BackboneNodes nodes = register_backbone(tape, bb);
    std::vector<NodeId> middles;
    ForwardResult r = forward(tape, bb, nodes, input, {}, &middles);
    ForwardValues out;
    out.logits = tape.value(r.logits).data;
    out.middle_features.reserve(middles.size());
    for (NodeId id : middles) out.middle_features.push_back(tape.value(id));
    return out;
}

inline Tensor middle_feature(const Backbone& bb, const Tensor& input, std::size_t layer) {
    Tape tape;
    BackboneNodes nodes = register_backbone(tape, bb);
    std::vector<NodeId> middles;
    forward(tape, bb, nodes, input, {}, &middles);
    return tape.value(middles.at(layer));
}

inline std::vector<double> logits_values(const Backbone& bb, const Tensor& input) {
    Tape tape;
    BackboneNodes nodes = register_backbone(tape, bb);
    ForwardResult r = forward(tape, bb, nodes, input);
    return tape.value(r.logits).data;
}

inline std::size_t argmax(const std::vector<double>& v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

// ---- optimizer -------------------------------------------------------

struct SgdConfig {
    double lr = 0.002;
    double momentum = 0.9;
    double weight_decay = 0.0005;
};

struct SgdState {
    std::vector<Tensor> velocity;

    void ensure(const std::vector<Tensor*>& params) {
        if (!velocity.empty()) return;
        for (const Tensor* p : params) velocity.emplace_back(p->shape);
    }
};

// v <- mu*v + (g + wd*p); p <- p - lr*v
inline void sgd_step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
                     SgdState& state, const SgdConfig& cfg, double lr) {
    state.ensure(params);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        const Tensor& g = *grads[i];
        Tensor& v = state.velocity[i];
        if (!p.same_shape(g)) throw DimensionError("sgd_step: gradient shape mismatch");
        for (std::size_t j = 0; j < p.size(); ++j) {
            if (!std::isfinite(g.data[j]))
                throw TrainingError("sgd_step: non-finite gradient");
            v.data[j] = cfg.momentum * v.data[j] + (g.data[j] + cfg.weight_decay * p.data[j]);
            p.data[j] -= lr * v.data[j];
        }
    }
}

// Step decay: initial lr until floor(0.8*total_epochs), then x0.1.
inline double lr_at_epoch(double initial_lr, std::size_t epoch, std::size_t total_epochs) {
    const std::size_t boundary = static_cast<std::size_t>(0.8 * static_cast<double>(total_epochs));
    return epoch < boundary ? initial_lr : initial_lr * 0.1;
}

// ---- checkpoint io ----------------------------------------------------

namespace io {

inline void write_u64(std::ostream& os, std::uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!is) throw IoError("truncated stream");
    return v;
}
inline void write_f64(std::ostream& os, double v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline double read_f64(std::istream& is) {
    double v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!is) throw IoError("truncated stream");
    return v;
}
inline void write_string(std::ostream& os, const std::string& s) {
    write_u64(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string read_string(std::istream& is) {
    std::string s(read_u64(is), '\0');
    is.read(s.data(), static_cast<std::streamsize>(s.size()));
    if (!is) throw IoError("truncated stream");
    return s;
}
inline void write_tensor(std::ostream& os, const Tensor& t) {
    write_u64(os, t.shape.size());
    for (std::size_t d : t.shape) write_u64(os, d);
    for (double v : t.data) write_f64(os, v);
}
inline Tensor read_tensor(std::istream& is) {
    std::vector<std::size_t> shape(read_u64(is));
    for (std::size_t& d : shape) d = read_u64(is);
    if (shape.empty()) return Tensor{};  // rank-0 marks an absent tensor
    Tensor t(shape);
    for (double& v : t.data) v = read_f64(is);
    return t;
}

}  // namespace io

}  // namespace ddlab

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace ddlab {

class DimensionError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};
class ParameterError : public std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
class IndexError : public std::out_of_range {
    using std::out_of_range::out_of_range;
};
class ValidationError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dense row-major array of 64-bit floats.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> s, double fill = 0.0)
        : shape(std::move(s)), data(count(shape), fill) {}
    Tensor(std::vector<std::size_t> s, std::vector<double> values)
        : shape(std::move(s)), data(std::move(values)) {
        if (data.size() != count(shape))
            throw DimensionError("tensor data length does not match shape");
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static std::size_t count(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t d : s) n *= d;
        return n;
    }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    double item() const {
        if (size() != 1) throw DimensionError("item() on non-scalar tensor");
        return data[0];
    }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

using NodeId = int;

// Define-by-run tape. Rebuilt every forward pass; a single backward
// sweep in reverse insertion order accumulates gradients into every
// node, so topological order holds by construction.
class Tape {
public:
    NodeId leaf(Tensor value) {
        nodes_.push_back(Node{std::move(value), {}, nullptr});
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
    const Tensor& grad(NodeId id) const { return nodes_.at(id).grad; }
    std::size_t size() const { return nodes_.size(); }

    NodeId matmul(NodeId a, NodeId b) {
        const Tensor& A = value(a);
        const Tensor& B = value(b);
        if (A.rank() != 2 || B.rank() != 2 || A.shape[1] != B.shape[0])
            throw DimensionError("matmul: inner dimensions disagree");
        const std::size_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
        Tensor C({m, n});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
                const double av = A.data[i * k + p];
                for (std::size_t j = 0; j < n; ++j)
                    C.data[i * n + j] += av * B.data[p * n + j];
            }
        return record(std::move(C), [this, a, b, m, k, n](const Tensor& g) {
            const Tensor& A = value(a);
            const Tensor& B = value(b);
            Tensor& dA = nodes_[a].grad;
            Tensor& dB = nodes_[b].grad;
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const double gv = g.data[i * n + j];
                    for (std::size_t p = 0; p < k; ++p) {
                        dA.data[i * k + p] += gv * B.data[p * n + j];
                        dB.data[p * n + j] += A.data[i * k + p] * gv;
                    }
                }
        });
    }

    // y = W x + b with W: {m,n}, x: {n}, b: {m}.
    NodeId linear(NodeId w, NodeId x, NodeId b) {
        const Tensor& W = value(w);
        const Tensor& X = value(x);
        const Tensor& Bv = value(b);
        if (W.rank() != 2 || X.rank() != 1 || Bv.rank() != 1 ||
            W.shape[1] != X.shape[0] || W.shape[0] != Bv.shape[0])
            throw DimensionError("linear: shape mismatch");
        const std::size_t m = W.shape[0], n = W.shape[1];
        Tensor Y({m});
        for (std::size_t i = 0; i < m; ++i) {
            double acc = Bv.data[i];
            for (std::size_t j = 0; j < n; ++j) acc += W.data[i * n + j] * X.data[j];
            Y.data[i] = acc;
        }
        return record(std::move(Y), [this, w, x, b, m, n](const Tensor& g) {
            const Tensor& W = value(w);
            const Tensor& X = value(x);
            Tensor& dW = nodes_[w].grad;
            Tensor& dX = nodes_[x].grad;
            Tensor& dB = nodes_[b].grad;
            for (std::size_t i = 0; i < m; ++i) {
                const double gv = g.data[i];
                dB.data[i] += gv;
                for (std::size_t j = 0; j < n; ++j) {
                    dW.data[i * n + j] += gv * X.data[j];
                    dX.data[j] += gv * W.data[i * n + j];
                }
            }
        });
    }

    // Valid convolution, stride 1. x: {C_in,H,W}, w: {C_out,C_in,kh,kw}.
    NodeId conv2d(NodeId x, NodeId w) {
        const Tensor& X = value(x);
        const Tensor& K = value(w);
        if (X.rank() != 3 || K.rank() != 4 || K.shape[1] != X.shape[0])
            throw DimensionError("conv2d: shape mismatch");
        const std::size_t cin = X.shape[0], h = X.shape[1], wd = X.shape[2];
        const std::size_t cout = K.shape[0], kh = K.shape[2], kw = K.shape[3];
        if (kh > h || kw > wd) throw DimensionError("conv2d: kernel larger than input");
        const std::size_t oh = h - kh + 1, ow = wd - kw + 1;
        Tensor Y({cout, oh, ow});
        for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t ci = 0; ci < cin; ++ci)
                for (std::size_t ky = 0; ky < kh; ++ky)
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const double kv = K.data[((co * cin + ci) * kh + ky) * kw + kx];
                        const double* xr = &X.data[(ci * h + ky) * wd + kx];
                        double* yr = &Y.data[co * oh * ow];
                        for (std::size_t oy = 0; oy < oh; ++oy)
                            for (std::size_t ox = 0; ox < ow; ++ox)
                                yr[oy * ow + ox] += kv * xr[oy * wd + ox];
                    }
        return record(std::move(Y),
                      [this, x, w, cin, h, wd, cout, kh, kw, oh, ow](const Tensor& g) {
            const Tensor& X = value(x);
            const Tensor& K = value(w);
            Tensor& dX = nodes_[x].grad;
            Tensor& dK = nodes_[w].grad;
            for (std::size_t co = 0; co < cout; ++co)
                for (std::size_t ci = 0; ci < cin; ++ci)
                    for (std::size_t ky = 0; ky < kh; ++ky)
                        for (std::size_t kx = 0; kx < kw; ++kx) {
                            const std::size_t ki = ((co * cin + ci) * kh + ky) * kw + kx;
                            const double kv = K.data[ki];
                            double dk = 0.0;
                            const double* xr = &X.data[(ci * h + ky) * wd + kx];
                            double* dxr = &dX.data[(ci * h + ky) * wd + kx];
                            const double* gr = &g.data[co * oh * ow];
                            for (std::size_t oy = 0; oy < oh; ++oy)
                                for (std::size_t ox = 0; ox < ow; ++ox) {
                                    const double gv = gr[oy * ow + ox];
                                    dk += gv * xr[oy * wd + ox];
                                    dxr[oy * wd + ox] += gv * kv;
                                }
                            dK.data[ki] += dk;
                        }
        });
    }

    // Per-channel spatial mean. Accepts {C,H,W} or a plain {C} vector
    // (treated as H=W=1). Output is {C}.
    NodeId global_avg_pool(NodeId x) {
        const Tensor& X = value(x);
        const auto [c, hw] = channel_layout(X);
        Tensor Y({c});
        for (std::size_t i = 0; i < c; ++i) {
            double acc = 0.0;
            for (std::size_t s = 0; s < hw; ++s) acc += X.data[i * hw + s];
            Y.data[i] = acc / static_cast<double>(hw);
        }
        return record(std::move(Y), [this, x, c, hw](const Tensor& g) {
            Tensor& dX = nodes_[x].grad;
            const double inv = 1.0 / static_cast<double>(hw);
            for (std::size_t i = 0; i < c; ++i) {
                const double gv = g.data[i] * inv;
                for (std::size_t s = 0; s < hw; ++s) dX.data[i * hw + s] += gv;
            }
        });
    }

    NodeId relu(NodeId x) {
        const Tensor& X = value(x);
        Tensor Y = X;
        for (double& v : Y.data) v = std::max(v, 0.0);
        return record(std::move(Y), [this, x](const Tensor& g) {
            const Tensor& X = value(x);
            Tensor& dX = nodes_[x].grad;
            for (std::size_t i = 0; i < g.size(); ++i)
                if (X.data[i] > 0.0) dX.data[i] += g.data[i];
        });
    }

    // Softened softmax exp(z/T)/sum exp(z/T), max-subtracted.
    NodeId softmax_t(NodeId logits, double temperature) {
        if (temperature <= 0.0) throw ParameterError("softmax_t: temperature must be > 0");
        const Tensor& Z = value(logits);
        Tensor Y = softmax_values(Z, temperature);
        const NodeId out = record_noback(std::move(Y));
        set_backward(out, [this, logits, out, temperature](const Tensor& g) {
            const Tensor& Y = value(out);
            Tensor& dZ = nodes_[logits].grad;
            double dot = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i) dot += g.data[i] * Y.data[i];
            for (std::size_t i = 0; i < g.size(); ++i)
                dZ.data[i] += Y.data[i] * (g.data[i] - dot) / temperature;
        });
        return out;
    }

    NodeId log_softmax(NodeId logits) {
        const Tensor& Z = value(logits);
        const std::size_t k = Z.size();
        const double mx = *std::max_element(Z.data.begin(), Z.data.end());
        double sum = 0.0;
        for (double v : Z.data) sum += std::exp(v - mx);
        const double lse = mx + std::log(sum);
        Tensor Y({k});
        for (std::size_t i = 0; i < k; ++i) Y.data[i] = Z.data[i] - lse;
        const NodeId out = record_noback(std::move(Y));
        set_backward(out, [this, logits, out, k](const Tensor& g) {
            const Tensor& Y = value(out);
            Tensor& dZ = nodes_[logits].grad;
            double gsum = 0.0;
            for (std::size_t i = 0; i < k; ++i) gsum += g.data[i];
            for (std::size_t i = 0; i < k; ++i)
                dZ.data[i] += g.data[i] - std::exp(Y.data[i]) * gsum;
        });
        return out;
    }

    NodeId cross_entropy(NodeId logits, std::size_t label) {
        const Tensor& Z = value(logits);
        if (label >= Z.size()) throw IndexError("cross_entropy: label out of range");
        const std::size_t k = Z.size();
        const double mx = *std::max_element(Z.data.begin(), Z.data.end());
        double sum = 0.0;
        for (double v : Z.data) sum += std::exp(v - mx);
        const double lse = mx + std::log(sum);
        Tensor Y = Tensor::scalar(lse - Z.data[label]);
        return record(std::move(Y), [this, logits, label, mx, lse, k](const Tensor& g) {
            const Tensor& Z = value(logits);
            Tensor& dZ = nodes_[logits].grad;
            const double gv = g.data[0];
            for (std::size_t i = 0; i < k; ++i) {
                const double p = std::exp(Z.data[i] - lse);
                dZ.data[i] += gv * (p - (i == label ? 1.0 : 0.0));
            }
            (void)mx;
        });
    }

    // KL(p || q) over probability vectors; q clamped at 1e-12 before
    // the log, 0*ln 0 := 0.
    NodeId kl_div(NodeId p, NodeId q) {
        const Tensor& P = value(p);
        const Tensor& Q = value(q);
        if (!P.same_shape(Q)) throw DimensionError("kl_div: shape mismatch");
        validate_probability(P, "kl_div: p");
        validate_probability(Q, "kl_div: q");
        double acc = 0.0;
        for (std::size_t i = 0; i < P.size(); ++i) {
            if (P.data[i] > 0.0)
                acc += P.data[i] * std::log(P.data[i] / std::max(Q.data[i], kClampQ));
        }
        return record(Tensor::scalar(acc), [this, p, q](const Tensor& g) {
            const Tensor& P = value(p);
            const Tensor& Q = value(q);
            Tensor& dP = nodes_[p].grad;
            Tensor& dQ = nodes_[q].grad;
            const double gv = g.data[0];
            for (std::size_t i = 0; i < P.size(); ++i) {
                const double qc = std::max(Q.data[i], kClampQ);
                if (P.data[i] > 0.0)
                    dP.data[i] += gv * (std::log(P.data[i] / qc) + 1.0);
                dQ.data[i] += gv * (-P.data[i] / qc);
            }
        });
    }

    // Gradient reversal: identity forward, grad scaled by -lambda.
    NodeId grl(NodeId x, double lambda) {
        if (lambda < 0.0) throw ParameterError("grl: lambda must be >= 0");
        Tensor Y = value(x);
        return record(std::move(Y), [this, x, lambda](const Tensor& g) {
            Tensor& dX = nodes_[x].grad;
            for (std::size_t i = 0; i < g.size(); ++i) dX.data[i] += -lambda * g.data[i];
        });
    }

    // Multiplies channel i by a fixed factor; factors carry no gradient.
    NodeId channel_scale(NodeId x, std::vector<double> factors) {
        const Tensor& X = value(x);
        const auto [c, hw] = channel_layout(X);
        if (factors.size() != c) throw DimensionError("channel_scale: factor length mismatch");
        Tensor Y = X;
        for (std::size_t i = 0; i < c; ++i)
            for (std::size_t s = 0; s < hw; ++s) Y.data[i * hw + s] *= factors[i];
        return record(std::move(Y), [this, x, f = std::move(factors), c, hw](const Tensor& g) {
            Tensor& dX = nodes_[x].grad;
            for (std::size_t i = 0; i < c; ++i)
                for (std::size_t s = 0; s < hw; ++s) dX.data[i * hw + s] += g.data[i * hw + s] * f[i];
        });
    }

    // View as a flat vector; identity backward.
    NodeId flatten(NodeId x) {
        Tensor Y = value(x);
        Y.shape = {Y.size()};
        return record(std::move(Y), [this, x](const Tensor& g) {
            Tensor& dX = nodes_[x].grad;
            for (std::size_t i = 0; i < g.size(); ++i) dX.data[i] += g.data[i];
        });
    }

    NodeId add(NodeId a, NodeId b) {
        const Tensor& A = value(a);
        const Tensor& B = value(b);
        if (!A.same_shape(B)) throw DimensionError("add: shape mismatch");
        Tensor Y = A;
        for (std::size_t i = 0; i < Y.size(); ++i) Y.data[i] += B.data[i];
        return record(std::move(Y), [this, a, b](const Tensor& g) {
            Tensor& dA = nodes_[a].grad;
            Tensor& dB = nodes_[b].grad;
            for (std::size_t i = 0; i < g.size(); ++i) {
                dA.data[i] += g.data[i];
                dB.data[i] += g.data[i];
            }
        });
    }

    NodeId scale(NodeId x, double c) {
        Tensor Y = value(x);
        for (double& v : Y.data) v *= c;
        return record(std::move(Y), [this, x, c](const Tensor& g) {
            Tensor& dX = nodes_[x].grad;
            for (std::size_t i = 0; i < g.size(); ++i) dX.data[i] += c * g.data[i];
        });
    }

    NodeId sum(NodeId x) {
        const Tensor& X = value(x);
        const double s = std::accumulate(X.data.begin(), X.data.end(), 0.0);
        return record(Tensor::scalar(s), [this, x](const Tensor& g) {
            Tensor& dX = nodes_[x].grad;
            for (double& v : dX.data) v += g.data[0];
        });
    }

    // Mean of scalar nodes in one tape node.
    NodeId mean_scalars(const std::vector<NodeId>& ids) {
        if (ids.empty()) throw ParameterError("mean_scalars: empty input");
        double acc = 0.0;
        for (NodeId id : ids) acc += value(id).item();
        acc /= static_cast<double>(ids.size());
        return record(Tensor::scalar(acc), [this, ids](const Tensor& g) {
            const double gv = g.data[0] / static_cast<double>(ids.size());
            for (NodeId id : ids) nodes_[id].grad.data[0] += gv;
        });
    }

    // One reverse sweep from a scalar seed. Gradients are freshly
    // zeroed each call, so repeated sweeps are bitwise-identical.
    void backward(NodeId loss) {
        if (value(loss).size() != 1)
            throw ParameterError("backward: seed must be scalar");
        for (Node& n : nodes_) {
            n.grad.shape = n.value.shape;
            n.grad.data.assign(n.value.size(), 0.0);
        }
        nodes_[loss].grad.data[0] = 1.0;
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            if (nodes_[i].back && nodes_[i].grad.size() > 0) nodes_[i].back(nodes_[i].grad);
        }
    }

    static Tensor softmax_values(const Tensor& z, double temperature) {
        const double mx = *std::max_element(z.data.begin(), z.data.end());
        Tensor y({z.size()});
        double sum = 0.0;
        for (std::size_t i = 0; i < z.size(); ++i) {
            y.data[i] = std::exp((z.data[i] - mx) / temperature);
            sum += y.data[i];
        }
        for (double& v : y.data) v /= sum;
        return y;
    }

private:
    static constexpr double kClampQ = 1e-12;

    struct Node {
        Tensor value;
        Tensor grad;
        std::function<void(const Tensor&)> back;
    };

    static std::pair<std::size_t, std::size_t> channel_layout(const Tensor& x) {
        if (x.rank() == 3) return {x.shape[0], x.shape[1] * x.shape[2]};
        if (x.rank() == 1) return {x.shape[0], 1};
        throw DimensionError("expected a {C,H,W} feature map or {C} vector");
    }

    static void validate_probability(const Tensor& p, const char* what) {
        double sum = 0.0;
        for (double v : p.data) {
            if (v < 0.0) throw ValidationError(std::string(what) + ": negative entry");
            sum += v;
        }
        if (std::abs(sum - 1.0) > 1e-9)
            throw ValidationError(std::string(what) + ": does not sum to 1");
    }

    NodeId record(Tensor value, std::function<void(const Tensor&)> back) {
        nodes_.push_back(Node{std::move(value), {}, std::move(back)});
        return static_cast<NodeId>(nodes_.size() - 1);
    }
    NodeId record_noback(Tensor value) {
        nodes_.push_back(Node{std::move(value), {}, nullptr});
        return static_cast<NodeId>(nodes_.size() - 1);
    }
    void set_backward(NodeId id, std::function<void(const Tensor&)> back) {
        nodes_[id].back = std::move(back);
    }

    std::vector<Node> nodes_;
};

}  // namespace ddlab
